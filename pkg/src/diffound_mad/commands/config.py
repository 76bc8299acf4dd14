"""Experiment configuration commands."""

from pathlib import Path

import click
import yaml

from diffound_mad.commands import handle_errors
from diffound_mad.config import ConfigManager
from diffound_mad.formatting import console, header, key_value, success


@click.group()
def cli():
    """Inspect, create and validate experiment configs."""


@cli.command()
@click.option("--config", "-c", "config_file", type=click.Path(dir_okay=False), help="Experiment file")
@click.option("--set", "overrides", multiple=True, metavar="KEY=VALUE", help="Override a config field")
@handle_errors
def show(config_file, overrides):
    """Print the fully resolved config with defaults filled in."""
    manager = ConfigManager()
    cfg = manager.load_config(config_file, overrides)
    header(f"Config {cfg.name}", f"hash {cfg.hash()[:12]} · output {manager.output_dir(cfg)}")
    console.print(yaml.safe_dump(cfg.model_dump(mode="json"), default_flow_style=False, sort_keys=False))


@cli.command()
@click.argument("path", type=click.Path(dir_okay=False))
@click.option("--seed", type=int, default=0, show_default=True)
@click.option("--name", default="experiment", show_default=True)
@click.option("--force", is_flag=True, help="Overwrite an existing file")
@handle_errors
def init(path, seed, name, force):
    """Write a default experiment config to PATH."""
    if Path(path).exists() and not force:
        raise click.ClickException(f"{path} exists (use --force to overwrite)")
    manager = ConfigManager()
    manager.save_config(manager.create_default_config(seed=seed, name=name), path)
    success(f"config written to {path}")


@cli.command()
@click.argument("path", type=click.Path(exists=True, dir_okay=False))
@handle_errors
def validate(path):
    """Check PATH against the config schema."""
    cfg = ConfigManager().load_config(path)
    key_value(
        {
            "name": cfg.name,
            "seed": cfg.seed,
            "mode": cfg.model.mode,
            "protocol": cfg.protocol or "-",
            "hash": cfg.hash()[:12],
        }
    )
    success(f"{path} is valid")
