"""Command modules; each exposes a click command or group named ``cli``."""

import functools
import logging
from typing import Any, Callable, Optional, Sequence

import click

from diffound_mad.config import ConfigManager, ExperimentConfig
from diffound_mad.errors import DiffoundError, ExitCode
from diffound_mad.formatting import error

logger = logging.getLogger(__name__)


def handle_errors(func: Callable) -> Callable:
    """Print package errors and exit with their code instead of a traceback."""

    @functools.wraps(func)
    def wrapper(*args: Any, **kwargs: Any) -> Any:
        try:
            return func(*args, **kwargs)
        except DiffoundError as exc:
            error(f"{type(exc).__name__}: {exc}")
            field = getattr(exc, "field", None)
            if field:
                error(f"field: {field}")
            logger.debug("command failed", exc_info=True)
            raise SystemExit(int(exc.exit_code))
        except KeyboardInterrupt:
            error("interrupted")
            raise SystemExit(int(ExitCode.FAILURE))

    return wrapper


def experiment_options(func: Callable) -> Callable:
    """``--config``, ``--set``, ``--seed``, ``--epochs``, ``--output``."""
    options = [
        click.option(
            "--config", "-c", "config_file", type=click.Path(dir_okay=False), help="Experiment file (YAML or JSON)"
        ),
        click.option("--set", "overrides", multiple=True, metavar="KEY=VALUE", help="Override a config field"),
        click.option("--seed", type=int, help="Experiment seed (wins over file and --set)"),
        click.option("--epochs", type=int, help="Training epochs (wins over file and --set)"),
        click.option("--output", "-o", type=click.Path(file_okay=False), help="Output directory"),
    ]
    for option in reversed(options):
        func = option(func)
    return func


def load_experiment(
    config_file: Optional[str],
    overrides: Sequence[str],
    seed: Optional[int],
    epochs: Optional[int],
    output: Optional[str],
) -> "tuple[ExperimentConfig, ConfigManager]":
    manager = ConfigManager()
    cfg = manager.load_config(
        config_file, overrides, flags={"seed": seed, "epochs": epochs, "output": output}
    )
    return cfg, manager
