"""diffound - differential morphing attack detection with LoRA-adapted ViT encoders."""

import click

from diffound_mad import __version__
from diffound_mad.commands.config import cli as config_cli
from diffound_mad.commands.data import cli as data_cli
from diffound_mad.commands.evaluate import cli as eval_cli
from diffound_mad.commands.grid import cli as grid_cli
from diffound_mad.commands.metrics import cli as metrics_cli
from diffound_mad.commands.protocol import cli as protocol_cli
from diffound_mad.commands.train import cli as train_cli
from diffound_mad.formatting import configure_logging, header, print_table, table
from diffound_mad.provenance import git_describe


@click.group()
@click.version_option(__version__, prog_name="diffound")
@click.option("--verbose", "-v", is_flag=True, help="Debug logging")
def cli(verbose):
    """Train, evaluate and compare differential morphing attack detectors."""
    configure_logging(verbose)


@cli.command()
def version():
    """Show version information."""
    import matplotlib
    import numpy

    header("diffound versions")
    version_table = table("Components", ["Component", "Version"])
    version_table.add_row("diffound-mad", __version__)
    version_table.add_row("source", git_describe())
    version_table.add_row("numpy", numpy.__version__)
    version_table.add_row("matplotlib", matplotlib.__version__)
    print_table(version_table)


cli.add_command(data_cli, name="gen-data")
cli.add_command(train_cli, name="train")
cli.add_command(eval_cli, name="eval")
cli.add_command(grid_cli, name="grid")
cli.add_command(protocol_cli, name="protocol")
cli.add_command(metrics_cli, name="metrics")
cli.add_command(config_cli, name="config")


if __name__ == "__main__":
    cli()
