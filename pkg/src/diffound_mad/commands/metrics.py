"""Recompute metrics from a scores file without touching a model."""

from pathlib import Path

import click

from diffound_mad.commands import handle_errors
from diffound_mad.core.metrics import evaluate
from diffound_mad.formatting import key_value, success, warning
from diffound_mad.storage import RunStore
from diffound_mad.storage.score_files import read_scores


@click.command()
@click.argument("scores", type=click.Path(exists=True, dir_okay=False))
@click.option("--output", "-o", type=click.Path(file_okay=False), help="Output directory (default: next to SCORES)")
@click.option("--resolution", type=int, help="Maximum number of DET points")
@click.option("--plot/--no-plot", default=False, show_default=True, help="Write det.svg")
@handle_errors
def cli(scores, output, resolution, plot):
    """Read SCORES and write report.yaml, diagnostics.yaml and det.csv."""
    records = read_scores(scores)
    report = evaluate(records, resolution=resolution)
    out_dir = Path(output) if output else Path(scores).parent
    store = RunStore(out_dir)
    paths = store.write_evaluation(records, report, plot=plot)
    if report.flat_scores:
        warning("all scores are identical")
    key_value({k: v for k, v in report.to_dict().items() if k != "thresholds"}, "Metrics (%)")
    success(f"report written to {paths['report']}")
