"""Score a dataset with a trained checkpoint and write metrics artifacts."""

from pathlib import Path

import click

from diffound_mad.commands import handle_errors
from diffound_mad.config import ConfigManager
from diffound_mad.core import checkpoint
from diffound_mad.experiments import dataset_input_hash, load_data, run_evaluation
from diffound_mad.formatting import header, info, key_value, success, warning
from diffound_mad.storage import DatasetStore, RunStore
from diffound_mad.storage.run_store import CHECKPOINT


def _checkpoint_path(path: str) -> Path:
    p = Path(path)
    return p / CHECKPOINT if p.is_dir() else p


@click.command()
@click.option(
    "--checkpoint", "-k", "checkpoint_path", required=True, type=click.Path(exists=True),
    help="Checkpoint file or run directory",
)
@click.option("--data", "-d", "data_dir", type=click.Path(file_okay=False), help="Dataset directory")
@click.option("--split", default="test", show_default=True, help="Dataset split to score ('all' for every split)")
@click.option(
    "--config", "-c", "config_file", type=click.Path(dir_okay=False),
    help="Experiment file whose test data is scored when --data is not given",
)
@click.option("--set", "overrides", multiple=True, metavar="KEY=VALUE", help="Override a config field")
@click.option("--output", "-o", type=click.Path(file_okay=False), help="Output directory (default: checkpoint's run directory)")
@click.option("--resolution", type=int, help="Maximum number of DET points")
@click.option("--plot/--no-plot", default=True, show_default=True, help="Write det.svg")
@handle_errors
def cli(checkpoint_path, data_dir, split, config_file, overrides, output, resolution, plot):
    """Write scores.csv, report.yaml, diagnostics.yaml, det.csv and det.svg."""
    ckpt = _checkpoint_path(checkpoint_path)
    if data_dir is not None:
        dataset = DatasetStore(data_dir).load()
        pairs = (
            [p for s in dataset.splits.values() for p in s] if split == "all" else dataset.split(split)
        )
        source = f"{data_dir} [{split}]"
    elif config_file is not None:
        cfg = ConfigManager().load_config(config_file, overrides)
        pairs = load_data(cfg).test
        source = f"{cfg.data.source} test split of {cfg.name}"
    else:
        raise click.UsageError("give --data or --config to choose what to score")
    model = checkpoint.load_model(ckpt, expected_input_hash=dataset_input_hash(pairs))
    out_dir = Path(output) if output else ckpt.parent
    header("Evaluation", f"{ckpt} on {source}")
    info(f"scoring {len(pairs)} pairs with a {model.mode} model")

    _, report = run_evaluation(model, pairs, RunStore(out_dir), plot=plot, resolution=resolution)

    if report.flat_scores:
        warning("all scores are identical: the detector does not separate the classes")
    for target, point in report.bscer_at.items():
        if not point.achieved:
            warning(f"MACER target {target:g}% not reachable")
    key_value({k: v for k, v in report.to_dict().items() if k != "thresholds"}, "Metrics (%)")
    if report.by_tool:
        key_value({tool: r.d_eer.rate for tool, r in report.by_tool.items()}, "D-EER by attack tool (%)")
    success(f"evaluation written to {out_dir}")
