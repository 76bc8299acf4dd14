"""Train one detector from an experiment config."""

import click

from diffound_mad.commands import experiment_options, handle_errors, load_experiment
from diffound_mad.core.lora import trainable_fraction
from diffound_mad.experiments import load_data, run_training
from diffound_mad.formatting import header, info, key_value, progress, success
from diffound_mad.storage.run_store import CHECKPOINT


@click.command()
@experiment_options
@handle_errors
def cli(config_file, overrides, seed, epochs, output):
    """Train adapters and head; writes checkpoint, loss trace and run manifest."""
    cfg, manager = load_experiment(config_file, overrides, seed, epochs, output)
    out_dir = manager.output_dir(cfg)
    header(f"Training {cfg.name}", f"config {cfg.hash()[:12]} · seed {cfg.seed}")
    fold = load_data(cfg)
    info(f"{len(fold.train)} training pairs ({fold.name} split)")

    with progress() as bar:
        task = bar.add_task("epochs", total=cfg.train.epochs, status="")

        def on_epoch(epoch: int, loss: float) -> None:
            bar.update(task, advance=1, status=f"loss {loss:.5f}")

        outcome = run_training(cfg, fold.train, out_dir, on_epoch=on_epoch)

    key_value(
        {
            "mode": outcome.model.mode,
            "final loss": outcome.loss_trace[-1],
            "trainable fraction": f"{100 * trainable_fraction(outcome.model.registry()):.3f}%",
            "run directory": str(out_dir),
        }
    )
    success(f"checkpoint written to {outcome.store.path(CHECKPOINT)}")
