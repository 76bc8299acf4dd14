"""Evaluation protocols: cross-database, leave-one-tool-out and the single-image ablation."""

import click

from diffound_mad.commands import experiment_options, handle_errors, load_experiment
from diffound_mad.config import PROTOCOLS
from diffound_mad.errors import ProtocolError
from diffound_mad.experiments import METRIC_COLUMNS, run_protocol
from diffound_mad.formatting import header, print_table, success, table


@click.command()
@click.argument("name", required=False, type=click.Choice(PROTOCOLS))
@experiment_options
@handle_errors
def cli(name, config_file, overrides, seed, epochs, output):
    """Run NAME (default: the config's ``protocol``) and write protocol.csv."""
    cfg, manager = load_experiment(config_file, overrides, seed, epochs, output)
    if name:
        cfg = cfg.model_copy(update={"protocol": name})
    if cfg.protocol is None:
        raise ProtocolError(f"no protocol given; choose one of {', '.join(PROTOCOLS)}")
    out_dir = manager.output_dir(cfg)
    header(f"Protocol {cfg.protocol}", f"{cfg.name} · seed {cfg.seed}")

    result = run_protocol(cfg, out_dir)

    t = table(cfg.protocol, ["run", "train", "test", *METRIC_COLUMNS])
    for row in result.rows:
        t.add_row(
            str(row["run"]), str(row["train"]), str(row["test"]), *(f"{row[c]:.2f}" for c in METRIC_COLUMNS)
        )
    print_table(t)
    success(f"protocol results written to {out_dir}")
