"""LoRA hyperparameter grid search."""

import click

from diffound_mad.commands import experiment_options, handle_errors, load_experiment
from diffound_mad.config import GridConfig
from diffound_mad.experiments import METRIC_COLUMNS, grid_cells, run_grid
from diffound_mad.formatting import header, info, print_table, progress, success, table, warning


@click.command()
@experiment_options
@click.option("--workers", "-j", type=int, default=1, show_default=True, help="Cells trained in parallel")
@handle_errors
def cli(config_file, overrides, seed, epochs, output, workers):
    """Train and evaluate every (rank, alpha, dropout) cell; writes grid.csv."""
    if workers < 1:
        raise click.BadParameter("must be at least 1", param_hint="--workers")
    cfg, manager = load_experiment(config_file, overrides, seed, epochs, output)
    if cfg.grid is None:
        cfg = cfg.model_copy(update={"grid": GridConfig()})
        info("no grid in config, using the default search domains")
    out_dir = manager.output_dir(cfg)
    cells = list(grid_cells(cfg))
    header(f"Grid search {cfg.name}", f"{len(cells)} cells · {workers} worker(s)")

    with progress() as bar:
        task = bar.add_task("cells", total=len(cells), status="")

        def on_cell(row):
            bar.update(task, advance=1, status=f"r={row['rank']} α={row['alpha']:g} {row['status']}")

        rows = run_grid(cfg, out_dir, workers=workers, on_cell=on_cell)

    t = table("LoRA grid", ["rank", "alpha", "dropout", *METRIC_COLUMNS, "status"])
    for row in rows:
        metrics = [f"{row[c]:.2f}" if row["status"] == "ok" else "-" for c in METRIC_COLUMNS]
        label = "[bold green]best[/bold green]" if row["best"] == "true" else row["status"]
        t.add_row(str(row["rank"]), f"{row['alpha']:g}", f"{row['dropout']:g}", *metrics, label)
    print_table(t)
    failed = [r for r in rows if r["status"] != "ok"]
    if failed:
        warning(f"{len(failed)} cell(s) failed; see grid.csv")
    success(f"grid written to {out_dir / 'grid.csv'}")
