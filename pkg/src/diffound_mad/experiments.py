"""Experiment runs behind the CLI: training, evaluation, LoRA grid and protocols.

Every function here is deterministic given the experiment config; outputs go
to run directories laid out by :class:`~diffound_mad.storage.RunStore`.
"""

import csv
import logging
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Dict, Iterator, List, Optional, Sequence, Tuple

import numpy as np

from diffound_mad.config import ExperimentConfig, GridConfig
from diffound_mad.core import checkpoint
from diffound_mad.core import model as M
from diffound_mad.core.lora import LoRAConfig
from diffound_mad.core.metrics import MetricsReport, ScoreRecord, evaluate
from diffound_mad.core.model import DiffoundModel, Mode, PairSample
from diffound_mad.core.synth import build_cross_database, build_protocol, leave_one_out
from diffound_mad.core.trainer import train
from diffound_mad.errors import ArtifactIOError, DiffoundError, ProtocolError
from diffound_mad.provenance import input_hash
from diffound_mad.storage import DatasetStore, RunStore
from diffound_mad.storage.plots import plot_det
from diffound_mad.storage.run_store import write_yaml
from diffound_mad.storage.score_files import write_det_csv

logger = logging.getLogger(__name__)

SCORE_BATCH = 64
METRIC_COLUMNS = ["d_eer", "bscer_at_macer_10", "bscer_at_macer_5", "bscer_at_macer_1"]
GRID_COLUMNS = ["rank", "alpha", "dropout", *METRIC_COLUMNS, "status", "best"]
PROTOCOL_COLUMNS = ["run", "train", "test", *METRIC_COLUMNS]

EpochCallback = Callable[[int, float], None]


@dataclass
class Fold:
    """One train/test pairing of a protocol."""

    name: str
    train: List[PairSample]
    test: List[PairSample]
    train_label: str = "train"
    test_label: str = "test"


@dataclass
class TrainOutcome:
    model: DiffoundModel
    loss_trace: List[float]
    store: RunStore


# Data


def _split_or_all(store: DatasetStore, preferred: str) -> Tuple[List[PairSample], str]:
    dataset = store.load()
    pairs = dataset.splits.get(preferred)
    if pairs is None:
        pairs = [p for split in dataset.splits.values() for p in split]
    return pairs, dataset.input_hash


def load_data(cfg: ExperimentConfig) -> Fold:
    """Train/test pairs: generated from ``data.synth`` or read from ``train_path``/``test_path``."""
    if cfg.data.source == "directory":
        train_pairs, train_hash = _split_or_all(DatasetStore(cfg.data.train_path), "train")
        test_pairs, test_hash = _split_or_all(DatasetStore(cfg.data.test_path), "test")
        if train_hash != test_hash:
            raise ProtocolError("train and test datasets have different image geometry")
        return Fold("directory", train_pairs, test_pairs)
    split = build_protocol(cfg.data.synth)
    return Fold(split.name, split.train.pairs, split.test.pairs)


def dataset_input_hash(pairs: Sequence[PairSample]) -> str:
    if not pairs:
        raise ProtocolError("empty dataset")
    shape = pairs[0].suspected.shape
    return input_hash(int(shape[-1]), int(shape[0]))


# Train and evaluate


def build_model(
    cfg: ExperimentConfig, lora: Optional[LoRAConfig] = None, mode: Optional[Mode] = None
) -> DiffoundModel:
    backbone = None
    if cfg.model.backbone_path:
        backbone = checkpoint.load_backbone(cfg.model.backbone_path)
    model = M.build(
        cfg.model.vit,
        lora or cfg.lora,
        mode=mode or cfg.model.mode,
        seed=cfg.seed,
        backbone=backbone,
        reverse_difference=cfg.model.reverse_difference,
    )
    model.metadata["config_hash"] = cfg.hash()
    return model


def run_training(
    cfg: ExperimentConfig,
    pairs: Sequence[PairSample],
    run_dir: Path,
    lora: Optional[LoRAConfig] = None,
    mode: Optional[Mode] = None,
    on_epoch: Optional[EpochCallback] = None,
) -> TrainOutcome:
    """Train one model and write checkpoint, loss trace and run manifest."""
    dataset_input_hash(pairs)
    store = RunStore(run_dir).ensure()
    model = build_model(cfg, lora, mode)
    if model.config.image_size != pairs[0].suspected.shape[-1]:
        raise ProtocolError(
            f"model expects {model.config.image_size}px images, data has {pairs[0].suspected.shape[-1]}px"
        )

    def epoch_done(epoch: int, loss: float) -> None:
        every = cfg.train.checkpoint_every
        if every and epoch % every == 0 and epoch < cfg.train.epochs:
            store.save_checkpoint(model, name=f"checkpoint_epoch{epoch:03d}.npz")
        if on_epoch is not None:
            on_epoch(epoch, loss)

    result = train(model, pairs, cfg.train, cfg.focal, on_epoch=epoch_done)
    store.save_checkpoint(model)
    store.write_loss(result.loss_trace)
    store.write_manifest(
        cfg,
        cfg.seed,
        "train",
        extra={
            "mode": model.mode,
            "lora": model.lora_config.model_dump(mode="json"),
            "epochs": len(result.loss_trace),
            "final_loss": result.loss_trace[-1],
            "train_pairs": len(pairs),
        },
    )
    return TrainOutcome(model, result.loss_trace, store)


def score_pairs(model: DiffoundModel, pairs: Sequence[PairSample]) -> List[ScoreRecord]:
    records = []
    for start in range(0, len(pairs), SCORE_BATCH):
        chunk = pairs[start : start + SCORE_BATCH]
        for pair, s in zip(chunk, M.score_batch(model, chunk)):
            records.append(ScoreRecord(pair.pair_id, pair.label, float(s), pair.tool_tag))
    return records


def run_evaluation(
    model: DiffoundModel,
    pairs: Sequence[PairSample],
    store: RunStore,
    prefix: str = "",
    plot: bool = True,
    resolution: Optional[int] = None,
) -> Tuple[List[ScoreRecord], MetricsReport]:
    records = score_pairs(model, pairs)
    report = evaluate(records, resolution=resolution)
    store.write_evaluation(records, report, plot=plot, prefix=prefix)
    return records, report


def metric_row(report: MetricsReport) -> Dict[str, float]:
    data = report.to_dict()
    return {col: float(data[col]) for col in METRIC_COLUMNS}


def write_rows(path: Path, columns: Sequence[str], rows: Sequence[Dict[str, object]]) -> Path:
    try:
        with open(path, "w", newline="", encoding="utf-8") as f:
            writer = csv.DictWriter(f, fieldnames=list(columns), lineterminator="\n")
            writer.writeheader()
            for row in rows:
                writer.writerow({k: row.get(k, "") for k in columns})
    except OSError as exc:
        raise ArtifactIOError(f"cannot write table ({exc.strerror})", path) from exc
    return path


# Grid search


def protocol_folds(cfg: ExperimentConfig) -> List[Fold]:
    """Folds a grid cell is scored on: both cross-database directions, or the plain split."""
    if cfg.protocol == "known_attack_cross":
        db_a, db_b = build_cross_database(cfg.data.synth)
        return [
            Fold("a_to_b", db_a.pairs, db_b.pairs, db_a.name, db_b.name),
            Fold("b_to_a", db_b.pairs, db_a.pairs, db_b.name, db_a.name),
        ]
    return [load_data(cfg)]


def grid_cells(cfg: ExperimentConfig) -> Iterator[Tuple[LoRAConfig, str]]:
    """``(adapter config, cell name)`` for every grid combination."""
    grid = cfg.grid or GridConfig()
    for lora in grid.cells(cfg.lora):
        yield lora, f"r{lora.rank}_a{lora.alpha:g}_d{lora.dropout:g}"


def _grid_cell(args: Tuple[ExperimentConfig, LoRAConfig, str, Path, List[Fold]]) -> Dict[str, object]:
    cfg, lora, name, out_dir, folds = args
    row: Dict[str, object] = {"rank": lora.rank, "alpha": lora.alpha, "dropout": lora.dropout}
    try:
        per_fold = []
        for fold in folds:
            run_dir = out_dir / name / fold.name
            outcome = run_training(cfg, fold.train, run_dir, lora=lora)
            _, report = run_evaluation(outcome.model, fold.test, outcome.store, plot=False)
            per_fold.append(metric_row(report))
        for col in METRIC_COLUMNS:
            row[col] = float(np.mean([m[col] for m in per_fold]))
        row["status"] = "ok"
    except DiffoundError as exc:
        logger.warning("grid cell %s failed: %s", name, exc)
        row["status"] = f"failed:{exc}"
    return row


def mark_best(rows: List[Dict[str, object]]) -> List[Dict[str, object]]:
    """Flag the successful row with the lowest mean D-EER (first one on ties)."""
    ok = [i for i, r in enumerate(rows) if r["status"] == "ok"]
    best = min(ok, key=lambda i: rows[i]["d_eer"]) if ok else None
    for i, r in enumerate(rows):
        r["best"] = "true" if i == best else "false"
    return rows


def run_grid(
    cfg: ExperimentConfig,
    out_dir: Path,
    workers: int = 1,
    on_cell: Optional[Callable[[Dict[str, object]], None]] = None,
) -> List[Dict[str, object]]:
    """Train and evaluate every grid cell; writes ``grid.csv``."""
    folds = protocol_folds(cfg)
    jobs = [(cfg, lora, name, out_dir, folds) for lora, name in grid_cells(cfg)]
    RunStore(out_dir).ensure()
    rows: List[Dict[str, object]] = []
    if workers > 1:
        with ProcessPoolExecutor(max_workers=workers) as pool:
            for row in pool.map(_grid_cell, jobs):
                rows.append(row)
                if on_cell:
                    on_cell(row)
    else:
        for job in jobs:
            row = _grid_cell(job)
            rows.append(row)
            if on_cell:
                on_cell(row)
    mark_best(rows)
    write_rows(out_dir / "grid.csv", GRID_COLUMNS, rows)
    store = RunStore(out_dir)
    store.track(out_dir / "grid.csv")
    store.write_manifest(cfg, cfg.seed, "grid", extra={"cells": len(rows), "folds": [f.name for f in folds]})
    return rows


# Protocols


@dataclass
class ProtocolResult:
    rows: List[Dict[str, object]]
    curves: Dict[str, list] = field(default_factory=dict)


def _run_fold(cfg: ExperimentConfig, fold: Fold, run_dir: Path, mode: Optional[Mode] = None):
    outcome = run_training(cfg, fold.train, run_dir, mode=mode)
    _, report = run_evaluation(outcome.model, fold.test, outcome.store)
    return report


def known_attack_cross(cfg: ExperimentConfig, out_dir: Path) -> ProtocolResult:
    rows = []
    for fold in protocol_folds(cfg.model_copy(update={"protocol": "known_attack_cross"})):
        report = _run_fold(cfg, fold, out_dir / fold.name)
        rows.append({"run": fold.name, "train": fold.train_label, "test": fold.test_label, **metric_row(report)})
    mean = {col: float(np.mean([r[col] for r in rows])) for col in METRIC_COLUMNS}
    rows.append({"run": "mean", "train": "", "test": "", **mean})
    return ProtocolResult(rows)


def unknown_attack_loo(cfg: ExperimentConfig, out_dir: Path) -> ProtocolResult:
    tools = cfg.data.synth.artefact_models
    if len(tools) < 2:
        raise ProtocolError(f"leave-one-out needs at least 2 artefact models, config has {list(tools)}")
    rows = []
    for run in leave_one_out(cfg.data.synth, tools):
        name = f"heldout_{run.held_out}_{run.direction}"
        fold = Fold(name, run.split.train.pairs, run.split.test.pairs)
        report = _run_fold(cfg, fold, out_dir / name)
        rows.append(
            {
                "run": name,
                "train": "+".join(run.split.train.tools),
                "test": "+".join(run.split.test.tools),
                **metric_row(report),
            }
        )
    return ProtocolResult(rows)


def ablation_smad(cfg: ExperimentConfig, out_dir: Path) -> ProtocolResult:
    """Differential and single-image detectors on identical data and seeds."""
    fold = load_data(cfg)
    rows, curves = [], {}
    for mode in M.MODES:
        report = _run_fold(cfg, fold, out_dir / mode, mode=mode)
        curves[mode] = report.det
        rows.append({"run": mode, "train": fold.train_label, "test": fold.test_label, **metric_row(report)})
    return ProtocolResult(rows, curves)


PROTOCOL_RUNNERS = {
    "known_attack_cross": known_attack_cross,
    "unknown_attack_loo": unknown_attack_loo,
    "ablation_smad": ablation_smad,
}


def run_protocol(cfg: ExperimentConfig, out_dir: Path) -> ProtocolResult:
    """Run ``cfg.protocol`` and write ``protocol.csv`` (plus paired DET curves for the ablation)."""
    if cfg.protocol is None:
        raise ProtocolError("config has no protocol set")
    if cfg.protocol != "ablation_smad" and cfg.data.source != "synth":
        raise ProtocolError(f"{cfg.protocol} generates its own databases and needs synthetic data")
    store = RunStore(out_dir).ensure()
    result = PROTOCOL_RUNNERS[cfg.protocol](cfg, out_dir)
    write_rows(out_dir / "protocol.csv", PROTOCOL_COLUMNS, result.rows)
    store.track(out_dir / "protocol.csv")
    if result.curves:
        for mode, points in result.curves.items():
            store.track(write_det_csv(out_dir / f"det_{mode}.csv", points))
        store.track(plot_det(out_dir / "det_paired.svg", result.curves, title="differential vs single image"))
    write_yaml(out_dir / "protocol.yaml", {"protocol": cfg.protocol, "config_hash": cfg.hash(), "rows": result.rows})
    store.track(out_dir / "protocol.yaml")
    store.write_manifest(cfg, cfg.seed, "protocol", extra={"protocol": cfg.protocol, "runs": len(result.rows)})
    return result
