"""Run directories: checkpoint, loss trace, manifest, scores, reports and DET artifacts."""

import csv
import logging
from datetime import datetime, timezone
from pathlib import Path
from typing import Any, Dict, List, Mapping, Optional, Sequence, Union

import yaml

from diffound_mad.core import checkpoint
from diffound_mad.core.metrics import DetPoint, MetricsReport, ScoreRecord
from diffound_mad.core.model import DiffoundModel
from diffound_mad.errors import ArtifactIOError
from diffound_mad.provenance import manifest_fields
from diffound_mad.storage.plots import plot_det
from diffound_mad.storage.score_files import write_det_csv, write_scores

logger = logging.getLogger(__name__)

CHECKPOINT = "checkpoint.npz"
LOSS = "loss.csv"
MANIFEST = "run.yaml"
SCORES = "scores.csv"
REPORT = "report.yaml"
DIAGNOSTICS = "diagnostics.yaml"
DET_CSV = "det.csv"
DET_SVG = "det.svg"


def write_yaml(path: Path, data: Mapping[str, Any]) -> Path:
    try:
        path.parent.mkdir(parents=True, exist_ok=True)
        with open(path, "w", encoding="utf-8") as f:
            yaml.safe_dump(dict(data), f, default_flow_style=False, sort_keys=False)
    except OSError as exc:
        raise ArtifactIOError(f"cannot write {path.name} ({exc.strerror})", path) from exc
    return path


def read_yaml(path: Path) -> Dict[str, Any]:
    try:
        with open(path, "r", encoding="utf-8") as f:
            data = yaml.safe_load(f) or {}
    except OSError as exc:
        raise ArtifactIOError(f"cannot read {path.name} ({exc.strerror})", path) from exc
    except yaml.YAMLError as exc:
        raise ArtifactIOError(f"cannot parse {path.name} ({exc})", path) from exc
    if not isinstance(data, dict):
        raise ArtifactIOError("expected a mapping", path)
    return data


class RunStore:
    """File layout of one training or evaluation run.

    ``timestamps`` in the manifest are the only non-reproducible content, and
    they are kept out of the score, report and DET files.
    """

    def __init__(self, run_dir: Union[str, Path]):
        self.run_dir = Path(run_dir)
        self.artifacts: List[str] = []

    def path(self, name: str) -> Path:
        return self.run_dir / name

    def ensure(self) -> "RunStore":
        try:
            self.run_dir.mkdir(parents=True, exist_ok=True)
        except OSError as exc:
            raise ArtifactIOError(f"cannot create run directory ({exc.strerror})", self.run_dir) from exc
        return self

    def track(self, path: Path) -> Path:
        if path.name not in self.artifacts:
            self.artifacts.append(path.name)
        return path

    # training artifacts

    def save_checkpoint(self, model: DiffoundModel, name: str = CHECKPOINT) -> Path:
        return self.track(checkpoint.save_model(self.path(name), model))

    def write_loss(self, trace: Sequence[float]) -> Path:
        path = self.path(LOSS)
        try:
            with open(path, "w", newline="", encoding="utf-8") as f:
                writer = csv.writer(f, lineterminator="\n")
                writer.writerow(["epoch", "mean_loss"])
                for epoch, loss in enumerate(trace, start=1):
                    writer.writerow([epoch, repr(float(loss))])
        except OSError as exc:
            raise ArtifactIOError(f"cannot write loss trace ({exc.strerror})", path) from exc
        return self.track(path)

    def read_loss(self) -> List[float]:
        path = self.path(LOSS)
        try:
            with open(path, newline="", encoding="utf-8") as f:
                return [float(row["mean_loss"]) for row in csv.DictReader(f)]
        except (OSError, KeyError, ValueError) as exc:
            raise ArtifactIOError(f"cannot read loss trace ({exc})", path) from exc

    def write_manifest(
        self, config: Any, seed: int, kind: str, extra: Optional[Mapping[str, Any]] = None
    ) -> Path:
        """``run.yaml``: config, config hash, seed, provenance, timestamps, artifact list."""
        cfg = config.model_dump(mode="json") if hasattr(config, "model_dump") else dict(config)
        manifest = {
            "kind": kind,
            **manifest_fields(config, seed),
            "created_at": datetime.now(timezone.utc).isoformat(timespec="seconds"),
            "artifacts": sorted(self.artifacts),
            **(extra or {}),
            "config": cfg,
        }
        return write_yaml(self.path(MANIFEST), manifest)

    def read_manifest(self) -> Dict[str, Any]:
        return read_yaml(self.path(MANIFEST))

    # evaluation artifacts

    def write_evaluation(
        self,
        records: Sequence[ScoreRecord],
        report: MetricsReport,
        curves: Optional[Mapping[str, Sequence[DetPoint]]] = None,
        plot: bool = True,
        prefix: str = "",
    ) -> Dict[str, Path]:
        """Scores, report, diagnostics, DET CSV and (optionally) the DET plot."""
        self.ensure()
        paths = {
            "scores": write_scores(self.path(prefix + SCORES), records),
            "report": write_yaml(self.path(prefix + REPORT), report.to_dict()),
            "diagnostics": write_yaml(self.path(prefix + DIAGNOSTICS), report.diagnostics()),
            "det_csv": write_det_csv(self.path(prefix + DET_CSV), report.det),
        }
        if plot:
            paths["det_svg"] = plot_det(
                self.path(prefix + DET_SVG), curves or {"detector": report.det}
            )
        for p in paths.values():
            self.track(p)
        return paths
