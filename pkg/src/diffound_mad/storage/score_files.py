"""Score CSV (``pair_id,label,score,tool_tag``) and DET CSV (``macer,bscer,threshold``)."""

import csv
import logging
from pathlib import Path
from typing import Iterable, List, Sequence, Union

from diffound_mad.core.metrics import DetPoint, ScoreRecord
from diffound_mad.core.model import BONA_FIDE, BONA_FIDE_TAG, MORPH
from diffound_mad.errors import ArtifactIOError, DomainError

logger = logging.getLogger(__name__)

SCORE_COLUMNS = ["pair_id", "label", "score", "tool_tag"]
DET_COLUMNS = ["macer", "bscer", "threshold"]
LABELS = {BONA_FIDE: "bonafide", MORPH: "morph"}
LABEL_VALUES = {v: k for k, v in LABELS.items()}

PathLike = Union[str, Path]


def write_scores(path: PathLike, records: Iterable[ScoreRecord]) -> Path:
    path = Path(path)
    try:
        with open(path, "w", newline="", encoding="utf-8") as f:
            writer = csv.writer(f, lineterminator="\n")
            writer.writerow(SCORE_COLUMNS)
            for r in records:
                writer.writerow([r.pair_id, LABELS[r.label], repr(float(r.score)), r.tool_tag])
    except OSError as exc:
        raise ArtifactIOError(f"cannot write scores ({exc.strerror})", path) from exc
    return path


def read_scores(path: PathLike) -> List[ScoreRecord]:
    """Parse a score CSV; ``tool_tag`` may be omitted (defaults per label)."""
    path = Path(path)
    try:
        with open(path, newline="", encoding="utf-8") as f:
            reader = csv.DictReader(f)
            missing = {"pair_id", "label", "score"} - set(reader.fieldnames or [])
            if missing:
                raise ArtifactIOError(f"score file lacks columns {sorted(missing)}", path)
            records = []
            for line, row in enumerate(reader, start=2):
                label = LABEL_VALUES.get(row["label"].strip().lower())
                if label is None:
                    raise ArtifactIOError(f"line {line}: unknown label '{row['label']}'", path)
                try:
                    score = float(row["score"])
                    tool = (row.get("tool_tag") or "").strip()
                    records.append(
                        ScoreRecord(
                            row["pair_id"],
                            label,
                            score,
                            tool or (BONA_FIDE_TAG if label == BONA_FIDE else "unknown"),
                        )
                    )
                except (ValueError, DomainError) as exc:
                    raise ArtifactIOError(f"line {line}: {exc}", path) from exc
    except ArtifactIOError:
        raise
    except OSError as exc:
        raise ArtifactIOError(f"cannot read scores ({exc.strerror})", path) from exc
    logger.debug("read %d score records from %s", len(records), path)
    return records


def write_det_csv(path: PathLike, points: Sequence[DetPoint]) -> Path:
    path = Path(path)
    try:
        with open(path, "w", newline="", encoding="utf-8") as f:
            writer = csv.writer(f, lineterminator="\n")
            writer.writerow(DET_COLUMNS)
            for p in points:
                writer.writerow([repr(p.macer), repr(p.bscer), repr(p.threshold)])
    except OSError as exc:
        raise ArtifactIOError(f"cannot write DET curve ({exc.strerror})", path) from exc
    return path


def read_det_csv(path: PathLike) -> List[DetPoint]:
    path = Path(path)
    try:
        with open(path, newline="", encoding="utf-8") as f:
            return [
                DetPoint(float(row["macer"]), float(row["bscer"]), float(row["threshold"]))
                for row in csv.DictReader(f)
            ]
    except (OSError, KeyError, ValueError) as exc:
        raise ArtifactIOError(f"cannot read DET curve ({exc})", path) from exc
