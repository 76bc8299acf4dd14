"""Morphing-attack-detection error rates.

Decision rule: a pair is classified as morph when ``score >= threshold``.

- MACER: share of morph attacks classified bona fide (``score < threshold``).
- BSCER: share of bona fide samples classified morph (``score >= threshold``).

Thresholds are swept over the sorted distinct observed scores plus one value
just above the largest score. Along that sweep MACER is non-decreasing and
BSCER non-increasing. All rates are percentages.
"""

import logging
import math
from dataclasses import dataclass, field
from typing import Dict, Iterable, List, Optional, Sequence, Tuple, Union

import numpy as np

from diffound_mad.core.model import BONA_FIDE, BONA_FIDE_TAG, MORPH
from diffound_mad.errors import ContractError, DomainError, ProtocolError

logger = logging.getLogger(__name__)

DEFAULT_MACER_TARGETS: Tuple[float, ...] = (10.0, 5.0, 1.0)


@dataclass(frozen=True)
class ScoreRecord:
    """One scored pair. ``score`` lies in ``[0, 1]``, higher is more morph-like."""

    pair_id: str
    label: int
    score: float
    tool_tag: str = BONA_FIDE_TAG

    def __post_init__(self) -> None:
        if self.label not in (BONA_FIDE, MORPH):
            raise ContractError(f"{self.pair_id}: label must be 0 or 1, got {self.label}")
        if not math.isfinite(self.score) or not 0.0 <= self.score <= 1.0:
            raise DomainError(f"{self.pair_id}: score {self.score} outside [0, 1]")


@dataclass(frozen=True)
class ScoreSet:
    """Scores split by class; the array form every metric works on.

    Unlike :class:`ScoreRecord`, scores only need to be finite, so transformed
    or third-party scores can be evaluated directly.
    """

    bona: np.ndarray
    morph: np.ndarray

    @classmethod
    def from_arrays(cls, bona: Iterable[float], morph: Iterable[float]) -> "ScoreSet":
        b = np.sort(np.asarray(list(bona), dtype=float))
        m = np.sort(np.asarray(list(morph), dtype=float))
        if not (np.all(np.isfinite(b)) and np.all(np.isfinite(m))):
            raise DomainError("scores must be finite")
        return cls(b, m)

    @classmethod
    def from_records(cls, records: Sequence[ScoreRecord]) -> "ScoreSet":
        return cls.from_arrays(
            (r.score for r in records if r.label == BONA_FIDE),
            (r.score for r in records if r.label == MORPH),
        )

    def require_both(self) -> None:
        if self.bona.size == 0 or self.morph.size == 0:
            raise ProtocolError(
                f"metrics need both classes, got {self.bona.size} bona fide "
                f"and {self.morph.size} morph scores"
            )


Scores = Union[Sequence[ScoreRecord], ScoreSet]


@dataclass(frozen=True)
class OperatingPoint:
    """A rate read at one threshold, with both error rates at that threshold."""

    rate: float
    threshold: float
    macer: float
    bscer: float
    achieved: bool = True


@dataclass(frozen=True)
class DetPoint:
    macer: float
    bscer: float
    threshold: float


@dataclass
class MetricsReport:
    d_eer: OperatingPoint
    bscer_at: Dict[float, OperatingPoint]
    det: List[DetPoint]
    num_bona: int
    num_morph: int
    interpolated_eer: float
    flat_scores: bool = False
    by_tool: Dict[str, "MetricsReport"] = field(default_factory=dict)

    def to_dict(self) -> Dict[str, object]:
        """Report file content: D-EER, BSCER at each MACER target, counts, thresholds."""
        out: Dict[str, object] = {"d_eer": self.d_eer.rate}
        thresholds: Dict[str, float] = {"d_eer": self.d_eer.threshold}
        for target, point in self.bscer_at.items():
            key = f"bscer_at_macer_{_target_key(target)}"
            out[key] = point.rate
            thresholds[key] = point.threshold
        out["counts"] = {"bonafide": self.num_bona, "morph": self.num_morph}
        out["thresholds"] = thresholds
        return out

    def diagnostics(self) -> Dict[str, object]:
        """Secondary outputs kept apart from the report schema."""
        return {
            "interpolated_eer": self.interpolated_eer,
            "flat_scores": self.flat_scores,
            "unreached_targets": [t for t, p in self.bscer_at.items() if not p.achieved],
            "by_tool": {tool: rep.to_dict() for tool, rep in self.by_tool.items()},
        }


def _target_key(target: float) -> str:
    return str(int(target)) if float(target).is_integer() else str(target).replace(".", "_")


def _as_scores(records: Scores) -> ScoreSet:
    return records if isinstance(records, ScoreSet) else ScoreSet.from_records(records)


def _percent(count: np.ndarray, total: int) -> np.ndarray:
    return 100.0 * count / total


def macer(records: Scores, threshold: float) -> float:
    s = _as_scores(records)
    if s.morph.size == 0:
        raise ProtocolError("MACER needs at least one morph score")
    count = np.searchsorted(s.morph, threshold, side="left")
    return float(_percent(count, s.morph.size))


def bscer(records: Scores, threshold: float) -> float:
    s = _as_scores(records)
    if s.bona.size == 0:
        raise ProtocolError("BSCER needs at least one bona fide score")
    count = s.bona.size - np.searchsorted(s.bona, threshold, side="left")
    return float(_percent(count, s.bona.size))


def thresholds(records: Scores) -> np.ndarray:
    """Distinct observed scores in ascending order plus one value above the maximum."""
    s = _as_scores(records)
    observed = np.unique(np.concatenate([s.bona, s.morph]))
    if observed.size == 0:
        raise ProtocolError("no scores to sweep")
    return np.append(observed, np.nextafter(observed[-1], np.inf))


def sweep(records: Scores) -> Tuple[np.ndarray, np.ndarray, np.ndarray]:
    """``(thresholds, macer, bscer)`` over the full threshold sweep."""
    s = _as_scores(records)
    s.require_both()
    taus = thresholds(s)
    m = _percent(np.searchsorted(s.morph, taus, side="left"), s.morph.size)
    b = _percent(s.bona.size - np.searchsorted(s.bona, taus, side="left"), s.bona.size)
    return taus, m, b


def d_eer(records: Scores) -> OperatingPoint:
    """Closest-gap operating point; ties go to the lower threshold."""
    taus, m, b = sweep(records)
    i = int(np.argmin(np.abs(m - b)))
    return OperatingPoint(float((m[i] + b[i]) / 2.0), float(taus[i]), float(m[i]), float(b[i]))


def bscer_at_macer(records: Scores, macer_target: float) -> OperatingPoint:
    """BSCER at the highest threshold whose MACER does not exceed ``macer_target``.

    When no threshold meets the target, the point with the smallest MACER is
    returned with ``achieved=False``.
    """
    if not 0.0 <= macer_target <= 100.0:
        raise ContractError(f"MACER target must be a percentage, got {macer_target}")
    taus, m, b = sweep(records)
    within = np.flatnonzero(m <= macer_target)
    if within.size:
        i, achieved = int(within[-1]), True
    else:
        i, achieved = int(np.argmin(m)), False
        logger.warning("MACER target %.2f%% not reachable, best is %.2f%%", macer_target, m[i])
    return OperatingPoint(float(b[i]), float(taus[i]), float(m[i]), float(b[i]), achieved)


def det_curve(records: Scores, resolution: Optional[int] = None) -> List[DetPoint]:
    """Empirical DET curve ordered by threshold, consecutive duplicates removed.

    ``resolution`` caps the number of points by even subsampling; the first
    and last points are always kept.
    """
    taus, m, b = sweep(records)
    keep = np.ones(taus.size, dtype=bool)
    keep[1:] = (m[1:] != m[:-1]) | (b[1:] != b[:-1])
    points = [DetPoint(float(mm), float(bb), float(t)) for t, mm, bb in zip(taus[keep], m[keep], b[keep])]
    if resolution is not None:
        if resolution < 2:
            raise ContractError(f"DET resolution must be at least 2, got {resolution}")
        if len(points) > resolution:
            picks = np.unique(np.linspace(0, len(points) - 1, resolution).round().astype(int))
            points = [points[i] for i in picks]
    return points


def interpolated_eer(records: Scores) -> float:
    """EER from linear interpolation between the two points bracketing MACER = BSCER."""
    _, m, b = sweep(records)
    diff = m - b
    crossed = diff >= 0
    if not np.any(crossed):
        return float((m[-1] + b[-1]) / 2.0)
    i = int(np.argmax(crossed))
    if diff[i] == 0 or i == 0:
        return float((m[i] + b[i]) / 2.0)
    t = -diff[i - 1] / (diff[i] - diff[i - 1])
    return float(m[i - 1] + t * (m[i] - m[i - 1]))


def compute_report(
    records: Scores,
    targets: Sequence[float] = DEFAULT_MACER_TARGETS,
    resolution: Optional[int] = None,
) -> MetricsReport:
    s = _as_scores(records)
    s.require_both()
    flat = bool(np.unique(np.concatenate([s.bona, s.morph])).size == 1)
    if flat:
        logger.warning("all %d scores are identical", s.bona.size + s.morph.size)
    return MetricsReport(
        d_eer=d_eer(s),
        bscer_at={float(t): bscer_at_macer(s, t) for t in targets},
        det=det_curve(s, resolution),
        num_bona=int(s.bona.size),
        num_morph=int(s.morph.size),
        interpolated_eer=interpolated_eer(s),
        flat_scores=flat,
    )


def report_by_tool(
    records: Sequence[ScoreRecord], targets: Sequence[float] = DEFAULT_MACER_TARGETS
) -> Dict[str, MetricsReport]:
    """One report per attack tool, each against all bona fide records."""
    bona = [r for r in records if r.label == BONA_FIDE]
    tools = sorted({r.tool_tag for r in records if r.label == MORPH})
    return {
        tool: compute_report(
            bona + [r for r in records if r.label == MORPH and r.tool_tag == tool], targets
        )
        for tool in tools
    }


def evaluate(
    records: Sequence[ScoreRecord],
    targets: Sequence[float] = DEFAULT_MACER_TARGETS,
    resolution: Optional[int] = None,
) -> MetricsReport:
    """Overall report plus the per-tool breakdown when more than one tool is present."""
    report = compute_report(records, targets, resolution)
    tools = report_by_tool(records, targets)
    if len(tools) > 1:
        report.by_tool = tools
    return report
