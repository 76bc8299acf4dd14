"""Procedural pair generator standing in for real face databases.

An identity is a smooth colour pattern: a shared base layout plus
identity-specific sinusoids and a few gaussian "landmark" blobs. A capture
renders the pattern under a small random shift and brightness change and adds
sensor noise. Morphs blend renders of two identities and then apply the
artefact model of the simulated morphing tool:

- ``landmark_like`` duplicates edges at a small offset (ghosting) and keeps
  high-frequency content.
- ``diffusion_like`` smooths the blend and leaves no ghosting.

Every image is a pure function of ``(config, identity, index)``; each sample
derives its own random stream from the config seed.
"""

import logging
from dataclasses import dataclass, field
from typing import Dict, List, Literal, Optional, Sequence, Tuple

import numpy as np
from pydantic import BaseModel, ConfigDict, Field, field_validator, model_validator

from diffound_mad.core.model import BONA_FIDE, BONA_FIDE_TAG, MORPH, PairSample
from diffound_mad.errors import ConfigValidationError, ContractError, ProtocolError

logger = logging.getLogger(__name__)

ArtefactModel = Literal["landmark_like", "diffusion_like"]
ARTEFACT_MODELS: Tuple[str, ...] = ("landmark_like", "diffusion_like")
Domain = Literal["controlled", "uncontrolled"]

NUM_WAVES = 4
NUM_LANDMARKS = 5
MAX_FREQUENCY = 3.0

# stream tags mixed into per-sample seeds
_IDENTITY, _CAPTURE, _MORPH, _SPLIT = 0, 1, 2, 3


class SynthConfig(BaseModel):
    """Generator settings; ``seed`` pins every image."""

    model_config = ConfigDict(frozen=True, extra="forbid")

    image_size: int = Field(32, ge=8)
    channels: int = Field(3, ge=1)
    num_identities: int = Field(80, ge=2)
    captures_per_identity: int = Field(4, ge=1)
    morphs_per_identity: int = Field(2, ge=1)
    beta: float = Field(0.5, ge=0.0, le=1.0, description="Blend weight of identity a")
    artefact_models: Tuple[ArtefactModel, ...] = ("landmark_like",)
    artefact_strength: float = Field(1.0, ge=0.0)
    domain: Domain = "controlled"
    identity_amplitude: float = Field(0.12, gt=0)
    base_amplitude: float = Field(0.15, ge=0)
    shift_jitter: float = Field(1.0, ge=0, description="Max capture shift in pixels")
    brightness_jitter: float = Field(0.1, ge=0, description="Std of the per-capture gain")
    noise_std: float = Field(0.03, ge=0)
    ghost_offset: int = Field(2, ge=1)
    test_fraction: float = Field(0.5, gt=0, lt=1)
    seed: int = 0

    @field_validator("artefact_models")
    @classmethod
    def _distinct_tools(cls, value: Tuple[str, ...]) -> Tuple[str, ...]:
        if not value:
            raise ValueError("artefact_models must name at least one tool")
        if len(set(value)) != len(value):
            raise ValueError("artefact_models must not repeat a tool")
        return value

    @model_validator(mode="after")
    def _offset_fits(self) -> "SynthConfig":
        if self.ghost_offset >= self.image_size // 2:
            raise ValueError("ghost_offset must be smaller than half the image size")
        return self

    @property
    def noise(self) -> float:
        return self.noise_std * (1.7 if self.domain == "uncontrolled" else 1.0)


@dataclass(frozen=True)
class Identity:
    """Seeded pattern parameters of one synthetic subject."""

    id: int
    waves: np.ndarray  # [channels, NUM_WAVES, 4]: fx, fy, phase, amplitude
    landmarks: np.ndarray  # [NUM_LANDMARKS, 4]: cx, cy, sigma, amplitude
    tint: np.ndarray  # [channels]
    jitter_scale: float = 1.0


def _rng(cfg: SynthConfig, *keys: int) -> np.random.Generator:
    return np.random.default_rng([cfg.seed, *keys])


def make_identity(identity_id: int, cfg: SynthConfig) -> Identity:
    rng = _rng(cfg, _IDENTITY, identity_id)
    waves = np.empty((cfg.channels, NUM_WAVES, 4))
    waves[..., 0:2] = rng.uniform(-MAX_FREQUENCY, MAX_FREQUENCY, size=(cfg.channels, NUM_WAVES, 2))
    waves[..., 2] = rng.uniform(0, 2 * np.pi, size=(cfg.channels, NUM_WAVES))
    waves[..., 3] = cfg.identity_amplitude * rng.uniform(0.5, 1.0, size=(cfg.channels, NUM_WAVES))
    landmarks = np.column_stack(
        [
            rng.uniform(0.25, 0.75, size=(NUM_LANDMARKS, 2)),
            rng.uniform(0.04, 0.09, size=NUM_LANDMARKS),
            rng.choice([-1.0, 1.0], size=NUM_LANDMARKS) * rng.uniform(0.1, 0.2, size=NUM_LANDMARKS),
        ]
    )
    tint = rng.uniform(-0.05, 0.05, size=cfg.channels)
    return Identity(identity_id, waves, landmarks, tint)


def make_identities(cfg: SynthConfig, offset: int = 0) -> List[Identity]:
    return [make_identity(offset + i, cfg) for i in range(cfg.num_identities)]


def _grid(size: int, shift: np.ndarray) -> Tuple[np.ndarray, np.ndarray]:
    coords = (np.arange(size) + 0.5) / size
    yy, xx = np.meshgrid(coords - shift[1] / size, coords - shift[0] / size, indexing="ij")
    return xx, yy


def _render(identity: Identity, cfg: SynthConfig, rng: np.random.Generator) -> np.ndarray:
    """Noiseless view of the identity under a random shift and brightness."""
    shift = rng.uniform(-1, 1, size=2) * cfg.shift_jitter * identity.jitter_scale
    brightness = 1.0 + rng.normal(0, cfg.brightness_jitter * identity.jitter_scale)
    xx, yy = _grid(cfg.image_size, shift)
    base = 0.5 + cfg.base_amplitude * (
        np.exp(-((xx - 0.5) ** 2 + (yy - 0.5) ** 2) / 0.08) - 0.5
    )
    image = np.empty((cfg.channels, cfg.image_size, cfg.image_size))
    for c in range(cfg.channels):
        fx, fy, phase, amp = identity.waves[c].T
        arg = 2 * np.pi * (fx[:, None, None] * xx + fy[:, None, None] * yy) + phase[:, None, None]
        image[c] = base + identity.tint[c] + (amp[:, None, None] * np.sin(arg)).sum(axis=0)
    for cx, cy, sigma, amp in identity.landmarks:
        image += amp * np.exp(-((xx - cx) ** 2 + (yy - cy) ** 2) / (2 * sigma**2))
    return brightness * image


def gaussian_blur(image: np.ndarray, sigma: float) -> np.ndarray:
    """Separable blur of a ``[C, H, W]`` image with edge padding."""
    if sigma <= 0:
        return image
    radius = max(1, int(np.ceil(3 * sigma)))
    taps = np.exp(-(np.arange(-radius, radius + 1) ** 2) / (2 * sigma**2))
    taps /= taps.sum()
    out = image
    for axis in (-1, -2):
        pad = [(0, 0)] * out.ndim
        pad[axis] = (radius, radius)
        padded = np.pad(out, pad, mode="edge")
        n = out.shape[axis]
        out = sum(w * np.take(padded, range(k, k + n), axis=axis) for k, w in enumerate(taps))
    return out


def _finish(image: np.ndarray, cfg: SynthConfig, rng: np.random.Generator) -> np.ndarray:
    """Acquisition effects of the domain, sensor noise, clamping."""
    lighting = rng.uniform(-1, 1, size=2)
    if cfg.domain == "uncontrolled":
        xx, yy = _grid(cfg.image_size, np.zeros(2))
        image = image + 0.2 * (lighting[0] * (xx - 0.5) + lighting[1] * (yy - 0.5))
        image = gaussian_blur(image, 0.7)
    noisy = image + rng.normal(0, cfg.noise, size=image.shape)
    return np.clip(noisy, 0.0, 1.0)


def capture(identity: Identity, cfg: SynthConfig, index: int) -> np.ndarray:
    """Capture ``index`` of ``identity``; bitwise reproducible for a fixed seed."""
    rng = _rng(cfg, _CAPTURE, identity.id, index)
    return _finish(_render(identity, cfg, rng), cfg, rng)


def _ghosting(blend: np.ndarray, offset: int, strength: float) -> np.ndarray:
    dx = np.abs(blend - np.roll(blend, offset, axis=-1))
    dy = np.abs(blend - np.roll(blend, offset, axis=-2))
    return blend + 0.5 * strength * (dx + dy)


def apply_artefact(blend: np.ndarray, tool: str, cfg: SynthConfig) -> np.ndarray:
    if cfg.artefact_strength == 0:
        return blend
    if tool == "landmark_like":
        return _ghosting(blend, cfg.ghost_offset, cfg.artefact_strength)
    if tool == "diffusion_like":
        return gaussian_blur(blend, 0.8 * cfg.artefact_strength)
    raise ContractError(f"unknown artefact model '{tool}' (choose from {', '.join(ARTEFACT_MODELS)})")


def make_bona_fide_pair(
    identity: Identity, cfg: SynthConfig, i: int = 0, j: int = 1, pair_id: Optional[str] = None
) -> PairSample:
    """Two distinct captures of one identity."""
    if cfg.captures_per_identity < 2:
        raise ConfigValidationError(
            "bona fide pairs need at least 2 captures per identity", field="captures_per_identity"
        )
    if i == j:
        raise ContractError("bona fide pair needs two different capture indices")
    return PairSample(
        pair_id=pair_id or f"bf-{identity.id}-{i}-{j}",
        suspected=capture(identity, cfg, i),
        live=capture(identity, cfg, j),
        label=BONA_FIDE,
        tool_tag=BONA_FIDE_TAG,
    )


def make_morph_pair(
    identity_a: Identity,
    identity_b: Identity,
    cfg: SynthConfig,
    tool: str,
    index: int = 0,
    pair_id: Optional[str] = None,
) -> PairSample:
    """Blend of ``a`` and ``b`` with the tool's artefacts, live capture of ``a``."""
    if identity_a.id == identity_b.id:
        raise ContractError(f"morph needs two identities, got {identity_a.id} twice")
    rng = _rng(cfg, _MORPH, identity_a.id, identity_b.id, index)
    blend = cfg.beta * _render(identity_a, cfg, rng) + (1 - cfg.beta) * _render(identity_b, cfg, rng)
    suspected = _finish(apply_artefact(blend, tool, cfg), cfg, rng)
    return PairSample(
        pair_id=pair_id or f"ma-{identity_a.id}-{identity_b.id}-{tool}-{index}",
        suspected=suspected,
        live=capture(identity_a, cfg, 0),
        label=MORPH,
        tool_tag=tool,
    )


def high_frequency_energy(image: np.ndarray, cutoff: float = 0.25) -> float:
    """Spectral energy above ``cutoff`` (cycles/pixel) of a ``[C, H, W]`` image."""
    centred = image - image.mean(axis=(-2, -1), keepdims=True)
    power = np.abs(np.fft.fft2(centred)) ** 2
    fy = np.fft.fftfreq(image.shape[-2])[:, None]
    fx = np.fft.fftfreq(image.shape[-1])[None, :]
    return float(power[..., np.hypot(fx, fy) > cutoff].sum())


# Datasets and protocols


@dataclass
class Split:
    name: str
    pairs: List[PairSample]
    identity_ids: frozenset
    tools: Tuple[str, ...]

    def counts(self) -> Dict[str, int]:
        morph = sum(p.label == MORPH for p in self.pairs)
        return {"bonafide": len(self.pairs) - morph, "morph": morph}


@dataclass
class ProtocolSplit:
    train: Split
    test: Split
    name: str = "identity"
    metadata: Dict[str, str] = field(default_factory=dict)


def build_split(
    identities: Sequence[Identity], cfg: SynthConfig, tools: Sequence[str], name: str
) -> Split:
    """Bona fide and morph pairs whose identities all come from ``identities``."""
    if len(identities) < 2:
        raise ProtocolError(f"split '{name}' needs at least 2 identities, got {len(identities)}")
    for tool in tools:
        if tool not in ARTEFACT_MODELS:
            raise ContractError(f"unknown artefact model '{tool}'")
    pairs: List[PairSample] = []
    for ident in identities:
        for j in range(1, cfg.captures_per_identity):
            pairs.append(make_bona_fide_pair(ident, cfg, 0, j, pair_id=f"{name}-bf-{ident.id}-{j}"))
    ids = [ident.id for ident in identities]
    for a_pos, ident in enumerate(identities):
        rng = _rng(cfg, _SPLIT, ident.id)
        others = [i for i in range(len(identities)) if i != a_pos]
        partners = rng.choice(others, size=cfg.morphs_per_identity, replace=len(others) < cfg.morphs_per_identity)
        for k, b_pos in enumerate(partners):
            for tool in tools:
                pairs.append(
                    make_morph_pair(
                        ident,
                        identities[b_pos],
                        cfg,
                        tool,
                        index=k,
                        pair_id=f"{name}-ma-{ident.id}-{identities[b_pos].id}-{tool}-{k}",
                    )
                )
    split = Split(name, pairs, frozenset(ids), tuple(tools))
    logger.debug("split %s: %s", name, split.counts())
    return split


def _partition(cfg: SynthConfig, offset: int = 0) -> Tuple[List[Identity], List[Identity]]:
    if cfg.num_identities < 4:
        raise ProtocolError(f"protocols need at least 4 identities, got {cfg.num_identities}")
    identities = make_identities(cfg, offset)
    order = _rng(cfg, _SPLIT, 2**31).permutation(len(identities))
    n_test = min(max(2, int(round(cfg.test_fraction * len(identities)))), len(identities) - 2)
    test = [identities[i] for i in sorted(order[:n_test])]
    train = [identities[i] for i in sorted(order[n_test:])]
    return train, test


def build_protocol(
    cfg: SynthConfig,
    train_tools: Optional[Sequence[str]] = None,
    test_tools: Optional[Sequence[str]] = None,
    swap: bool = False,
) -> ProtocolSplit:
    """Identity-disjoint train/test split, optionally tool-disjoint.

    ``train_tools``/``test_tools`` default to ``cfg.artefact_models``. When
    both are given they must not overlap. ``swap`` exchanges the two identity
    groups.
    """
    train_ids, test_ids = _partition(cfg)
    if swap:
        train_ids, test_ids = test_ids, train_ids
    tr_tools = tuple(train_tools or cfg.artefact_models)
    te_tools = tuple(test_tools or cfg.artefact_models)
    tool_disjoint = train_tools is not None and test_tools is not None
    if tool_disjoint and set(tr_tools) & set(te_tools):
        raise ProtocolError(f"tools {sorted(set(tr_tools) & set(te_tools))} appear in both splits")
    result = ProtocolSplit(
        train=build_split(train_ids, cfg, tr_tools, "train"),
        test=build_split(test_ids, cfg, te_tools, "test"),
        name="tool_disjoint" if tool_disjoint else "identity",
        metadata={"direction": "swapped" if swap else "forward"},
    )
    logger.info(
        "protocol %s: train %s, test %s", result.name, result.train.counts(), result.test.counts()
    )
    return result


@dataclass
class LeaveOneOutRun:
    held_out: str
    direction: str
    split: ProtocolSplit


def leave_one_out(cfg: SynthConfig, tools: Sequence[str] = ARTEFACT_MODELS) -> List[LeaveOneOutRun]:
    """Train on all tools but one, test on the held-out one, in both identity directions."""
    if len(tools) < 2:
        raise ProtocolError(f"leave-one-out needs at least 2 tools, got {len(tools)}")
    runs = []
    for held_out in tools:
        rest = [t for t in tools if t != held_out]
        for direction, swap in (("forward", False), ("swapped", True)):
            runs.append(
                LeaveOneOutRun(held_out, direction, build_protocol(cfg, rest, [held_out], swap=swap))
            )
    return runs


def build_cross_database(cfg: SynthConfig) -> Tuple[Split, Split]:
    """Two identity-disjoint databases: one controlled, one uncontrolled."""
    databases = []
    for k, domain in enumerate(("controlled", "uncontrolled")):
        db_cfg = cfg.model_copy(update={"domain": domain, "seed": cfg.seed + 1000 * (k + 1)})
        identities = make_identities(db_cfg, offset=k * cfg.num_identities)
        databases.append(build_split(identities, db_cfg, cfg.artefact_models, f"db_{domain}"))
    return databases[0], databases[1]
