"""Focal-loss training of adapters and head.

Batches are class balanced, images are augmented independently per side, and
trainable parameters are updated with Adam and decoupled weight decay. The
frozen backbone is never touched.
"""

import logging
import math
from dataclasses import dataclass, field
from typing import Callable, Dict, Iterator, List, Optional, Sequence, Tuple

import numpy as np
from pydantic import BaseModel, ConfigDict, Field

from diffound_mad.core import tensor as T
from diffound_mad.core.model import BONA_FIDE, MORPH, DiffoundModel, PairSample, logits
from diffound_mad.core.tensor import Node
from diffound_mad.errors import (
    ContractError,
    NumericalError,
    ProtocolError,
    TrainingDivergedError,
)

logger = logging.getLogger(__name__)

P_T_EPS = 1e-12


class FocalLossConfig(BaseModel):
    """``alpha_t`` weighs the morph class (``1 - alpha_t`` bona fide); ``eta`` focuses."""

    model_config = ConfigDict(frozen=True, extra="forbid")

    alpha_t: float = Field(0.25, ge=0.0, le=1.0)
    eta: float = Field(2.0, ge=0.0)


class AugmentFlags(BaseModel):
    model_config = ConfigDict(frozen=True, extra="forbid")

    random_crop: bool = True
    horizontal_flip: bool = True
    photometric: bool = False
    crop_fraction: float = Field(0.1, ge=0.0, lt=0.5)
    flip_probability: float = Field(0.5, ge=0.0, le=1.0)
    jitter_range: Tuple[float, float] = (0.8, 1.2)


class TrainConfig(BaseModel):
    model_config = ConfigDict(frozen=True, extra="forbid")

    epochs: int = Field(30, ge=1)
    batch_size: int = Field(16, ge=2)
    learning_rate: float = Field(1e-4, gt=0)
    weight_decay: float = Field(0.01, ge=0)
    decoupled_weight_decay: bool = True
    beta1: float = Field(0.9, ge=0, lt=1)
    beta2: float = Field(0.999, ge=0, lt=1)
    adam_eps: float = Field(1e-8, gt=0)
    seed: int = 0
    augmentation: AugmentFlags = AugmentFlags()
    balanced_sampling: bool = True
    checkpoint_every: Optional[int] = Field(None, ge=1)


# Loss


def focal_loss(
    logit: Node, label: np.ndarray, cfg: FocalLossConfig = FocalLossConfig()
) -> Node:
    """Mean of ``-alpha_t (1 - p_t)^eta log(p_t)``.

    ``p_t = sigmoid(logit)`` for morphs and ``1 - sigmoid(logit)`` for bona
    fides; ``p_t`` is clamped to ``[1e-12, 1 - 1e-12]``.
    """
    labels = np.asarray(label, dtype=float).reshape(logit.shape)
    if not np.all((labels == BONA_FIDE) | (labels == MORPH)):
        raise ContractError("focal_loss labels must be 0 or 1")
    p = T.sigmoid(logit)
    p_t = p * T.constant(labels) + (1.0 - p) * T.constant(1.0 - labels)
    p_t = T.clip(p_t, P_T_EPS, 1.0 - P_T_EPS)
    alpha = T.constant(np.where(labels == MORPH, cfg.alpha_t, 1.0 - cfg.alpha_t))
    per_sample = -(alpha * T.power(1.0 - p_t, cfg.eta) * T.log(p_t))
    return T.reduce_mean(per_sample)


# Sampling


def _split_by_label(dataset: Sequence[PairSample]) -> Tuple[np.ndarray, np.ndarray]:
    labels = np.array([pair.label for pair in dataset])
    bona = np.flatnonzero(labels == BONA_FIDE)
    morph = np.flatnonzero(labels == MORPH)
    if bona.size == 0 or morph.size == 0:
        raise ProtocolError(
            f"dataset needs both classes, got {bona.size} bona fide and {morph.size} morph pairs"
        )
    return bona, morph


def _draw(indices: np.ndarray, total: int, rng: np.random.Generator) -> np.ndarray:
    order = indices[rng.permutation(indices.size)]
    if total > order.size:
        extra = indices[rng.integers(0, indices.size, size=total - order.size)]
        order = np.concatenate([order, extra])
    return order[:total]


def balanced_batches(
    dataset: Sequence[PairSample], batch_size: int, seed: int
) -> Iterator[List[PairSample]]:
    """One epoch of batches with ``ceil(b/2)`` bona fide and ``floor(b/2)`` morph pairs.

    The larger class is covered once in shuffled order; the smaller class is
    resampled with replacement to fill its slots.
    """
    if batch_size < 2:
        raise ContractError("balanced batches need batch_size >= 2")
    bona, morph = _split_by_label(dataset)
    n_bona, n_morph = math.ceil(batch_size / 2), batch_size // 2
    num_batches = max(math.ceil(bona.size / n_bona), math.ceil(morph.size / n_morph))
    rng = np.random.default_rng(seed)
    bona_order = _draw(bona, num_batches * n_bona, rng)
    morph_order = _draw(morph, num_batches * n_morph, rng)
    for i in range(num_batches):
        chosen = np.concatenate(
            [
                bona_order[i * n_bona : (i + 1) * n_bona],
                morph_order[i * n_morph : (i + 1) * n_morph],
            ]
        )
        yield [dataset[j] for j in chosen[rng.permutation(chosen.size)]]


def shuffled_batches(
    dataset: Sequence[PairSample], batch_size: int, seed: int
) -> Iterator[List[PairSample]]:
    """Plain shuffled batches in natural class proportions."""
    _split_by_label(dataset)
    order = np.random.default_rng(seed).permutation(len(dataset))
    for start in range(0, order.size, batch_size):
        yield [dataset[j] for j in order[start : start + batch_size]]


# Augmentation


def augment(image: np.ndarray, flags: AugmentFlags, rng: np.random.Generator) -> np.ndarray:
    """Pad-and-crop, horizontal flip and brightness/contrast jitter on ``[C, H, W]``."""
    out = image
    if flags.random_crop and flags.crop_fraction > 0:
        side = image.shape[-1]
        pad = int(round(flags.crop_fraction * side))
        if pad > 0:
            padded = np.pad(out, ((0, 0), (pad, pad), (pad, pad)), mode="edge")
            dy, dx = rng.integers(0, 2 * pad + 1, size=2)
            out = padded[:, dy : dy + image.shape[-2], dx : dx + side]
    if flags.horizontal_flip and rng.random() < flags.flip_probability:
        out = out[:, :, ::-1]
    if flags.photometric:
        low, high = flags.jitter_range
        brightness, contrast = rng.uniform(low, high, size=2)
        mean = out.mean()
        out = np.clip((out - mean) * contrast + mean * brightness, 0.0, 1.0)
    return np.ascontiguousarray(out)


# Optimiser


@dataclass
class AdamState:
    step: int = 0
    m: Dict[int, np.ndarray] = field(default_factory=dict)
    v: Dict[int, np.ndarray] = field(default_factory=dict)


def adam_step(
    params: Sequence[Node],
    grads: Sequence[Optional[np.ndarray]],
    state: AdamState,
    lr: float,
    wd: float = 0.0,
    beta1: float = 0.9,
    beta2: float = 0.999,
    eps: float = 1e-8,
    decoupled: bool = True,
) -> AdamState:
    """One bias-corrected Adam update of the trainable ``params``.

    Weight decay is decoupled (``p -= lr * wd * p``) unless ``decoupled`` is
    false, in which case ``wd * p`` is added to the gradient. Frozen nodes are
    skipped.
    """
    if len(params) != len(grads):
        raise ContractError(f"got {len(grads)} gradients for {len(params)} parameters")
    state.step += 1
    t = state.step
    for param, grad in zip(params, grads):
        if not param.requires_grad:
            continue
        key = id(param)
        g = np.zeros_like(param.value) if grad is None else grad
        if g.shape != param.shape:
            raise ContractError(f"gradient shape {g.shape} != parameter shape {param.shape}")
        m = state.m.get(key, np.zeros_like(param.value))
        v = state.v.get(key, np.zeros_like(param.value))
        if m.shape != param.shape or v.shape != param.shape:
            raise ContractError(f"optimiser state shape mismatch for {param.name}")
        value = param.value
        if wd and not decoupled:
            g = g + wd * value
        m = beta1 * m + (1.0 - beta1) * g
        v = beta2 * v + (1.0 - beta2) * g * g
        m_hat = m / (1.0 - beta1**t)
        v_hat = v / (1.0 - beta2**t)
        if wd and decoupled:
            value = value - lr * wd * value
        param.assign(value - lr * m_hat / (np.sqrt(v_hat) + eps))
        state.m[key], state.v[key] = m, v
    return state


# Training loop


@dataclass
class TrainResult:
    model: DiffoundModel
    loss_trace: List[float]


EpochCallback = Callable[[int, float], None]


def _parameter_norms(model: DiffoundModel) -> Dict[str, float]:
    return {
        name: float(np.linalg.norm(node.value)) for name, node in model.registry().trainable()
    }


def train(
    model: DiffoundModel,
    dataset: Sequence[PairSample],
    cfg: TrainConfig = TrainConfig(),
    focal: FocalLossConfig = FocalLossConfig(),
    on_epoch: Optional[EpochCallback] = None,
) -> TrainResult:
    """Optimise adapters and head; returns the per-epoch mean loss trace."""
    if not dataset:
        raise ProtocolError("training dataset is empty")
    _split_by_label(dataset)
    params = model.trainable_parameters()
    state = AdamState()
    batch_seq, aug_seq, drop_seq = np.random.SeedSequence(cfg.seed).spawn(3)
    batch_rng = np.random.default_rng(batch_seq)
    aug_rng = np.random.default_rng(aug_seq)
    drop_rng = np.random.default_rng(drop_seq)
    make_batches = balanced_batches if cfg.balanced_sampling else shuffled_batches
    differential = model.mode == "differential"
    trace: List[float] = []
    batch_id = 0
    logger.info(
        "training %s model: %d pairs, %d epochs, %d trainable tensors",
        model.mode,
        len(dataset),
        cfg.epochs,
        len(params),
    )
    for epoch in range(1, cfg.epochs + 1):
        losses = []
        epoch_seed = int(batch_rng.integers(0, 2**63 - 1))
        for batch in make_batches(dataset, cfg.batch_size, epoch_seed):
            suspected = np.stack([augment(p.suspected, cfg.augmentation, aug_rng) for p in batch])
            live = None
            if differential:
                live = np.stack([augment(p.live, cfg.augmentation, aug_rng) for p in batch])
            labels = np.array([p.label for p in batch], dtype=float)
            T.zero_grad(params)
            try:
                loss = focal_loss(
                    logits(model, suspected, live, training=True, rng=drop_rng), labels, focal
                )
                T.backward(loss)
            except NumericalError as exc:
                raise TrainingDivergedError(
                    f"non-finite value in '{exc.op}' at epoch {epoch}, batch {batch_id}",
                    batch_index=batch_id,
                    parameter_norms=_parameter_norms(model),
                ) from exc
            value = loss.item()
            if not math.isfinite(value):
                raise TrainingDivergedError(
                    f"non-finite loss at epoch {epoch}, batch {batch_id}",
                    batch_index=batch_id,
                    parameter_norms=_parameter_norms(model),
                )
            adam_step(
                params,
                [p.grad for p in params],
                state,
                cfg.learning_rate,
                cfg.weight_decay,
                cfg.beta1,
                cfg.beta2,
                cfg.adam_eps,
                cfg.decoupled_weight_decay,
            )
            losses.append(value)
            batch_id += 1
        mean_loss = float(np.mean(losses))
        trace.append(mean_loss)
        logger.info("epoch %d/%d mean loss %.6f", epoch, cfg.epochs, mean_loss)
        if on_epoch is not None:
            on_epoch(epoch, mean_loss)
    T.zero_grad(params)
    return TrainResult(model=model, loss_trace=trace)
