"""Dual-stream differential morphing attack detector.

Two encoder branches share one frozen backbone and carry their own LoRA
adapters. The suspected image goes through ``branch_m``, the live capture
through ``branch_l``; a linear head scores ``e_l - e_m``. In ``single_image``
mode only the suspected image is embedded and scored.
"""

import logging
from dataclasses import dataclass, field
from typing import Dict, List, Literal, Optional, Sequence

import numpy as np

from diffound_mad.core import tensor as T
from diffound_mad.core.lora import LoRAAdapter, LoRAConfig, ParameterRegistry, merge
from diffound_mad.core.tensor import Node
from diffound_mad.core.vit import EncoderWeights, ViTConfig, encode
from diffound_mad.errors import ContractError, ShapeError

logger = logging.getLogger(__name__)

Mode = Literal["differential", "single_image"]
MODES = ("differential", "single_image")

BONA_FIDE = 0
MORPH = 1
BONA_FIDE_TAG = "bonafide"


@dataclass
class PairSample:
    """A suspected image, a live capture and the ground truth of the pair."""

    pair_id: str
    suspected: np.ndarray
    live: np.ndarray
    label: int
    tool_tag: str = BONA_FIDE_TAG

    def __post_init__(self) -> None:
        if self.label not in (BONA_FIDE, MORPH):
            raise ContractError(f"pair {self.pair_id}: label must be 0 or 1, got {self.label}")
        if self.suspected.shape != self.live.shape:
            raise ShapeError(
                f"pair {self.pair_id}: suspected {self.suspected.shape} != live {self.live.shape}"
            )


@dataclass
class Branch:
    """One encoder instance: backbone weights plus optional per-layer adapters."""

    weights: EncoderWeights
    adapters: Optional[List[Dict[str, LoRAAdapter]]] = None

    def embed(
        self, images: np.ndarray, training: bool = False, rng: Optional[np.random.Generator] = None
    ) -> Node:
        return encode(images, self.weights, self.adapters, training=training, rng=rng)


@dataclass
class DiffoundModel:
    """Detector state: branches, head and scoring mode."""

    config: ViTConfig
    lora_config: LoRAConfig
    mode: Mode
    branch_m: Branch
    branch_l: Optional[Branch]
    head_weight: Node
    head_bias: Node
    reverse_difference: bool = False
    metadata: Dict[str, str] = field(default_factory=dict)

    def registry(self) -> ParameterRegistry:
        """All parameters; the shared backbone is listed once."""
        reg = ParameterRegistry()
        shared = self.branch_l is None or self.branch_l.weights is self.branch_m.weights
        branches = [("branch_m", self.branch_m)]
        if self.branch_l is not None:
            branches.append(("branch_l", self.branch_l))
        for label, branch in branches:
            prefix = "backbone" if shared else f"{label}.backbone"
            for name, node in branch.weights.named_parameters():
                reg.register(f"{prefix}.{name}", node)
            for i, layer in enumerate(branch.adapters or []):
                for proj in sorted(layer):
                    adapter = layer[proj]
                    reg.register(f"{label}.layers.{i}.{proj}.A", adapter.a)
                    reg.register(f"{label}.layers.{i}.{proj}.B", adapter.b)
        reg.register("head.weight", self.head_weight)
        reg.register("head.bias", self.head_bias)
        return reg

    def trainable_parameters(self) -> List[Node]:
        return [node for _, node in self.registry().trainable()]


def _branch_adapters(
    weights: EncoderWeights, lora_config: LoRAConfig, rng: np.random.Generator, label: str
) -> List[Dict[str, LoRAAdapter]]:
    layers = []
    for i in range(weights.config.num_layers):
        layers.append(
            {
                proj: LoRAAdapter.create(
                    weights[f"layers.{i}.attn.{proj}.weight"],
                    lora_config,
                    rng,
                    name=f"{label}.layers.{i}.{proj}",
                )
                for proj in sorted(lora_config.target_layers)
            }
        )
    return layers


def build(
    cfg: ViTConfig,
    lora_cfg: LoRAConfig,
    mode: Mode = "differential",
    seed: int = 0,
    backbone: Optional[EncoderWeights] = None,
    reverse_difference: bool = False,
) -> DiffoundModel:
    """Fresh detector: one frozen backbone, zero-update adapters, zero head."""
    if mode not in MODES:
        raise ContractError(f"unknown mode '{mode}' (choose from {', '.join(MODES)})")
    rng = np.random.default_rng(seed)
    if backbone is None:
        backbone = EncoderWeights.init(cfg, rng)
    elif backbone.config != cfg:
        raise ContractError("backbone weights were built for a different ViTConfig")
    branch_m = Branch(backbone, _branch_adapters(backbone, lora_cfg, rng, "branch_m"))
    branch_l = None
    if mode == "differential":
        branch_l = Branch(backbone, _branch_adapters(backbone, lora_cfg, rng, "branch_l"))
    model = DiffoundModel(
        config=cfg,
        lora_config=lora_cfg,
        mode=mode,
        branch_m=branch_m,
        branch_l=branch_l,
        head_weight=T.parameter(np.zeros((1, cfg.embed_dim)), name="head.weight"),
        head_bias=T.parameter(np.zeros((1,)), name="head.bias"),
        reverse_difference=reverse_difference,
    )
    logger.debug("built %s model with %d parameter tensors", mode, len(model.registry()))
    return model


def embed_batch(
    model: DiffoundModel,
    suspected: np.ndarray,
    live: Optional[np.ndarray] = None,
    training: bool = False,
    rng: Optional[np.random.Generator] = None,
) -> Node:
    """Representation fed to the head: ``e_l - e_m`` or, in single-image mode, ``e_m``."""
    e_m = model.branch_m.embed(suspected, training=training, rng=rng)
    if model.mode == "single_image":
        return e_m
    if live is None or model.branch_l is None:
        raise ContractError("differential mode needs live captures")
    e_l = model.branch_l.embed(live, training=training, rng=rng)
    return e_m - e_l if model.reverse_difference else e_l - e_m


def logits(
    model: DiffoundModel,
    suspected: np.ndarray,
    live: Optional[np.ndarray] = None,
    training: bool = False,
    rng: Optional[np.random.Generator] = None,
) -> Node:
    """Head output before the sigmoid, shape ``[B]``."""
    features = embed_batch(model, suspected, live, training=training, rng=rng)
    batch = features.shape[0]
    out = T.linear(features, model.head_weight, model.head_bias)
    return T.reshape(out, (batch,))


def _stack(pairs: Sequence[PairSample], attr: str) -> np.ndarray:
    return np.stack([getattr(pair, attr) for pair in pairs])


def differential_embedding(model: DiffoundModel, pair: PairSample) -> Node:
    """``e_l - e_m`` for one pair (evaluation mode)."""
    if model.mode != "differential":
        raise ContractError("differential_embedding needs a model in differential mode")
    return embed_batch(model, pair.suspected[None], pair.live[None])[0]


def score_batch(model: DiffoundModel, pairs: Sequence[PairSample]) -> np.ndarray:
    """Morph likelihoods in ``[0, 1]``; higher means more morph-like."""
    if not pairs:
        return np.zeros(0)
    suspected = _stack(pairs, "suspected")
    live = _stack(pairs, "live") if model.mode == "differential" else None
    return T.sigmoid(logits(model, suspected, live)).value.copy()


def score(model: DiffoundModel, pair: PairSample) -> float:
    return float(score_batch(model, [pair])[0])


def merge_adapters(model: DiffoundModel) -> DiffoundModel:
    """Equivalent model whose Q/V weights absorb the adapters (inference only)."""

    def merged_branch(branch: Branch) -> Branch:
        arrays = dict(branch.weights.to_arrays())
        for i, layer in enumerate(branch.adapters or []):
            for proj, adapter in layer.items():
                arrays[f"layers.{i}.attn.{proj}.weight"] = merge(adapter)
        return Branch(EncoderWeights.from_arrays(branch.weights.config, arrays))

    return DiffoundModel(
        config=model.config,
        lora_config=model.lora_config,
        mode=model.mode,
        branch_m=merged_branch(model.branch_m),
        branch_l=merged_branch(model.branch_l) if model.branch_l is not None else None,
        head_weight=T.constant(model.head_weight.value, name="head.weight"),
        head_bias=T.constant(model.head_bias.value, name="head.bias"),
        reverse_difference=model.reverse_difference,
        metadata=dict(model.metadata),
    )
