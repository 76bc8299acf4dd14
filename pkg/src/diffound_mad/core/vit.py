"""Minimal vision transformer producing a CLS-token embedding.

Pre-norm blocks of multi-head self-attention and a GELU MLP. LoRA adapters can
be injected on the Q and V projections of every block; K, O and the MLP always
run on their frozen weights.
"""

import logging
import math
from collections import OrderedDict
from typing import Dict, Iterator, List, Literal, Mapping, Optional, Sequence, Tuple

import numpy as np
from pydantic import BaseModel, ConfigDict, Field, model_validator

from diffound_mad.core import tensor as T
from diffound_mad.core.lora import LoRAAdapter, ParameterSpec, lora_forward
from diffound_mad.core.tensor import Node
from diffound_mad.errors import CompatibilityError, ShapeError

logger = logging.getLogger(__name__)

LayerAdapters = Mapping[str, LoRAAdapter]


class ViTConfig(BaseModel):
    """Geometry of the encoder."""

    model_config = ConfigDict(frozen=True, extra="forbid")

    image_size: int = Field(32, ge=1)
    patch_size: int = Field(8, ge=1)
    channels: int = Field(3, ge=1)
    embed_dim: int = Field(64, ge=2)
    num_heads: int = Field(4, ge=1)
    num_layers: int = Field(4, ge=1)
    mlp_ratio: float = Field(4.0, gt=0)
    pooling: Literal["cls_token"] = "cls_token"
    ln_eps: float = Field(1e-6, gt=0)

    @model_validator(mode="after")
    def _check_geometry(self) -> "ViTConfig":
        if self.image_size % self.patch_size:
            raise ValueError(
                f"image_size {self.image_size} is not divisible by patch_size {self.patch_size}"
            )
        if self.embed_dim % self.num_heads:
            raise ValueError(
                f"embed_dim {self.embed_dim} is not divisible by num_heads {self.num_heads}"
            )
        return self

    @classmethod
    def preset(cls, name: str) -> "ViTConfig":
        """Named geometries: ``desk`` (default toy), ``small`` and ``large``."""
        presets = {
            "desk": {},
            "small": dict(image_size=224, patch_size=16, embed_dim=384, num_heads=6, num_layers=12),
            "large": dict(image_size=224, patch_size=14, embed_dim=1024, num_heads=16, num_layers=24),
        }
        if name not in presets:
            raise ValueError(f"unknown preset '{name}' (choose from {', '.join(presets)})")
        return cls(**presets[name])

    @property
    def grid(self) -> int:
        return self.image_size // self.patch_size

    @property
    def num_patches(self) -> int:
        return self.grid**2

    @property
    def num_tokens(self) -> int:
        return self.num_patches + 1

    @property
    def patch_dim(self) -> int:
        return self.channels * self.patch_size**2

    @property
    def head_dim(self) -> int:
        return self.embed_dim // self.num_heads

    @property
    def mlp_dim(self) -> int:
        return int(round(self.embed_dim * self.mlp_ratio))


def weight_shapes(cfg: ViTConfig) -> "OrderedDict[str, Tuple[int, ...]]":
    """Name → shape of every backbone tensor, in checkpoint order."""
    d, m = cfg.embed_dim, cfg.mlp_dim
    shapes: "OrderedDict[str, Tuple[int, ...]]" = OrderedDict()
    shapes["patch.weight"] = (d, cfg.patch_dim)
    shapes["patch.bias"] = (d,)
    shapes["cls_token"] = (1, d)
    shapes["pos_embed"] = (cfg.num_tokens, d)
    for i in range(cfg.num_layers):
        p = f"layers.{i}"
        shapes[f"{p}.ln1.gain"] = (d,)
        shapes[f"{p}.ln1.bias"] = (d,)
        for proj in ("q", "k", "v", "o"):
            shapes[f"{p}.attn.{proj}.weight"] = (d, d)
            shapes[f"{p}.attn.{proj}.bias"] = (d,)
        shapes[f"{p}.ln2.gain"] = (d,)
        shapes[f"{p}.ln2.bias"] = (d,)
        shapes[f"{p}.mlp.fc1.weight"] = (m, d)
        shapes[f"{p}.mlp.fc1.bias"] = (m,)
        shapes[f"{p}.mlp.fc2.weight"] = (d, m)
        shapes[f"{p}.mlp.fc2.bias"] = (d,)
    shapes["final_norm.gain"] = (d,)
    shapes["final_norm.bias"] = (d,)
    return shapes


def parameter_specs(cfg: ViTConfig, prefix: str = "backbone") -> List[ParameterSpec]:
    """Frozen backbone parameter specs without allocating any weights."""
    return [ParameterSpec(f"{prefix}.{n}", s, False) for n, s in weight_shapes(cfg).items()]


class EncoderWeights:
    """Named backbone tensors for one :class:`ViTConfig`.

    Weights are frozen unless built with ``trainable=True``. Instances are not
    mutated after construction, so one set can back several encoders.
    """

    def __init__(self, config: ViTConfig, params: Mapping[str, Node]):
        expected = weight_shapes(config)
        missing = [n for n in expected if n not in params]
        extra = [n for n in params if n not in expected]
        if missing or extra:
            raise CompatibilityError(
                f"backbone weights do not match config: missing={missing[:5]} extra={extra[:5]}"
            )
        for name, shape in expected.items():
            if params[name].shape != shape:
                raise CompatibilityError(
                    f"backbone weight '{name}' has shape {params[name].shape}, expected {shape}"
                )
        self.config = config
        self._params: "OrderedDict[str, Node]" = OrderedDict((n, params[n]) for n in expected)

    @classmethod
    def init(
        cls, config: ViTConfig, rng: np.random.Generator, trainable: bool = False
    ) -> "EncoderWeights":
        """Random stand-in for pretrained weights (fan-in scaled projections)."""
        params: Dict[str, Node] = {}
        for name, shape in weight_shapes(config).items():
            if name.endswith(".gain"):
                value = np.ones(shape)
            elif name.endswith(".weight"):
                value = rng.normal(0.0, 1.0 / math.sqrt(shape[1]), size=shape)
            else:
                value = rng.normal(0.0, 0.02, size=shape)
            params[name] = T.parameter(value, name=f"backbone.{name}", trainable=trainable)
        return cls(config, params)

    @classmethod
    def from_arrays(
        cls, config: ViTConfig, arrays: Mapping[str, np.ndarray], trainable: bool = False
    ) -> "EncoderWeights":
        """Import hook for externally produced weights (e.g. converted checkpoints)."""
        params = {
            name: T.parameter(value, name=f"backbone.{name}", trainable=trainable)
            for name, value in arrays.items()
        }
        return cls(config, params)

    def __getitem__(self, name: str) -> Node:
        return self._params[name]

    def named_parameters(self) -> Iterator[Tuple[str, Node]]:
        return iter(self._params.items())

    def to_arrays(self) -> Dict[str, np.ndarray]:
        return {name: node.value for name, node in self._params.items()}


def _patches(images: np.ndarray, cfg: ViTConfig) -> np.ndarray:
    b = images.shape[0]
    p, g = cfg.patch_size, cfg.grid
    x = images.reshape(b, cfg.channels, g, p, g, p)
    x = x.transpose(0, 2, 4, 1, 3, 5)
    return x.reshape(b, cfg.num_patches, cfg.patch_dim)


def _as_batch(images: np.ndarray, cfg: ViTConfig) -> Tuple[np.ndarray, bool]:
    images = np.asarray(images)
    single = images.ndim == 3
    batch = images[None] if single else images
    expected = (cfg.channels, cfg.image_size, cfg.image_size)
    if batch.ndim != 4 or batch.shape[1:] != expected:
        raise ShapeError(f"image shape {images.shape} does not match config {expected}")
    return batch, single


def patchify(images: np.ndarray, weights: EncoderWeights) -> Node:
    """Patch projection, prepended CLS token and positional embeddings.

    ``[C, H, W]`` gives ``[tokens, dim]``; ``[B, C, H, W]`` gives ``[B, tokens, dim]``.
    """
    cfg = weights.config
    batch, single = _as_batch(images, cfg)
    patches = T.constant(_patches(batch, cfg))
    tokens = T.linear(patches, weights["patch.weight"], weights["patch.bias"])
    cls = T.constant(np.zeros((batch.shape[0], 1, cfg.embed_dim))) + weights["cls_token"]
    tokens = T.concat([cls, tokens], axis=1) + weights["pos_embed"]
    if single:
        tokens = T.reshape(tokens, (cfg.num_tokens, cfg.embed_dim))
    return tokens


def _project(
    x: Node,
    weights: EncoderWeights,
    layer: int,
    proj: str,
    adapters: Optional[LayerAdapters],
    training: bool,
    rng: Optional[np.random.Generator],
) -> Node:
    prefix = f"layers.{layer}.attn.{proj}"
    bias = weights[f"{prefix}.bias"]
    if adapters is not None and proj in adapters:
        return lora_forward(adapters[proj], x, training=training, rng=rng, bias=bias)
    return T.linear(x, weights[f"{prefix}.weight"], bias)


def attention(
    tokens: Node,
    weights: EncoderWeights,
    layer: int,
    adapters: Optional[LayerAdapters] = None,
    training: bool = False,
    rng: Optional[np.random.Generator] = None,
) -> Node:
    """Multi-head self-attention of one block on ``[T, D]`` or ``[B, T, D]`` tokens."""
    cfg = weights.config
    single = tokens.ndim == 2
    x = T.reshape(tokens, (1,) + tokens.shape) if single else tokens
    if x.ndim != 3 or x.shape[-1] != cfg.embed_dim:
        raise ShapeError(f"attention expects [B, T, {cfg.embed_dim}] tokens, got {tokens.shape}")
    if adapters is not None:
        unknown = set(adapters) - {"q", "v"}
        if unknown:
            raise ShapeError(f"adapters only attach to q and v projections, got {sorted(unknown)}")
    b, t, d = x.shape
    h, dh = cfg.num_heads, cfg.head_dim

    def heads(node: Node) -> Node:
        return T.transpose(T.reshape(node, (b, t, h, dh)), (0, 2, 1, 3))

    q = heads(_project(x, weights, layer, "q", adapters, training, rng))
    k = heads(_project(x, weights, layer, "k", None, training, rng))
    v = heads(_project(x, weights, layer, "v", adapters, training, rng))
    scores = T.matmul(q, T.transpose(k, (0, 1, 3, 2))) * (1.0 / math.sqrt(dh))
    mixed = T.matmul(T.softmax(scores, axis=-1), v)
    merged = T.reshape(T.transpose(mixed, (0, 2, 1, 3)), (b, t, d))
    out = T.linear(
        merged, weights[f"layers.{layer}.attn.o.weight"], weights[f"layers.{layer}.attn.o.bias"]
    )
    return T.reshape(out, (t, d)) if single else out


def _block(
    x: Node,
    weights: EncoderWeights,
    layer: int,
    adapters: Optional[LayerAdapters],
    training: bool,
    rng: Optional[np.random.Generator],
) -> Node:
    p = f"layers.{layer}"
    eps = weights.config.ln_eps
    normed = T.layer_norm(x, weights[f"{p}.ln1.gain"], weights[f"{p}.ln1.bias"], eps)
    x = x + attention(normed, weights, layer, adapters, training, rng)
    normed = T.layer_norm(x, weights[f"{p}.ln2.gain"], weights[f"{p}.ln2.bias"], eps)
    hidden = T.gelu(T.linear(normed, weights[f"{p}.mlp.fc1.weight"], weights[f"{p}.mlp.fc1.bias"]))
    return x + T.linear(hidden, weights[f"{p}.mlp.fc2.weight"], weights[f"{p}.mlp.fc2.bias"])


def encode(
    images: np.ndarray,
    weights: EncoderWeights,
    adapters: Optional[Sequence[LayerAdapters]] = None,
    training: bool = False,
    rng: Optional[np.random.Generator] = None,
) -> Node:
    """Embed one image (``[D]``) or a batch (``[B, D]``): final-norm CLS token."""
    cfg = weights.config
    if adapters is not None and len(adapters) != cfg.num_layers:
        raise ShapeError(f"got adapters for {len(adapters)} layers, encoder has {cfg.num_layers}")
    batch, single = _as_batch(images, cfg)
    x = patchify(batch, weights)
    for layer in range(cfg.num_layers):
        layer_adapters = adapters[layer] if adapters is not None else None
        x = _block(x, weights, layer, layer_adapters, training, rng)
    cls = x[:, 0, :]
    out = T.layer_norm(cls, weights["final_norm.gain"], weights["final_norm.bias"], cfg.ln_eps)
    if single:
        out = T.reshape(out, (cfg.embed_dim,))
    return out
