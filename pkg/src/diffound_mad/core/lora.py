"""Low-rank adaptation of frozen linear projections.

An adapter keeps the frozen base weight ``W0`` (shape ``[d_out, k]``) and adds a
trainable update ``s * B @ A`` with ``A: [r, k]`` and ``B: [d_out, r]``. The scale
``s`` is ``alpha / r`` (standard) or ``alpha / sqrt(r)`` (rank-stabilised).
"""

import logging
import math
from collections import OrderedDict
from dataclasses import dataclass
from typing import Dict, FrozenSet, Iterable, Iterator, List, Literal, Optional, Tuple, Union

import numpy as np
from pydantic import BaseModel, ConfigDict, Field, field_serializer, field_validator

from diffound_mad.core import tensor as T
from diffound_mad.core.tensor import Node
from diffound_mad.errors import ConfigValidationError, ContractError, ShapeError

logger = logging.getLogger(__name__)

ADAPTABLE_PROJECTIONS = frozenset({"q", "v"})


class LoRAConfig(BaseModel):
    """Rank, scale, dropout and injection sites of the adapters."""

    model_config = ConfigDict(frozen=True, extra="forbid")

    rank: int = Field(4, ge=1, description="Rank r of the update")
    alpha: float = Field(8.0, gt=0, description="Scale numerator")
    dropout: float = Field(0.2, ge=0.0, lt=1.0, description="Dropout on the low-rank input")
    scaling_mode: Literal["standard", "rank_stabilised"] = "rank_stabilised"
    target_layers: FrozenSet[Literal["q", "v"]] = Field(
        default=ADAPTABLE_PROJECTIONS, description="Attention projections carrying adapters"
    )

    @field_validator("target_layers")
    @classmethod
    def _non_empty(cls, value: FrozenSet[str]) -> FrozenSet[str]:
        if not value:
            raise ValueError("target_layers must name at least one of q, v")
        return value

    @field_serializer("target_layers")
    def _sorted_targets(self, value: FrozenSet[str]) -> List[str]:
        return sorted(value)

    @property
    def scale(self) -> float:
        if self.scaling_mode == "rank_stabilised":
            return self.alpha / math.sqrt(self.rank)
        return self.alpha / self.rank


class LoRAAdapter:
    """Frozen base weight plus trainable low-rank factors."""

    def __init__(self, base: Node, a: Node, b: Node, config: LoRAConfig, name: str = "lora"):
        if base.requires_grad:
            raise ContractError(f"{name}: base weight must be frozen")
        d_out, k = base.shape
        if a.shape != (config.rank, k) or b.shape != (d_out, config.rank):
            raise ShapeError(
                f"{name}: factors A{a.shape} / B{b.shape} do not fit W0{base.shape} at rank {config.rank}"
            )
        self.base = base
        self.a = a
        self.b = b
        self.config = config
        self.name = name

    @classmethod
    def create(
        cls, base: Node, config: LoRAConfig, rng: np.random.Generator, name: str = "lora"
    ) -> "LoRAAdapter":
        """Fresh adapter: ``A ~ N(0, 1/r)``, ``B = 0`` so that ``B @ A == 0``."""
        d_out, k = base.shape
        if config.rank > min(d_out, k) / 2:
            raise ConfigValidationError(
                f"{name}: rank {config.rank} too large for a {d_out}x{k} projection "
                f"(max {min(d_out, k) // 2})",
                field="rank",
            )
        a = rng.normal(0.0, 1.0 / math.sqrt(config.rank), size=(config.rank, k))
        b = np.zeros((d_out, config.rank))
        return cls(
            base,
            T.parameter(a, name=f"{name}.A"),
            T.parameter(b, name=f"{name}.B"),
            config,
            name=name,
        )

    @property
    def scale(self) -> float:
        return self.config.scale

    def parameters(self) -> List[Node]:
        return [self.a, self.b]

    def named_parameters(self) -> Iterator[Tuple[str, Node]]:
        yield f"{self.name}.A", self.a
        yield f"{self.name}.B", self.b


def low_rank_path(adapter: LoRAAdapter, x: Node) -> Node:
    """``s * B A x`` without dropout."""
    return T.linear(T.linear(x, adapter.a), adapter.b) * adapter.scale


def lora_forward(
    adapter: LoRAAdapter,
    x: Node,
    training: bool = False,
    rng: Optional[np.random.Generator] = None,
    bias: Optional[Node] = None,
) -> Node:
    """``W0 x (+ bias) + s * B A dropout(x)``; dropout only on the low-rank input."""
    if x.shape[-1] != adapter.base.shape[1]:
        raise ShapeError(
            f"{adapter.name}: input last dim {x.shape[-1]} != k={adapter.base.shape[1]}"
        )
    frozen = T.linear(x, adapter.base, bias)
    p = adapter.config.dropout
    lr_input = x
    if training and p > 0.0:
        if rng is None:
            raise ContractError(f"{adapter.name}: training-mode dropout needs an rng")
        keep = (rng.random(x.shape) >= p) / (1.0 - p)
        lr_input = x * T.constant(keep)
    return frozen + low_rank_path(adapter, lr_input)


def merge(adapter: LoRAAdapter) -> np.ndarray:
    """Merged weight ``W0 + s * B @ A``."""
    return adapter.base.value + adapter.scale * (adapter.b.value @ adapter.a.value)


# Parameter accounting


@dataclass(frozen=True)
class ParameterSpec:
    """Name, shape and trainability of one parameter tensor."""

    name: str
    shape: Tuple[int, ...]
    trainable: bool

    @property
    def size(self) -> int:
        return int(np.prod(self.shape)) if self.shape else 1


class ParameterRegistry:
    """Ordered name → node map; each node is registered once."""

    def __init__(self) -> None:
        self._params: "OrderedDict[str, Node]" = OrderedDict()
        self._ids: Dict[int, str] = {}

    def register(self, name: str, node: Node) -> None:
        if id(node) in self._ids:
            return
        if name in self._params:
            raise ContractError(f"parameter '{name}' registered twice")
        self._params[name] = node
        self._ids[id(node)] = name

    def __len__(self) -> int:
        return len(self._params)

    def __iter__(self) -> Iterator[Tuple[str, Node]]:
        return iter(self._params.items())

    def __getitem__(self, name: str) -> Node:
        return self._params[name]

    def __contains__(self, name: str) -> bool:
        return name in self._params

    def names(self) -> List[str]:
        return list(self._params)

    def trainable(self) -> List[Tuple[str, Node]]:
        return [(n, p) for n, p in self._params.items() if p.requires_grad]

    def frozen(self) -> List[Tuple[str, Node]]:
        return [(n, p) for n, p in self._params.items() if not p.requires_grad]

    def specs(self) -> List[ParameterSpec]:
        return [ParameterSpec(n, tuple(p.shape), p.requires_grad) for n, p in self._params.items()]


def trainable_fraction(
    registry: Union[ParameterRegistry, Iterable[ParameterSpec]],
) -> float:
    """Share of parameter elements that are trainable."""
    specs = registry.specs() if isinstance(registry, ParameterRegistry) else list(registry)
    if not specs:
        raise ContractError("trainable_fraction needs a non-empty parameter registry")
    total = sum(s.size for s in specs)
    trainable = sum(s.size for s in specs if s.trainable)
    return trainable / total
