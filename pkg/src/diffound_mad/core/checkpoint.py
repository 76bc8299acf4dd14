"""``.npz`` checkpoints with an embedded JSON manifest.

Array keys are ``<group>/<parameter name>`` with groups ``backbone``,
``branch_m``, ``branch_l`` and ``head``. The ``__manifest__`` entry records the
format version, the kind of checkpoint, every array's shape, dtype and
trainability, the model and adapter configs and the input-geometry hash.
Files are read with ``allow_pickle=False``.
"""

import json
import logging
import os
import tempfile
import zipfile
from pathlib import Path
from typing import Any, Dict, List, Literal, Mapping, Optional, Tuple, Union

import numpy as np

from diffound_mad.core import tensor as T
from diffound_mad.core.lora import LoRAAdapter, LoRAConfig
from diffound_mad.core.model import Branch, DiffoundModel
from diffound_mad.core.vit import EncoderWeights, ViTConfig
from diffound_mad.errors import ArtifactIOError, CompatibilityError
from diffound_mad.provenance import config_hash, input_hash

logger = logging.getLogger(__name__)

FORMAT = "diffound-checkpoint"
FORMAT_VERSION = 1
MANIFEST_KEY = "__manifest__"

Kind = Literal["backbone", "adapters", "model"]
PathLike = Union[str, Path]


def _write(path: PathLike, arrays: Mapping[str, np.ndarray], manifest: Dict[str, Any]) -> Path:
    path = Path(path)
    manifest = {
        "format": FORMAT,
        "format_version": FORMAT_VERSION,
        **manifest,
        "arrays": {
            name: {
                "shape": list(a.shape),
                "dtype": str(a.dtype),
                "frozen": name.startswith("backbone/"),
            }
            for name, a in arrays.items()
        },
    }
    try:
        path.parent.mkdir(parents=True, exist_ok=True)
        fd, tmp = tempfile.mkstemp(dir=path.parent, suffix=".tmp")
        with os.fdopen(fd, "wb") as f:
            np.savez(f, **arrays, **{MANIFEST_KEY: np.array(json.dumps(manifest, sort_keys=True))})
        os.replace(tmp, path)
    except OSError as exc:
        raise ArtifactIOError(f"cannot write checkpoint ({exc.strerror})", path) from exc
    logger.debug("wrote %s checkpoint with %d arrays to %s", manifest.get("kind"), len(arrays), path)
    return path


def read_checkpoint(
    path: PathLike, kind: Optional[Kind] = None
) -> Tuple[Dict[str, Any], Dict[str, np.ndarray]]:
    """Manifest and arrays of a checkpoint, validated against the format version."""
    path = Path(path)
    try:
        with np.load(path, allow_pickle=False) as data:
            if MANIFEST_KEY not in data.files:
                raise CompatibilityError(f"{path} has no checkpoint manifest")
            manifest = json.loads(str(data[MANIFEST_KEY]))
            arrays = {k: data[k] for k in data.files if k != MANIFEST_KEY}
    except (OSError, zipfile.BadZipFile, ValueError) as exc:
        raise ArtifactIOError(f"cannot read checkpoint ({exc})", path) from exc
    if manifest.get("format") != FORMAT or manifest.get("format_version") != FORMAT_VERSION:
        raise CompatibilityError(
            f"{path}: unsupported checkpoint format "
            f"{manifest.get('format')} v{manifest.get('format_version')} "
            f"(expected {FORMAT} v{FORMAT_VERSION})"
        )
    if kind is not None and manifest.get("kind") != kind:
        raise CompatibilityError(f"{path}: expected a {kind} checkpoint, found {manifest.get('kind')}")
    for name, meta in manifest.get("arrays", {}).items():
        if name not in arrays or list(arrays[name].shape) != meta["shape"]:
            raise CompatibilityError(f"{path}: array '{name}' missing or reshaped")
    return manifest, arrays


def _group(arrays: Mapping[str, np.ndarray], prefix: str) -> Dict[str, np.ndarray]:
    head = prefix + "/"
    return {k[len(head) :]: v for k, v in arrays.items() if k.startswith(head)}


def _adapter_arrays(branch: Branch, prefix: str) -> Dict[str, np.ndarray]:
    out = {}
    for i, layer in enumerate(branch.adapters or []):
        for proj, adapter in sorted(layer.items()):
            out[f"{prefix}/layers.{i}.{proj}.A"] = adapter.a.value
            out[f"{prefix}/layers.{i}.{proj}.B"] = adapter.b.value
    return out


def _model_manifest(model: DiffoundModel, kind: Kind) -> Dict[str, Any]:
    cfg = model.config
    return {
        "kind": kind,
        "mode": model.mode,
        "reverse_difference": model.reverse_difference,
        "vit_config": cfg.model_dump(mode="json"),
        "lora_config": model.lora_config.model_dump(mode="json"),
        "vit_config_hash": config_hash(cfg),
        "lora_config_hash": config_hash(model.lora_config),
        "input_hash": input_hash(cfg.image_size, cfg.channels),
        "metadata": dict(model.metadata),
    }


# Backbone


def save_backbone(path: PathLike, weights: EncoderWeights) -> Path:
    arrays = {f"backbone/{k}": v for k, v in weights.to_arrays().items()}
    manifest = {
        "kind": "backbone",
        "vit_config": weights.config.model_dump(mode="json"),
        "vit_config_hash": config_hash(weights.config),
        "input_hash": input_hash(weights.config.image_size, weights.config.channels),
        "frozen": True,
    }
    return _write(path, arrays, manifest)


def load_backbone(path: PathLike) -> EncoderWeights:
    manifest, arrays = read_checkpoint(path, "backbone")
    cfg = ViTConfig.model_validate(manifest["vit_config"])
    return EncoderWeights.from_arrays(cfg, _group(arrays, "backbone"))


# Adapters


def save_adapters(path: PathLike, model: DiffoundModel) -> Path:
    """Adapter factors and head only; the backbone is referenced by config hash."""
    arrays = _adapter_arrays(model.branch_m, "branch_m")
    if model.branch_l is not None:
        arrays.update(_adapter_arrays(model.branch_l, "branch_l"))
    arrays["head/weight"] = model.head_weight.value
    arrays["head/bias"] = model.head_bias.value
    return _write(path, arrays, _model_manifest(model, "adapters"))


def _check_same_geometry(manifest: Mapping[str, Any], model: DiffoundModel, path: PathLike) -> None:
    if manifest["vit_config_hash"] != config_hash(model.config):
        raise CompatibilityError(f"{path}: adapters were trained for a different backbone config")
    if manifest["lora_config_hash"] != config_hash(model.lora_config):
        raise CompatibilityError(f"{path}: adapter config differs from the model's")
    if manifest["mode"] != model.mode:
        raise CompatibilityError(f"{path}: adapters are for {manifest['mode']} mode, model is {model.mode}")


def load_adapters(path: PathLike, model: DiffoundModel) -> DiffoundModel:
    """Copy saved adapter factors and head into ``model`` in place."""
    manifest, arrays = read_checkpoint(path, "adapters")
    _check_same_geometry(manifest, model, path)
    registry = model.registry()
    for key, value in arrays.items():
        group, name = key.split("/", 1)
        target = f"head.{name}" if group == "head" else f"{group}.{name}"
        if target not in registry:
            raise CompatibilityError(f"{path}: model has no parameter '{target}'")
        registry[target].assign(value)
    return model


# Full model


def save_model(path: PathLike, model: DiffoundModel) -> Path:
    arrays = {f"backbone/{k}": v for k, v in model.branch_m.weights.to_arrays().items()}
    arrays.update(_adapter_arrays(model.branch_m, "branch_m"))
    if model.branch_l is not None:
        arrays.update(_adapter_arrays(model.branch_l, "branch_l"))
    arrays["head/weight"] = model.head_weight.value
    arrays["head/bias"] = model.head_bias.value
    manifest = _model_manifest(model, "model")
    manifest["trainable"] = sorted(name for name, _ in model.registry().trainable())
    return _write(path, arrays, manifest)


def _load_adapters(
    arrays: Mapping[str, np.ndarray], weights: EncoderWeights, cfg: LoRAConfig, prefix: str
) -> List[Dict[str, LoRAAdapter]]:
    group = _group(arrays, prefix)
    layers = []
    for i in range(weights.config.num_layers):
        layer = {}
        for proj in sorted(cfg.target_layers):
            key = f"layers.{i}.{proj}"
            if f"{key}.A" not in group or f"{key}.B" not in group:
                raise CompatibilityError(f"checkpoint lacks adapter {prefix}.{key}")
            layer[proj] = LoRAAdapter(
                weights[f"layers.{i}.attn.{proj}.weight"],
                T.parameter(group[f"{key}.A"], name=f"{prefix}.{key}.A"),
                T.parameter(group[f"{key}.B"], name=f"{prefix}.{key}.B"),
                cfg,
                name=f"{prefix}.{key}",
            )
        layers.append(layer)
    return layers


def load_model(path: PathLike, expected_input_hash: Optional[str] = None) -> DiffoundModel:
    """Rebuild a detector; ``expected_input_hash`` guards against mismatched datasets."""
    manifest, arrays = read_checkpoint(path, "model")
    if expected_input_hash is not None and manifest["input_hash"] != expected_input_hash:
        raise CompatibilityError(
            f"{path}: checkpoint input hash {manifest['input_hash'][:12]} does not match "
            f"dataset hash {expected_input_hash[:12]}"
        )
    vit_cfg = ViTConfig.model_validate(manifest["vit_config"])
    lora_cfg = LoRAConfig.model_validate(manifest["lora_config"])
    weights = EncoderWeights.from_arrays(vit_cfg, _group(arrays, "backbone"))
    branch_m = Branch(weights, _load_adapters(arrays, weights, lora_cfg, "branch_m"))
    branch_l = None
    if manifest["mode"] == "differential":
        branch_l = Branch(weights, _load_adapters(arrays, weights, lora_cfg, "branch_l"))
    model = DiffoundModel(
        config=vit_cfg,
        lora_config=lora_cfg,
        mode=manifest["mode"],
        branch_m=branch_m,
        branch_l=branch_l,
        head_weight=T.parameter(arrays["head/weight"], name="head.weight"),
        head_bias=T.parameter(arrays["head/bias"], name="head.bias"),
        reverse_difference=bool(manifest.get("reverse_difference", False)),
        metadata=dict(manifest.get("metadata", {})),
    )
    logger.info("loaded %s model from %s", model.mode, path)
    return model
