"""Hashes and provenance strings recorded in every artifact manifest."""

import hashlib
import json
import subprocess
from pathlib import Path
from typing import Any, Mapping, Union

from diffound_mad import __version__


def canonical_json(data: Any) -> str:
    return json.dumps(data, sort_keys=True, separators=(",", ":"), default=str)


def canonical_hash(data: Any) -> str:
    """SHA-256 of the canonical JSON form of ``data``."""
    return hashlib.sha256(canonical_json(data).encode("utf-8")).hexdigest()


def config_hash(config: Any) -> str:
    """Hash of a pydantic model or plain mapping."""
    if hasattr(config, "model_dump"):
        config = config.model_dump(mode="json")
    return canonical_hash(config)


def input_hash(image_size: int, channels: int) -> str:
    """Fingerprint of the input geometry a checkpoint was trained for."""
    return canonical_hash({"image_size": image_size, "channels": channels})


def git_describe(cwd: Union[str, Path, None] = None) -> str:
    """``git describe --always --dirty`` or ``nogit`` outside a work tree."""
    try:
        out = subprocess.run(
            ["git", "describe", "--always", "--dirty"],
            cwd=cwd,
            capture_output=True,
            text=True,
            timeout=5,
        )
    except (OSError, subprocess.SubprocessError):
        return "nogit"
    return out.stdout.strip() if out.returncode == 0 and out.stdout.strip() else "nogit"


def provenance(cwd: Union[str, Path, None] = None) -> str:
    return f"diffound-mad {__version__} ({git_describe(cwd)})"


def manifest_fields(config: Any, seed: int) -> Mapping[str, Any]:
    return {"config_hash": config_hash(config), "seed": seed, "provenance": provenance()}
