"""Shared pytest fixtures for diffound-mad."""

import os
import sys

import numpy as np
import pytest
import yaml
from click.testing import CliRunner

# Add src to path
project_root = os.path.dirname(os.path.dirname(__file__))
src_path = os.path.join(project_root, "src")
if src_path not in sys.path:
    sys.path.insert(0, src_path)

from diffound_mad.core.lora import LoRAConfig  # noqa: E402
from diffound_mad.core.synth import SynthConfig, build_protocol  # noqa: E402
from diffound_mad.core.vit import ViTConfig  # noqa: E402


@pytest.fixture
def cli_runner() -> CliRunner:
    """Provide a Click CLI runner for testing commands."""
    return CliRunner()


@pytest.fixture
def rng() -> np.random.Generator:
    return np.random.default_rng(1234)


@pytest.fixture
def tiny_vit() -> ViTConfig:
    """16px images, two 8px patches per side, two layers."""
    return ViTConfig(image_size=16, patch_size=8, channels=3, embed_dim=16, num_heads=2, num_layers=2)


@pytest.fixture
def tiny_lora() -> LoRAConfig:
    return LoRAConfig(rank=2, alpha=4.0, dropout=0.0)


@pytest.fixture
def tiny_synth() -> SynthConfig:
    return SynthConfig(image_size=16, num_identities=6, captures_per_identity=3, morphs_per_identity=1, seed=5)


@pytest.fixture
def tiny_split(tiny_synth):
    return build_protocol(tiny_synth)


@pytest.fixture
def tiny_experiment() -> dict:
    """Raw config for a run that finishes in seconds."""
    return {
        "name": "tiny",
        "seed": 3,
        "model": {
            "vit": {
                "image_size": 16,
                "patch_size": 8,
                "embed_dim": 16,
                "num_heads": 2,
                "num_layers": 1,
            }
        },
        "lora": {"rank": 2, "alpha": 4.0, "dropout": 0.0},
        "train": {"epochs": 1, "batch_size": 4, "learning_rate": 1.0e-3},
        "data": {
            "synth": {
                "image_size": 16,
                "num_identities": 6,
                "captures_per_identity": 3,
                "morphs_per_identity": 1,
                "seed": 5,
            }
        },
    }


@pytest.fixture
def experiment_file(tmp_path, tiny_experiment) -> str:
    path = tmp_path / "tiny.yaml"
    path.write_text(yaml.safe_dump(tiny_experiment))
    return str(path)
