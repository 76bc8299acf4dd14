"""Unit tests for .npz checkpoints."""

import json
import zipfile

import numpy as np
import pytest

from diffound_mad.core import checkpoint
from diffound_mad.core.lora import LoRAConfig
from diffound_mad.core.model import BONA_FIDE, MORPH, PairSample, build, score_batch
from diffound_mad.errors import ArtifactIOError, CompatibilityError, ExitCode
from diffound_mad.provenance import input_hash


def _pairs(rng, n=6):
    return [
        PairSample(f"p{i}", rng.random((3, 16, 16)), rng.random((3, 16, 16)), i % 2,
                   "bonafide" if i % 2 == BONA_FIDE else "landmark_like")
        for i in range(n)
    ]


def _trained_looking(model, rng):
    """Non-zero adapters and head, as after a few optimiser steps."""
    for _, node in model.registry().trainable():
        node.assign(rng.normal(0, 0.1, size=node.shape))
    return model


@pytest.fixture
def model(tiny_vit, tiny_lora, rng):
    return _trained_looking(build(tiny_vit, tiny_lora, seed=11), rng)


@pytest.mark.unit
class TestModelCheckpoint:
    def test_reloaded_model_scores_identically(self, tmp_path, model, rng):
        pairs = _pairs(rng)
        path = checkpoint.save_model(tmp_path / "checkpoint.npz", model)
        reloaded = checkpoint.load_model(path)
        np.testing.assert_array_equal(score_batch(model, pairs), score_batch(reloaded, pairs))

    def test_single_image_model_has_no_live_branch(self, tmp_path, tiny_vit, tiny_lora, rng):
        model = _trained_looking(build(tiny_vit, tiny_lora, mode="single_image", seed=2), rng)
        reloaded = checkpoint.load_model(checkpoint.save_model(tmp_path / "s.npz", model))
        assert reloaded.mode == "single_image"
        assert reloaded.branch_l is None

    def test_reloaded_branches_share_backbone(self, tmp_path, model):
        reloaded = checkpoint.load_model(checkpoint.save_model(tmp_path / "m.npz", model))
        assert reloaded.branch_l.weights is reloaded.branch_m.weights
        assert sorted(reloaded.registry().names()) == sorted(model.registry().names())

    def test_manifest_marks_backbone_frozen(self, tmp_path, model):
        manifest, arrays = checkpoint.read_checkpoint(checkpoint.save_model(tmp_path / "m.npz", model))
        assert manifest["format"] == checkpoint.FORMAT
        assert manifest["format_version"] == checkpoint.FORMAT_VERSION
        for name, meta in manifest["arrays"].items():
            assert meta["frozen"] == name.startswith("backbone/")
            assert meta["shape"] == list(arrays[name].shape)
        assert all(not name.startswith("backbone.") for name in manifest["trainable"])

    def test_input_hash_mismatch(self, tmp_path, model):
        path = checkpoint.save_model(tmp_path / "m.npz", model)
        with pytest.raises(CompatibilityError) as exc_info:
            checkpoint.load_model(path, expected_input_hash=input_hash(32, 3))
        assert exc_info.value.exit_code == ExitCode.COMPATIBILITY

    def test_matching_input_hash_loads(self, tmp_path, model):
        path = checkpoint.save_model(tmp_path / "m.npz", model)
        assert checkpoint.load_model(path, expected_input_hash=input_hash(16, 3)).mode == "differential"

    def test_metadata_survives(self, tmp_path, model):
        model.metadata["run"] = "tiny"
        reloaded = checkpoint.load_model(checkpoint.save_model(tmp_path / "m.npz", model))
        assert reloaded.metadata == {"run": "tiny"}


@pytest.mark.unit
class TestPartialCheckpoints:
    def test_backbone_round_trip(self, tmp_path, model):
        path = checkpoint.save_backbone(tmp_path / "backbone.npz", model.branch_m.weights)
        weights = checkpoint.load_backbone(path)
        assert weights.config == model.config
        for name, value in model.branch_m.weights.to_arrays().items():
            np.testing.assert_array_equal(weights.to_arrays()[name], value)

    def test_adapters_load_into_fresh_model(self, tmp_path, model, tiny_vit, tiny_lora, rng):
        path = checkpoint.save_adapters(tmp_path / "adapters.npz", model)
        fresh = build(tiny_vit, tiny_lora, seed=11)
        checkpoint.load_adapters(path, fresh)
        pairs = _pairs(rng)
        np.testing.assert_array_equal(score_batch(model, pairs), score_batch(fresh, pairs))

    def test_adapters_do_not_carry_backbone(self, tmp_path, model):
        _, arrays = checkpoint.read_checkpoint(checkpoint.save_adapters(tmp_path / "a.npz", model))
        assert not any(k.startswith("backbone/") for k in arrays)

    def test_adapters_reject_other_rank(self, tmp_path, model, tiny_vit):
        path = checkpoint.save_adapters(tmp_path / "a.npz", model)
        other = build(tiny_vit, LoRAConfig(rank=4, alpha=4.0, dropout=0.0))
        with pytest.raises(CompatibilityError):
            checkpoint.load_adapters(path, other)

    def test_adapters_reject_other_mode(self, tmp_path, model, tiny_vit, tiny_lora):
        path = checkpoint.save_adapters(tmp_path / "a.npz", model)
        with pytest.raises(CompatibilityError):
            checkpoint.load_adapters(path, build(tiny_vit, tiny_lora, mode="single_image"))


@pytest.mark.unit
class TestReadErrors:
    def test_wrong_kind(self, tmp_path, model):
        path = checkpoint.save_backbone(tmp_path / "b.npz", model.branch_m.weights)
        with pytest.raises(CompatibilityError, match="expected a model checkpoint"):
            checkpoint.load_model(path)

    def test_missing_file(self, tmp_path):
        with pytest.raises(ArtifactIOError) as exc_info:
            checkpoint.load_model(tmp_path / "absent.npz")
        assert exc_info.value.exit_code == ExitCode.IO

    def test_corrupt_file(self, tmp_path):
        path = tmp_path / "broken.npz"
        path.write_bytes(b"not a zip archive")
        with pytest.raises(ArtifactIOError):
            checkpoint.read_checkpoint(path)

    def test_plain_npz_without_manifest(self, tmp_path):
        path = tmp_path / "plain.npz"
        np.savez(path, weights=np.zeros(3))
        with pytest.raises(CompatibilityError, match="no checkpoint manifest"):
            checkpoint.read_checkpoint(path)

    def test_future_format_version(self, tmp_path, model):
        path = checkpoint.save_model(tmp_path / "m.npz", model)
        manifest, arrays = checkpoint.read_checkpoint(path)
        manifest["format_version"] = checkpoint.FORMAT_VERSION + 1
        np.savez(path, **arrays, **{checkpoint.MANIFEST_KEY: np.array(json.dumps(manifest))})
        with pytest.raises(CompatibilityError, match="unsupported checkpoint format"):
            checkpoint.load_model(path)

    def test_reshaped_array(self, tmp_path, model):
        path = checkpoint.save_model(tmp_path / "m.npz", model)
        manifest, arrays = checkpoint.read_checkpoint(path)
        arrays["head/weight"] = np.zeros((2, 2))
        np.savez(path, **arrays, **{checkpoint.MANIFEST_KEY: np.array(json.dumps(manifest))})
        with pytest.raises(CompatibilityError, match="head/weight"):
            checkpoint.load_model(path)

    def test_write_leaves_no_temp_files(self, tmp_path, model):
        checkpoint.save_model(tmp_path / "m.npz", model)
        assert [p.name for p in tmp_path.iterdir()] == ["m.npz"]
        assert zipfile.is_zipfile(tmp_path / "m.npz")
