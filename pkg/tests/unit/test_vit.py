"""Unit tests for the ViT encoder."""

import numpy as np
import pytest

from diffound_mad.core import tensor as T
from diffound_mad.core.lora import LoRAAdapter, LoRAConfig
from diffound_mad.core.vit import EncoderWeights, ViTConfig, attention, encode, patchify, weight_shapes
from diffound_mad.errors import CompatibilityError, ShapeError


@pytest.fixture
def weights(tiny_vit, rng):
    return EncoderWeights.init(tiny_vit, rng)


@pytest.mark.unit
class TestConfig:
    def test_token_counts(self, tiny_vit):
        assert tiny_vit.num_tokens == 5
        assert ViTConfig.preset("large").num_tokens == 257

    def test_geometry_is_validated(self):
        with pytest.raises(ValueError):
            ViTConfig(image_size=30, patch_size=8)
        with pytest.raises(ValueError):
            ViTConfig(embed_dim=30, num_heads=4)

    def test_unknown_preset(self):
        with pytest.raises(ValueError, match="unknown preset"):
            ViTConfig.preset("huge")

    def test_weights_must_match_config(self, tiny_vit, weights):
        arrays = weights.to_arrays()
        arrays.pop("cls_token")
        with pytest.raises(CompatibilityError, match="missing"):
            EncoderWeights.from_arrays(tiny_vit, arrays)


@pytest.mark.unit
class TestPatchify:
    def test_token_shape(self, weights, rng):
        assert patchify(rng.random((3, 16, 16)), weights).shape == (5, 16)
        assert patchify(rng.random((2, 3, 16, 16)), weights).shape == (2, 5, 16)

    def test_zero_image_gives_patch_bias(self, tiny_vit, rng):
        arrays = EncoderWeights.init(tiny_vit, rng).to_arrays()
        arrays["pos_embed"] = np.zeros_like(arrays["pos_embed"])
        weights = EncoderWeights.from_arrays(tiny_vit, arrays)
        tokens = patchify(np.zeros((3, 16, 16)), weights).value
        np.testing.assert_array_equal(tokens[1:], np.broadcast_to(arrays["patch.bias"], (4, 16)))

    def test_wrong_image_shape(self, weights):
        with pytest.raises(ShapeError):
            patchify(np.zeros((3, 8, 8)), weights)


@pytest.mark.unit
class TestAttention:
    def test_single_token_passes_value_through(self, weights, rng):
        token = T.constant(rng.normal(size=(1, 16)))
        out = attention(token, weights, 0).value
        v = token.value @ weights["layers.0.attn.v.weight"].value.T + weights["layers.0.attn.v.bias"].value
        expected = v @ weights["layers.0.attn.o.weight"].value.T + weights["layers.0.attn.o.bias"].value
        np.testing.assert_allclose(out, expected, atol=1e-12)

    def test_zero_adapters_change_nothing(self, weights, rng):
        tokens = T.constant(rng.normal(size=(5, 16)))
        adapters = {
            p: LoRAAdapter.create(weights[f"layers.0.attn.{p}.weight"], LoRAConfig(rank=2), rng) for p in ("q", "v")
        }
        np.testing.assert_array_equal(attention(tokens, weights, 0, adapters).value, attention(tokens, weights, 0).value)

    def test_permutation_equivariance(self, weights, rng):
        x = rng.normal(size=(5, 16))
        swapped = x[[0, 2, 1, 3, 4]]
        out = attention(T.constant(x), weights, 0).value
        out_swapped = attention(T.constant(swapped), weights, 0).value
        np.testing.assert_allclose(out_swapped, out[[0, 2, 1, 3, 4]], atol=1e-12)

    def test_adapters_only_on_q_and_v(self, weights, rng):
        k = LoRAAdapter.create(weights["layers.0.attn.k.weight"], LoRAConfig(rank=2), rng)
        with pytest.raises(ShapeError):
            attention(T.constant(rng.normal(size=(5, 16))), weights, 0, {"k": k})


@pytest.mark.unit
class TestEncode:
    def test_embedding_shape_and_determinism(self, weights, rng):
        image = rng.random((3, 16, 16))
        a, b = encode(image, weights), encode(image.copy(), weights)
        assert a.shape == (16,)
        np.testing.assert_array_equal(a.value, b.value)

    def test_batch_matches_single(self, weights, rng):
        images = rng.random((3, 3, 16, 16))
        batch = encode(images, weights).value
        for i in range(3):
            np.testing.assert_allclose(batch[i], encode(images[i], weights).value, atol=1e-12)

    def test_desk_config_is_finite(self, rng):
        cfg = ViTConfig.preset("desk")
        out = encode(rng.random((3, 32, 32)), EncoderWeights.init(cfg, rng)).value
        assert np.all(np.isfinite(out))
        assert np.linalg.norm(out) > 0

    def test_adapter_count_must_match_layers(self, weights, rng):
        with pytest.raises(ShapeError):
            encode(rng.random((3, 16, 16)), weights, adapters=[{}])

    def test_weight_shapes_are_ordered(self, tiny_vit):
        names = list(weight_shapes(tiny_vit))
        assert names[0] == "patch.weight"
        assert names[-1] == "final_norm.bias"
