"""Unit tests for the dual-branch detector."""

import numpy as np
import pytest

from diffound_mad.core import model as M
from diffound_mad.core import tensor as T
from diffound_mad.core.gradcheck import finite_difference_check
from diffound_mad.core.lora import LoRAConfig
from diffound_mad.core.model import BONA_FIDE, MORPH, PairSample, build
from diffound_mad.core.trainer import FocalLossConfig, focal_loss
from diffound_mad.core.vit import ViTConfig
from diffound_mad.errors import ContractError, ShapeError


def _pair(rng, label=BONA_FIDE, same=False):
    suspected = rng.random((3, 16, 16))
    live = suspected.copy() if same else rng.random((3, 16, 16))
    return PairSample("p", suspected, live, label, "bonafide" if label == BONA_FIDE else "landmark_like")


def _perturb_adapters(model, rng, scale=0.1):
    for _, node in model.registry().trainable():
        if node.name and node.name.endswith(".B"):
            node.assign(rng.normal(0, scale, size=node.shape))


def _bound_logits(model, suspected, live, limit=2.0):
    """Rescale the head so every logit lies in [-limit, limit]; the loss stays off the p_t clamp."""
    peak = float(np.abs(M.logits(model, suspected, live).value).max())
    if peak > limit:
        model.head_weight.assign(model.head_weight.value * (limit / peak))
        model.head_bias.assign(model.head_bias.value * (limit / peak))


class LiveTrap:
    """Pair stand-in whose live image must never be read."""

    def __init__(self, suspected, label=MORPH):
        self.pair_id = "trap"
        self.suspected = suspected
        self.label = label
        self.tool_tag = "landmark_like"
        self.reads = 0

    @property
    def live(self):
        self.reads += 1
        raise AssertionError("single-image scoring read the live capture")


@pytest.fixture
def model(tiny_vit, tiny_lora):
    return build(tiny_vit, tiny_lora, seed=0)


@pytest.mark.unit
class TestBuild:
    def test_branches_share_one_frozen_backbone(self, model):
        assert model.branch_m.weights is model.branch_l.weights
        reg = model.registry()
        backbone = [n for n, _ in reg if n.startswith("backbone.")]
        assert backbone and all(not reg[n].requires_grad for n in backbone)
        trainable = {n.split(".")[0] for n, _ in reg.trainable()}
        assert trainable == {"branch_m", "branch_l", "head"}

    def test_adapters_are_independent_objects(self, model):
        a_m = model.branch_m.adapters[0]["q"]
        a_l = model.branch_l.adapters[0]["q"]
        assert a_m.a is not a_l.a and a_m.b is not a_l.b
        assert not np.array_equal(a_m.a.value, a_l.a.value)

    def test_single_image_mode_has_one_branch(self, tiny_vit, tiny_lora):
        single = build(tiny_vit, tiny_lora, mode="single_image")
        assert single.branch_l is None
        assert not any(n.startswith("branch_l") for n, _ in single.registry())

    def test_unknown_mode(self, tiny_vit, tiny_lora):
        with pytest.raises(ContractError):
            build(tiny_vit, tiny_lora, mode="triple")

    def test_backbone_config_must_match(self, tiny_vit, tiny_lora):
        other = build(ViTConfig(image_size=16, patch_size=4, embed_dim=16, num_heads=2, num_layers=2), tiny_lora)
        with pytest.raises(ContractError):
            build(tiny_vit, tiny_lora, backbone=other.branch_m.weights)

    def test_same_seed_same_model(self, tiny_vit, tiny_lora):
        a, b = build(tiny_vit, tiny_lora, seed=4), build(tiny_vit, tiny_lora, seed=4)
        for (na, pa), (nb, pb) in zip(a.registry(), b.registry()):
            assert na == nb
            np.testing.assert_array_equal(pa.value, pb.value)


@pytest.mark.unit
class TestScoring:
    def test_init_scores_are_one_half(self, model, rng):
        for _ in range(5):
            assert M.score(model, _pair(rng)) == 0.5
        assert M.score(model, _pair(rng, same=True)) == 0.5

    def test_branches_agree_at_init(self, model, rng):
        image = rng.random((2, 3, 16, 16))
        np.testing.assert_array_equal(model.branch_m.embed(image).value, model.branch_l.embed(image).value)

    def test_self_difference_is_zero(self, model, rng):
        delta = M.differential_embedding(model, _pair(rng, same=True)).value
        np.testing.assert_array_equal(delta, np.zeros_like(delta))

    def test_swap_negates_with_tied_branches(self, model, rng):
        _perturb_adapters(model, rng)
        model.branch_l = model.branch_m
        pair = _pair(rng)
        swapped = PairSample("q", pair.live, pair.suspected, pair.label)
        np.testing.assert_allclose(
            M.differential_embedding(model, swapped).value, -M.differential_embedding(model, pair).value, atol=1e-12
        )

    def test_difference_nonzero_when_adapters_differ(self, model, rng):
        _perturb_adapters(model, rng)
        delta = M.differential_embedding(model, _pair(rng, same=True)).value
        assert np.linalg.norm(delta) > 0

    def test_identical_inputs_score_sigmoid_of_bias(self, model, rng):
        model.head_weight.assign(rng.normal(size=model.head_weight.shape))
        model.head_bias.assign([0.7])
        assert M.score(model, _pair(rng, same=True)) == pytest.approx(1 / (1 + np.exp(-0.7)), abs=1e-12)

    def test_reverse_difference_flips_sign(self, tiny_vit, tiny_lora, rng):
        forward = build(tiny_vit, tiny_lora, seed=1)
        reverse = build(tiny_vit, tiny_lora, seed=1, reverse_difference=True)
        pair = _pair(rng)
        np.testing.assert_array_equal(
            M.differential_embedding(reverse, pair).value, -M.differential_embedding(forward, pair).value
        )

    def test_single_image_never_reads_live(self, tiny_vit, tiny_lora, rng):
        single = build(tiny_vit, tiny_lora, mode="single_image", seed=2)
        single.head_weight.assign(rng.normal(size=single.head_weight.shape))
        traps = [LiveTrap(rng.random((3, 16, 16))) for _ in range(3)]
        scores = M.score_batch(single, traps)
        assert scores.shape == (3,)
        assert all(t.reads == 0 for t in traps)

    def test_differential_embedding_needs_differential_mode(self, tiny_vit, tiny_lora, rng):
        with pytest.raises(ContractError):
            M.differential_embedding(build(tiny_vit, tiny_lora, mode="single_image"), _pair(rng))

    def test_batch_scores_in_unit_interval(self, model, rng):
        model.head_weight.assign(rng.normal(0, 5, size=model.head_weight.shape))
        scores = M.score_batch(model, [_pair(rng) for _ in range(6)])
        assert np.all((scores >= 0) & (scores <= 1))
        assert M.score_batch(model, []).shape == (0,)

    def test_merged_model_scores_match(self, model, rng):
        _perturb_adapters(model, rng)
        model.head_weight.assign(rng.normal(size=model.head_weight.shape))
        pairs = [_pair(rng) for _ in range(4)]
        np.testing.assert_allclose(
            M.score_batch(M.merge_adapters(model), pairs), M.score_batch(model, pairs), atol=1e-10
        )

    def test_pair_shapes_checked(self, rng):
        with pytest.raises(ShapeError):
            PairSample("x", rng.random((3, 16, 16)), rng.random((3, 8, 8)), BONA_FIDE)
        with pytest.raises(ContractError):
            PairSample("x", rng.random((3, 4, 4)), rng.random((3, 4, 4)), 2)


@pytest.mark.unit
class TestGradients:
    def test_branches_receive_distinct_gradients(self, model, rng):
        _perturb_adapters(model, rng)
        model.head_weight.assign(rng.normal(size=model.head_weight.shape))
        suspected = rng.random((4, 3, 16, 16))
        live = rng.random((4, 3, 16, 16))
        T.backward(focal_loss(M.logits(model, suspected, live), np.array([0, 1, 0, 1])))
        g_m = model.branch_m.adapters[0]["v"].b.grad
        g_l = model.branch_l.adapters[0]["v"].b.grad
        assert g_m is not None and g_l is not None
        assert not np.allclose(g_m, g_l)

    @pytest.mark.parametrize("seed", range(20))
    def test_full_model_matches_finite_differences(self, seed):
        rng = np.random.default_rng(seed)
        cfg = ViTConfig(image_size=8, patch_size=4, channels=1, embed_dim=8, num_heads=2, num_layers=1)
        mode = "differential" if seed % 4 else "single_image"
        model = build(cfg, LoRAConfig(rank=int(rng.integers(1, 3)), alpha=4.0, dropout=0.0), mode=mode, seed=seed)
        _perturb_adapters(model, rng, scale=0.3)
        model.head_weight.assign(rng.normal(size=model.head_weight.shape))
        model.head_bias.assign(rng.normal(size=1))
        suspected = rng.random((3, 1, 8, 8))
        live = rng.random((3, 1, 8, 8))
        feed = live if mode == "differential" else None
        _bound_logits(model, suspected, feed)
        labels = rng.integers(0, 2, size=3)
        focal = FocalLossConfig(alpha_t=float(rng.uniform(0.1, 0.9)), eta=float(rng.uniform(0.0, 3.0)))

        def loss():
            return focal_loss(M.logits(model, suspected, feed), labels, focal)

        assert finite_difference_check(loss, model.trainable_parameters(), atol=1e-6) < 1e-4
