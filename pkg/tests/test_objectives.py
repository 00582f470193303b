import math

import pytest
import torch
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from fdcheck import check_input_gradient
from radarsim.objectives import (
    GENERATOR_TERMS,
    LossBreakdown,
    LossWeights,
    combined_generator_objective,
    cycle_consistency_loss,
    lsgan_discriminator_loss,
    lsgan_generator_loss,
    masked_alignment_loss,
    paired_regression_loss,
    weighted_cross_entropy,
)

T = torch.tensor
TOL = 1e-6


def full(value, shape=(1, 1, 3, 3)):
    return torch.full(shape, float(value), dtype=torch.float64)


class TestLSGAN:
    @pytest.mark.parametrize("real,fake,expected", [(1.0, 0.0, 0.0), (0.5, 0.5, 0.5), (0.0, 1.0, 2.0)])
    def test_discriminator_examples(self, real, fake, expected):
        assert lsgan_discriminator_loss(full(real), full(fake)).item() == pytest.approx(expected, abs=TOL)
        assert lsgan_discriminator_loss(T([real]), T([fake])).item() == pytest.approx(expected, abs=TOL)

    def test_generator_examples(self):
        assert lsgan_generator_loss(full(1.0)).item() == pytest.approx(0.0, abs=TOL)
        assert lsgan_generator_loss(full(0.0)).item() == pytest.approx(1.0, abs=TOL)
        assert lsgan_generator_loss(T([0.2, 0.6])).item() == pytest.approx(0.4, abs=TOL)

    def test_multiple_score_grids(self):
        # patches from several grids are pooled before averaging
        loss = lsgan_generator_loss([T([0.0]), T([1.0, 1.0, 1.0])])
        assert loss.item() == pytest.approx(0.25, abs=TOL)

    def test_empty_rejected(self):
        with pytest.raises(ValueError):
            lsgan_generator_loss(torch.empty(0))
        with pytest.raises(ValueError):
            lsgan_discriminator_loss(T([1.0]), [])

    @given(arrays("float64", 6, elements=st.floats(-5, 5)), arrays("float64", 6, elements=st.floats(-5, 5)))
    def test_minimisers(self, real, fake):
        r, f = torch.from_numpy(real), torch.from_numpy(fake)
        assert lsgan_discriminator_loss(r, f) >= lsgan_discriminator_loss(torch.ones(6), torch.zeros(6))
        assert lsgan_generator_loss(f) >= 0
        if not torch.all(f == 1):
            assert lsgan_generator_loss(f) > 0


class TestL1Losses:
    def test_cycle_examples(self):
        a = full(0.3)
        assert cycle_consistency_loss(a, a).item() == 0.0
        assert cycle_consistency_loss(a, a + 0.3).item() == pytest.approx(0.3, abs=TOL)
        b = T([[0.1, -0.1], [0.2, 0.0]], dtype=torch.float64)
        assert cycle_consistency_loss(torch.zeros(2, 2, dtype=torch.float64), b).item() == pytest.approx(0.1, abs=TOL)

    def test_masked_examples(self):
        pred = full(0.2)
        y = full(-0.4)
        assert masked_alignment_loss(pred, y, torch.zeros_like(pred)).item() == 0.0
        ones = torch.ones_like(pred)
        assert masked_alignment_loss(pred, y, ones).item() == pytest.approx(cycle_consistency_loss(pred, y).item())
        pred = T([0.0, 0.0, 0.0, 0.0], dtype=torch.float64)
        y = T([0.2, -0.4, 0.9, 0.9], dtype=torch.float64)
        mask = T([1.0, 1.0, 0.0, 0.0], dtype=torch.float64)
        assert masked_alignment_loss(pred, y, mask).item() == pytest.approx(0.3, abs=TOL)

    def test_paired_examples(self, rng):
        a = full(0.1)
        assert paired_regression_loss(a, a).item() == 0.0
        assert paired_regression_loss(a, a + 0.5).item() == pytest.approx(0.5, abs=TOL)
        x, y = (torch.from_numpy(rng.uniform(-1, 1, (1, 1, 5, 7))) for _ in range(2))
        brute = sum(abs(float(p) - float(q)) for p, q in zip(x.flatten(), y.flatten())) / x.numel()
        assert paired_regression_loss(x, y).item() == pytest.approx(brute, abs=TOL)

    @pytest.mark.parametrize("fn", [cycle_consistency_loss, paired_regression_loss])
    def test_shape_mismatch(self, fn):
        with pytest.raises(ValueError):
            fn(torch.zeros(2, 2), torch.zeros(2, 3))
        with pytest.raises(ValueError):
            masked_alignment_loss(torch.zeros(2, 2), torch.zeros(2, 2), torch.zeros(3, 2))

    @settings(max_examples=50)
    @given(arrays("float64", (4, 4), elements=st.floats(-1, 1)),
           arrays("float64", (4, 4), elements=st.floats(-1, 1)),
           arrays("bool", (4, 4)),
           arrays("float64", (4, 4), elements=st.floats(-1, 1)))
    def test_masked_ignores_unmasked_cells(self, pred, y, mask, fuzz):
        p, yy, m = torch.from_numpy(pred), torch.from_numpy(y), torch.from_numpy(mask.astype(float))
        fuzzed = torch.where(m.bool(), p, torch.from_numpy(fuzz))
        assert masked_alignment_loss(p, yy, m).item() == pytest.approx(masked_alignment_loss(fuzzed, yy, m).item())
        assert masked_alignment_loss(p, yy, m) >= 0


def uniform_logits(n_cells):
    return torch.zeros(1, 3, 1, n_cells, dtype=torch.float64)


class TestCrossEntropy:
    def test_confident_correct(self):
        labels = T([[[0, 1, 2]]])
        logits = torch.nn.functional.one_hot(labels, 3).permute(0, 3, 1, 2).double() * 1e3
        assert weighted_cross_entropy(logits, labels, [1, 50, 1]).item() == pytest.approx(0.0, abs=TOL)

    def test_uniform_free(self):
        loss = weighted_cross_entropy(uniform_logits(5), torch.zeros(1, 1, 5, dtype=torch.long), [1, 1, 1])
        assert loss.item() == pytest.approx(math.log(3), abs=TOL)

    def test_occupied_weight(self):
        loss = weighted_cross_entropy(uniform_logits(1), torch.ones(1, 1, 1, dtype=torch.long), [1, 50, 1])
        assert loss.item() == pytest.approx(50 * math.log(3), abs=TOL)

    def test_per_cell_mean(self):
        # one occupied and one free cell: (50 ln3 + ln3) / 2
        loss = weighted_cross_entropy(uniform_logits(2), T([[[1, 0]]]), [1, 50, 1])
        assert loss.item() == pytest.approx(25.5 * math.log(3), abs=TOL)

    def test_rejects_bad_input(self):
        with pytest.raises(ValueError):
            weighted_cross_entropy(uniform_logits(2), T([[[1, 0, 0]]]), [1, 50, 1])
        with pytest.raises(ValueError):
            weighted_cross_entropy(uniform_logits(2), T([[[1, 0]]]), [1, 0, 1])


class TestCombined:
    def test_default_weights(self):
        w = LossWeights()
        assert (w.lambda_gw, w.lambda_cx, w.lambda_cw, w.lambda_aw) == (1, 10, 10, 10)
        with pytest.raises(ValueError):
            LossWeights(lambda_cx=-1)

    def test_all_ones(self):
        # 1 + 1*1 + 10 + 10 + 10
        parts = {t: T(1.0) for t in ("g_x", "g_w", "c_x", "c_w", "a_w")}
        out = combined_generator_objective(parts, LossWeights(), ["G_x", "G_w", "C_x", "C_w", "A_w"])
        assert out.total.item() == pytest.approx(32.0, abs=TOL)
        assert out.a_x is None

    def test_zero_parts(self):
        parts = {t: T(0.0) for t in GENERATOR_TERMS}
        assert combined_generator_objective(parts, LossWeights(), GENERATOR_TERMS).total.item() == 0.0

    def test_inactive_terms_ignored(self):
        parts = {t: T(100.0) for t in GENERATOR_TERMS}
        parts["a_x"] = T(2.5)
        out = combined_generator_objective(parts, LossWeights(), ["A_x"])
        assert out.total.item() == 2.5 and out.g_x is None

    def test_missing_active_part(self):
        with pytest.raises(ValueError):
            combined_generator_objective({"g_x": T(1.0)}, LossWeights(), ["G_x", "C_w"])
        with pytest.raises(ValueError):
            combined_generator_objective({}, LossWeights(), ["Z_q"])

    @given(st.lists(st.floats(0, 10), min_size=6, max_size=6), st.lists(st.floats(0, 20), min_size=4, max_size=4))
    def test_linear_in_each_part(self, values, lams):
        w = LossWeights(*lams)
        parts = {t: T(v, dtype=torch.float64) for t, v in zip(GENERATOR_TERMS, values)}
        total = combined_generator_objective(parts, w, GENERATOR_TERMS).total.item()
        coeff = {"a_x": 1, "g_x": 1, "g_w": lams[0], "c_x": lams[1], "c_w": lams[2], "a_w": lams[3]}
        assert total == pytest.approx(sum(coeff[t] * v for t, v in zip(GENERATOR_TERMS, values)), rel=1e-9, abs=1e-9)

    def test_breakdown_detached(self):
        out = LossBreakdown(g_x=T(1.5, requires_grad=True), total=2.0).detached()
        assert out.g_x == 1.5 and isinstance(out.g_x, float) and out.a_w is None
        assert list(out.as_dict()) == ["a_x", "a_w", "g_x", "g_w", "c_x", "c_w", "d_x", "d_w", "total"]


def random_instances(k=5, shape=(1, 1, 4, 5)):
    for seed in range(k):
        g = torch.Generator().manual_seed(seed)
        yield g, [torch.rand(shape, generator=g, dtype=torch.float64) * 2 - 1 for _ in range(2)]


class TestGradients:
    @pytest.mark.parametrize("fn", [cycle_consistency_loss, paired_regression_loss])
    def test_l1(self, fn):
        for _, (a, b) in random_instances():
            assert check_input_gradient(fn, [a, b], index=1) < 1e-3

    def test_masked(self):
        for g, (a, b) in random_instances():
            mask = (torch.rand(a.shape, generator=g) > 0.5).double()
            assert check_input_gradient(lambda p, y: masked_alignment_loss(p, y, mask), [a, b]) < 1e-3

    def test_lsgan(self):
        for _, (a, b) in random_instances():
            assert check_input_gradient(lsgan_discriminator_loss, [a, b], index=0) < 1e-3
            assert check_input_gradient(lsgan_discriminator_loss, [a, b], index=1) < 1e-3
            assert check_input_gradient(lsgan_generator_loss, [a]) < 1e-3

    def test_cross_entropy(self):
        for g, (a, _) in random_instances(shape=(2, 3, 4, 5)):
            labels = torch.randint(0, 3, (2, 4, 5), generator=g)
            assert check_input_gradient(lambda z: weighted_cross_entropy(z, labels, [1, 50, 1]), [a]) < 1e-3
