import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from proxflow import linalg
from proxflow.pnn import (Pnn, ProxBlock, StableActivation, StiefelParam,
                          averagedness, pnn_forward, r_forward)


def identity_pnn(dim, rng, bias=None, tol=1e-13):
    """kappa=1, identity activation, square orthogonal T, p=1."""
    t0 = linalg.polar_project(rng.standard_normal((dim, dim)), tol=tol)
    blk = ProxBlock(StiefelParam(t0, tol=tol),
                    np.zeros(dim) if bias is None else bias,
                    StableActivation("identity"))
    return Pnn([blk], widen_p=1, base_dim=dim)


def pairwise_ratio(f, dim, count, rng):
    """max ||f(x1)-f(x2)|| / ||x1-x2|| over sampled pairs, vectorized."""
    x1 = rng.standard_normal((dim, count)) * 3.0
    x2 = rng.standard_normal((dim, count)) * 3.0
    num = np.linalg.norm(f(x1) - f(x2), axis=0)
    den = np.linalg.norm(x1 - x2, axis=0)
    keep = den > 1e-12
    return float(np.max(num[keep] / den[keep]))


class TestAveragedness:
    def test_single_block_is_half_averaged(self):
        rng = linalg.make_rng(31)
        net = Pnn.random(2, kappa=1, hidden=4, widen_p=2, rng=rng)
        assert averagedness(net) == pytest.approx(0.5)

    def test_three_blocks(self):
        rng = linalg.make_rng(32)
        net = Pnn.random(2, kappa=3, hidden=4, widen_p=2, rng=rng)
        assert averagedness(net) == pytest.approx(0.75)

    def test_gamma_bound_for_three_blocks_is_two(self):
        t = 3 / 4
        assert 1.0 / (2 * t - 1.0) == pytest.approx(2.0)


class TestPnnForward:
    def test_orthogonal_identity_block_is_identity(self):
        rng = linalg.make_rng(33)
        net = identity_pnn(4, rng)
        x = rng.standard_normal(4)
        y, _ = pnn_forward(net, x)
        assert np.allclose(y, x, atol=1e-12)

    def test_bias_shift(self):
        rng = linalg.make_rng(34)
        b = rng.standard_normal(3)
        net = identity_pnn(3, rng, bias=b)
        t = net.blocks[0].t_param.projected
        x = rng.standard_normal(3)
        y, _ = pnn_forward(net, x)
        assert np.allclose(y, x + t.T @ b, atol=1e-12)

    def test_dimension_mismatch(self):
        rng = linalg.make_rng(35)
        net = Pnn.random(3, kappa=1, hidden=4, widen_p=2, rng=rng)
        with pytest.raises(ValueError):
            pnn_forward(net, np.zeros(5))

    def test_averaged_decomposition_r_is_nonexpansive(self):
        rng = linalg.make_rng(36)
        net = Pnn.random(3, kappa=3, hidden=6, widen_p=4, rng=rng)
        ratio = pairwise_ratio(net.r_apply, 3, 10_000, rng)
        assert ratio <= 1.0 + 1e-9


class TestRForward:
    def test_identity_phi_gives_identity_r(self):
        rng = linalg.make_rng(37)
        net = identity_pnn(3, rng)
        x = rng.standard_normal(3)
        # t = 1/2: R = 2 Phi - x = x
        assert np.allclose(r_forward(net, x), x, atol=1e-12)

    def test_zero_is_fixed_with_zero_biases(self):
        rng = linalg.make_rng(38)
        net = Pnn.random(4, kappa=2, hidden=6, widen_p=2, rng=rng)
        assert np.allclose(r_forward(net, np.zeros(4)), np.zeros(4), atol=1e-14)

    def test_sampled_nonexpansiveness(self):
        rng = linalg.make_rng(39)
        net = Pnn.random(2, kappa=2, hidden=5, widen_p=2, rng=rng)
        x1 = rng.standard_normal(2)
        x2 = rng.standard_normal(2)
        num = np.linalg.norm(r_forward(net, x1) - r_forward(net, x2))
        den = np.linalg.norm(x1 - x2)
        assert num / den <= 1.0 + 1e-9


class TestProxBlockProperties:
    def test_each_block_is_half_averaged(self):
        # prox characterization: 2B - I is nonexpansive
        rng = linalg.make_rng(40)
        net = Pnn.random(3, kappa=1, hidden=7, widen_p=2, rng=rng)
        blk = net.blocks[0]
        wide = net.widen_p * net.base_dim
        ratio = pairwise_ratio(lambda u: 2.0 * blk.apply(u) - u, wide, 10_000, rng)
        assert ratio <= 1.0 + 1e-9

    def test_widening_preserves_averagedness(self):
        rng = linalg.make_rng(41)
        net = Pnn.random(2, kappa=3, hidden=5, widen_p=8, rng=rng)
        ratio = pairwise_ratio(net.r_apply, 2, 10_000, rng)
        assert ratio <= 1.0 + 1e-9

    def test_adapter_roundtrip_exact_for_binary_power_scales(self):
        from proxflow import diffengine as de
        rng = linalg.make_rng(42)
        x = rng.standard_normal((3, 5))
        for p in (1, 4, 16, 64):
            scale = 1.0 / math.sqrt(p)
            back = de.sum_row_segments(de.tile_rows(x, p, scale), p, scale)
            assert np.array_equal(back, x)
        # p=2 uses an irrational scale; exact only to 1 ulp
        scale = 1.0 / math.sqrt(2)
        back = de.sum_row_segments(de.tile_rows(x, 2, scale), 2, scale)
        assert np.allclose(back, x, rtol=5e-16, atol=0.0)


class TestStableActivation:
    @settings(max_examples=200, deadline=None, derandomize=True)
    @given(st.floats(-50, 50))
    def test_elu_derivative_in_unit_interval(self, z):
        act = StableActivation("elu")
        d = act.deriv(np.array([z]))[0]
        assert 0.0 <= d <= 1.0

    @settings(max_examples=200, deadline=None, derandomize=True)
    @given(st.floats(-50, 50))
    def test_tanh_derivative_in_unit_interval(self, z):
        act = StableActivation("tanh")
        d = act.deriv(np.array([z]))[0]
        assert 0.0 <= d <= 1.0

    @pytest.mark.parametrize("kind", ["elu", "tanh", "identity"])
    def test_fixes_zero(self, kind):
        act = StableActivation(kind)
        assert act.apply(np.zeros(3)) == pytest.approx(np.zeros(3), abs=0)

    @pytest.mark.parametrize("kind", ["elu", "tanh", "identity"])
    def test_monotone_on_sorted_samples(self, kind):
        act = StableActivation(kind)
        z = np.sort(linalg.make_rng(43).standard_normal(10_000) * 5.0)
        out = act.apply(z)
        assert np.all(np.diff(out) >= 0.0)

    @pytest.mark.parametrize("kind", ["elu", "tanh"])
    def test_one_lipschitz_on_samples(self, kind):
        act = StableActivation(kind)
        rng = linalg.make_rng(44)
        a, b = rng.standard_normal(10_000) * 5, rng.standard_normal(10_000) * 5
        keep = np.abs(a - b) > 1e-12
        ratio = np.abs(act.apply(a) - act.apply(b))[keep] / np.abs(a - b)[keep]
        assert np.max(ratio) <= 1.0 + 1e-12

    def test_elu_rejects_bad_alpha(self):
        with pytest.raises(ValueError):
            StableActivation("elu", alpha=1.5)

    def test_unknown_kind_rejected(self):
        with pytest.raises(ValueError):
            StableActivation("relu")
