import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from dlrom.exceptions import GridTooCoarse, NotHermitian
from dlrom.fourier_lift import (
    SmoothFunction,
    Spectrum,
    apply_T,
    b_map,
    b_pinv,
    build_hermite_basis,
    encode_grid,
    encode_snapshots,
    encoder_matrix,
    periodicize,
    reconstruction_bound,
    synthesize_dense,
    _composite_gauss,
)
from dlrom.pde_fom import Grid, GridFunction
from dlrom.verification import random_smooth_function

AUDIT = np.linspace(0.0, 1.0, 1000)


def random_hermitian(rng, m, size=()):
    pos = rng.normal(size=size + (m + 1,)) + 1j * rng.normal(size=size + (m + 1,))
    pos[..., 0] = pos[..., 0].real
    return np.concatenate([np.conj(pos[..., :0:-1]), pos], axis=-1)


class TestHermiteBasis:
    def test_s1(self):
        B = build_hermite_basis(1)
        np.testing.assert_allclose(B.p_coeffs, [[1.0, -1.0]], atol=1e-14)
        x, w = _composite_gauss(8, 8)
        assert math.sqrt(w @ B.p(0, x) ** 2) == pytest.approx(1 / math.sqrt(3), rel=1e-13)

    def test_s2_closed_form(self):
        B = build_hermite_basis(2)
        np.testing.assert_allclose(B.p_coeffs, [[1, 0, -3, 2], [0, 1, -2, 1]], atol=1e-13)

    @pytest.mark.parametrize("s", range(1, 9))
    def test_mean_of_p0(self, s):
        x, w = _composite_gauss(16, 16)
        assert w @ build_hermite_basis(s).p(0, x) == pytest.approx(0.5, abs=1e-12)

    @pytest.mark.parametrize("s", range(1, 7))
    def test_endpoint_interpolation(self, s):
        B = build_hermite_basis(s)
        for j in range(s):
            pc, qc = B.p_coeffs[j], B.q_coeffs[j]
            for k in range(s):
                dp = np.polynomial.polynomial.polyder(pc, k) if k else pc
                dq = np.polynomial.polynomial.polyder(qc, k) if k else qc
                ev = np.polynomial.polynomial.polyval
                assert ev(0.0, dp) == pytest.approx(float(j == k), abs=1e-10)
                assert ev(1.0, dp) == pytest.approx(0.0, abs=1e-10)
                assert ev(0.0, dq) == pytest.approx(0.0, abs=1e-10)
                assert ev(1.0, dq) == pytest.approx(float(j == k), abs=1e-10)

    @pytest.mark.parametrize("s", range(1, 7))
    def test_positive_and_p0_decreasing(self, s):
        B = build_hermite_basis(s)
        for j in range(s):
            assert B.p(j, AUDIT).min() >= -1e-10
        assert np.all(np.diff(B.p(0, AUDIT)) <= 1e-10)

    def test_rejects_out_of_range(self):
        with pytest.raises(ValueError):
            build_hermite_basis(9)


class TestPeriodicize:
    def test_constant(self):
        f = SmoothFunction.polynomial([3.0])
        ft = periodicize(f, 2)
        np.testing.assert_array_equal(ft.endpoint_jumps, 0.0)
        np.testing.assert_allclose(ft(AUDIT), 3.0)

    def test_identity_gives_triangle_wave(self):
        ft = periodicize(SmoothFunction.polynomial([0.0, 1.0]), 1)
        np.testing.assert_allclose(ft.correction, [1.0, -2.0], atol=1e-14)
        y = AUDIT
        np.testing.assert_allclose(ft(y), np.where(y <= 0.5, 1 - 2 * y, 2 * y - 1), atol=1e-14)

    def test_s2_matches_first_derivative(self):
        f = SmoothFunction.sinusoid(1.0, 2.3, 0.4)
        ft = periodicize(f, 2)
        h = 1e-5
        for y in (0.5, 1.0):
            left = (ft(y) - ft(y - h)) / h
            right = (ft((y + h) % 1.0) - ft(y % 1.0 if y < 1 else 0.0)) / h
            assert left == pytest.approx(right, abs=1e-3)
        assert float(ft(0.0)) == pytest.approx(float(ft(1.0)), abs=1e-8)
        assert float(ft(0.5)) == pytest.approx(float(ft(0.5 + 1e-12)), abs=1e-8)


class TestApplyT:
    def test_constant(self):
        z = apply_T(SmoothFunction.polynomial([1.0]), 1, 5).z
        expected = np.zeros(11)
        expected[5] = 1.0
        np.testing.assert_allclose(z, expected, atol=1e-12)

    def test_identity_mean(self):
        assert apply_T(SmoothFunction.polynomial([0.0, 1.0]), 1, 3).coefficient(0) == pytest.approx(0.5, abs=1e-14)

    def test_triangle_wave_coefficients(self):
        # triangle wave: z_k = 2 / (pi k)^2 for odd k, 0 for even k != 0
        z = apply_T(SmoothFunction.polynomial([0.0, 1.0]), 1, 6)
        for k in range(1, 7):
            expected = 2 / (math.pi * k) ** 2 if k % 2 else 0.0
            assert z.coefficient(k) == pytest.approx(expected, abs=1e-13)

    def test_hermitian_for_real_input(self):
        z = apply_T(SmoothFunction.sinusoid(1.3, 4.0, 0.2), 2, 10)
        assert z.hermitian_defect() <= 1e-10
        assert abs(z.coefficient(0).imag) <= 1e-10

    def test_linearity(self):
        rng = np.random.default_rng(5)
        f, g = random_smooth_function(rng), random_smooth_function(rng)
        lhs = apply_T(2.0 * f + (-0.7) * g, 2, 12).z
        rhs = 2.0 * apply_T(f, 2, 12).z - 0.7 * apply_T(g, 2, 12).z
        np.testing.assert_allclose(lhs, rhs, atol=1e-10)

    @settings(max_examples=40, deadline=None)
    @given(st.integers(0, 2**32 - 1), st.integers(1, 3), st.integers(1, 24))
    def test_norm_at_most_two(self, seed, s, m):
        f = random_smooth_function(np.random.default_rng(seed))
        assert np.linalg.norm(apply_T(f, s, m).z) <= 2 * (1 + 1e-6) * f.hs_norm(s)


class TestBMap:
    def test_unit_dc(self):
        z = np.zeros(9, dtype=complex)
        z[4] = 1.0
        np.testing.assert_array_equal(b_map(z), [1, 0, 0, 0, 0, 0, 0, 0, 0])

    def test_ordering(self):
        z = np.array([3 - 4j, 1 + 2j, 5, 1 - 2j, 3 + 4j])
        np.testing.assert_array_equal(b_map(z), [5, 1, -2, 3, 4])

    def test_round_trip_and_contraction(self):
        rng = np.random.default_rng(0)
        for _ in range(100):
            m = int(rng.integers(0, 10))
            z = random_hermitian(rng, m)
            np.testing.assert_allclose(b_pinv(b_map(z)).z, z, atol=1e-12)
            assert np.linalg.norm(b_map(z)) <= np.linalg.norm(z) + 1e-15

    def test_batched(self):
        z = random_hermitian(np.random.default_rng(1), 4, (3, 2))
        assert b_map(z).shape == (3, 2, 9)

    def test_rejects_non_hermitian(self):
        with pytest.raises(NotHermitian):
            b_map(np.array([1.0, 0.0, 2.0]))


class TestSynthesizeDense:
    def test_constant(self):
        g = Grid(4)
        np.testing.assert_allclose(synthesize_dense([2.5, 0, 0, 0, 0], g), 2.5)

    def test_first_cosine(self):
        g = Grid(5)
        np.testing.assert_allclose(synthesize_dense([0, 1, 0], g), -2 * np.cos(np.pi * g.nodes), atol=1e-14)

    def test_matches_complex_sum(self):
        rng = np.random.default_rng(2)
        g = Grid(5)
        code = rng.normal(size=7)
        z = b_pinv(code).z
        y = (g.nodes + 1) / 2
        k = np.arange(-3, 4)
        ref = np.real(np.exp(2j * np.pi * np.outer(y, k)) @ z)
        np.testing.assert_allclose(synthesize_dense(code, g), ref, atol=1e-13)

    @pytest.mark.parametrize(
        "f, s, norm",
        [
            (SmoothFunction.polynomial([0.0, 0.5, -0.5]), 1, math.sqrt(1 / 120 + 1 / 12)),
            (SmoothFunction.sinusoid(1.0, math.pi), 1, math.sqrt(0.5 + math.pi**2 / 2)),
            (SmoothFunction.sinusoid(1.0, math.pi), 2, math.sqrt(0.5 + math.pi**2 / 2 + math.pi**4 / 2)),
        ],
    )
    def test_reconstruction_bound(self, f, s, norm):
        g = Grid(9)
        assert f.hs_norm(s) == pytest.approx(norm, rel=1e-12)
        errs = []
        for m in (4, 8, 16, 32, 64, 128):
            err = np.max(np.abs(f(g.nodes) - synthesize_dense(b_map(apply_T(f, s, m)), g)))
            assert err <= reconstruction_bound(m, s, norm)
            errs.append(err)
        assert all(b <= a for a, b in zip(errs, errs[1:]))


class TestEncodeGrid:
    def test_constant_snapshot(self):
        g = Grid(6)
        u = GridFunction(g, np.full(g.n_nodes, 1.7), left=1.7)
        expected = np.zeros(9)
        expected[0] = 1.7
        for s in (1, 2, 3):
            np.testing.assert_allclose(encode_grid(u, s, 4), expected, atol=1e-10)

    def test_identity_second_order(self):
        f = SmoothFunction.polynomial([0.0, 1.0])
        ref = b_map(apply_T(f, 1, 4))
        errs = []
        for k in range(5, 10):
            g = Grid(k)
            errs.append(np.linalg.norm(encode_grid(GridFunction(g, g.nodes, left=0.0), 1, 4) - ref))
        rates = -np.diff(np.log2(errs))
        assert np.all(rates >= 1.9)

    @pytest.mark.parametrize("s", [1, 2, 3])
    def test_rate_against_quadrature_oracle(self, s):
        f = SmoothFunction.sinusoid(1.0, 2.7, 0.3)
        ref = b_map(apply_T(f, s, 6))
        errs = []
        for k in range(5, 10):
            g = Grid(k)
            errs.append(np.linalg.norm(encode_grid(GridFunction(g, f(g.nodes), left=float(f(0.0))), s, 6) - ref))
        slope = np.polyfit(np.arange(5, 10), np.log2(errs), 1)[0]
        assert slope <= -2.0

    def test_extrapolated_left_value(self):
        f = SmoothFunction.sinusoid(1.0, 2.0, 0.5)
        g = Grid(9)
        known = encode_grid(GridFunction(g, f(g.nodes), left=float(f(0.0))), 2, 5)
        guessed = encode_grid(GridFunction(g, f(g.nodes)), 2, 5)
        np.testing.assert_allclose(guessed, known, atol=1e-10)

    def test_matrix_form(self):
        g = Grid(6)
        rng = np.random.default_rng(3)
        U = rng.normal(size=(4, g.n_nodes))
        E = encoder_matrix(g, 2, 5)
        np.testing.assert_allclose(encode_snapshots(U, g, 2, 5), U @ E.T, atol=1e-12)

    def test_too_coarse(self):
        g = Grid(3)
        with pytest.raises(GridTooCoarse):
            encode_grid(GridFunction(g, np.zeros(8), left=0.0), 1, 4)
