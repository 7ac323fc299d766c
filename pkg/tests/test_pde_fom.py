import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from dlrom.exceptions import InvalidRho, MarginViolation, NonElliptic, UnsupportedSmoothness
from dlrom.pde_fom import (
    AffineDiffusionProblem,
    Coefficient,
    Constant,
    CosineMode,
    Grid,
    GridFunction,
    PolynomialCoefficient,
    SineMode,
    Tabulated,
    anisotropy_residual,
    check_bernstein_condition,
    check_uniform_ellipticity,
    discrete_hs_norm,
    dual_norm_forcing,
    isotropic_rho,
    linf_solution_bound,
    sample_params,
    solve_fom,
    solve_many,
)
from dlrom.verification import FunctionCoefficient, fom_order_slope


def poisson(forcing=1.0, a0=1.0):
    return AffineDiffusionProblem(Constant(a0), (Constant(0.0),), forcing, r=0.5)


class TestGrid:
    def test_nodes_exclude_zero_include_one(self):
        g = Grid(3)
        np.testing.assert_array_equal(g.nodes, np.arange(1, 9) / 8)
        assert g.h == 0.125 and g.n_nodes == 8

    @given(st.integers(1, 14))
    def test_spacing_is_exact(self, k):
        g = Grid(k)
        assert np.all(np.diff(g.nodes) == g.h)
        assert g.nodes[-1] == 1.0

    def test_rejects_level_zero(self):
        with pytest.raises(ValueError):
            Grid(0)


class TestSolveFom:
    def test_parabola_midpoint(self):
        g = Grid(7)
        u = solve_fom(poisson(), [0.0], g)
        mid = u.values[g.n_nodes // 2 - 1]
        assert g.nodes[g.n_nodes // 2 - 1] == 0.5
        assert mid == pytest.approx(0.125, abs=1e-12)

    def test_right_boundary_value_is_zero(self):
        u = solve_fom(poisson(), [0.0], Grid(5))
        assert u.values[-1] == 0.0
        assert u.left == 0.0

    def test_zero_forcing(self):
        u = solve_fom(poisson(0.0), [0.0], Grid(6))
        np.testing.assert_array_equal(u.values, 0.0)

    def test_sine_manufactured_solution(self):
        F = FunctionCoefficient(lambda x: np.pi**2 * np.sin(np.pi * x))
        g = Grid(7)
        u = solve_fom(poisson(F), [0.0], g)
        assert np.max(np.abs(u.values - np.sin(np.pi * g.nodes))) < 1e-3

    def test_second_order_convergence(self):
        slope, errs = fom_order_slope()
        assert abs(slope - 2.0) <= 0.2
        assert all(b < a for a, b in zip(errs, errs[1:]))

    def test_frozen_nodal_values(self):
        prob = AffineDiffusionProblem(
            Constant(2.0), (SineMode(0.3, 2), CosineMode(0.3, 2)), Constant(1.0), r=1.0
        )
        u = solve_fom(prob, [0.5, -0.25], Grid(3))
        # regression values from the 3-point Gauss P1 assembly
        np.testing.assert_allclose(
            u.values[[0, 3, 6]], [0.028269471426240343, 0.06346832116693701, 0.028330666413371758], rtol=1e-12
        )

    def test_non_elliptic_raises(self):
        prob = AffineDiffusionProblem(Constant(1.0), (Constant(2.0),), Constant(1.0), r=0.5)
        with pytest.raises(NonElliptic):
            solve_fom(prob, [-1.0], Grid(4))

    def test_solve_many_matches_loop_and_parallel(self):
        prob = AffineDiffusionProblem(Constant(2.0), (SineMode(0.5, 1),), Constant(1.0))
        mus = sample_params(1, 6, 3)
        g = Grid(5)
        ref = np.stack([solve_fom(prob, mu, g).values for mu in mus])
        np.testing.assert_array_equal(solve_many(prob, mus, g), ref)
        np.testing.assert_allclose(solve_many(prob, mus, g, jobs=2), ref, rtol=0, atol=0)

    def test_parametric_continuity(self):
        prob = AffineDiffusionProblem(Constant(2.0), (SineMode(0.5, 1),), Constant(1.0))
        g = Grid(6)
        base = solve_fom(prob, [0.3], g).values
        gaps = [np.max(np.abs(solve_fom(prob, [0.3 + d], g).values - base)) for d in (1e-1, 1e-2, 1e-3, 1e-4)]
        assert all(b < a for a, b in zip(gaps, gaps[1:]))
        assert gaps[-1] < 1e-5


class TestEllipticity:
    def test_constant_ok(self):
        prob = AffineDiffusionProblem(Constant(2.0), (Constant(0.5), Constant(0.5)), Constant(1.0), r=0.5)
        res = check_uniform_ellipticity(prob)
        assert res["ok"] and res["margin"] == pytest.approx(0.5)

    def test_constant_fails(self):
        prob = AffineDiffusionProblem(Constant(1.0), (Constant(1.0),), Constant(1.0), r=0.1)
        res = check_uniform_ellipticity(prob)
        assert not res["ok"] and res["margin"] == pytest.approx(-0.1)

    def test_audit_grid_oracle(self):
        prob = AffineDiffusionProblem(PolynomialCoefficient((2.0, 1.0)), (SineMode(1.0, 1),), Constant(1.0), r=1.0)
        x = np.linspace(0, 1, 4097)
        res = check_uniform_ellipticity(prob)
        assert res["ok"]
        assert res["margin"] == pytest.approx(np.min(1 + x - np.abs(np.sin(np.pi * x))), abs=1e-12)


class TestBernstein:
    def test_zero_modes(self):
        prob = AffineDiffusionProblem(Constant(1.0), (Constant(0.0),), Constant(1.0), xi=0.0)
        res = check_bernstein_condition(prob, [5.0])
        assert res["ok"] and res["sum"] == 0.0

    def test_p1_example(self):
        prob = AffineDiffusionProblem(Constant(3.0), (Constant(1.0),), Constant(1.0), xi=1.0)
        res = check_bernstein_condition(prob, [3.0])
        assert res["ok"] and res["slack"] == pytest.approx(1 / 3, abs=1e-14)

    def test_p2_example(self):
        prob = AffineDiffusionProblem(Constant(3.0), (Constant(0.4), Constant(0.4)), Constant(1.0), xi=0.1)
        res = check_bernstein_condition(prob, [2.0, 2.0])
        assert not res["ok"] and res["sum"] == pytest.approx(0.2, abs=1e-14)

    def test_rho_must_exceed_one(self):
        prob = AffineDiffusionProblem(Constant(3.0), (Constant(0.4),), Constant(1.0))
        with pytest.raises(InvalidRho):
            check_bernstein_condition(prob, [1.0])


class TestIsotropicRho:
    def test_limit_eps_zero(self):
        rho = isotropic_rho(math.log(2), 1e-15, 1)
        assert rho[0] == pytest.approx(4.0, rel=1e-12)

    def test_p2_closed_form(self):
        np.testing.assert_allclose(isotropic_rho(1.0, 1.0, 2), [math.exp(1.5)] * 2, rtol=1e-14)

    @given(st.floats(0.01, 3.0), st.floats(1e-3, 5.0), st.integers(1, 6))
    def test_condition_holds_with_equality(self, gamma, eps, p):
        rho = isotropic_rho(gamma, eps, p)
        assert abs(anisotropy_residual(rho, gamma, eps)) <= 1e-12

    def test_small_gamma_gives_rho_near_one(self):
        assert 1.0 < isotropic_rho(1e-9, 1.0, 1)[0] < 1.0 + 1e-8


class TestSolutionBound:
    def test_zero_forcing(self):
        assert linf_solution_bound(poisson(0.0)) == 0.0

    def test_unit_forcing(self):
        prob = AffineDiffusionProblem(Constant(2.0), (Constant(0.0),), Constant(1.0), r=1.0)
        expected = math.sqrt(1 + 1 / math.pi**2) * math.sqrt(1 / 12)
        assert linf_solution_bound(prob) == pytest.approx(expected, rel=1e-6)
        # P1 energy of -w'' = 1 loses exactly h^2/12 (nodal values are exact)
        h = 2.0**-10
        discrete = math.sqrt(1 + 1 / math.pi**2) * math.sqrt((1 - h**2) / 12)
        assert linf_solution_bound(prob) == pytest.approx(discrete, rel=1e-12)

    def test_linear_in_forcing(self):
        a = linf_solution_bound(poisson(SineMode(1.0, 3)))
        b = linf_solution_bound(poisson(SineMode(2.0, 3)))
        assert b == pytest.approx(2 * a, rel=1e-12)

    def test_margin_violation(self):
        prob = AffineDiffusionProblem(Constant(2.0), (Constant(0.0),), Constant(1.0), r=0.5, xi=0.5)
        with pytest.raises(MarginViolation):
            linf_solution_bound(prob)

    def test_bounds_sampled_solutions(self):
        prob = AffineDiffusionProblem(
            Constant(2.0), (SineMode(0.3, 2), CosineMode(0.3, 2)), Constant(1.0), r=1.0
        )
        g = Grid(7)
        bound = linf_solution_bound(prob)
        for mu in sample_params(2, 20, 11):
            assert discrete_hs_norm(solve_fom(prob, mu, g), 1) <= bound * 1.05

    def test_dual_norm_of_unit_forcing(self):
        for k in (4, 8, 10):
            h = 2.0**-k
            assert dual_norm_forcing(Constant(1.0), k) == pytest.approx(math.sqrt((1 - h**2) / 12), rel=1e-12)


class TestSampling:
    def test_empty(self):
        assert sample_params(3, 0, 1).shape == (0, 3)

    def test_deterministic(self):
        np.testing.assert_array_equal(sample_params(2, 50, 7), sample_params(2, 50, 7))
        assert not np.array_equal(sample_params(2, 50, 7), sample_params(2, 50, 8))

    def test_frozen_draw(self):
        # Philox stream is part of the reproducibility contract
        np.testing.assert_array_equal(sample_params(2, 1, 0), [[-0.9718659286687046, -0.48446550875076455]])

    def test_mean_within_clt_band(self):
        x = sample_params(2, 100_000, 123)
        assert np.all(np.abs(x.mean(axis=0)) <= 3 * math.sqrt(1 / 3 * 1e-5))
        assert x.min() >= -1 and x.max() <= 1


class TestDiscreteHsNorm:
    def test_zero(self):
        g = Grid(5)
        assert discrete_hs_norm(GridFunction(g, np.zeros(g.n_nodes), left=0.0), 1) == 0.0

    def test_constant(self):
        g = Grid(5)
        assert discrete_hs_norm(GridFunction(g, np.ones(g.n_nodes), left=1.0), 0) == pytest.approx(1.0, abs=1e-12)

    def test_sine_h1(self):
        g = Grid(9)
        u = GridFunction(g, np.sin(2 * np.pi * g.nodes), left=0.0)
        assert discrete_hs_norm(u, 1) == pytest.approx(math.sqrt(0.5 + 2 * np.pi**2), rel=1e-4)

    def test_unsupported_order(self):
        g = Grid(5)
        with pytest.raises(UnsupportedSmoothness):
            discrete_hs_norm(GridFunction(g, np.zeros(g.n_nodes)), 3)


class TestSerialization:
    def test_problem_round_trip(self):
        prob = AffineDiffusionProblem(
            PolynomialCoefficient((2.0, 0.5)), (SineMode(0.3, 2), CosineMode(0.1, 1)), Constant(1.0), r=1.0, xi=0.2
        )
        again = AffineDiffusionProblem.from_dict(prob.to_dict())
        assert again == prob and again.hash() == prob.hash()

    def test_tabulated_csv(self, tmp_path):
        path = tmp_path / "a.csv"
        path.write_text("x,value\n0,1\n0.5,2\n1,1\n")
        coef = Coefficient.from_dict({"kind": "tabulated", "path": "a.csv"}, base_dir=tmp_path)
        assert isinstance(coef, Tabulated)
        np.testing.assert_allclose(coef(np.array([0.25, 0.75])), [1.5, 1.5])
