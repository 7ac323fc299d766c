import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from dlrom.constructor import (
    CompactSampleSet,
    build_decoder_cnn,
    build_linear_decoder,
    compute_budget,
    conversion_deviation,
    delta_term,
    effective_sample_size,
    fit_depth_model,
    linear_to_relu,
)
from dlrom.exceptions import EmptySampleSet, NotLinear
from dlrom.fourier_lift import SmoothFunction, apply_T, b_map, reconstruction_bound, synthesize_dense
from dlrom.neural import Dense, Network
from dlrom.pde_fom import Grid
from dlrom.verification import random_linear_network


def two_path_net():
    return Network(
        [Dense([[1.0], [-1.0]], [0.0, 0.0], "identity"), Dense([[1.0, 1.0]], [0.0], "identity")],
        input_shape=(1,),
    )


class TestCompactSampleSet:
    def test_empty(self):
        with pytest.raises(EmptySampleSet):
            CompactSampleSet.from_points(np.zeros((0, 3)))

    def test_box_inflation(self):
        C = CompactSampleSet.from_points([[0.0, 1.0], [2.0, 1.0]], inflation=0.5)
        lo, hi = C.box()
        np.testing.assert_array_equal(lo, [-1.0, 1.0])
        np.testing.assert_array_equal(hi, [3.0, 1.0])

    def test_sample_box_inside(self):
        C = CompactSampleSet.from_points(np.random.default_rng(0).normal(size=(10, 3)), 0.2)
        lo, hi = C.box()
        pts = C.sample_box(500, 1)
        assert np.all(pts >= lo) and np.all(pts <= hi)


class TestLinearToRelu:
    def test_hand_example(self):
        relu = linear_to_relu(two_path_net(), CompactSampleSet([[-1.0], [0.0], [1.0]]))
        np.testing.assert_array_equal(relu.layers[0].b, [1.0, 1.0])
        np.testing.assert_array_equal(relu.layers[1].b, [-2.0])
        np.testing.assert_array_equal(relu([[-1.0], [0.0], [1.0]]), [[0.0], [0.0], [0.0]])

    def test_identity_network(self):
        net = Network([Dense(np.eye(3), None, "identity"), Dense(np.eye(3), None, "identity")], input_shape=(3,))
        pts = np.random.default_rng(0).normal(size=(20, 3))
        np.testing.assert_allclose(linear_to_relu(net, CompactSampleSet(pts))(pts), pts, atol=1e-12)

    @settings(max_examples=50, deadline=None)
    @given(st.integers(0, 2**32 - 1))
    def test_exact_on_samples(self, seed):
        rng = np.random.default_rng(seed)
        net = random_linear_network(rng)
        pts = rng.normal(size=(int(rng.integers(1, 257)), net.input_shape[0]))
        relu = linear_to_relu(net, CompactSampleSet(pts))
        ref = np.max(np.abs(net(pts)), axis=1)
        assert np.all(conversion_deviation(net, relu, pts) <= 1e-10 * (1 + ref))
        for z in relu.pre_activations(pts)[:-1]:
            assert z.min() >= -1e-12
        for a, b in zip(net.weighted_layers, relu.weighted_layers):
            assert np.array_equal(a.W, b.W)

    def test_exact_on_inflated_box(self):
        rng = np.random.default_rng(3)
        net = random_linear_network(rng, max_layers=4, max_width=16)
        C = CompactSampleSet.from_points(rng.normal(size=(30, net.input_shape[0])), 0.3)
        relu = linear_to_relu(net, C)
        pts = C.sample_box(300, 4)
        ref = np.max(np.abs(net(pts)), axis=1)
        assert np.all(conversion_deviation(net, relu, pts) <= 1e-10 * (1 + ref))

    def test_fails_off_sample_set(self):
        relu = linear_to_relu(two_path_net(), CompactSampleSet([[-1.0], [1.0]]))
        assert conversion_deviation(two_path_net(), relu, [[3.0]])[0] > 1.0

    def test_rejects_nonlinear(self):
        net = Network([Dense([[1.0]], [0.5], "identity")], input_shape=(1,))
        with pytest.raises(NotLinear):
            linear_to_relu(net, CompactSampleSet([[0.0]]))
        net = Network([Dense([[1.0]], [0.0], "relu"), Dense([[1.0]], [0.0], "identity")], input_shape=(1,))
        with pytest.raises(NotLinear):
            linear_to_relu(net, CompactSampleSet([[0.0]]))


class TestDecoder:
    def test_dc_latent_gives_ones(self):
        g = Grid(5)
        code = np.zeros((1, 9))
        code[0, 0] = 1.0
        dec = build_decoder_cnn(4, g, CompactSampleSet.from_points(np.vstack([code, -code]), 0.1))
        np.testing.assert_allclose(dec(code)[0], np.ones(g.n_nodes), atol=1e-12)

    @pytest.mark.parametrize("k", [5, 6, 7, 8])
    @pytest.mark.parametrize("m", [2, 4, 8])
    def test_matches_dense_synthesis(self, k, m):
        rng = np.random.default_rng(k * 100 + m)
        Z = rng.normal(size=(100, 2 * m + 1))
        g = Grid(k)
        dec = build_decoder_cnn(m, g, CompactSampleSet.from_points(Z, 0.1))
        ref = synthesize_dense(Z, g)
        assert np.max(np.abs(dec(Z) - ref)) <= 1e-9 * np.max(np.abs(ref))
        acc = dec.accounting()
        assert acc["kernel_max"] <= 2 and acc["channels_max"] <= 8 * m
        assert acc["depth"] == k + 1

    def test_linear_decoder_is_linear(self):
        lin = build_linear_decoder(4, Grid(6))
        rng = np.random.default_rng(0)
        a, b = rng.normal(size=(2, 5, 9))
        np.testing.assert_allclose(lin(a + b), lin(a) + lin(b), atol=1e-10)
        np.testing.assert_allclose(lin(-2.5 * a), -2.5 * lin(a), atol=1e-10)

    def test_depth_affine_in_k(self):
        records = []
        for m in (2, 4, 8):
            for k in (5, 6, 7, 8):
                records.append((k, m, build_linear_decoder(m, Grid(k)).accounting()["depth"]))
        fit = fit_depth_model(records)
        assert fit["r2"] >= 0.99
        assert fit["a"] == pytest.approx(1.0, abs=1e-12)

    def test_reconstruction_through_cnn(self):
        f = SmoothFunction.sinusoid(1.0, math.pi)
        g = Grid(8)
        for m in (4, 16, 64):
            code = b_map(apply_T(f, 1, m))[None]
            dec = build_decoder_cnn(m, g, CompactSampleSet.from_points(np.vstack([code, 0 * code]), 0.1))
            err = np.max(np.abs(f(g.nodes) - dec(code)[0]))
            assert err <= reconstruction_bound(m, 1, f.hs_norm(1))

    def test_frozen_output(self):
        g = Grid(3)
        code = np.array([[0.1, 0.2, -0.3, 0.05, 0.4]])
        dec = build_decoder_cnn(2, g, CompactSampleSet.from_points(np.vstack([code, -code]), 0.1))
        # hand-evaluated series a0 + 2 sum_k (a_k cos - b_k sin)(2 pi k y), y = (x + 1)/2
        y = (g.nodes + 1) / 2
        ref = 0.1 + 2 * (0.2 * np.cos(2 * np.pi * y) + 0.3 * np.sin(2 * np.pi * y))
        ref += 2 * (0.05 * np.cos(4 * np.pi * y) - 0.4 * np.sin(4 * np.pi * y))
        np.testing.assert_allclose(dec(code)[0], ref, atol=1e-13)


class TestBudget:
    def test_delta_example(self):
        assert compute_budget(1, 1.0, 2, 5, N_tilde=8.0).Delta == pytest.approx(4.0, abs=1e-12)
        branches = (2**1.5 * 8**1.5, math.e**2 * 4, math.sqrt(2) * math.sqrt(8))
        assert delta_term(8.0, 1) == pytest.approx(min(branches), abs=1e-12)

    def test_n_tilde_recomputation(self):
        N, p, eps = 800, 2, 0.1
        L = math.log(1600)
        expected = 800 / (L * (L * min(L + 2, L * math.log(4))) + math.log(10))
        got = compute_budget(p, 1.0, 8, 7, N=N, fail_prob=eps).N_tilde
        assert got == pytest.approx(expected, rel=1e-10)
        assert got == pytest.approx(1.5602253555616663, rel=1e-14)

    @pytest.mark.parametrize("p", range(1, 9))
    @pytest.mark.parametrize("eps", [0.01, 0.1, 0.5, 0.99])
    def test_monotone_in_N_beyond_small_samples(self, p, eps):
        vals = [effective_sample_size(N, p, eps) for N in range(20, 20000, 7)]
        assert all(b >= a for a, b in zip(vals, vals[1:]))

    def test_dips_for_tiny_N(self):
        # N / log(2N)^3 falls while log(2N) is below about 3
        assert effective_sample_size(1, 3, 0.1) > effective_sample_size(10, 3, 0.1)

    def test_fail_prob_limit(self):
        N, p = 100, 1
        L = math.log(200)
        near_one = effective_sample_size(N, p, 1 - 1e-12)
        assert near_one == pytest.approx(N / (L * L * min(L + p, L * math.log(2 * p))), rel=1e-9)

    def test_decoder_templates(self):
        b = compute_budget(2, 1.0, 8, 7, N=800)
        assert b.decoder_channels_bound == 64 and b.decoder_kernel_bound == 2
        assert b.lambda_default == pytest.approx(b.N_tilde**-0.5)

    def test_invalid_inputs(self):
        with pytest.raises(ValueError):
            compute_budget(0, 1.0, 2, 5, N=10)
        with pytest.raises(ValueError):
            effective_sample_size(10, 1, 1.5)
