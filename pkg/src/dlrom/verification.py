"""Property suites run by ``dlrom verify``, with JUnit XML and text reports."""

from __future__ import annotations

import math
import time
import xml.etree.ElementTree as ET
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .constructor import (
    CompactSampleSet,
    build_decoder_cnn,
    build_linear_decoder,
    compute_budget,
    conversion_deviation,
    linear_fit_r2,
    linear_to_relu,
)
from .fourier_lift import (
    SmoothFunction,
    apply_T,
    b_map,
    build_hermite_basis,
    reconstruction_bound,
    synthesize_dense,
    _composite_gauss,
)
from .neural import (
    Conv1d,
    Dense,
    Network,
    Reshape,
    TConv1d,
    adjoint_layer,
    conv_to_dense,
)
from .pde_fom import Coefficient, Constant, Grid, AffineDiffusionProblem, solve_fom
from .training import l21_norm, loss


@dataclass
class CaseResult:
    suite: str
    name: str
    passed: bool
    detail: str = ""
    seconds: float = 0.0


class FunctionCoefficient(Coefficient):
    """Coefficient given by an arbitrary callable (not serializable)."""

    kind = "function"

    def __init__(self, func, label="f"):
        self.func = func
        self.label = label

    def __call__(self, x):
        return np.asarray(self.func(np.asarray(x, dtype=float)), dtype=float) + 0.0 * np.asarray(x, dtype=float)

    def to_dict(self):
        raise TypeError(f"coefficient {self.label!r} is not serializable")


# ---------------------------------------------------------------------------
# Random generators shared with the test-suite
# ---------------------------------------------------------------------------


def random_smooth_function(rng, order=10):
    """Random trigonometric sum or polynomial on [0, 1]."""
    if rng.random() < 0.5:
        f = None
        for _ in range(rng.integers(1, 4)):
            term = SmoothFunction.sinusoid(rng.normal(), rng.uniform(0.5, 12.0), rng.uniform(0, 2 * np.pi), order)
            f = term if f is None else f + term
        return f
    return SmoothFunction.polynomial(rng.normal(size=rng.integers(1, 7)), order)


def random_conv_pair(rng, max_param=4):
    """Random Conv1d (identity activation) with a valid input length."""
    s, t, d, g = (int(rng.integers(1, max_param + 1)) for _ in range(4))
    cin = g * int(rng.integers(1, 3))
    cout = g * int(rng.integers(1, 3))
    layer = Conv1d(rng.normal(size=(cout, cin // g, s)), None, t, d, g, "identity")
    n = d * (s - 1) + 1 + int(rng.integers(0, 3 * t + 1))
    return layer, n


def conv_length_reference(n, s, t, d):
    """Count output positions j with j t + (s-1) d <= n-1 by enumeration."""
    count = 0
    j = 0
    while j * t + (s - 1) * d <= n - 1:
        count += 1
        j += 1
    return count


def tconv_length_reference(n, s, t, d):
    """1 + largest index written by the scatter loop."""
    last = -1
    for j in range(n):
        for i in range(s):
            last = max(last, j * t + i * d)
    return last + 1


def manufactured_problem():
    """a = 1 + x, u = sin(pi x), F = -(a u')'."""
    pi = math.pi
    forcing = FunctionCoefficient(lambda x: -pi * np.cos(pi * x) + (1 + x) * pi**2 * np.sin(pi * x), "F")
    a0 = FunctionCoefficient(lambda x: 1.0 + x, "a0")
    return AffineDiffusionProblem(a0, (Constant(0.0),), forcing, r=0.5), lambda x: np.sin(pi * x)


def fom_order_slope(levels=range(4, 10)):
    problem, exact = manufactured_problem()
    hs, errs = [], []
    for k in levels:
        g = Grid(k)
        u = solve_fom(problem, [0.0], g)
        hs.append(g.h)
        errs.append(float(np.max(np.abs(u.values - exact(g.nodes)))))
    slope = np.polyfit(np.log(hs), np.log(errs), 1)[0]
    return float(slope), errs


def random_gradient_network(rng):
    """Dense -> conv -> tconv -> dense network on R^p with smooth-enough layers."""
    p = int(rng.integers(1, 4))
    c, n = 2, 6
    layers = [
        Dense(rng.normal(size=(c * n, p)), rng.normal(size=c * n), "relu"),
        Reshape(c, n),
        Conv1d(rng.normal(size=(4, 1, 2)), rng.normal(size=4), 2, 1, 2, "relu"),
        TConv1d(rng.normal(size=(2, 2, 3)), rng.normal(size=2), 2, 1, 2, "relu"),
    ]
    net = Network(layers, kind="cnn", input_shape=(p,))
    shape = net.shapes()[-1]
    net.layers.append(Reshape(shape[0], shape[1], inverse=True))
    net.layers.append(Dense(rng.normal(size=(3, shape[0] * shape[1])), rng.normal(size=3), "identity"))
    net.shapes()
    return net, p


def gradient_check(net, x, upstream, h=1e-6):
    """Max relative error between backward() and central differences, over
    parameters and inputs; None if a ReLU kink is too close to call."""
    pre = net.pre_activations(x)
    if any(np.min(np.abs(z)) < 1e-3 for z in pre):
        return None
    grads, dx = net.backward(x, upstream)

    def objective():
        return float(np.sum(net(x) * upstream))

    worst = 0.0
    for i, name, arr in net.parameters():
        g = grads[i][name]
        fd = np.empty_like(arr)
        for idx in np.ndindex(arr.shape):
            old = arr[idx]
            arr[idx] = old + h
            fp = objective()
            arr[idx] = old - h
            fm = objective()
            arr[idx] = old
            fd[idx] = (fp - fm) / (2 * h)
        worst = max(worst, float(np.linalg.norm(g - fd) / max(np.linalg.norm(fd), np.linalg.norm(g), 1e-12)))
    fdx = np.empty_like(x)
    for idx in np.ndindex(x.shape):
        old = x[idx]
        x[idx] = old + h
        fp = objective()
        x[idx] = old - h
        fm = objective()
        x[idx] = old
        fdx[idx] = (fp - fm) / (2 * h)
    worst = max(worst, float(np.linalg.norm(dx - fdx) / max(np.linalg.norm(fdx), 1e-12)))
    return worst


def random_linear_network(rng, max_layers=4, max_width=32):
    n_layers = int(rng.integers(1, max_layers + 1))
    widths = [int(w) for w in rng.integers(1, max_width + 1, n_layers + 1)]
    layers = [
        Dense(rng.normal(size=(b, a)), np.zeros(b), "identity") for a, b in zip(widths[:-1], widths[1:])
    ]
    return Network(layers, kind="relu_net", input_shape=(widths[0],))


# ---------------------------------------------------------------------------
# Suites
# ---------------------------------------------------------------------------


def suite_hermite(rng, quick=False):
    out = []
    x, w = _composite_gauss(16, 16)
    grid = np.linspace(0.0, 1.0, 1000)
    for s in range(1, 7):
        B = build_hermite_basis(s)
        for j in range(s):
            norm = math.sqrt(float(w @ B.p(j, x) ** 2))
            out.append((f"p_norm_s{s}_j{j}", norm <= 0.5 ** ((j + 1) / 2) + 1e-10, f"{norm:.6g}"))
            mirror = np.max(np.abs(B.q(j, grid) - (-1) ** j * B.p(j, 1 - grid)))
            out.append((f"mirror_s{s}_j{j}", mirror <= 1e-10, f"{mirror:.2e}"))
        integral = float(w @ B.p(0, x))
        out.append((f"mean_p0_s{s}", abs(integral - 0.5) <= 1e-12, f"{integral:.15f}"))
    return out


def suite_operator_norm(rng, quick=False):
    out = []
    n = 40 if quick else 200
    for s in (1, 2, 3):
        worst = 0.0
        for _ in range(n):
            f = random_smooth_function(rng)
            m = int(rng.integers(1, 33))
            ratio = np.linalg.norm(apply_T(f, s, m).z) / f.hs_norm(s)
            worst = max(worst, ratio)
        out.append((f"T_norm_s{s}", worst <= 2 * (1 + 1e-6), f"max ratio {worst:.4f}"))
    return out


def suite_reconstruction(rng, quick=False):
    out = []
    grid = Grid(9)
    cases = {
        "parabola": (SmoothFunction.polynomial([0.0, 0.5, -0.5]), 1, math.sqrt(1 / 120 + 1 / 12)),
        "sine": (SmoothFunction.sinusoid(1.0, math.pi), 1, None),
    }
    for name, (f, s, norm) in cases.items():
        norm = f.hs_norm(s) if norm is None else norm
        errs = []
        for m in (4, 8, 16, 32, 64, 128):
            approx = synthesize_dense(b_map(apply_T(f, s, m)), grid)
            err = float(np.max(np.abs(f(grid.nodes) - approx)))
            bound = reconstruction_bound(m, s, norm)
            errs.append(err)
            out.append((f"{name}_m{m}", err <= bound, f"{err:.3e} <= {bound:.3e}"))
        mono = all(b <= a for a, b in zip(errs, errs[1:]))
        out.append((f"{name}_monotone", mono, " ".join(f"{e:.2e}" for e in errs)))
    return out


def suite_decoder(rng, quick=False):
    out = []
    ks = (5, 6) if quick else (5, 6, 7, 8)
    for m in (2, 4, 8):
        depths = []
        for k in ks:
            grid = Grid(k)
            Z = rng.normal(size=(100, 2 * m + 1))
            dec = build_decoder_cnn(m, grid, CompactSampleSet.from_points(Z, 0.1))
            ref = synthesize_dense(Z, grid)
            rel = float(np.max(np.abs(dec(Z) - ref)) / np.max(np.abs(ref)))
            acc = dec.accounting()
            depths.append(acc["depth"])
            out.append((f"equivalence_k{k}_m{m}", rel <= 1e-9, f"rel {rel:.2e}"))
            out.append(
                (
                    f"accounting_k{k}_m{m}",
                    acc["kernel_max"] <= 2 and acc["channels_max"] <= 8 * m,
                    f"kernel {acc['kernel_max']} channels {acc['channels_max']}",
                )
            )
        r2 = linear_fit_r2(ks, depths)
        out.append((f"depth_affine_m{m}", r2 >= 0.99, f"depths {depths} R2 {r2:.4f}"))
        lin = build_linear_decoder(m, Grid(ks[0]))
        a, b = rng.normal(size=(2, 4, 2 * m + 1))
        add = float(np.max(np.abs(lin(a + b) - lin(a) - lin(b))))
        hom = float(np.max(np.abs(lin(3.5 * a) - 3.5 * lin(a))))
        out.append((f"linear_m{m}", max(add, hom) <= 1e-10, f"{max(add, hom):.2e}"))
    return out


def suite_relu_conversion(rng, quick=False):
    out = []
    worst_dev, worst_pre, same_weights = 0.0, 0.0, True
    for _ in range(10 if quick else 40):
        net = random_linear_network(rng)
        n_pts = int(rng.integers(1, 257))
        C = CompactSampleSet(rng.normal(size=(n_pts, net.input_shape[0])))
        relu = linear_to_relu(net, C)
        worst_dev = max(worst_dev, float(np.max(conversion_deviation(net, relu, C.points))))
        pre = relu.pre_activations(C.points)
        hidden = pre[:-1]
        if hidden:
            worst_pre = min(worst_pre, min(float(np.min(z)) for z in hidden))
        for a, b in zip(net.weighted_layers, relu.weighted_layers):
            same_weights &= np.array_equal(a.W, b.W)
    out.append(("deviation_on_C", worst_dev <= 1e-10, f"{worst_dev:.2e}"))
    out.append(("hidden_preactivations_nonnegative", worst_pre >= -1e-12, f"{worst_pre:.2e}"))
    out.append(("weights_unchanged", bool(same_weights), ""))
    # off C the conversion may break: a far point activates the clipped side
    net = Network(
        [Dense([[1.0]], [0.0], "identity"), Dense([[1.0]], [0.0], "identity")], input_shape=(1,)
    )
    relu = linear_to_relu(net, CompactSampleSet([[0.0], [1.0]]))
    far = float(np.max(conversion_deviation(net, relu, [[-5.0]])))
    out.append(("negative_control_off_C", far > 1e-6, f"deviation {far:.2e} at x=-5"))
    return out


def suite_conv(rng, quick=False):
    out = []
    worst_adj, worst_dense = 0.0, 0.0
    for _ in range(60 if quick else 300):
        conv, n = random_conv_pair(rng)
        tconv = adjoint_layer(conv)
        v = rng.normal(size=(1, conv.in_channels, n))
        y = conv.linear(v)
        u = rng.normal(size=y.shape)
        back = tconv.linear(u)
        lhs = float(np.sum(y * u))
        rhs = float(np.sum(v[..., : back.shape[-1]] * back))
        worst_adj = max(worst_adj, abs(lhs - rhs) / max(1.0, abs(lhs)))
        M = conv_to_dense(conv, n)
        worst_dense = max(worst_dense, float(np.max(np.abs(M @ v.ravel() - y.ravel()))))
        Mt = conv_to_dense(tconv, y.shape[-1])
        worst_dense = max(worst_dense, float(np.max(np.abs(Mt @ u.ravel() - back.ravel()))))
    out.append(("adjoint_identity", worst_adj <= 1e-12, f"{worst_adj:.2e}"))
    out.append(("conv_to_dense", worst_dense <= 1e-12, f"{worst_dense:.2e}"))
    bad = []
    for n in range(1, 9):
        for s in range(1, 9):
            for t in range(1, 9):
                for d in range(1, 9):
                    w = np.ones((1, 1, s))
                    ref = conv_length_reference(n, s, t, d)
                    if ref >= 1 and Conv1d(w, None, t, d).out_length(n) != ref:
                        bad.append(("conv", n, s, t, d))
                    if TConv1d(w, None, t, d).out_length(n) != tconv_length_reference(n, s, t, d):
                        bad.append(("tconv", n, s, t, d))
    out.append(("length_formulas", not bad, f"{len(bad)} mismatches"))
    return out


def suite_gradients(rng, quick=False):
    worst, checked = 0.0, 0
    while checked < (3 if quick else 10):
        net, p = random_gradient_network(rng)
        x = rng.normal(size=(2, p))
        up = rng.normal(size=(2, 3))
        err = gradient_check(net, x, up)
        if err is None:
            continue
        worst = max(worst, err)
        checked += 1
    return [("reverse_vs_central_differences", worst <= 1e-6, f"max rel {worst:.2e}")]


def suite_fom(rng, quick=False):
    slope, errs = fom_order_slope()
    return [("manufactured_order", abs(slope - 2.0) <= 0.2, f"slope {slope:.3f}")]


def suite_loss(rng, quick=False):
    out = []
    net = Network(
        [Dense(rng.normal(size=(8, 2)), rng.normal(size=8)), Dense(rng.normal(size=(5, 8)), rng.normal(size=5), "identity")],
        input_shape=(2,),
    )
    X, Y = rng.normal(size=(16, 2)), rng.normal(size=(16, 5))
    base = loss(net, X, Y, 0.3)
    worst = max(abs(loss(net.scaled_output(eta), X, eta * Y, 0.3) - eta * base) / base for eta in (0.5, 2.0, 10.0))
    out.append(("homogeneity", worst <= 1e-12, f"{worst:.2e}"))
    W = rng.normal(size=(5, 7))
    ref = 0.0
    for j in range(W.shape[1]):
        ref += math.sqrt(sum(W[i, j] ** 2 for i in range(W.shape[0])))
    out.append(("l21_loop_reference", abs(l21_norm(W) - ref) <= 1e-12 * ref, ""))
    return out


def suite_budget(rng, quick=False):
    out = []
    Delta = compute_budget(1, 1.0, 2, 5, N_tilde=8.0).Delta
    out.append(("delta_example", abs(Delta - 4.0) <= 1e-12, f"{Delta!r}"))
    N, p, eps = 800, 2, 0.1
    L = math.log(2 * N)
    nt = N / (L * L * min(L + p, L * math.log(2 * p)) + math.log(1 / eps))
    got = compute_budget(p, 1.0, 8, 7, N=N, fail_prob=eps).N_tilde
    out.append(("N_tilde_recomputation", abs(got - nt) <= 1e-10 * nt, f"{got!r} vs {nt!r}"))
    return out


SUITES = {
    "hermite": suite_hermite,
    "operator_norm": suite_operator_norm,
    "reconstruction": suite_reconstruction,
    "decoder": suite_decoder,
    "relu_conversion": suite_relu_conversion,
    "conv_adjoint": suite_conv,
    "gradients": suite_gradients,
    "fom_order": suite_fom,
    "loss": suite_loss,
    "budget": suite_budget,
}


def run_suites(names=None, seed=0, quick=False):
    """Run the named suites (all by default); never raises on a failing case."""
    results = []
    for name in names or SUITES:
        rng = np.random.default_rng([seed, sum(map(ord, name))])
        t0 = time.perf_counter()
        try:
            cases = SUITES[name](rng, quick=quick)
        except Exception as exc:  # a crashing suite is a failing suite
            cases = [("suite_error", False, f"{type(exc).__name__}: {exc}")]
        dt = (time.perf_counter() - t0) / max(len(cases), 1)
        results.extend(CaseResult(name, case, bool(ok), detail, dt) for case, ok, detail in cases)
    return results


def write_junit(results, path):
    suites = ET.Element("testsuites")
    for name in dict.fromkeys(r.suite for r in results):
        rows = [r for r in results if r.suite == name]
        el = ET.SubElement(
            suites,
            "testsuite",
            name=name,
            tests=str(len(rows)),
            failures=str(sum(not r.passed for r in rows)),
            time=f"{sum(r.seconds for r in rows):.3f}",
        )
        for r in rows:
            case = ET.SubElement(el, "testcase", classname=f"dlrom.verify.{name}", name=r.name, time=f"{r.seconds:.3f}")
            if not r.passed:
                ET.SubElement(case, "failure", message=r.detail).text = r.detail
            elif r.detail:
                ET.SubElement(case, "system-out").text = r.detail
    ET.ElementTree(suites).write(Path(path), encoding="utf-8", xml_declaration=True)


def summary(results):
    lines = []
    for name in dict.fromkeys(r.suite for r in results):
        rows = [r for r in results if r.suite == name]
        failed = [r for r in rows if not r.passed]
        lines.append(f"{'PASS' if not failed else 'FAIL'} {name}: {len(rows) - len(failed)}/{len(rows)}")
        for r in failed:
            lines.append(f"    {r.name}: {r.detail}")
    total_failed = sum(not r.passed for r in results)
    lines.append(f"{len(results) - total_failed}/{len(results)} checks passed")
    return "\n".join(lines)
