"""Network constructions: linear-to-ReLU conversion, the Fourier-synthesis
decoder CNN, and the complexity/sample-size bookkeeping."""

from __future__ import annotations

import math
from dataclasses import asdict, dataclass, field

import numpy as np

from .exceptions import ConversionFailure, EmptySampleSet, GridNotDyadic, NotLinear
from .fourier_lift import latent_dim, synthesize_dense
from .neural import Conv1d, Dense, Network, Reshape, TConv1d, _ConvBase
from .pde_fom import Grid


# ---------------------------------------------------------------------------
# Compact sets
# ---------------------------------------------------------------------------


@dataclass
class CompactSampleSet:
    """Finite sample of network inputs plus a per-coordinate margin.

    With ``margin > 0`` the set stands for the bounding box of the points
    widened by ``margin``; with zero margin it is the point set itself.
    """

    points: np.ndarray
    margin: np.ndarray | float = 0.0

    def __post_init__(self):
        self.points = np.atleast_2d(np.asarray(self.points, dtype=float))
        if self.points.size == 0 or len(self.points) == 0:
            raise EmptySampleSet("compact sample set needs at least one point")
        self.margin = np.broadcast_to(
            np.asarray(self.margin, dtype=float), self.points.shape[1:]
        ).copy()
        if np.any(self.margin < 0):
            raise ValueError("inflation margin must be nonnegative")

    @classmethod
    def from_points(cls, points, inflation=0.1):
        """Margin = ``inflation`` times the per-coordinate range of the points."""
        points = np.atleast_2d(np.asarray(points, dtype=float))
        if len(points) == 0:
            raise EmptySampleSet("compact sample set needs at least one point")
        span = points.max(axis=0) - points.min(axis=0)
        return cls(points, inflation * span)

    @property
    def is_box(self):
        return bool(np.any(self.margin > 0))

    def box(self):
        return self.points.min(axis=0) - self.margin, self.points.max(axis=0) + self.margin

    def sample_box(self, n, rng=None):
        rng = np.random.default_rng(rng)
        lo, hi = self.box()
        return rng.uniform(lo, hi, size=(n,) + lo.shape)


# ---------------------------------------------------------------------------
# Linear -> ReLU conversion
# ---------------------------------------------------------------------------


def _is_linear(net: Network):
    for layer in net.weighted_layers:
        if layer.activation != "identity":
            return False
        bias = layer.b if isinstance(layer, Dense) else layer.bias
        if np.any(bias != 0):
            return False
    return True


def linear_to_relu(net: Network, C: CompactSampleSet, broadcast=True, tol=1e-10) -> Network:
    """ReLU network with the same weights that agrees with ``net`` on ``C``.

    Hidden biases shift every pre-activation to be nonnegative over C
    (minimum taken over the points, or exactly over the inflated box); the
    output bias cancels the accumulated shift.  Convolutional hidden biases
    are per-channel scalars when ``broadcast`` is set.
    """
    if not _is_linear(net):
        raise NotLinear("conversion needs identity activations and zero biases everywhere")
    if not isinstance(C, CompactSampleSet):
        C = CompactSampleSet(C)
    out = net.copy()
    weighted = [i for i, layer in enumerate(out.layers) if not isinstance(layer, Reshape)]
    if not weighted:
        return out
    last = weighted[-1]

    if C.is_box:
        lo, hi = C.box()
        center = ((lo + hi) / 2.0)[None]
        radius = ((hi - lo) / 2.0).ravel()
        basis = np.eye(radius.size).reshape((radius.size,) + lo.shape)
    else:
        center = C.points
        radius = None
        basis = None
    shift = np.zeros((1,) + tuple(out.input_shape))  # image of 0 with biases

    for i, layer in enumerate(out.layers):
        zc = layer.linear(center)
        zs = layer.linear(shift)
        if basis is not None:
            basis = layer.linear(basis)
        if isinstance(layer, Reshape):
            center, shift = zc, zs
            continue
        if i == last:
            bias = -zs[0]
            _set_bias(layer, bias)
            layer.activation = "identity"
            break
        if basis is not None:
            spread = np.tensordot(radius, np.abs(basis), axes=(0, 0))
            lower = zc[0] - spread
        else:
            lower = zc.min(axis=0)
        bias = -lower
        if isinstance(layer, _ConvBase) and broadcast:
            bias = bias.max(axis=-1)
        _set_bias(layer, bias)
        layer.activation = "relu"
        center = zc + _bias_array(layer)
        shift = zs + _bias_array(layer)

    if tol is not None:
        dev = conversion_deviation(net, out, C.points)
        ref = np.max(np.abs(net(C.points)), axis=tuple(range(1, net(C.points).ndim)))
        if np.any(dev > tol * (1.0 + ref)):
            raise ConversionFailure(f"converted network deviates by {dev.max():.3e} on C")
    return out


def _set_bias(layer, bias):
    if isinstance(layer, Dense):
        layer.b = np.array(bias, dtype=float)
    else:
        layer.bias = np.array(bias, dtype=float)


def _bias_array(layer):
    if isinstance(layer, Dense):
        return layer.b
    return layer.bias[:, None] if layer.bias.ndim == 1 else layer.bias


def conversion_deviation(linear: Network, relu_net: Network, points) -> np.ndarray:
    """Per-point sup-norm difference between two networks."""
    points = np.asarray(points, dtype=float)
    diff = np.abs(linear(points) - relu_net(points))
    return diff.reshape(len(points), -1).max(axis=1)


# ---------------------------------------------------------------------------
# Decoder CNN
# ---------------------------------------------------------------------------


def _rotation(phi):
    c, s = math.cos(phi), math.sin(phi)
    return np.array([[c, -s], [s, c]])


def build_linear_decoder(m: int, grid: Grid) -> Network:
    """Linear CNN equal to ``synthesize_dense`` on R^(2m+1).

    Layout: a 1-tap channel-mixing conv turns the latent channels into
    (Re, Im) pairs of z_k exp(2 pi i k y_1) for k = 0..m; k radix-2 stages
    of grouped stride-2, kernel-2 transposed convs double the signal length
    and apply the per-bit twiddle exp(i pi k / 2^stage); a final 1-tap conv
    takes real parts with the Hermitian multiplicity (1 for k=0, 2 else).
    """
    if not isinstance(grid, Grid):
        raise GridNotDyadic("decoder needs a dyadic Grid")
    n_nodes = grid.n_nodes
    levels = grid.k
    if n_nodes != 1 << levels:
        raise GridNotDyadic(f"grid has {n_nodes} nodes, not a power of two")
    mt = latent_dim(m)
    pairs = m + 1

    # Phase of the first evaluation point y_1 = (N + 1) / (2N).
    offset = 2.0 * math.pi * (n_nodes + 1) / (2 * n_nodes)
    mix = np.zeros((2 * pairs, mt, 1))
    mix[0, 0, 0] = 1.0
    for k in range(1, m + 1):
        rot = _rotation(k * offset)
        a_idx, b_idx = 2 * k - 1, 2 * k
        mix[2 * k : 2 * k + 2, a_idx, 0] = rot[:, 0]
        mix[2 * k : 2 * k + 2, b_idx, 0] = rot[:, 1]
    layers = [Reshape(mt, 1), Conv1d(mix, activation="identity")]

    for stage in range(1, levels + 1):
        w = np.zeros((2, 2 * pairs, 2))
        for k in range(pairs):
            w[:, 2 * k : 2 * k + 2, 0] = np.eye(2)
            w[:, 2 * k : 2 * k + 2, 1] = _rotation(math.pi * k / 2**stage).T
        layers.append(TConv1d(w, stride=2, groups=pairs, activation="identity"))

    combine = np.zeros((1, 2 * pairs, 1))
    combine[0, 0, 0] = 1.0
    combine[0, 2::2, 0] = 2.0
    layers.append(Conv1d(combine, activation="identity"))
    layers.append(Reshape(1, n_nodes, inverse=True))
    return Network(layers, kind="cnn", input_shape=(mt,))


def build_decoder_cnn(m: int, grid: Grid, C, tol=1e-9, n_check=100, seed=0) -> Network:
    """ReLU CNN decoder exact on ``C`` (a CompactSampleSet of latent codes)."""
    if not isinstance(C, CompactSampleSet):
        C = CompactSampleSet.from_points(C)
    linear = build_linear_decoder(m, grid)
    relu_net = linear_to_relu(linear, C, tol=None)
    checks = [C.points]
    if C.is_box:
        checks.append(C.sample_box(n_check, seed))
    for pts in checks:
        ref = synthesize_dense(pts, grid)
        err = np.max(np.abs(relu_net(pts) - ref))
        scale = max(float(np.max(np.abs(ref))), np.finfo(float).tiny)
        if err > tol * scale:
            raise ConversionFailure(
                f"decoder deviates from dense synthesis by {err:.3e} (scale {scale:.3e})"
            )
    return relu_net


def fit_depth_model(records):
    """Least-squares fit depth ~ a k + b log2(m+1) + c.

    ``records`` holds (k, m, depth) triples; returns the coefficients and
    the coefficient of determination.
    """
    rec = np.asarray(records, dtype=float)
    k, m, depth = rec.T
    cols = [k, np.log2(m + 1), np.ones_like(k)]
    A = np.stack(cols, axis=1)
    coef, *_ = np.linalg.lstsq(A, depth, rcond=None)
    resid = depth - A @ coef
    ss_tot = float(np.sum((depth - depth.mean()) ** 2))
    r2 = 1.0 - float(resid @ resid) / ss_tot if ss_tot > 0 else 1.0
    return {"a": float(coef[0]), "b": float(coef[1]), "c": float(coef[2]), "r2": r2}


def linear_fit_r2(x, y):
    """R^2 of the ordinary least-squares line through (x, y)."""
    x = np.asarray(x, dtype=float)
    y = np.asarray(y, dtype=float)
    slope, intercept = np.polyfit(x, y, 1)
    resid = y - (slope * x + intercept)
    ss_tot = float(np.sum((y - y.mean()) ** 2))
    return 1.0 - float(resid @ resid) / ss_tot if ss_tot > 0 else 1.0


# ---------------------------------------------------------------------------
# Complexity and sample-size bookkeeping
# ---------------------------------------------------------------------------


@dataclass
class TheoryBudget:
    """Transparent evaluation of the sample-size and complexity templates.

    The universal constants are unknown; they default to 1 and the numbers
    are formula values, not guarantees.
    """

    p: int
    gamma: float
    m: int
    k: int
    N: float | None
    fail_prob: float
    c0: float = 1.0
    c1: float = 1.0
    c2: float = 1.0
    c3: float = 1.0
    c4: float = 1.0
    N_tilde: float = 0.0
    Delta: float = 0.0
    reduced_depth_bound: float = 0.0
    reduced_size_bound: float = 0.0
    decoder_depth_bound: float = 0.0
    decoder_size_bound: float = 0.0
    decoder_channels_bound: int = 0
    decoder_kernel_bound: int = 2
    lambda_default: float = 0.0
    notes: list = field(default_factory=list)

    def to_dict(self):
        return asdict(self)


def effective_sample_size(N, p, fail_prob, c0=1.0):
    """N / (c0 log(2N)^2 min{log(2N) + p, log(2N) log(2p)} + log(1/eps))."""
    if N < 1 or not 0 < fail_prob < 1 or p < 1:
        raise ValueError("need N >= 1, 0 < fail_prob < 1, p >= 1")
    L = math.log(2 * N)
    denom = c0 * L * (L * min(L + p, L * math.log(2 * p))) + math.log(1.0 / fail_prob)
    return N / denom


def delta_term(N_tilde, p):
    """Minimum of the three branches defining Delta."""
    b1 = 2 ** (p / 2 + 1) * N_tilde**1.5
    b2 = math.e**2 * (N_tilde / 2**p) ** (1 + 0.5 * math.log2(p))
    b3 = (
        N_tilde**0.5
        * (math.log(N_tilde) + (p + 1) * math.log(2)) ** (p - 1)
        / (2 ** (p / 2 - 1) * math.factorial(p - 1))
    )
    return min(b1, b2, b3)


def compute_budget(
    p,
    gamma,
    m,
    k,
    N=None,
    fail_prob=0.1,
    N_tilde=None,
    c0=1.0,
    c1=1.0,
    c2=1.0,
    c3=1.0,
    c4=1.0,
) -> TheoryBudget:
    """Fill a TheoryBudget from N (or from N_tilde directly)."""
    if p < 1:
        raise ValueError("p must be >= 1")
    if N_tilde is None:
        if N is None:
            raise ValueError("pass N or N_tilde")
        N_tilde = effective_sample_size(N, p, fail_prob, c0)
    nt = float(N_tilde)
    Delta = delta_term(nt, p)
    mt = latent_dim(m)
    s2p = nt / 2**p
    log_p = math.log(p) if p > 1 else 0.0
    smooth = gamma * nt ** (1.0 / (2 * p))
    depth = c1 * (1 + p * log_p) * (1 + math.log(nt)) * (s2p**0.5 + math.log(Delta) + smooth)
    size = c2 * p * (p * s2p + (s2p**0.5 + p * Delta) * (math.log(nt * Delta) + smooth)) + mt * Delta
    log_inv_h = k * math.log(2)
    notes = ["universal constants are placeholders; values are formula evaluations"]
    if nt < 1:
        notes.append("N_tilde < 1: logarithmic terms are outside their intended range")
    return TheoryBudget(
        p=p,
        gamma=gamma,
        m=m,
        k=k,
        N=N,
        fail_prob=fail_prob,
        c0=c0,
        c1=c1,
        c2=c2,
        c3=c3,
        c4=c4,
        N_tilde=nt,
        Delta=Delta,
        reduced_depth_bound=depth,
        reduced_size_bound=size,
        decoder_depth_bound=c3 * log_inv_h,
        decoder_size_bound=c3 * m * log_inv_h,
        decoder_channels_bound=8 * m,
        decoder_kernel_bound=2,
        lambda_default=nt**-0.5,
        notes=notes,
    )
