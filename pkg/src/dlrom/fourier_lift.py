"""Hermite periodicization, the truncated-Fourier lifting T and its real form.

Latent codes are real vectors of length 2m+1 laid out as
``[a_0, a_1, b_1, ..., a_m, b_m]`` where ``z_k = a_k + i b_k`` is the k-th
Fourier coefficient of the periodicized signal.  Spectra are complex
vectors ordered ``k = -m..m``.
"""

from __future__ import annotations

import math
from fractions import Fraction
from dataclasses import dataclass
from typing import Callable, Sequence

import numpy as np
from numpy.polynomial import polynomial as P

from .exceptions import GridTooCoarse, IllConditioned, NotHermitian
from .pde_fom import Grid, GridFunction

MAX_SMOOTHNESS = 8


# ---------------------------------------------------------------------------
# Hermite two-point polynomials
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class HermiteBasis:
    """Monomial coefficients of p_{s,j}, q_{s,j} (rows j = 0..s-1).

    p_{s,j} has unit j-th derivative at 0 and vanishes to order s at 1;
    q_{s,j} is the mirror image with the roles of 0 and 1 swapped.
    """

    s: int
    p_coeffs: np.ndarray
    q_coeffs: np.ndarray

    def p(self, j, x):
        return P.polyval(np.asarray(x, dtype=float), self.p_coeffs[j])

    def q(self, j, x):
        return P.polyval(np.asarray(x, dtype=float), self.q_coeffs[j])

    def correction_matrix(self, x) -> np.ndarray:
        """Rows j: p_{s,j}(x) - q_{s,j}(x)."""
        x = np.asarray(x, dtype=float)
        return np.stack([self.p(j, x) - self.q(j, x) for j in range(self.s)])


def _hermite_system(s):
    n = 2 * s
    A = np.zeros((n, n))
    for k in range(s):
        for deg in range(k, n):
            falling = math.perm(deg, k)
            A[k, deg] = falling if deg == k else 0.0  # d^k x^deg at 0
            A[s + k, deg] = falling  # d^k x^deg at 1
    return A


def _exact_inverse(A):
    """Inverse of an integer matrix by Gauss-Jordan over the rationals.

    The Hermite system has integer entries; eliminating exactly and rounding
    once keeps the monomial coefficients accurate up to s = 8.
    """
    n = len(A)
    M = [[Fraction(int(v)) for v in row] + [Fraction(int(i == r)) for i in range(n)] for r, row in enumerate(A)]
    for c in range(n):
        piv = next(r for r in range(c, n) if M[r][c] != 0)
        M[c], M[piv] = M[piv], M[c]
        inv = 1 / M[c][c]
        M[c] = [v * inv for v in M[c]]
        for r in range(n):
            if r != c and M[r][c] != 0:
                f = M[r][c]
                M[r] = [a - f * b for a, b in zip(M[r], M[c])]
    return np.array([[float(v) for v in row[n:]] for row in M])


_BASIS_CACHE: dict[int, HermiteBasis] = {}


def build_hermite_basis(s: int) -> HermiteBasis:
    if not 1 <= s <= MAX_SMOOTHNESS:
        raise ValueError(f"smoothness index must be in 1..{MAX_SMOOTHNESS}, got {s}")
    if s in _BASIS_CACHE:
        return _BASIS_CACHE[s]
    A = _hermite_system(s)
    rhs = np.eye(2 * s)
    coeffs = _exact_inverse(A)  # column c interpolates unit datum c
    scale = np.maximum(np.abs(A) @ np.abs(coeffs), 1.0)
    residual = np.max(np.abs(A @ coeffs - rhs) / scale)
    if residual > 1e-8:
        raise IllConditioned(f"Hermite system residual {residual:.2e} for s={s}")
    basis = HermiteBasis(s, coeffs[:, :s].T.copy(), coeffs[:, s:].T.copy())
    basis.p_coeffs.setflags(write=False)
    basis.q_coeffs.setflags(write=False)
    _BASIS_CACHE[s] = basis
    return basis


# ---------------------------------------------------------------------------
# Smooth test functions
# ---------------------------------------------------------------------------


class SmoothFunction:
    """A function on [0, 1] together with its first derivatives.

    ``derivs[j]`` evaluates the j-th derivative.  Linear combinations are
    supported so that linearity of T can be audited.
    """

    def __init__(self, derivs: Sequence[Callable]):
        self.derivs = tuple(derivs)

    def __call__(self, x):
        return self.derivs[0](np.asarray(x, dtype=float))

    def derivative(self, j, x):
        if j >= len(self.derivs):
            raise ValueError(f"derivative of order {j} not available")
        return self.derivs[j](np.asarray(x, dtype=float))

    def endpoint_derivatives(self, s):
        left = np.array([float(self.derivative(j, 0.0)) for j in range(s)])
        right = np.array([float(self.derivative(j, 1.0)) for j in range(s)])
        return left, right

    def hs_norm(self, s, n_nodes=64, panels=32):
        """H^s energy norm by composite Gauss-Legendre quadrature."""
        x, w = _composite_gauss(panels, n_nodes)
        return math.sqrt(sum(float(w @ self.derivative(j, x) ** 2) for j in range(s + 1)))

    def __add__(self, other):
        n = min(len(self.derivs), len(other.derivs))
        return SmoothFunction(
            [(lambda x, a=a, b=b: a(x) + b(x)) for a, b in zip(self.derivs[:n], other.derivs[:n])]
        )

    def __rmul__(self, c):
        return SmoothFunction([(lambda x, a=a: c * a(x)) for a in self.derivs])

    @classmethod
    def polynomial(cls, coeffs, order=10):
        """sum_i coeffs[i] x**i."""
        c = np.asarray(coeffs, dtype=float)
        derivs = []
        for _ in range(order + 1):
            derivs.append(lambda x, c=c: P.polyval(x, c) + 0.0 * x)
            c = P.polyder(c) if c.size > 1 else np.zeros(1)
        return cls(derivs)

    @classmethod
    def sinusoid(cls, amplitude, omega, phase=0.0, order=10):
        """amplitude * sin(omega x + phase)."""
        return cls(
            [
                (lambda x, j=j: amplitude * omega**j * np.sin(omega * x + phase + j * np.pi / 2))
                for j in range(order + 1)
            ]
        )


def _composite_gauss(panels, nodes, a=0.0, b=1.0):
    t, w = np.polynomial.legendre.leggauss(nodes)
    edges = np.linspace(a, b, panels + 1)
    half = np.diff(edges) / 2.0
    mid = (edges[:-1] + edges[1:]) / 2.0
    x = (mid[:, None] + half[:, None] * t[None, :]).ravel()
    wx = (half[:, None] * w[None, :]).ravel()
    return x, wx


# ---------------------------------------------------------------------------
# Periodicization and the operator T
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class PeriodicizedFunction:
    """f~(y) = f(2y) + p_f(2y) on [0, 1/2], f(2y - 1) on (1/2, 1]."""

    base: Callable
    endpoint_jumps: np.ndarray
    correction: np.ndarray
    s: int

    def __call__(self, y):
        y = np.asarray(y, dtype=float)
        first = y <= 0.5
        x = np.where(first, 2.0 * y, 2.0 * y - 1.0)
        out = np.asarray(self.base(x), dtype=float)
        return np.where(first, out + P.polyval(x, self.correction), out)


def periodicize(f, s: int, left=None, right=None) -> PeriodicizedFunction:
    """Periodicize ``f`` with the Hermite correction of order ``s``.

    Endpoint derivatives f^(j)(0), f^(j)(1), j < s, come from ``left`` and
    ``right`` or, when omitted, from ``f.endpoint_derivatives(s)``.
    """
    basis = build_hermite_basis(s)
    if left is None or right is None:
        left, right = f.endpoint_derivatives(s)
    jumps = np.asarray(right, dtype=float)[:s] - np.asarray(left, dtype=float)[:s]
    correction = jumps @ (basis.p_coeffs - basis.q_coeffs)
    return PeriodicizedFunction(f, jumps, correction, s)


@dataclass(frozen=True)
class Spectrum:
    """Fourier coefficients z_k, k = -m..m."""

    z: np.ndarray
    m: int

    def __post_init__(self):
        z = np.asarray(self.z, dtype=complex)
        if z.shape[-1] != 2 * self.m + 1:
            raise ValueError(f"spectrum of bandwidth {self.m} needs {2 * self.m + 1} entries")
        object.__setattr__(self, "z", z)

    def coefficient(self, k):
        return self.z[..., k + self.m]

    def hermitian_defect(self) -> float:
        z = self.z
        scale = max(1.0, float(np.max(np.abs(z), initial=0.0)))
        return float(np.max(np.abs(z - np.conj(z[..., ::-1])), initial=0.0)) / scale


def apply_T(f, s: int, m: int, left=None, right=None, panels=None) -> Spectrum:
    """Truncated Fourier coefficients of the periodicized ``f``.

    Composite 8-point Gauss-Legendre quadrature with an even number of
    panels (at least 8(m+1)) so that the kink at y = 1/2 is a panel edge.
    """
    if m < 0:
        raise ValueError("bandwidth m must be nonnegative")
    ftilde = periodicize(f, s, left, right)
    if panels is None:
        panels = max(8 * (m + 1), 64)
    panels += panels % 2
    y, w = _composite_gauss(panels, 8)
    vals = ftilde(y) * w
    k = np.arange(-m, m + 1)
    z = np.exp(-2j * np.pi * np.outer(k, y)) @ vals
    return Spectrum(z, m)


# ---------------------------------------------------------------------------
# Real reparametrization B and its pseudo-inverse
# ---------------------------------------------------------------------------


def latent_dim(m: int) -> int:
    return 2 * m + 1


def bandwidth(code_length: int) -> int:
    if code_length < 1 or code_length % 2 == 0:
        raise ValueError(f"latent codes have odd length 2m+1, got {code_length}")
    return (code_length - 1) // 2


def b_map(spec: Spectrum | np.ndarray, m: int | None = None, tol: float = 1e-8) -> np.ndarray:
    """[z_-m..z_m] -> [a_0, a_1, b_1, ..., a_m, b_m]; batches on the last axis."""
    if not isinstance(spec, Spectrum):
        z = np.asarray(spec, dtype=complex)
        spec = Spectrum(z, bandwidth(z.shape[-1]) if m is None else m)
    defect = spec.hermitian_defect()
    if defect > tol:
        raise NotHermitian(f"spectrum violates z_-k = conj(z_k) by {defect:.2e}")
    m = spec.m
    pos = spec.z[..., m:]
    code = np.empty(spec.z.shape[:-1] + (2 * m + 1,))
    code[..., 0] = pos[..., 0].real
    code[..., 1::2] = pos[..., 1:].real
    code[..., 2::2] = pos[..., 1:].imag
    return code


def b_pinv(code) -> Spectrum:
    code = np.asarray(code, dtype=float)
    m = bandwidth(code.shape[-1])
    pos = np.empty(code.shape[:-1] + (m + 1,), dtype=complex)
    pos[..., 0] = code[..., 0]
    pos[..., 1:] = code[..., 1::2] + 1j * code[..., 2::2]
    z = np.concatenate([np.conj(pos[..., :0:-1]), pos], axis=-1)
    return Spectrum(z, m)


# ---------------------------------------------------------------------------
# Decoder oracle and grid encoder
# ---------------------------------------------------------------------------


def evaluation_points(grid: Grid) -> np.ndarray:
    """(x_j + 1) / 2, where the decoder samples the periodic signal."""
    return (grid.nodes + 1.0) / 2.0


def synthesize_dense(code, grid: Grid) -> np.ndarray:
    """Re sum_k z_k exp(2 pi i k y_j) at y_j = (x_j + 1)/2.

    Accepts one code or a batch of codes (last axis); returns matching rows.
    """
    code = np.asarray(code, dtype=float)
    m = bandwidth(code.shape[-1])
    y = evaluation_points(grid)
    k = np.arange(1, m + 1)
    phase = 2.0 * np.pi * np.outer(k, y)
    return (
        code[..., :1]
        + 2.0 * (code[..., 1::2] @ np.cos(phase))
        - 2.0 * (code[..., 2::2] @ np.sin(phase))
    )


def stencil_width(s: int) -> int:
    """One-sided stencil width giving consistency order >= s+1 for every
    derivative of order < s."""
    return max(s + 2, 2 * s)


def _one_sided_weights(order: int, width: int) -> np.ndarray:
    """Weights on t = 0..width-1 for the order-th derivative at t = 0."""
    t = np.arange(width, dtype=float)
    V = np.vander(t, width, increasing=True).T  # V[n, i] = t_i**n
    rhs = np.zeros(width)
    rhs[order] = math.factorial(order)
    return np.linalg.solve(V, rhs)


def encoder_matrix(grid: Grid, s: int, m: int, left_known: bool = True) -> np.ndarray:
    """Matrix E with encode_grid(u) = E @ u.values (+ nothing: E is linear).

    With ``left_known`` the value at x = 0 is taken as 0 (homogeneous
    Dirichlet data); otherwise it is extrapolated from the first nodes.
    """
    n = grid.n_nodes
    cols = []
    for i in range(n):
        e = np.zeros(n)
        e[i] = 1.0
        u = GridFunction(grid, e, left=0.0 if left_known else None)
        cols.append(encode_grid(u, s, m))
    return np.stack(cols, axis=1)


def encode_grid(u: GridFunction, s: int, m: int) -> np.ndarray:
    """Discrete surrogate of T composed with the inverse of point sampling.

    Endpoint derivatives are recovered by one-sided differences; the
    periodicized sequence on the 2N-point dyadic grid is transformed with a
    DFT (trapezoidal rule, exact for bandlimited sequences).
    """
    n = u.grid.n_nodes
    width = stencil_width(s)
    if n < 4 * m or n < 2 ** (s + 1) or n + 1 < width:
        raise GridTooCoarse(
            f"grid with {n} nodes is too coarse for s={s}, m={m} "
            f"(need N_h >= 4m, N_h >= 2^(s+1))"
        )
    full = u.full_values()
    h = u.grid.h
    left = np.empty(s)
    right = np.empty(s)
    for j in range(s):
        w = _one_sided_weights(j, width) / h**j
        left[j] = w @ full[:width]
        right[j] = (-1) ** j * (w @ full[::-1][:width])
    basis = build_hermite_basis(s)
    jumps = right - left
    first = full + jumps @ basis.correction_matrix(u.grid.full_nodes)
    seq = np.concatenate([first, full[1:n]])  # y_l = l / (2n), l = 0..2n-1
    coeffs = np.fft.fft(seq) / (2 * n)
    pos = coeffs[: m + 1]
    code = np.empty(2 * m + 1)
    code[0] = pos[0].real
    code[1::2] = pos[1:].real
    code[2::2] = pos[1:].imag
    return code


def encode_snapshots(snapshots, grid: Grid, s: int, m: int) -> np.ndarray:
    """Row-wise ``encode_grid`` for FOM snapshots (u(0) = 0 known)."""
    snapshots = np.atleast_2d(np.asarray(snapshots, dtype=float))
    return np.stack(
        [encode_grid(GridFunction(grid, row, left=0.0), s, m) for row in snapshots]
    ) if len(snapshots) else np.zeros((0, 2 * m + 1))


def reconstruction_bound(m: int, s: int, hs_norm: float) -> float:
    """sqrt(2/(2s-1)) m^(1/2-s) ||u||_{H^s}."""
    return math.sqrt(2.0 / (2 * s - 1)) * m ** (0.5 - s) * hs_norm
