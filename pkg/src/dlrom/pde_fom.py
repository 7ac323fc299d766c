"""Full-order model for the 1D affine parametric diffusion problem.

    -(a_mu u')' = F  on (0, 1),   u(0) = u(1) = 0,
    a_mu(x) = a0(x) + sum_j mu_j psi_j(x),   mu in [-1, 1]^p.

The solver is a P1 Galerkin discretization on the dyadic grid used by the
rest of the package.  The module also hosts the computable well-posedness
checks (uniform ellipticity, Bernstein budget, hidden-anisotropy radius)
and the parameter sampler.
"""

from __future__ import annotations

import csv
import hashlib
import json
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np
from numpy.polynomial import polynomial as P
from scipy.linalg import LinAlgError, solve_banded

from .exceptions import (
    InvalidRho,
    MarginViolation,
    NonElliptic,
    SingularSystem,
    UnsupportedSmoothness,
)

AUDIT_POINTS = 2**12
# Gauss-Legendre rule on [0, 1], three points.
_GL3_NODES = (np.array([-math.sqrt(3 / 5), 0.0, math.sqrt(3 / 5)]) + 1.0) / 2.0
_GL3_WEIGHTS = np.array([5 / 9, 8 / 9, 5 / 9]) / 2.0


# ---------------------------------------------------------------------------
# Grid
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class Grid:
    """Dyadic grid x_j = j * 2**-k, j = 1..2**k (excludes 0, includes 1)."""

    k: int

    def __post_init__(self):
        if int(self.k) != self.k or self.k < 1:
            raise ValueError(f"grid level k must be an integer >= 1, got {self.k}")
        if self.k > 30:
            raise ValueError("grid level k > 30 is not supported")

    @property
    def h(self) -> float:
        return math.ldexp(1.0, -self.k)

    @property
    def n_nodes(self) -> int:
        return 1 << self.k

    @property
    def nodes(self) -> np.ndarray:
        return np.arange(1, self.n_nodes + 1, dtype=float) * self.h

    @property
    def full_nodes(self) -> np.ndarray:
        """Nodes including the left endpoint x_0 = 0."""
        return np.arange(0, self.n_nodes + 1, dtype=float) * self.h


@dataclass(frozen=True)
class GridFunction:
    """Samples of a function on ``grid.nodes``.

    ``left`` optionally stores the value at x = 0, which is not a grid node;
    the FOM sets it from the boundary condition.
    """

    grid: Grid
    values: np.ndarray
    left: float | None = None

    def __post_init__(self):
        values = np.asarray(self.values, dtype=float)
        if values.shape != (self.grid.n_nodes,):
            raise ValueError(
                f"expected {self.grid.n_nodes} values, got shape {values.shape}"
            )
        if not np.all(np.isfinite(values)):
            raise ValueError("grid function values must be finite")
        values.setflags(write=False)
        object.__setattr__(self, "values", values)

    def full_values(self, order: int = 6) -> np.ndarray:
        """Values on ``grid.full_nodes``; x = 0 is extrapolated when unknown."""
        if self.left is not None:
            return np.concatenate([[self.left], self.values])
        q = min(order, self.grid.n_nodes)
        t = np.arange(1, q + 1, dtype=float)
        # Lagrange extrapolation to t = 0 from t = 1..q.
        weights = np.array(
            [np.prod([-tj / (ti - tj) for tj in t if tj != ti]) for ti in t]
        )
        left = float(weights @ self.values[:q])
        return np.concatenate([[left], self.values])


# ---------------------------------------------------------------------------
# Coefficient families
# ---------------------------------------------------------------------------


class Coefficient:
    """A bounded function on [0, 1], evaluated vectorially."""

    kind = "abstract"

    def __call__(self, x):
        raise NotImplementedError

    def to_dict(self) -> dict:
        raise NotImplementedError

    @staticmethod
    def from_dict(d: dict, base_dir: str | Path | None = None) -> "Coefficient":
        d = dict(d)
        kind = d.pop("kind")
        if kind == "constant":
            return Constant(**d)
        if kind == "sine":
            return SineMode(**d)
        if kind == "cosine":
            return CosineMode(**d)
        if kind == "polynomial":
            return PolynomialCoefficient(tuple(d["coeffs"]))
        if kind == "tabulated":
            if "path" in d:
                path = Path(d["path"])
                if base_dir is not None and not path.is_absolute():
                    path = Path(base_dir) / path
                return Tabulated.from_csv(path)
            return Tabulated(tuple(d["x"]), tuple(d["values"]))
        raise ValueError(f"unknown coefficient kind {kind!r}")


@dataclass(frozen=True)
class Constant(Coefficient):
    value: float
    kind = "constant"

    def __call__(self, x):
        return np.full_like(np.asarray(x, dtype=float), self.value)

    def to_dict(self):
        return {"kind": "constant", "value": self.value}


@dataclass(frozen=True)
class SineMode(Coefficient):
    """c * sin(j * pi * x)."""

    amplitude: float
    mode: int
    kind = "sine"

    def __call__(self, x):
        return self.amplitude * np.sin(self.mode * np.pi * np.asarray(x, dtype=float))

    def to_dict(self):
        return {"kind": "sine", "amplitude": self.amplitude, "mode": self.mode}


@dataclass(frozen=True)
class CosineMode(Coefficient):
    """c * cos(j * pi * x)."""

    amplitude: float
    mode: int
    kind = "cosine"

    def __call__(self, x):
        return self.amplitude * np.cos(self.mode * np.pi * np.asarray(x, dtype=float))

    def to_dict(self):
        return {"kind": "cosine", "amplitude": self.amplitude, "mode": self.mode}


@dataclass(frozen=True)
class PolynomialCoefficient(Coefficient):
    """sum_i coeffs[i] * x**i."""

    coeffs: tuple
    kind = "polynomial"

    def __call__(self, x):
        return P.polyval(np.asarray(x, dtype=float), np.asarray(self.coeffs, dtype=float))

    def to_dict(self):
        return {"kind": "polynomial", "coeffs": list(self.coeffs)}


@dataclass(frozen=True)
class Tabulated(Coefficient):
    """Piecewise-linear interpolant of tabulated (x, value) pairs."""

    x: tuple
    values: tuple
    kind = "tabulated"

    def __post_init__(self):
        x = np.asarray(self.x, dtype=float)
        if x.ndim != 1 or x.size < 2 or x.size != len(self.values):
            raise ValueError("tabulation needs matching x/value columns with >= 2 rows")
        if np.any(np.diff(x) <= 0):
            raise ValueError("tabulation x column must be strictly increasing")
        if not np.all(np.isfinite(self.values)):
            raise ValueError("tabulated values must be finite")

    def __call__(self, x):
        return np.interp(np.asarray(x, dtype=float), self.x, self.values)

    def to_dict(self):
        return {"kind": "tabulated", "x": list(self.x), "values": list(self.values)}

    @classmethod
    def from_csv(cls, path) -> "Tabulated":
        """Read a two-column CSV (x, value) with a header row."""
        with open(path, newline="") as fh:
            rows = list(csv.reader(fh))
        if len(rows) < 3:
            raise ValueError(f"{path}: expected a header row and >= 2 data rows")
        data = [(float(r[0]), float(r[1])) for r in rows[1:] if r]
        xs, vs = zip(*data)
        return cls(tuple(xs), tuple(vs))


def coefficient(spec) -> Coefficient:
    """Coerce numbers, dicts and callables-with-families to a Coefficient."""
    if isinstance(spec, Coefficient):
        return spec
    if isinstance(spec, (int, float)):
        return Constant(float(spec))
    if isinstance(spec, dict):
        return Coefficient.from_dict(spec)
    raise TypeError(f"cannot interpret {spec!r} as a coefficient")


# ---------------------------------------------------------------------------
# Problem definition
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class AffineDiffusionProblem:
    """Coefficients and well-posedness budget of the parametric problem."""

    a0: Coefficient
    psis: tuple
    forcing: Coefficient
    r: float = 0.5
    xi: float = 0.0
    gamma: float = 1.0
    eps: float = 1.0

    def __post_init__(self):
        object.__setattr__(self, "a0", coefficient(self.a0))
        object.__setattr__(self, "forcing", coefficient(self.forcing))
        object.__setattr__(self, "psis", tuple(coefficient(p) for p in self.psis))
        if len(self.psis) < 1:
            raise ValueError("need at least one parametric mode (p >= 1)")
        if self.r <= 0:
            raise ValueError("ellipticity margin r must be positive")
        if self.xi < 0:
            raise ValueError("Bernstein budget xi must be nonnegative")
        if self.gamma <= 0 or self.eps <= 0:
            raise ValueError("anisotropy parameters gamma, eps must be positive")

    @property
    def p(self) -> int:
        return len(self.psis)

    def diffusion(self, mu, x) -> np.ndarray:
        mu = np.asarray(mu, dtype=float)
        a = self.a0(x)
        for mj, psi in zip(mu, self.psis):
            a = a + mj * psi(x)
        return a

    def to_dict(self) -> dict:
        return {
            "a0": self.a0.to_dict(),
            "psis": [p.to_dict() for p in self.psis],
            "forcing": self.forcing.to_dict(),
            "r": self.r,
            "xi": self.xi,
            "gamma": self.gamma,
            "eps": self.eps,
        }

    @classmethod
    def from_dict(cls, d: dict, base_dir=None) -> "AffineDiffusionProblem":
        def coef(c):
            if isinstance(c, dict):
                return Coefficient.from_dict(c, base_dir=base_dir)
            return coefficient(c)

        return cls(
            a0=coef(d["a0"]),
            psis=tuple(coef(c) for c in d["psis"]),
            forcing=coef(d["forcing"]),
            r=float(d.get("r", 0.5)),
            xi=float(d.get("xi", 0.0)),
            gamma=float(d.get("gamma", 1.0)),
            eps=float(d.get("eps", 1.0)),
        )

    def hash(self) -> str:
        blob = json.dumps(self.to_dict(), sort_keys=True, separators=(",", ":"))
        return hashlib.sha256(blob.encode()).hexdigest()[:16]


def _audit_grid():
    return np.linspace(0.0, 1.0, AUDIT_POINTS + 1)


def sup_norm(f: Coefficient) -> float:
    """Sup norm of ``f`` on the audit grid (stand-in for the essential sup)."""
    return float(np.max(np.abs(f(_audit_grid()))))


# ---------------------------------------------------------------------------
# Solver
# ---------------------------------------------------------------------------


def solve_fom(problem: AffineDiffusionProblem, mu, grid: Grid) -> GridFunction:
    """P1 finite-element solution sampled at the grid nodes.

    Stiffness and load integrals use 3-point Gauss quadrature per element.
    The returned values include x = 1 (zero by the boundary condition);
    the boundary value at x = 0 is stored in ``GridFunction.left``.
    """
    mu = np.asarray(mu, dtype=float)
    if mu.shape != (problem.p,):
        raise ValueError(f"expected a parameter of length {problem.p}, got {mu.shape}")
    n, h = grid.n_nodes, grid.h
    left = np.arange(n) * h
    xq = left[:, None] + h * _GL3_NODES[None, :]

    a = problem.diffusion(mu, xq)
    if not np.all(np.isfinite(a)) or np.min(a) <= 0.0:
        raise NonElliptic(
            f"diffusion coefficient is not positive at quadrature points "
            f"(min {np.min(a):.3e}) for mu={mu.tolist()}"
        )
    stiff = (a @ _GL3_WEIGHTS) / h  # int_e a / h**2, times h from the rule
    fq = problem.forcing(xq) * h
    load_left = fq @ (_GL3_WEIGHTS * (1.0 - _GL3_NODES))
    load_right = fq @ (_GL3_WEIGHTS * _GL3_NODES)

    # Interior unknowns at nodes 1..n-1; element e spans nodes e, e+1.
    rhs = load_right[:-1] + load_left[1:]
    ab = np.zeros((3, n - 1))
    ab[1] = stiff[:-1] + stiff[1:]
    ab[0, 1:] = -stiff[1:-1]
    ab[2, :-1] = -stiff[1:-1]
    try:
        interior = solve_banded((1, 1), ab, rhs) if n > 1 else np.zeros(0)
    except (LinAlgError, ValueError) as exc:
        raise SingularSystem(f"tridiagonal solve failed: {exc}") from exc
    if not np.all(np.isfinite(interior)):
        raise SingularSystem("tridiagonal solve produced non-finite values")
    return GridFunction(grid, np.concatenate([interior, [0.0]]), left=0.0)


def solve_many(problem, mus, grid: Grid, jobs: int = 1) -> np.ndarray:
    """Stack ``solve_fom`` over the rows of ``mus`` (order preserved)."""
    mus = np.atleast_2d(np.asarray(mus, dtype=float))
    if len(mus) == 0:
        return np.zeros((0, grid.n_nodes))
    if jobs and jobs > 1:
        from joblib import Parallel, delayed

        rows = Parallel(n_jobs=jobs)(
            delayed(solve_fom)(problem, mu, grid) for mu in mus
        )
    else:
        rows = [solve_fom(problem, mu, grid) for mu in mus]
    return np.stack([r.values for r in rows])


# ---------------------------------------------------------------------------
# Condition checkers
# ---------------------------------------------------------------------------


def check_uniform_ellipticity(problem: AffineDiffusionProblem) -> dict:
    """Audit a0 - r - sum |psi_k| >= 0 on the audit grid."""
    x = _audit_grid()
    margin = problem.a0(x) - problem.r - sum(np.abs(p(x)) for p in problem.psis)
    m = float(np.min(margin))
    return {"ok": m >= 0.0, "margin": m}


def check_bernstein_condition(problem: AffineDiffusionProblem, rho) -> dict:
    rho = np.asarray(rho, dtype=float)
    if rho.shape != (problem.p,):
        raise InvalidRho(f"rho must have length {problem.p}")
    if np.any(rho <= 1.0):
        raise InvalidRho(f"every rho_j must exceed 1, got {rho.tolist()}")
    total = sum(
        ((rj + 1.0 / rj) / 2.0 - 1.0) * sup_norm(psi)
        for rj, psi in zip(rho, problem.psis)
    )
    return {"ok": total <= problem.xi, "slack": problem.xi - total, "sum": total}


def isotropic_rho(gamma: float, eps: float, p: int) -> np.ndarray:
    """Smallest isotropic polyellipse parameter in the hidden-anisotropy class.

    Solves p! (log rho)**p = gamma**p (p+1)**p / (1+eps) for rho.
    """
    if gamma <= 0 or eps <= 0 or p < 1:
        raise ValueError("need gamma > 0, eps > 0 and p >= 1")
    log_fact = math.lgamma(p + 1)
    log_rho = gamma * (p + 1) * math.exp(-(math.log1p(eps) + log_fact) / p)
    return np.full(p, math.exp(log_rho))


def anisotropy_residual(rho, gamma: float, eps: float) -> float:
    """Relative residual of the hidden-anisotropy condition (0 at equality)."""
    rho = np.asarray(rho, dtype=float)
    p = rho.size
    lhs = math.lgamma(p + 1) + float(np.sum(np.log(np.log(rho))))
    rhs = p * math.log(gamma) + p * math.log(p + 1) - math.log1p(eps)
    return math.expm1(lhs - rhs)


def dual_norm_forcing(forcing: Coefficient, k: int = 10) -> float:
    """H^-1 norm of F as the H^1_0 energy of the discrete Poisson solution.

    Equals sup over the P1 space of  int F v / |v|_{H^1_0}.
    """
    unit = AffineDiffusionProblem(
        a0=Constant(1.0), psis=(Constant(0.0),), forcing=forcing, r=1.0
    )
    grid = Grid(k)
    w = solve_fom(unit, np.zeros(1), grid).full_values()
    return float(math.sqrt(np.sum(np.diff(w) ** 2) / grid.h))


def linf_solution_bound(problem: AffineDiffusionProblem, k: int = 7) -> float:
    """sqrt(1 + 1/pi^2) ||F||_{H^-1} / (r - xi), with the dual norm computed
    on a mesh 8x finer than the level-``k`` working grid."""
    if problem.r <= problem.xi:
        raise MarginViolation(
            f"need r > xi for the solution bound, got r={problem.r}, xi={problem.xi}"
        )
    fnorm = dual_norm_forcing(problem.forcing, k + 3)
    return math.sqrt(1.0 + 1.0 / math.pi**2) * fnorm / (problem.r - problem.xi)


# ---------------------------------------------------------------------------
# Sampling and norms
# ---------------------------------------------------------------------------


def make_rng(seed: int) -> np.random.Generator:
    """The package PRNG: Philox4x64 (counter-based) seeded with ``seed``."""
    return np.random.Generator(np.random.Philox(int(seed)))


def sample_params(p: int, N: int, seed: int) -> np.ndarray:
    """N i.i.d. uniform draws on [-1, 1]^p as an (N, p) array."""
    if N < 0 or p < 1:
        raise ValueError("need N >= 0 and p >= 1")
    return make_rng(seed).uniform(-1.0, 1.0, size=(N, p))


def discrete_hs_norm(u: GridFunction, s: int) -> float:
    """Trapezoidal H^s energy norm of grid data, derivatives by differences."""
    if s not in (0, 1, 2):
        raise UnsupportedSmoothness(f"discrete H^s norm supports s in {{0,1,2}}, got {s}")
    if u.grid.n_nodes < 2 ** (s + 1):
        raise ValueError(f"need at least {2 ** (s + 1)} nodes for s={s}")
    v = u.full_values()
    h = u.grid.h
    total = 0.0
    for order in range(s + 1):
        total += float(np.trapezoid(v**2, dx=h))
        if order < s:
            v = np.gradient(v, h, edge_order=2)
    return math.sqrt(total)
