"""Datasets, the regularized latent regression problem, and ROM evaluation."""

from __future__ import annotations

import csv
import hashlib
import json
import logging
import math
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path

import numpy as np

from .constructor import effective_sample_size
from .exceptions import Divergence, ShapeMismatch
from .fourier_lift import encode_snapshots, latent_dim
from .neural import Dense, Network, mlp
from .pde_fom import (
    AffineDiffusionProblem,
    Grid,
    check_uniform_ellipticity,
    make_rng,
    sample_params,
    solve_many,
)

log = logging.getLogger(__name__)

DATASET_FORMAT = "dlrom-dataset"
DATASET_VERSION = 1
LOG_HEADER = ("epoch", "data_fit", "reg", "total")


# ---------------------------------------------------------------------------
# Datasets
# ---------------------------------------------------------------------------


@dataclass
class Dataset:
    params: np.ndarray
    snapshots: np.ndarray
    latents: np.ndarray
    meta: dict = field(default_factory=dict)

    def __post_init__(self):
        self.params = np.atleast_2d(np.asarray(self.params, dtype=float))
        self.snapshots = np.atleast_2d(np.asarray(self.snapshots, dtype=float))
        self.latents = np.atleast_2d(np.asarray(self.latents, dtype=float))
        n = len(self.params)
        if len(self.snapshots) != n or len(self.latents) != n:
            raise ShapeMismatch(
                f"row counts differ: params {n}, snapshots {len(self.snapshots)}, "
                f"latents {len(self.latents)}"
            )

    def __len__(self):
        return len(self.params)

    def subset(self, n):
        return Dataset(self.params[:n], self.snapshots[:n], self.latents[:n], dict(self.meta, N=int(n)))

    def save(self, directory) -> Path:
        """Write ``manifest.json`` and ``data.bin`` (little-endian float64)."""
        directory = Path(directory)
        directory.mkdir(parents=True, exist_ok=True)
        arrays = [("params", self.params), ("snapshots", self.snapshots), ("latents", self.latents)]
        with open(directory / "data.bin", "wb") as fh:
            for _, arr in arrays:
                fh.write(np.ascontiguousarray(arr, dtype="<f8").tobytes())
        manifest = {
            "format": DATASET_FORMAT,
            "version": DATASET_VERSION,
            "byte_order": "little",
            "dtype": "float64",
            "arrays": [{"name": name, "shape": list(arr.shape)} for name, arr in arrays],
            "meta": self.meta,
        }
        with open(directory / "manifest.json", "w") as fh:
            json.dump(manifest, fh, indent=1, sort_keys=True)
        return directory

    @classmethod
    def load(cls, directory) -> "Dataset":
        directory = Path(directory)
        with open(directory / "manifest.json") as fh:
            manifest = json.load(fh)
        if manifest.get("format") != DATASET_FORMAT:
            raise ValueError(f"{directory}: not a dataset container")
        if manifest.get("version") != DATASET_VERSION:
            raise ValueError(f"{directory}: unsupported dataset version {manifest.get('version')}")
        raw = np.fromfile(directory / "data.bin", dtype="<f8")
        out, offset = {}, 0
        for spec in manifest["arrays"]:
            count = int(np.prod(spec["shape"]))
            out[spec["name"]] = raw[offset : offset + count].reshape(spec["shape"])
            offset += count
        if offset != raw.size:
            raise ValueError(f"{directory}: data.bin size does not match manifest")
        return cls(out["params"], out["snapshots"], out["latents"], manifest["meta"])


def make_dataset(
    problem: AffineDiffusionProblem,
    grid: Grid,
    s: int,
    m: int,
    N: int,
    seed: int,
    encoder="quadrature",
    split="train",
    jobs=1,
) -> Dataset:
    """Sample parameters, solve the FOM and compute latent targets.

    ``encoder`` is ``"quadrature"`` (the grid encoder) or a Network mapping
    snapshots to latent codes.
    """
    check = check_uniform_ellipticity(problem)
    if not check["ok"]:
        log.warning("uniform ellipticity audit fails (margin %.3e)", check["margin"])
    mus = sample_params(problem.p, N, seed)
    snaps = solve_many(problem, mus, grid, jobs=jobs) if N else np.zeros((0, grid.n_nodes))
    if isinstance(encoder, str):
        if encoder != "quadrature":
            raise ValueError(f"unknown encoder {encoder!r}")
        latents = encode_snapshots(snaps, grid, s, m)
        enc_name = "quadrature"
    else:
        latents = encoder(snaps) if N else np.zeros((0, latent_dim(m)))
        enc_name = "network"
    meta = {
        "problem": problem.to_dict(),
        "problem_hash": problem.hash(),
        "k": grid.k,
        "s": s,
        "m": m,
        "N": int(N),
        "p": problem.p,
        "seed": int(seed),
        "split": split,
        "encoder": enc_name,
        "prng": "numpy Philox4x64",
    }
    return Dataset(mus, snaps, latents.reshape(len(mus), latent_dim(m)), meta)


# ---------------------------------------------------------------------------
# Loss
# ---------------------------------------------------------------------------


def l21_norm(W) -> float:
    """Sum of Euclidean norms of the columns of W."""
    W = np.asarray(W, dtype=float)
    return float(np.sum(np.sqrt(np.sum(W**2, axis=0))))


def _output_weight(phi: Network):
    out = phi.output_layer
    if not isinstance(out, Dense):
        raise ShapeMismatch("the reduced network must end with a standard (dense) layer")
    return out.W


def loss_terms(phi: Network, params, targets, lam):
    pred = phi(params)
    targets = np.asarray(targets, dtype=float)
    if pred.shape != targets.shape:
        raise ShapeMismatch(f"network output {pred.shape} vs targets {targets.shape}")
    if len(pred) == 0:
        raise ValueError("loss needs a nonempty batch")
    data_fit = math.sqrt(float(np.sum((pred - targets) ** 2)) / len(pred))
    reg = lam * l21_norm(_output_weight(phi))
    return data_fit, reg


def loss(phi: Network, params, targets, lam) -> float:
    """sqrt(mean_i ||phi(mu_i) - target_i||^2) + lam * ||W_out||_{2,1}."""
    data_fit, reg = loss_terms(phi, params, targets, lam)
    return data_fit + reg


def loss_and_grad(phi: Network, params, targets, lam):
    """Loss terms and gradients (list of per-layer dicts, as Network.backward)."""
    pred, cache = phi.forward(params, return_cache=True)
    resid = pred - targets
    n = len(pred)
    data_fit = math.sqrt(float(np.sum(resid**2)) / n)
    upstream = resid / (n * data_fit) if data_fit > 0 else np.zeros_like(resid)
    grads, _ = phi.backward(params, upstream, cache=cache)
    W = _output_weight(phi)
    norms = np.sqrt(np.sum(W**2, axis=0))
    reg = lam * float(np.sum(norms))
    if lam:
        safe = np.where(norms > 0, norms, 1.0)
        grads[len(phi.layers) - 1]["W"] = grads[len(phi.layers) - 1]["W"] + lam * np.where(norms > 0, W / safe, 0.0)
    return data_fit, reg, grads


# ---------------------------------------------------------------------------
# Training
# ---------------------------------------------------------------------------


@dataclass
class TrainConfig:
    """Optimizer settings for the regularized regression.

    ``lam=None`` selects N_tilde^(-1/2) with N_tilde from the sample-size
    formula (c0 = 1, failure probability ``fail_prob``).
    """

    lam: float | None = None
    optimizer: str = "adam"
    lr: float = 3e-3
    lr_min_ratio: float = 0.01
    epochs: int = 3000
    batch_size: int | None = None
    seed: int = 0
    eta_star_normalization: bool = False
    eta_star: float | None = None
    fail_prob: float = 0.1

    def __post_init__(self):
        if self.lam is not None and self.lam < 0:
            raise ValueError("lam must be nonnegative")
        if self.epochs < 1:
            raise ValueError("epochs must be >= 1")
        if self.optimizer not in ("adam", "sgd"):
            raise ValueError(f"unknown optimizer {self.optimizer!r}")

    def resolve_lambda(self, N, p):
        if self.lam is not None:
            return float(self.lam)
        return effective_sample_size(N, p, self.fail_prob) ** -0.5

    def to_dict(self):
        return asdict(self)


def default_hidden(p, m):
    width = max(32, 4 * p * latent_dim(m))
    return (width, width)


class _Adam:
    def __init__(self, shapes, lr, beta1=0.9, beta2=0.999, eps=1e-8):
        self.lr, self.beta1, self.beta2, self.eps = lr, beta1, beta2, eps
        self.m = [np.zeros(s) for s in shapes]
        self.v = [np.zeros(s) for s in shapes]
        self.t = 0

    def step(self, arrays, grads, lr):
        self.t += 1
        b1, b2 = self.beta1, self.beta2
        c1 = 1 - b1**self.t
        c2 = 1 - b2**self.t
        for a, g, m, v in zip(arrays, grads, self.m, self.v):
            m *= b1
            m += (1 - b1) * g
            v *= b2
            v += (1 - b2) * g * g
            a -= lr * (m / c1) / (np.sqrt(v / c2) + self.eps)


class _SGD:
    def __init__(self, shapes, lr, momentum=0.9):
        self.momentum = momentum
        self.buf = [np.zeros(s) for s in shapes]

    def step(self, arrays, grads, lr):
        for a, g, b in zip(arrays, grads, self.buf):
            b *= self.momentum
            b += g
            a -= lr * b


def _flat_grads(phi, grads):
    return [grads[i][name] for i, name, _ in phi.parameters()]


def fit_network(phi: Network, X, Y, config: TrainConfig, lam: float, stop=None):
    """First-order minimization of ``loss`` starting from ``phi`` (in place
    on a copy).  Returns the best-loss iterate and the per-epoch log.

    ``stop(net)`` may return True to end training early.
    """
    X = np.asarray(X, dtype=float)
    Y = np.asarray(Y, dtype=float)
    net = phi.copy()
    arrays = [arr for _, _, arr in net.parameters()]
    opt_cls = _Adam if config.optimizer == "adam" else _SGD
    opt = opt_cls([a.shape for a in arrays], config.lr)
    rng = make_rng(config.seed)
    n = len(X)
    batch = n if not config.batch_size else min(config.batch_size, n)
    best = (math.inf, net.copy())
    rows = []
    for epoch in range(config.epochs):
        frac = epoch / max(config.epochs - 1, 1)
        lr = config.lr * (
            config.lr_min_ratio + (1 - config.lr_min_ratio) * 0.5 * (1 + math.cos(math.pi * frac))
        )
        if batch == n:
            data_fit, reg, grads = loss_and_grad(net, X, Y, lam)
            total = data_fit + reg
        else:
            data_fit, reg = loss_terms(net, X, Y, lam)
            total = data_fit + reg
        if not math.isfinite(total):
            raise Divergence(f"loss became non-finite at epoch {epoch}")
        rows.append((epoch, data_fit, reg, total))
        if total < best[0]:
            best = (total, net.copy())
        if stop is not None and stop(net):
            break
        if batch == n:
            opt.step(arrays, _flat_grads(net, grads), lr)
        else:
            order = rng.permutation(n)
            for start in range(0, n, batch):
                idx = order[start : start + batch]
                _, _, grads = loss_and_grad(net, X[idx], Y[idx], lam)
                opt.step(arrays, _flat_grads(net, grads), lr)
    data_fit, reg = loss_terms(net, X, Y, lam)
    total = data_fit + reg
    if not math.isfinite(total):
        raise Divergence("loss became non-finite after the last epoch")
    rows.append((len(rows), data_fit, reg, total))
    if total < best[0]:
        best = (total, net.copy())
    return best[1], rows


def init_reduced(p, m, hidden=None, seed=0) -> Network:
    hidden = default_hidden(p, m) if hidden is None else tuple(hidden)
    return mlp([p, *hidden, latent_dim(m)], rng=make_rng(seed))


def eta_star_from_latents(Y) -> float:
    """(4 G_max)^-1 with G_max estimated as max |z| / 2, since |T u| <= 2 |u|."""
    g_max = float(np.max(np.linalg.norm(np.asarray(Y, dtype=float), axis=1))) / 2.0
    return 1.0 / (4.0 * max(g_max, 1e-300))


def train_reduced(dataset: Dataset, arch=None, config: TrainConfig | None = None):
    """Fit the reduced network phi: R^p -> R^(2m+1) to the dataset latents.

    ``arch`` is an initial Network or a tuple of hidden widths (default: two
    hidden layers of width max(32, 4 p (2m+1))).  Returns ``(phi, log_rows)``.
    """
    config = config or TrainConfig()
    p = dataset.params.shape[1]
    m = (dataset.latents.shape[1] - 1) // 2
    phi0 = arch if isinstance(arch, Network) else init_reduced(p, m, arch, config.seed)
    lam = config.resolve_lambda(len(dataset), p)
    targets = dataset.latents
    eta = 1.0
    if config.eta_star_normalization:
        eta = config.eta_star if config.eta_star is not None else eta_star_from_latents(targets)
        targets = eta * targets
    phi, rows = fit_network(phi0, dataset.params, targets, config, lam)
    if eta != 1.0:
        phi = phi.scaled_output(1.0 / eta)
    return phi, rows


def train_encoder(dataset: Dataset, arch=None, delta=math.inf, config: TrainConfig | None = None):
    """Regress a ReLU network R^(N_h) -> R^(2m+1) on (snapshot, latent) pairs.

    Training stops as soon as the largest per-sample l2 error is <= delta.
    Returns ``(net, info)`` with ``info = {"converged", "max_error"}``.
    """
    config = config or TrainConfig(lam=0.0)
    if dataset.meta.get("encoder", "quadrature") != "quadrature":
        raise ValueError("encoder distillation needs quadrature latents as targets")
    X, Y = dataset.snapshots, dataset.latents
    n_in, n_out = X.shape[1], Y.shape[1]
    if isinstance(arch, Network):
        net0 = arch
    else:
        hidden = () if arch is None else tuple(arch)
        net0 = mlp([n_in, *hidden, n_out], rng=make_rng(config.seed))

    def max_error(net):
        return float(np.max(np.linalg.norm(net(X) - Y, axis=1)))

    if math.isinf(delta):
        return net0.copy(), {"converged": True, "max_error": max_error(net0)}
    lam = 0.0 if config.lam is None else config.lam
    hit = []

    def stop(n):
        if max_error(n) <= delta:
            hit.append(n.copy())
            return True
        return False

    net, _ = fit_network(net0, X, Y, config, lam, stop=stop)
    if hit:
        net = hit[0]
    err = max_error(net)
    return net, {"converged": err <= delta, "max_error": err}


def write_log(rows, path):
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(LOG_HEADER)
        for epoch, data_fit, reg, total in rows:
            w.writerow([epoch, repr(float(data_fit)), repr(float(reg)), repr(float(total))])


# ---------------------------------------------------------------------------
# Evaluation
# ---------------------------------------------------------------------------


def exact_latent_map(problem, grid, s, m, jobs=1):
    """mu -> encoded FOM snapshot; the oracle stand-in for a trained phi."""

    def phi(mus):
        return encode_snapshots(solve_many(problem, mus, grid, jobs=jobs), grid, s, m)

    return phi


def evaluate_rom(phi, decoder, problem, grid, s, n_test, seed, jobs=1) -> dict:
    """Monte Carlo estimate of E = sqrt(E_mu[ sup_j |u_mu(x_j) - decoder(phi(mu))_j|^2 ]).

    Returns E, its delta-method standard error, and the per-sample sups.
    """
    mus = sample_params(problem.p, n_test, seed)
    truth = solve_many(problem, mus, grid, jobs=jobs)
    pred = np.asarray(decoder(np.asarray(phi(mus))), dtype=float)
    sups = np.max(np.abs(truth - pred), axis=1)
    sq = sups**2
    E = math.sqrt(float(np.mean(sq)))
    se_sq = float(np.std(sq, ddof=1) / math.sqrt(n_test)) if n_test > 1 else math.inf
    se = se_sq / (2 * E) if E > 0 else 0.0
    return {"E": E, "se": se, "se_sq": se_sq, "sups": sups, "n_test": int(n_test), "seed": int(seed)}


def bound_rhs(m, N_tilde, gamma, s, g_norm, c4=1.0, p=1) -> float:
    """c4 (sqrt(m) exp(-gamma N_tilde^(1/(2p)) / sqrt 2) + sqrt(2 m^(1-2s)/(2s-1))) g."""
    sampling = math.sqrt(m) * math.exp(-gamma * N_tilde ** (1.0 / (2 * p)) / math.sqrt(2.0))
    approx = math.sqrt(2.0 * m ** (1 - 2 * s) / (2 * s - 1))
    return c4 * (sampling + approx) * g_norm
