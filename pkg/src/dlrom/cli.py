"""Command-line harness: ``dlrom {verify,make-data,train,eval,sweep,bounds}``.

Configuration is one flat JSON object; see ``RunConfig`` for keys.  Exit
codes: 0 success, 1 check or metric failure, 2 usage or input error.
"""

from __future__ import annotations

import argparse
import csv
import hashlib
import json
import logging
import math
import sys
from dataclasses import asdict, dataclass, field, fields
from importlib import resources
from pathlib import Path

import numpy as np

from .constructor import CompactSampleSet, build_decoder_cnn, compute_budget
from .exceptions import DLROMError
from .fourier_lift import reconstruction_bound, synthesize_dense
from .neural import Network
from .pde_fom import AffineDiffusionProblem, Grid, linf_solution_bound
from .training import (
    Dataset,
    TrainConfig,
    bound_rhs,
    evaluate_rom,
    exact_latent_map,
    make_dataset,
    train_reduced,
    write_log,
)

log = logging.getLogger("dlrom")

SWEEP_SCHEMA_VERSION = 1
SWEEP_COLUMNS = ("N", "m", "E", "E_se", "E_oracle", "bound_rhs", "N_tilde", "Delta", "seed", "config_hash")

EXIT_OK, EXIT_FAIL, EXIT_USAGE = 0, 1, 2


class UsageError(Exception):
    pass


@dataclass
class RunConfig:
    """Flat experiment configuration (JSON keys = field names)."""

    problem: dict
    k: int = 7
    s: int = 1
    m: int = 8
    N: int = 200
    N_list: list = field(default_factory=lambda: [50, 100, 200, 400, 800])
    m_list: list | None = None
    n_test: int = 256
    seed: int = 0
    test_seed: int | None = None
    lam: float | None = None
    optimizer: str = "adam"
    lr: float = 3e-3
    lr_min_ratio: float = 0.01
    epochs: int = 3000
    batch_size: int | None = None
    hidden: list | None = None
    eta_star_normalization: bool = False
    decoder_inflation: float = 0.5
    c0: float = 1.0
    c1: float = 1.0
    c2: float = 1.0
    c3: float = 1.0
    c4: float = 1.0
    gamma: float | None = None
    fail_prob: float = 0.1
    g_norm: float | None = None
    base_dir: str | None = None

    @classmethod
    def load(cls, path) -> "RunConfig":
        path = Path(path)
        if not path.is_file():
            raise UsageError(f"config file {path} not found")
        try:
            raw = json.loads(path.read_text())
        except json.JSONDecodeError as exc:
            raise UsageError(f"config {path}: invalid JSON ({exc})") from exc
        known = {f.name for f in fields(cls)}
        unknown = set(raw) - known
        if unknown:
            raise UsageError(f"config {path}: unknown keys {sorted(unknown)}")
        if "problem" not in raw:
            raise UsageError(f"config {path}: missing 'problem'")
        raw.setdefault("base_dir", str(path.parent.resolve()))
        cfg = cls(**raw)
        cfg.validate()
        return cfg

    def validate(self):
        if self.k < 3:
            raise UsageError("config: k must be >= 3")
        if self.m < 1 or any(m < 1 for m in self.m_list or []):
            raise UsageError("config: m must be >= 1")
        if self.n_test < 2:
            raise UsageError("config: n_test must be >= 2")
        try:
            self.build_problem()
        except (OSError, ValueError, KeyError, TypeError) as exc:
            raise UsageError(f"config: bad problem definition ({exc})") from exc

    def build_problem(self) -> AffineDiffusionProblem:
        return AffineDiffusionProblem.from_dict(self.problem, base_dir=self.base_dir)

    def train_config(self) -> TrainConfig:
        return TrainConfig(
            lam=self.lam,
            optimizer=self.optimizer,
            lr=self.lr,
            lr_min_ratio=self.lr_min_ratio,
            epochs=self.epochs,
            batch_size=self.batch_size,
            seed=self.seed,
            eta_star_normalization=self.eta_star_normalization,
            fail_prob=self.fail_prob,
        )

    @property
    def eval_seed(self):
        # disjoint from training draws, which use ``seed``
        return self.test_seed if self.test_seed is not None else self.seed + 1_000_003

    def to_dict(self):
        d = asdict(self)
        d.pop("base_dir")
        return d

    def hash(self) -> str:
        blob = json.dumps(self.to_dict(), sort_keys=True, separators=(",", ":"))
        return hashlib.sha256(blob.encode()).hexdigest()[:16]

    def resolved_g_norm(self, problem):
        if self.g_norm is not None:
            return float(self.g_norm)
        return linf_solution_bound(problem, self.k)

    def resolved_gamma(self, problem):
        return float(self.gamma) if self.gamma is not None else float(problem.gamma)


def _stamp(cfg: RunConfig, **extra):
    return {"config_hash": cfg.hash(), "seed": cfg.seed, **extra}


def _write_json(path, obj):
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(json.dumps(obj, indent=1, sort_keys=True, default=_json_default) + "\n")
    return path


def _json_default(o):
    if isinstance(o, np.ndarray):
        return o.tolist()
    if isinstance(o, np.generic):
        return o.item()
    raise TypeError(f"cannot serialize {type(o).__name__}")


def sweep_schema() -> dict:
    text = resources.files("dlrom").joinpath("schemas/sweep.schema.json").read_text()
    return json.loads(text)


# ---------------------------------------------------------------------------
# Stages
# ---------------------------------------------------------------------------


def cmd_make_data(cfg: RunConfig, out: Path, jobs=1) -> Path:
    problem = cfg.build_problem()
    ds = make_dataset(problem, Grid(cfg.k), cfg.s, cfg.m, cfg.N, cfg.seed, jobs=jobs)
    ds.meta.update(_stamp(cfg))
    ds.save(out)
    log.info("make-data: wrote %d samples to %s", len(ds), out)
    return out


def _fit_decoder(cfg, latents):
    C = CompactSampleSet.from_points(latents, cfg.decoder_inflation)
    return build_decoder_cnn(cfg.m, Grid(cfg.k), C)


def cmd_train(cfg: RunConfig, data_dir: Path, out: Path) -> Path:
    ds = Dataset.load(data_dir)
    for key in ("k", "s", "m"):
        if ds.meta.get(key) != getattr(cfg, key):
            raise UsageError(f"train: dataset {key}={ds.meta.get(key)} differs from config {key}={getattr(cfg, key)}")
    tc = cfg.train_config()
    phi, rows = train_reduced(ds, None if cfg.hidden is None else tuple(cfg.hidden), tc)
    decoder = _fit_decoder(cfg, np.vstack([ds.latents, phi(ds.params)]))
    out.mkdir(parents=True, exist_ok=True)
    phi.to_json(out / "phi.json")
    decoder.to_json(out / "decoder.json")
    write_log(rows, out / "train_log.csv")
    budget = compute_budget(ds.params.shape[1], cfg.resolved_gamma(cfg.build_problem()), cfg.m, cfg.k, N=len(ds), fail_prob=cfg.fail_prob, c0=cfg.c0, c1=cfg.c1, c2=cfg.c2, c3=cfg.c3, c4=cfg.c4)
    _write_json(
        out / "model.json",
        _stamp(
            cfg,
            N=len(ds),
            lam=tc.resolve_lambda(len(ds), ds.params.shape[1]),
            lam_note="default N_tilde^-1/2 is a placeholder choice" if cfg.lam is None else "configured",
            final=dict(zip(("epoch", "data_fit", "reg", "total"), rows[-1])),
            best_total=min(r[3] for r in rows),
            phi_accounting=phi.accounting(),
            decoder_accounting=decoder.accounting(),
            budget=budget.to_dict(),
            dataset=str(data_dir),
        ),
    )
    log.info("train: best loss %.4e, model in %s", min(r[3] for r in rows), out)
    return out


def _oracle_metrics(cfg, problem, grid, jobs):
    phi = exact_latent_map(problem, grid, cfg.s, cfg.m, jobs=jobs)
    return evaluate_rom(phi, lambda z: synthesize_dense(z, grid), problem, grid, cfg.s, cfg.n_test, cfg.eval_seed, jobs)


def cmd_eval(cfg: RunConfig, model_dir: Path | None, out: Path, jobs=1) -> dict:
    """Metrics JSON for a trained model, or for the exact-latent oracle when
    ``model_dir`` is None."""
    problem = cfg.build_problem()
    grid = Grid(cfg.k)
    g_norm = cfg.resolved_g_norm(problem)
    if model_dir is None:
        res = _oracle_metrics(cfg, problem, grid, jobs)
        kind = "oracle"
    else:
        phi = Network.from_json(model_dir / "phi.json")
        decoder = Network.from_json(model_dir / "decoder.json")
        res = evaluate_rom(phi, decoder, problem, grid, cfg.s, cfg.n_test, cfg.eval_seed, jobs)
        kind = "trained"
    step2 = reconstruction_bound(cfg.m, cfg.s, g_norm)
    metrics = _stamp(
        cfg,
        model=kind,
        E=res["E"],
        E_se=res["se"],
        n_test=res["n_test"],
        eval_seed=res["seed"],
        sups=res["sups"],
        g_norm=g_norm,
        reconstruction_bound=step2,
        within_reconstruction_bound=bool(res["E"] <= step2),
    )
    _write_json(out / "metrics.json", metrics)
    return metrics


def cmd_sweep(cfg: RunConfig, out: Path, jobs=1) -> list:
    problem = cfg.build_problem()
    grid = Grid(cfg.k)
    g_norm = cfg.resolved_g_norm(problem)
    gamma = cfg.resolved_gamma(problem)
    tc = cfg.train_config()
    rows = []
    Ns = sorted(int(n) for n in cfg.N_list)
    for m in cfg.m_list or [cfg.m]:
        mcfg = RunConfig(**{**asdict(cfg), "m": m})
        oracle = _oracle_metrics(mcfg, problem, grid, jobs)["E"]
        full = make_dataset(problem, grid, cfg.s, m, Ns[-1], cfg.seed, jobs=jobs)
        for N in Ns:
            ds = full.subset(N)
            phi, _ = train_reduced(ds, None if cfg.hidden is None else tuple(cfg.hidden), tc)
            decoder = _fit_decoder(mcfg, np.vstack([ds.latents, phi(ds.params)]))
            res = evaluate_rom(phi, decoder, problem, grid, cfg.s, cfg.n_test, cfg.eval_seed, jobs)
            budget = compute_budget(problem.p, gamma, m, cfg.k, N=N, fail_prob=cfg.fail_prob, c0=cfg.c0)
            rows.append(
                {
                    "N": N,
                    "m": m,
                    "E": res["E"],
                    "E_se": res["se"],
                    "E_oracle": oracle,
                    "bound_rhs": bound_rhs(m, budget.N_tilde, gamma, cfg.s, g_norm, cfg.c4, problem.p),
                    "N_tilde": budget.N_tilde,
                    "Delta": budget.Delta,
                    "seed": cfg.seed,
                    "config_hash": cfg.hash(),
                }
            )
            log.info("sweep: m=%d N=%d E=%.4e", m, N, res["E"])
    out.mkdir(parents=True, exist_ok=True)
    with open(out / "sweep.csv", "w", newline="") as fh:
        w = csv.DictWriter(fh, fieldnames=SWEEP_COLUMNS)
        w.writeheader()
        for r in rows:
            w.writerow({k: (repr(float(v)) if isinstance(v, float) else v) for k, v in r.items()})
    return rows


def sweep_trend_ok(rows, slack=3.0):
    """E non-increasing in N (per m) up to ``slack`` standard errors."""
    ok = True
    for m in {r["m"] for r in rows}:
        seq = sorted((r for r in rows if r["m"] == m), key=lambda r: r["N"])
        for a, b in zip(seq, seq[1:]):
            ok &= b["E"] <= a["E"] + slack * math.hypot(a["E_se"], b["E_se"])
    return bool(ok)


def cmd_bounds(cfg: RunConfig, out: Path) -> dict:
    problem = cfg.build_problem()
    gamma = cfg.resolved_gamma(problem)
    budget = compute_budget(
        problem.p, gamma, cfg.m, cfg.k, N=cfg.N, fail_prob=cfg.fail_prob,
        c0=cfg.c0, c1=cfg.c1, c2=cfg.c2, c3=cfg.c3, c4=cfg.c4,
    )
    g_norm = cfg.resolved_g_norm(problem)
    result = _stamp(
        cfg,
        budget=budget.to_dict(),
        g_norm=g_norm,
        bound_rhs=bound_rhs(cfg.m, budget.N_tilde, gamma, cfg.s, g_norm, cfg.c4, problem.p),
    )
    _write_json(out / "budget.json", result)
    return result


def cmd_verify(out: Path | None, quick=False, suites=None, seed=0) -> int:
    from .verification import run_suites, summary, write_junit

    results = run_suites(suites, seed=seed, quick=quick)
    text = summary(results)
    print(text)
    if out is not None:
        out.mkdir(parents=True, exist_ok=True)
        write_junit(results, out / "verify.xml")
        (out / "verify_summary.txt").write_text(text + "\n")
    return EXIT_OK if all(r.passed for r in results) else EXIT_FAIL


# ---------------------------------------------------------------------------
# Entry point
# ---------------------------------------------------------------------------


def build_parser():
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", type=Path, help="JSON run configuration")
    common.add_argument("--out", type=Path, default=Path("."), help="output directory")
    common.add_argument("--jobs", type=int, default=1, help="worker cap for FOM solves")
    common.add_argument("--seed", type=int, help="override the configured seed")
    common.add_argument("-v", "--verbose", action="store_true")

    parser = argparse.ArgumentParser(prog="dlrom", description=__doc__.splitlines()[0])
    sub = parser.add_subparsers(dest="command", required=True)
    v = sub.add_parser("verify", parents=[common], help="run the property suites")
    v.add_argument("--quick", action="store_true", help="smaller randomized samples")
    v.add_argument("--suite", action="append", help="restrict to a suite (repeatable)")
    sub.add_parser("make-data", parents=[common], help="sample parameters and write a dataset")
    t = sub.add_parser("train", parents=[common], help="train the reduced network")
    t.add_argument("--data", type=Path, required=True, help="dataset directory")
    e = sub.add_parser("eval", parents=[common], help="Monte Carlo error of a model")
    grp = e.add_mutually_exclusive_group(required=True)
    grp.add_argument("--model", type=Path, help="model directory from `train`")
    grp.add_argument("--oracle", action="store_true", help="exact latents with the dense decoder")
    s = sub.add_parser("sweep", parents=[common], help="train/evaluate over N (and m)")
    s.add_argument("--check", action="store_true", help="exit 1 if E is not non-increasing in N")
    sub.add_parser("bounds", parents=[common], help="evaluate the sample-size and complexity formulas")
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(message)s")
    if args.jobs < 1:
        parser.error("--jobs must be >= 1")
    try:
        if args.command == "verify":
            from .verification import SUITES

            unknown = set(args.suite or []) - set(SUITES)
            if unknown:
                raise UsageError(f"verify: unknown suites {sorted(unknown)}; choose from {sorted(SUITES)}")
            return cmd_verify(args.out, args.quick, args.suite, args.seed or 0)
        if args.config is None:
            raise UsageError(f"{args.command}: --config is required")
        cfg = RunConfig.load(args.config)
        if args.seed is not None:
            cfg.seed = args.seed
        if args.command == "make-data":
            cmd_make_data(cfg, args.out, args.jobs)
        elif args.command == "train":
            if not (args.data / "manifest.json").is_file():
                raise UsageError(f"train: no dataset at {args.data}")
            cmd_train(cfg, args.data, args.out)
        elif args.command == "eval":
            if args.model is not None and not (args.model / "phi.json").is_file():
                raise UsageError(f"eval: no model at {args.model}")
            metrics = cmd_eval(cfg, None if args.oracle else args.model, args.out, args.jobs)
            print(f"E = {metrics['E']:.6e} +- {metrics['E_se']:.1e} ({metrics['model']})")
        elif args.command == "sweep":
            rows = cmd_sweep(cfg, args.out, args.jobs)
            for r in rows:
                print(f"m={r['m']} N={r['N']} E={r['E']:.4e} (oracle {r['E_oracle']:.4e}) bound={r['bound_rhs']:.4e}")
            if args.check and not sweep_trend_ok(rows):
                print("sweep: E increases with N beyond Monte Carlo noise", file=sys.stderr)
                return EXIT_FAIL
        elif args.command == "bounds":
            res = cmd_bounds(cfg, args.out)
            b = res["budget"]
            print(f"N_tilde = {b['N_tilde']!r}  Delta = {b['Delta']!r}  bound_rhs = {res['bound_rhs']!r}")
    except UsageError as exc:
        print(f"dlrom: error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except (DLROMError, OSError, ValueError) as exc:
        print(f"dlrom {args.command}: {type(exc).__name__}: {exc}", file=sys.stderr)
        return EXIT_FAIL
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
