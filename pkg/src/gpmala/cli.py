"""Configuration-driven experiment runner.

``run`` executes repeated sequential-calibration experiments from a flat
key=value config file and emits machine-readable CSV/JSON artifacts;
``compare`` tabulates histories against each other; ``report`` renders
figures from the emitted files.  All floating-point output is serialized
with 17 significant digits so reruns are byte-comparable.
"""

from __future__ import annotations

import argparse
import json
import os
import sys
from dataclasses import dataclass, fields
from pathlib import Path

import numpy as np

from . import benchmark
from .ensemble import CalibrationSettings, RunBudget, run_calibration
from .kde import fit_kde, sample_mixture

WORKERS_ENV = "GPMALA_WORKERS"

STRATEGIES = ("var-based", "space-filling", "reference-only")


@dataclass
class ExperimentConfig:
    """Flat experiment description (key=value file plus --set overrides)."""

    problem: str = "analytic2d"
    strategy: str = "var-based"
    repetitions: int = 5
    seed: int = 0
    n0: int = 20
    n_max: int = 100
    r: int = 100
    m: int = 100
    ktilde: int = 100
    batch: int = 1
    tau: float | None = None          # None means auto (adaptive burn-in)
    k_steps: int | None = None        # None derives from ktilde/thinning/burn_in
    burn_in: float = 0.2
    thinning: int = 3
    gamma: float = 0.01               # admission threshold, times prior std
    anchor_cap: int = 500
    workers: int | None = None
    out: str = "."
    ref_ktilde: int = 10_000
    w1_subsample: int = 1000
    min_separation: float = 0.0
    write_samples: bool = True

    def validate(self):
        if self.strategy not in STRATEGIES:
            raise ValueError(f"strategy must be one of {STRATEGIES}")
        for name in ("repetitions", "n0", "n_max", "r", "m", "ktilde", "batch",
                     "thinning", "anchor_cap", "ref_ktilde", "w1_subsample"):
            if getattr(self, name) < 1:
                raise ValueError(f"{name} must be positive")
        if not 0.0 <= self.burn_in < 1.0:
            raise ValueError("burn_in must be in [0, 1)")
        if self.problem != "analytic2d":
            raise ValueError(f"unknown problem {self.problem!r}")


_BOOL = {"true": True, "false": False, "1": True, "0": False,
         "yes": True, "no": False}


def _coerce(name: str, raw: str):
    raw = raw.strip()
    kinds = {f.name: f.type for f in fields(ExperimentConfig)}
    if name not in kinds:
        raise ValueError(f"unknown config key {name!r}")
    if name in ("tau", "k_steps", "workers"):
        return None if raw.lower() in ("auto", "none", "") else (
            float(raw) if name == "tau" else int(raw))
    if name in ("problem", "strategy", "out"):
        return raw
    if name == "write_samples":
        return _BOOL[raw.lower()]
    if name in ("burn_in", "gamma", "min_separation"):
        return float(raw)
    return int(raw)


def parse_config(path: str | None, overrides=()) -> ExperimentConfig:
    cfg = ExperimentConfig()
    if path is not None:
        for lineno, line in enumerate(Path(path).read_text().splitlines(), 1):
            line = line.strip()
            if not line or line.startswith("#"):
                continue
            if "=" not in line:
                raise ValueError(f"{path}:{lineno}: expected key=value")
            key, _, val = line.partition("=")
            setattr(cfg, key.strip(), _coerce(key.strip(), val))
    for item in overrides:
        if "=" not in item:
            raise ValueError(f"--set needs key=value, got {item!r}")
        key, _, val = item.partition("=")
        setattr(cfg, key.strip(), _coerce(key.strip(), val))
    cfg.validate()
    return cfg


# ---------------------------------------------------------------------------
# serialization helpers (17 significant digits everywhere)
# ---------------------------------------------------------------------------


def fmt(v) -> str:
    if isinstance(v, (bool, np.bool_)):
        return "true" if v else "false"
    if isinstance(v, (int, np.integer)):
        return str(int(v))
    return f"{float(v):.17g}"


def dumps_json(obj, indent=0) -> str:
    """Canonical JSON with 17-significant-digit floats."""
    pad = " " * indent
    if isinstance(obj, dict):
        items = ",\n".join(
            f'{pad}  "{k}": {dumps_json(v, indent + 2).lstrip()}'
            for k, v in obj.items())
        return f"{pad}{{\n{items}\n{pad}}}"
    if isinstance(obj, (list, tuple)):
        items = ",\n".join(f"{pad}  {dumps_json(v, indent + 2).lstrip()}" for v in obj)
        return f"{pad}[\n{items}\n{pad}]"
    if isinstance(obj, str):
        return pad + json.dumps(obj)
    if obj is None:
        return pad + "null"
    if isinstance(obj, (bool, np.bool_)):
        return pad + ("true" if obj else "false")
    if isinstance(obj, (int, np.integer)):
        return pad + str(int(obj))
    v = float(obj)
    return pad + (f"{v:.17g}" if np.isfinite(v) else "null")


def _write_csv(path: Path, header: list[str], rows) -> None:
    with open(path, "w", newline="") as fh:
        fh.write(",".join(header) + "\n")
        for row in rows:
            fh.write(",".join(fmt(v) for v in row) + "\n")


# ---------------------------------------------------------------------------
# run
# ---------------------------------------------------------------------------


def _make_problem(cfg: ExperimentConfig):
    return benchmark.AnalyticProblem(replications=cfg.r, seed=cfg.seed)


def _reference_sets(cfg: ExperimentConfig):
    ref_a = benchmark.reference_posterior_samples(cfg.ref_ktilde, seed=(cfg.seed, 11))
    ref_b = benchmark.reference_posterior_samples(cfg.ref_ktilde, seed=(cfg.seed, 12))
    return ref_a, ref_b


def epsilon_reference(ref_a, ref_b, n: int, seed=0) -> float:
    """Reference reconstruction error: W1 between KDE-resampled reference sets."""
    ka = fit_kde(ref_a)
    kb = fit_kde(ref_b)
    rng = np.random.default_rng(np.random.SeedSequence([seed, 13]))
    da = sample_mixture(ka, n, rng)
    db = sample_mixture(kb, n, rng)
    return benchmark.wasserstein1(da, db)


def _workers(cfg: ExperimentConfig) -> int:
    if cfg.workers is not None:
        return max(1, cfg.workers)
    env = os.environ.get(WORKERS_ENV)
    return max(1, int(env)) if env else 1


HISTORY_HEADER = ["repetition", "N", "strategy", "W1", "integrated_variance",
                  "acceptance_rate", "anchors_total", "wall_ms"]


def run(cfg: ExperimentConfig) -> int:
    """Execute the configured experiment; returns a process exit status."""
    out = Path(cfg.out)
    out.mkdir(parents=True, exist_ok=True)
    samples_dir = out / "samples"
    samples_dir.mkdir(exist_ok=True)

    problem = _make_problem(cfg)
    ref_a, ref_b = _reference_sets(cfg)
    eps_ref = epsilon_reference(ref_a, ref_b, cfg.w1_subsample, seed=cfg.seed)

    if cfg.strategy == "reference-only":
        _write_csv(samples_dir / "reference_a.csv",
                   [f"x{i+1}" for i in range(ref_a.shape[1])], ref_a)
        _write_csv(samples_dir / "reference_b.csv",
                   [f"x{i+1}" for i in range(ref_b.shape[1])], ref_b)
        summary = {"strategy": cfg.strategy, "epsilon_ref": eps_ref,
                   "repetitions": 0, "per_n": []}
        (out / "summary.json").write_text(dumps_json(summary) + "\n")
        return 0

    budget = RunBudget(n0=cfg.n0, n_max=cfg.n_max, r=cfg.r, m=cfg.m,
                       ktilde=cfg.ktilde, batch=cfg.batch)
    settings = CalibrationSettings(
        tau0=cfg.tau if cfg.tau is not None else 0.1,
        burn_in=cfg.burn_in, thinning=cfg.thinning, gamma_factor=cfg.gamma,
        anchor_cap=cfg.anchor_cap, workers=_workers(cfg),
        w1_subsample=cfg.w1_subsample, min_separation=cfg.min_separation,
        keep_samples=True)

    history_rows = []
    design_rows = []
    failures = []
    for rep in range(1, cfg.repetitions + 1):
        rep_seed = int(np.random.SeedSequence([cfg.seed, 100 + rep]).generate_state(1)[0])
        round_counter = {"j": 0}

        def on_round(rec, rep=rep, counter=round_counter):
            j = counter["j"]
            history_rows.append([rep, rec.n, cfg.strategy, rec.w1,
                                 rec.integrated_variance, rec.acceptance_rate,
                                 rec.anchors_total, rec.wall_ms])
            for p, v, nv in zip(rec.new_points, rec.new_values, rec.new_noise_vars):
                design_rows.append([rep, rec.n, *p, v, nv])
            if cfg.write_samples and rec.samples is not None:
                _write_csv(samples_dir / f"rep{rep}_round{j}.csv",
                           [f"x{i+1}" for i in range(rec.samples.shape[1])],
                           rec.samples)
            rec.samples = None
            counter["j"] = j + 1

        try:
            run_calibration(problem, budget, cfg.strategy, rep_seed,
                            settings=settings, reference=ref_a,
                            on_round=on_round)
        except Exception as exc:  # keep partial artifacts, report, continue
            failures.append((rep, round_counter["j"], exc))
            print(f"ERROR repetition {rep} round {round_counter['j']}: {exc}",
                  file=sys.stderr)

    d = problem.dim
    _write_csv(out / "history.csv", HISTORY_HEADER, history_rows)
    _write_csv(out / "design.csv",
               ["repetition", "N", *[f"x{i+1}" for i in range(d)], "y", "noise_var"],
               design_rows)

    summary = {"strategy": cfg.strategy, "epsilon_ref": eps_ref,
               "repetitions": cfg.repetitions,
               "per_n": _summarize(history_rows)}
    (out / "summary.json").write_text(dumps_json(summary) + "\n")
    return 1 if failures else 0


def _summarize(history_rows) -> list[dict]:
    by_n: dict[int, list] = {}
    for row in history_rows:
        by_n.setdefault(int(row[1]), []).append((float(row[3]), float(row[4])))
    out = []
    for n in sorted(by_n):
        w1 = np.array([t[0] for t in by_n[n]])
        iv = np.array([t[1] for t in by_n[n]])
        q = lambda a, p: float(np.percentile(a, p))
        out.append({"N": n,
                    "w1_median": q(w1, 50), "w1_q1": q(w1, 25), "w1_q3": q(w1, 75),
                    "iv_median": q(iv, 50), "iv_q1": q(iv, 25), "iv_q3": q(iv, 75)})
    return out


# ---------------------------------------------------------------------------
# compare
# ---------------------------------------------------------------------------


def read_history(path: str):
    """Parse a history.csv; raises with file and line on malformed input."""
    rows = []
    with open(path) as fh:
        header = fh.readline().rstrip("\n").split(",")
        if header != HISTORY_HEADER:
            raise ValueError(f"{path}:1: unexpected header {header}")
        for lineno, line in enumerate(fh, 2):
            line = line.rstrip("\n")
            if not line:
                continue
            parts = line.split(",")
            if len(parts) != len(HISTORY_HEADER):
                raise ValueError(f"{path}:{lineno}: expected "
                                 f"{len(HISTORY_HEADER)} fields, got {len(parts)}")
            try:
                rows.append({"repetition": int(parts[0]), "N": int(parts[1]),
                             "strategy": parts[2], "W1": float(parts[3]),
                             "integrated_variance": float(parts[4]),
                             "acceptance_rate": float(parts[5]),
                             "anchors_total": int(parts[6]),
                             "wall_ms": float(parts[7])})
            except ValueError as exc:
                raise ValueError(f"{path}:{lineno}: {exc}") from None
    return rows


def compare(paths) -> str:
    """Per-N medians of W1 and integrated variance per strategy."""
    rows = []
    for p in paths:
        rows.extend(read_history(p))
    strategies = sorted({r["strategy"] for r in rows})
    ns = sorted({r["N"] for r in rows})
    med = {}
    for s in strategies:
        for n in ns:
            w1 = [r["W1"] for r in rows if r["strategy"] == s and r["N"] == n]
            iv = [r["integrated_variance"] for r in rows
                  if r["strategy"] == s and r["N"] == n]
            if w1:
                med[(s, n)] = (float(np.median(w1)), float(np.median(iv)))
    lines = ["N strategy w1_median iv_median"]
    for n in ns:
        for s in strategies:
            if (s, n) in med:
                w1m, ivm = med[(s, n)]
                lines.append(f"{n} {s} {w1m:.6g} {ivm:.6g}")
        if ("var-based", n) in med and ("space-filling", n) in med:
            ratio = med[("var-based", n)][0] / med[("space-filling", n)][0]
            lines.append(f"{n} ratio(var/space) {ratio:.6g}")
    return "\n".join(lines)


# ---------------------------------------------------------------------------
# entry point
# ---------------------------------------------------------------------------


def main(argv=None) -> int:
    parser = argparse.ArgumentParser(prog="gpmala")
    sub = parser.add_subparsers(dest="command", required=True)

    p_run = sub.add_parser("run", help="run a configured experiment")
    p_run.add_argument("--config", default=None)
    p_run.add_argument("--set", action="append", default=[], dest="overrides",
                       metavar="key=value")
    p_run.add_argument("--workers", type=int, default=None)
    p_run.add_argument("--out", default=None)

    p_cmp = sub.add_parser("compare", help="summarize history files")
    p_cmp.add_argument("histories", nargs="+")

    p_rep = sub.add_parser("report", help="render figures from artifacts")
    p_rep.add_argument("histories", nargs="+")
    p_rep.add_argument("--samples", default=None,
                       help="pooled-samples CSV for the density figure")
    p_rep.add_argument("--out", default="report")

    args = parser.parse_args(argv)
    if args.command == "run":
        cfg = parse_config(args.config, args.overrides)
        if args.workers is not None:
            cfg.workers = args.workers
        if args.out is not None:
            cfg.out = args.out
        return run(cfg)
    if args.command == "compare":
        try:
            print(compare(args.histories))
        except ValueError as exc:
            print(f"error: {exc}", file=sys.stderr)
            return 1
        return 0
    if args.command == "report":
        from .report import render_report

        paths = render_report(args.histories, args.samples, args.out)
        for p in paths:
            print(p)
        return 0
    return 2


if __name__ == "__main__":
    raise SystemExit(main())
