"""Sweeps over corruption level, sample size and training time, plus bound checks.

Every number in a report is a deterministic function of the sweep spec and
its base seed: each (N, seed) unit derives its demo, corruption, training and
evaluation seeds from ``SeedSequence([base_seed, k, N, ...])``.
"""
from __future__ import annotations

import csv
import dataclasses
import json
import math
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from scipy import stats

from .demos import CorruptionSpec, collect_demos, corrupt
from .envsim import estimate_return, exact_return, expert_policy, make_env, stationary_visitation
from .errors import InvalidSpecError
from .policy import tv_distance
from .train import ALGORITHMS, TrainConfig, run_algorithm, train_bc, init_policy

SWEEP_ALGORITHMS = ALGORITHMS + ("oracle_bc",)
ROW_FIELDS = ("env", "algorithm", "N", "epsilon", "seed", "return_mean", "return_std",
              "normalized_return", "exact_return", "expert_return", "tv_sq", "final_tau",
              "n_corrupted")
CURVE_FIELDS = ("env", "algorithm", "N", "epsilon", "seed", "epoch", "return_mean",
                "return_std", "normalized_return")
EXPERT_TRIALS = 200


def derive_seed(*parts) -> int:
    return int(np.random.SeedSequence([int(p) for p in parts]).generate_state(1)[0])


def _eps_code(eps: float) -> int:
    return int(round(eps * 1_000_000))


@dataclass
class SweepSpec:
    env: str = "gridworld5"
    expert_softness: float = 0.0
    n_values: list = field(default_factory=lambda: [8000])
    epsilon_values: list = field(default_factory=lambda: [0.0, 0.1, 0.2])
    corruption_mode: str = "uniform"
    algorithms: list = field(default_factory=lambda: ["bc", "rbc"])
    n_eval_trials: int = 20
    n_seeds: int = 20
    train: TrainConfig = field(default_factory=TrainConfig)
    seed: int = 0
    eval_every: int = 5
    name: str = "sweep"

    def __post_init__(self):
        if isinstance(self.train, dict):
            self.train = TrainConfig.from_dict(self.train)
        self.n_values = [int(n) for n in self.n_values]
        self.epsilon_values = [float(e) for e in self.epsilon_values]
        self.algorithms = list(self.algorithms)
        for eps in self.epsilon_values:
            if not 0 <= eps < 0.5:
                raise InvalidSpecError(f"epsilon_values: {eps} outside [0, 0.5)")
        for algo in self.algorithms:
            if algo not in SWEEP_ALGORITHMS:
                raise InvalidSpecError(f"algorithms: unknown algorithm {algo!r}")
        if not self.algorithms or not self.n_values or not self.epsilon_values:
            raise InvalidSpecError("algorithms, n_values and epsilon_values must be non-empty")
        if min(self.n_values) < 1 or self.n_seeds < 1 or self.n_eval_trials < 1:
            raise InvalidSpecError("n_values, n_seeds and n_eval_trials must be positive")
        if self.eval_every < 1:
            raise InvalidSpecError("eval_every: must be >= 1")

    def to_dict(self) -> dict:
        d = {f.name: getattr(self, f.name) for f in dataclasses.fields(self)}
        d["train"] = self.train.to_dict()
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "SweepSpec":
        known = {f.name for f in dataclasses.fields(cls)}
        unknown = sorted(set(d) - known)
        if unknown:
            raise InvalidSpecError(f"{unknown[0]}: unknown sweep field")
        return cls(**d)

    @classmethod
    def from_json(cls, path) -> "SweepSpec":
        try:
            d = json.loads(Path(path).read_text())
        except json.JSONDecodeError as exc:
            raise InvalidSpecError(f"spec: invalid JSON ({exc})") from None
        return cls.from_dict(d)


@dataclass
class EvalReport:
    kind: str
    env: str
    rows: list
    fields: tuple = ROW_FIELDS
    meta: dict = field(default_factory=dict)

    def cells(self) -> dict:
        """Rows grouped by (algorithm, N, epsilon) in report order."""
        out: dict = {}
        for r in self.rows:
            out.setdefault((r["algorithm"], r["N"], r["epsilon"]), []).append(r)
        return out

    def cell_values(self, algorithm: str, n: int, eps: float, key: str = "normalized_return"):
        return np.array([r[key] for r in self.cells()[(algorithm, n, eps)]], dtype=np.float64)

    def aggregates(self) -> list:
        out = []
        for (algo, n, eps), rows in self.cells().items():
            entry = {"algorithm": algo, "N": n, "epsilon": eps, "n_seeds": len(rows)}
            for key in ("normalized_return", "return_mean", "tv_sq", "final_tau", "exact_return"):
                vals = np.array([r.get(key, float("nan")) for r in rows], dtype=np.float64)
                if key not in self.fields or np.all(np.isnan(vals)):
                    continue
                entry[f"{key}_mean"] = float(vals.mean())
                entry[f"{key}_std"] = float(vals.std(ddof=1)) if len(vals) > 1 else 0.0
                entry[f"{key}_se"] = entry[f"{key}_std"] / math.sqrt(len(vals))
            out.append(entry)
        return out

    def to_csv(self, path, rows=None) -> None:
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(self.fields)
            for r in self.rows if rows is None else rows:
                w.writerow([_fmt(r.get(k, "")) for k in self.fields])

    def summary(self) -> dict:
        return {"kind": self.kind, "env": self.env, "meta": self.meta, "cells": self.aggregates()}

    def save(self, out_dir, figures: bool = True) -> list:
        """Write the combined CSV, one CSV per cell, the JSON summary and figures."""
        out = Path(out_dir)
        (out / "cells").mkdir(parents=True, exist_ok=True)
        written = [out / f"{self.env}_{self.kind}.csv"]
        self.to_csv(written[0])
        for (algo, n, eps), rows in self.cells().items():
            p = out / "cells" / cell_filename(self.env, algo, n, eps)
            self.to_csv(p, rows)
            written.append(p)
        p = out / f"{self.env}_{self.kind}_summary.json"
        p.write_text(json.dumps(self.summary(), indent=2, sort_keys=True) + "\n")
        written.append(p)
        if figures:
            from .plotting import plot_report
            written.extend(plot_report(self, out))
        return written


def cell_filename(env: str, algorithm: str, n: int, eps: float) -> str:
    return f"{env}_{algorithm}_N{n}_eps{eps:g}.csv"


def _fmt(v) -> str:
    if isinstance(v, float):
        return repr(v)
    return str(v)


def pooled_se(a, b) -> float:
    """Standard error of mean(a) - mean(b) for independent seed samples."""
    a, b = np.asarray(a, dtype=np.float64), np.asarray(b, dtype=np.float64)
    return math.sqrt(a.var(ddof=1) / len(a) + b.var(ddof=1) / len(b))


# ---------------------------------------------------------------------------
# per-unit work


class _Context:
    """Environment, expert and its reference quantities, built once per process."""

    def __init__(self, spec: SweepSpec):
        self.env = make_env(spec.env)
        self.expert = expert_policy(self.env, spec.expert_softness)
        if self.env.is_tabular:
            self.expert_return = exact_return(self.env, self.expert)
            self.state_weights = stationary_visitation(self.env, self.expert).sum(axis=1)
        else:
            self.expert_return = estimate_return(self.env, self.expert, EXPERT_TRIALS,
                                                 seed=derive_seed(spec.seed, 99))[0]
            self.state_weights = None


def _evaluate(ctx: _Context, spec: SweepSpec, policy, eval_seed: int) -> dict:
    mean, std = estimate_return(ctx.env, policy, spec.n_eval_trials, seed=eval_seed)
    row = {"return_mean": mean, "return_std": std,
           "normalized_return": mean / ctx.expert_return, "expert_return": ctx.expert_return,
           "exact_return": float("nan"), "tv_sq": float("nan")}
    if ctx.env.is_tabular:
        row["exact_return"] = exact_return(ctx.env, policy)
        row["tv_sq"] = tv_distance(policy, ctx.expert, ctx.state_weights)
    return row


def _algo_config(spec: SweepSpec, algo: str, eps: float, train_seed: int) -> TrainConfig:
    cfg = spec.train.replace(seed=train_seed)
    if algo in ("rbc", "mom_min"):
        return cfg.replace(epsilon_declared=eps)
    return cfg.replace(median_window=1)


def _unit_data(ctx, spec, k, n):
    return collect_demos(ctx.env, ctx.expert, n, seed=derive_seed(spec.seed, k, n, 1),
                         env_id=spec.env, softness=spec.expert_softness)


def _corrupted(clean, spec, k, n, eps):
    if eps == 0:
        return clean
    return corrupt(clean, CorruptionSpec(eps, _mode(spec, clean), derive_seed(spec.seed, k, n, _eps_code(eps), 2)))


def _mode(spec, dataset) -> str:
    return "uniform" if dataset.is_tabular else spec.corruption_mode


def _sweep_unit(args) -> list:
    spec, k, n = args
    ctx = _Context(spec)
    clean = _unit_data(ctx, spec, k, n)
    rows, oracle = [], None
    for eps in spec.epsilon_values:
        data = _corrupted(clean, spec, k, n, eps)
        train_seed = derive_seed(spec.seed, k, n, _eps_code(eps), 3)
        eval_seed = derive_seed(spec.seed, k, n, _eps_code(eps), 4)
        for algo in spec.algorithms:
            if algo == "oracle_bc":
                if oracle is None:
                    cfg = _algo_config(spec, "bc", 0.0, derive_seed(spec.seed, k, n, 5))
                    oracle = run_algorithm("bc", clean, cfg, cfg.seed)
                pi, hist = oracle
            else:
                cfg = _algo_config(spec, algo, eps, train_seed)
                pi, hist = run_algorithm(algo, data, cfg, train_seed)
            row = {"env": spec.env, "algorithm": algo, "N": n, "epsilon": eps, "seed": k,
                   "final_tau": float(hist.final_tau),
                   "n_corrupted": 0 if algo == "oracle_bc" else data.n_corrupted}
            row.update(_evaluate(ctx, spec, pi, eval_seed))
            rows.append(row)
    return rows


def _run_units(spec: SweepSpec, fn, workers: int) -> list:
    units = [(spec, k, n) for n in spec.n_values for k in range(spec.n_seeds)]
    if workers > 1:
        with ProcessPoolExecutor(max_workers=workers) as pool:
            results = list(pool.map(fn, units))
    else:
        results = [fn(u) for u in units]
    rows = [r for chunk in results for r in chunk]
    order = {a: i for i, a in enumerate(spec.algorithms)}
    rows.sort(key=lambda r: (order[r["algorithm"]], r["N"], r["epsilon"], r["seed"], r.get("epoch", 0)))
    return rows


# ---------------------------------------------------------------------------
# sweeps


def sweep_epsilon(spec: SweepSpec, workers: int = 1) -> EvalReport:
    """Every algorithm at every corruption level for a single sample size."""
    if len(spec.n_values) != 1 or len(spec.epsilon_values) < 2:
        raise InvalidSpecError("sweep_epsilon needs a single N and at least two epsilon values")
    rows = _run_units(spec, _sweep_unit, workers)
    return EvalReport("epsilon", spec.env, rows, meta={"spec": spec.to_dict()})


def sweep_sample_size(spec: SweepSpec, workers: int = 1) -> EvalReport:
    """Every algorithm at every sample size for a single corruption level."""
    if len(spec.epsilon_values) != 1 or len(spec.n_values) < 3:
        raise InvalidSpecError("sweep_sample_size needs a single epsilon and at least three N values")
    rows = _run_units(spec, _sweep_unit, workers)
    return EvalReport("samples", spec.env, rows, meta={"spec": spec.to_dict()})


def sweep(spec: SweepSpec, workers: int = 1) -> EvalReport:
    """Dispatch on the spec's shape: epsilon sweep, sample-size sweep or a plain grid."""
    if len(spec.n_values) == 1 and len(spec.epsilon_values) >= 2:
        return sweep_epsilon(spec, workers)
    if len(spec.epsilon_values) == 1 and len(spec.n_values) >= 3:
        return sweep_sample_size(spec, workers)
    rows = _run_units(spec, _sweep_unit, workers)
    return EvalReport("grid", spec.env, rows, meta={"spec": spec.to_dict()})


def _curve_unit(args) -> list:
    spec, k, n = args
    ctx = _Context(spec)
    eps = spec.epsilon_values[0]
    clean = _unit_data(ctx, spec, k, n)
    data = _corrupted(clean, spec, k, n, eps)
    train_seed = derive_seed(spec.seed, k, n, _eps_code(eps), 3)
    rows = []
    for algo in spec.algorithms:
        def record(epoch, policy, algo=algo):
            if epoch % spec.eval_every:
                return
            mean, std = estimate_return(ctx.env, policy, spec.n_eval_trials,
                                        seed=derive_seed(spec.seed, k, n, _eps_code(eps), 6, epoch))
            rows.append({"env": spec.env, "algorithm": algo, "N": n, "epsilon": eps, "seed": k,
                         "epoch": epoch, "return_mean": mean, "return_std": std,
                         "normalized_return": mean / ctx.expert_return})

        if algo == "oracle_bc":
            cfg = _algo_config(spec, "bc", 0.0, train_seed)
            run_algorithm("bc", clean, cfg, train_seed, callback=record)
        else:
            run_algorithm(algo, data, _algo_config(spec, algo, eps, train_seed), train_seed,
                          callback=record)
    return rows


def reward_vs_epoch(spec: SweepSpec, workers: int = 1) -> EvalReport:
    """Return of the current policy every ``eval_every`` epochs, from epoch 0."""
    if len(spec.n_values) != 1 or len(spec.epsilon_values) != 1:
        raise InvalidSpecError("reward_vs_epoch needs a single N and a single epsilon")
    rows = _run_units(spec, _curve_unit, workers)
    return EvalReport("curve", spec.env, rows, CURVE_FIELDS, meta={"spec": spec.to_dict()})


def curve_points(report: EvalReport, algorithm: str) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """(epochs, mean normalized return, standard error) for one algorithm's curve."""
    by_epoch: dict = {}
    for r in report.rows:
        if r["algorithm"] == algorithm:
            by_epoch.setdefault(r["epoch"], []).append(r["normalized_return"])
    epochs = np.array(sorted(by_epoch))
    vals = [np.array(by_epoch[e]) for e in epochs]
    means = np.array([v.mean() for v in vals])
    ses = np.array([v.std(ddof=1) / math.sqrt(len(v)) if len(v) > 1 else 0.0 for v in vals])
    return epochs, means, ses


# ---------------------------------------------------------------------------
# theory checks


TV_FIELDS = ("env", "N", "seed", "tv_sq", "final_tau", "exact_return", "expert_return")


@dataclass
class TvReport:
    env: str
    rows: list
    slope: float
    intercept: float
    residual: float
    meta: dict = field(default_factory=dict)

    def means(self) -> tuple[np.ndarray, np.ndarray]:
        ns = sorted({r["N"] for r in self.rows})
        return np.array(ns), np.array([np.mean([r["tv_sq"] for r in self.rows if r["N"] == n]) for n in ns])

    def to_csv(self, path) -> None:
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(TV_FIELDS)
            for r in self.rows:
                w.writerow([_fmt(r[k]) for k in TV_FIELDS])

    def summary(self) -> dict:
        ns, m = self.means()
        taus = {n: float(np.mean([r["final_tau"] for r in self.rows if r["N"] == n])) for n in ns}
        return {"env": self.env, "slope": self.slope, "intercept": self.intercept,
                "residual": self.residual, "meta": self.meta,
                "cells": [{"N": int(n), "tv_sq_mean": float(v), "final_tau_mean": taus[n]}
                          for n, v in zip(ns, m)]}

    def save(self, out_dir, figures: bool = True) -> list:
        out = Path(out_dir)
        out.mkdir(parents=True, exist_ok=True)
        written = [out / f"{self.env}_tv.csv", out / f"{self.env}_tv_summary.json"]
        self.to_csv(written[0])
        written[1].write_text(json.dumps(self.summary(), indent=2, sort_keys=True) + "\n")
        if figures:
            from .plotting import plot_tv
            written.append(plot_tv(self, out / f"{self.env}_tv.png"))
        return written


def tv_config(epochs: int = 400, learning_rate: float = 0.05) -> TrainConfig:
    """Full-batch, unregularized BC so the fit is the tabular MLE."""
    return TrainConfig(epochs=epochs, learning_rate=learning_rate, entropy_coef=0.0,
                       grad_clip=1e6)


def tv_bound_check(env_id: str = "gridworld5", n_values=(1000, 2000, 4000, 8000, 16000),
                   n_seeds: int = 20, softness: float = 0.1, config: TrainConfig | None = None,
                   seed: int = 0) -> TvReport:
    """BC on clean data: log-log fit of mean tv_sq against N."""
    env = make_env(env_id)
    if not env.is_tabular:
        raise InvalidSpecError("tv_bound_check needs a tabular environment")
    config = config or tv_config()
    expert = expert_policy(env, softness)
    weights = stationary_visitation(env, expert).sum(axis=1)
    j_e = exact_return(env, expert)
    rows = []
    for n in n_values:
        for k in range(n_seeds):
            data = collect_demos(env, expert, n, seed=derive_seed(seed, k, n, 1), env_id=env_id,
                                 softness=softness)
            cfg = config.replace(batch_size_override=n, seed=derive_seed(seed, k, n, 3))
            pi0 = init_policy(data, cfg, np.random.default_rng(derive_seed(seed, k, n, 7)))
            pi, hist = train_bc(data, pi0, cfg)
            rows.append({"env": env_id, "N": n, "seed": k, "tv_sq": tv_distance(pi, expert, weights),
                         "final_tau": hist.final_tau, "exact_return": exact_return(env, pi),
                         "expert_return": j_e})
    report = TvReport(env_id, rows, float("nan"), float("nan"), float("nan"),
                      meta={"softness": softness, "n_seeds": n_seeds, "seed": seed,
                            "train": config.to_dict()})
    ns, m = report.means()
    slope, intercept = np.polyfit(np.log(ns), np.log(m), 1)
    resid = np.log(m) - (slope * np.log(ns) + intercept)
    report.slope, report.intercept = float(slope), float(intercept)
    report.residual = float(np.sqrt(np.mean(resid**2)))
    return report


def bridge_check(report: EvalReport, gamma: float, n_eval_trials: int) -> list:
    """Per tabular row: is J_E - J_pi <= 2 sqrt(tv_sq) / (1 - gamma)^2 + 5 SE?"""
    out = []
    for r in report.rows:
        if not np.isfinite(r.get("tv_sq", float("nan"))):
            continue
        gap = r["expert_return"] - r["exact_return"]
        bound = 2.0 * math.sqrt(r["tv_sq"]) / (1.0 - gamma) ** 2
        se = r["return_std"] / math.sqrt(n_eval_trials)
        out.append({"algorithm": r["algorithm"], "N": r["N"], "epsilon": r["epsilon"],
                    "seed": r["seed"], "gap": gap, "bound": bound, "se": se,
                    "holds": bool(gap <= bound + 5.0 * se)})
    return out


def spearman(x, y) -> float:
    return float(stats.spearmanr(x, y)[0])
