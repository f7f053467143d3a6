"""Command-line entry point: one subcommand per pipeline stage.

Exit codes: 0 success, 1 runtime failure, 2 usage error, 3 invalid config or
input (the message names the field), 4 missing or unreadable file.  stdout
carries ``key=value`` lines only; diagnostics go to stderr.
"""
from __future__ import annotations

import argparse
import hashlib
import json
import sys
import time
from dataclasses import asdict, dataclass, field
from pathlib import Path


from . import __version__
from .demos import CorruptionSpec, collect_demos, corrupt, load_dataset, save_dataset
from .envsim import estimate_return, exact_return, expert_policy, make_env
from .errors import ConfigError, FormatError, InvalidSpecError, RobustBCError
from .experiments import (SweepSpec, bridge_check, reward_vs_epoch, sweep, tv_bound_check,
                          tv_config)
from .policy import load_policy, save_policy
from .train import ALGORITHMS, TrainConfig, run_algorithm

EXIT_OK, EXIT_FAIL, EXIT_USAGE, EXIT_INVALID, EXIT_IO = 0, 1, 2, 3, 4


def git_hash(path) -> str:
    """Hash of a file's bytes in git's blob convention."""
    data = Path(path).read_bytes()
    return hashlib.sha1(b"blob %d\0" % len(data) + data).hexdigest()


@dataclass
class RunManifest:
    command: str
    config: dict
    inputs: dict = field(default_factory=dict)
    outputs: dict = field(default_factory=dict)
    started: str = ""
    finished: str = ""
    version: str = __version__

    def add_inputs(self, *paths):
        for p in paths:
            if p is not None:
                self.inputs[str(p)] = git_hash(p)

    def write(self, path, outputs=()):
        for p in outputs:
            if Path(p).is_file():
                self.outputs[str(p)] = git_hash(p)
        self.finished = _now()
        Path(path).write_text(json.dumps(asdict(self), indent=2, sort_keys=True) + "\n")
        return Path(path)


def _now() -> str:
    return time.strftime("%Y-%m-%dT%H:%M:%S%z")


def _emit(**kv):
    for k, v in kv.items():
        if isinstance(v, float):
            v = repr(v)
        elif isinstance(v, bool):
            v = str(v).lower()
        print(f"{k}={v}", flush=True)


def _manifest_path(out) -> Path:
    out = Path(out)
    return out / "manifest.json" if out.is_dir() else out.with_name(out.name + ".manifest.json")


def _finish(manifest: RunManifest, out, outputs):
    path = manifest.write(_manifest_path(out), outputs)
    _emit(manifest=str(path))


# ---------------------------------------------------------------------------
# subcommands


def cmd_gen_demos(args) -> int:
    m = RunManifest("gen-demos", {k: v for k, v in vars(args).items() if k != "func"}, started=_now())
    env = make_env(args.env)
    expert = expert_policy(env, args.softness)
    data = collect_demos(env, expert, args.n, horizon=args.horizon, seed=args.seed,
                         restart=args.restart, env_id=args.env, softness=args.softness)
    save_dataset(data, args.out)
    _emit(command="gen-demos", n=data.n, env=args.env, out=args.out)
    _finish(m, args.out, [args.out])
    return EXIT_OK


def cmd_corrupt(args) -> int:
    m = RunManifest("corrupt", {k: v for k, v in vars(args).items() if k != "func"}, started=_now())
    m.add_inputs(args.inp)
    data = load_dataset(args.inp)
    spec = CorruptionSpec(args.eps, args.mode, args.seed)
    out = corrupt(data, spec)
    save_dataset(out, args.out)
    _emit(command="corrupt", n=out.n, n_corrupted=out.n_corrupted, epsilon=args.eps, out=args.out)
    _finish(m, args.out, [args.out])
    return EXIT_OK


def cmd_train(args) -> int:
    data = load_dataset(args.data)
    cfg_dict = json.loads(Path(args.config).read_text()) if args.config else {}
    if not isinstance(cfg_dict, dict):
        raise ConfigError("config: top level must be an object")
    if "epsilon_declared" not in cfg_dict and "epsilon" in data.meta and args.algo in ("rbc", "mom_min"):
        cfg_dict["epsilon_declared"] = data.meta["epsilon"]
    if args.eps_declared is not None:
        cfg_dict["epsilon_declared"] = args.eps_declared
    if args.epochs is not None:
        cfg_dict["epochs"] = args.epochs
    cfg_dict["seed"] = args.seed
    cfg = TrainConfig.from_dict(cfg_dict)
    m = RunManifest("train", {"algo": args.algo, "train": cfg.to_dict()}, started=_now())
    m.add_inputs(args.data, args.config)
    pi, hist = run_algorithm(args.algo, data, cfg, args.seed)
    save_policy(pi, args.out)
    outputs = [args.out, args.out + ".json"]
    if args.history:
        hist.to_csv(args.history)
        outputs.append(args.history)
    _emit(command="train", algo=args.algo, epochs=len(hist), final_tau=float(hist.final_tau),
          eps_declared=cfg.epsilon_declared, out=args.out)
    _finish(m, args.out, outputs)
    return EXIT_OK


def cmd_eval(args) -> int:
    env = make_env(args.env)
    pi = load_policy(args.policy)
    mean, std = estimate_return(env, pi, args.trials, horizon=args.horizon, seed=args.seed)
    result = {"return_mean": mean, "return_std": std}
    if env.is_tabular:
        j_e = exact_return(env, expert_policy(env, 0.0))
        result.update(exact_return=exact_return(env, pi), expert_return=j_e,
                      normalized_return=mean / j_e)
    _emit(command="eval", **result)
    if args.out:
        m = RunManifest("eval", {k: v for k, v in vars(args).items() if k != "func"}, started=_now())
        m.add_inputs(args.policy)
        Path(args.out).write_text(json.dumps(result, indent=2, sort_keys=True) + "\n")
        _finish(m, args.out, [args.out])
    return EXIT_OK


def cmd_sweep(args) -> int:
    spec = SweepSpec.from_json(args.spec)
    if args.seed is not None:
        spec.seed = args.seed
    m = RunManifest("sweep", {"spec": spec.to_dict(), "kind": args.kind}, started=_now())
    m.add_inputs(args.spec)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    report = reward_vs_epoch(spec, args.workers) if args.kind == "curve" else sweep(spec, args.workers)
    written = report.save(out, figures=not args.no_figures)
    _emit(command="sweep", kind=report.kind, rows=len(report.rows), cells=len(report.cells()))
    if report.kind != "curve" and make_env(spec.env).is_tabular:
        checks = bridge_check(report, make_env(spec.env).gamma, spec.n_eval_trials)
        _emit(bridge_holds=all(c["holds"] for c in checks))
    _emit(out=str(out))
    _finish(m, out, written)
    return EXIT_OK


def cmd_tv_check(args) -> int:
    n_values = [int(x) for x in args.n_values.split(",")]
    cfg = tv_config(args.epochs, args.lr)
    m = RunManifest("tv-check", {"env": args.env, "n_values": n_values, "n_seeds": args.seeds,
                                 "softness": args.softness, "seed": args.seed,
                                 "train": cfg.to_dict()}, started=_now())
    report = tv_bound_check(args.env, n_values, args.seeds, args.softness, cfg, args.seed)
    out = Path(args.out)
    written = report.save(out, figures=not args.no_figures)
    _emit(command="tv-check", slope=report.slope, residual=report.residual, out=str(out))
    _finish(m, out, written)
    return EXIT_OK


# ---------------------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="robust-bc", description=__doc__.splitlines()[0])
    p.add_argument("--version", action="version", version=__version__)
    sub = p.add_subparsers(dest="command", required=True)

    g = sub.add_parser("gen-demos", help="collect expert demonstrations")
    g.add_argument("--env", required=True)
    g.add_argument("--n", type=int, required=True)
    g.add_argument("--softness", type=float, default=0.0)
    g.add_argument("--horizon", type=int)
    g.add_argument("--restart", choices=("geometric", "horizon"), default="geometric")
    g.add_argument("--seed", type=int, default=0)
    g.add_argument("--out", required=True)
    g.set_defaults(func=cmd_gen_demos)

    c = sub.add_parser("corrupt", help="corrupt a fraction of a dataset's actions")
    c.add_argument("--in", dest="inp", required=True)
    c.add_argument("--eps", type=float, required=True)
    c.add_argument("--mode", choices=("boundary", "uniform"), default="uniform")
    c.add_argument("--seed", type=int, default=0)
    c.add_argument("--out", required=True)
    c.set_defaults(func=cmd_corrupt)

    t = sub.add_parser("train", help="train a policy on a dataset")
    t.add_argument("--algo", choices=ALGORITHMS, required=True)
    t.add_argument("--data", required=True)
    t.add_argument("--config")
    t.add_argument("--eps-declared", type=float)
    t.add_argument("--epochs", type=int)
    t.add_argument("--history")
    t.add_argument("--seed", type=int, default=0)
    t.add_argument("--out", required=True)
    t.set_defaults(func=cmd_train)

    e = sub.add_parser("eval", help="estimate a policy's discounted return")
    e.add_argument("--policy", required=True)
    e.add_argument("--env", required=True)
    e.add_argument("--trials", type=int, default=20)
    e.add_argument("--horizon", type=int)
    e.add_argument("--seed", type=int, default=0)
    e.add_argument("--out")
    e.set_defaults(func=cmd_eval)

    s = sub.add_parser("sweep", help="run a sweep spec and write reports")
    s.add_argument("--spec", required=True)
    s.add_argument("--out", required=True)
    s.add_argument("--kind", choices=("auto", "curve"), default="auto")
    s.add_argument("--workers", type=int, default=1)
    s.add_argument("--no-figures", action="store_true")
    s.add_argument("--seed", type=int)
    s.set_defaults(func=cmd_sweep)

    v = sub.add_parser("tv-check", help="fit the TV-distance rate of BC on clean data")
    v.add_argument("--env", default="gridworld5")
    v.add_argument("--n-values", default="1000,2000,4000,8000,16000")
    v.add_argument("--seeds", type=int, default=20)
    v.add_argument("--softness", type=float, default=0.1)
    v.add_argument("--epochs", type=int, default=400)
    v.add_argument("--lr", type=float, default=0.05)
    v.add_argument("--no-figures", action="store_true")
    v.add_argument("--seed", type=int, default=0)
    v.add_argument("--out", required=True)
    v.set_defaults(func=cmd_tv_check)
    return p


def dispatch(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return int(exc.code) if exc.code is not None else EXIT_OK
    try:
        return args.func(args)
    except (ConfigError, InvalidSpecError, FormatError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_INVALID
    except (FileNotFoundError, IsADirectoryError, PermissionError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_IO
    except json.JSONDecodeError as exc:
        print(f"error: config: invalid JSON ({exc})", file=sys.stderr)
        return EXIT_INVALID
    except ValueError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_INVALID
    except RobustBCError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_FAIL


def main() -> None:
    sys.exit(dispatch())


if __name__ == "__main__":
    main()
