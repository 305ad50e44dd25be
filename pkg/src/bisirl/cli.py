"""Command-line harness: ``bisirl run|gradcheck|bench <config.json>``.

Config files are strict JSON; unknown keys are rejected. Relative paths
resolve against the config file's directory, except that the output
directory resolves against ``$BISIRL_OUTPUT_ROOT`` when that is set.
"""

from __future__ import annotations

import argparse
import csv
import json
import logging
import math
import os
import sys
import time
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .driver import (
    RESPONSE_MODES,
    DriverConfig,
    ExpertOracle,
    mlirl_demos,
    run_bisirl,
    run_marl_baseline,
    run_mlirl_baseline,
)
from .envs import (
    Environment,
    GridSpec,
    benchmark_game,
    build_grid_game,
    build_security_game,
    default_attack_graph,
    load_attack_graph,
    load_grid_spec,
    random_environment,
)
from .game import sample_trajectories
from .hypergrad import (
    UPPER_OBJECTIVES,
    BilevelProblem,
    SpsaConfig,
    analytical_derivatives,
    analytical_hypergradient,
    estimate_hypergradient,
)
from .lower import LowerConfig, LowerProblem
from .soft import solve_soft

log = logging.getLogger("bisirl")

OUTPUT_ROOT_VAR = "BISIRL_OUTPUT_ROOT"
CSV_HEADER = ("run_id", "seed", "k", "phase", "metric", "value", "ms")
# metric name -> phase that produces it
METRICS = {
    "f": "eval",
    "grad_norm": "hypergrad",
    "lower_loss": "inner",
    "expert_gap": "eval",
    "learner_return": "eval",
    "expert_return": "eval",
    "theta_l_norm": "hypergrad",
    "theta_e_norm": "inner",
}
BUILTINS = ("security-4node", "benchmark", "benchmark-tabular", "grid-3x3", "random-3state")


class ConfigError(ValueError):
    pass


def _strict(doc, allowed: dict, where: str) -> dict:
    """Check keys against ``allowed`` (name -> default, or ... for required)."""
    if not isinstance(doc, dict):
        raise ConfigError(f"{where}: expected an object, got {type(doc).__name__}")
    unknown = set(doc) - set(allowed)
    if unknown:
        raise ConfigError(f"{where}: unknown keys {sorted(unknown)}")
    out = {}
    for key, default in allowed.items():
        if key in doc:
            out[key] = doc[key]
        elif default is ...:
            raise ConfigError(f"{where}: missing required key {key!r}")
        else:
            out[key] = default
    return out


ENV_KEYS = {
    "builtin": None,
    "attack_graph": None,
    "grid": None,
    "horizon": None,
    "discount": None,
    "features": None,
    "n_states": 3,
    "n_actions": [2, 2],
    "seed": 0,
}
DRIVER_KEYS = {
    "K": 100,
    "d": 20,
    "lam": 0.1,
    "beta": 0.1,
    "n_avg": 64,
    "p0": 1.0,
    "alpha0": 0.5,
    "upper_objective": "true_rl",
    "response_mode": "joint_soft",
}
BASELINE_KEYS = {"marl": True, "mlirl": True, "mlirl_steps": None}
GRADCHECK_KEYS = {"n_games": 3, "seed": 0, "eps": 1e-5, "tol_first": 1e-6, "tol_second": 1e-5, "n_avg": 2000, "p": 1e-3}
BENCH_KEYS = {"horizons": [4, 8, 16, 32], "repeats": 3, "n_avg": 64, "p": 0.01, "d": 20}
TOP_KEYS = {
    "environment": ...,
    "driver": {},
    "baselines": {},
    "n_seeds": 1,
    "seed": 0,
    "output_dir": "out",
    "wall_clock": False,
    "gradcheck": {},
    "bench": {},
}


@dataclass
class ExperimentConfig:
    name: str
    environment: dict
    driver: dict
    baselines: dict
    n_seeds: int
    seed: int
    output_dir: Path
    wall_clock: bool
    gradcheck: dict = field(default_factory=dict)
    bench: dict = field(default_factory=dict)
    base_dir: Path = Path(".")


def load_config(path) -> ExperimentConfig:
    path = Path(path)
    try:
        doc = json.loads(path.read_text())
    except OSError as err:
        raise ConfigError(f"cannot read config {path}: {err}") from err
    except json.JSONDecodeError as err:
        raise ConfigError(f"{path}: invalid JSON: {err}") from err
    base = path.resolve().parent
    top = _strict(doc, TOP_KEYS, "config")
    env = top["environment"]
    if isinstance(env, str):
        env = {"builtin": env}
    env = _strict(env, ENV_KEYS, "environment")
    sources = [k for k in ("builtin", "attack_graph", "grid") if env[k] is not None]
    if len(sources) != 1:
        raise ConfigError("environment: give exactly one of 'builtin', 'attack_graph', 'grid'")
    if env["builtin"] is not None and env["builtin"] not in BUILTINS:
        raise ConfigError(f"environment: unknown builtin {env['builtin']!r}; choose from {list(BUILTINS)}")
    for key in ("attack_graph", "grid"):
        if env[key] is not None:
            env[key] = base / env[key]
            if not env[key].is_file():
                raise ConfigError(f"environment: {key} file {env[key]} does not exist")
    driver = _strict(top["driver"], DRIVER_KEYS, "driver")
    if driver["upper_objective"] not in UPPER_OBJECTIVES:
        raise ConfigError(f"driver: upper_objective must be one of {list(UPPER_OBJECTIVES)}")
    if driver["response_mode"] not in RESPONSE_MODES:
        raise ConfigError(f"driver: response_mode must be one of {list(RESPONSE_MODES)}")
    baselines = _strict(top["baselines"], BASELINE_KEYS, "baselines")
    if not isinstance(top["n_seeds"], int) or top["n_seeds"] < 1:
        raise ConfigError("n_seeds must be a positive integer")
    root = os.environ.get(OUTPUT_ROOT_VAR)
    out = Path(top["output_dir"])
    if not out.is_absolute():
        out = (Path(root) if root else base) / out
    cfg = ExperimentConfig(
        name=path.stem,
        environment=env,
        driver=driver,
        baselines=baselines,
        n_seeds=top["n_seeds"],
        seed=int(top["seed"]),
        output_dir=out,
        wall_clock=bool(top["wall_clock"]),
        gradcheck=_strict(top["gradcheck"], GRADCHECK_KEYS, "gradcheck"),
        bench=_strict(top["bench"], BENCH_KEYS, "bench"),
        base_dir=base,
    )
    try:
        driver_config(cfg, 0)
    except (TypeError, ValueError) as err:
        raise ConfigError(f"driver: {err}") from err
    return cfg


def build_environment(spec: dict, horizon: int | None = None) -> Environment:
    """Instantiate the configured environment, optionally overriding its horizon."""
    kw = {}
    h = horizon if horizon is not None else spec["horizon"]
    if h is not None:
        kw["horizon"] = int(h)
    if spec["discount"] is not None:
        kw["discount"] = float(spec["discount"])
    if spec["features"] is not None:
        kw["features"] = spec["features"]
    name = spec["builtin"]
    if spec["attack_graph"] is not None or name == "security-4node":
        graph = load_attack_graph(spec["attack_graph"]) if spec["attack_graph"] is not None else default_attack_graph()
        return build_security_game(graph, **kw)
    if spec["grid"] is not None or name == "grid-3x3":
        grid = load_grid_spec(spec["grid"]) if spec["grid"] is not None else default_grid()
        kw.setdefault("features", "linear")
        return build_grid_game(grid, **kw)
    if name == "benchmark":
        return benchmark_game(**kw)
    if name == "benchmark-tabular":
        kw.setdefault("features", "tabular")
        return benchmark_game(**kw)
    rng = np.random.default_rng(spec["seed"])
    n_al, n_ae = spec["n_actions"]
    return random_environment(
        spec["n_states"], n_al, n_ae, kw.get("horizon", 4), kw.get("discount", 0.9), rng,
        features=kw.get("features", "linear"),
    )


def default_grid() -> GridSpec:
    return GridSpec(3, 3, learner_start=(0, 0), expert_start=(2, 2), landmarks=((0, 2), (2, 0)), target=0, expert_target=1)


def driver_config(cfg: ExperimentConfig, seed: int) -> DriverConfig:
    d = cfg.driver
    return DriverConfig(
        K=int(d["K"]),
        d=int(d["d"]),
        lower=LowerConfig(lam=float(d["lam"]), step_sizes=float(d["beta"])),
        n_avg=int(d["n_avg"]),
        p0=float(d["p0"]),
        alpha0=float(d["alpha0"]),
        upper_objective=d["upper_objective"],
        seed=seed,
    )


# ---------------------------------------------------------------- run


def _fmt(x: float) -> str:
    return repr(float(x))


def run_one(cfg: ExperimentConfig, seed: int) -> dict:
    """One seeded run of BISIRL plus enabled baselines; streams metrics to CSV."""
    env = build_environment(cfg.environment)
    oracle = ExpertOracle(env.r_e, cfg.driver["response_mode"], env.r_l)
    dcfg = driver_config(cfg, seed)
    run_id = f"{cfg.name}-s{seed}"
    cfg.output_dir.mkdir(parents=True, exist_ok=True)
    path = cfg.output_dir / f"{run_id}.csv"
    out = {"seed": seed}
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(CSV_HEADER)

        def emit(k, metric, value, ms=None, phase=None):
            phase = phase or METRICS[metric]
            stamp = "" if ms is None or not cfg.wall_clock else f"{ms:.3f}"
            writer.writerow((run_id, seed, k, phase, metric, _fmt(value), stamp))

        def on_record(rec):
            values = {
                "f": rec.f,
                "grad_norm": rec.grad_norm,
                "lower_loss": rec.lower_loss,
                "expert_gap": rec.expert_gap,
                "learner_return": rec.learner_return,
                "theta_l_norm": float(np.linalg.norm(rec.theta_l)),
                "theta_e_norm": float(np.linalg.norm(rec.theta_e)),
            }
            for metric, value in values.items():
                emit(rec.k, metric, value, rec.ms.get(METRICS[metric]))
            fh.flush()

        try:
            result = run_bisirl(env.game, env.r_l, oracle, env.model_l, env.model_e, dcfg, on_record=on_record)
            out["bisirl"] = {
                "learner_return": result.learner_return,
                "expert_return": result.expert_return,
                "expert_gap": result.records[-1].expert_gap,
            }
            if cfg.baselines["marl"]:
                _, jl, je = run_marl_baseline(env.game, env.r_l, env.r_e)
                emit(0, "learner_return", jl, phase="marl")
                emit(0, "expert_return", je, phase="marl")
                out["marl"] = {"learner_return": jl, "expert_return": je}
            if cfg.baselines["mlirl"]:
                rng = np.random.default_rng(np.random.SeedSequence(seed).spawn(4)[3])
                theta_l0 = np.zeros(env.model_l.dim)
                demos = mlirl_demos(env.game, env.model_l.table(theta_l0), env.r_e, dcfg.d, rng)
                steps = cfg.baselines["mlirl_steps"]
                steps = dcfg.K if steps is None else int(steps)
                ml = run_mlirl_baseline(
                    env.game, env.r_l, theta_l0, oracle, demos, env.model_l, env.model_e, dcfg.lower, steps
                )
                emit(0, "learner_return", ml.learner_return, phase="mlirl")
                emit(0, "expert_return", ml.expert_return, phase="mlirl")
                out["mlirl"] = {"learner_return": ml.learner_return, "expert_return": ml.expert_return}
        finally:
            fh.flush()
    return out


def summarize(results: list[dict]) -> dict:
    """Mean and population standard deviation of every final quantity across seeds."""
    summary = {"n_seeds": len(results), "seeds": [r["seed"] for r in results]}
    for method in ("bisirl", "marl", "mlirl"):
        rows = [r[method] for r in results if method in r]
        if not rows:
            continue
        summary[method] = {
            key: {"mean": float(np.mean([row[key] for row in rows])), "std": float(np.std([row[key] for row in rows]))}
            for key in rows[0]
        }
    return summary


def cmd_run(cfg: ExperimentConfig, jobs: int = 1) -> int:
    seeds = [cfg.seed + i for i in range(cfg.n_seeds)]
    if jobs > 1 and len(seeds) > 1:
        with ProcessPoolExecutor(max_workers=jobs) as pool:
            results = list(pool.map(run_one, [cfg] * len(seeds), seeds))
    else:
        results = [run_one(cfg, s) for s in seeds]
    summary = summarize(results)
    (cfg.output_dir / f"{cfg.name}-summary.json").write_text(json.dumps(summary, indent=2) + "\n")
    print(json.dumps(summary, indent=2))
    return 0


# ---------------------------------------------------------------- gradcheck


def _fd(fn, x, eps):
    x = np.asarray(x, dtype=float)
    cols = []
    for i in range(x.size):
        e = np.zeros_like(x)
        e[i] = eps
        cols.append((np.asarray(fn(x + e)) - np.asarray(fn(x - e))) / (2 * eps))
    return np.array(cols)


def _rel(a, b) -> float:
    return float(np.linalg.norm(np.asarray(a) - np.asarray(b)) / max(np.linalg.norm(b), 1e-12))


def gradcheck_instances(cfg: ExperimentConfig):
    """Yield (label, BilevelProblem, theta_l, theta_e) for each checked instance."""
    gc = cfg.gradcheck
    rng = np.random.default_rng(gc["seed"])
    for i in range(gc["n_games"]):
        if cfg.environment["builtin"] == "random-3state":
            spec = dict(cfg.environment, seed=int(rng.integers(2**31)))
            env = build_environment(spec)
        else:
            env = build_environment(cfg.environment)
        policy = solve_soft(env.game, env.r_l, env.r_e).policy
        demos = sample_trajectories(env.game, policy, 20, rng)
        lower = LowerProblem(env.game, env.model_l, env.model_e, demos, float(cfg.driver["lam"]))
        problem = BilevelProblem(lower, env.r_l, cfg.driver["upper_objective"])
        theta_l = 0.5 * rng.normal(size=env.model_l.dim) / math.sqrt(env.model_l.dim)
        theta_e = 0.5 * rng.normal(size=env.model_e.dim) / math.sqrt(env.model_e.dim)
        yield f"game{i}", problem, theta_l, theta_e


def run_gradchecks(cfg: ExperimentConfig, tol: float | None = None, corrupt: bool = False):
    """Return a list of (name, error, threshold, passed)."""
    gc = cfg.gradcheck
    tol_first = gc["tol_first"] if tol is None else tol
    tol_second = gc["tol_second"] if tol is None else tol
    eps = gc["eps"]
    checks = []
    for label, problem, tl, te in gradcheck_instances(cfg):
        lower = problem.lower
        parts = analytical_derivatives(problem, tl, te)
        if corrupt:
            parts["grad_e_L"] = parts["grad_e_L"] + 1e-3
        pairs = [
            ("grad_e_L", parts["grad_e_L"], _fd(lambda t: lower.loss(tl, t), te, eps), tol_first),
            ("grad_l_L", parts["grad_l_L"], _fd(lambda t: lower.loss(t, te), tl, eps), tol_first),
            ("grad_l_f", parts["grad_l_f"], _fd(lambda t: problem.f(t, te), tl, eps), tol_second),
            ("grad_e_f", parts["grad_e_f"], _fd(lambda t: problem.f(tl, t), te, eps), tol_second),
            ("hess_ee", parts["hess_ee"], _fd(lambda t: lower.grad_e(tl, t), te, eps), tol_second),
            ("jac_le", parts["jac_le"], _fd(lambda t: lower.grad_l(tl, t), te, eps).T, tol_second),
        ]
        for name, got, want, thr in pairs:
            err = _rel(got, want)
            checks.append((f"{label}/{name}", err, thr, err <= thr))
        exact = analytical_hypergradient(problem, tl, te)
        est = estimate_hypergradient(problem, tl, te, SpsaConfig(p=gc["p"], n_avg=gc["n_avg"]), np.random.default_rng(0))
        cos = float(exact @ est.assembled / max(np.linalg.norm(exact) * np.linalg.norm(est.assembled), 1e-300))
        checks.append((f"{label}/spsa_cosine", 1.0 - cos, 0.1, cos > 0.9))
    return checks


def cmd_gradcheck(cfg: ExperimentConfig, tol: float | None = None, corrupt: bool = False) -> int:
    checks = run_gradchecks(cfg, tol, corrupt)
    for name, err, thr, ok in checks:
        print(f"{'PASS' if ok else 'FAIL'} {name}: error {err:.3e} (threshold {thr:.1e})")
    failed = sum(not ok for *_, ok in checks)
    print(f"{len(checks) - failed}/{len(checks)} checks passed")
    return 0 if failed == 0 else 1


# ---------------------------------------------------------------- bench


def _best_ms(fn, repeats: int) -> float:
    best = math.inf
    for _ in range(repeats):
        tic = time.perf_counter()
        fn()
        best = min(best, time.perf_counter() - tic)
    return 1e3 * best


def bench_horizon(cfg: ExperimentConfig, horizon: int) -> list[tuple[int, str, float]]:
    b = cfg.bench
    env = build_environment(cfg.environment, horizon=horizon)
    rng = np.random.default_rng(cfg.seed)
    demos = sample_trajectories(env.game, solve_soft(env.game, env.r_l, env.r_e).policy, b["d"], rng)
    lower = LowerProblem(env.game, env.model_l, env.model_e, demos, float(cfg.driver["lam"]))
    problem = BilevelProblem(lower, env.r_l, cfg.driver["upper_objective"])
    tl, te = np.zeros(env.model_l.dim), np.zeros(env.model_e.dim)
    spsa = SpsaConfig(p=b["p"], n_avg=b["n_avg"])
    ms_a = _best_ms(lambda: analytical_hypergradient(problem, tl, te), b["repeats"])
    ms_s = _best_ms(lambda: estimate_hypergradient(problem, tl, te, spsa, np.random.default_rng(0)), b["repeats"])
    return [(horizon, "analytical", ms_a), (horizon, "spsa", ms_s)]


def loglog_slope(horizons, ms) -> float:
    return float(np.polyfit(np.log(horizons), np.log(ms), 1)[0])


def cmd_bench(cfg: ExperimentConfig, jobs: int = 1) -> int:
    horizons = [int(h) for h in cfg.bench["horizons"]]
    if jobs > 1:
        with ProcessPoolExecutor(max_workers=jobs) as pool:
            parts = list(pool.map(bench_horizon, [cfg] * len(horizons), horizons))
    else:
        parts = [bench_horizon(cfg, h) for h in horizons]
    rows = [row for part in parts for row in part]
    cfg.output_dir.mkdir(parents=True, exist_ok=True)
    with open(cfg.output_dir / f"{cfg.name}-bench.csv", "w", newline="") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(("H", "method", "ms"))
        writer.writerows((h, m, f"{ms:.3f}") for h, m, ms in rows)
    slopes = {
        method: loglog_slope(horizons, [ms for h, m, ms in rows if m == method]) for method in ("analytical", "spsa")
    }
    summary = {"horizons": horizons, "slopes": slopes}
    (cfg.output_dir / f"{cfg.name}-bench-summary.json").write_text(json.dumps(summary, indent=2) + "\n")
    for h, m, ms in rows:
        print(f"H={h:<4d} {m:<11s} {ms:10.3f} ms")
    print(f"log-log slope: analytical {slopes['analytical']:.2f}, spsa {slopes['spsa']:.2f}")
    return 0


# ---------------------------------------------------------------- entry point


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="bisirl", description="Bi-level interactive IRL experiments.")
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)
    run = sub.add_parser("run", help="run BISIRL and baselines over seeds")
    run.add_argument("config")
    run.add_argument("--jobs", type=int, default=1)
    gc = sub.add_parser("gradcheck", help="finite-difference and SPSA checks of every derivative")
    gc.add_argument("config")
    gc.add_argument("--tol", type=float, default=None, help="override every relative-error threshold")
    gc.add_argument("--corrupt-gradient", action="store_true", help=argparse.SUPPRESS)
    bench = sub.add_parser("bench", help="time analytical vs SPSA hypergradients over horizons")
    bench.add_argument("config")
    bench.add_argument("--jobs", type=int, default=1)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return int(exc.code or 0)
    logging.basicConfig(level=logging.DEBUG if args.verbose else logging.WARNING)
    try:
        cfg = load_config(args.config)
    except (ConfigError, ValueError, TypeError) as err:
        print(f"config error: {err}", file=sys.stderr)
        return 2
    try:
        if args.command == "run":
            return cmd_run(cfg, args.jobs)
        if args.command == "gradcheck":
            return cmd_gradcheck(cfg, args.tol, args.corrupt_gradient)
        return cmd_bench(cfg, args.jobs)
    except Exception as err:  # noqa: BLE001 - any runtime failure maps to exit 1
        log.debug("run failed", exc_info=True)
        print(f"error: {err}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
