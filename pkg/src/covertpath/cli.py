"""Command-line harness: generate scenarios, solve exactly, train, compare.

All commands are deterministic given their flags and seeds; wall-clock and
version metadata go to a .meta.json sidecar so the primary outputs stay
byte-identical across runs.  Exit codes: 0 success, 1 input error,
2 infeasible, 3 divergence/abort.
"""

import os

# Multi-threaded BLAS is counterproductive at these matrix sizes; pin it
# before numpy loads (threadpoolctl re-pins later for library callers).
os.environ.setdefault("OMP_NUM_THREADS", "1")
os.environ.setdefault("OPENBLAS_NUM_THREADS", "1")
os.environ.setdefault("MKL_NUM_THREADS", "1")

import argparse
import json
import statistics
import sys
import time
from concurrent.futures import ProcessPoolExecutor
from pathlib import Path

EXIT_OK = 0
EXIT_INPUT = 1
EXIT_INFEASIBLE = 2
EXIT_DIVERGED = 3

COMPARE_CURVES_HEADER = "algo,seed,step,eval_return,eval_accuracy,success_rate"
COMPARE_SUMMARY_HEADER = (
    "algo,n_seeds,oracle,median_final_return,median_final_ratio,"
    "median_steps_to_80pct,mean_accuracy,actor_params"
)


class InputError(Exception):
    pass


def _write_text(path: Path, text: str) -> None:
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(text, encoding="utf-8")


def _write_sidecar(path: Path, extra: dict | None = None) -> None:
    import numpy

    from covertpath import __version__
    from covertpath.scenario import PRNG_NAME

    meta = {
        "covertpath_version": __version__,
        "numpy_version": numpy.__version__,
        "prng": PRNG_NAME,
        "written_at_unix": time.time(),
    }
    meta.update(extra or {})
    _write_text(
        Path(str(path) + ".meta.json"), json.dumps(meta, sort_keys=True) + "\n"
    )


def _load_scenario(path: str):
    from covertpath.scenario import ScenarioParseError, parse

    try:
        text = Path(path).read_text(encoding="utf-8")
    except OSError as exc:
        raise InputError(f"cannot read scenario file: {exc}") from exc
    try:
        return parse(text)
    except ScenarioParseError as exc:
        raise InputError(f"{path}: {exc}") from exc


def _parse_slots(text: str) -> tuple[int, int]:
    try:
        lo, hi = text.split(":")
        return int(lo), int(hi)
    except ValueError as exc:
        raise InputError(f"--slots expects LO:HI, got {text!r}") from exc


def _aggregator(name: str):
    from covertpath.model import Aggregator

    return Aggregator.SUM if name == "sum" else Aggregator.MIN


# --- gen -----------------------------------------------------------------


def cmd_gen(args) -> int:
    from covertpath.model import covert_feasible
    from covertpath.scenario import (
        GenConfig,
        GenerationError,
        parse_gen_config,
        serialize,
    )
    from dataclasses import replace

    if args.config:
        try:
            config = parse_gen_config(Path(args.config).read_text(encoding="utf-8"))
        except OSError as exc:
            raise InputError(f"cannot read config: {exc}") from exc
    else:
        config = GenConfig()

    overrides = {}
    if args.seed is not None:
        overrides["seed"] = args.seed
    if args.nodes is not None:
        overrides["n_nodes"] = args.nodes
    if args.k_max is not None:
        overrides["k_max"] = args.k_max
    if args.slots is not None:
        overrides["slots_per_node"] = _parse_slots(args.slots)
    if args.wardens is not None:
        overrides["n_wardens"] = args.wardens
    if args.tau is not None:
        overrides["tau"] = args.tau
    if args.feasible_fraction is not None:
        overrides["feasible_fraction"] = args.feasible_fraction
    if args.arena_side is not None:
        overrides["arena_side"] = args.arena_side
    config = replace(config, **overrides)

    t0 = time.perf_counter()
    try:
        scenario = generate_scenario(config)
    except GenerationError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_INPUT

    out = Path(args.out)
    _write_text(out, serialize(scenario))
    _write_sidecar(out, {"seed": config.seed, "wall_clock_s": time.perf_counter() - t0})

    n_channels = sum(len(n.out_channels) for n in scenario.nodes)
    n_feasible = sum(
        covert_feasible(ch, scenario.tau)
        for n in scenario.nodes
        for ch in n.out_channels
    )
    print(
        f"wrote {out}: {len(scenario.nodes)} nodes, {n_channels} channels "
        f"({n_feasible / max(n_channels, 1):.2f} feasible), "
        f"{len(scenario.wardens)} wardens, tau={scenario.tau}"
    )
    return EXIT_OK


def generate_scenario(config):
    from covertpath.scenario import generate

    return generate(config)


# --- oracle ----------------------------------------------------------------


def cmd_oracle(args) -> int:
    from covertpath.oracle import brute_force_optimum, optimum_to_json

    scenario = _load_scenario(args.scenario)
    result = brute_force_optimum(
        scenario,
        aggregator=_aggregator(args.aggregator),
        max_hops=args.max_hops,
        prune=not args.no_prune,
    )
    payload = optimum_to_json(result)
    text = json.dumps(payload, sort_keys=True) + "\n"
    if args.out:
        _write_text(Path(args.out), text)
        _write_sidecar(Path(args.out))
    sys.stdout.write(text)
    return EXIT_OK if result.selection is not None else EXIT_INFEASIBLE


# --- train -----------------------------------------------------------------


def cmd_train(args) -> int:
    from covertpath.agents import (
        DivergenceError,
        evaluate,
        train,
        train_report_csv,
    )
    from covertpath.nn import save_checkpoint
    from covertpath.oracle import brute_force_optimum

    scenario = _load_scenario(args.scenario)
    out_dir = Path(args.out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    aggregator = _aggregator(args.aggregator)
    stem = f"{args.algo}_seed{args.seed}"

    t0 = time.perf_counter()
    try:
        report = train(
            scenario,
            algo=args.algo,
            run_seed=args.seed,
            n_steps=args.steps,
            aggregator=aggregator,
            eval_every=args.eval_every,
        )
    except DivergenceError as exc:
        _write_text(out_dir / f"{stem}.csv", train_report_csv(exc.report))
        print(f"error: training diverged: {exc}", file=sys.stderr)
        return EXIT_DIVERGED
    wall = time.perf_counter() - t0

    csv_path = out_dir / f"{stem}.csv"
    _write_text(csv_path, train_report_csv(report))
    _write_sidecar(csv_path, {"wall_clock_s": wall, "algo": args.algo, "seed": args.seed})
    ckpt_path = out_dir / f"{stem}_best.json"
    save_checkpoint(ckpt_path, report.best_checkpoint)

    optimum = brute_force_optimum(scenario, aggregator=aggregator)
    if optimum.selection is None:
        print("warning: scenario infeasible for the oracle", file=sys.stderr)
        oracle_agg = float("nan")
    else:
        oracle_agg = optimum.selection.report.aggregate

    ev = evaluate(report.best_checkpoint, scenario, n_episodes=args.eval_episodes,
                  seed=args.seed, aggregator=aggregator)
    print(f"wrote {csv_path} and {ckpt_path}")
    print(
        f"final eval return: {report.final_eval_return:.4f} "
        f"(best {report.best_eval_return:.4f}, "
        f"best-policy accuracy {ev.mean_accuracy:.4f})"
    )
    print(f"oracle aggregate: {oracle_agg:.4f}")
    print(f"oracle ratio: {report.final_eval_return / oracle_agg:.4f}")
    return EXIT_OK


# --- compare -----------------------------------------------------------------


def _compare_worker(job: dict) -> dict:
    """One (algo, seed) training run; executed in a worker process."""
    from covertpath.agents import DivergenceError, evaluate, train
    from covertpath.scenario import parse

    scenario = parse(job["scenario_text"])
    aggregator = _aggregator(job["aggregator"])
    try:
        report = train(
            scenario,
            algo=job["algo"],
            run_seed=job["seed"],
            n_steps=job["steps"],
            aggregator=aggregator,
            eval_every=job["eval_every"],
            log_trajectories=job.get("log_trajectories", False),
            stop_at_return=job.get("stop_at_return"),
            stop_consecutive=job.get("stop_consecutive", 3),
        )
    except DivergenceError as exc:
        return {
            "algo": job["algo"],
            "seed": job["seed"],
            "failed": True,
            "error": str(exc),
        }
    ev = evaluate(
        report.best_checkpoint,
        scenario,
        n_episodes=50,
        seed=job["seed"],
        aggregator=aggregator,
    )
    return {
        "algo": job["algo"],
        "seed": job["seed"],
        "failed": False,
        "evals": [
            (p.step, p.mean_return, p.mean_accuracy, p.success_rate)
            for p in report.evals
        ],
        "final_return": report.final_eval_return,
        "best_return": report.best_eval_return,
        "mean_accuracy": ev.mean_accuracy,
        "actor_params": report.final_checkpoint["meta"]["actor_param_count"],
        "steps_run": report.env_steps_run,
        "stopped_early": report.stopped_early,
        "policy_checks": report.policy_checks,
        "policy_violations": report.policy_violations,
        "env_violations": report.env_violations,
        "covert_violations": report.covert_violations,
        "revisit_violations": report.revisit_violations,
    }


def _median_or_none(values):
    vals = [v for v in values if v is not None]
    return statistics.median(vals) if len(vals) == len(values) and vals else None


def cmd_compare(args) -> int:
    from covertpath.oracle import brute_force_optimum
    from covertpath.scenario import GenConfig, serialize

    if args.scenario is not None:
        scenario = _load_scenario(args.scenario)
    elif args.gen_seed is not None:
        scenario = generate_scenario(GenConfig(seed=args.gen_seed))
    else:
        raise InputError("give a scenario file or --gen-seed")
    algos = [a.strip() for a in args.algos.split(",") if a.strip()]
    for algo in algos:
        if algo not in ("sac", "dsac"):
            raise InputError(f"unknown algorithm {algo!r}")
    seeds = _parse_seeds(args.seeds)
    aggregator = _aggregator(args.aggregator)

    optimum = brute_force_optimum(scenario, aggregator=aggregator)
    if optimum.selection is None:
        print("error: scenario is infeasible; nothing to compare", file=sys.stderr)
        return EXIT_INFEASIBLE
    oracle_agg = optimum.selection.report.aggregate

    jobs = [
        {
            "scenario_text": serialize(scenario),
            "algo": algo,
            "seed": seed,
            "steps": args.steps,
            "eval_every": args.eval_every,
            "aggregator": args.aggregator,
        }
        for algo in algos
        for seed in seeds
    ]
    workers = int(os.environ.get("COVERTPATH_THREADS", "0")) or min(
        len(jobs), os.cpu_count() or 1
    )
    t0 = time.perf_counter()
    if workers > 1:
        with ProcessPoolExecutor(max_workers=workers) as pool:
            results = list(pool.map(_compare_worker, jobs))
    else:
        results = [_compare_worker(job) for job in jobs]
    wall = time.perf_counter() - t0

    results.sort(key=lambda r: (r["algo"], r["seed"]))
    out_dir = Path(args.out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)

    curve_lines = [COMPARE_CURVES_HEADER]
    for r in results:
        if r["failed"]:
            continue
        for step, ret, acc, succ in r["evals"]:
            curve_lines.append(
                f"{r['algo']},{r['seed']},{step},{ret!r},{acc!r},{succ!r}"
            )
    curves_path = out_dir / "curves.csv"
    _write_text(curves_path, "\n".join(curve_lines) + "\n")

    summary_lines = [COMPARE_SUMMARY_HEADER]
    any_failed = False
    print(f"oracle aggregate: {oracle_agg:.4f}")
    for algo in algos:
        rows = [r for r in results if r["algo"] == algo]
        failed = [r for r in rows if r["failed"]]
        ok = [r for r in rows if not r["failed"]]
        any_failed = any_failed or bool(failed)
        for r in failed:
            print(f"FAILED {algo} seed {r['seed']}: {r['error']}", file=sys.stderr)
        if not ok:
            continue
        finals = [r["final_return"] for r in ok]
        sustain = [
            _steps_to_threshold(r["evals"], 0.8 * oracle_agg) for r in ok
        ]
        med_final = statistics.median(finals)
        med_sustain = _median_or_none(sustain)
        mean_acc = sum(r["mean_accuracy"] for r in ok) / len(ok)
        summary_lines.append(
            f"{algo},{len(ok)},{oracle_agg!r},{med_final!r},"
            f"{med_final / oracle_agg!r},"
            f"{'' if med_sustain is None else med_sustain},"
            f"{mean_acc!r},{ok[0]['actor_params']}"
        )
        print(
            f"{algo}: median final return {med_final:.3f} "
            f"({med_final / oracle_agg:.1%} of oracle), "
            f"steps to 80% {med_sustain}, mean accuracy {mean_acc:.4f}, "
            f"actor params {ok[0]['actor_params']}"
        )
    summary_path = out_dir / "summary.csv"
    _write_text(summary_path, "\n".join(summary_lines) + "\n")
    _write_sidecar(summary_path, {"wall_clock_s": wall, "workers": workers})
    print(f"wrote {curves_path} and {summary_path}")
    return EXIT_DIVERGED if any_failed else EXIT_OK


def _steps_to_threshold(evals, threshold: float, consecutive: int = 3):
    streak = 0
    for i, (step, ret, _acc, _succ) in enumerate(evals):
        streak = streak + 1 if ret >= threshold else 0
        if streak >= consecutive:
            return evals[i - consecutive + 1][0]
    return None


def _parse_seeds(text: str) -> list[int]:
    seeds = []
    for part in text.split(","):
        part = part.strip()
        if ".." in part:
            lo, hi = part.split("..")
            seeds.extend(range(int(lo), int(hi) + 1))
        elif part:
            seeds.append(int(part))
    if not seeds:
        raise InputError("no seeds given")
    return seeds


# --- entry point ---------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="covertpath",
        description="Covert channel path selection: simulate, solve, learn.",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("gen", help="generate a scenario file")
    p.add_argument("--config", help="GenConfig JSON file")
    p.add_argument("--seed", type=int)
    p.add_argument("--nodes", type=int)
    p.add_argument("--k-max", dest="k_max", type=int)
    p.add_argument("--slots", help="slot count range LO:HI")
    p.add_argument("--wardens", type=int)
    p.add_argument("--tau", type=float)
    p.add_argument("--feasible-fraction", dest="feasible_fraction", type=float)
    p.add_argument("--arena-side", dest="arena_side", type=float)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_gen)

    p = sub.add_parser("oracle", help="exact brute-force optimum")
    p.add_argument("scenario")
    p.add_argument("--aggregator", choices=("sum", "min"), default="sum")
    p.add_argument("--max-hops", dest="max_hops", type=int)
    p.add_argument("--no-prune", dest="no_prune", action="store_true")
    p.add_argument("--out")
    p.set_defaults(func=cmd_oracle)

    p = sub.add_parser("train", help="train one agent on a scenario")
    p.add_argument("scenario")
    p.add_argument("--algo", choices=("sac", "dsac"), required=True)
    p.add_argument("--steps", type=int, default=100_000)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--aggregator", choices=("sum", "min"), default="sum")
    p.add_argument("--eval-every", dest="eval_every", type=int, default=1000)
    p.add_argument("--eval-episodes", dest="eval_episodes", type=int, default=20)
    p.add_argument("--out-dir", dest="out_dir", required=True)
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("compare", help="paired SAC/DSAC experiment")
    p.add_argument("scenario", nargs="?")
    p.add_argument("--gen-seed", dest="gen_seed", type=int,
                   help="generate the default scenario with this seed instead "
                        "of loading a file")
    p.add_argument("--algos", default="sac,dsac")
    p.add_argument("--seeds", default="1..5", help="e.g. 1..5 or 1,7,9")
    p.add_argument("--steps", type=int, default=100_000)
    p.add_argument("--aggregator", choices=("sum", "min"), default="sum")
    p.add_argument("--eval-every", dest="eval_every", type=int, default=1000)
    p.add_argument("--out-dir", dest="out_dir", required=True)
    p.set_defaults(func=cmd_compare)

    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.func(args)
    except InputError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_INPUT


if __name__ == "__main__":
    sys.exit(main())
