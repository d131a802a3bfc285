#!/usr/bin/env python3
"""
Command-line surface: `python cli.py <task> [flags]`.

Every run writes one JSON report holding the merged RunConfig, the seed and
the task's results; feeding a report's config back in reproduces its
estimates exactly.
"""

import argparse
import json
import logging
import math
import sys
import time
from concurrent.futures import ProcessPoolExecutor
from dataclasses import asdict, dataclass, fields
from pathlib import Path

import numpy as np
import pandas as pd

from adversary import (
    STRATEGY_TAGS,
    PlainSketchTarget,
    RobustTarget,
    generate_stream,
    make_strategy,
    parse_generator,
    run_duel,
)
from components.report_charts import error_trace_chart, relative_error_chart, save_chart, space_scaling_chart
from helpers import (
    EXIT_IO,
    EXIT_OK,
    SCRIPT_DIR,
    DomainError,
    ParameterError,
    SketchError,
    StreamFormatError,
    config_value,
    configure_logging,
    constants_mode,
    format_seed,
    relative_error,
)
from oracle import ExactState, exact_entropy, exact_heavy_hitters, flip_number, prefix_moments, twist_number
from rand_core import Seed, derive_seed
from robust_framework import (
    TURNSTILE_KINDS,
    RobustEntropy,
    RobustHeavyHitters,
    RobustLedger,
    RobustParams,
    audit_reveals,
    flip_number_bound,
    robust_step,
    robust_turnstile_step,
    space_accounting,
)
from sliding_window import SWHistogram, SWParams, new_histogram, sw_entropy

logger = logging.getLogger("CLI")

TASKS = ("estimate", "sliding", "robust-duel", "entropy", "heavy-hitters", "oracle", "bench")
DEFAULT_GENERATOR = "zipf:1.1"


@dataclass
class RunConfig:
    task: str
    p: float = 2.0
    eps: float = 0.1
    delta: float = 0.1
    window: int = None
    universe: int = 1000
    length: int = 10000
    seed: str = None
    constants: str = None
    input: str = None
    generator: str = None
    out: str = None
    checkpoints: int = 10
    oracle: bool = True
    norm: bool = False
    adversary: str = "output-probe"
    target: str = "robust"
    twist_budget: int = None
    eps_grid: tuple = (0.2, 0.1, 0.05)
    seeds: int = 4
    save: str = None
    resume: str = None
    chart: bool = False

    def __post_init__(self):
        if self.seed is None:
            self.seed = str(config_value("seed", "0"))
        self.eps_grid = tuple(float(e) for e in self.eps_grid)

    def validate(self):
        problems = []
        if self.task not in TASKS:
            problems.append(f"task: must be one of {TASKS}")
        if not (0 < self.eps < 1):
            problems.append("eps: must lie in (0, 1)")
        if not (0 < self.delta < 1):
            problems.append("delta: must lie in (0, 1)")
        if self.p < 0:
            problems.append("p: must be nonnegative")
        if self.universe is None or self.universe < 1:
            problems.append("universe: must be positive")
        if self.length < 0:
            problems.append("length: must be nonnegative")
        if self.checkpoints < 1:
            problems.append("checkpoints: must be positive")
        if self.window is not None and self.window < 1:
            problems.append("window: must be positive")
        if self.input and self.generator:
            problems.append("input, generator: give a stream file or a generator, not both")
        if self.task == "sliding" and self.window is None:
            problems.append("window: the sliding task needs --window")
        if self.task == "robust-duel" and self.adversary not in STRATEGY_TAGS:
            problems.append(f"adversary: must be one of {STRATEGY_TAGS}")
        if self.task == "robust-duel" and self.target not in ("robust", "plain"):
            problems.append("target: must be robust or plain")
        if self.task == "robust-duel" and self.target == "plain" and self.p != 2:
            problems.append("p, target: the plain target is an F2 sketch")
        if any(not (0 < e < 1) for e in self.eps_grid):
            problems.append("eps_grid: every eps must lie in (0, 1)")
        if self.seeds < 1:
            problems.append("seeds: must be positive")
        try:
            Seed.parse(self.seed)
            constants_mode(self.constants)
        except ParameterError as exc:
            problems.append(str(exc))
        if problems:
            raise ParameterError("invalid run config: " + "; ".join(problems))
        return self

    def to_dict(self):
        data = asdict(self)
        data["eps_grid"] = list(self.eps_grid)
        data["constants"] = constants_mode(self.constants)
        return data

    @classmethod
    def from_dict(cls, data):
        known = {f.name for f in fields(cls)}
        return cls(**{k: v for k, v in data.items() if k in known})


def ingest(path, insertion_only=False, universe=None):
    """Parse `item delta` lines; blank lines and lines starting with '#' are skipped."""
    try:
        text = Path(path).read_text()
    except OSError as exc:
        raise StreamFormatError(f"cannot read stream {path}: {exc}") from exc
    updates = []
    for lineno, raw in enumerate(text.splitlines(), start=1):
        line = raw.strip()
        if not line or line.startswith("#"):
            continue
        parts = line.split()
        if len(parts) != 2:
            raise StreamFormatError(f"{path}:{lineno}: expected 'item delta', got {line!r}")
        try:
            item, delta = int(parts[0]), int(parts[1])
        except ValueError:
            raise StreamFormatError(f"{path}:{lineno}: item and delta must be integers, got {line!r}") from None
        if item < 0:
            raise StreamFormatError(f"{path}:{lineno}: item must be nonnegative, got {item}")
        if delta == 0:
            raise StreamFormatError(f"{path}:{lineno}: delta must be nonzero")
        if universe is not None and item >= universe:
            raise DomainError(f"{path}:{lineno}: item {item} outside universe [0, {universe})")
        if insertion_only and delta < 0:
            raise DomainError(f"{path}:{lineno}: negative delta {delta} in an insertion-only stream")
        updates.append((item, delta))
    return updates


def load_updates(config, insertion_only=False, seed=None):
    if config.input:
        return ingest(config.input, insertion_only, config.universe)
    kind, extra = parse_generator(config.generator or DEFAULT_GENERATOR)
    if insertion_only and kind == "delete-heavy":
        raise ParameterError(f"generator: the {config.task} task takes insertion-only streams")
    return generate_stream(kind, config.universe, config.length, seed or Seed.parse(config.seed), **extra)


def moment_kind(p):
    if p == 2:
        return "F2"
    if p == 0:
        return "F0"
    if 0 < p < 2:
        return "FpSmall"
    if float(p).is_integer() and 3 <= p <= 8:
        return "FpLarge"
    raise ParameterError(f"p must be 0, in (0, 2], or an integer in [3, 8], got {p}")


def checkpoint_times(m, k):
    if m == 0:
        return set()
    return {int(t) for t in np.unique(np.linspace(1, m, min(k, m)).round())}


def _norm(value, p, enabled):
    if not enabled or p == 0 or value is None:
        return value
    return max(float(value), 0.0) ** (1.0 / p)


def error_quantiles(errors):
    series = pd.Series([e for e in errors if e is not None and math.isfinite(e)], dtype=float)
    if series.empty:
        return {}
    quantiles = series.quantile([0.5, 0.9, 1.0])
    return {"q50": float(quantiles[0.5]), "q90": float(quantiles[0.9]), "max": float(quantiles[1.0])}


def _robust_params(config, turnstile):
    budget = config.twist_budget
    if budget is None:
        budget = int(config_value("turnstile_twist_budget", 8))
    return RobustParams(
        config.eps,
        moment_kind(config.p),
        p=config.p,
        delta=config.delta,
        constants=config.constants,
        universe=config.universe,
        twist_budget=budget if turnstile else 0,
    )


def run_estimate(config, seed):
    updates = load_updates(config, seed=seed)
    turnstile = any(delta < 0 for _, delta in updates)
    kind = moment_kind(config.p)
    if turnstile and kind not in TURNSTILE_KINDS:
        raise ParameterError(f"p: deletions need a linear kind {TURNSTILE_KINDS}, got {kind}")
    params = _robust_params(config, turnstile)
    ledger = RobustLedger(params, seed, turnstile=turnstile)
    step = robust_turnstile_step if turnstile else robust_step
    state = ExactState(insertion_only=not turnstile)
    marks = checkpoint_times(len(updates), config.checkpoints)
    points = []
    for t, update in enumerate(updates, start=1):
        estimate = step(ledger, update)
        state.update(*update)
        if t in marks:
            exact = state.moment(params.p) if config.oracle else None
            points.append(_point(t, estimate, exact, params.p, config.norm))
    return {
        "kind": kind,
        "turnstile": turnstile,
        "checkpoints": points,
        "errors": error_quantiles(p["rel_error"] for p in points),
        "accounting": space_accounting(params, turnstile),
        "rows": ledger.rows,
        "reveals": len(ledger.reveals),
        "duplicate_reveals": len(audit_reveals([ledger.reveals])),
    }


def _point(t, estimate, exact, p, norm):
    estimate, exact = _norm(estimate, p, norm), _norm(exact, p, norm)
    error = relative_error(estimate, exact) if exact is not None else None
    return {"t": t, "estimate": float(estimate), "exact": exact, "rel_error": error}


def run_sliding(config, seed):
    updates = load_updates(config, insertion_only=True, seed=seed)
    if config.window >= len(updates) and not config.resume:
        logger.info("window %d covers the %d-update stream; running the whole-stream estimate", config.window, len(updates))
        results = run_estimate(config, seed)
        results["delegated"] = "estimate"
        return results
    if config.resume:
        hist = SWHistogram.load(config.resume)
    else:
        params = SWParams(
            config.eps, config.p, horizon=config.window, delta=config.delta, constants=config.constants,
            universe=config.universe, stream_length=max(len(updates), 1),
        )
        hist = new_histogram(params, seed)
    state = ExactState()
    marks = checkpoint_times(len(updates), config.checkpoints)
    points = []
    for t, (item, delta) in enumerate(updates, start=1):
        hist.ingest(item, delta)
        state.update(item, delta)
        if t in marks:
            exact = state.window_moment(config.p, config.window) if config.oracle else None
            points.append(_point(hist.t, hist.query(config.window), exact, config.p, config.norm))
    if config.save:
        hist.save(config.save)
        logger.info("histogram saved to %s", config.save)
    return {
        "window": config.window,
        "checkpoints": points,
        "errors": error_quantiles(p["rel_error"] for p in points),
        "boundaries": len(hist.boundaries),
        "suffixes": len(hist.suffixes),
        "query": hist.query_report(min(config.window, hist.params.horizon)) if hist.t else None,
    }


def run_entropy(config, seed):
    updates = load_updates(config, insertion_only=True, seed=seed)
    m = max(len(updates), 1)
    sliding = config.window is not None and config.window < len(updates)
    if sliding:
        hist = new_histogram(
            SWParams(config.eps, 1.0, horizon=config.window, delta=config.delta, constants=config.constants, stream_length=m),
            seed, entropy=True,
        )
    else:
        robust = RobustEntropy(config.eps, m, seed, constants=config.constants)
    state = ExactState()
    marks = checkpoint_times(len(updates), config.checkpoints)
    points = []
    for t, (item, delta) in enumerate(updates, start=1):
        state.update(item, delta)
        if sliding:
            hist.ingest(item, delta)
        else:
            value = robust.update(item, delta)
        if t in marks:
            if sliding:
                value = sw_entropy(hist, config.window)
                exact = exact_entropy(state.log, max(1, t - config.window + 1)) if config.oracle else None
            else:
                exact = state.entropy() if config.oracle else None
            error = abs(value - exact) if exact is not None else None
            points.append({"t": t, "estimate": float(value), "exact": exact, "abs_error": error})
    results = {"sliding": sliding, "checkpoints": points, "errors": error_quantiles(p["abs_error"] for p in points)}
    if not sliding:
        results["reveals"] = len(robust.reveals)
        results["switches"] = robust.cursor
        results["estimators"] = len(robust.estimators)
        results["pool"] = robust.size
    return results


def run_heavy_hitters(config, seed):
    updates = load_updates(config, insertion_only=True, seed=seed)
    hh = RobustHeavyHitters(config.eps, config.universe, seed, config.delta, config.constants)
    for item, delta in updates:
        hh.update(item, delta)
    state = ExactState()
    for update in updates:
        state.update(*update)
    reported = [{"item": item, "estimate": float(f)} for item, f in hh.report()]
    results = {"reported": reported, "published_f2": hh.ledger.publish()}
    if config.oracle:
        results["exact"] = [{"item": item, "frequency": f} for item, f in exact_heavy_hitters(state.log, config.eps)]
        results["exact_l2"] = math.sqrt(state.moment(2))
    return results


def run_robust_duel(config, seed):
    universe = config.universe
    if config.target == "plain":
        target = PlainSketchTarget(config.eps, seed)
    else:
        target = RobustTarget(_robust_params(config, False), seed)
    updates = load_updates(config, insertion_only=True, seed=seed) if config.adversary == "oblivious-wrapper" else None
    adversary = make_strategy(config.adversary, universe, updates)
    transcript = run_duel(target, adversary, config.length, seed)
    path = Path(_report_path(config)).with_suffix(".jsonl")
    path.parent.mkdir(parents=True, exist_ok=True)
    transcript.write(path)
    results = {"summary": transcript.summary(), "transcript": str(path)}
    if config.chart and transcript.steps:
        chart = relative_error_chart([asdict(s) for s in transcript.steps], config.eps, f"{target.name} vs {adversary.tag}")
        results["chart"] = str(save_chart(chart, path.with_suffix(".html")))
    return results


def run_oracle(config, seed):
    updates = load_updates(config, seed=seed)
    state = ExactState(insertion_only=all(d > 0 for _, d in updates))
    for update in updates:
        state.update(*update)
    results = {
        "t": state.t,
        "moment": _norm(state.moment(config.p), config.p, config.norm),
        "heavy_hitters": [{"item": i, "frequency": f} for i, f in exact_heavy_hitters(state.log, config.eps)],
        "flip_number": flip_number(prefix_moments(state.log, config.p)[1:], config.eps),
        "flip_number_bound": flip_number_bound(config.eps, max(state.t, 2), config.p),
    }
    if state.t and state.insertion_only:
        results["entropy"] = state.entropy()
    if config.window is not None:
        results["window_moment"] = state.window_moment(config.p, config.window)
    limit = int(config_value("twist_oracle_limit", 2000))
    if state.t <= limit:
        twist = twist_number(state.log, config.p, config.eps)
        results["twist_number"] = {"value": twist.value, "method": twist.method, "verified": twist.verified}
    else:
        logger.warning("twist number skipped: m=%d exceeds twist_oracle_limit=%d", state.t, limit)
        results["twist_number"] = {"skipped": f"m={state.t} exceeds twist_oracle_limit={limit}"}
    return results


def _bench_worker(config_data, index):
    config = RunConfig.from_dict(config_data)
    seed = derive_seed(Seed.parse(config.seed), f"bench{index}")
    results = run_estimate(config, seed)
    return {
        "seed": format_seed(seed.value),
        "max_rel_error": results["errors"].get("max"),
        "reveals": results["reveals"],
        "duplicate_reveals": results["duplicate_reveals"],
    }


def run_bench(config, seed):
    kind = moment_kind(config.p)
    accounting = []
    for eps in config.eps_grid:
        params = RobustParams(eps, kind, p=config.p, delta=config.delta, constants=config.constants, universe=config.universe)
        row = space_accounting(params)
        accounting.append({k: row[k] for k in ("eps", "levels", "base_rows", "tracker_rows", "stack_rows", "epoch_rows")})
    frame = pd.DataFrame(accounting)
    slope = float(np.polyfit(np.log(1.0 / frame["eps"]), np.log(frame["stack_rows"]), 1)[0]) if len(frame) > 1 else None
    workers = int(config_value("bench_workers", 4))
    data = config.to_dict()
    with ProcessPoolExecutor(max_workers=workers) as pool:
        runs = list(pool.map(_bench_worker, [data] * config.seeds, range(config.seeds)))
    errors = pd.DataFrame(runs)
    results = {
        "accounting": accounting,
        "rows_slope": slope,
        "runs": runs,
        "errors": error_quantiles(errors["max_rel_error"]) if not errors.empty else {},
        "within_eps": float((errors["max_rel_error"] <= config.eps).mean()) if not errors.empty else None,
    }
    if config.chart:
        path = Path(_report_path(config)).with_suffix(".html")
        path.parent.mkdir(parents=True, exist_ok=True)
        results["chart"] = str(save_chart(space_scaling_chart(accounting), path))
    return results


RUNNERS = {
    "estimate": run_estimate,
    "sliding": run_sliding,
    "robust-duel": run_robust_duel,
    "entropy": run_entropy,
    "heavy-hitters": run_heavy_hitters,
    "oracle": run_oracle,
    "bench": run_bench,
}


def _report_path(config):
    if config.out:
        return config.out
    report_dir = SCRIPT_DIR / str(config_value("report_dir", "reports"))
    return str(report_dir / f"{config.task}-{Seed.parse(config.seed).value:x}.json")


def run(config):
    """Execute the task and write its JSON report; returns (path, report)."""
    config.validate()
    seed = Seed.parse(config.seed)
    started = time.perf_counter()
    results = RUNNERS[config.task](config, seed)
    if config.chart and config.task in ("estimate", "sliding", "entropy") and results.get("checkpoints"):
        path = Path(_report_path(config)).with_suffix(".html")
        path.parent.mkdir(parents=True, exist_ok=True)
        results["chart"] = str(save_chart(error_trace_chart(results["checkpoints"], config.task), path))
    report = {
        "config": config.to_dict(),
        "seed": format_seed(seed.value),
        "task": config.task,
        "results": results,
        "elapsed_s": round(time.perf_counter() - started, 4),
    }
    path = Path(_report_path(config))
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(json.dumps(report, indent=2, default=float) + "\n")
    logger.info("report written to %s", path)
    return path, report


def build_parser():
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--p", type=float, default=2.0, help="moment order (0 = distinct elements)")
    common.add_argument("--eps", type=float, default=0.1)
    common.add_argument("--delta", type=float, default=0.1)
    common.add_argument("--window", type=int, default=None)
    common.add_argument("--universe", type=int, default=1000)
    common.add_argument("--length", type=int, default=10000, help="generated stream length / duel steps")
    common.add_argument("--seed", default=None, help="master seed, decimal or 0x-hex")
    common.add_argument("--constants", choices=("theory", "practical"), default=None)
    common.add_argument("--input", default=None, help="stream file, one 'item delta' per line")
    common.add_argument("--generator", default=None, help="kind[:param], e.g. zipf:1.1, bursty:20")
    common.add_argument("--out", default=None, help="report path")
    common.add_argument("--checkpoints", type=int, default=10)
    common.add_argument("--twist-budget", type=int, default=None)
    common.add_argument("--norm", action="store_true", help="report the L_p norm instead of F_p")
    common.add_argument("--no-oracle", dest="oracle", action="store_false")
    common.add_argument("--chart", action="store_true", help="save an altair chart next to the report")
    common.add_argument("--log-level", default=None)

    parser = argparse.ArgumentParser(prog="cli.py", description="Difference-estimator sketches")
    sub = parser.add_subparsers(dest="task", required=True)
    sub.add_parser("estimate", parents=[common], help="robust whole-stream moment")
    sliding = sub.add_parser("sliding", parents=[common], help="moment over the last --window updates")
    sliding.add_argument("--save", default=None, help="write the histogram checkpoint (.npz)")
    sliding.add_argument("--resume", default=None, help="continue from a histogram checkpoint")
    duel = sub.add_parser("robust-duel", parents=[common], help="adaptive adversary against an estimator")
    duel.add_argument("--adversary", choices=STRATEGY_TAGS, default="output-probe")
    duel.add_argument("--target", choices=("robust", "plain"), default="robust")
    sub.add_parser("entropy", parents=[common], help="robust or sliding Shannon entropy")
    sub.add_parser("heavy-hitters", parents=[common], help="robust L2 heavy hitters")
    sub.add_parser("oracle", parents=[common], help="exact values, flip and twist numbers")
    bench = sub.add_parser("bench", parents=[common], help="space scaling and seeded error sweeps")
    bench.add_argument("--eps-grid", default="0.2,0.1,0.05")
    bench.add_argument("--seeds", type=int, default=4)
    return parser


def config_from_args(args):
    data = vars(args).copy()
    data.pop("log_level", None)
    if "eps_grid" in data:
        try:
            data["eps_grid"] = tuple(float(e) for e in str(data["eps_grid"]).split(","))
        except ValueError:
            raise ParameterError(f"eps_grid: expected comma-separated numbers, got {data['eps_grid']!r}") from None
    return RunConfig.from_dict(data)


def main(argv=None):
    parser = build_parser()
    args = parser.parse_args(argv)
    configure_logging(args.log_level)
    try:
        path, _ = run(config_from_args(args))
    except SketchError as exc:
        print(f"[CLI] error: {exc}", file=sys.stderr)
        return exc.exit_code
    except OSError as exc:
        print(f"[CLI] error: {exc}", file=sys.stderr)
        return EXIT_IO
    print(path)
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
