#!/usr/bin/env python3
"""Seeded acceptance sweeps: one CSV row per (check, seed), plus an HTML summary."""

import argparse
import math
import os
import sys
from concurrent.futures import ProcessPoolExecutor
from datetime import date

import numpy as np
import pandas as pd

SCRIPT_DIR = os.path.dirname(os.path.abspath(__file__))
PROJECT_DIR = os.path.dirname(SCRIPT_DIR)
sys.path.insert(0, PROJECT_DIR)

from adversary import OutputClimber, PlainSketchTarget, RobustTarget, generate_stream, run_duel  # noqa: E402
from diff_estimators import DEDimension, new_block  # noqa: E402
from helpers import config_value, configure_logging, relative_error  # noqa: E402
from oracle import ExactState, OracleFamily, exact_moment, frequencies, smoothness_check, twist_number  # noqa: E402
from rand_core import Seed, derive_seed, stable_column  # noqa: E402
from robust_framework import (  # noqa: E402
    RobustEntropy,
    RobustHeavyHitters,
    RobustLedger,
    RobustParams,
    audit_reveals,
    robust_heavy_hitters,
    robust_step,
    robust_turnstile_step,
    space_accounting,
)
from sketches import c_qp, xi_constant  # noqa: E402
from sliding_window import SWParams, new_histogram, sw_entropy  # noqa: E402

REPORT_DIR = os.path.join(PROJECT_DIR, str(config_value("report_dir", "reports")))

SCALES = {
    # (m, n, checkpoints, duel steps, window)
    "desk": (2000, 500, 20, 1000, 200),
    "full": (100000, 10000, 100, 10000, 1000),
}


def _seed(index):
    return derive_seed(Seed.parse(config_value("seed", "0")), f"acceptance{index}")


def robust_f2_accuracy(index, scale, eps):
    m, n, checkpoints, _, _ = SCALES[scale]
    seed = _seed(index)
    updates = generate_stream("zipf", n, m, seed, s=1.1)
    ledger = RobustLedger(RobustParams(eps, "F2"), seed)
    state = ExactState()
    marks = set(np.linspace(1, m, checkpoints).round().astype(int).tolist())
    worst = 0.0
    for t, update in enumerate(updates, start=1):
        estimate = robust_step(ledger, update)
        state.update(*update)
        if t in marks:
            worst = max(worst, relative_error(estimate, state.moment(2)))
    return {
        "check": "robust_f2_accuracy",
        "seed": index,
        "value": worst,
        "passed": worst <= eps,
        "duplicate_reveals": len(audit_reveals([ledger.reveals])),
    }


def li_calibration(index, scale, eps):
    seed = _seed(index)
    q = int(config_value("q", 3))
    draws = 10000
    y = 3 * stable_column(derive_seed(seed, "li3"), 0, draws * q, 1.0) + 4 * stable_column(derive_seed(seed, "li4"), 0, draws * q, 1.0)
    z = c_qp(q, 1.0) * np.prod(np.abs(y.reshape(-1, q)) ** (1.0 / q), axis=1)
    xi = xi_constant(q, 1.0)
    mean_ok = abs(z.mean() - 7.0) <= 0.02 * 7.0
    var_ok = z.var() <= 1.1 * (xi ** 2 - 1.0) * 49.0
    return {"check": "li_calibration", "seed": index, "value": float(z.mean()), "passed": bool(mean_ok and var_ok)}


def sliding_accuracy(index, scale, eps, p=2.0):
    m, n, checkpoints, _, window = SCALES[scale]
    seed = _seed(index)
    universe = None
    if p > 2:
        eps, n = 0.25, 200
        universe = n
    updates = generate_stream("zipf", n, m, seed, s=1.1)
    hist = new_histogram(SWParams(eps, p, horizon=window, universe=universe, stream_length=m), seed)
    state = ExactState()
    marks = set(np.linspace(window, m, checkpoints).round().astype(int).tolist())
    worst = 0.0
    for t, (item, delta) in enumerate(updates, start=1):
        hist.ingest(item, delta)
        state.update(item, delta)
        if t in marks:
            worst = max(worst, relative_error(hist.query(window), state.window_moment(p, window)))
    return {"check": f"sliding_f{p:g}", "seed": index, "value": worst, "passed": worst <= eps}


def duel(index, scale, eps, plain=False):
    _, n, _, steps, _ = SCALES[scale]
    seed = _seed(index)
    target = PlainSketchTarget(eps, seed) if plain else RobustTarget(RobustParams(eps, "F2"), seed)
    transcript = run_duel(target, OutputClimber(n), steps, seed)
    summary = transcript.summary()
    bound = 3 * eps if plain else eps
    passed = summary["max_rel_error"] > bound if plain else summary["max_rel_error"] <= bound
    return {
        "check": "duel_plain" if plain else "duel_robust",
        "seed": index,
        "value": summary["max_rel_error"],
        "passed": passed and summary["halted"] is None,
        "duplicate_reveals": summary["duplicate_reveals"],
    }


def space_scaling():
    grid = (0.2, 0.1, 0.05)
    rows = [space_accounting(RobustParams(eps, "F2"))["stack_rows"] for eps in grid]
    slope = float(np.polyfit(np.log([1.0 / e for e in grid]), np.log(rows), 1)[0])
    return {"check": "space_scaling", "seed": -1, "value": slope, "passed": 1.8 <= slope <= 2.2}


def oracles(eps=0.1):
    updates = generate_stream("uniform", 100, 1000, _seed(0))
    twist = twist_number(updates, 2.0, eps)
    bound = int(config_value("practical_constant", 8)) / eps * np.log2(1000)
    lemma = smoothness_check(2.0, 0.5, 0.125, universe=2, length=7)
    claim = smoothness_check(2.0, 0.25, 0.25, universe=2, length=6)
    return [
        {"check": "twist_bound", "seed": -1, "value": twist.value, "passed": twist.value <= bound},
        {"check": "smoothness_f2", "seed": -1, "value": lemma.checked, "passed": lemma.passed},
        {"check": "smoothness_witness", "seed": -1, "value": claim.checked, "passed": not claim.passed},
    ]


CONTRACT_CASES = [("F2", 2.0), ("F0", 0.0), ("FpSmall", 0.5), ("FpSmall", 1.0), ("FpSmall", 1.5), ("FpLarge", 3)]

# rise, fall, rise, fall on one item under exact sub-estimators, eps = 0.5, twist budget 2:
# (delta, output, a, b, tau) after each step
TURNSTILE_TABLE = [
    (1, 0.0, 0, 0, 0),
    (1, 4.0, 1, 0, 1),
    (1, 9.0, 2, 0, 2),
    (-1, 9.0 * (1 - 0.5 / 8), 2, -1, 3),
    (-1, 1.0, 1, 0, 4),
    (1, 4.0, 2, 0, 5),
    (1, 9.0, 3, 0, 6),
    (-1, 9.0 * (1 - 0.5 / 8), 3, -1, 7),
]


def _fresh_suffix(pivot, gamma, p, start):
    target = gamma / 2 * pivot
    if p == 0:
        return [(start + i, 1) for i in range(int(target))]
    freq = max(1, math.ceil((target / 200) ** (1.0 / p)))
    count = max(1, int(target / freq ** p))
    return [(start + i, 1) for i in range(count) for _ in range(freq)]


def de_contract(index, scale, eps):
    rows = []
    for kind, p in CONTRACT_CASES:
        case_eps = 0.25 if kind == "FpLarge" else 0.1
        for gamma in (0.5, 0.125):
            seed = derive_seed(_seed(index), f"contract-{kind}-{p:g}-{gamma:g}")
            prefix = [(i, 1) for i in range(3000)] if kind == "F0" else generate_stream("zipf", 100, 600, seed, s=1.1)
            pivot = exact_moment(prefix, p)
            suffix = _fresh_suffix(pivot, gamma, p, 5000 if kind == "F0" else 100)
            exact = exact_moment(prefix + suffix, p) - pivot
            dimension = DEDimension(kind, gamma, case_eps, p=p if kind != "F0" else 2.0,
                                    universe=400 if kind == "FpLarge" else None)
            block = new_block(dimension, seed)
            for item, delta in prefix:
                block.update(item, delta)
            block.split(len(prefix))
            for item, delta in suffix:
                block.update(item, delta)
            error = abs(block.estimate() - exact) / pivot
            rows.append({"check": f"de_{kind}_p{p:g}_g{gamma:g}", "seed": index, "value": error,
                         "passed": error <= case_eps})
    return rows


def heavy_hitters(index, scale, eps):
    m, n, _, _, _ = SCALES[scale]
    seed = _seed(index)
    rng = derive_seed(seed, "planted").generator()
    background = generate_stream("uniform", n, m, seed)
    b2 = exact_moment(background, 2)
    planted = n
    count = math.ceil(2 * eps * math.sqrt(b2 / (1 - 4 * eps ** 2)))
    updates = list(background)
    for position in sorted(rng.integers(0, len(updates) + 1, size=count).tolist(), reverse=True):
        updates.insert(position, (planted, 1))
    hitters = RobustHeavyHitters(eps, universe=n + 1, seed=seed)
    state = ExactState()
    for item, delta in updates:
        hitters.update(item, delta)
        state.update(item, delta)
    l2 = math.sqrt(state.moment(2))
    freqs = frequencies(state.log)
    found = dict(robust_heavy_hitters(hitters))
    reported = planted in found and abs(found[planted] - freqs[planted]) <= eps / 2 * l2
    clean = all(freqs.get(item, 0) >= eps / 2 * l2 for item in found)
    return [
        {"check": "hh_planted", "seed": index, "value": found.get(planted, 0.0), "passed": bool(reported),
         "duplicate_reveals": len(audit_reveals([hitters.ledger.reveals]))},
        {"check": "hh_no_light_items", "seed": index, "value": len(found), "passed": bool(clean)},
    ]


def entropy_accuracy(index, scale, sliding=False):
    m, _, checkpoints, _, window = SCALES[scale]
    seed = _seed(index)
    updates = generate_stream("zipf", 1000, m, seed, s=1.2)
    eps = 0.3 if sliding else 0.25
    if sliding:
        hist = new_histogram(SWParams(eps, 1.0, horizon=window, stream_length=m), seed, entropy=True)
    else:
        robust = RobustEntropy(eps, m, seed)
    state = ExactState()
    marks = set(np.linspace(window, m, checkpoints).round().astype(int).tolist())
    worst = 0.0
    for t, (item, delta) in enumerate(updates, start=1):
        state.update(item, delta)
        if sliding:
            hist.ingest(item, delta)
        else:
            value = robust.update(item, delta)
        if t in marks:
            if sliding:
                value, exact = sw_entropy(hist, window), state.entropy(t - window + 1)
            else:
                exact = state.entropy()
            worst = max(worst, abs(value - exact))
    row = {"check": "entropy_sliding" if sliding else "entropy_robust", "seed": index, "value": worst,
           "passed": worst <= eps}
    if not sliding:
        row["duplicate_reveals"] = len(audit_reveals([robust.reveals]))
    return [row]


def turnstile_trace():
    ledger = RobustLedger(RobustParams(0.5, "F2", twist_budget=2), Seed(1), OracleFamily(), turnstile=True)
    mismatches = 0
    for delta, output, a, b, tau in TURNSTILE_TABLE:
        got = robust_turnstile_step(ledger, (0, delta))
        mismatches += not (math.isclose(got, output) and (ledger.a, ledger.b, ledger.tau) == (a, b, tau))
    return {"check": "turnstile_trace", "seed": -1, "value": mismatches, "passed": mismatches == 0}


def _job(args):
    name, index, scale, eps = args
    if name == "robust_f2_accuracy":
        return [robust_f2_accuracy(index, scale, eps)]
    if name == "li_calibration":
        return [li_calibration(index, scale, eps)]
    if name == "de_contract":
        return de_contract(index, scale, eps)
    if name == "heavy_hitters":
        return heavy_hitters(index, scale, eps)
    if name.startswith("entropy_"):
        return entropy_accuracy(index, scale, sliding=name == "entropy_sliding")
    if name.startswith("sliding_f"):
        return [sliding_accuracy(index, scale, eps, float(name[len("sliding_f"):]))]
    return [duel(index, scale, eps, plain=name == "duel_plain")]



def write_html(summary, path):
    html = f"""<!DOCTYPE html>
<html lang="en">
<head>
<meta charset="UTF-8">
<title>Acceptance sweeps</title>
<style>
  body {{ font-family: -apple-system, BlinkMacSystemFont, 'Segoe UI', Roboto, sans-serif; max-width: 960px; margin: 40px auto; padding: 0 20px; color: #333; }}
  h1 {{ border-bottom: 2px solid #2196f3; padding-bottom: 8px; }}
  table {{ border-collapse: collapse; width: 100%; margin: 16px 0; }}
  th, td {{ border: 1px solid #ddd; padding: 8px 12px; text-align: right; }}
  th {{ background: #f5f5f5; font-weight: 600; }}
  td:first-child, th:first-child {{ text-align: left; }}
  .meta {{ color: #666; font-size: 0.9em; margin: 4px 0; }}
</style>
</head>
<body>
<h1>Acceptance sweeps</h1>
<p class="meta">Run date: {date.today().strftime("%B %d, %Y")}</p>
{summary.to_html(index=False, float_format=lambda v: f"{v:.4f}")}
</body>
</html>
"""
    with open(path, "w") as f:
        f.write(html)


def main():
    parser = argparse.ArgumentParser(description=__doc__)
    parser.add_argument("--seeds", type=int, default=10)
    parser.add_argument("--scale", choices=sorted(SCALES), default="desk")
    parser.add_argument("--eps", type=float, default=0.2)
    parser.add_argument("--workers", type=int, default=int(config_value("bench_workers", 4)))
    args = parser.parse_args()
    configure_logging()

    checks = ["robust_f2_accuracy", "de_contract", "li_calibration", "sliding_f0.5", "sliding_f1", "sliding_f1.5",
              "sliding_f2", "sliding_f3", "duel_robust", "duel_plain", "heavy_hitters", "entropy_robust", "entropy_sliding"]
    jobs = [(name, i, args.scale, args.eps) for name in checks for i in range(args.seeds)]
    with ProcessPoolExecutor(max_workers=args.workers) as pool:
        rows = [row for batch in pool.map(_job, jobs) for row in batch]
    rows.append(space_scaling())
    rows.append(turnstile_trace())
    rows.extend(oracles())

    frame = pd.DataFrame(rows)
    os.makedirs(REPORT_DIR, exist_ok=True)
    csv_path = os.path.join(REPORT_DIR, "acceptance.csv")
    frame.to_csv(csv_path, index=False)
    summary = frame.groupby("check").agg(
        runs=("passed", "size"),
        pass_rate=("passed", "mean"),
        median=("value", "median"),
        worst=("value", "max"),
    ).reset_index()
    if "duplicate_reveals" in frame:
        duplicates = int(frame["duplicate_reveals"].fillna(0).sum())
        print(f"  Reveal audit: {duplicates} duplicate ids")
    html_path = os.path.join(REPORT_DIR, "acceptance.html")
    write_html(summary, html_path)
    print(f"  Wrote {len(frame)} rows to {csv_path}")
    print(f"  Summary in {html_path}")
    print(summary.to_string(index=False))


if __name__ == "__main__":
    main()
