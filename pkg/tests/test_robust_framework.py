import math
import time

import numpy as np
import pytest

from helpers import CapacityError, DomainError, ParameterError, RevealError, relative_error
from oracle import ExactState, OracleFamily
from rand_core import Seed
from robust_framework import (
    RevealLog,
    RobustHeavyHitters,
    RobustLedger,
    RobustParams,
    audit_reveals,
    estimate_f,
    flip_number_bound,
    lsb,
    numbits,
    robust_heavy_hitters,
    robust_step,
    robust_turnstile_step,
    space_accounting,
)


def _oracle_ledger(eps=0.5, turnstile=False, twist_budget=0):
    params = RobustParams(eps, "F2", twist_budget=twist_budget)
    return RobustLedger(params, Seed(1), OracleFamily(), turnstile=turnstile)


def test_lsb():
    assert lsb(6, 1) == 2
    assert lsb(6, 2) == 3
    assert lsb(8, 1) == 4
    with pytest.raises(DomainError):
        lsb(6, 3)
    with pytest.raises(DomainError):
        lsb(0)


def test_numbits():
    assert numbits(6) == 2
    assert numbits(0) == 0
    with pytest.raises(DomainError):
        numbits(-1)


def test_flip_number_bound():
    assert flip_number_bound(0.1, 1000) == 101
    assert flip_number_bound(0.1, 1000, p=3) == math.ceil(30 * math.log2(1000)) + 1


def test_params_validation():
    with pytest.raises(ParameterError):
        RobustParams(0.1, "FpSmall", p=2.0)
    with pytest.raises(ParameterError):
        RobustParams(0.1, "FpLarge", p=3)
    with pytest.raises(ParameterError):
        RobustParams(0.1, "F2", twist_budget=-1)
    assert RobustParams(0.1, "F2", p=7).p == 2.0
    assert RobustParams(0.1, "F0").p == 0.0


def test_gamma_doubles_per_level_until_one():
    params = RobustParams(0.2, "F2")
    assert params.gamma(1) == pytest.approx(0.025)
    assert params.gamma(2) == pytest.approx(0.05)
    assert params.gamma(params.levels + 3) == 1.0


def test_space_scales_like_inverse_eps_squared():
    grid = (0.2, 0.1, 0.05)
    rows = [space_accounting(RobustParams(eps, "F2"))["stack_rows"] for eps in grid]
    slope = np.polyfit(np.log([1.0 / e for e in grid]), np.log(rows), 1)[0]
    assert 1.8 <= slope <= 2.2


def test_space_accounting_fields():
    report = space_accounting(RobustParams(0.2, "FpSmall", p=1.5))
    assert len(report["level_rows"]) == report["levels"]
    assert all(r % 3 == 0 for r in report["level_rows"])
    assert report["stack_rows"] == report["tracker_rows"] + sum(report["level_rows"])


def test_reveal_log_refuses_repeats(tmp_path):
    log = RevealLog()
    log.record("tracker", "a1:tracker:0", 3, 4.0)
    with pytest.raises(RevealError):
        log.record("block", "a1:tracker:0", 5, 1.0)
    assert "a1:tracker:0" in log
    log.write(tmp_path / "reveals.jsonl")
    assert (tmp_path / "reveals.jsonl").read_text().count("\n") == 1


def test_audit_reveals_reports_duplicates():
    rows = [{"instance_id": "x"}, {"instance_id": "y"}, {"instance_id": "x"}]
    assert audit_reveals([RevealLog(), rows]) == [(1, "x")]


def test_insertion_only_trace_on_single_item_stream():
    ledger = _oracle_ledger()
    outputs = [robust_step(ledger, (0, 1)) for _ in range(9)]
    assert outputs[:7] == [0.0, 4.0, 9.0, 16.0, 25.0, 36.0, 49.0]
    assert outputs[7] == pytest.approx(49.0 * (1 + 0.5 / 8))
    assert outputs[8] == 81.0
    assert (ledger.a, ledger.b, ledger.tau) == (7, 0, 8)
    assert [entry.event for entry in ledger.reveals.entries].count("block") == 1
    assert audit_reveals([ledger.reveals]) == []


def test_increment_freezes_the_revealed_block():
    ledger = _oracle_ledger()
    for _ in range(8):
        robust_step(ledger, (0, 1))
    assert (ledger.a, ledger.b, ledger.tau) == (6, 1, 7)
    assert ledger.frozen == {1: 15.0}
    assert ledger.split_times[1] == 8
    # c = 2: level 2 is live, level 1 is frozen
    assert ledger.components() == (2, [])
    assert estimate_f(ledger) == pytest.approx(49.0 + 15.0)


def test_insertion_only_rejects_deletions():
    ledger = _oracle_ledger()
    with pytest.raises(DomainError):
        robust_step(ledger, (0, -1))
    with pytest.raises(ParameterError):
        robust_turnstile_step(ledger, (0, 1))


def test_turnstile_needs_linear_kind():
    with pytest.raises(ParameterError):
        RobustLedger(RobustParams(0.5, "F0"), Seed(1), OracleFamily(), turnstile=True)


def test_turnstile_trace_rise_then_fall():
    ledger = _oracle_ledger(turnstile=True, twist_budget=2)
    deltas = [1, 1, 1, -1, -1]
    outputs = [robust_turnstile_step(ledger, (0, d)) for d in deltas]
    assert outputs[:3] == [0.0, 4.0, 9.0]
    # a sharp drop re-anchors one step below the published level
    assert outputs[3] == pytest.approx(9.0 * (1 - 0.5 / 8))
    assert ledger.Z[1] == 1.0
    assert outputs[4] == 1.0
    assert (ledger.a, ledger.b, ledger.anchor_b, ledger.tau) == (1, 0, 0, 4)
    assert ledger.offset == 0.0


def test_turnstile_runs_out_of_trackers_without_twist_budget():
    ledger = _oracle_ledger(turnstile=True)
    for d in (1, 1, -1, -1):
        robust_turnstile_step(ledger, (0, d))
    assert ledger.a == 0
    with pytest.raises(CapacityError):
        robust_turnstile_step(ledger, (0, 1))


def test_ingest_checks_universe():
    params = RobustParams(0.5, "F2", universe=10)
    ledger = RobustLedger(params, Seed(1), OracleFamily())
    with pytest.raises(DomainError):
        robust_step(ledger, (10, 1))


def test_oracle_ledger_stays_accurate(zipf_stream):
    ledger = _oracle_ledger(eps=0.25)
    state = ExactState()
    worst = 0.0
    for t, update in enumerate(zipf_stream(n=50, m=600), start=1):
        output = robust_step(ledger, update)
        state.update(*update)
        if t >= 200:
            worst = max(worst, relative_error(output, state.moment(2)))
    assert worst <= 0.25


def test_sketch_ledger_stays_accurate(master_seed, zipf_stream):
    ledger = RobustLedger(RobustParams(0.5, "F2"), master_seed)
    state = ExactState()
    worst = 0.0
    for t, update in enumerate(zipf_stream(n=50, m=400), start=1):
        output = robust_step(ledger, update)
        state.update(*update)
        if t >= 150:
            worst = max(worst, relative_error(output, state.moment(2)))
    assert worst <= 0.5
    assert audit_reveals([ledger.reveals]) == []


def test_outputs_never_fall_on_insertion_only_streams(zipf_stream):
    ledger = _oracle_ledger(eps=0.3)
    outputs = [robust_step(ledger, update) for update in zipf_stream(n=30, m=400)]
    assert all(b >= a for a, b in zip(outputs, outputs[1:]))


def test_robust_heavy_hitters_finds_dominant_item(master_seed):
    rng = np.random.default_rng(3)
    hitters = RobustHeavyHitters(0.5, universe=50, seed=master_seed, family=OracleFamily())
    exact = 0
    for t in range(200):
        item = 7 if t % 2 == 0 else int(rng.integers(0, 50))
        exact += item == 7
        hitters.update(item, 1)
    found = robust_heavy_hitters(hitters)
    assert found[0][0] == 7
    assert abs(found[0][1] - exact) <= 10
    assert all(item == 7 for item, _ in found)


@pytest.mark.parametrize("eps,m", [(0.25, 1500), (0.1, 3000)])
def test_small_eps_sketch_ledger_stays_accurate(master_seed, zipf_stream, eps, m):
    ledger = RobustLedger(RobustParams(eps, "F2"), master_seed)
    state = ExactState()
    worst = 0.0
    started = time.perf_counter()
    for t, update in enumerate(zipf_stream(n=10 ** 4, m=m, s=1.1), start=1):
        output = robust_step(ledger, update)
        state.update(*update)
        if t >= m // 4:
            worst = max(worst, relative_error(output, state.moment(2)))
    assert time.perf_counter() - started < 60
    assert worst <= eps
    assert audit_reveals([ledger.reveals]) == []


def test_revealed_members_stop_taking_updates(master_seed, zipf_stream):
    ledger = RobustLedger(RobustParams(0.25, "F2"), master_seed)
    for update in zipf_stream(n=200, m=800):
        robust_step(ledger, update)
    assert ledger.reveals.entries
    assert any(not bank.active.all() for bank in ledger.banks.banks)
    assert ledger.banks.rows < sum(bank.total for bank in ledger.banks.banks)
    for epoch in ledger.epochs.values():
        for member in epoch.loose:
            assert member.instance_id not in ledger.revealed


def test_robust_heavy_hitters_with_sketches(master_seed):
    rng = np.random.default_rng(5)
    hitters = RobustHeavyHitters(0.5, universe=50, seed=master_seed)
    counts = np.zeros(50)
    for t in range(400):
        item = 7 if t % 2 == 0 else int(rng.integers(0, 50))
        counts[item] += 1
        hitters.update(item, 1)
    l2 = math.sqrt(float(counts @ counts))
    found = robust_heavy_hitters(hitters)
    assert found and found[0][0] == 7
    for item, estimate in found:
        assert abs(estimate - counts[item]) <= 0.25 * l2
        assert counts[item] >= 0.25 * l2


def test_turnstile_trace_rise_fall_rise():
    ledger = _oracle_ledger(turnstile=True, twist_budget=2)
    # (delta, output, a, b, tau) after each step
    expected = [
        (1, 0.0, 0, 0, 0),
        (1, 4.0, 1, 0, 1),
        (1, 9.0, 2, 0, 2),
        (-1, 9.0 * (1 - 0.5 / 8), 2, -1, 3),
        (-1, 1.0, 1, 0, 4),
        (1, 4.0, 2, 0, 5),
        (1, 9.0, 3, 0, 6),
        (-1, 9.0 * (1 - 0.5 / 8), 3, -1, 7),
    ]
    for delta, output, a, b, tau in expected:
        assert robust_turnstile_step(ledger, (0, delta)) == pytest.approx(output)
        assert (ledger.a, ledger.b, ledger.tau) == (a, b, tau)
    assert audit_reveals([ledger.reveals]) == []
