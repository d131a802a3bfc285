import math

import numpy as np
import pytest
from scipy import special

from helpers import DomainError, IncompatibleSketchError, ParameterError, StreamFormatError
from rand_core import Seed, derive_seed
from sketches import (
    BankGroup,
    BucketSignSketch,
    CountSketchTable,
    F0Sketch,
    FpLargeTracker,
    SignSketch,
    SketchBank,
    StableSketch,
    TrackerConfig,
    c_qp,
    countsketch_query,
    dump_sketch,
    f0_estimate,
    f2_estimate,
    fp_large_tracker,
    fp_strong_track,
    l2_heavy_hitters,
    li_fp_estimate,
    load_sketch,
    xi_constant,
)


def test_single_item_f2_is_exact(master_seed):
    sketch = SignSketch(64, master_seed)
    sketch.update(9, 5)
    assert f2_estimate(sketch) == pytest.approx(25.0)


def test_f2_estimate_on_spread_vector(master_seed, exact_oracle_factory, zipf_stream):
    updates = zipf_stream(n=300, m=3000)
    sketch = SignSketch(2000, master_seed)
    for item, delta in updates:
        sketch.update(item, delta)
    exact = exact_oracle_factory(updates).moment(2)
    assert abs(f2_estimate(sketch) - exact) <= 0.15 * exact


def test_update_many_matches_single_updates(master_seed):
    a = SignSketch(32, master_seed)
    b = SignSketch(32, master_seed)
    for item in (1, 2, 2, 7):
        a.update(item)
    b.update_many([1, 2, 2, 7])
    assert np.allclose(a.y, b.y)


def test_minus_and_merge_need_matching_sketches(master_seed):
    a = SignSketch(16, master_seed)
    b = SignSketch(16, derive_seed(master_seed, "other"))
    with pytest.raises(IncompatibleSketchError):
        a.minus(b)
    before = a.snapshot()
    a.update(3, 2)
    assert f2_estimate(a.minus(before)) == pytest.approx(4.0)


def test_truncated_keeps_scale(master_seed):
    sketch = SignSketch(40, master_seed)
    sketch.update(1, 3)
    assert f2_estimate(sketch.truncated(10)) == pytest.approx(9.0)


def test_bank_views_share_the_accumulator(master_seed):
    bank = SketchBank("sign", master_seed, [8, 16, 4])
    bank.update(3, 2)
    assert [v.rows for v in bank.views] == [8, 16, 4]
    for view in bank.views:
        assert f2_estimate(view) == pytest.approx(4.0)
    assert np.shares_memory(bank.views[1].y, bank.y)


def test_bank_rejects_unknown_family(master_seed):
    with pytest.raises(ParameterError):
        SketchBank("count", master_seed, [4])


def test_stable_rows_must_be_multiple_of_q(master_seed):
    with pytest.raises(ParameterError):
        StableSketch(10, 1.0, master_seed, q=3)


def test_li_estimate_of_three_four(master_seed):
    sketch = StableSketch(3000, 1.0, master_seed, q=3)
    sketch.update(0, 3)
    sketch.update(1, 4)
    assert li_fp_estimate(sketch) == pytest.approx(7.0, rel=0.2)


def test_c_qp_gamma_pole():
    with pytest.raises(ParameterError):
        c_qp(1.0, 1.0)
    with pytest.raises(ParameterError):
        c_qp(3.0, 2.5)


def test_c_qp_closed_forms():
    # q = 3, p = 1: (2/pi * G(2/3) G(1/3) / 2) ** -3
    assert c_qp(3, 1.0) == pytest.approx((2.0 / math.sqrt(3.0)) ** -3, rel=1e-9)
    assert c_qp(1.5, 1.0) == pytest.approx(2.0 ** -1.5, rel=1e-9)
    assert xi_constant(3, 1.0) > 1.0


def test_xi_is_the_c_qp_ratio_not_its_reciprocal():
    assert xi_constant(3, 1.0) == pytest.approx(c_qp(3, 1.0) / c_qp(1.5, 1.0), rel=1e-12)
    assert xi_constant(3, 1.0) == pytest.approx((3.0 * math.sqrt(3.0) / 8.0) * 2.0 ** 1.5, rel=1e-9)
    # Gaussian rows: E z**2 = c_qp(4, 2)**2 * (E|y|)**4 gives xi = pi / G(3/4)**4
    assert xi_constant(4, 2.0) == pytest.approx(math.pi / special.gamma(0.75) ** 4, rel=1e-9)


def test_tracker_config_groups_grow_with_checkpoints():
    pointwise = TrackerConfig(0.1)
    strong = TrackerConfig(0.1, mode="strong-tracking", checkpoints=1000)
    assert strong.groups() > pointwise.groups()
    assert pointwise.rows(3) % 3 == 0
    with pytest.raises(ParameterError):
        TrackerConfig(0.1, mode="sometimes")


def test_strong_track_records_each_checkpoint(master_seed):
    sketch = SignSketch(64, master_seed)
    estimates = fp_strong_track(sketch, [(4, 1)] * 6, [2, 4, 6])
    assert estimates == pytest.approx([4.0, 16.0, 36.0])
    with pytest.raises(DomainError):
        fp_strong_track(sketch, [(4, -1)], [1])


def test_f0_exact_below_capacity(master_seed):
    sketch = F0Sketch(64, master_seed)
    for item in list(range(10)) * 3:
        sketch.update(item)
    assert f0_estimate(sketch) == 10.0


def test_f0_estimate_above_capacity(master_seed):
    sketch = F0Sketch(400, master_seed)
    for item in range(2000):
        sketch.update(item)
    assert f0_estimate(sketch) == pytest.approx(2000, rel=0.35)


def test_f0_is_insertion_only(master_seed):
    with pytest.raises(DomainError):
        F0Sketch(8, master_seed).update(1, -1)


def test_countsketch_point_query_and_heavy_hitters(master_seed):
    table = CountSketchTable.for_accuracy(0.1, master_seed, universe=300)
    assert table.rows % 2 == 1
    table.update(7, 100)
    for item in range(100, 300):
        table.update(item)
    assert abs(countsketch_query(table, 7) - 100) <= 5
    heavy = l2_heavy_hitters(table, table.f2_estimate(), 0.3)
    assert heavy[0][0] == 7
    assert all(item == 7 for item, _ in heavy)


def test_countsketch_query_many_matches_single(master_seed):
    table = CountSketchTable(5, 64, master_seed, universe=50)
    for item in (1, 1, 2, 30):
        table.update(item)
    many = table.query_many()
    assert many[1] == pytest.approx(countsketch_query(table, 1))
    assert table.query_many([30])[0] == pytest.approx(countsketch_query(table, 30))


def test_fp_large_single_item_is_exact(master_seed):
    tracker = FpLargeTracker(3, 0.2, 50, master_seed)
    tracker.update(11, 10)
    assert tracker.estimate() == pytest.approx(1000.0)


def test_fp_large_zipf_stream(master_seed, zipf_stream, exact_oracle_factory):
    updates = zipf_stream(n=200, m=2000, s=1.5)
    estimate = fp_large_tracker(updates, 3, 0.2, 0.1, 200, master_seed)
    exact = exact_oracle_factory(updates).moment(3)
    assert estimate == pytest.approx(exact, rel=0.3)


def test_fp_large_parameter_checks(master_seed):
    with pytest.raises(ParameterError):
        FpLargeTracker(2.5, 0.2, 50, master_seed)
    with pytest.raises(ParameterError):
        FpLargeTracker(3, 0.2, None, master_seed)


def test_dump_and_load_sign_sketch(master_seed):
    sketch = SignSketch(12, master_seed)
    sketch.update(5, 3)
    clone = load_sketch(dump_sketch(sketch))
    assert np.array_equal(clone.y, sketch.y)
    clone.update(5, 1)
    sketch.update(5, 1)
    assert np.allclose(clone.y, sketch.y)


def test_load_rejects_bad_blobs():
    with pytest.raises(StreamFormatError):
        load_sketch(b"XX")
    with pytest.raises(StreamFormatError):
        load_sketch(b"NOPE" + bytes(20))


def test_seed_lineage_survives_serialization():
    seed = derive_seed(Seed(1), "bank")
    clone = load_sketch(dump_sketch(F0Sketch(4, seed)))
    assert clone.seed == seed


def test_bucket_sketch_f2_on_spread_vector(master_seed, exact_oracle_factory, zipf_stream):
    updates = zipf_stream(n=300, m=3000)
    sketch = BucketSignSketch(2000, master_seed)
    for item, delta in updates:
        sketch.update(item, delta)
    exact = exact_oracle_factory(updates).moment(2)
    assert abs(f2_estimate(sketch) - exact) <= 0.15 * exact
    assert np.count_nonzero(sketch.y) <= 300


def test_retired_bank_views_stop_moving(master_seed):
    bank = SketchBank("sign", master_seed, [8, 16, 4])
    bank.update(3, 2)
    bank.retire(bank.views[1])
    bank.update(3, 5)
    assert f2_estimate(bank.views[0]) == pytest.approx(49.0)
    assert f2_estimate(bank.views[1]) == pytest.approx(4.0)
    assert bank.live_total == 12
    bank.retire(bank.views[1])
    assert bank.live_total == 12


def test_bank_group_matches_separate_updates(master_seed):
    grouped = [SketchBank("sign", derive_seed(master_seed, f"b{i}"), [32, 8]) for i in range(3)]
    alone = [SketchBank("sign", derive_seed(master_seed, f"b{i}"), [32, 8]) for i in range(3)]
    group = BankGroup()
    for bank in grouped:
        group.add(bank)
    grouped[1].retire(grouped[1].views[0])
    alone[1].retire(alone[1].views[0])
    for item in (1, 5, 5, 40, 7):
        group.update(item, 2)
        for bank in alone:
            bank.update(item, 2)
    for a, b in zip(grouped, alone):
        assert np.allclose(a.y, b.y)
    group.discard(grouped[2])
    group.update(9)
    assert np.allclose(grouped[2].y, alone[2].y)
    assert group.rows == 32 + 8 + 8
