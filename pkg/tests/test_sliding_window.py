import time

import numpy as np
import pytest

from helpers import DomainError, ParameterError, relative_error
from oracle import ExactLinear, ExactState
from sliding_window import (
    SignLinear,
    SWHistogram,
    SWParams,
    new_histogram,
    smooth_params,
    smooth_spec,
    sw_entropy,
    sw_fp_large,
    sw_fp_small,
    sw_ingest,
    sw_query,
)


def _exact_histogram(eps, p, horizon, universe, **kwargs):
    params = SWParams(eps, p, horizon=horizon, universe=universe, **kwargs)
    return new_histogram(params, family=ExactLinear(params))


def test_smooth_params():
    assert smooth_params(2, 0.1) == pytest.approx((0.1, 0.005))
    assert smooth_params(0.5, 0.1) == (0.1, 0.1)
    assert smooth_spec(1.5, 0.2).tag == "F1.5"
    with pytest.raises(ParameterError):
        smooth_params(0)


def test_params_validation():
    with pytest.raises(ParameterError):
        SWParams(0.1, 2.5)
    with pytest.raises(ParameterError):
        SWParams(0.1, 3)
    with pytest.raises(ParameterError):
        SWParams(0.1, 2.0, horizon=0)


def test_merge_ratios():
    assert SWParams(0.1, 2.0).merge_ratio == pytest.approx(1 - 1 / 16)
    assert SWParams(0.1, 0.5).merge_ratio == pytest.approx(0.9)
    assert SWParams(0.1, 3, universe=10).merge_ratio == pytest.approx(1 - 1 / 512)


def test_guess_count_only_for_large_p():
    assert SWParams(0.1, 2.0).guess_count == 1
    assert SWParams(0.1, 3, universe=10, stream_length=256).guess_count == 24


def test_ingest_validation():
    hist = _exact_histogram(0.2, 2.0, 10, 5)
    with pytest.raises(DomainError):
        hist.ingest(0, -1)
    with pytest.raises(DomainError):
        hist.ingest(5, 1)
    with pytest.raises(ParameterError):
        hist.query(11)


def test_empty_histogram_reads_zero():
    assert _exact_histogram(0.2, 2.0, 10, 5).query(4) == 0.0


@pytest.mark.parametrize("p", [0.5, 1.0, 2.0])
def test_exact_family_error_comes_only_from_the_last_block(p, zipf_stream):
    hist = _exact_histogram(0.2, p, 100, 50)
    state = ExactState()
    for t, (item, delta) in enumerate(zipf_stream(n=50, m=400), start=1):
        sw_ingest(hist, (item, delta))
        state.update(item, delta)
        if t % 50 == 0:
            for W in (1, 37, 100):
                assert relative_error(sw_query(hist, W), state.window_moment(p, W)) <= 0.2


def test_window_of_one_and_whole_stream_are_exact(zipf_stream):
    hist = _exact_histogram(0.2, 2.0, 100, 50)
    state = ExactState()
    for item, delta in zipf_stream(n=50, m=60):
        hist.ingest(item, delta)
        state.update(item, delta)
    assert hist.query(1) == state.window_moment(2.0, 1)
    assert hist.query(100) == state.moment(2.0)


def test_boundaries_are_thinned(zipf_stream):
    hist = _exact_histogram(0.3, 2.0, 200, 50)
    for update in zipf_stream(n=50, m=400):
        hist.ingest(*update)
    assert len(hist.boundaries) < hist.t - hist.boundaries[0].time + 1
    assert hist.suffixes[-1].time == hist.t
    assert hist.boundaries[0].time <= hist.t - 200 + 1


def test_query_report_lists_levels(zipf_stream):
    hist = _exact_histogram(0.3, 2.0, 100, 50)
    for update in zipf_stream(n=50, m=150):
        hist.ingest(*update)
    report = hist.query_report(80)
    assert report["estimate"] == hist.query(80)
    assert report["window"] == 80
    assert report["suffix"] <= hist.t - 80 + 1
    if report["levels"]:
        assert report["levels"][0]["boundaries"][0] == report["suffix"]


def test_heavy_correction_makes_single_item_windows_exact():
    hist = _exact_histogram(0.5, 3, 30, 10, stream_length=100)
    for _ in range(80):
        hist.ingest(4, 1)
    assert 4 in hist.heavy
    for W in (1, 7, 30):
        assert sw_fp_large(hist, W) == pytest.approx(float(W) ** 3)


def test_large_p_entry_points_check_the_mode():
    small = _exact_histogram(0.5, 2.0, 10, 5)
    large = _exact_histogram(0.5, 3, 10, 5, stream_length=50)
    with pytest.raises(ParameterError):
        sw_fp_large(small, 3)
    with pytest.raises(ParameterError):
        sw_fp_small(large, [(1, 1)], 3)
    with pytest.raises(ParameterError):
        sw_entropy(small, 3)


def test_sw_fp_small_ingests_then_queries():
    hist = _exact_histogram(0.5, 1.0, 10, 5)
    assert sw_fp_small(hist, [(1, 1), (2, 1), (1, 1)], 2) == 2.0


def test_sign_sketch_windows(master_seed, zipf_stream):
    params = SWParams(0.3, 2.0, horizon=100, stream_length=300)
    hist = new_histogram(params, master_seed)
    assert isinstance(hist.family, SignLinear)
    state = ExactState()
    errors = []
    for t, update in enumerate(zipf_stream(n=50, m=300), start=1):
        hist.ingest(*update)
        state.update(*update)
        if t >= 100 and t % 20 == 0:
            errors.append(relative_error(hist.query(100), state.window_moment(2.0, 100)))
    assert np.mean(np.array(errors) <= 0.3) >= 0.7


def test_checkpoint_resumes_identically(master_seed, tmp_path, zipf_stream):
    params = SWParams(0.5, 2.0, horizon=50, stream_length=200)
    hist = new_histogram(params, master_seed)
    updates = zipf_stream(n=30, m=120)
    for update in updates[:80]:
        hist.ingest(*update)
    path = tmp_path / "hist.npz"
    hist.save(path)
    resumed = SWHistogram.load(path)
    for update in updates[80:]:
        hist.ingest(*update)
        resumed.ingest(*update)
    assert resumed.t == hist.t
    assert resumed.query(50) == pytest.approx(hist.query(50))


def test_entropy_window(master_seed):
    params = SWParams(0.5, 1.0, horizon=64, stream_length=200)
    hist = new_histogram(params, master_seed, entropy=True)
    for t in range(128):
        hist.ingest(t % 8, 1)
    assert sw_entropy(hist, 64) == pytest.approx(3.0, abs=0.5)


@pytest.mark.parametrize("p", [0.5, 1.5])
def test_stable_sketch_windows(master_seed, zipf_stream, p):
    params = SWParams(0.3, p, horizon=100, stream_length=300)
    hist = new_histogram(params, master_seed)
    state = ExactState()
    errors = []
    for t, update in enumerate(zipf_stream(n=50, m=300), start=1):
        hist.ingest(*update)
        state.update(*update)
        if t >= 100 and t % 20 == 0:
            errors.append(relative_error(sw_query(hist, 100), state.window_moment(p, 100)))
    assert np.mean(np.array(errors) <= 0.3) >= 0.7


def test_exact_family_large_moment_windows(zipf_stream):
    hist = _exact_histogram(0.25, 3, 100, 50, stream_length=400)
    state = ExactState()
    checks = []
    for t, (item, delta) in enumerate(zipf_stream(n=50, m=400), start=1):
        sw_ingest(hist, (item, delta))
        state.update(item, delta)
        if t % 50 == 0:
            for W in (10, 60, 100):
                checks.append(relative_error(sw_fp_large(hist, W), state.window_moment(3, W)) <= 0.25)
    assert np.mean(checks) >= 0.8


def test_large_moment_sketch_windows(master_seed, zipf_stream):
    params = SWParams(0.25, 3, horizon=200, universe=200, stream_length=800)
    hist = new_histogram(params, master_seed)
    state = ExactState()
    errors = []
    started = time.perf_counter()
    for t, update in enumerate(zipf_stream(n=200, m=800), start=1):
        hist.ingest(*update)
        state.update(*update)
        if t >= 200 and t % 50 == 0:
            errors.append(relative_error(sw_fp_large(hist, 200), state.window_moment(3, 200)))
    assert time.perf_counter() - started < 120
    assert len(hist.boundaries) < 800
    assert np.mean(np.array(errors) <= 0.25) >= 0.7
