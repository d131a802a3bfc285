import json
import math

import pytest

from cli import RunConfig, checkpoint_times, error_quantiles, ingest, main, moment_kind, run
from helpers import EXIT_CAPACITY, EXIT_IO, EXIT_OK, EXIT_VALIDATION, DomainError, ParameterError, StreamFormatError


def _report(path):
    return json.loads(path.read_text())


def _stream(tmp_path, text, name="stream.txt"):
    path = tmp_path / name
    path.write_bytes(text.encode())
    return path


def test_ingest_skips_comments_and_accepts_crlf(tmp_path):
    path = _stream(tmp_path, "# header\r\n17 1\r\n\r\n3 2\r\n17 -1\r\n")
    assert ingest(path) == [(17, 1), (3, 2), (17, -1)]


def test_ingest_reports_the_bad_line(tmp_path):
    path = _stream(tmp_path, "1 1\n2 one\n")
    with pytest.raises(StreamFormatError, match=r"stream.txt:2"):
        ingest(path)
    with pytest.raises(StreamFormatError):
        ingest(_stream(tmp_path, "1 0\n", "zero.txt"))
    with pytest.raises(StreamFormatError):
        ingest(tmp_path / "missing.txt")


def test_ingest_domain_checks(tmp_path):
    path = _stream(tmp_path, "1 1\n2 -1\n")
    with pytest.raises(DomainError):
        ingest(path, insertion_only=True)
    with pytest.raises(DomainError):
        ingest(path, universe=2)


def test_moment_kind():
    assert moment_kind(2) == "F2"
    assert moment_kind(0) == "F0"
    assert moment_kind(0.5) == "FpSmall"
    assert moment_kind(4) == "FpLarge"
    with pytest.raises(ParameterError):
        moment_kind(2.5)


def test_checkpoint_times():
    assert checkpoint_times(10, 3) == {1, 6, 10}
    assert checkpoint_times(2, 10) == {1, 2}
    assert checkpoint_times(0, 5) == set()


def test_error_quantiles_ignore_missing_values():
    result = error_quantiles([0.1, None, math.inf, 0.3])
    assert result["q50"] == pytest.approx(0.2)
    assert result["max"] == pytest.approx(0.3)
    assert error_quantiles([]) == {}


def test_validate_lists_every_bad_field():
    with pytest.raises(ParameterError) as info:
        RunConfig("sliding", eps=2.0).validate()
    assert "eps" in str(info.value)
    assert "window" in str(info.value)


def test_config_round_trips_through_its_dict():
    config = RunConfig("bench", eps=0.3, eps_grid=(0.2, 0.1))
    again = RunConfig.from_dict(json.loads(json.dumps(config.to_dict())))
    assert again.eps_grid == (0.2, 0.1)
    assert again.constants == "practical"
    assert again.eps == 0.3


def test_oracle_task(tmp_path, capsys):
    out = tmp_path / "oracle.json"
    code = main(["oracle", "--generator", "uniform", "--universe", "20", "--length", "12", "--eps", "0.5",
                 "--out", str(out)])
    assert code == EXIT_OK
    assert capsys.readouterr().out.strip() == str(out)
    results = _report(out)["results"]
    assert results["t"] == 12
    assert results["twist_number"]["verified"] is True
    assert results["twist_number"]["value"] >= results["flip_number"]


def test_validation_exit_code(tmp_path, capsys):
    code = main(["estimate", "--eps", "1.5", "--out", str(tmp_path / "bad.json")])
    assert code == EXIT_VALIDATION
    assert "[CLI] error:" in capsys.readouterr().err


def test_stream_format_exit_code(tmp_path, capsys):
    path = _stream(tmp_path, "1 1\n2 x\n")
    code = main(["estimate", "--input", str(path), "--eps", "0.5", "--out", str(tmp_path / "r.json")])
    assert code == EXIT_IO
    assert f"{path}:2" in capsys.readouterr().err


def test_negative_delta_on_insertion_only_task(tmp_path):
    path = _stream(tmp_path, "1 1\n2 1\n2 -1\n")
    code = main(["sliding", "--input", str(path), "--window", "2", "--eps", "0.5", "--out", str(tmp_path / "r.json")])
    assert code == EXIT_VALIDATION


def test_capacity_exit_code(tmp_path):
    path = _stream(tmp_path, "0 1\n0 1\n0 -1\n0 -1\n0 1\n0 1\n")
    code = main(["estimate", "--input", str(path), "--eps", "0.5", "--twist-budget", "0", "--out", str(tmp_path / "r.json")])
    assert code == EXIT_CAPACITY


def test_estimate_reproduces_from_its_report(tmp_path):
    config = RunConfig("estimate", eps=0.5, universe=50, length=150, out=str(tmp_path / "first.json"))
    _, report = run(config)
    again = RunConfig.from_dict(report["config"])
    again.out = str(tmp_path / "second.json")
    _, second = run(again)
    assert second["results"]["checkpoints"] == report["results"]["checkpoints"]
    assert report["results"]["duplicate_reveals"] == 0
    assert report["seed"] == "0x5eed"


def test_sliding_with_a_window_covering_the_stream_delegates(tmp_path):
    common = dict(eps=0.5, universe=50, length=100)
    _, whole = run(RunConfig("estimate", out=str(tmp_path / "whole.json"), **common))
    _, sliding = run(RunConfig("sliding", window=100, out=str(tmp_path / "sliding.json"), **common))
    assert sliding["results"]["delegated"] == "estimate"
    assert sliding["results"]["checkpoints"] == whole["results"]["checkpoints"]


def test_sliding_task_saves_a_checkpoint(tmp_path):
    save = tmp_path / "hist.npz"
    _, report = run(RunConfig("sliding", eps=0.5, universe=50, length=150, window=50, save=str(save),
                              out=str(tmp_path / "sliding.json")))
    results = report["results"]
    assert save.exists()
    assert results["boundaries"] >= results["suffixes"] >= 1
    assert results["query"]["window"] == 50
    assert len(results["checkpoints"]) == 10


def test_entropy_task(tmp_path):
    _, report = run(RunConfig("entropy", eps=0.5, universe=8, length=16, out=str(tmp_path / "entropy.json")))
    results = report["results"]
    assert results["sliding"] is False
    assert 1 <= results["switches"] <= results["pool"]
    assert results["reveals"] == results["switches"] * results["estimators"]
    assert all(point["abs_error"] is not None for point in results["checkpoints"])


def test_heavy_hitters_task(tmp_path):
    _, report = run(RunConfig("heavy-hitters", eps=0.5, universe=50, length=200, generator="zipf:1.5",
                              out=str(tmp_path / "hh.json")))
    results = report["results"]
    assert 0 in [row["item"] for row in results["reported"]]
    assert results["exact"][0]["item"] == 0


def test_robust_duel_writes_a_transcript(tmp_path):
    out = tmp_path / "duel.json"
    _, report = run(RunConfig("robust-duel", eps=0.5, universe=30, length=50, out=str(out)))
    summary = report["results"]["summary"]
    assert summary["steps"] == 50
    assert summary["duplicate_reveals"] == 0
    lines = (tmp_path / "duel.jsonl").read_text().splitlines()
    assert len(lines) == 51


def test_bench_space_slope(tmp_path, monkeypatch):
    monkeypatch.setenv("SKETCH_BENCH_WORKERS", "2")
    _, report = run(RunConfig("bench", eps=0.5, universe=50, length=60, seeds=2, out=str(tmp_path / "bench.json")))
    results = report["results"]
    assert 1.8 <= results["rows_slope"] <= 2.2
    assert len(results["runs"]) == 2
