import json
import math
import shutil

import numpy as np
import pytest

from emea.encoder import ConfigError, UsageError
from emea.harness import (
    Evaluator,
    RunRecord,
    alpha_stats,
    average_records,
    batch_size_sweep,
    bench_throughput,
    build_table,
    parse_method,
    read_results,
    report,
    run_grid,
    strip_provenance,
)
from emea.pipeline import DependencyError, Workspace


@pytest.fixture(scope="module")
def grid(prepared, tmp_path_factory):
    path = tmp_path_factory.mktemp("grid") / "results.jsonl"
    rows = run_grid(prepared, results_path=path)
    return path, rows


def test_grid_has_every_cell_and_mean_rows(grid, prepared):
    path, rows = grid
    per_seed = [r for r in rows if r.seed is not None]
    means = [r for r in rows if r.seed is None]
    assert len(per_seed) == 3 * 7 * 3 and len(means) == 3 * 7
    lines = path.read_text().splitlines()
    assert len(lines) == 1 + 63 + 21
    head = json.loads(lines[0])["provenance"]
    assert head["seeds"] == [0, 1, 2] and head["config_digest"] == prepared.digest()
    assert {"command", "version", "timestamp", "config"} <= set(head)


def test_mean_rows_average_the_seeds(grid):
    _, rows = grid
    for m in (r for r in rows if r.seed is None):
        seeds = [r.value for r in rows if r.cell() == m.cell() and r.seed is not None]
        assert m.n_seeds == 3 and m.value == pytest.approx(math.fsum(seeds) / 3, abs=1e-12)


def test_emea_records_carry_weights(grid, prepared):
    _, rows = grid
    for r in (r for r in rows if r.seed is not None):
        if r.method.startswith("emea"):
            assert r.adapters == Workspace(prepared).adapter_names
            a = np.asarray(r.alphas)
            np.testing.assert_allclose(a.sum(axis=-1), 1.0, atol=1e-5)
            assert len(r.alpha_mean) == len(r.adapters)
        if r.method == "related":
            assert r.selected in ("rel1", "rel2")


def test_rerun_is_a_no_op(grid, prepared):
    path, _ = grid
    before = path.read_bytes()
    run_grid(prepared, results_path=path)
    assert path.read_bytes() == before


def test_interrupted_grid_resumes(grid, prepared, tmp_path):
    path, rows = grid
    lines = path.read_text().splitlines()
    cut = tmp_path / "partial.jsonl"
    cut.write_text("\n".join(lines[:30]) + "\n")

    class Counting(Evaluator):
        calls = 0

        def evaluate(self, *a, **k):
            Counting.calls += 1
            return super().evaluate(*a, **k)

    resumed = run_grid(prepared, results_path=cut, evaluator=Counting(prepared))
    assert Counting.calls == 63 - 29
    assert [(r.key(), r.value) for r in resumed] == [(r.key(), r.value) for r in rows]


def test_force_recomputes_same_values(grid, prepared, tmp_path):
    path, rows = grid
    copy = tmp_path / "r.jsonl"
    shutil.copy(path, copy)
    again = run_grid(prepared, ["ensemble"], ["test1"], results_path=copy, force=True)
    old = {r.key(): r.value for r in rows}
    assert all(old[r.key()] == r.value for r in again)
    assert len(read_results(copy)) == 63 + 21


def test_grid_is_deterministic(grid, prepared, tmp_path):
    path, _ = grid
    other = tmp_path / "again.jsonl"
    run_grid(prepared, results_path=other)
    assert strip_provenance(other.read_text()) == strip_provenance(path.read_text())


def test_steps_override_zero_equals_ensemble(prepared, tmp_path):
    rows = run_grid(prepared, ["emea-s10", "ensemble"], ["test2"], steps=0, results_path=tmp_path / "r.jsonl")
    emea = [r.value for r in rows if r.method == "emea-s10"]
    ens = [r.value for r in rows if r.method == "ensemble"]
    assert emea == ens
    assert all(r.steps is None for r in rows if r.method == "ensemble")


def test_missing_artifacts_fail_before_any_work(workdir_copy, tmp_path):
    ws = Workspace(workdir_copy)
    ws.fusion_path(1).unlink()
    out = tmp_path / "r.jsonl"
    with pytest.raises(DependencyError, match="fusion"):
        run_grid(workdir_copy, results_path=out)
    assert not out.exists()
    with pytest.raises(DependencyError, match="N=999"):
        run_grid(workdir_copy, ["new-adapter-999"], results_path=out)


def test_budgeted_method_scores(prepared, tmp_path):
    rows = run_grid(prepared, ["new-adapter-50"], ["test1"], results_path=tmp_path / "r.jsonl")
    assert len(rows) == 4 and all(0 <= r.value <= 1 for r in rows)


def test_parse_method():
    assert parse_method("new-adapter-1000") == ("new-adapter", 1000)
    assert parse_method("single:rel1") == ("single", None)
    assert parse_method("emea-s1") == ("emea-s1", None)
    for bad in ("new-adapter-x", "emea-s3", ""):
        with pytest.raises(ConfigError):
            parse_method(bad)


def test_run_record_validation():
    with pytest.raises(ValueError):
        RunRecord("v", "en", 0, "span_f1", 1.5, 32)
    with pytest.raises(ValueError):
        RunRecord("v", "en", 0, "span_f1", 0.5, 32, examples_per_second=0.0)
    with pytest.raises(ValueError):
        RunRecord("v", "emea-s1", 0, "span_f1", 0.5, 32, alpha_mean=[0.5, 0.6])


def test_average_records_rejects_mixed_cells():
    a = RunRecord("v", "en", 0, "span_f1", 0.5, 32)
    b = RunRecord("w", "en", 1, "span_f1", 0.7, 32)
    with pytest.raises(ValueError):
        average_records([a, b])
    assert average_records([a, RunRecord("v", "en", 1, "span_f1", 0.7, 32)]).value == pytest.approx(0.6)


def test_table_and_report(grid, tmp_path):
    path, rows = grid
    table = build_table(read_results(path))
    assert table.methods[:3] == ["en", "related", "cl"]
    per_variety = [table.values["ensemble", v] for v in table.varieties]
    assert table.average("ensemble") == pytest.approx(sum(per_variety) / 3)
    mean = next(r for r in rows if r.seed is None and r.method == "ensemble" and r.variety == "test1")
    assert table.values["ensemble", "test1"] == pytest.approx(mean.value)
    text, written = report(path, out_dir=tmp_path)
    assert "emea-s10" in text and written.exists()
    assert written.read_text().splitlines()[0].split("\t") == ["method", "test1", "test2", "test3", "avg"]


def test_report_without_records(tmp_path):
    path = tmp_path / "empty.jsonl"
    path.write_text("")
    with pytest.raises(UsageError):
        report(path)


def test_alpha_stats(grid):
    path, _ = grid
    stats = alpha_stats(read_results(path))
    assert set(stats) == {"test1", "test2", "test3"}
    names, mean, std = stats["test1"]
    assert len(names) == len(mean) == len(std)
    assert mean.sum() == pytest.approx(1.0, abs=1e-6)
    with pytest.warns(RuntimeWarning):
        assert alpha_stats([r for r in read_results(path) if r.method == "en"]) == {}


def test_batch_size_sweep(prepared, tmp_path):
    rows = batch_size_sweep(prepared, "test1", "emea-s1", [1, 8], seeds=[0], results_path=tmp_path / "r.jsonl")
    assert [r.batch_size for r in rows] == [1, 8]


def test_bench(prepared):
    ev = Evaluator(prepared)
    assert bench_throughput(ev, "en", 4, 2, warmup=1, repeats=1) > 0
    with pytest.raises(ConfigError):
        bench_throughput(ev, "en", 4, 0)
    with pytest.raises(ConfigError):
        bench_throughput(ev, "en", 4, 1, warmup=-1)
