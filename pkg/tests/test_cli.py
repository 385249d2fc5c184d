import json
import re

import pytest
import yaml
from filelock import FileLock

from emea.cli import cli_dispatch
from emea.pipeline import Workspace

from conftest import TINY_CONFIG, tiny_config

ERROR_LINE = re.compile(r"^emea-error category=(\w+) exit=(\d) message=(\".*\")$")


@pytest.fixture
def config_file(tmp_path):
    path = tmp_path / "tiny.yaml"
    path.write_text(yaml.safe_dump(TINY_CONFIG))
    return path


def run(capsys, *argv):
    code = cli_dispatch([str(a) for a in argv])
    out, err = capsys.readouterr()
    return code, out, err


def error(err):
    line = err.strip().splitlines()[-1]
    m = ERROR_LINE.match(line)
    assert m, line
    return m.group(1), int(m.group(2)), json.loads(m.group(3))


def test_usage_errors(capsys):
    code, _, err = run(capsys)
    assert code == 2 and error(err)[:2] == ("usage", 2)
    code, _, err = run(capsys, "eval", "--no-such-flag")
    assert code == 2 and "--no-such-flag" in error(err)[2]
    code, _, err = run(capsys, "gen-data", "--seed", 1, "--seed", 2, "--workdir", "/tmp/unused-emea")
    assert code == 2


def test_help_exits_zero(capsys):
    assert run(capsys, "--help")[0] == 0


def test_bad_config_exits_4(capsys, tmp_path):
    bad = tmp_path / "bad.yaml"
    bad.write_text("emea: {gama: 1}\n")
    code, _, err = run(capsys, "gen-data", "--config", bad, "--workdir", tmp_path / "w")
    assert code == 4 and error(err)[0] == "config" and "gama" in error(err)[2]


def test_missing_artifacts_exit_3(capsys, config_file, tmp_path):
    code, _, err = run(capsys, "eval", "--config", config_file, "--workdir", tmp_path / "w")
    assert code == 3 and error(err)[0] == "dependency"
    code, _, err = run(capsys, "report", "--config", config_file, "--workdir", tmp_path / "w")
    assert code == 3


def test_corrupt_checkpoint_exits_3(capsys, config_file, workdir_copy):
    Workspace(workdir_copy).backbone_path().write_bytes(b"garbage")
    code, _, err = run(capsys, "eval", "--config", config_file, "--workdir", workdir_copy.workdir, "--method", "en")
    assert code == 3 and error(err)[0] == "dependency"


def test_unknown_method_and_variety_exit_4(capsys, config_file, workdir_copy):
    common = ["--config", config_file, "--workdir", workdir_copy.workdir]
    assert run(capsys, "eval", *common, "--method", "magic")[0] == 4
    assert run(capsys, "eval", *common, "--variety", "src")[0] == 4
    assert run(capsys, "bench", *common, "--n-batches", 0)[0] == 4
    assert run(capsys, "bench", *common, "--batch-size", 0)[0] == 4


def test_locked_workdir_exits_1(capsys, config_file, tmp_path):
    work = tmp_path / "w"
    work.mkdir()
    with FileLock(str(work / ".emea.lock")):
        code, _, err = run(capsys, "gen-data", "--config", config_file, "--workdir", work, "--lock-timeout", 0.1)
    assert code == 1 and error(err)[0] == "locked"


def test_full_pipeline_through_the_cli(capsys, config_file, tmp_path):
    work = tmp_path / "w"
    common = ["--config", config_file, "--workdir", work, "-q"]
    for cmd in ("gen-data", "pretrain", "train-lm-adapter", "train-task-adapter", "train-fusion"):
        code, out, err = run(capsys, cmd, *common)
        assert code == 0, err
    code, _, _ = run(capsys, "train-lm-adapter", *common, "--budget", 20, "--seed", 0)
    assert code == 0 and Workspace(tiny_config(work)).budget_path("test1", 20, 0).exists()

    code, out, err = run(capsys, "eval", *common, "--method", "en", "--method", "emea-s1", "--seed", 0, "--seed", 1)
    assert code == 0, err
    assert len([ln for ln in out.splitlines() if "\tbs=32\t" in ln]) == 2 * 3
    results = work / "results" / "results.jsonl"
    first = results.read_bytes()

    # idempotent: a second identical call changes nothing
    assert run(capsys, "eval", *common, "--method", "en", "--method", "emea-s1", "--seed", 0, "--seed", 1)[0] == 0
    assert results.read_bytes() == first

    runs = [json.loads(x)["provenance"] for x in (work / "logs" / "runs.jsonl").read_text().splitlines()]
    assert [r["command"] for r in runs][-2:] == ["eval", "eval"]
    assert "--method" in runs[-1]["argv"]

    code, out, _ = run(capsys, "report", *common, "--alphas", "--out-dir", tmp_path / "tables")
    assert code == 0 and "emea-s1" in out and "alpha test1:" in out
    assert len((work / "logs" / "runs.jsonl").read_text().splitlines()) == len(runs)

    code, out, _ = run(capsys, "bench", *common, "--method", "en", "--n-batches", 1, "--warmup", 0, "--repeats", 1, "--batch-size", 4)
    assert code == 0
    bench = [json.loads(x) for x in (work / "results" / "bench.jsonl").read_text().splitlines()]
    assert "provenance" in bench[0] and bench[1]["examples_per_second"] > 0


def test_steps_zero_matches_ensemble(capsys, config_file, workdir_copy):
    common = ["--config", config_file, "--workdir", workdir_copy.workdir, "--seed", 0, "--variety", "test2"]
    code, out, err = run(capsys, "eval", *common, "--method", "emea-s10", "--method", "ensemble", "--steps", 0)
    assert code == 0, err
    scores = dict(ln.split("\t")[1::2] for ln in out.splitlines() if "\tbs=" in ln)
    assert scores["emea-s10"] == scores["ensemble"]


def test_batch_size_sweep_via_repeated_flag(capsys, config_file, workdir_copy):
    common = ["--config", config_file, "--workdir", workdir_copy.workdir, "--seed", 0, "--variety", "test1", "--method", "emea-s1"]
    code, out, _ = run(capsys, "eval", *common, "--batch-size", 1, "--batch-size", 8)
    assert code == 0
    assert "bs=1" in out and "bs=8" in out
