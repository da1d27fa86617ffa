import io
import json
import os

import pytest

from vcubeps import cli
from vcubeps.simnet import TraceRecord, read_trace, write_trace


def run(*argv):
    buf = io.StringIO()
    rc = cli.main(list(argv), out=buf)
    return rc, buf.getvalue()


def test_run_writes_outputs_and_traces(tmp_path):
    out = str(tmp_path / "o")
    rc, text = run("run", "--scenario", "several_publishers", "--nodes", "16", "--seed", "3",
                   "--runs", "2", "--publisher-pct", "50", "--out", out, "--trace")
    assert rc == 0
    assert "mean_latency" in text and "assumptions:" in text
    assert sorted(os.listdir(os.path.join(out, "traces"))) == ["run-3.tsv", "run-4.tsv"]
    with open(os.path.join(out, "assumptions.json")) as fh:
        assert json.load(fh)["control_queueing"] == "bypass"


def test_run_srpt(tmp_path):
    rc, _ = run("run", "--scenario", "single_publisher", "--nodes", "32", "--system", "srpt-s",
                "--subscriber-pct", "25", "--out", str(tmp_path))
    assert rc == 0


def test_run_bad_scenario_arguments(tmp_path):
    rc, _ = run("run", "--scenario", "single_publisher", "--nodes", "12", "--out", str(tmp_path))
    assert rc == 2
    with pytest.raises(SystemExit) as e:
        run("run", "--scenario", "nonsense", "--nodes", "8", "--out", str(tmp_path))
    assert e.value.code == 2


def _trace_file(tmp_path, mutate=False):
    out = str(tmp_path / "o")
    run("run", "--scenario", "single_publisher", "--nodes", "16", "--out", out, "--trace")
    path = os.path.join(out, "traces", "run-0.tsv")
    if mutate:
        with open(path) as fh:
            recs = read_trace(fh)
        k = next(i for i, r in enumerate(recs) if r.kind == "deliver" and r.node != r.msg_source)
        recs.insert(k, TraceRecord(*recs[k]))
        with open(path, "w") as fh:
            write_trace(recs, fh)
    return path


def test_validate_clean_trace(tmp_path):
    path = _trace_file(tmp_path)
    report = str(tmp_path / "rep.json")
    rc, text = run("validate", "--trace", path, "--report", report)
    assert rc == 0
    assert json.loads(text.splitlines()[0])["ok"] is True
    with open(report) as fh:
        assert json.load(fh)["violations"] == []


def test_validate_mutated_trace_fails(tmp_path):
    path = _trace_file(tmp_path, mutate=True)
    rc, text = run("validate", "--trace", path)
    assert rc == 1
    assert json.loads(text.splitlines()[0])["violations_by_check"]["integrity"] == 1
    rc, _ = run("validate", "--trace", path, "--checks", "fifo_reception")
    assert rc == 0
    rc, _ = run("validate", "--trace", path, "--checks", "bogus")
    assert rc == 2


def test_sweep_and_presets(tmp_path):
    rc, text = run("presets")
    assert rc == 0 and "ci-smoke" in text and "paper-table-1" in text
    rc, text = run("sweep", "--preset", "ci-smoke", "--runs", "1", "--out", str(tmp_path), "--quiet")
    assert rc == 0 and "preset: ci-smoke" in text
    assert os.path.exists(tmp_path / "summary.csv")
    rc, _ = run("sweep", "--preset", "nope", "--out", str(tmp_path))
    assert rc == 2
