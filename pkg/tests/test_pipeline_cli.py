import json
import subprocess
import sys
import time

import pytest

from mmleak.analyzer_bridge import Status, read_report
from mmleak.cli import EXIT_FATAL, EXIT_FINDINGS, EXIT_OK, main
from mmleak.pipeline import STAGES, Pipeline, PipelineConfig, PipelineError, run_pipeline

from conftest import CORPUS, CORPUS_SINKS, FIXTURES

GOLDENS = FIXTURES / "goldens"


def offline_config(out, **kw):
    return PipelineConfig(root=str(CORPUS), out_dir=str(out), offline=True, sinks=CORPUS_SINKS, **kw)


@pytest.fixture(scope="module")
def full_run(tmp_path_factory):
    out = tmp_path_factory.mktemp("run")
    t0 = time.perf_counter()
    pipeline, counters = run_pipeline(offline_config(out))
    return out, pipeline, counters, time.perf_counter() - t0


def test_full_run_counters(full_run):
    out, pipeline, counters, elapsed = full_run
    assert set(counters) == {"extracted", "candidates", "summaries", "validated", "warnings", "after_feasibility", "after_triage"}
    assert all(v is not None for v in counters.values())
    assert counters["extracted"] == 20 and counters["candidates"] == 15
    assert counters["warnings"] >= 1 and counters["after_feasibility"] >= 1
    assert elapsed < 120


def test_full_run_findings(full_run):
    out, pipeline, _, _ = full_run
    findings = pipeline.findings()
    assert sorted((w.file, w.function, w.line) for w in findings) == [
        ("freerdp/settings.c", "freerdp_settings_set_certificate", 18),
        ("openssl/pcy_tree.c", "X509_policy_check", 66),
    ]
    # offline triage has no recorded answers: warnings stay for human review
    assert all(w.status is Status.UNTRIAGED for w in findings)
    report, counters = read_report(out / "report.json")
    assert len(report) == 2 and counters["after_triage"] == 2
    assert "freerdp_settings_set_certificate" in (out / "report.txt").read_text()


def test_full_run_artifacts(full_run):
    out, _, _, _ = full_run
    for name in ("codebase.json", "candidates.json", "hints.json", "validated_hints.json", "rejections.tsv", "infer_flags.txt", "codeql/models/memory.model.yml", "manifest.json"):
        assert (out / name).exists(), name
    flags = (out / "infer_flags.txt").read_text().splitlines()
    assert flags[0] == "alloc=^(XMALLOC|dup_name|freerdp_certificate_clone|freerdp_certificate_new|tree_init)$"
    assert flags[1] == "free=^(X509_policy_tree_free|XFREE|ctx_release|freerdp_certificate_free)$"


def test_rerun_is_noop(full_run):
    out, _, counters, _ = full_run
    before = {p: p.stat().st_mtime_ns for p in out.rglob("*") if p.is_file() and p.name != "manifest.json"}
    p2, c2 = run_pipeline(offline_config(out))
    assert p2.skipped == list(STAGES)
    assert c2 == counters
    after = {p: p.stat().st_mtime_ns for p in out.rglob("*") if p.is_file() and p.name != "manifest.json"}
    assert before == after


def test_changed_setting_reruns_downstream(tmp_path):
    out = tmp_path / "o"
    run_pipeline(offline_config(out), ("extract", "summarize", "validate"))
    p, _ = run_pipeline(offline_config(out, max_depth=1), ("extract", "summarize", "validate"))
    assert "extract" not in p.skipped and "validate" not in p.skipped


def test_missing_input_names_stage(tmp_path):
    with pytest.raises(PipelineError, match="run 'extract' first"):
        run_pipeline(offline_config(tmp_path), ("validate",))
    with pytest.raises(PipelineError, match="unknown stage"):
        run_pipeline(offline_config(tmp_path), ("bake",))


def test_report_with_no_warnings(tmp_path):
    p, counters = run_pipeline(offline_config(tmp_path), ("report",))
    report, saved = read_report(tmp_path / "report.json")
    assert report == [] and set(saved.values()) == {0}


def test_external_results_are_merged_and_filtered(tmp_path):
    cfg = offline_config(
        tmp_path,
        codeql_results=str(FIXTURES / "results" / "codeql.sarif"),
        infer_results=str(FIXTURES / "results" / "infer_report.json"),
    )
    p, counters = run_pipeline(cfg, STAGES[:6])
    ws, _ = read_report(tmp_path / "warnings_filtered.json")
    setter = [w for w in ws if w.function == "freerdp_settings_set_certificate"]
    assert len(setter) == 1 and len(setter[0].sources) == 3
    # process_buffer releases its buffer through the validated XFREE macro
    pb = [w for w in ws if w.function == "process_buffer"]
    assert len(pb) == 1 and pb[0].status is Status.DISCARDED


def test_triage_with_injected_model(tmp_path):
    answers = iter(
        [
            '{"verdict": true, "confidence": 0.9, "reason": "leak on error path", "bug_indices": [1]}',
            '{"verdict": false, "confidence": 0.6, "reason": "callee frees", "bug_indices": []}',
        ]
    )
    cfg = offline_config(tmp_path)
    p, counters = run_pipeline(cfg, STAGES, ask={"triage": lambda prompt: next(answers)})
    assert counters["after_feasibility"] == 2 and counters["after_triage"] == 1


def test_config_file(tmp_path):
    cfg = PipelineConfig.from_file(CORPUS / "mmleak.yaml", out_dir=str(tmp_path))
    assert cfg.root == str(CORPUS) and cfg.sinks == CORPUS_SINKS and cfg.project == "synthetic"
    bad = tmp_path / "bad.yaml"
    bad.write_text("colour: blue\n")
    with pytest.raises(ValueError, match="colour"):
        PipelineConfig.from_file(bad)


def test_offline_forces_replay(tmp_path):
    assert offline_config(tmp_path).client("triage").mode == "replay"
    assert PipelineConfig().client("generation").mode == "record"


# -- CLI ---------------------------------------------------------------------------


def test_cli_emit_from_hints_matches_goldens(tmp_path, capsys):
    rc = main(["emit", "--out", str(tmp_path), "--from-hints", str(FIXTURES / "freerdp_hints.json")])
    assert rc == EXIT_OK
    assert (tmp_path / "codeql/models/memory.model.yml").read_text() == (GOLDENS / "memory.model.yml").read_text()
    assert (tmp_path / "infer_flags.txt").read_text() == (GOLDENS / "infer_flags.txt").read_text()


def test_cli_missing_input_is_fatal(tmp_path, capsys):
    assert main(["scan", "--root", str(CORPUS), "--out", str(tmp_path)]) == EXIT_FATAL
    assert "run 'extract' first" in capsys.readouterr().err


def test_cli_bad_root(tmp_path, capsys):
    assert main(["extract", "--root", str(tmp_path / "nope"), "--out", str(tmp_path / "o")]) == EXIT_FATAL


def test_cli_run_and_fail_on_findings(tmp_path, capsys):
    args = ["run", "--config", str(CORPUS / "mmleak.yaml"), "--out", str(tmp_path), "--offline"]
    assert main(args) == EXIT_OK
    printed = capsys.readouterr().out
    assert "after_feasibility: 2" in printed
    assert main(args + ["--fail-on-findings"]) == EXIT_FINDINGS
    assert "up to date: " + ", ".join(STAGES) in capsys.readouterr().out


def test_cli_stage_by_stage(tmp_path, capsys):
    common = ["--root", str(CORPUS), "--out", str(tmp_path), "--offline", "--sink", CORPUS_SINKS[0]]
    for stage in STAGES:
        assert main([stage] + common) == EXIT_OK, stage
    assert len(read_report(tmp_path / "report.json")[0]) == 2


def test_module_entry_point(tmp_path):
    res = subprocess.run([sys.executable, "-m", "mmleak", "--help"], capture_output=True, text=True)
    assert res.returncode == 0 and "extract" in res.stdout
