from __future__ import annotations

import dataclasses
import json
import shutil
import time
from collections import Counter

import pytest

from auditcase.config import PipelineConfig
from auditcase.errors import ManifestError, StageFailed, StaleUpstream, WorkspaceLocked
from auditcase.pipeline import (
    DEPENDENCIES,
    STAGES,
    CaseWorkspace,
    ancestors,
    dependents,
    read_audit_log,
    reconcile_audit_log,
    regenerate_instruction_section,
    resume_stage,
    run_case,
    stale_stages,
)
from auditcase.validation import SectionId
from conftest import DEMO_BUNDLE, DEMO_CONFIG, GOLDEN_INSTRUCTION, scripted, tree_bytes

CASE = "TC-2024-0117"


@pytest.fixture
def ws(demo_workspace, tmp_path) -> CaseWorkspace:
    """A private copy of the completed demo workspace."""
    dest = tmp_path / CASE
    shutil.copytree(demo_workspace, dest)
    return CaseWorkspace(dest)


def test_golden_and_timing(tmp_path, demo_config):
    start = time.perf_counter()
    report = run_case(DEMO_BUNDLE, demo_config, tmp_path)
    elapsed = time.perf_counter() - start
    assert report.ok and report.executed() == list(STAGES)
    assert (tmp_path / CASE / "instruction.md").read_bytes() == GOLDEN_INSTRUCTION.read_bytes()
    assert elapsed < 5.0


def test_two_runs_byte_identical(tmp_path, demo_config):
    run_case(DEMO_BUNDLE, demo_config, tmp_path / "a")
    run_case(DEMO_BUNDLE, PipelineConfig.load(DEMO_CONFIG), tmp_path / "b")
    assert tree_bytes(tmp_path / "a" / CASE) == tree_bytes(tmp_path / "b" / CASE)


def test_rerun_skips_everything(ws, demo_config):
    before = tree_bytes(ws.path)
    report = run_case(DEMO_BUNDLE, demo_config, ws.path.parent)
    assert report.skipped() == list(STAGES)
    assert tree_bytes(ws.path) == before


def test_workspace_layout(demo_workspace):
    ws = CaseWorkspace(demo_workspace)
    assert sorted(p.stem for p in ws.extracted_dir.glob("*.json")) == ["D01", "D02", "D03", "D04", "D05", "D06"]
    assert {p.stem for p in ws.stages_dir.glob("*.json")} == set(STAGES)
    assert (demo_workspace / "instruction.json").is_file()
    env = ws.read_envelope("fumus")
    assert env["stage"] == "fumus" and len(env["inputs_digest"]) == 64
    report = json.loads(ws.report_path.read_text())
    assert report["case_id"] == CASE and report["total_tokens"] > 0


# -- dependency graph ----------------------------------------------------------------------


def test_dependency_graph_helpers():
    assert dependents("fumus") == ["fumus", "recommendations"]
    assert dependents("ingest") == list(STAGES)
    assert dependents("allegations") == ["allegations", "fumus", "recommendations"]
    assert ancestors("fumus") == ["ingest", "index", "allegations"]
    for stage, deps in DEPENDENCIES.items():
        assert all(STAGES.index(d) < STAGES.index(stage) for d in deps)


@pytest.mark.parametrize("stage", STAGES)
def test_resume_reruns_exactly_dependents(ws, demo_config, stage):
    before = tree_bytes(ws.path)
    report = resume_stage(ws, stage, demo_config)
    assert report.executed() == dependents(stage)
    after = tree_bytes(ws.path)
    # deterministic backend: outputs are unchanged; envelopes may list fewer requests when
    # unchanged instruction sections are reused
    for rel in before:
        if rel.startswith("stages/"):
            a, b = json.loads(before[rel]), json.loads(after[rel])
            assert (a["inputs_digest"], a["output"]) == (b["inputs_digest"], b["output"])
        elif rel != "audit.log":
            assert after[rel] == before[rel], rel


def test_resume_with_missing_upstream(ws, demo_config):
    ws.stage_path("allegations").unlink()
    with pytest.raises(StaleUpstream) as exc:
        resume_stage(ws, "fumus", demo_config)
    assert "allegations" in exc.value.stages


def test_resume_with_stale_upstream(ws, demo_config):
    cfg = dataclasses.replace(demo_config, top_k=3)
    with pytest.raises(StaleUpstream):
        resume_stage(ws, "recommendations", cfg)


def test_resume_unknown_stage(ws, demo_config):
    with pytest.raises(ValueError):
        resume_stage(ws, "nope", demo_config)


def test_stale_stages_after_config_change(ws, demo_config):
    assert stale_stages(ws, demo_config) == []
    cfg = dataclasses.replace(demo_config, fumus_steps=4)
    assert stale_stages(ws, cfg) == ["fumus"]
    cfg = dataclasses.replace(demo_config, top_k=3)
    assert stale_stages(ws, cfg) == ["basic_info", "admissibility", "periculum", "fumus"]


def test_bundle_change_invalidates_ingest(ws, demo_config, tmp_path):
    bundle = tmp_path / "bundle"
    shutil.copytree(DEMO_BUNDLE, bundle)
    with open(bundle / "ata_sessao_publica.txt", "a", encoding="utf-8") as fh:
        fh.write("\nAdditional note.\n")
    shutil.rmtree(ws.bundle_dir)
    shutil.copytree(bundle, ws.bundle_dir)
    assert "ingest" in stale_stages(ws, demo_config)


# -- regeneration -------------------------------------------------------------------------


@pytest.mark.parametrize("section", list(SectionId))
def test_regenerate_section_isolation(ws, demo_config, section):
    before = tree_bytes(ws.path)
    old = ws.draft()
    gw = scripted([{"template": f"instruction.{section.value}", "response": "Rewritten section body."}])
    draft = regenerate_instruction_section(ws, section, demo_config, gateway=gw)
    after = tree_bytes(ws.path)
    for s in STAGES[:-1]:
        key = f"stages/{s}.json"
        assert after[key] == before[key]
    for rel in before:
        if rel.startswith(("extracted/", "indexes/", "bundle/")):
            assert after[rel] == before[rel]
    for s in SectionId:
        if s is section:
            assert draft.section(s).text.startswith("Rewritten section body.")
        else:
            assert draft.section(s) == old.section(s)
            assert draft.section(s).text.encode() == old.section(s).text.encode()
    md = (ws.path / "instruction.md").read_text(encoding="utf-8")
    assert "Rewritten section body." in md


def test_regenerate_without_draft(ws, demo_config):
    ws.stage_path("recommendations").unlink()
    with pytest.raises(StaleUpstream):
        regenerate_instruction_section(ws, SectionId.BASIC_INFO, demo_config)


# -- crash safety ---------------------------------------------------------------------------


class Crash(Exception):
    pass


@pytest.mark.parametrize("crash_after", ["index", "allegations", "periculum", "fumus"])
def test_crash_and_resume_matches_uninterrupted(tmp_path, demo_config, demo_workspace, crash_after):
    def hook(stage: str) -> None:
        if stage == crash_after:
            raise Crash(stage)

    with pytest.raises(Crash):
        run_case(DEMO_BUNDLE, demo_config, tmp_path, on_stage_committed=hook)
    ws = CaseWorkspace(tmp_path / CASE)
    assert ws.read_envelope(crash_after) is not None
    assert ws.read_envelope("recommendations") is None
    report = run_case(DEMO_BUNDLE, demo_config, tmp_path)
    assert report.skipped() == list(STAGES[: STAGES.index(crash_after) + 1])
    assert tree_bytes(ws.path) == tree_bytes(demo_workspace)


def test_audit_log_lists_each_request_once(ws, demo_config):
    records = read_audit_log(ws)
    per_stage = Counter(r["stage"] for r in records)
    for stage in STAGES:
        env = ws.read_envelope(stage)
        assert per_stage.get(stage, 0) == len(env["audit"])
        keys = [r["request_key"] for r in records if r["stage"] == stage]
        assert keys == [a["request_key"] for a in env["audit"]]
    assert {"stage", "request_key", "tokens_in", "tokens_out", "latency_ms"} <= set(records[0])


def test_reconcile_recovers_lost_audit_append(ws):
    lines = ws.audit_log.read_text(encoding="utf-8").splitlines(keepends=True)
    # drop the recommendations block as if the process died after the envelope write
    keep = [ln for ln in lines if json.loads(ln)["stage"] != "recommendations"]
    ws.audit_log.write_text("".join(keep) + '{"torn', encoding="utf-8")
    assert reconcile_audit_log(ws) == ["recommendations"]
    assert reconcile_audit_log(ws) == []
    assert ws.audit_log.read_text(encoding="utf-8") == "".join(lines)


def test_failed_stage_keeps_upstream(tmp_path, demo_config):
    gw = scripted([])
    with pytest.raises(StageFailed) as exc:
        run_case(DEMO_BUNDLE, demo_config, tmp_path, gateway=gw)
    assert exc.value.stage == "basic_info"
    ws = CaseWorkspace(tmp_path / CASE)
    assert ws.read_envelope("index") is not None and ws.read_envelope("basic_info") is None
    report = json.loads(ws.report_path.read_text())
    assert report["stages"][-1]["status"] == "failed"
    # a later run with the real transcript completes and skips the committed stages
    assert run_case(DEMO_BUNDLE, demo_config, tmp_path).skipped() == ["ingest", "index"]


# -- manifest and locking ------------------------------------------------------------------


def test_missing_main_fails_before_any_stage(write_bundle, tmp_path, demo_config):
    bundle = write_bundle({"D1": ("Supporting", "a.txt", "text")}, case_id="NOMAIN")
    with pytest.raises(ManifestError):
        run_case(bundle, demo_config, tmp_path / "ws")
    assert not (tmp_path / "ws" / "NOMAIN").exists()


def test_lock_prevents_concurrent_writer(ws, demo_config):
    lock = ws.lock()
    lock.acquire()
    try:
        with pytest.raises(WorkspaceLocked):
            resume_stage(ws, "fumus", demo_config)
        with pytest.raises(WorkspaceLocked):
            run_case(DEMO_BUNDLE, demo_config, ws.path.parent)
    finally:
        lock.release()
