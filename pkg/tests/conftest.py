from __future__ import annotations

import json
from pathlib import Path

import pytest

from auditcase.config import PipelineConfig
from auditcase.llm import Gateway, ScriptedBackend, ScriptedTranscript

ROOT = Path(__file__).resolve().parent.parent
DEMO = ROOT / "demo"
DEMO_BUNDLE = DEMO / "bundle"
DEMO_CONFIG = DEMO / "config.toml"
GOLDEN_INSTRUCTION = DEMO / "golden" / "instruction.md"


def scripted(entries: list[dict], **kwargs) -> Gateway:
    """Gateway over a scripted backend built from transcript entries."""
    return Gateway(ScriptedBackend(ScriptedTranscript.from_json(entries)), **kwargs)


def tree_bytes(root: Path, exclude: frozenset[str] = frozenset({"run_report.json", ".lock"})) -> dict[str, bytes]:
    """Relative path -> bytes for every file under ``root``."""
    return {
        str(p.relative_to(root)): p.read_bytes()
        for p in sorted(root.rglob("*"))
        if p.is_file() and p.name not in exclude
    }


@pytest.fixture
def demo_config() -> PipelineConfig:
    return PipelineConfig.load(DEMO_CONFIG)


@pytest.fixture
def write_bundle(tmp_path):
    """Create a bundle directory from {doc_id: (kind, filename, text)}."""

    def make(docs: dict[str, tuple[str, str, str | bytes]], case_id: str = "T-1", name: str = "bundle") -> Path:
        root = tmp_path / name
        root.mkdir()
        entries = []
        for doc_id, (kind, filename, content) in docs.items():
            data = content if isinstance(content, bytes) else content.encode("utf-8")
            (root / filename).write_bytes(data)
            entries.append({"doc_id": doc_id, "path": filename, "declared_kind": kind})
        (root / "manifest.json").write_text(json.dumps({"case_id": case_id, "documents": entries}))
        return root

    return make


class RecordingBackend(ScriptedBackend):
    """Scripted backend that keeps every prompt it receives."""

    def __init__(self, entries: list[dict]) -> None:
        super().__init__(ScriptedTranscript.from_json(entries))
        self.prompts: list[tuple[str | None, str]] = []

    def complete(self, req):
        self.prompts.append((req.template_id, req.rendered_prompt))
        return super().complete(req)


def recording(entries: list[dict], **kwargs) -> tuple[Gateway, RecordingBackend]:
    backend = RecordingBackend(entries)
    return Gateway(backend, **kwargs), backend


@pytest.fixture(scope="session")
def demo_workspace(tmp_path_factory) -> Path:
    """A completed demo run; copy it before mutating."""
    from auditcase.pipeline import run_case

    root = tmp_path_factory.mktemp("demo-run")
    run_case(DEMO_BUNDLE, PipelineConfig.load(DEMO_CONFIG), root)
    return root / "TC-2024-0117"


@pytest.fixture
def demo_outputs(demo_workspace) -> dict[str, dict]:
    from auditcase.pipeline import STAGES, CaseWorkspace

    ws = CaseWorkspace(demo_workspace)
    return {s: ws.output(s) for s in STAGES}


# -- acceptance summary --------------------------------------------------------------------

ACCEPTANCE: dict[int, tuple[str, bool, str]] = {}


def pytest_terminal_summary(terminalreporter) -> None:
    if not ACCEPTANCE:
        return
    terminalreporter.section("acceptance criteria")
    for n in sorted(ACCEPTANCE):
        title, ok, detail = ACCEPTANCE[n]
        terminalreporter.write_line(f"{'PASS' if ok else 'FAIL'} criterion {n}: {title} ({detail})")
