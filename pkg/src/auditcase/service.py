"""JSON-over-HTTP service around the pipeline.

Submissions run in a background thread. Mutations on one case are serialized
by a per-case lock; different cases proceed in parallel. When the environment
variable ``AUDITCASE_API_TOKEN`` is set, every request must carry it as a
bearer token.
"""

from __future__ import annotations

import base64
import contextlib
import json
import logging
import os
import re
import shutil
import tempfile
import threading
from concurrent.futures import ThreadPoolExecutor
from pathlib import Path
from typing import Any

from fastapi import Depends, FastAPI, Header, HTTPException
from fastapi.responses import PlainTextResponse
from pydantic import BaseModel, Field

from auditcase.config import PipelineConfig
from auditcase.errors import AuditCaseError, ManifestError, StaleUpstream
from auditcase.ingest import load_bundle
from auditcase.pipeline import (
    STAGES,
    CaseWorkspace,
    regenerate_instruction_section,
    resume_stage,
    run_case,
)
from auditcase.validation import SectionId

logger = logging.getLogger(__name__)

TOKEN_ENV = "AUDITCASE_API_TOKEN"
_SAFE_NAME = re.compile(r"^[A-Za-z0-9._-]+$")


class DocumentIn(BaseModel):
    doc_id: str
    declared_kind: str
    filename: str
    content: str = Field(description="document text, or base64 when encoding is 'base64'")
    encoding: str = "text"


class CaseIn(BaseModel):
    """Either a server-side bundle path or an inline bundle."""

    bundle_path: str | None = None
    case_id: str | None = None
    submitted_at: str | None = None
    documents: list[DocumentIn] = Field(default_factory=list)


class _CaseState:
    def __init__(self) -> None:
        self.lock = threading.Lock()
        self.status = "queued"
        self.error: str | None = None
        self.failed_stage: str | None = None


def _materialize(case: CaseIn, dest: Path) -> Path:
    """Write an inline bundle to ``dest`` and return its directory."""
    if not case.case_id or not _SAFE_NAME.match(case.case_id):
        raise HTTPException(400, "inline bundles need a case_id of letters, digits, '.', '_' or '-'")
    if not case.documents:
        raise HTTPException(400, "inline bundle has no documents")
    dest.mkdir(parents=True)
    entries = []
    for doc in case.documents:
        if not _SAFE_NAME.match(doc.filename):
            raise HTTPException(400, f"unsafe filename {doc.filename!r}")
        raw = base64.b64decode(doc.content) if doc.encoding == "base64" else doc.content.encode("utf-8")
        (dest / doc.filename).write_bytes(raw)
        entries.append({"doc_id": doc.doc_id, "path": doc.filename, "declared_kind": doc.declared_kind})
    manifest: dict[str, Any] = {"case_id": case.case_id, "documents": entries}
    if case.submitted_at:
        manifest["submitted_at"] = case.submitted_at
    (dest / "manifest.json").write_text(json.dumps(manifest, indent=2), encoding="utf-8")
    return dest


def create_app(config: PipelineConfig, workspace_root: str | Path, *, workers: int = 2) -> FastAPI:
    root = Path(workspace_root)
    root.mkdir(parents=True, exist_ok=True)
    states: dict[str, _CaseState] = {}
    registry_lock = threading.Lock()
    pool = ThreadPoolExecutor(max_workers=workers)

    @contextlib.asynccontextmanager
    async def lifespan(_: FastAPI):
        yield
        pool.shutdown(wait=True)

    app = FastAPI(title="auditcase", version="1", lifespan=lifespan)

    def check_token(authorization: str | None = Header(default=None)) -> None:
        expected = os.environ.get(TOKEN_ENV)
        if expected and authorization != f"Bearer {expected}":
            raise HTTPException(401, "missing or invalid API token")

    def state_for(case_id: str) -> _CaseState:
        with registry_lock:
            state = states.get(case_id)
            if state is None and CaseWorkspace(root / case_id).exists():
                state = states[case_id] = _CaseState()
                ws = CaseWorkspace(root / case_id)
                state.status = "complete" if ws.draft() is not None else "incomplete"
        if state is None:
            raise HTTPException(404, f"unknown case {case_id!r}")
        return state

    def workspace(case_id: str) -> CaseWorkspace:
        if not _SAFE_NAME.match(case_id):
            raise HTTPException(404, f"unknown case {case_id!r}")
        state_for(case_id)
        return CaseWorkspace(root / case_id)

    def run_job(case_id: str, state: _CaseState, job) -> None:
        with state.lock:
            state.status, state.error, state.failed_stage = "running", None, None
            try:
                job()
                state.status = "complete"
            except AuditCaseError as exc:
                logger.error("case %s: %s", case_id, exc)
                state.status, state.error = "failed", str(exc)
                state.failed_stage = getattr(exc, "stage", None)
            except Exception as exc:  # keep the worker alive; surface the error to pollers
                logger.exception("case %s crashed", case_id)
                state.status, state.error = "failed", f"{type(exc).__name__}: {exc}"

    deps = [Depends(check_token)]

    @app.post("/cases", status_code=202, dependencies=deps)
    def submit_case(case: CaseIn) -> dict:
        tmp: Path | None = None
        if case.bundle_path:
            bundle_dir = Path(case.bundle_path)
        elif case.documents:
            tmp = Path(tempfile.mkdtemp(prefix="auditcase-upload-"))
            bundle_dir = _materialize(case, tmp / "bundle")
        else:
            raise HTTPException(400, "submit either bundle_path or documents")
        try:
            bundle = load_bundle(bundle_dir)
        except (ManifestError, AuditCaseError) as exc:
            if tmp:
                shutil.rmtree(tmp, ignore_errors=True)
            raise HTTPException(422, f"invalid bundle: {exc}") from exc
        with registry_lock:
            state = states.setdefault(bundle.case_id, _CaseState())
            state.status = "queued"

        def job() -> None:
            try:
                run_case(bundle_dir, config, root)
            finally:
                if tmp:
                    shutil.rmtree(tmp, ignore_errors=True)

        pool.submit(run_job, bundle.case_id, state, job)
        return {"case_id": bundle.case_id, "status": "queued"}

    @app.get("/cases/{case_id}", dependencies=deps)
    def case_status(case_id: str) -> dict:
        ws = workspace(case_id)
        state = state_for(case_id)
        stages = {s: ws.read_envelope(s) is not None for s in STAGES}
        return {"case_id": case_id, "status": state.status, "error": state.error,
                "failed_stage": state.failed_stage, "stages_present": stages}

    @app.get("/cases/{case_id}/stages/{stage}", dependencies=deps)
    def stage_output(case_id: str, stage: str) -> dict:
        ws = workspace(case_id)
        if stage not in STAGES:
            raise HTTPException(404, f"unknown stage {stage!r}")
        env = ws.read_envelope(stage)
        if env is None:
            raise HTTPException(404, f"stage {stage!r} has no output yet")
        return {"stage": stage, "inputs_digest": env["inputs_digest"], "output": env["output"]}

    @app.post("/cases/{case_id}/stages/{stage}/rerun", dependencies=deps)
    def rerun_stage(case_id: str, stage: str) -> dict:
        ws = workspace(case_id)
        if stage not in STAGES:
            raise HTTPException(404, f"unknown stage {stage!r}")
        state = state_for(case_id)
        with state.lock:
            try:
                report = resume_stage(ws, stage, config)
            except StaleUpstream as exc:
                raise HTTPException(409, str(exc)) from exc
            except AuditCaseError as exc:
                raise HTTPException(500, str(exc)) from exc
        return report.to_dict()

    @app.post("/cases/{case_id}/sections/{section}/regenerate", dependencies=deps)
    def regenerate(case_id: str, section: str) -> dict:
        ws = workspace(case_id)
        try:
            sid = SectionId(section)
        except ValueError:
            raise HTTPException(404, f"unknown section {section!r}") from None
        state = state_for(case_id)
        with state.lock:
            try:
                draft = regenerate_instruction_section(ws, sid, config)
            except StaleUpstream as exc:
                raise HTTPException(409, str(exc)) from exc
            except AuditCaseError as exc:
                raise HTTPException(500, str(exc)) from exc
        return {s.section_id.value: s.inputs_digest for s in draft.sections}

    @app.get("/cases/{case_id}/instruction", dependencies=deps)
    def instruction(case_id: str, format: str = "markdown"):
        ws = workspace(case_id)
        draft = ws.draft()
        if draft is None:
            raise HTTPException(404, "no instruction draft yet")
        if format == "json":
            return draft.to_dict()
        return PlainTextResponse(draft.to_markdown(), media_type="text/markdown; charset=utf-8")

    @app.get("/cases/{case_id}/report", dependencies=deps)
    def run_report(case_id: str) -> dict:
        ws = workspace(case_id)
        if not ws.report_path.is_file():
            raise HTTPException(404, "no run report yet")
        return json.loads(ws.report_path.read_text(encoding="utf-8"))

    return app


def serve(config: PipelineConfig, workspace_root: str | Path, address: str = "127.0.0.1:8080") -> None:
    import uvicorn

    host, _, port = address.rpartition(":")
    uvicorn.run(create_app(config, workspace_root), host=host or "127.0.0.1", port=int(port))
