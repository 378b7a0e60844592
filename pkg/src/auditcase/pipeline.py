"""Resumable case runs over a per-case workspace.

Workspace layout::

    <root>/<case_id>/
        bundle/            copy of the submitted bundle
        extracted/         one JSON per document: text plus extraction metadata
        indexes/           BM25 indexes, one JSON file per corpus
        stages/            one JSON envelope per stage
        instruction.md     the drafted instruction
        instruction.json   structured sections with their input digests
        audit.log          one JSON line per LLM request
        run_report.json    timing and cost of the latest run (not deterministic)

Every stage envelope records the digest of its inputs. A stage is fresh when
its envelope exists and that digest matches the one computed from the current
upstream envelopes, bundle files, corpora and configuration.
"""

from __future__ import annotations

import hashlib
import json
import logging
import os
import shutil
import tempfile
import time
from collections.abc import Callable, Iterable, Mapping
from concurrent.futures import ThreadPoolExecutor
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Any

from filelock import FileLock, Timeout

from auditcase import __version__
from auditcase.admissibility import CaseContext, examine_all
from auditcase.config import PipelineConfig
from auditcase.errors import AuditCaseError, StageFailed, StaleUpstream, WorkspaceLocked
from auditcase.extraction import (
    AllegationList,
    BasicInfoConfig,
    extract_allegations_requests,
    extract_basic_info,
    first_pages_text,
)
from auditcase.ingest import CaseBundle, ExtractedDocument, ingest_bundle, load_bundle
from auditcase.llm.gateway import AuditRecord, Gateway
from auditcase.precautionary import analyse_fumus, analyse_periculum
from auditcase.recommendations import (
    InstructionDraft,
    canonical_json,
    draft_instruction,
    regenerate_section,
)
from auditcase.retrieval import CorpusId, Index, SearchService, chunk_document, read_corpus_jsonl
from auditcase.validation import SectionId

logger = logging.getLogger(__name__)

SCHEMA_VERSION = 1

STAGES: tuple[str, ...] = (
    "ingest", "index", "basic_info", "allegations", "admissibility", "periculum", "fumus", "recommendations",
)

# Stage dependency graph. Kept as plain data so it can be audited and corrected in one place.
DEPENDENCIES: dict[str, tuple[str, ...]] = {
    "ingest": (),
    "index": ("ingest",),
    "basic_info": ("ingest", "index"),
    "allegations": ("ingest",),
    "admissibility": ("ingest", "index"),
    "periculum": ("ingest", "index"),
    "fumus": ("allegations", "index"),
    "recommendations": ("basic_info", "allegations", "admissibility", "periculum", "fumus"),
}

LLM_STAGES = frozenset({"basic_info", "allegations", "admissibility", "periculum", "fumus", "recommendations"})


def ancestors(stage: str) -> list[str]:
    seen: set[str] = set()
    stack = list(DEPENDENCIES[stage])
    while stack:
        s = stack.pop()
        if s not in seen:
            seen.add(s)
            stack.extend(DEPENDENCIES[s])
    return [s for s in STAGES if s in seen]


def dependents(stage: str) -> list[str]:
    """The stage itself plus everything downstream of it, in run order."""
    return [s for s in STAGES if s == stage or stage in ancestors(s)]


def sha256_bytes(data: bytes) -> str:
    return hashlib.sha256(data).hexdigest()


def digest_of(data: Any) -> str:
    return sha256_bytes(canonical_json(data).encode("utf-8"))


def atomic_write(path: Path, data: str | bytes) -> None:
    path.parent.mkdir(parents=True, exist_ok=True)
    raw = data.encode("utf-8") if isinstance(data, str) else data
    fd, tmp = tempfile.mkstemp(dir=path.parent, prefix=f".{path.name}.", suffix=".tmp")
    try:
        with os.fdopen(fd, "wb") as fh:
            fh.write(raw)
            fh.flush()
            os.fsync(fh.fileno())
        os.replace(tmp, path)
    except BaseException:
        Path(tmp).unlink(missing_ok=True)
        raise


def pretty_json(data: Any) -> str:
    return json.dumps(data, ensure_ascii=False, sort_keys=True, indent=2) + "\n"


# -- workspace ----------------------------------------------------------------


class CaseWorkspace:
    def __init__(self, path: str | Path) -> None:
        self.path = Path(path)

    @property
    def case_id(self) -> str:
        return self.path.name

    @property
    def bundle_dir(self) -> Path:
        return self.path / "bundle"

    @property
    def stages_dir(self) -> Path:
        return self.path / "stages"

    @property
    def indexes_dir(self) -> Path:
        return self.path / "indexes"

    @property
    def extracted_dir(self) -> Path:
        return self.path / "extracted"

    @property
    def audit_log(self) -> Path:
        return self.path / "audit.log"

    @property
    def report_path(self) -> Path:
        return self.path / "run_report.json"

    def stage_path(self, stage: str) -> Path:
        return self.stages_dir / f"{stage}.json"

    def exists(self) -> bool:
        return (self.bundle_dir / "manifest.json").is_file()

    def bundle(self) -> CaseBundle:
        return load_bundle(self.bundle_dir)

    def read_envelope(self, stage: str) -> dict | None:
        path = self.stage_path(stage)
        if not path.is_file():
            return None
        data = json.loads(path.read_text(encoding="utf-8"))
        if data.get("schema_version") != SCHEMA_VERSION or data.get("stage") != stage:
            logger.warning("ignoring %s: unexpected schema or stage", path)
            return None
        return data

    def output(self, stage: str) -> dict | None:
        env = self.read_envelope(stage)
        return None if env is None else env["output"]

    def draft(self) -> InstructionDraft | None:
        out = self.output("recommendations")
        return None if out is None else InstructionDraft.from_dict(out)

    def lock(self, timeout: float = 0.0) -> FileLock:
        self.path.mkdir(parents=True, exist_ok=True)
        return FileLock(str(self.path / ".lock"), timeout=timeout)

    def import_bundle(self, source: Path) -> None:
        """Copy a bundle into the workspace, replacing an older copy that differs."""
        source = Path(source).resolve()
        if source == self.bundle_dir.resolve():
            return
        if self.bundle_dir.exists():
            if _tree_digest(source) == _tree_digest(self.bundle_dir):
                return
            shutil.rmtree(self.bundle_dir)
        shutil.copytree(source, self.bundle_dir)


def _tree_digest(root: Path) -> str:
    h = hashlib.sha256()
    for p in sorted(root.rglob("*")):
        if p.is_file():
            h.update(p.relative_to(root).as_posix().encode("utf-8") + b"\0")
            h.update(sha256_bytes(p.read_bytes()).encode("ascii"))
    return h.hexdigest()


# -- report --------------------------------------------------------------------


@dataclass
class StageReport:
    stage: str
    status: str  # executed | skipped | failed
    duration_s: float = 0.0
    requests: int = 0
    tokens_in: int = 0
    tokens_out: int = 0
    estimated_cost: float = 0.0
    error: str | None = None


@dataclass
class RunReport:
    case_id: str
    stages: list[StageReport] = field(default_factory=list)

    @property
    def total_duration_s(self) -> float:
        return sum(s.duration_s for s in self.stages)

    @property
    def ok(self) -> bool:
        return all(s.status != "failed" for s in self.stages)

    def executed(self) -> list[str]:
        return [s.stage for s in self.stages if s.status == "executed"]

    def skipped(self) -> list[str]:
        return [s.stage for s in self.stages if s.status == "skipped"]

    def to_dict(self) -> dict:
        return {
            "case_id": self.case_id,
            "total_duration_s": self.total_duration_s,
            "total_tokens": sum(s.tokens_in + s.tokens_out for s in self.stages),
            "estimated_cost": sum(s.estimated_cost for s in self.stages),
            "stages": [asdict(s) for s in self.stages],
        }

    @classmethod
    def from_dict(cls, data: Mapping) -> RunReport:
        return cls(data["case_id"], [StageReport(**s) for s in data["stages"]])


# -- stage execution -------------------------------------------------------------


class _Run:
    """State shared by the stages of one run: config, workspace, gateway and lazy search service."""

    def __init__(self, ws: CaseWorkspace, config: PipelineConfig, gateway: Gateway | None) -> None:
        self.ws = ws
        self.config = config
        self.gateway = gateway or config.gateway()
        self.bundle = ws.bundle()
        self._search: SearchService | None = None
        self._backend_fp: str | None = None

    def backend_fingerprint(self) -> str:
        if self._backend_fp is None:
            self._backend_fp = self.config.backend.fingerprint()
        return self._backend_fp

    def documents(self) -> list[ExtractedDocument]:
        return [ExtractedDocument.from_dict(d) for d in self.ws.output("ingest")["documents"]]

    def main_document(self) -> ExtractedDocument:
        main_id = self.bundle.main.doc_id
        return next(d for d in self.documents() if d.doc_id == main_id)

    def search(self) -> SearchService:
        if self._search is None:
            manifest = self.ws.output("index")
            indexes = {
                CorpusId(name): Index.load(self.ws.path / entry["path"])
                for name, entry in manifest["corpora"].items()
            }
            self._search = SearchService(indexes, top_k=self.config.top_k)
        return self._search

    # inputs digests

    def external_inputs(self, stage: str) -> dict:
        cfg = self.config
        if stage == "ingest":
            return {
                "bundle": _tree_digest(self.ws.bundle_dir),
                "max_invalid_ratio": cfg.max_invalid_ratio,
            }
        if stage == "index":
            return {c.slug: sha256_bytes(p.read_bytes()) for c, p in sorted(cfg.corpora.items())}
        extra: dict[str, Any] = {"model": self.backend_fingerprint(), "context_budget": cfg.context_budget,
                                 "max_output_tokens": cfg.max_output_tokens}
        if stage == "basic_info":
            extra.update(schema=[asdict(f) for f in cfg.schema().fields],
                         crafted_queries=cfg.crafted_queries, top_k=cfg.top_k)
        elif stage == "allegations":
            extra.update(example=cfg.allegation_example)
        elif stage == "admissibility":
            extra.update(steps=cfg.admissibility_steps, top_k=cfg.top_k)
        elif stage == "periculum":
            extra.update(keywords=cfg.contract_keywords, per_doc_calls=cfg.per_doc_calls, top_k=cfg.top_k)
        elif stage == "fumus":
            extra.update(steps=cfg.fumus_steps, top_k=cfg.top_k)
        elif stage == "recommendations":
            extra.update(guidelines=cfg.guidelines.to_json(), generated_at=self.generated_at())
        return extra

    def inputs_digest(self, stage: str) -> str | None:
        """Digest of everything the stage consumes; None when an upstream output is missing."""
        upstream = {}
        for dep in DEPENDENCIES[stage]:
            env = self.ws.read_envelope(dep)
            if env is None:
                return None
            upstream[dep] = digest_of(env["output"])
        return digest_of({
            "stage": stage,
            "version": __version__,
            "upstream": upstream,
            "external": self.external_inputs(stage),
        })

    def is_fresh(self, stage: str) -> bool:
        env = self.ws.read_envelope(stage)
        return env is not None and env["inputs_digest"] == self.inputs_digest(stage)

    def generated_at(self) -> str:
        # taken from the manifest so that reruns stay byte-identical
        return self.bundle.submitted_at or "unspecified"

    # stage bodies

    def run_ingest(self) -> dict:
        result = ingest_bundle(self.bundle, max_invalid_ratio=self.config.max_invalid_ratio,
                               workers=self.config.workers)
        for doc in result.documents:
            atomic_write(self.ws.extracted_dir / f"{doc.doc_id}.json", pretty_json(doc.to_dict()))
        return {
            "documents": [d.to_dict() for d in result.documents],
            "difficulty": {k: v.value for k, v in result.difficulty.items()},
            "quality": result.quality,
        }

    def run_index(self) -> dict:
        corpora: dict[str, dict] = {}
        sources: dict[CorpusId, list] = {}
        for corpus, path in sorted(self.config.corpora.items()):
            sources[corpus] = read_corpus_jsonl(path, corpus)
        case_passages = []
        for doc in self.documents():
            case_passages.extend(chunk_document(CorpusId.CASE_DOCUMENTS, doc.doc_id, doc.text))
        sources[CorpusId.CASE_DOCUMENTS] = sources.get(CorpusId.CASE_DOCUMENTS, []) + case_passages
        for corpus, passages in sources.items():
            if not passages:
                continue
            rel = f"indexes/{corpus.slug}.json"
            payload = pretty_json(Index(passages).to_json())
            atomic_write(self.ws.path / rel, payload)
            corpora[corpus.value] = {"path": rel, "digest": sha256_bytes(payload.encode("utf-8")),
                                     "passages": len(passages)}
        self._search = None
        return {"corpora": dict(sorted(corpora.items()))}

    def run_basic_info(self) -> dict:
        cfg = self.config
        form = extract_basic_info(
            self.main_document(), cfg.schema(), self.search(), self.gateway,
            BasicInfoConfig(cfg.crafted_queries, cfg.top_k), stage="basic_info",
        )
        return form.to_dict()

    def run_allegations(self) -> dict:
        alleg = extract_allegations_requests(self.main_document().text, self.gateway,
                                             self.config.allegation_example, stage="allegations")
        return alleg.to_dict()

    def run_admissibility(self) -> dict:
        context = CaseContext(self.bundle.case_id, first_pages_text(self.main_document()))
        report = examine_all(context, self.search(), self.gateway,
                             max_steps=self.config.admissibility_steps, stage="admissibility")
        return report.to_dict()

    def run_periculum(self) -> dict:
        finding = analyse_periculum(self.documents(), self.search(), self.gateway,
                                    keywords=self.config.contract_keywords,
                                    per_doc_calls=self.config.per_doc_calls, stage="periculum")
        return finding.to_dict()

    def run_fumus(self) -> dict:
        alleg = AllegationList.from_dict(self.ws.output("allegations"))
        report = analyse_fumus(alleg.allegations, self.search(), self.gateway,
                               max_steps=self.config.fumus_steps, stage="fumus")
        return report.to_dict()

    def stage_outputs(self) -> dict[str, dict]:
        return {s: self.ws.output(s) for s in DEPENDENCIES["recommendations"]}

    def run_recommendations(self) -> dict:
        draft = draft_instruction(
            self.bundle.case_id, self.stage_outputs(), self.config.guidelines, self.gateway,
            self.generated_at(), previous=self.ws.draft(), stage="recommendations",
        )
        return draft.to_dict()

    def execute(self, stage: str) -> dict:
        return getattr(self, f"run_{stage}")()

    # commit

    def commit(self, stage: str, inputs_digest: str, output: dict, records: list[AuditRecord]) -> None:
        envelope = {
            "schema_version": SCHEMA_VERSION,
            "stage": stage,
            "inputs_digest": inputs_digest,
            "output": output,
            "audit": [r.to_dict() for r in records],
        }
        atomic_write(self.ws.stage_path(stage), pretty_json(envelope))
        if stage == "recommendations":
            draft = InstructionDraft.from_dict(output)
            atomic_write(self.ws.path / "instruction.md", draft.to_markdown())
            atomic_write(self.ws.path / "instruction.json", pretty_json(draft.to_dict()))
        _append_audit(self.ws, stage, envelope)


def _commit_id(envelope: Mapping) -> str:
    return digest_of(envelope)


def _append_audit(ws: CaseWorkspace, stage: str, envelope: Mapping) -> None:
    commit = _commit_id(envelope)
    lines = [
        canonical_json({"commit": commit, "stage": stage, **rec})
        for rec in envelope["audit"]
    ]
    # a commit marker makes recovery idempotent even for stages without requests
    lines.append(canonical_json({"commit": commit, "stage": stage, "committed": True}))
    with open(ws.audit_log, "a", encoding="utf-8") as fh:
        fh.write("\n".join(lines) + "\n")
        fh.flush()
        os.fsync(fh.fileno())


def _append_failed(ws: CaseWorkspace, stage: str, records: list[AuditRecord]) -> None:
    if not records:
        return
    with open(ws.audit_log, "a", encoding="utf-8") as fh:
        fh.write("".join(canonical_json({"stage": stage, "failed_stage": True, **r.to_dict()}) + "\n"
                         for r in records))


def reconcile_audit_log(ws: CaseWorkspace) -> list[str]:
    """Append audit records of committed stages that a crash kept out of audit.log."""
    logged: set[str] = set()
    if ws.audit_log.is_file():
        text = ws.audit_log.read_text(encoding="utf-8")
        if text and not text.endswith("\n"):
            # torn final line from an interrupted append
            text = text[: text.rfind("\n") + 1]
            atomic_write(ws.audit_log, text)
        for line in text.splitlines():
            rec = json.loads(line)
            if rec.get("committed"):
                logged.add(rec["commit"])
    repaired = []
    for stage in STAGES:
        env = ws.read_envelope(stage)
        if env is not None and _commit_id(env) not in logged:
            _append_audit(ws, stage, env)
            repaired.append(stage)
    return repaired


def read_audit_log(ws: CaseWorkspace) -> list[dict]:
    if not ws.audit_log.is_file():
        return []
    out = []
    for line in ws.audit_log.read_text(encoding="utf-8").splitlines():
        rec = json.loads(line)
        if not rec.get("committed"):
            out.append(rec)
    return out


StageHook = Callable[[str], None]


def _run_stages(
    ws: CaseWorkspace,
    config: PipelineConfig,
    *,
    force: Iterable[str] = (),
    only: Iterable[str] | None = None,
    gateway: Gateway | None = None,
    on_stage_committed: StageHook | None = None,
) -> RunReport:
    run = _Run(ws, config, gateway)
    forced = set(force)
    selected = set(only) if only is not None else set(STAGES)
    report = RunReport(run.bundle.case_id)
    reconcile_audit_log(ws)
    for stage in STAGES:
        if stage not in selected:
            continue
        digest = run.inputs_digest(stage)
        if digest is None:
            missing = [d for d in DEPENDENCIES[stage] if ws.read_envelope(d) is None]
            raise StaleUpstream(missing)
        env = ws.read_envelope(stage)
        if stage not in forced and env is not None and env["inputs_digest"] == digest:
            report.stages.append(StageReport(stage, "skipped"))
            continue
        run.gateway.drain()
        start = time.perf_counter()
        try:
            with run.gateway.stage(stage):
                output = run.execute(stage)
        except AuditCaseError as exc:
            records = run.gateway.drain()
            _append_failed(ws, stage, records)
            report.stages.append(_stage_report(stage, "failed", start, records, run.gateway, str(exc)))
            _write_report(ws, report)
            raise StageFailed(stage, exc) from exc
        records = run.gateway.drain()
        run.commit(stage, digest, output, records)
        report.stages.append(_stage_report(stage, "executed", start, records, run.gateway))
        logger.info("stage %s committed (%d requests)", stage, len(records))
        if on_stage_committed is not None:
            on_stage_committed(stage)
    _write_report(ws, report)
    return report


def _stage_report(stage: str, status: str, start: float, records: list[AuditRecord],
                  gateway: Gateway, error: str | None = None) -> StageReport:
    return StageReport(
        stage, status, time.perf_counter() - start, len(records),
        sum(r.tokens_in for r in records), sum(r.tokens_out for r in records),
        gateway.estimate_cost(records), error,
    )


def _write_report(ws: CaseWorkspace, report: RunReport) -> None:
    atomic_write(ws.report_path, pretty_json(report.to_dict()))


def _locked(ws: CaseWorkspace) -> FileLock:
    lock = ws.lock()
    try:
        lock.acquire()
    except Timeout:
        raise WorkspaceLocked(f"workspace {ws.path} is in use by another run") from None
    return lock


# -- public operations ----------------------------------------------------------


def run_case(
    bundle_path: str | Path,
    config: PipelineConfig,
    workspace_root: str | Path,
    *,
    gateway: Gateway | None = None,
    on_stage_committed: StageHook | None = None,
) -> RunReport:
    """Run every stage that is not fresh. The manifest is validated before any stage starts."""
    bundle = load_bundle(bundle_path)
    ws = CaseWorkspace(Path(workspace_root) / bundle.case_id)
    lock = _locked(ws)
    try:
        ws.import_bundle(Path(bundle_path))
        return _run_stages(ws, config, gateway=gateway, on_stage_committed=on_stage_committed)
    finally:
        lock.release()


def stale_stages(ws: CaseWorkspace, config: PipelineConfig) -> list[str]:
    run = _Run(ws, config, gateway=None)
    return [s for s in STAGES if not run.is_fresh(s)]


def resume_stage(
    workspace: str | Path | CaseWorkspace,
    stage: str,
    config: PipelineConfig,
    *,
    gateway: Gateway | None = None,
    on_stage_committed: StageHook | None = None,
) -> RunReport:
    """Re-execute ``stage`` and everything downstream of it; upstream must be fresh."""
    if stage not in DEPENDENCIES:
        raise ValueError(f"unknown stage {stage!r}; expected one of {', '.join(STAGES)}")
    ws = workspace if isinstance(workspace, CaseWorkspace) else CaseWorkspace(workspace)
    if not ws.exists():
        raise FileNotFoundError(f"no case workspace at {ws.path}")
    lock = _locked(ws)
    try:
        run = _Run(ws, config, gateway)
        stale = [s for s in ancestors(stage) if not run.is_fresh(s)]
        if stale:
            raise StaleUpstream(stale)
        cascade = dependents(stage)
        return _run_stages(ws, config, force=cascade, only=cascade, gateway=run.gateway,
                           on_stage_committed=on_stage_committed)
    finally:
        lock.release()


def regenerate_instruction_section(
    workspace: str | Path | CaseWorkspace,
    section: SectionId,
    config: PipelineConfig,
    *,
    gateway: Gateway | None = None,
) -> InstructionDraft:
    """Redraft one section from the current stage outputs; the other sections keep their bytes."""
    ws = workspace if isinstance(workspace, CaseWorkspace) else CaseWorkspace(workspace)
    lock = _locked(ws)
    try:
        run = _Run(ws, config, gateway)
        previous = ws.draft()
        if previous is None:
            raise StaleUpstream(["recommendations"])
        digest = run.inputs_digest("recommendations")
        if digest is None:
            raise StaleUpstream([d for d in DEPENDENCIES["recommendations"] if ws.read_envelope(d) is None])
        run.gateway.drain()
        with run.gateway.stage("recommendations"):
            draft = regenerate_section(previous, section, run.stage_outputs(), config.guidelines, run.gateway)
        run.commit("recommendations", digest, draft.to_dict(), run.gateway.drain())
        return draft
    finally:
        lock.release()


def run_many(
    bundle_paths: Iterable[str | Path],
    config: PipelineConfig,
    workspace_root: str | Path,
    *,
    workers: int | None = None,
) -> dict[str, RunReport | Exception]:
    """Run independent cases in parallel, one writer per workspace."""
    paths = [Path(p) for p in bundle_paths]

    def one(path: Path) -> RunReport | Exception:
        try:
            return run_case(path, config, workspace_root)
        except Exception as exc:  # reported per case; other cases continue
            logger.error("case %s failed: %s", path, exc)
            return exc

    with ThreadPoolExecutor(max_workers=workers or config.workers) as pool:
        return {str(p): r for p, r in zip(paths, pool.map(one, paths))}
