"""Exception hierarchy shared across the package."""

from __future__ import annotations


class AuditCaseError(Exception):
    """Base class for all package errors."""


# ingest


class ManifestError(AuditCaseError):
    pass


class IoError(AuditCaseError):
    pass


class ExtractionFailed(AuditCaseError):
    def __init__(self, doc_id: str, primary_cause: str, fallback_cause: str) -> None:
        self.doc_id = doc_id
        self.primary_cause = primary_cause
        self.fallback_cause = fallback_cause
        super().__init__(
            f"extraction failed for {doc_id!r}: primary: {primary_cause}; fallback: {fallback_cause}"
        )


class QualityUndefined(AuditCaseError):
    pass


# retrieval


class EmptyCorpus(AuditCaseError):
    pass


class NotFound(AuditCaseError):
    pass


class EmptyQuery(AuditCaseError):
    pass


# llm gateway


class MissingVariable(AuditCaseError):
    def __init__(self, name: str) -> None:
        self.name = name
        super().__init__(f"missing template variable {name!r}")


class BudgetExceeded(AuditCaseError):
    pass


class BackendError(AuditCaseError):
    pass


class UnscriptedRequest(AuditCaseError):
    def __init__(self, template_id: str | None, request_key: str, excerpt: str) -> None:
        self.template_id = template_id
        self.request_key = request_key
        super().__init__(
            f"no scripted response for template={template_id!r} key={request_key[:12]}: {excerpt!r}"
        )


class MalformedAction(AuditCaseError):
    pass


class ParseError(AuditCaseError):
    pass


# stage-level parse errors


class FormParseError(ParseError):
    pass


class AllegationParseError(ParseError):
    pass


class ChecklistParseError(ParseError):
    pass


class JudgmentParseError(ParseError):
    pass


class DraftMismatch(AuditCaseError):
    pass


# recommendations


class MissingStage(AuditCaseError):
    def __init__(self, section_id: str, stage: str) -> None:
        self.section_id = section_id
        self.stage = stage
        super().__init__(f"section {section_id} requires stage output {stage!r}")


class AssemblyError(AuditCaseError):
    pass


# check-eval


class EmptyInput(AuditCaseError):
    pass


class DimensionError(AuditCaseError):
    pass


class Undefined(AuditCaseError):
    pass


# validation builder


class SectionNotFound(AuditCaseError):
    pass


class MalformedInstruction(AuditCaseError):
    pass


class LabelParseError(AuditCaseError):
    def __init__(self, criterion: str, detail: str = "") -> None:
        self.criterion = criterion
        super().__init__(f"cannot parse label for {criterion}" + (f": {detail}" if detail else ""))


# pipeline


class ConfigError(AuditCaseError):
    pass


class StageFailed(AuditCaseError):
    def __init__(self, stage: str, cause: BaseException) -> None:
        self.stage = stage
        self.cause = cause
        super().__init__(f"stage {stage!r} failed: {cause}")


class StaleUpstream(AuditCaseError):
    def __init__(self, stages: list[str]) -> None:
        self.stages = stages
        super().__init__(f"upstream stages are stale: {', '.join(stages)}")


class WorkspaceLocked(AuditCaseError):
    pass
