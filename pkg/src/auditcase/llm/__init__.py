from auditcase.llm.agents import (
    Action,
    ActionKind,
    AgentStep,
    AgentTrace,
    Reasoning,
    TraceStatus,
    cot_reason,
    react_loop,
)
from auditcase.llm.backends import (
    ChatRequest,
    ChatResponse,
    HttpBackend,
    LlmBackend,
    ScriptedBackend,
    ScriptedTranscript,
    request_key,
)
from auditcase.llm.gateway import AuditRecord, Gateway
from auditcase.llm.templates import ApproxTokenizer, PromptTemplate, render_prompt, truncate_to_budget

__all__ = [
    "Action",
    "ActionKind",
    "AgentStep",
    "AgentTrace",
    "ApproxTokenizer",
    "AuditRecord",
    "ChatRequest",
    "ChatResponse",
    "Gateway",
    "HttpBackend",
    "LlmBackend",
    "PromptTemplate",
    "Reasoning",
    "ScriptedBackend",
    "ScriptedTranscript",
    "TraceStatus",
    "cot_reason",
    "react_loop",
    "render_prompt",
    "request_key",
    "truncate_to_budget",
]
