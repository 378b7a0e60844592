"""Checklist-based evaluation of a candidate text against a reference.

An LLM turns each text into a checklist of atomic elements and then judges,
item by item, whether the other text contains them. Precision checks the
candidate's checklist against the reference; recall checks the reference's
checklist against the candidate.
"""

from __future__ import annotations

import enum
import logging
import math
import re
import statistics
from collections.abc import Iterable, Mapping, Sequence
from dataclasses import asdict, dataclass

from auditcase.errors import (
    ChecklistParseError,
    DimensionError,
    EmptyInput,
    JudgmentParseError,
    Undefined,
)
from auditcase.llm.gateway import Gateway
from auditcase.llm.templates import PromptTemplate, render_prompt

logger = logging.getLogger(__name__)


class ChecklistSource(str, enum.Enum):
    REFERENCE = "Reference"
    CANDIDATE = "Candidate"


@dataclass(frozen=True)
class ChecklistItem:
    item_id: int
    statement: str


@dataclass(frozen=True)
class Checklist:
    source: ChecklistSource
    items: tuple[ChecklistItem, ...]

    def __post_init__(self) -> None:
        if not self.items:
            raise ValueError("a checklist needs at least one item")
        if any(not it.statement.strip() for it in self.items):
            raise ValueError("checklist statements must be nonempty")

    def __len__(self) -> int:
        return len(self.items)


@dataclass(frozen=True)
class ItemJudgment:
    item_id: int
    present: bool


@dataclass(frozen=True)
class EvalScores:
    precision: float
    recall: float
    f1: float

    @classmethod
    def from_pr(cls, precision: float, recall: float) -> EvalScores:
        return cls(precision, recall, f1(precision, recall))

    def to_dict(self) -> dict:
        return asdict(self)


CHECKLIST_TEMPLATE = PromptTemplate(
    "checkeval.checklist",
    """Read the text below and compose a checklist of the elements it contains.
Write one atomic verifiable element per line, as a numbered list (1., 2., ...).
Do not group items under headings and do not add any other text.

Text:
{text}""",
)

JUDGE_TEMPLATE = PromptTemplate(
    "checkeval.judge",
    """For each checklist item below, decide whether the text contains that element.
Answer with exactly one line per item, in order, in the form "<number>. yes" or "<number>. no".

Checklist:
{checklist}

Text:
{text}""",
)

JUDGE_REMINDER = "\n\nREMINDER: the checklist has {n} items; answer exactly {n} lines, one per item."

_ITEM_RE = re.compile(r"^(\s*)(?:\d+\s*[.)]|[-*•]|\[[ xX]?\])\s+(.*\S)\s*$")
_JUDGE_RE = re.compile(r"^\s*(\d+)\s*[.):-]?\s*(yes|no|sim|não|nao)\b", re.IGNORECASE)


def parse_checklist(text: str, source: ChecklistSource) -> Checklist:
    """Parse enumerated or bulleted lines into a flat checklist.

    Nested bullets are flattened into the list. A parent line that only
    introduces its children (ends with a colon and has nested items below)
    is dropped, since it is a heading rather than an element.
    """
    entries: list[tuple[int, str]] = []
    for line in text.splitlines():
        m = _ITEM_RE.match(line.expandtabs(4))
        if m:
            entries.append((len(m.group(1)), m.group(2).strip()))
    statements = []
    for i, (indent, stmt) in enumerate(entries):
        has_children = i + 1 < len(entries) and entries[i + 1][0] > indent
        if stmt.endswith(":") and has_children:
            continue
        statements.append(stmt)
    if not statements:
        raise ChecklistParseError("no checklist items found in model output")
    return Checklist(source, tuple(ChecklistItem(i, s) for i, s in enumerate(statements, start=1)))


def generate_checklist(text: str, source: ChecklistSource, gateway: Gateway, *,
                       stage: str = "checkeval") -> Checklist:
    if not text.strip():
        raise ValueError("cannot build a checklist from empty text")
    reply = gateway.ask(CHECKLIST_TEMPLATE, {"text": gateway.fit(text, 200)}, stage=stage)
    return parse_checklist(reply, source)


def parse_judgments(reply: str, checklist: Checklist) -> list[ItemJudgment] | None:
    """Return one judgment per item, or None when the reply does not cover the checklist exactly."""
    answers: dict[int, bool] = {}
    for line in reply.splitlines():
        m = _JUDGE_RE.match(line)
        if m:
            answers.setdefault(int(m.group(1)), m.group(2).lower() in ("yes", "sim"))
    ids = [it.item_id for it in checklist.items]
    if sorted(answers) != ids:
        return None
    return [ItemJudgment(i, answers[i]) for i in ids]


def judge_against(checklist: Checklist, target_text: str, gateway: Gateway, *,
                  stage: str = "checkeval") -> list[ItemJudgment]:
    if not target_text.strip():
        raise ValueError("target text must be nonempty")
    block = "\n".join(f"{it.item_id}. {it.statement}" for it in checklist.items)
    variables = {"checklist": block, "text": gateway.fit(target_text, gateway.count(block) + 200)}
    prompt = render_prompt(JUDGE_TEMPLATE, variables)
    judgments = parse_judgments(gateway.ask_raw(prompt, JUDGE_TEMPLATE.template_id, stage=stage), checklist)
    if judgments is None:
        logger.info("judgment count mismatch for %d items; reprompting", len(checklist))
        reply = gateway.ask_raw(prompt + JUDGE_REMINDER.format(n=len(checklist)),
                                JUDGE_TEMPLATE.template_id, stage=stage)
        judgments = parse_judgments(reply, checklist)
    if judgments is None:
        raise JudgmentParseError(f"expected {len(checklist)} yes/no answers")
    return judgments


def fraction_present(judgments: Sequence[ItemJudgment]) -> float:
    return sum(j.present for j in judgments) / len(judgments)


def f1(precision: float, recall: float) -> float:
    if precision + recall == 0:
        return 0.0
    return 2 * precision * recall / (precision + recall)


def score_pair(reference_text: str, candidate_text: str, gateway: Gateway, *,
               stage: str = "checkeval") -> EvalScores:
    if not reference_text.strip() or not candidate_text.strip():
        raise ValueError("reference and candidate must be nonempty")
    ref_list = generate_checklist(reference_text, ChecklistSource.REFERENCE, gateway, stage=stage)
    cand_list = generate_checklist(candidate_text, ChecklistSource.CANDIDATE, gateway, stage=stage)
    recall = fraction_present(judge_against(ref_list, candidate_text, gateway, stage=stage))
    precision = fraction_present(judge_against(cand_list, reference_text, gateway, stage=stage))
    return EvalScores.from_pr(precision, recall)


# -- aggregation -------------------------------------------------------------


@dataclass(frozen=True)
class MetricStats:
    mean: float
    std: float
    min: float
    max: float

    def to_dict(self) -> dict:
        return asdict(self)


def describe(values: Sequence[float]) -> MetricStats:
    if not values:
        raise EmptyInput("no values to aggregate")
    vals = [float(v) for v in values]
    lo, hi = min(vals), max(vals)
    mean = min(hi, max(lo, statistics.fmean(vals)))  # guard against rounding past the extremes
    std = statistics.stdev(vals, mean) if len(vals) > 1 else 0.0
    return MetricStats(mean, std, lo, hi)


def aggregate_stats(scores: Sequence[EvalScores]) -> dict[str, MetricStats]:
    """Per-metric mean, sample standard deviation (n-1), min and max."""
    if not scores:
        raise EmptyInput("no scores to aggregate")
    return {
        "precision": describe([s.precision for s in scores]),
        "recall": describe([s.recall for s in scores]),
        "f1": describe([s.f1 for s in scores]),
    }


# -- rank correlation --------------------------------------------------------


def _check_pair(x: Sequence[float], y: Sequence[float]) -> None:
    if len(x) != len(y):
        raise DimensionError(f"length mismatch: {len(x)} vs {len(y)}")
    if len(x) < 2:
        raise DimensionError("at least two observations are required")


def average_ranks(values: Sequence[float]) -> list[float]:
    order = sorted(range(len(values)), key=lambda i: values[i])
    ranks = [0.0] * len(values)
    i = 0
    while i < len(order):
        j = i
        while j + 1 < len(order) and values[order[j + 1]] == values[order[i]]:
            j += 1
        avg = (i + j) / 2 + 1
        for k in range(i, j + 1):
            ranks[order[k]] = avg
        i = j + 1
    return ranks


def pearson(x: Sequence[float], y: Sequence[float]) -> float:
    _check_pair(x, y)
    mx, my = statistics.fmean(x), statistics.fmean(y)
    dx = [a - mx for a in x]
    dy = [b - my for b in y]
    sxx = math.fsum(d * d for d in dx)
    syy = math.fsum(d * d for d in dy)
    if sxx == 0 or syy == 0:
        raise Undefined("zero variance")
    r = math.fsum(a * b for a, b in zip(dx, dy)) / math.sqrt(sxx * syy)
    return max(-1.0, min(1.0, r))


def spearman(x: Sequence[float], y: Sequence[float]) -> float:
    _check_pair(x, y)
    try:
        return pearson(average_ranks(x), average_ranks(y))
    except Undefined:
        raise Undefined("zero rank variance") from None


def _tied_pairs(sorted_values: Sequence) -> int:
    """Pairs sharing a value, for a sequence where equal values are adjacent."""
    total, run = 0, 1
    for a, b in zip(sorted_values, sorted_values[1:]):
        if a == b:
            run += 1
        else:
            total += run * (run - 1) // 2
            run = 1
    return total + run * (run - 1) // 2


def _count_inversions(seq: list) -> int:
    """Merge sort in place, returning the number of strictly inverted pairs."""
    n = len(seq)
    if n < 2:
        return 0
    mid = n // 2
    left, right = seq[:mid], seq[mid:]
    inv = _count_inversions(left) + _count_inversions(right)
    i = j = k = 0
    while i < len(left) and j < len(right):
        if right[j] < left[i]:
            seq[k] = right[j]
            inv += len(left) - i
            j += 1
        else:
            seq[k] = left[i]
            i += 1
        k += 1
    seq[k:] = left[i:] + right[j:]
    return inv


def kendall_tau(x: Sequence[float], y: Sequence[float]) -> float:
    """Kendall tau-b in O(n log n) (Knight's algorithm)."""
    _check_pair(x, y)
    n = len(x)
    pairs = sorted(zip(x, y))
    n0 = n * (n - 1) // 2
    n1 = _tied_pairs([p[0] for p in pairs])
    n3 = _tied_pairs(pairs)  # tied in both
    ys = [p[1] for p in pairs]
    swaps = _count_inversions(ys)  # ys is now sorted
    n2 = _tied_pairs(ys)
    if n0 == n1 or n0 == n2:
        raise Undefined("a variable is constant")
    # concordant minus discordant over pairs untied in both variables
    s = n0 - n1 - n2 + n3 - 2 * swaps
    tau = s / math.sqrt((n0 - n1) * (n0 - n2))
    return max(-1.0, min(1.0, tau))


@dataclass(frozen=True)
class CorrelationResult:
    spearman_rho: float
    kendall_tau: float
    n: int

    def __post_init__(self) -> None:
        if self.n < 2:
            raise ValueError("correlation needs n >= 2")

    def to_dict(self) -> dict:
        return asdict(self)


def correlate(x: Sequence[float], y: Sequence[float]) -> CorrelationResult:
    return CorrelationResult(spearman(x, y), kendall_tau(x, y), len(x))


# -- benchmark harness -------------------------------------------------------


@dataclass(frozen=True)
class BenchmarkRow:
    reference: str
    candidate: str
    human_scores: Mapping[str, float | None]

    @classmethod
    def from_dict(cls, data: Mapping) -> BenchmarkRow:
        return cls(data.get("reference", ""), data.get("candidate", ""), dict(data.get("human_scores") or {}))


def benchmark_harness(
    dataset: Iterable[Mapping | BenchmarkRow],
    gateway: Gateway,
    *,
    metric: str = "f1",
    dimensions: Sequence[str] | None = None,
    stage: str = "checkeval",
) -> dict[str, CorrelationResult]:
    """Correlate check-eval scores with human judgments, per human dimension.

    Rows lacking a text or a score for some dimension are skipped for that
    dimension with a warning.
    """
    rows = [r if isinstance(r, BenchmarkRow) else BenchmarkRow.from_dict(r) for r in dataset]
    if not rows:
        raise EmptyInput("benchmark dataset is empty")
    dims = list(dimensions) if dimensions else sorted({d for r in rows for d in r.human_scores})
    if not dims:
        raise EmptyInput("no human score dimensions in dataset")

    metric_values: list[float | None] = []
    for i, row in enumerate(rows):
        if not row.reference.strip() or not row.candidate.strip():
            logger.warning("benchmark row %d: missing reference or candidate text; skipped", i)
            metric_values.append(None)
            continue
        scores = score_pair(row.reference, row.candidate, gateway, stage=stage)
        metric_values.append(getattr(scores, metric))

    results: dict[str, CorrelationResult] = {}
    for dim in dims:
        xs, ys = [], []
        for i, (row, value) in enumerate(zip(rows, metric_values)):
            human = row.human_scores.get(dim)
            if value is None:
                continue
            if human is None:
                logger.warning("benchmark row %d: no human score for %r; skipped", i, dim)
                continue
            xs.append(value)
            ys.append(float(human))
        if len(xs) < 2:
            logger.warning("dimension %r has %d usable rows; no correlation", dim, len(xs))
            continue
        results[dim] = correlate(xs, ys)
    return results
