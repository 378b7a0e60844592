"""Okapi BM25 indexes over case documents and the external corpora."""

from __future__ import annotations

import enum
import json
import math
import re
import threading
from collections import Counter
from collections.abc import Callable, Iterable, Mapping, Sequence
from dataclasses import dataclass, replace
from pathlib import Path
from typing import Protocol

from auditcase.errors import EmptyCorpus, EmptyQuery, NotFound

K1 = 1.2
B = 0.75
WINDOW_TOKENS = 512
WINDOW_OVERLAP = 128
INDEX_FORMAT = "auditcase-bm25"
INDEX_VERSION = 1

_TOKEN_RE = re.compile(r"\w+", re.UNICODE)


class CorpusId(str, enum.Enum):
    JURISPRUDENCE = "Jurisprudence"
    STATUTES_FEDERAL_LAW = "StatutesFederalLaw"
    INTERNAL_CODES = "InternalCodes"
    CASE_DOCUMENTS = "CaseDocuments"

    @property
    def slug(self) -> str:
        return _SLUGS[self]

    @classmethod
    def from_slug(cls, value: str) -> CorpusId:
        key = value.strip().lower()
        for corpus, slug in _SLUGS.items():
            if key in (slug, corpus.value.lower()):
                return corpus
        raise ValueError(f"unknown corpus {value!r}")


_SLUGS = {
    CorpusId.JURISPRUDENCE: "jurisprudence",
    CorpusId.STATUTES_FEDERAL_LAW: "statutes",
    CorpusId.INTERNAL_CODES: "internal_codes",
    CorpusId.CASE_DOCUMENTS: "case_documents",
}


def tokenize(text: str) -> list[str]:
    return [m.group(0) for m in _TOKEN_RE.finditer(text.lower())]


@dataclass(frozen=True)
class IndexedPassage:
    passage_id: str
    corpus: CorpusId
    doc_id: str
    text: str
    token_count: int

    def __post_init__(self) -> None:
        if not self.text.strip():
            raise ValueError(f"passage {self.passage_id} has empty text")


@dataclass(frozen=True)
class SearchHit:
    passage_id: str
    corpus: CorpusId
    doc_id: str
    bm25_score: float
    rerank_score: float | None
    rank: int
    text: str = ""

    @property
    def sort_score(self) -> float:
        return self.bm25_score if self.rerank_score is None else self.rerank_score

    def label(self) -> str:
        return f"{self.corpus.slug}:{self.doc_id}:{self.passage_id}"

    def to_dict(self) -> dict:
        return {
            "passage_id": self.passage_id,
            "corpus": self.corpus.value,
            "doc_id": self.doc_id,
            "bm25_score": self.bm25_score,
            "rerank_score": self.rerank_score,
            "rank": self.rank,
        }


def chunk_document(
    corpus: CorpusId,
    doc_id: str,
    text: str,
    window: int = WINDOW_TOKENS,
    overlap: int = WINDOW_OVERLAP,
) -> list[IndexedPassage]:
    """Cut a document into overlapping token windows, keeping the original text span."""
    if overlap >= window:
        raise ValueError("overlap must be smaller than the window")
    spans = [m.span() for m in _TOKEN_RE.finditer(text)]
    if not spans:
        return []
    stride = window - overlap
    passages = []
    start = 0
    while True:
        chunk = spans[start : start + window]
        body = text[chunk[0][0] : chunk[-1][1]]
        passages.append(
            IndexedPassage(f"{doc_id}#{len(passages)}", corpus, doc_id, body, len(chunk))
        )
        if start + window >= len(spans):
            break
        start += stride
    return passages


class Index:
    """Immutable BM25 index over one passage collection."""

    def __init__(self, passages: Sequence[IndexedPassage], k1: float = K1, b: float = B) -> None:
        if not passages:
            raise EmptyCorpus("cannot index an empty passage list")
        self.k1 = k1
        self.b = b
        self._passages: dict[str, IndexedPassage] = {}
        self._tf: dict[str, Counter[str]] = {}
        self._len: dict[str, int] = {}
        df: Counter[str] = Counter()
        for p in passages:
            key = self._key(p)
            if key in self._passages:
                raise ValueError(f"duplicate passage id {p.passage_id!r} in {p.corpus.value}")
            terms = tokenize(p.text)
            self._passages[key] = p
            self._tf[key] = Counter(terms)
            self._len[key] = len(terms)
            df.update(set(terms))
        self._df = dict(df)
        self.n = len(self._passages)
        self.avgdl = sum(self._len.values()) / self.n
        postings: dict[str, list[str]] = {}
        for key, tf in self._tf.items():
            for term in tf:
                postings.setdefault(term, []).append(key)
        self._postings = {t: tuple(keys) for t, keys in postings.items()}

    @staticmethod
    def _key(p: IndexedPassage) -> str:
        return f"{p.corpus.value}/{p.passage_id}"

    def __len__(self) -> int:
        return self.n

    @property
    def passages(self) -> list[IndexedPassage]:
        return list(self._passages.values())

    def df(self, term: str) -> int:
        return self._df.get(term, 0)

    def doc_length(self, passage_id: str, corpus: CorpusId | None = None) -> int:
        return self._len[self._resolve(passage_id, corpus)]

    def idf(self, term: str) -> float:
        df = self.df(term)
        return math.log(1 + (self.n - df + 0.5) / (df + 0.5))

    def passage(self, passage_id: str, corpus: CorpusId | None = None) -> IndexedPassage:
        return self._passages[self._resolve(passage_id, corpus)]

    def _resolve(self, passage_id: str, corpus: CorpusId | None) -> str:
        if corpus is not None:
            key = f"{corpus.value}/{passage_id}"
            if key in self._passages:
                return key
            raise NotFound(passage_id)
        matches = [k for k, p in self._passages.items() if p.passage_id == passage_id]
        if len(matches) != 1:
            raise NotFound(passage_id)
        return matches[0]

    def _score_key(self, key: str, query_terms: Iterable[str]) -> float:
        tf = self._tf[key]
        norm = self.k1 * (1 - self.b + self.b * self._len[key] / self.avgdl)
        score = 0.0
        # each occurrence of a repeated query term contributes again
        for term in query_terms:
            f = tf.get(term, 0)
            if f:
                score += self.idf(term) * (f * (self.k1 + 1)) / (f + norm)
        return score

    def bm25_score(
        self, query_terms: Sequence[str], passage_id: str, corpus: CorpusId | None = None
    ) -> float:
        return self._score_key(self._resolve(passage_id, corpus), query_terms)

    def candidates(self, query_terms: Iterable[str]) -> list[str]:
        keys: set[str] = set()
        for term in query_terms:
            keys.update(self._postings.get(term, ()))
        return sorted(keys)

    # -- persistence --

    def to_json(self) -> dict:
        return {
            "format": INDEX_FORMAT,
            "version": INDEX_VERSION,
            "k1": self.k1,
            "b": self.b,
            "passages": [
                {
                    "passage_id": p.passage_id,
                    "corpus": p.corpus.value,
                    "doc_id": p.doc_id,
                    "text": p.text,
                    "token_count": p.token_count,
                }
                for p in self._passages.values()
            ],
        }

    @classmethod
    def from_json(cls, data: Mapping) -> Index:
        if data.get("format") != INDEX_FORMAT or data.get("version") != INDEX_VERSION:
            raise ValueError("unsupported index file")
        passages = [
            IndexedPassage(
                p["passage_id"], CorpusId(p["corpus"]), p["doc_id"], p["text"], p["token_count"]
            )
            for p in data["passages"]
        ]
        return cls(passages, k1=data["k1"], b=data["b"])

    def save(self, path: str | Path) -> None:
        Path(path).write_text(
            json.dumps(self.to_json(), ensure_ascii=False, sort_keys=True, indent=1) + "\n",
            encoding="utf-8",
        )

    @classmethod
    def load(cls, path: str | Path) -> Index:
        return cls.from_json(json.loads(Path(path).read_text(encoding="utf-8")))


def build_index(passages: Sequence[IndexedPassage], k1: float = K1, b: float = B) -> Index:
    return Index(passages, k1, b)


class Reranker(Protocol):
    def score(self, query: str, hits: Sequence[SearchHit]) -> list[float]: ...


class IdentityReranker:
    """Keeps BM25 order: the rerank score is the BM25 score itself."""

    def score(self, query: str, hits: Sequence[SearchHit]) -> list[float]:
        return [h.bm25_score for h in hits]


class ScriptedReranker:
    """Test reranker returning fixed scores per passage id."""

    def __init__(self, scores: Mapping[str, float]) -> None:
        self.scores = dict(scores)

    def score(self, query: str, hits: Sequence[SearchHit]) -> list[float]:
        try:
            return [self.scores[h.passage_id] for h in hits]
        except KeyError as exc:
            raise NotFound(f"no scripted rerank score for passage {exc.args[0]!r}") from None


def _order(hit: SearchHit) -> tuple[float, str, str]:
    return (-hit.sort_score, hit.doc_id, hit.passage_id)


def search(
    index: Index,
    query: str,
    k: int,
    reranker: Reranker | None = None,
    *,
    depth: int = 50,
) -> list[SearchHit]:
    """Rank passages containing at least one query term.

    With a reranker, the top ``max(k, depth)`` BM25 candidates are rescored and
    reordered; ``rerank_score`` is set on every returned hit.
    """
    if k < 1:
        raise ValueError("k must be >= 1")
    terms = tokenize(query)
    if not terms:
        raise EmptyQuery(f"query {query!r} has no tokens")

    hits = []
    for key in index.candidates(terms):
        p = index._passages[key]
        hits.append(
            SearchHit(p.passage_id, p.corpus, p.doc_id, index._score_key(key, terms), None, 0, p.text)
        )
    hits.sort(key=_order)

    if reranker is not None:
        hits = hits[: max(k, depth)]
        scores = reranker.score(query, hits)
        hits = [replace(h, rerank_score=float(s)) for h, s in zip(hits, scores)]
        hits.sort(key=_order)

    return [replace(h, rank=i) for i, h in enumerate(hits[:k], start=1)]


def read_corpus_jsonl(path: str | Path, corpus: CorpusId | None = None) -> list[IndexedPassage]:
    """Load ``{corpus, doc_id, text}`` lines and window them into passages."""
    passages: list[IndexedPassage] = []
    with open(path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, start=1):
            if not line.strip():
                continue
            row = json.loads(line)
            row_corpus = CorpusId.from_slug(row["corpus"]) if "corpus" in row else corpus
            if row_corpus is None:
                raise ValueError(f"{path}:{lineno}: corpus not given")
            if corpus is not None and row_corpus is not corpus:
                raise ValueError(f"{path}:{lineno}: expected corpus {corpus.value}")
            passages.extend(chunk_document(row_corpus, str(row["doc_id"]), row["text"]))
    return passages


SearchFn = Callable[[str], list[SearchHit]]


class SearchService:
    """Routes queries to per-corpus indexes and counts calls.

    Indexes are immutable, so concurrent readers are safe; only the call
    counter is guarded.
    """

    def __init__(
        self,
        indexes: Mapping[CorpusId, Index],
        reranker: Reranker | None = None,
        top_k: int = 5,
    ) -> None:
        self.indexes = dict(indexes)
        self.reranker = reranker
        self.top_k = top_k
        self.calls: list[tuple[CorpusId, str]] = []
        self._lock = threading.Lock()

    def search(
        self,
        corpus: CorpusId,
        query: str,
        k: int | None = None,
        exclude_docs: Iterable[str] = (),
        only_docs: Iterable[str] | None = None,
    ) -> list[SearchHit]:
        with self._lock:
            self.calls.append((corpus, query))
        index = self.indexes.get(corpus)
        if index is None:
            return []
        excluded = set(exclude_docs)
        allowed = set(only_docs) if only_docs is not None else None
        want = k or self.top_k
        filtered = bool(excluded) or allowed is not None
        # over-fetch so doc filters do not shrink the result below k
        hits = search(index, query, len(index) if filtered else want, self.reranker)
        hits = [
            h for h in hits
            if h.doc_id not in excluded and (allowed is None or h.doc_id in allowed)
        ][:want]
        return [replace(h, rank=i) for i, h in enumerate(hits, start=1)]

    def tool(self, corpus: CorpusId, exclude_docs: Iterable[str] = ()) -> SearchFn:
        excluded = tuple(exclude_docs)
        return lambda query: self.search(corpus, query, exclude_docs=excluded)

    def tools(self, corpora: Iterable[CorpusId] | None = None) -> dict[CorpusId, SearchFn]:
        chosen = list(corpora) if corpora is not None else list(CorpusId)
        return {c: self.tool(c) for c in chosen if c in self.indexes}

    def resolve(self, corpus: CorpusId, passage_id: str) -> IndexedPassage:
        return self.indexes[corpus].passage(passage_id, corpus)
