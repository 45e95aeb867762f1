"""Hybrid retrieval: sparse + dense + multi-vector scoring, fusion, rerank.

Scoring is exhaustive over the corpus (no index pruning); candidate-pool
truncation and rerank truncation are part of the ranking definition. All tie
breaks are by ascending doc id so identical inputs rank identically.
"""

from __future__ import annotations

import logging
import math
from collections import Counter
from dataclasses import dataclass, field

import numpy as np

from .embedding import EmbeddingModel, cosine
from .errors import EmptyCorpus, RerankerError
from .kb import SubGoalUnit, Triple
from .rendering import render_query_bundle, render_triple, render_unit
from .textutil import tokenize

logger = logging.getLogger(__name__)

BM25_K1 = 1.2
BM25_B = 0.75


@dataclass(frozen=True)
class Document:
    """One retrievable item: a rendered triple or a rendered sub-goal unit."""

    doc_id: int
    text: str
    payload_kind: str  # "env_triple" | "exp_unit"
    payload_ref: int | None = None  # exp unit id when payload_kind == "exp_unit"


def doc_from_triple(doc_id: int, t: Triple) -> Document:
    return Document(doc_id=doc_id, text=render_triple(t), payload_kind="env_triple")


def doc_from_unit(doc_id: int, unit_id: int, u: SubGoalUnit) -> Document:
    return Document(
        doc_id=doc_id, text=render_unit(u), payload_kind="exp_unit", payload_ref=unit_id
    )


@dataclass(frozen=True)
class QueryBundle:
    task_description: str
    plan_text: str
    env_context: tuple[Document, ...] = ()

    def query_text(self) -> str:
        return render_query_bundle(
            self.task_description, self.plan_text, [d.text for d in self.env_context]
        )


@dataclass
class ScoredDoc:
    doc: Document
    sparse: float = 0.0
    dense: float = 0.0
    multi: float = 0.0
    fused: float = 0.0
    rerank: float | None = None


@dataclass(frozen=True)
class RetrievalConfig:
    k_candidates: int = 32
    k_final: int = 5
    w_dense: float = 0.4
    w_sparse: float = 0.3
    w_multi: float = 0.3
    sparse_cap: float = math.inf  # clip sparse scores here before min-max scaling

    def __post_init__(self):
        if not (0 < self.k_final <= self.k_candidates):
            raise ValueError("need 0 < k_final <= k_candidates")
        if min(self.w_dense, self.w_sparse, self.w_multi) < 0:
            raise ValueError("fusion weights must be non-negative")


@dataclass
class CorpusStats:
    """BM25 statistics for one corpus snapshot."""

    doc_count: int
    avg_doc_len: float
    doc_lens: dict[int, int]
    term_counts: dict[int, Counter]
    doc_freq: Counter

    @classmethod
    def build(cls, corpus: list[Document]) -> "CorpusStats":
        doc_lens: dict[int, int] = {}
        term_counts: dict[int, Counter] = {}
        doc_freq: Counter = Counter()
        for doc in corpus:
            tokens = tokenize(doc.text)
            doc_lens[doc.doc_id] = len(tokens)
            counts = Counter(tokens)
            term_counts[doc.doc_id] = counts
            doc_freq.update(counts.keys())
        n = len(corpus)
        avg = (sum(doc_lens.values()) / n) if n else 0.0
        return cls(n, avg, doc_lens, term_counts, doc_freq)

    def idf(self, term: str) -> float:
        # Lucene-style idf: strictly positive, so scores stay >= 0.
        df = self.doc_freq.get(term, 0)
        return math.log(1.0 + (self.doc_count - df + 0.5) / (df + 0.5))


def sparse_score(query_text: str, doc: Document, stats: CorpusStats) -> float:
    """BM25 (k1=1.2, b=0.75); query tokens contribute with multiplicity."""
    counts = stats.term_counts.get(doc.doc_id)
    if counts is None:
        raise KeyError(f"doc {doc.doc_id} missing from corpus stats")
    dl = stats.doc_lens[doc.doc_id]
    if stats.avg_doc_len == 0.0:
        return 0.0
    norm = BM25_K1 * (1.0 - BM25_B + BM25_B * dl / stats.avg_doc_len)
    score = 0.0
    for term in tokenize(query_text):
        tf = counts.get(term, 0)
        if tf == 0:
            continue
        score += stats.idf(term) * tf * (BM25_K1 + 1.0) / (tf + norm)
    return score


def dense_score(query_text: str, doc: Document, model: EmbeddingModel) -> float:
    """Cosine of unit embeddings; 0 when either side is degenerate."""
    return cosine(model.embed(query_text), model.embed(doc.text))


def multi_vector_score(query_text: str, doc: Document, model: EmbeddingModel) -> float:
    """Late interaction: per query token, max cosine over doc tokens; averaged."""
    q_vecs = model.token_vectors(query_text)
    d_vecs = model.token_vectors(doc.text)
    if q_vecs.shape[0] == 0 or d_vecs.shape[0] == 0:
        return 0.0
    sims = q_vecs @ d_vecs.T
    return float(sims.max(axis=1).mean())


def token_overlap_f1(query_text: str, doc_text: str) -> float:
    """Default rerank scorer: multiset token-overlap F1."""
    q_counts = Counter(tokenize(query_text))
    d_counts = Counter(tokenize(doc_text))
    common = sum((q_counts & d_counts).values())
    if common == 0:
        return 0.0
    precision = common / sum(d_counts.values())
    recall = common / sum(q_counts.values())
    return 2.0 * precision * recall / (precision + recall)


def normalized_sparse(scored: list[ScoredDoc], cap: float) -> list[float]:
    """Min-max over the candidate pool after clipping at ``cap``."""
    clipped = [min(s.sparse, cap) for s in scored]
    lo, hi = min(clipped), max(clipped)
    if hi == lo:
        return [0.0 for _ in clipped]
    return [(v - lo) / (hi - lo) for v in clipped]


def fuse_and_rank(scored: list[ScoredDoc], cfg: RetrievalConfig) -> list[ScoredDoc]:
    """Weighted fusion, sort by fused desc (ties by doc id), keep k_candidates."""
    sparse_norm = normalized_sparse(scored, cfg.sparse_cap)
    for s, sn in zip(scored, sparse_norm):
        s.fused = cfg.w_dense * s.dense + cfg.w_sparse * sn + cfg.w_multi * s.multi
    ranked = sorted(scored, key=lambda s: (-s.fused, s.doc.doc_id))
    return ranked[: cfg.k_candidates]


def rerank(
    query_text: str,
    candidates: list[ScoredDoc],
    k_final: int,
    scorer=token_overlap_f1,
) -> list[ScoredDoc]:
    """Re-sort candidates by the cross scorer, keep k_final."""
    rescored = []
    for cand in candidates:
        try:
            score = float(scorer(query_text, cand.doc.text))
        except Exception as exc:
            raise RerankerError(f"scorer failed on doc {cand.doc.doc_id}: {exc}") from exc
        rescored.append(replace_rerank(cand, score))
    rescored.sort(key=lambda s: (-s.rerank, s.doc.doc_id))
    return rescored[:k_final]


def replace_rerank(s: ScoredDoc, score: float) -> ScoredDoc:
    return ScoredDoc(
        doc=s.doc, sparse=s.sparse, dense=s.dense, multi=s.multi, fused=s.fused, rerank=score
    )


class CorpusIndex:
    """Immutable per-corpus snapshot: BM25 stats plus cached vectors.

    Rebuilding after a corpus change swaps in a fresh snapshot; queries
    against one snapshot are read-only and identical to scoring from scratch.
    """

    def __init__(self, corpus: list[Document], model: EmbeddingModel):
        if not corpus:
            raise EmptyCorpus("cannot index an empty corpus")
        self.corpus = list(corpus)
        self.model = model
        self.stats = CorpusStats.build(self.corpus)

    def score_all(self, query_text: str) -> list[ScoredDoc]:
        return [
            ScoredDoc(
                doc=doc,
                sparse=sparse_score(query_text, doc, self.stats),
                dense=dense_score(query_text, doc, self.model),
                multi=multi_vector_score(query_text, doc, self.model),
            )
            for doc in self.corpus
        ]


@dataclass
class RetrievalResult:
    query_text: str
    docs: list[ScoredDoc] = field(default_factory=list)
    rerank_ok: bool = True


def retrieve(
    corpus: list[Document],
    bundle: QueryBundle,
    model: EmbeddingModel,
    cfg: RetrievalConfig,
    scorer=token_overlap_f1,
    index: CorpusIndex | None = None,
) -> RetrievalResult:
    """Score everything, fuse, rerank. Falls back to fused order (recorded in
    the result) when the rerank scorer fails."""
    if index is None:
        index = CorpusIndex(corpus, model)
    query_text = bundle.query_text()
    scored = index.score_all(query_text)
    candidates = fuse_and_rank(scored, cfg)
    try:
        final = rerank(query_text, candidates, cfg.k_final, scorer)
        return RetrievalResult(query_text=query_text, docs=final, rerank_ok=True)
    except RerankerError:
        logger.warning("reranker failed; falling back to fused order")
        return RetrievalResult(
            query_text=query_text, docs=candidates[: cfg.k_final], rerank_ok=False
        )
