"""Metadata-driven retrieval: query build, cosine search, rerank, evidence.

Search runs an exact top-k per source partition (text, outline, table
keywords) so that table evidence can never be crowded out by prose,
then unions the candidates. A hit's score is its best cosine over all
query vectors (the rendered question plus each search term). Table
keyword hits resolve to the full rendered table; text hits resolve to
the chunk prefixed by its summary when one exists. Everything here is
deterministic: ties break on entry_id.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, replace
from typing import Sequence

import numpy as np

from .errors import ProviderError, RetrievalError
from .kb import Entry, KnowledgeBase, Source
from .metadata import IndicatorSpec, MetadataRegistry, render_question
from .providers import EmbeddingProvider, JaccardReranker, Reranker

logger = logging.getLogger(__name__)

DEFAULT_TOP_K = 5
DEFAULT_RERANK_M = 10
DEFAULT_BUDGET_CHARS = 6000
MIN_BUDGET_CHARS = 500

NO_EVIDENCE_SENTINEL = "NO EVIDENCE FOUND"


@dataclass
class Query:
    indicator_id: str
    query_texts: list[str]
    vectors: list[list[float]]

    def __post_init__(self) -> None:
        if len(self.vectors) != len(self.query_texts):
            raise RetrievalError(
                f"query for {self.indicator_id!r}: {len(self.vectors)} vectors "
                f"for {len(self.query_texts)} texts"
            )


@dataclass
class ScoredHit:
    entry_id: str
    source: Source
    similarity: float
    resolved_payload: str
    anchor: str
    rerank_score: float | None = None


@dataclass
class EvidenceBundle:
    indicator_id: str
    hits: list[ScoredHit]
    total_chars: int
    truncated: bool = False


def build_query(
    spec: IndicatorSpec,
    registry: MetadataRegistry,
    embedder: EmbeddingProvider,
    use_search_terms: bool = True,
) -> Query:
    """Question vector plus one vector per search term (when enabled)."""
    texts = [render_question(spec, registry)]
    if use_search_terms:
        texts.extend(spec.search_terms)
    return Query(indicator_id=spec.id, query_texts=texts, vectors=embedder.embed(texts))


def cosine(a: Sequence[float], b: Sequence[float]) -> float:
    va = np.asarray(a, dtype=np.float64)
    vb = np.asarray(b, dtype=np.float64)
    if va.shape != vb.shape:
        raise RetrievalError(f"vector length mismatch: {va.shape} vs {vb.shape}")
    na = float(np.linalg.norm(va))
    nb = float(np.linalg.norm(vb))
    if na == 0.0 or nb == 0.0:
        raise RetrievalError("cosine similarity undefined for a zero-norm vector")
    return float(np.clip(np.dot(va, vb) / (na * nb), -1.0, 1.0))


def _resolve_payload(entry: Entry, kb: KnowledgeBase) -> str:
    if entry.source is Source.TABLE_KEYWORD:
        table_id = entry.anchor.partition(":")[2]
        return kb.table_text(table_id)
    if entry.source is Source.TEXT and entry.summary:
        return f"[Summary] {entry.summary}\n{entry.payload_text}"
    return entry.payload_text


def search(kb: KnowledgeBase, query: Query, k: int = DEFAULT_TOP_K) -> list[ScoredHit]:
    """Exact top-k per source partition, union over query vectors.

    Zero-norm vectors (query or entry) never match: their similarity
    is treated as -1 rather than raising, so a tokenless chunk simply
    loses every comparison.
    """
    if k < 1:
        raise RetrievalError(f"k must be >= 1, got {k}")
    for vec in query.vectors:
        if len(vec) != kb.dim:
            raise RetrievalError(
                f"query vector dim {len(vec)} does not match KB dim {kb.dim}"
            )
    qm = np.asarray(query.vectors, dtype=np.float64)
    qnorms = np.linalg.norm(qm, axis=1)

    hits: list[ScoredHit] = []
    for source in Source:
        entries, matrix, enorms = kb.partition(source)
        if not entries:
            continue
        # sims[i][j] = cosine(query i, entry j); zero norms pinned to -1
        raw = qm @ matrix.T
        denom = np.outer(qnorms, enorms)
        with np.errstate(divide="ignore", invalid="ignore"):
            sims = np.where(denom > 0, raw / np.where(denom > 0, denom, 1.0), -1.0)
        sims = np.clip(sims, -1.0, 1.0)

        best = sims.max(axis=0)
        selected: set[int] = set()
        for qi in range(sims.shape[0]):
            row = sims[qi]
            order = sorted(
                range(len(entries)), key=lambda j: (-row[j], entries[j].entry_id)
            )
            selected.update(order[: min(k, len(entries))])
        ranked = sorted(selected, key=lambda j: (-best[j], entries[j].entry_id))
        for j in ranked:
            entry = entries[j]
            hits.append(
                ScoredHit(
                    entry_id=entry.entry_id,
                    source=source,
                    similarity=float(best[j]),
                    resolved_payload=_resolve_payload(entry, kb),
                    anchor=entry.anchor,
                )
            )
    hits.sort(key=lambda h: (-h.similarity, h.entry_id))
    return hits


def rerank(
    hits: list[ScoredHit],
    query_text: str,
    reranker: Reranker,
    m: int = DEFAULT_RERANK_M,
) -> list[ScoredHit]:
    """Rescore the first m hits; the tail keeps its order after them.

    A reranker failure falls back to the offline token-overlap scorer
    and logs the event instead of aborting retrieval.
    """
    if m < 0:
        raise RetrievalError(f"m must be >= 0, got {m}")
    m = min(m, len(hits))
    if m == 0:
        return list(hits)
    head = hits[:m]
    payloads = [h.resolved_payload for h in head]
    try:
        scores = reranker.score(query_text, payloads)
        if len(scores) != len(payloads):
            raise ProviderError(
                f"reranker {reranker.name!r} returned {len(scores)} scores "
                f"for {len(payloads)} candidates"
            )
    except ProviderError as exc:
        logger.warning("rerank fallback engaged: %s", exc)
        scores = JaccardReranker().score(query_text, payloads)
    rescored = [replace(h, rerank_score=float(s)) for h, s in zip(head, scores)]
    rescored.sort(key=lambda h: -h.rerank_score)  # stable: ties keep order
    return rescored + list(hits[m:])


def assemble_evidence(
    hits: Sequence[ScoredHit],
    budget_chars: int = DEFAULT_BUDGET_CHARS,
    indicator_id: str = "",
) -> EvidenceBundle:
    """Greedy prefix of hits whose payloads fit the character budget.

    Hits resolving to the same location (several keywords hitting one
    table) are deduplicated. Selection stops at the first hit that
    would overflow the budget. When even the first hit is too large it
    is truncated to the budget and the bundle is flagged.
    """
    if budget_chars < MIN_BUDGET_CHARS:
        raise RetrievalError(f"budget_chars must be >= {MIN_BUDGET_CHARS}")
    taken: list[ScoredHit] = []
    seen_anchors: set[tuple[Source, str]] = set()
    total = 0
    truncated = False
    for hit in hits:
        key = (hit.source, hit.anchor)
        if key in seen_anchors:
            continue
        size = len(hit.resolved_payload)
        if total + size > budget_chars:
            if not taken:
                taken.append(
                    replace(hit, resolved_payload=hit.resolved_payload[:budget_chars])
                )
                total = budget_chars
                truncated = True
            break
        seen_anchors.add(key)
        taken.append(hit)
        total += size
    return EvidenceBundle(
        indicator_id=indicator_id, hits=taken, total_chars=total, truncated=truncated
    )
