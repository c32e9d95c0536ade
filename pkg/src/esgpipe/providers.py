"""Provider contracts and their bundled implementations.

Four pluggable services feed the pipeline: embeddings, summaries,
reranking, and chat completion. Each has a deterministic offline
implementation (used by all tests and by ``mode: offline`` runs) and,
except for summaries, an HTTP client speaking a small JSON contract:

- embedding:  POST {"texts": [...]}            -> {"vectors": [[...], ...]}
- rerank:     POST {"query": q, "candidates": [...]} -> {"scores": [...]}
- chat:       POST {"messages": [{role, content}], "params": {...}}
                                               -> {"content": "..."}

Authentication is a bearer token read from an environment variable at
call time; requests never log the token.
"""

from __future__ import annotations

import hashlib
import json
import logging
import os
import re
from abc import ABC, abstractmethod
from dataclasses import dataclass, field
from pathlib import Path
from typing import TYPE_CHECKING, Sequence

import requests

from .errors import ProviderError

if TYPE_CHECKING:  # pragma: no cover - import cycle guard for hints only
    from .agent import Prompt

logger = logging.getLogger(__name__)

_TOKEN_RE = re.compile(r"\w+")
_SENTENCE_RE = re.compile(r"(?<=[.!?])\s+")

DEFAULT_TOKEN_ENV = "ESGPIPE_API_TOKEN"


def tokenize(text: str) -> list[str]:
    return _TOKEN_RE.findall(text.lower())


def split_sentences(text: str) -> list[str]:
    return [s for s in _SENTENCE_RE.split(text.strip()) if s]


class EmbeddingProvider(ABC):
    name: str
    dim: int

    @abstractmethod
    def embed(self, texts: Sequence[str]) -> list[list[float]]:
        """One vector of length `dim` per input text, in input order."""


class SummaryProvider(ABC):
    name: str

    @abstractmethod
    def summarize(self, text: str) -> str:
        ...


class Reranker(ABC):
    name: str

    @abstractmethod
    def score(self, query: str, candidates: Sequence[str]) -> list[float]:
        """One relevance score per candidate, higher = more relevant."""


class ChatProvider(ABC):
    name: str

    @abstractmethod
    def complete(self, prompt: "Prompt", params: dict) -> str:
        ...


class HashEmbedder(EmbeddingProvider):
    """Deterministic hashed bag-of-tokens embedding.

    Tokens are lowercased ``\\w+`` runs, hashed with sha1 into `dim`
    buckets; the count vector is L2-normalized. Texts with no tokens
    embed to the zero vector.
    """

    def __init__(self, dim: int = 256):
        if dim < 1:
            raise ValueError("dim must be positive")
        self.dim = dim
        self.name = f"hash-bow-{dim}"
        self._bucket_cache: dict[str, int] = {}

    def _bucket(self, token: str) -> int:
        b = self._bucket_cache.get(token)
        if b is None:
            digest = hashlib.sha1(token.encode("utf-8")).hexdigest()
            b = int(digest, 16) % self.dim
            self._bucket_cache[token] = b
        return b

    def embed(self, texts: Sequence[str]) -> list[list[float]]:
        out = []
        for text in texts:
            vec = [0.0] * self.dim
            for token in tokenize(text):
                vec[self._bucket(token)] += 1.0
            norm = sum(v * v for v in vec) ** 0.5
            if norm > 0:
                vec = [v / norm for v in vec]
            out.append(vec)
        return out


class LeadSentenceSummarizer(SummaryProvider):
    """Offline summary fallback: the first `n` sentences."""

    def __init__(self, n: int = 2):
        if n < 1:
            raise ValueError("n must be positive")
        self.n = n
        self.name = f"lead-{n}"

    def summarize(self, text: str) -> str:
        sentences = split_sentences(text)
        return " ".join(sentences[: self.n])


class JaccardReranker(Reranker):
    """Offline rerank fallback: token-set Jaccard overlap."""

    name = "jaccard"

    def score(self, query: str, candidates: Sequence[str]) -> list[float]:
        q = set(tokenize(query))
        scores = []
        for cand in candidates:
            c = set(tokenize(cand))
            union = q | c
            scores.append(len(q & c) / len(union) if union else 0.0)
        return scores


DEFAULT_REFUSAL = "The requested information is not disclosed in the provided report content."


@dataclass
class MockReply:
    doc_id: str
    indicator_id: str
    reply: str
    required_evidence: tuple[str, ...] = ()


class MockChatProvider(ChatProvider):
    """Deterministic chat stand-in answering from a fixture file.

    Replies are keyed by (doc_id, indicator_id), which every prompt
    carries as audit metadata. A reply entry may also demand
    `required_evidence` substrings: the reply is returned only when
    every such substring appears verbatim in the prompt's reference
    content, expert knowledge, or question. Otherwise the provider
    refuses, exactly as a grounded model without the evidence would.
    Generation params are ignored; calls are read-only and safe to
    issue concurrently.

    Fixture format::

        {"default_reply": "...",
         "replies": [{"doc_id": ..., "indicator_id": ...,
                      "required_evidence": [...], "reply": ...}]}
    """

    name = "mock-chat"

    def __init__(self, replies: Sequence[MockReply], default_reply: str = DEFAULT_REFUSAL):
        self.default_reply = default_reply
        self._by_key: dict[tuple[str, str], list[MockReply]] = {}
        for r in replies:
            self._by_key.setdefault((r.doc_id, r.indicator_id), []).append(r)

    @classmethod
    def from_file(cls, path: str | Path) -> "MockChatProvider":
        try:
            data = json.loads(Path(path).read_text(encoding="utf-8"))
        except (OSError, json.JSONDecodeError) as exc:
            raise ProviderError(f"cannot load mock replies from {path}: {exc}") from exc
        replies = [
            MockReply(
                doc_id=str(r["doc_id"]),
                indicator_id=str(r["indicator_id"]),
                reply=str(r["reply"]),
                required_evidence=tuple(r.get("required_evidence", [])),
            )
            for r in data.get("replies", [])
        ]
        return cls(replies, default_reply=data.get("default_reply", DEFAULT_REFUSAL))

    def complete(self, prompt: "Prompt", params: dict) -> str:
        key = (prompt.doc_id, prompt.indicator_id)
        searchable = "\n".join(
            (prompt.reference_content, prompt.expert_knowledge, prompt.question)
        )
        for entry in self._by_key.get(key, []):
            if all(needle in searchable for needle in entry.required_evidence):
                return entry.reply
        return self.default_reply


def _bearer_headers(token_env: str) -> dict[str, str]:
    token = os.environ.get(token_env, "")
    return {"Authorization": f"Bearer {token}"} if token else {}


@dataclass
class HttpEndpoint:
    url: str
    timeout: float = 30.0
    retries: int = 2
    token_env: str = DEFAULT_TOKEN_ENV

    def post(self, payload: dict) -> dict:
        last: Exception | None = None
        for _ in range(self.retries + 1):
            try:
                resp = requests.post(
                    self.url,
                    json=payload,
                    timeout=self.timeout,
                    headers=_bearer_headers(self.token_env),
                )
                resp.raise_for_status()
                return resp.json()
            except (requests.RequestException, ValueError) as exc:
                last = exc
        raise ProviderError(f"provider at {self.url} unreachable: {last}") from last


class HttpEmbedder(EmbeddingProvider):
    def __init__(self, endpoint: HttpEndpoint, dim: int, name: str = "http-embedding"):
        self.endpoint = endpoint
        self.dim = dim
        self.name = name

    def embed(self, texts: Sequence[str]) -> list[list[float]]:
        data = self.endpoint.post({"texts": list(texts)})
        vectors = data.get("vectors")
        if not isinstance(vectors, list) or len(vectors) != len(texts):
            raise ProviderError(
                f"embedding provider returned {0 if vectors is None else len(vectors)} "
                f"vectors for {len(texts)} texts"
            )
        out = []
        for vec in vectors:
            if len(vec) != self.dim:
                raise ProviderError(
                    f"embedding provider returned dim {len(vec)}, expected {self.dim}"
                )
            out.append([float(v) for v in vec])
        return out


class HttpReranker(Reranker):
    def __init__(self, endpoint: HttpEndpoint, name: str = "http-rerank"):
        self.endpoint = endpoint
        self.name = name

    def score(self, query: str, candidates: Sequence[str]) -> list[float]:
        data = self.endpoint.post({"query": query, "candidates": list(candidates)})
        scores = data.get("scores")
        if not isinstance(scores, list) or len(scores) != len(candidates):
            raise ProviderError("rerank provider returned a malformed score list")
        return [float(s) for s in scores]


class HttpChatProvider(ChatProvider):
    def __init__(self, endpoint: HttpEndpoint, name: str = "http-chat"):
        self.endpoint = endpoint
        self.name = name

    def complete(self, prompt: "Prompt", params: dict) -> str:
        data = self.endpoint.post({"messages": prompt.to_messages(), "params": params})
        content = data.get("content")
        if not isinstance(content, str):
            raise ProviderError("chat provider response has no 'content' string")
        return content


@dataclass
class ProviderSet:
    """The full provider bundle one pipeline run uses."""

    embedder: EmbeddingProvider
    chat: ChatProvider
    reranker: Reranker = field(default_factory=JaccardReranker)
    summarizer: SummaryProvider = field(default_factory=LeadSentenceSummarizer)

    def names(self) -> dict[str, str]:
        return {
            "embedding": self.embedder.name,
            "chat": self.chat.name,
            "rerank": self.reranker.name,
            "summary": self.summarizer.name,
        }
