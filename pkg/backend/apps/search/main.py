import re
import math
import hashlib
import logging
from dataclasses import dataclass, field
from typing import Literal, Optional, Protocol

import numpy as np
import requests
from pydantic import BaseModel, Field
from rank_bm25 import BM25Okapi
from tenacity import retry, stop_after_attempt, wait_exponential

from apps.store.main import TraceStore
from config import (
    BM25_B,
    BM25_K1,
    EMBEDDING_DIM,
    LLM_API_KEY,
    LLM_BASE_URL,
    LLM_RETRY_ATTEMPTS,
    LLM_RETRY_WAIT,
    RRF_K,
    SEARCH_TOP_K,
    SRC_LOG_LEVELS,
)
from constants import ERROR_MESSAGES
from utils.errors import IndexBuildError, SearchError

log = logging.getLogger(__name__)
log.setLevel(SRC_LOG_LEVELS["SEARCH"])

SearchMode = Literal["hybrid", "lexical", "semantic"]
SNIPPET_RADIUS = 80
TOKEN_PATTERN = re.compile(r"[^\W_]+")


def tokenize(text: str) -> list[str]:
    """Lowercase, split on anything that is not a letter or digit, drop empties."""
    return TOKEN_PATTERN.findall(text.lower())


####################
# Embedders
####################


class Embedder(Protocol):
    dim: int

    def embed(self, text: str) -> list[float]: ...


def _normalize(vector: np.ndarray) -> np.ndarray:
    norm = float(np.linalg.norm(vector))
    if norm == 0.0 or not math.isfinite(norm):
        unit = np.zeros(len(vector))
        unit[0] = 1.0
        return unit
    return vector / norm


class HashingEmbedder:
    """
    Deterministic feature-hashing embedder: each token adds 1 to the bucket
    picked by its blake2b digest, then the vector is L2-normalized. Texts
    without tokens map to the first basis vector.
    """

    def __init__(self, dim: int = EMBEDDING_DIM):
        self.dim = dim

    def _bucket(self, token: str) -> int:
        digest = hashlib.blake2b(token.encode("utf-8"), digest_size=8).digest()
        return int.from_bytes(digest, "big") % self.dim

    def embed(self, text: str) -> list[float]:
        vector = np.zeros(self.dim)
        for token in tokenize(text):
            vector[self._bucket(token)] += 1.0
        return _normalize(vector).tolist()


class OpenAIEmbedder:
    """Embeddings from an OpenAI-compatible /embeddings endpoint."""

    def __init__(
        self,
        model: str,
        dim: int = EMBEDDING_DIM,
        url: str = LLM_BASE_URL,
        key: str = LLM_API_KEY,
        timeout: float = 60,
    ):
        self.model = model
        self.dim = dim
        self.url = url.rstrip("/")
        self.key = key
        self.timeout = timeout

    @retry(
        stop=stop_after_attempt(LLM_RETRY_ATTEMPTS),
        wait=wait_exponential(multiplier=LLM_RETRY_WAIT, max=10),
        reraise=True,
    )
    def _request(self, texts: list[str]) -> list[list[float]]:
        r = requests.post(
            f"{self.url}/embeddings",
            headers={
                "Content-Type": "application/json",
                "Authorization": f"Bearer {self.key}",
            },
            json={"input": texts, "model": self.model},
            timeout=self.timeout,
        )
        r.raise_for_status()
        data = r.json()
        if "data" in data:
            return [elem["embedding"] for elem in data["data"]]
        log.error(data)
        raise ValueError("embedding response has no 'data'")

    def embed(self, text: str) -> list[float]:
        return self._request([text])[0]


####################
# Index
####################


class IndexedDocument(BaseModel):
    short_id: str
    term_frequencies: dict[str, int]
    length: int = Field(ge=1)
    embedding: list[float]


class SearchHit(BaseModel):
    short_id: str
    fused_score: float
    lexical_rank: Optional[int] = None
    semantic_rank: Optional[int] = None
    snippet: str = ""


class TraceBM25(BM25Okapi):
    """BM25 with the non-negative idf ln(1 + (N - df + 0.5) / (df + 0.5))."""

    def _calc_idf(self, nd):
        for word, freq in nd.items():
            self.idf[word] = math.log(1 + (self.corpus_size - freq + 0.5) / (freq + 0.5))

    def get_scores(self, query):
        if not self.avgdl:
            return np.zeros(self.corpus_size)
        return super().get_scores(query)


@dataclass(frozen=True)
class TraceIndex:
    documents: tuple[IndexedDocument, ...]
    texts: dict[str, str]
    bm25: TraceBM25
    embeddings: np.ndarray
    embedder: Embedder
    rrf_k: int = RRF_K
    positions: dict[str, int] = field(default_factory=dict)

    def position(self, short_id: str) -> int:
        if short_id not in self.positions:
            raise SearchError(ERROR_MESSAGES.TRACE_NOT_FOUND(short_id))
        return self.positions[short_id]


def build_index(
    store: TraceStore,
    embedder: Optional[Embedder] = None,
    k1: float = BM25_K1,
    b: float = BM25_B,
    rrf_k: int = RRF_K,
) -> TraceIndex:
    embedder = embedder or HashingEmbedder()
    traces = store.corpus.traces
    if not traces:
        raise IndexBuildError(ERROR_MESSAGES.EMPTY_CORPUS.value)

    documents = []
    tokenized = []
    vectors = []
    for trace in traces:
        text = trace.content
        tokens = tokenize(text)
        try:
            raw = embedder.embed(text)
        except Exception as e:
            log.exception(e)
            raise IndexBuildError(ERROR_MESSAGES.EMBEDDING_FAILED(trace.short_id, str(e)))
        if len(raw) != embedder.dim:
            raise IndexBuildError(ERROR_MESSAGES.EMBEDDING_DIMENSION(embedder.dim, len(raw)))
        vector = _normalize(np.asarray(raw, dtype=float))

        frequencies: dict[str, int] = {}
        for token in tokens:
            frequencies[token] = frequencies.get(token, 0) + 1
        documents.append(
            IndexedDocument(
                short_id=trace.short_id,
                term_frequencies=frequencies,
                length=max(1, len(tokens)),
                embedding=vector.tolist(),
            )
        )
        tokenized.append(tokens)
        vectors.append(vector)

    index = TraceIndex(
        documents=tuple(documents),
        texts={t.short_id: t.content for t in traces},
        bm25=TraceBM25(tokenized, k1=k1, b=b),
        embeddings=np.vstack(vectors),
        embedder=embedder,
        rrf_k=rrf_k,
        positions={doc.short_id: i for i, doc in enumerate(documents)},
    )
    log.info(f"built index over {len(documents)} traces (dim {embedder.dim})")
    return index


def lexical_score(index: TraceIndex, query: str, short_id: str) -> float:
    scores = index.bm25.get_scores(tokenize(query))
    return float(scores[index.position(short_id)])


def _ranks(scores: np.ndarray, short_ids: list[str]) -> dict[str, int]:
    # only documents with a strictly positive score get a rank
    scored = [(float(score), sid) for sid, score in zip(short_ids, scores) if score > 0]
    scored.sort(key=lambda pair: (-pair[0], pair[1]))
    return {sid: rank for rank, (_, sid) in enumerate(scored, start=1)}


def _snippet(text: str, terms: list[str], index: TraceIndex) -> str:
    lowered = text.lower()
    by_weight = sorted(set(terms), key=lambda t: (-index.bm25.idf.get(t, 0.0), t))
    for term in by_weight:
        match = re.search(rf"(?<![^\W_]){re.escape(term)}(?![^\W_])", lowered)
        if match:
            start = max(0, match.start() - SNIPPET_RADIUS)
            end = min(len(text), match.end() + SNIPPET_RADIUS)
            return text[start:end].strip()
    return text[: 2 * SNIPPET_RADIUS].strip()


def search_traces(
    index: TraceIndex,
    query: str,
    top_k: int = SEARCH_TOP_K,
    mode: SearchMode = "hybrid",
) -> list[SearchHit]:
    """
    Rank traces for a query with Reciprocal Rank Fusion over the BM25 and
    embedding rankings: fused_score = sum over lists of 1 / (rrf_k + rank).
    """
    if not query or not query.strip():
        raise SearchError(ERROR_MESSAGES.EMPTY_QUERY.value)
    if top_k <= 0:
        raise SearchError(ERROR_MESSAGES.INVALID_TOP_K(top_k))
    if mode not in ("hybrid", "lexical", "semantic"):
        raise SearchError(ERROR_MESSAGES.INVALID_SEARCH_MODE(mode))

    short_ids = [doc.short_id for doc in index.documents]
    terms = tokenize(query)
    lexical: dict[str, int] = {}
    semantic: dict[str, int] = {}
    if mode in ("hybrid", "lexical"):
        lexical = _ranks(index.bm25.get_scores(terms), short_ids)
    if mode in ("hybrid", "semantic"):
        query_vector = _normalize(np.asarray(index.embedder.embed(query), dtype=float))
        semantic = _ranks(index.embeddings @ query_vector, short_ids)

    hits = []
    for sid in set(lexical) | set(semantic):
        fused = math.fsum(
            1.0 / (index.rrf_k + ranks[sid]) for ranks in (lexical, semantic) if sid in ranks
        )
        hits.append(
            SearchHit(
                short_id=sid,
                fused_score=fused,
                lexical_rank=lexical.get(sid),
                semantic_rank=semantic.get(sid),
            )
        )
    hits.sort(key=lambda hit: (-hit.fused_score, hit.short_id))
    hits = hits[:top_k]
    for hit in hits:
        hit.snippet = _snippet(index.texts[hit.short_id], terms, index)
    log.debug(f"search '{query}' ({mode}): {len(hits)} hits")
    return hits
