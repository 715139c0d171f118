"""Text embeddings for minibatch neighbor retrieval.

``HashingEmbedder`` is the offline default: lowercase character 3-grams hashed
into a fixed number of buckets, term-frequency weighted and L2 normalized.
``RemoteEmbedder`` calls an OpenAI-compatible ``/embeddings`` endpoint and
falls back to hashing when the endpoint keeps failing.
"""

from __future__ import annotations

import hashlib
from typing import Dict, List, Optional, Protocol, Sequence

import httpx
import numpy as np
from pydantic import BaseModel, field_validator
from tenacity import RetryError, Retrying, retry_if_exception_type, stop_after_attempt, wait_exponential

from .config import ProviderSettings
from .logging_config import get_logger

logger = get_logger(__name__)

DEFAULT_DIM = 512
NGRAM = 3


class EmbeddingVector(BaseModel):
    values: List[float]
    source_id: str

    @field_validator("values")
    @classmethod
    def non_empty(cls, value: List[float]) -> List[float]:
        if not value:
            raise ValueError("embedding has no dimensions")
        return value

    def to_array(self) -> np.ndarray:
        return np.asarray(self.values, dtype=float)


class Embedder(Protocol):
    def embed(self, text: str, source_id: str = "") -> EmbeddingVector: ...

    def embed_many(self, texts: Sequence[str], ids: Sequence[str]) -> np.ndarray: ...


def _bucket(token: str, dim: int) -> int:
    return int(hashlib.md5(token.encode("utf-8")).hexdigest(), 16) % dim


def _unit_basis(source_id: str, dim: int) -> np.ndarray:
    vec = np.zeros(dim)
    vec[_bucket(source_id, dim)] = 1.0
    return vec


def normalize_rows(matrix: np.ndarray, ids: Sequence[str]) -> np.ndarray:
    """L2-normalize rows; all-zero rows become a unit basis vector keyed by id."""
    out = np.asarray(matrix, dtype=float).copy()
    norms = np.linalg.norm(out, axis=1)
    for row, norm in enumerate(norms):
        if norm <= 0 or not np.isfinite(norm):
            out[row] = _unit_basis(ids[row], out.shape[1])
        else:
            out[row] = out[row] / norm
    return out


class HashingEmbedder:
    """Deterministic character n-gram embedder; needs no network."""

    def __init__(self, dim: int = DEFAULT_DIM, ngram: int = NGRAM) -> None:
        self.dim = dim
        self.ngram = ngram

    def _counts(self, text: str) -> np.ndarray:
        vec = np.zeros(self.dim)
        normalized = " ".join(text.lower().split())
        for start in range(max(0, len(normalized) - self.ngram + 1)):
            vec[_bucket(normalized[start : start + self.ngram], self.dim)] += 1.0
        return vec

    def embed(self, text: str, source_id: str = "") -> EmbeddingVector:
        row = normalize_rows(self._counts(text)[None, :], [source_id or text])[0]
        return EmbeddingVector(values=row.tolist(), source_id=source_id)

    def embed_many(self, texts: Sequence[str], ids: Sequence[str]) -> np.ndarray:
        if not texts:
            return np.zeros((0, self.dim))
        return normalize_rows(np.vstack([self._counts(t) for t in texts]), ids)


class RemoteEmbedder:
    """``POST {embedding_url}/embeddings``; hashing fallback on failure."""

    def __init__(
        self,
        settings: ProviderSettings,
        fallback: Optional[HashingEmbedder] = None,
        transport: Optional[httpx.BaseTransport] = None,
    ) -> None:
        base = str(settings.embedding_url or settings.base_url).rstrip("/")
        self.url = f"{base}/embeddings"
        self.model = settings.embedding_model
        self.max_retries = settings.max_retries
        self.backoff = settings.backoff_multiplier
        self.fallback = fallback or HashingEmbedder()
        self._cache: Dict[str, np.ndarray] = {}
        headers = {"content-type": "application/json", "user-agent": settings.user_agent}
        if settings.api_key:
            headers["authorization"] = f"Bearer {settings.api_key}"
        self.client = httpx.Client(
            headers=headers, timeout=settings.request_timeout, transport=transport
        )

    def _post(self, texts: List[str]) -> List[List[float]]:
        response = self.client.post(self.url, json={"model": self.model, "input": texts})
        response.raise_for_status()
        data = sorted(response.json()["data"], key=lambda item: item["index"])
        return [item["embedding"] for item in data]

    def _fetch(self, texts: List[str]) -> Optional[np.ndarray]:
        retrying = Retrying(
            stop=stop_after_attempt(self.max_retries),
            wait=wait_exponential(multiplier=self.backoff, min=self.backoff, max=10),
            retry=retry_if_exception_type(httpx.HTTPError),
        )
        try:
            vectors = retrying(self._post, texts)
        except (RetryError, httpx.HTTPError, KeyError, ValueError, TypeError) as exc:
            logger.warning("Embedding endpoint failed (%s); using hashed n-grams instead", exc)
            return None
        return np.asarray(vectors, dtype=float)

    def embed_many(self, texts: Sequence[str], ids: Sequence[str]) -> np.ndarray:
        missing = [t for t in dict.fromkeys(texts) if t not in self._cache]
        if missing:
            fetched = self._fetch(missing)
            if fetched is None or fetched.shape[0] != len(missing):
                return self.fallback.embed_many(texts, ids)
            self._cache.update(zip(missing, fetched))
        return normalize_rows(np.vstack([self._cache[t] for t in texts]), ids)

    def embed(self, text: str, source_id: str = "") -> EmbeddingVector:
        row = self.embed_many([text], [source_id or text])[0]
        return EmbeddingVector(values=row.tolist(), source_id=source_id)

    def close(self) -> None:
        self.client.close()


def embedder_from_settings(settings: ProviderSettings) -> Embedder:
    if settings.kind == "live" and settings.embedding_url is not None:
        return RemoteEmbedder(settings)
    return HashingEmbedder()
