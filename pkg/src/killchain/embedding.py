"""Dense vector providers for technique descriptions.

Two providers back the rest of the engine: a table of precomputed vectors
loaded from disk (typically produced by an external sentence encoder) and a
hashed TF-IDF model fitted natively so the whole pipeline can run with zero
external artifacts. Both expose ``embed`` and ``vector_for``; everything
downstream talks cosine similarity.
"""

from __future__ import annotations

import hashlib
import json
import math
from collections import Counter
from dataclasses import dataclass, field
from pathlib import Path
from typing import Union

import numpy as np

from .errors import ContractError, DegenerateVectorError, ParseError, ZeroVectorError


def cosine_similarity(u: np.ndarray, v: np.ndarray) -> float:
    """Cosine of the angle between two nonzero vectors, clamped to [-1, 1]."""
    u = np.asarray(u, dtype=float)
    v = np.asarray(v, dtype=float)
    if u.shape != v.shape:
        raise ContractError(f"dimension mismatch: {u.shape} vs {v.shape}")
    nu = float(np.linalg.norm(u))
    nv = float(np.linalg.norm(v))
    if nu == 0.0 or nv == 0.0:
        raise DegenerateVectorError("cosine similarity of a zero-norm vector")
    if np.array_equal(u, v):
        return 1.0
    return float(np.clip(float(np.dot(u, v)) / (nu * nv), -1.0, 1.0))


def content_key(text: str) -> str:
    """Content-hash key under which tables may store vectors for raw text."""
    return "sha256:" + hashlib.sha256(text.encode("utf-8")).hexdigest()


@dataclass
class EmbeddingTable:
    """Immutable map from sample keys to fixed-dimension vectors."""

    dim: int
    entries: dict[str, np.ndarray]
    source: str = ""

    def embed(self, key: str) -> np.ndarray:
        try:
            return self.entries[key]
        except KeyError:
            raise ContractError(f"embedding table has no entry for key {key!r}") from None

    def vector_for(self, key: str | None = None, text: str | None = None) -> np.ndarray:
        """Resolve a vector by explicit key, falling back to the content hash
        of ``text`` (see :func:`content_key`)."""
        tried = []
        if key is not None:
            if key in self.entries:
                return self.entries[key]
            tried.append(key)
        if text is not None:
            hashed = content_key(text)
            if hashed in self.entries:
                return self.entries[hashed]
            tried.append(hashed)
        raise ContractError(f"embedding table has no entry under any of {tried}")


def load_embedding_table(path: Union[str, Path]) -> EmbeddingTable:
    """Load a JSON Lines table: one ``{"key": ..., "vector": [...]}`` per line.

    An optional first line ``{"source": ...}`` carries provenance. Dimension
    mismatches, duplicate keys, and non-finite values are rejected with the
    offending line number.
    """
    path = Path(path)
    entries: dict[str, np.ndarray] = {}
    dim: int | None = None
    source = f"file:{path.name}"
    with path.open("r", encoding="utf-8") as handle:
        for lineno, line in enumerate(handle, start=1):
            line = line.strip()
            if not line:
                continue
            try:
                obj = json.loads(line)
            except json.JSONDecodeError as exc:
                raise ParseError(f"line {lineno}: malformed JSON ({exc.msg})") from None
            if not isinstance(obj, dict):
                raise ParseError(f"line {lineno}: expected an object")
            if "key" not in obj:
                if lineno == 1 and "source" in obj:
                    source = str(obj["source"])
                    continue
                raise ParseError(f"line {lineno}: object missing 'key'")
            key = obj["key"]
            vector = obj.get("vector")
            if not isinstance(key, str) or not isinstance(vector, list) or not vector:
                raise ParseError(f"line {lineno}: need a string 'key' and non-empty 'vector'")
            values = np.asarray(vector, dtype=float)
            if not np.all(np.isfinite(values)):
                raise ParseError(f"line {lineno}: non-finite value in vector for {key!r}")
            if dim is None:
                dim = len(values)
            elif len(values) != dim:
                raise ParseError(
                    f"line {lineno}: vector of dimension {len(values)} != table dimension {dim}"
                )
            if key in entries:
                raise ParseError(f"line {lineno}: duplicate key {key!r}")
            entries[key] = values
    if dim is None:
        raise ParseError(f"{path}: table contains no entries")
    return EmbeddingTable(dim=dim, entries=entries, source=source)


def write_embedding_table(path: Union[str, Path], table: EmbeddingTable) -> None:
    with Path(path).open("w", encoding="utf-8") as handle:
        if table.source:
            handle.write(json.dumps({"source": table.source}) + "\n")
        for key, vector in table.entries.items():
            handle.write(json.dumps({"key": key, "vector": [float(x) for x in vector]}) + "\n")


def _fold(token: str, dim: int) -> int:
    """Fixed vocabulary-overflow hash: first 8 bytes of SHA-256, mod dim."""
    digest = hashlib.sha256(token.encode("utf-8")).digest()
    return int.from_bytes(digest[:8], "big") % dim


@dataclass
class TfidfModel:
    """Hashed TF-IDF model over whitespace tokens of preprocessed text.

    idf(token) = ln((1 + N) / (1 + df)) + 1; embeddings are L2-normalized
    tf*idf vectors of constant dimension ``dim``.
    """

    vocabulary: dict[str, int]
    idf: dict[str, float]
    dim: int
    corpus_size: int
    hashed: bool = field(default=False)

    def embed(self, text: str) -> np.ndarray:
        tokens = text.split()
        if not tokens:
            raise ZeroVectorError("cannot embed empty text")
        vec = np.zeros(self.dim, dtype=float)
        known = 0
        for token, count in Counter(tokens).items():
            index = self.vocabulary.get(token)
            if index is None:
                continue
            vec[index] += count * self.idf[token]
            known += 1
        if known == 0:
            raise ZeroVectorError(
                f"no in-vocabulary token in text starting {text[:40]!r}"
            )
        return vec / np.linalg.norm(vec)

    def vector_for(self, key: str | None = None, text: str | None = None) -> np.ndarray:
        if text is None:
            raise ContractError("TF-IDF provider needs the text to embed")
        return self.embed(text)

    def token_weight(self, token: str, count: int) -> float:
        """tf*idf weight of ``count`` occurrences of ``token`` in one document.

        Unseen tokens get the max-idf default ln(1 + N) + 1.
        """
        idf = self.idf.get(token, math.log(1.0 + self.corpus_size) + 1.0)
        return count * idf

    def to_json(self) -> str:
        return json.dumps(
            {
                "format": "killchain-tfidf-v1",
                "dim": self.dim,
                "corpus_size": self.corpus_size,
                "hashed": self.hashed,
                "vocabulary": self.vocabulary,
                "idf": self.idf,
            },
            sort_keys=True,
        )

    @classmethod
    def from_json(cls, text: str) -> "TfidfModel":
        obj = json.loads(text)
        if obj.get("format") != "killchain-tfidf-v1":
            raise ParseError(f"unsupported TF-IDF model format {obj.get('format')!r}")
        return cls(
            vocabulary=dict(obj["vocabulary"]),
            idf={k: float(v) for k, v in obj["idf"].items()},
            dim=int(obj["dim"]),
            corpus_size=int(obj["corpus_size"]),
            hashed=bool(obj["hashed"]),
        )


def fit_tfidf(corpus: list[str], dim: int) -> TfidfModel:
    """Fit document frequencies over a corpus of preprocessed documents.

    Vocabulary indices are positions in the sorted token list when it fits in
    ``dim``, otherwise the SHA-256 fold of the token. Fitting is insensitive
    to corpus order.
    """
    if dim < 1:
        raise ContractError(f"dimension must be >= 1, got {dim}")
    if not corpus:
        raise ContractError("cannot fit TF-IDF on an empty corpus")
    df: Counter[str] = Counter()
    for doc in corpus:
        df.update(set(doc.split()))
    if not df:
        raise ContractError("corpus contains no tokens")
    n_docs = len(corpus)
    tokens = sorted(df)
    hashed = len(tokens) > dim
    if hashed:
        vocabulary = {token: _fold(token, dim) for token in tokens}
    else:
        vocabulary = {token: index for index, token in enumerate(tokens)}
    idf = {token: math.log((1.0 + n_docs) / (1.0 + df[token])) + 1.0 for token in tokens}
    return TfidfModel(
        vocabulary=vocabulary, idf=idf, dim=dim, corpus_size=n_docs, hashed=hashed
    )


EmbeddingProvider = Union[EmbeddingTable, TfidfModel]


def embed(provider: EmbeddingProvider, item: str) -> np.ndarray:
    """Embed ``item``: a stored key for tables, raw text for TF-IDF."""
    return provider.embed(item)
