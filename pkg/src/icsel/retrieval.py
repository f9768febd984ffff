"""Candidate-pool generation: sparse BM25, dense inner-product top-n, random.

All three retrievers share the same tie-break rule (ascending corpus
position) and honor an optional self-exclusion position so a query can never
retrieve its own record.
"""

from __future__ import annotations

import math
import re
from collections import Counter
from dataclasses import dataclass
from typing import Sequence

import numpy as np

from .corpus import Corpus, EmbeddingMatrix
from .errors import RetrievalError

_TOKEN_RE = re.compile(r"[a-z0-9]+")

# Standard Okapi defaults; the ranking only needs to be reproducible.
DEFAULT_K1 = 1.2
DEFAULT_B = 0.75


def tokenize(text: str) -> list[str]:
    """Lowercase and split on any non-alphanumeric run. No stemming, no stopwords."""
    return _TOKEN_RE.findall(text.lower())


@dataclass(frozen=True)
class CandidatePool:
    """A fixed-size candidate set for one query.

    member_positions lists corpus positions in retrieval order;
    relevance_order is the same positions sorted by score descending
    (ties broken by ascending position). For score-based retrievers the two
    coincide; random pools have no scores so both carry the draw order.
    """

    query_id: str
    member_positions: tuple[int, ...]
    relevance_order: tuple[int, ...]

    def __post_init__(self):
        if len(set(self.member_positions)) != len(self.member_positions):
            raise RetrievalError("candidate pool contains duplicate positions")
        if sorted(self.member_positions) != sorted(self.relevance_order):
            raise RetrievalError("relevance_order must permute member_positions")

    def __len__(self) -> int:
        return len(self.member_positions)


class Bm25Index:
    """Okapi BM25 over a corpus's input texts, built in memory.

    Uses the non-negative idf variant log(1 + (N - df + 0.5)/(df + 0.5)) so a
    document containing no query term scores exactly 0 and can never outrank
    a matching document.
    """

    def __init__(self, corpus: Corpus, k1: float = DEFAULT_K1, b: float = DEFAULT_B):
        self.k1 = k1
        self.b = b
        self.num_docs = len(corpus)
        docs = [tokenize(rec.input_text) for rec in corpus.records]
        self.doc_lengths = [len(d) for d in docs]
        self.avg_len = (sum(self.doc_lengths) / self.num_docs) if self.num_docs else 0.0
        self.term_freqs: list[Counter] = [Counter(d) for d in docs]
        df: Counter = Counter()
        for tf in self.term_freqs:
            df.update(tf.keys())
        self.idf = {
            term: math.log(1.0 + (self.num_docs - n + 0.5) / (n + 0.5))
            for term, n in df.items()
        }

    def scores(self, query: str) -> np.ndarray:
        """BM25 score of every document for the query. Query term multiplicity counts."""
        terms = tokenize(query)
        if not terms:
            raise RetrievalError(f"query {query!r} tokenizes to nothing")
        out = np.zeros(self.num_docs)
        for pos, tf in enumerate(self.term_freqs):
            norm = self.k1 * (1.0 - self.b + self.b * self.doc_lengths[pos] / self.avg_len)
            score = 0.0
            for term in terms:
                f = tf.get(term)
                if f is None:
                    continue
                score += self.idf[term] * f * (self.k1 + 1.0) / (f + norm)
            out[pos] = score
        return out


def _ranked_pool(
    query_id: str, scores: np.ndarray, k: int, exclude: int | None
) -> CandidatePool:
    scores = scores.astype(np.float64, copy=True)
    available = len(scores) - (1 if exclude is not None else 0)
    if k < 1 or k > available:
        raise RetrievalError(f"k={k} out of range for {available} available rows")
    if exclude is not None:
        scores[exclude] = -np.inf
    # stable sort on negated scores keeps ascending position among ties
    order = np.argsort(-scores, kind="stable")[:k]
    members = tuple(int(p) for p in order)
    return CandidatePool(query_id=query_id, member_positions=members, relevance_order=members)


def bm25_topk(
    index: Bm25Index,
    query: str,
    k: int,
    exclude: int | None = None,
    query_id: str = "",
) -> CandidatePool:
    """Top-k corpus positions by descending BM25 score."""
    return _ranked_pool(query_id, index.scores(query), k, exclude)


def dense_topk(
    embeddings: EmbeddingMatrix,
    query_vec: np.ndarray,
    k: int,
    exclude: int | None = None,
    query_id: str = "",
) -> CandidatePool:
    """Top-k corpus positions by descending inner product with the query vector."""
    query_vec = np.asarray(query_vec, dtype=np.float64)
    if query_vec.shape != (embeddings.dim,):
        raise RetrievalError(
            f"query dim {query_vec.shape} does not match matrix dim {embeddings.dim}"
        )
    scores = embeddings.data @ query_vec
    return _ranked_pool(query_id, scores, k, exclude)


def random_pool(
    corpus_size: int,
    k: int,
    seed: int,
    exclude: int | None = None,
    query_id: str = "",
) -> CandidatePool:
    """k distinct positions drawn uniformly without replacement, seeded."""
    positions = [p for p in range(corpus_size) if p != exclude]
    if k < 1 or k > len(positions):
        raise RetrievalError(f"k={k} out of range for {len(positions)} available rows")
    rng = np.random.default_rng(seed)
    draw = tuple(int(p) for p in rng.choice(positions, size=k, replace=False))
    return CandidatePool(query_id=query_id, member_positions=draw, relevance_order=draw)
