"""Negative sampling from per-query unlabeled pools.

Every draw consumes one row of uniforms of width ``SamplerConfig.row_width``
(taken from ``rng`` unless supplied explicitly).  Adversarial draws use the
first ``min(C, n)`` entries for a partial Fisher-Yates selection of the
candidate subset (performed in place on the pool, so the pool order evolves
deterministically) and the last entry for the categorical draw.
"""

import math
from dataclasses import dataclass
from typing import Optional

import numpy as np

from .numerics import softmax_with_temperature

KINDS = ("uniform", "adversarial")


@dataclass(frozen=True)
class SamplerConfig:
    kind: str = "adversarial"
    tau: float = 1.0
    # candidate subset size; None scores the whole pool
    pool_size: Optional[int] = 64
    # cached pool scores are refreshed when this many batches old
    refresh_every: int = 1
    exclude_labeled: bool = True

    def __post_init__(self):
        if self.kind not in KINDS:
            raise ValueError(f"sampler kind must be one of {KINDS}, got {self.kind!r}")
        if not self.tau > 0:
            raise ValueError(f"tau must be positive, got {self.tau}")
        if self.pool_size is not None and self.pool_size < 1:
            raise ValueError("pool_size must be >= 1 or None")
        if self.refresh_every < 1:
            raise ValueError("refresh_every must be >= 1")

    @property
    def row_width(self):
        return 1 if self.pool_size is None else self.pool_size + 1


class EmptyPoolError(ValueError):
    pass


class NegativePool:
    """Per-query unlabeled documents (CSR layout) with a score cache.

    ``query_input`` / ``doc_input`` map query indices and document references
    to what the model's ``score`` expects.
    """

    def __init__(self, indptr, docs, query_input=None, doc_input=None):
        self.indptr = np.asarray(indptr, dtype=np.int64)
        self.docs = np.array(docs, dtype=np.int64)
        self.scores = np.zeros(self.docs.size)
        self.last_refresh = np.full(self.n_queries, -1, dtype=np.int64)
        self.batch = 0
        self.query_input = query_input or (lambda q: q)
        self.doc_input = doc_input or (lambda d: d)

    @classmethod
    def from_dataset(cls, dataset):
        return cls(
            dataset.unlabeled_indptr,
            dataset.unlabeled_docs,
            query_input=dataset.query_input,
            doc_input=dataset.doc_input,
        )

    @property
    def n_queries(self):
        return self.indptr.size - 1

    def size(self, q):
        return int(self.indptr[q + 1] - self.indptr[q])

    def members(self, q):
        return self.docs[self.indptr[q]:self.indptr[q + 1]]

    def staleness(self, q):
        if self.last_refresh[q] < 0:
            return None
        return int(self.batch - self.last_refresh[q])

    def tick(self):
        """Advance the batch counter (call once per parameter update)."""
        self.batch += 1


def _row(rng, u, width):
    if u is None:
        return rng.random(width)
    return np.asarray(u, dtype=np.float64)


def _pick(u, n):
    return min(int(math.floor(u * n)), n - 1)


def sample_uniform(pool, q, rng=None, u=None, cfg=None):
    n = pool.size(q)
    if n == 0:
        raise EmptyPoolError(f"no negative candidates for query {q}")
    width = 1 if cfg is None else cfg.row_width
    u = _row(rng, u, width)
    return int(pool.docs[pool.indptr[q] + _pick(u[0], n)])


def refresh_scores(pool, q, model):
    start, stop = pool.indptr[q], pool.indptr[q + 1]
    if stop == start:
        return pool
    qi = pool.query_input(q)
    for j in range(start, stop):
        pool.scores[j] = model.score(qi, pool.doc_input(pool.docs[j]))
    pool.last_refresh[q] = pool.batch
    return pool


def draw_candidates(pool, q, cfg, u):
    """Partial Fisher-Yates: moves a uniform subset to the front of the slice."""
    start = pool.indptr[q]
    n = pool.size(q)
    m = n if cfg.pool_size is None else min(cfg.pool_size, n)
    if m < n:
        docs, scores = pool.docs, pool.scores
        for j in range(m):
            r = j + _pick(u[j], n - j)
            a, b = start + j, start + r
            docs[a], docs[b] = docs[b], docs[a]
            scores[a], scores[b] = scores[b], scores[a]
    return start, m


def candidate_scores(pool, q, model, cfg, start, m):
    if cfg.refresh_every == 1:
        qi = pool.query_input(q)
        return np.array(
            [model.score(qi, pool.doc_input(pool.docs[j])) for j in range(start, start + m)]
        )
    st = pool.staleness(q)
    if st is None or st >= cfg.refresh_every:
        refresh_scores(pool, q, model)
    return pool.scores[start:start + m].copy()


def categorical(probs, u):
    c = np.cumsum(probs)
    idx = int(np.searchsorted(c, u * c[-1], side="right"))
    return min(idx, probs.size - 1)


def sample_adversarial(pool, q, model, cfg, rng=None, u=None):
    """Draw one negative with probability softmax(score / tau) over a
    uniformly drawn candidate subset of the query's pool."""
    n = pool.size(q)
    if n == 0:
        raise EmptyPoolError(f"no negative candidates for query {q}")
    u = _row(rng, u, cfg.row_width)
    start, m = draw_candidates(pool, q, cfg, u)
    scores = candidate_scores(pool, q, model, cfg, start, m)
    probs = softmax_with_temperature(scores, cfg.tau)
    return int(pool.docs[start + categorical(probs, u[-1])])


def sample_negative(pool, q, model, cfg, rng=None, u=None):
    if cfg.kind == "uniform":
        return sample_uniform(pool, q, rng, u, cfg)
    return sample_adversarial(pool, q, model, cfg, rng, u)
