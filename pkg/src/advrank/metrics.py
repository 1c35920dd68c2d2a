"""Ranking metrics, significance testing and evaluation reports."""

import json
import math
from dataclasses import dataclass, field
from typing import NamedTuple

import numpy as np
from scipy import stats

from .models import MatFac, RankMlp

CUTOFFS = (1, 3, 5, 10)
METRICS = ("precision", "ndcg")


def precision_at(ranked, n):
    """Fraction of the top ``n`` entries with grade > 0 (short lists count as
    padded with irrelevant entries)."""
    if n < 1:
        raise ValueError("n must be >= 1")
    top = np.asarray(ranked[:n])
    return float(np.count_nonzero(top > 0)) / n


def dcg(grades, n):
    # fsum makes the result independent of summation order
    return math.fsum(
        (2.0 ** float(g) - 1.0) / math.log2(r + 2) for r, g in enumerate(list(grades)[:n])
    )


def ndcg_at(ranked, ideal, n):
    """DCG of ``ranked`` over the DCG of ``ideal`` sorted descending; 0 when
    the ideal DCG is 0."""
    if n < 1:
        raise ValueError("n must be >= 1")
    best = dcg(sorted(ideal, reverse=True), n)
    if best == 0:
        return 0.0
    return dcg(ranked, n) / best


class TTestResult(NamedTuple):
    t: float
    p: float
    degenerate: str = ""


def paired_t_test(a, b):
    """Two-sided paired t-test on per-query differences a - b.

    Degenerate inputs are flagged rather than raised: identical lists give
    (0, 1, "identical"); a constant non-zero difference gives
    (+-inf, 0, "zero_variance").
    """
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if a.shape != b.shape or a.ndim != 1 or a.size < 2:
        raise ValueError("need two equal-length lists with at least 2 entries")
    d = a - b
    n = d.size
    mean = d.mean()
    sd = d.std(ddof=1)
    if not np.any(d):
        return TTestResult(0.0, 1.0, "identical")
    if sd == 0 or sd <= 1e-15 * abs(mean):
        return TTestResult(math.copysign(math.inf, mean), 0.0, "zero_variance")
    t = mean / (sd / math.sqrt(n))
    p = 2.0 * stats.t.sf(abs(t), n - 1)
    return TTestResult(float(t), float(min(p, 1.0)))


def score_candidates(model, dataset, q, cands):
    """Scores of candidate document references for query ``q``."""
    cands = np.asarray(cands, dtype=np.int64)
    if isinstance(model, MatFac) and dataset.kind == "ids":
        return model.V[cands] @ model.U[q] + model.b[cands]
    if isinstance(model, RankMlp) and dataset.kind == "features":
        h = dataset.features[cands] @ model.W1.T + model.b1
        return np.maximum(h, 0.0) @ model.w2 + model.b2[0]
    qi = dataset.query_input(q)
    return np.array([model.score(qi, dataset.doc_input(c)) for c in cands])


def rank_documents(scores, doc_ids):
    """Document ids ordered by descending score, ties by ascending id."""
    scores = np.asarray(scores, dtype=np.float64)
    doc_ids = np.asarray(doc_ids)
    order = np.lexsort((doc_ids, -scores))
    return doc_ids[order]


def rank_for_query(model, dataset, q, cands=None):
    cands = dataset.candidates(q) if cands is None else np.asarray(cands)
    return rank_documents(score_candidates(model, dataset, q, cands), cands)


@dataclass
class EvalReport:
    per_query: dict  # query key -> {"precision@1": ..., "ndcg@1": ..., ...}
    meta: dict = field(default_factory=dict)
    cutoffs: tuple = CUTOFFS

    @property
    def columns(self):
        return [f"{m}@{n}" for m in METRICS for n in self.cutoffs]

    def aggregate(self):
        keys = list(self.per_query)
        return {
            c: (float(np.mean([self.per_query[k][c] for k in keys])) if keys else 0.0)
            for c in self.columns
        }

    def values(self, column):
        return [self.per_query[k][column] for k in self.per_query]

    def to_json(self):
        payload = {
            "meta": self.meta,
            "cutoffs": list(self.cutoffs),
            "aggregate": {k: float(f"{v:.9g}") for k, v in self.aggregate().items()},
            "per_query": {
                str(k): {c: float(f"{v[c]:.9g}") for c in self.columns}
                for k, v in self.per_query.items()
            },
        }
        return json.dumps(payload, indent=1, sort_keys=True) + "\n"

    def tsv_rows(self, method):
        agg = self.aggregate()
        return [f"{c}\t{method}\t{agg[c]:.9g}" for c in self.columns]


def evaluate(model, dataset, cutoffs=CUTOFFS, meta=None):
    """Rank each query's candidates and compute Precision@N / NDCG@N.

    Queries without any relevant candidate are skipped; their count is kept
    in ``meta["skipped_queries"]``.
    """
    per_query = {}
    skipped = 0
    for q in range(dataset.n_queries):
        cands = dataset.candidates(q)
        if cands.size == 0:
            skipped += 1
            continue
        if dataset.grades is not None:
            grades = np.maximum(dataset.grades[cands], 0)
        else:
            grades = np.zeros(cands.size, dtype=np.int64)
            grades[: dataset.labeled(q).size] = 1
        if not np.any(grades > 0):
            skipped += 1
            continue
        scores = score_candidates(model, dataset, q, cands)
        order = np.lexsort((cands, -scores))
        ranked = grades[order]
        row = {}
        for n in cutoffs:
            row[f"precision@{n}"] = precision_at(ranked, n)
            row[f"ndcg@{n}"] = ndcg_at(ranked, grades, n)
        per_query[dataset.query_keys[q]] = row
    info = dict(meta or {})
    info["skipped_queries"] = skipped
    info["evaluated_queries"] = len(per_query)
    return EvalReport(per_query, info, tuple(cutoffs))
