"""Dataset parsing and compilation into per-query labeled / unlabeled pools.

Supported inputs are LETOR 4.0 text files (MQ2008-semi) and the MovieLens
100k ``u.data`` ratings file.  Both compile into a ``RankingDataset``, whose
pools are stored in CSR layout: the documents of query ``q`` are
``docs[indptr[q]:indptr[q + 1]]``.
"""

import hashlib
import io
import json
import math
import os
import re
import urllib.request
import zipfile
from dataclasses import dataclass, field
from pathlib import Path
from typing import NamedTuple

import numpy as np

from .numerics import Rng

LETOR_FEATURES = 46
CACHE_FORMAT = "advrank-dataset"
CACHE_VERSION = 1
DATA_ROOT_ENV = "ADVRANK_DATA"

MOVIELENS_URL = "https://files.grouplens.org/datasets/movielens/ml-100k.zip"
MOVIELENS_SIZE = 1979173
MOVIELENS_SHA256 = "06416e597f82b7342361e41163890c81036900f418ad91315590814211dca490"
LETOR_URL = "https://www.microsoft.com/en-us/research/project/letor-learning-rank-information-retrieval/"


class DataFormatError(ValueError):
    pass


class LetorRecord(NamedTuple):
    relevance: int
    query_id: str
    features: np.ndarray
    doc_id: str


class Interaction(NamedTuple):
    user_id: int
    item_id: int
    rating: int
    timestamp: int


def _csr(groups, n):
    indptr = np.zeros(n + 1, dtype=np.int64)
    for q in range(n):
        indptr[q + 1] = indptr[q] + len(groups[q])
    docs = np.array([d for q in range(n) for d in groups[q]], dtype=np.int64)
    return indptr, docs


@dataclass
class RankingDataset:
    """Per-query labeled (positive) and unlabeled pools.

    kind is "features" (documents are rows of ``features``), "ids" (documents
    are item indices) or "tokens" (queries and documents are token lists).
    ``grades`` holds graded relevance per document reference for evaluation;
    when absent, labeled documents have grade 1 and the rest 0.
    """

    kind: str
    labeled_indptr: np.ndarray
    labeled_docs: np.ndarray
    unlabeled_indptr: np.ndarray
    unlabeled_docs: np.ndarray
    n_docs: int
    query_keys: list
    features: np.ndarray = None
    grades: np.ndarray = None
    query_tokens: list = None
    doc_tokens: list = None
    meta: dict = field(default_factory=dict)

    @classmethod
    def from_groups(cls, kind, labeled, unlabeled, n_docs, query_keys, **kw):
        n = len(query_keys)
        li, ld = _csr(labeled, n)
        ui, ud = _csr(unlabeled, n)
        return cls(kind, li, ld, ui, ud, n_docs, list(query_keys), **kw)

    @property
    def n_queries(self):
        return len(self.query_keys)

    def labeled(self, q):
        return self.labeled_docs[self.labeled_indptr[q]:self.labeled_indptr[q + 1]]

    def unlabeled(self, q):
        return self.unlabeled_docs[self.unlabeled_indptr[q]:self.unlabeled_indptr[q + 1]]

    def n_labeled(self):
        return int(self.labeled_docs.size)

    def positives(self):
        """All labeled (query, doc) pairs as two aligned arrays."""
        counts = np.diff(self.labeled_indptr)
        return np.repeat(np.arange(self.n_queries), counts), self.labeled_docs.copy()

    def train_queries(self):
        return np.flatnonzero(np.diff(self.labeled_indptr) > 0)

    def query_input(self, q):
        if self.kind == "tokens":
            return self.query_tokens[q]
        return q

    def doc_input(self, ref):
        if self.kind == "features":
            return self.features[ref]
        if self.kind == "tokens":
            return self.doc_tokens[ref]
        return int(ref)

    def grade(self, q, ref):
        if self.grades is not None:
            return max(int(self.grades[ref]), 0)
        return 1 if ref in set(self.labeled(q).tolist()) else 0

    def candidates(self, q):
        """Evaluation candidate set: labeled and unlabeled documents of q."""
        return np.concatenate([self.labeled(q), self.unlabeled(q)])


# -- LETOR -------------------------------------------------------------------

_QID = re.compile(r"qid:(\S+)$")


def parse_letor(stream, n_features=LETOR_FEATURES):
    """Parse ``<rel> qid:<id> 1:<v> ... n:<v> [# comment]`` lines."""
    records = []
    for lineno, raw in enumerate(stream, start=1):
        line, _, comment = raw.partition("#")
        parts = line.split()
        if not parts:
            continue
        if len(parts) < 2:
            raise DataFormatError(f"line {lineno}: expected '<rel> qid:<id> ...'")
        try:
            rel = int(parts[0])
        except ValueError:
            raise DataFormatError(f"line {lineno}: bad relevance {parts[0]!r}") from None
        if rel not in (-1, 0, 1, 2):
            raise DataFormatError(f"line {lineno}: relevance {rel} not in {{-1, 0, 1, 2}}")
        m = _QID.match(parts[1])
        if not m:
            raise DataFormatError(f"line {lineno}: expected qid:<id>, got {parts[1]!r}")
        feats = np.full(n_features, np.nan)
        for tok in parts[2:]:
            idx, sep, val = tok.partition(":")
            try:
                i = int(idx)
                v = float(val)
            except ValueError:
                raise DataFormatError(f"line {lineno}: bad feature token {tok!r}") from None
            if not sep or not 1 <= i <= n_features:
                raise DataFormatError(f"line {lineno}: feature index {idx} outside 1..{n_features}")
            feats[i - 1] = v
        missing = np.flatnonzero(np.isnan(feats))
        if missing.size:
            raise DataFormatError(f"line {lineno}: missing feature index {missing[0] + 1}")
        doc_id = ""
        if "=" in comment:
            doc_id = comment.split("=", 1)[1].split()[0] if comment.split("=", 1)[1].split() else ""
        records.append(LetorRecord(rel, m.group(1), feats, doc_id))
    return records


def serialize_letor(records):
    lines = []
    for r in records:
        feats = " ".join(f"{i + 1}:{float(v)!r}" for i, v in enumerate(r.features))
        tail = f" #docid = {r.doc_id}" if r.doc_id else ""
        lines.append(f"{r.relevance} qid:{r.query_id} {feats}{tail}\n")
    return "".join(lines)


def compile_letor_dataset(records):
    """Relevance 1 and 2 form the labeled pool, -1 and 0 the unlabeled pool."""
    order = {}
    labeled, unlabeled = [], []
    for ref, r in enumerate(records):
        if r.query_id not in order:
            order[r.query_id] = len(order)
            labeled.append([])
            unlabeled.append([])
        q = order[r.query_id]
        (labeled if r.relevance >= 1 else unlabeled)[q].append(ref)
    n_feat = records[0].features.size if records else LETOR_FEATURES
    features = np.array([r.features for r in records]).reshape(len(records), n_feat)
    grades = np.array([r.relevance for r in records], dtype=np.int64)
    return RankingDataset.from_groups(
        "features", labeled, unlabeled, len(records), list(order),
        features=features, grades=grades,
        meta={"doc_ids": [r.doc_id for r in records]},
    )


def load_letor_fold(root, fold="Fold1"):
    """Read ``MQ2008-semi/<fold>/{train,test}.txt`` under ``root``."""
    base = Path(root) / "MQ2008-semi" / fold
    out = []
    for name in ("train.txt", "test.txt"):
        with open(base / name) as fh:
            ds = compile_letor_dataset(parse_letor(fh))
        ds.meta["source"] = str(base / name)
        out.append(ds)
    return tuple(out)


# -- MovieLens ---------------------------------------------------------------


def parse_movielens(stream):
    out = []
    for lineno, raw in enumerate(stream, start=1):
        line = raw.rstrip("\n")
        if not line.strip():
            continue
        parts = line.split("\t")
        if len(parts) != 4:
            raise DataFormatError(f"line {lineno}: expected 4 tab-separated fields")
        try:
            u, i, r, t = (int(p) for p in parts)
        except ValueError:
            raise DataFormatError(f"line {lineno}: non-integer field") from None
        if not 1 <= r <= 5:
            raise DataFormatError(f"line {lineno}: rating {r} outside 1..5")
        out.append(Interaction(u, i, r, t))
    return out


def build_id_map(raw_ids):
    """Dense 0-based indices assigned in ascending raw-id order."""
    return {raw: k for k, raw in enumerate(sorted(set(raw_ids)))}


def compile_movielens_dataset(interactions, split_ratio=0.8, seed=0, min_rating=4):
    """Ratings >= min_rating are labeled; they are split train/test at random.

    Train: positives are the train split; every other item is an unlabeled
    candidate.  Test: positives are the held-out split; candidates are all
    items that are not train positives of the user.
    """
    if not 0 < split_ratio < 1:
        raise ValueError("split_ratio must be in (0, 1)")
    users = build_id_map(x.user_id for x in interactions)
    items = build_id_map(x.item_id for x in interactions)
    pos = [(users[x.user_id], items[x.item_id]) for x in interactions if x.rating >= min_rating]
    perm = Rng(seed).permutation(len(pos))
    n_train = int(round(split_ratio * len(pos)))
    n_users, n_items = len(users), len(items)
    train_pos = [set() for _ in range(n_users)]
    test_pos = [set() for _ in range(n_users)]
    for rank, k in enumerate(perm):
        u, i = pos[k]
        (train_pos if rank < n_train else test_pos)[u].add(i)
    all_items = np.arange(n_items)
    tr_lab, tr_unl, te_lab, te_unl = [], [], [], []
    for u in range(n_users):
        tp = sorted(train_pos[u])
        hp = sorted(test_pos[u] - train_pos[u])
        mask = np.ones(n_items, dtype=bool)
        mask[tp] = False
        tr_lab.append(tp)
        tr_unl.append(all_items[mask].tolist())
        mask[hp] = False
        te_lab.append(hp)
        te_unl.append(all_items[mask].tolist())
    keys = sorted(users)
    maps = {"users": {str(k): v for k, v in users.items()}, "items": {str(k): v for k, v in items.items()}}
    no_train = sum(1 for u in range(n_users) if not train_pos[u])
    no_test = sum(1 for u in range(n_users) if not te_lab[u])
    meta = {"split_ratio": split_ratio, "seed": seed, "id_maps": maps}
    train = RankingDataset.from_groups(
        "ids", tr_lab, tr_unl, n_items, keys,
        meta=dict(meta, users_without_positives=no_train),
    )
    test = RankingDataset.from_groups(
        "ids", te_lab, te_unl, n_items, keys,
        meta=dict(meta, users_without_positives=no_test),
    )
    return train, test


def load_movielens(root, split_ratio=0.8, seed=0):
    with open(Path(root) / "ml-100k" / "u.data") as fh:
        return compile_movielens_dataset(parse_movielens(fh), split_ratio, seed)


# -- label subsampling -------------------------------------------------------


def subsample_labels(dataset, fraction, seed):
    """Keep ceil(fraction * N) labeled pairs chosen uniformly at random."""
    if not 0 < fraction <= 1:
        raise ValueError(f"fraction must be in (0, 1], got {fraction}")
    if fraction == 1:
        return dataset
    n = dataset.n_labeled()
    keep = np.sort(Rng(seed).permutation(n)[: math.ceil(fraction * n)])
    qs, docs = dataset.positives()
    groups = [[] for _ in range(dataset.n_queries)]
    for k in keep:
        groups[qs[k]].append(int(docs[k]))
    li = np.zeros(dataset.n_queries + 1, dtype=np.int64)
    np.cumsum([len(g) for g in groups], out=li[1:])
    meta = dict(dataset.meta, label_fraction=fraction, label_seed=seed)
    return RankingDataset(
        dataset.kind, li, np.array([d for g in groups for d in g], dtype=np.int64),
        dataset.unlabeled_indptr, dataset.unlabeled_docs, dataset.n_docs,
        dataset.query_keys, dataset.features, dataset.grades,
        dataset.query_tokens, dataset.doc_tokens, meta,
    )


# -- cache -------------------------------------------------------------------

_ARRAYS = ("labeled_indptr", "labeled_docs", "unlabeled_indptr", "unlabeled_docs", "features", "grades")


def save_dataset(dataset, path):
    """Write ``<path>.npz`` (arrays) plus ``<path>.json`` (keys, id maps, meta)."""
    path = Path(path)
    arrays = {k: getattr(dataset, k) for k in _ARRAYS if getattr(dataset, k) is not None}
    np.savez(path.with_suffix(".npz"), **arrays)
    side = {
        "format": CACHE_FORMAT,
        "version": CACHE_VERSION,
        "kind": dataset.kind,
        "n_docs": dataset.n_docs,
        "query_keys": dataset.query_keys,
        "query_tokens": dataset.query_tokens,
        "doc_tokens": dataset.doc_tokens,
        "meta": dataset.meta,
    }
    with open(path.with_suffix(".json"), "w") as fh:
        json.dump(side, fh, sort_keys=True)


def load_dataset(path):
    path = Path(path)
    with open(path.with_suffix(".json")) as fh:
        side = json.load(fh)
    if side.get("format") != CACHE_FORMAT or side.get("version") != CACHE_VERSION:
        raise DataFormatError(f"{path}: not a version-{CACHE_VERSION} dataset cache")
    with np.load(path.with_suffix(".npz")) as z:
        arrays = {k: z[k] for k in z.files}
    return RankingDataset(
        side["kind"], arrays["labeled_indptr"], arrays["labeled_docs"],
        arrays["unlabeled_indptr"], arrays["unlabeled_docs"], side["n_docs"],
        side["query_keys"], arrays.get("features"), arrays.get("grades"),
        side["query_tokens"], side["doc_tokens"], side["meta"],
    )


# -- fetching ----------------------------------------------------------------


def data_root(default="data"):
    return Path(os.environ.get(DATA_ROOT_ENV, default))


def _sha256(path):
    h = hashlib.sha256()
    with open(path, "rb") as fh:
        for chunk in iter(lambda: fh.read(1 << 20), b""):
            h.update(chunk)
    return h.hexdigest()


def verify_movielens(root):
    path = Path(root) / "ml-100k" / "u.data"
    if not path.exists():
        return False, f"{path} missing"
    size = path.stat().st_size
    if size != MOVIELENS_SIZE:
        return False, f"{path}: size {size}, expected {MOVIELENS_SIZE}"
    digest = _sha256(path)
    if digest != MOVIELENS_SHA256:
        return False, f"{path}: sha256 {digest} does not match"
    return True, f"{path} ok"


def verify_letor(root, fold="Fold1"):
    base = Path(root) / "MQ2008-semi" / fold
    missing = [n for n in ("train.txt", "test.txt") if not (base / n).exists()]
    if missing:
        return False, f"{base}: missing {', '.join(missing)} (download from {LETOR_URL})"
    return True, f"{base} present"


def fetch_movielens(root):
    ok, msg = verify_movielens(root)
    if ok:
        return ok, msg
    with urllib.request.urlopen(MOVIELENS_URL, timeout=60) as resp:
        blob = resp.read()
    target = Path(root) / "ml-100k"
    target.mkdir(parents=True, exist_ok=True)
    with zipfile.ZipFile(io.BytesIO(blob)) as zf:
        (target / "u.data").write_bytes(zf.read("ml-100k/u.data"))
    return verify_movielens(root)
