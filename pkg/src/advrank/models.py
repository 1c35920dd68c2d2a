"""Differentiable scorers: two-layer ReLU network, matrix factorization and a
mean-pooled embedding cosine scorer.

Every model scores a (query, document) pair and may take additive
perturbations ``eta_q`` / ``eta_d`` on its perturbable inputs:

* ``RankMlp``: the query is an opaque id, the document is the joint feature
  vector; only ``eta_d`` exists and it is added to the feature vector.
* ``MatFac``: query and document are user and item indices; the
  perturbations are added to the latent vectors.
* ``EmbedCosine``: query and document are token id sequences; perturbations
  live in vocabulary space and are mixed through the embedding matrix,
  ``pooled + eta @ Z``.

``input_grads`` returns d score / d eta for each perturbable input (``None``
where a side is not perturbable) and ``accumulate_param_grad`` adds
``upstream * d score / d theta`` into an accumulator created by
``new_accumulator``.
"""

import json

import numpy as np

from .numerics import Rng

CHECKPOINT_FORMAT = "advrank-checkpoint"
CHECKPOINT_VERSION = 1
INIT_RANGE = 0.05


class ScoreModel:
    kind = None
    # names of the parameter arrays, in flattening order
    param_names = ()
    has_query_input = True

    def params(self):
        return {name: getattr(self, name) for name in self.param_names}

    def get_flat_params(self):
        return np.concatenate([np.ravel(getattr(self, n)) for n in self.param_names])

    def set_flat_params(self, flat):
        flat = np.asarray(flat, dtype=np.float64)
        pos = 0
        for name in self.param_names:
            arr = getattr(self, name)
            arr[...] = flat[pos:pos + arr.size].reshape(arr.shape)
            pos += arr.size
        if pos != flat.size:
            raise ValueError("flat parameter vector has the wrong length")

    def copy(self):
        other = self.__class__.__new__(self.__class__)
        other.__dict__.update(self.__dict__)
        for name in self.param_names:
            setattr(other, name, getattr(self, name).copy())
        return other

    def new_accumulator(self):
        return {name: np.zeros_like(getattr(self, name)) for name in self.param_names}

    def flatten_accumulator(self, acc):
        return np.concatenate([np.ravel(acc[n]) for n in self.param_names])

    def apply_update(self, acc, lr, weight_decay=0.0):
        for name in self.param_names:
            p = getattr(self, name)
            g = acc[name]
            if weight_decay:
                g = g + weight_decay * p
            p -= lr * g

    def input_dims(self):
        """Lengths of the (query, document) perturbation vectors; None if absent."""
        raise NotImplementedError

    def doc_input(self, dataset_ref, features=None):
        """Map a dataset document reference to this model's document input."""
        return dataset_ref


def _check_len(x, n, what):
    if x.shape != (n,):
        raise ValueError(f"{what} must have length {n}, got shape {x.shape}")


class RankMlp(ScoreModel):
    """score(x) = w2 . relu(W1 x + b1) + b2."""

    kind = "mlp"
    param_names = ("W1", "b1", "w2", "b2")
    has_query_input = False

    def __init__(self, n_features, n_hidden=None, rng=None):
        n_hidden = n_features if n_hidden is None else n_hidden
        rng = rng if rng is not None else Rng(0)
        self.W1 = rng.uniform(-INIT_RANGE, INIT_RANGE, (n_hidden, n_features))
        self.b1 = np.zeros(n_hidden)
        self.w2 = rng.uniform(-INIT_RANGE, INIT_RANGE, n_hidden)
        self.b2 = np.zeros(1)

    @property
    def n_features(self):
        return self.W1.shape[1]

    def input_dims(self):
        return None, self.n_features

    def _hidden(self, x):
        x = np.asarray(x, dtype=np.float64)
        _check_len(x, self.n_features, "feature vector")
        return self.W1 @ x + self.b1

    def score(self, q, d, eta_q=None, eta_d=None):
        x = d if eta_d is None else d + eta_d
        h = self._hidden(x)
        return float(self.w2 @ np.maximum(h, 0.0) + self.b2[0])

    def input_grads(self, q, d, eta_q=None, eta_d=None):
        x = d if eta_d is None else d + eta_d
        h = self._hidden(x)
        return None, self.W1.T @ (self.w2 * (h > 0))

    def accumulate_param_grad(self, q, d, upstream, acc, eta_q=None, eta_d=None):
        if upstream == 0.0:
            return acc
        x = np.asarray(d if eta_d is None else d + eta_d, dtype=np.float64)
        h = self._hidden(x)
        mask = h > 0
        back = upstream * self.w2 * mask
        acc["W1"] += np.outer(back, x)
        acc["b1"] += back
        acc["w2"] += upstream * np.maximum(h, 0.0)
        acc["b2"] += upstream
        return acc


def mlp_score(model, x):
    return model.score(None, x)


def mlp_input_grad(model, x, upstream):
    return upstream * model.input_grads(None, x)[1]


class MatFac(ScoreModel):
    """score(u, i) = U[u] . V[i] + b[i]."""

    kind = "mf"
    param_names = ("U", "V", "b")

    def __init__(self, n_users, n_items, k=5, rng=None):
        rng = rng if rng is not None else Rng(0)
        self.U = rng.uniform(-INIT_RANGE, INIT_RANGE, (n_users, k))
        self.V = rng.uniform(-INIT_RANGE, INIT_RANGE, (n_items, k))
        self.b = np.zeros(n_items)

    @property
    def k(self):
        return self.U.shape[1]

    def input_dims(self):
        return self.k, self.k

    def _check(self, u, i):
        if not 0 <= u < self.U.shape[0]:
            raise IndexError(f"user id {u} out of range [0, {self.U.shape[0]})")
        if not 0 <= i < self.V.shape[0]:
            raise IndexError(f"item id {i} out of range [0, {self.V.shape[0]})")

    def _vecs(self, u, i, eta_q, eta_d):
        self._check(u, i)
        vu = self.U[u] if eta_q is None else self.U[u] + eta_q
        vi = self.V[i] if eta_d is None else self.V[i] + eta_d
        return vu, vi

    def score(self, q, d, eta_q=None, eta_d=None):
        vu, vi = self._vecs(q, d, eta_q, eta_d)
        return float(vu @ vi + self.b[d])

    def input_grads(self, q, d, eta_q=None, eta_d=None):
        vu, vi = self._vecs(q, d, eta_q, eta_d)
        return vi.copy(), vu.copy()

    def new_accumulator(self):
        # sparse: only touched rows are stored
        return {"U": {}, "V": {}, "b": {}}

    def accumulate_param_grad(self, q, d, upstream, acc, eta_q=None, eta_d=None):
        if upstream == 0.0:
            return acc
        vu, vi = self._vecs(q, d, eta_q, eta_d)
        _add_row(acc["U"], q, upstream * vi)
        _add_row(acc["V"], d, upstream * vu)
        acc["b"][d] = acc["b"].get(d, 0.0) + upstream
        return acc

    def flatten_accumulator(self, acc):
        dense = {"U": np.zeros_like(self.U), "V": np.zeros_like(self.V), "b": np.zeros_like(self.b)}
        for name in ("U", "V", "b"):
            for row, val in acc[name].items():
                dense[name][row] += val
        return np.concatenate([np.ravel(dense[n]) for n in self.param_names])

    def apply_update(self, acc, lr, weight_decay=0.0):
        for name in ("U", "V", "b"):
            p = getattr(self, name)
            for row, g in acc[name].items():
                if weight_decay:
                    g = g + weight_decay * p[row]
                p[row] -= lr * g


def _add_row(table, row, vec):
    if row in table:
        table[row] = table[row] + vec
    else:
        table[row] = vec.copy()


def mf_score(model, u, i):
    return model.score(u, i)


def mf_input_grads(model, u, i):
    return model.input_grads(u, i)


class EmbedCosine(ScoreModel):
    """Cosine of mean-pooled token embeddings, with vocabulary-space mixing."""

    kind = "cosine"
    param_names = ("Z",)

    def __init__(self, vocab_size, k=100, rng=None):
        rng = rng if rng is not None else Rng(0)
        self.Z = rng.uniform(-INIT_RANGE, INIT_RANGE, (vocab_size, k))

    @property
    def vocab_size(self):
        return self.Z.shape[0]

    def input_dims(self):
        return self.vocab_size, self.vocab_size

    def pool(self, tokens, eta=None):
        tokens = np.asarray(tokens, dtype=np.int64)
        if tokens.size == 0:
            raise ValueError("empty token sequence")
        if tokens.min() < 0 or tokens.max() >= self.vocab_size:
            raise IndexError("token id out of vocabulary range")
        v = self.Z[tokens].mean(axis=0)
        if eta is not None:
            v = v + eta @ self.Z
        return v

    def _pooled(self, q, d, eta_q, eta_d):
        vq = self.pool(q, eta_q)
        vd = self.pool(d, eta_d)
        nq = float(np.sqrt(vq @ vq))
        nd = float(np.sqrt(vd @ vd))
        if nq <= 1e-12 or nd <= 1e-12:
            raise ValueError("pooled vector has zero norm")
        return vq, vd, nq, nd

    def score(self, q, d, eta_q=None, eta_d=None):
        vq, vd, nq, nd = self._pooled(q, d, eta_q, eta_d)
        return float(np.clip(vq @ vd / (nq * nd), -1.0, 1.0))

    def pooled_grads(self, q, d, eta_q=None, eta_d=None):
        """d cosine / d pooled query vector and d pooled document vector."""
        vq, vd, nq, nd = self._pooled(q, d, eta_q, eta_d)
        cos = vq @ vd / (nq * nd)
        gq = vd / (nq * nd) - cos * vq / (nq * nq)
        gd = vq / (nq * nd) - cos * vd / (nd * nd)
        return gq, gd

    def input_grads(self, q, d, eta_q=None, eta_d=None):
        gq, gd = self.pooled_grads(q, d, eta_q, eta_d)
        return self.Z @ gq, self.Z @ gd

    def accumulate_param_grad(self, q, d, upstream, acc, eta_q=None, eta_d=None):
        if upstream == 0.0:
            return acc
        gq, gd = self.pooled_grads(q, d, eta_q, eta_d)
        for tokens, eta, g in ((q, eta_q, gq), (d, eta_d, gd)):
            tokens = np.asarray(tokens, dtype=np.int64)
            np.add.at(acc["Z"], tokens, upstream * g / tokens.size)
            if eta is not None:
                acc["Z"] += upstream * np.outer(eta, g)
        return acc


def cosine_score(model, q_tokens, d_tokens):
    return model.score(q_tokens, d_tokens)


def cosine_input_grads(model, q_tokens, d_tokens):
    return model.pooled_grads(q_tokens, d_tokens)


def param_grad_accumulate(model, example, upstream, acc):
    """Add ``upstream * d score / d theta`` for ``example = (q, d)`` to ``acc``."""
    q, d = example
    if isinstance(model, RankMlp) and np.ndim(d) != 1:
        raise TypeError("RankMlp expects a feature vector as document input")
    if isinstance(model, MatFac) and np.ndim(d) != 0:
        raise TypeError("MatFac expects an item index as document input")
    return model.accumulate_param_grad(q, d, upstream, acc)


# -- checkpoints -------------------------------------------------------------

_KINDS = {cls.kind: cls for cls in (RankMlp, MatFac, EmbedCosine)}


def save_checkpoint(model, path):
    """Write a JSON checkpoint; floats are stored as hex strings so that
    loading is bit-exact."""
    payload = {
        "format": CHECKPOINT_FORMAT,
        "version": CHECKPOINT_VERSION,
        "kind": model.kind,
        "params": {
            name: {"shape": list(arr.shape), "hex": [float(v).hex() for v in np.ravel(arr)]}
            for name, arr in model.params().items()
        },
    }
    with open(path, "w") as fh:
        json.dump(payload, fh)


def load_checkpoint(path):
    with open(path) as fh:
        payload = json.load(fh)
    if payload.get("format") != CHECKPOINT_FORMAT:
        raise ValueError(f"{path} is not a model checkpoint")
    if payload.get("version") != CHECKPOINT_VERSION:
        raise ValueError(f"unsupported checkpoint version {payload.get('version')}")
    cls = _KINDS[payload["kind"]]
    model = cls.__new__(cls)
    for name in cls.param_names:
        entry = payload["params"][name]
        values = np.array([float.fromhex(h) for h in entry["hex"]], dtype=np.float64)
        setattr(model, name, values.reshape(entry["shape"]))
    return model
