"""Training objectives and the SGD loop.

A training step first builds the objective's terms against the current
parameters (the snapshot): adversarial / virtual adversarial perturbations
and the reference scores of the KL terms are fixed there.  The terms are then
evaluated together with their parameter gradients and one SGD update is
applied.  Supervised ("clean") terms and regularization terms are
accumulated separately and combined as ``clean + alpha * reg``.
"""

import math
import time
from dataclasses import dataclass, field, replace
from typing import NamedTuple, Optional

import numpy as np

from . import kernels
from .losses import kl_from_scores, pairwise_loss, pointwise_ce
from .numerics import Rng
from .perturb import (
    PerturbConfig,
    adversarial_perturbation,
    pairwise_adversarial_perturbation,
    vat_perturbation,
)
from .sampling import NegativePool, SamplerConfig, sample_negative

OBJECTIVES = (
    "plain_pointwise",
    "plain_pairwise",
    "pointwise_at",
    "pairwise_at",
    "full_vat",
    "pointwise_svat",
    "pairwise_svat",
)
PAIRWISE = {"plain_pairwise", "pairwise_at", "pairwise_svat", "full_vat"}
# KL evaluations (each needing its own probe noise) per labeled step
KL_TERMS = {"pointwise_svat": 2, "pairwise_svat": 2, "full_vat": 1}


class TrainingAborted(RuntimeError):
    pass


@dataclass(frozen=True)
class TrainConfig:
    objective: str = "pairwise_at"
    epochs: int = 1
    lr: float = 0.05
    # examples per update; gradients are averaged over the batch
    batch_size: int = 1
    perturb: PerturbConfig = field(default_factory=PerturbConfig)
    sampler: SamplerConfig = field(default_factory=SamplerConfig)
    alpha: float = 1.0
    weight_decay: float = 0.0
    seed: int = 0
    eval_every: int = 0

    def __post_init__(self):
        if self.objective not in OBJECTIVES:
            raise ValueError(f"objective must be one of {OBJECTIVES}, got {self.objective!r}")
        if self.epochs < 1:
            raise ValueError("epochs must be >= 1")
        if not self.lr > 0:
            raise ValueError("learning rate must be positive")
        if self.batch_size < 1:
            raise ValueError("batch_size must be >= 1")
        if self.weight_decay < 0:
            raise ValueError("weight_decay must be >= 0")
        if self.seed < 0:
            raise ValueError("seed must be >= 0")

    def with_(self, **changes):
        return replace(self, **changes)


@dataclass
class EpochLog:
    epoch: int
    mean_loss: float
    seconds: float
    metrics: Optional[dict] = None
    n_positives: int = 0
    n_negatives: int = 0

    def tsv(self, metric_names=()):
        cols = [str(self.epoch), f"{self.mean_loss:.9g}", f"{self.seconds:.3f}"]
        for name in metric_names:
            cols.append(f"{self.metrics[name]:.9g}" if self.metrics else "")
        return "\t".join(cols)


class Sampler:
    """Negative sampler bound to a pool, a config and a random stream."""

    def __init__(self, pool, cfg, rng):
        self.pool = pool
        self.cfg = cfg
        self.rng = rng
        self.count = 0

    def draw(self, model, q, u=None):
        self.count += 1
        return sample_negative(self.pool, q, model, self.cfg, self.rng, u)


# -- objective terms ---------------------------------------------------------


class Term(NamedTuple):
    kind: str  # "ce", "pair" or "kl"
    q: object
    docs: tuple
    etas: tuple  # (eta_q, eta_d) or (eta_q, eta_d_plus, eta_d_minus)
    y: Optional[int] = None
    ref: Optional[float] = None


def ce_terms(model, q, d, y, cfg, adversarial):
    clean = Term("ce", q, (d,), (None, None), y=y)
    if not adversarial:
        return [clean], []
    eta = adversarial_perturbation(model, (q, d, y), cfg)
    return [clean], [Term("ce", q, (d,), (eta.eta_q, eta.eta_d), y=y)]


def pair_terms(model, q, dp, dm, cfg, adversarial):
    clean = Term("pair", q, (dp, dm), (None, None, None))
    if not adversarial:
        return [clean], []
    etas = pairwise_adversarial_perturbation(model, (q, dp, dm), cfg)
    return [clean], [Term("pair", q, (dp, dm), etas)]


def kl_term(model, q, d, cfg, noise=None, rng=None):
    eta = vat_perturbation(model, (q, d), cfg, rng=rng, noise=noise)
    return Term("kl", q, (d,), (eta.eta_q, eta.eta_d), ref=model.score(q, d))


def evaluate_terms(model, terms, acc=None):
    """Sum of term losses; gradients go into ``acc`` when it is given."""
    total = 0.0
    for t in terms:
        if t.kind == "pair":
            eq, ep, em = t.etas
            dp, dm = t.docs
            loss = pairwise_loss(model.score(t.q, dp, eq, ep), model.score(t.q, dm, eq, em))
            if acc is not None:
                model.accumulate_param_grad(t.q, dp, loss.deriv, acc, eq, ep)
                model.accumulate_param_grad(t.q, dm, -loss.deriv, acc, eq, em)
        else:
            eq, ed = t.etas
            s = model.score(t.q, t.docs[0], eq, ed)
            loss = pointwise_ce(s, t.y) if t.kind == "ce" else kl_from_scores(t.ref, s)
            if acc is not None:
                model.accumulate_param_grad(t.q, t.docs[0], loss.deriv, acc, eq, ed)
        total += loss.value
    return total


def combine(model, clean, reg, alpha):
    """clean + alpha * reg, for dense or sparse accumulators."""
    if isinstance(clean.get(model.param_names[0]), dict):
        out = {}
        for name in model.param_names:
            merged = dict(clean[name])
            for row, g in reg[name].items():
                merged[row] = merged[row] + alpha * g if row in merged else alpha * g
            out[name] = merged
        return out
    return {name: clean[name] + alpha * reg[name] for name in model.param_names}


def build_terms(model, objective, q, d_pos, d_neg, cfg, noise=None, rng=None):
    """(clean_terms, reg_terms) of one labeled step.

    ``q``, ``d_pos`` and ``d_neg`` are model inputs.  ``noise`` is a sequence
    of (noise_q, noise_d) pairs for the KL terms, in the order positive,
    negative.
    """
    p = cfg.perturb
    noise = list(noise) if noise is not None else [None] * 2
    if objective in ("plain_pointwise", "pointwise_at", "pointwise_svat"):
        adv = objective == "pointwise_at"
        c1, r1 = ce_terms(model, q, d_pos, 1, p, adv)
        c2, r2 = ce_terms(model, q, d_neg, 0, p, adv)
        clean, reg = c1 + c2, r1 + r2
        if objective == "pointwise_svat":
            reg = [kl_term(model, q, d_pos, p, noise[0], rng), kl_term(model, q, d_neg, p, noise[1], rng)]
        return clean, reg
    clean, reg = pair_terms(model, q, d_pos, d_neg, p, objective == "pairwise_at")
    if objective == "pairwise_svat":
        reg = [kl_term(model, q, d_pos, p, noise[0], rng), kl_term(model, q, d_neg, p, noise[1], rng)]
    elif objective == "full_vat":
        reg = [kl_term(model, q, d_pos, p, noise[0], rng)]
    return clean, reg


def objective_value_and_grad(model, clean, reg, alpha):
    acc_c = model.new_accumulator()
    acc_r = model.new_accumulator()
    loss_c = evaluate_terms(model, clean, acc_c)
    loss_r = evaluate_terms(model, reg, acc_r)
    return loss_c + alpha * loss_r, combine(model, acc_c, acc_r, alpha)


def _labeled_terms(model, objective, q, d_pos, sampler, cfg, negative=None, u=None, noise=None, rng=None):
    pool = sampler.pool
    if negative is None:
        negative = sampler.draw(model, q, u)
    qi = pool.query_input(q)
    return build_terms(
        model, objective, qi, pool.doc_input(d_pos), pool.doc_input(negative), cfg, noise, rng
    )


def _step(model, objective, q, d_pos, sampler, cfg, negative=None, u=None, noise=None, rng=None):
    """One labeled step; ``q``/``d_pos`` are dataset indices/references."""
    clean, reg = _labeled_terms(model, objective, q, d_pos, sampler, cfg, negative, u, noise, rng)
    loss, acc = objective_value_and_grad(model, clean, reg, cfg.alpha)
    model.apply_update(acc, cfg.lr, cfg.weight_decay)
    sampler.pool.tick()
    return loss


def step_pointwise_at(model, q, d_pos, sampler, cfg, **kw):
    return _step(model, "pointwise_at", q, d_pos, sampler, cfg, **kw)


def step_pairwise_at(model, q, d_pos, sampler, cfg, **kw):
    return _step(model, "pairwise_at", q, d_pos, sampler, cfg, **kw)


def step_pointwise_svat(model, q, d_pos, sampler, cfg, **kw):
    return _step(model, "pointwise_svat", q, d_pos, sampler, cfg, **kw)


def step_pairwise_svat(model, q, d_pos, sampler, cfg, **kw):
    return _step(model, "pairwise_svat", q, d_pos, sampler, cfg, **kw)


def step_full_vat(model, q, d, y, cfg, noise=None, rng=None):
    """Full-VAT term for a single example given as model inputs.

    Labeled (y in {0, 1}): cross entropy plus the KL term; unlabeled
    (y is None): the KL term alone.
    """
    clean = [] if y is None else [Term("ce", q, (d,), (None, None), y=y)]
    reg = [kl_term(model, q, d, cfg.perturb, noise, rng)]
    loss, acc = objective_value_and_grad(model, clean, reg, cfg.alpha)
    model.apply_update(acc, cfg.lr, cfg.weight_decay)
    return loss


def _unlabeled_terms(model, q, d, pool, cfg, noise=None, rng=None):
    qi = pool.query_input(q)
    return [], [kl_term(model, qi, pool.doc_input(d), cfg.perturb, noise, rng)]


# -- epoch plans -------------------------------------------------------------


@dataclass
class EpochPlan:
    """Everything random about one epoch, drawn up front.

    ``steps`` rows are (query, doc, labeled flag).  ``uniforms`` has one row
    per labeled step for the sampler; ``noise`` has shape
    (n_steps, n_kl, dim_q + dim_d) of standard normals (empty when unused).
    """

    steps: np.ndarray
    uniforms: np.ndarray
    noise: np.ndarray


def plan_epoch(dataset, model, cfg, streams, train_queries):
    qs, ds = dataset.positives()
    keep = np.isin(qs, train_queries)
    qs, ds = qs[keep], ds[keep]
    steps = np.stack([qs, ds, np.ones_like(qs)], axis=1)
    if cfg.objective == "full_vat":
        counts = np.diff(dataset.unlabeled_indptr)[train_queries]
        uq = np.repeat(train_queries, counts)
        ud = np.concatenate([dataset.unlabeled(q) for q in train_queries]) if uq.size else uq
        steps = np.concatenate([steps, np.stack([uq, ud, np.zeros_like(uq)], axis=1)])
    steps = steps[streams["shuffle"].permutation(len(steps))]
    n_lab = int(steps[:, 2].sum()) if len(steps) else 0
    uniforms = streams["sample"].random((n_lab, cfg.sampler.row_width))
    n_kl = KL_TERMS.get(cfg.objective, 0)
    dq, dd = model.input_dims()
    width = (dq or 0) + dd
    if n_kl:
        noise = streams["vat"].normal((len(steps), n_kl, width))
    else:
        noise = np.zeros((len(steps), 0, width))
    return EpochPlan(np.ascontiguousarray(steps, dtype=np.int64), uniforms, noise)


def _split_noise(row, model):
    dq, _ = model.input_dims()
    if dq is None:
        return None, row
    return row[:dq], row[dq:]


def python_epoch(model, pool, plan, cfg):
    """Reference (pure Python) epoch; returns (losses per step, #negatives).

    Steps are grouped into batches of ``cfg.batch_size``: every term in a
    batch sees the parameters as they were at the start of the batch, and
    one averaged update is applied at its end.
    """
    sampler = Sampler(pool, cfg.sampler, rng=None)
    losses = np.empty(len(plan.steps))
    lab = 0
    acc_c = acc_r = None
    in_batch = 0
    for k, (q, d, labeled) in enumerate(plan.steps):
        if acc_c is None:
            acc_c, acc_r = model.new_accumulator(), model.new_accumulator()
        noise = [_split_noise(r, model) for r in plan.noise[k]] or None
        if labeled:
            clean, reg = _labeled_terms(model, cfg.objective, int(q), int(d), sampler, cfg,
                                        u=plan.uniforms[lab], noise=noise)
            lab += 1
        else:
            clean, reg = _unlabeled_terms(model, int(q), int(d), pool, cfg, noise=noise[0])
        loss_c = evaluate_terms(model, clean, acc_c)
        loss_r = evaluate_terms(model, reg, acc_r)
        losses[k] = loss_c + cfg.alpha * loss_r
        in_batch += 1
        if in_batch == cfg.batch_size or k == len(plan.steps) - 1:
            grad = combine(model, acc_c, acc_r, cfg.alpha)
            model.apply_update(grad, cfg.lr / in_batch, cfg.weight_decay)
            pool.tick()
            acc_c = acc_r = None
            in_batch = 0
    return losses, sampler.count


def make_streams(seed):
    root = Rng(seed)
    return {name: root.child(name) for name in ("shuffle", "sample", "vat")}


def train(model, dataset, cfg, evaluate=None, backend=None, log=None):
    """Train ``model`` in place for ``cfg.epochs`` epochs.

    ``evaluate(model) -> dict`` is called every ``cfg.eval_every`` epochs (and
    after the last one when eval_every > 0).  ``log`` receives each EpochLog.
    """
    train_queries = dataset.train_queries()
    if train_queries.size == 0:
        raise ValueError("dataset has no labeled examples to train on")
    streams = make_streams(cfg.seed)
    pool = NegativePool.from_dataset(dataset)
    pool.docs = pool.docs.copy()
    run = kernels.epoch_runner(model, dataset, cfg, backend)
    logs = []
    for epoch in range(1, cfg.epochs + 1):
        t0 = time.perf_counter()
        plan = plan_epoch(dataset, model, cfg, streams, train_queries)
        losses, n_neg = run(model, pool, plan, cfg)
        bad = np.flatnonzero(~np.isfinite(losses))
        if bad.size:
            q, d, _ = plan.steps[bad[0]]
            raise TrainingAborted(
                f"non-finite loss at epoch {epoch}, step {bad[0]}: "
                f"query {dataset.query_keys[q]!r}, document {int(d)}"
            )
        metrics = None
        if evaluate is not None and cfg.eval_every and (
            epoch % cfg.eval_every == 0 or epoch == cfg.epochs
        ):
            metrics = evaluate(model)
        entry = EpochLog(
            epoch, float(losses.mean()) if losses.size else 0.0,
            time.perf_counter() - t0, metrics,
            n_positives=int(plan.steps[:, 2].sum()), n_negatives=int(n_neg),
        )
        logs.append(entry)
        if log is not None:
            log(entry)
    return model, logs
