"""Norm-bounded adversarial and virtual adversarial input perturbations.

All perturbations are computed against the parameters as they are when the
function is called and never modify them; callers treat the returned
vectors as constants when differentiating the training objective.
"""

from dataclasses import dataclass
from typing import NamedTuple, Optional

import numpy as np

from .losses import kl_from_scores, pairwise_loss, pointwise_ce
from .numerics import l2_normalize, sign_scale

NORMS = ("l2", "max")


@dataclass(frozen=True)
class PerturbConfig:
    epsilon: float = 1.0
    norm: str = "l2"
    # VAT probe: ||e|| = xi * epsilon
    xi: float = 0.01
    power_iters: int = 1

    def __post_init__(self):
        # epsilon == 0 is accepted and means "no perturbation"
        if not self.epsilon >= 0:
            raise ValueError(f"epsilon must be >= 0, got {self.epsilon}")
        if self.norm not in NORMS:
            raise ValueError(f"norm must be one of {NORMS}, got {self.norm!r}")
        if not self.xi > 0:
            raise ValueError("xi must be positive")
        if self.power_iters < 1:
            raise ValueError("power_iters must be >= 1")


class Perturbation(NamedTuple):
    eta_q: Optional[np.ndarray]
    eta_d: Optional[np.ndarray]


def project(g, cfg):
    """Steepest-ascent step of size epsilon for gradient ``g`` under cfg.norm."""
    if g is None:
        return None
    if cfg.epsilon == 0:
        return np.zeros_like(g)
    if cfg.norm == "max":
        return sign_scale(g, cfg.epsilon)
    return l2_normalize(g, cfg.epsilon)


def _scale(pair, factor):
    return tuple(None if g is None else factor * g for g in pair)


def adversarial_perturbation(model, example, cfg):
    """Fast-gradient perturbation of a labeled pointwise example ``(q, d, y)``."""
    q, d, y = example
    loss = pointwise_ce(model.score(q, d), y)
    gq, gd = _scale(model.input_grads(q, d), loss.deriv)
    return Perturbation(project(gq, cfg), project(gd, cfg))


def pairwise_adversarial_perturbation(model, example, cfg):
    """Perturbations (eta_q, eta_d_plus, eta_d_minus) ascending the pairwise loss."""
    q, dp, dm = example
    loss = pairwise_loss(model.score(q, dp), model.score(q, dm))
    gq_p, gd_p = model.input_grads(q, dp)
    gq_m, gd_m = model.input_grads(q, dm)
    gq = None if gq_p is None else loss.deriv * (gq_p - gq_m)
    return project(gq, cfg), project(loss.deriv * gd_p, cfg), project(-loss.deriv * gd_m, cfg)


def _kl_probe_grads(model, q, d, ref_score, e_q, e_d):
    """Gradients of KL[p(.|x) || p(.|x+e)] w.r.t. the offsets on both sides."""
    kl = kl_from_scores(ref_score, model.score(q, d, eta_q=e_q, eta_d=e_d))
    g_q, g_d = model.input_grads(q, d, eta_q=e_q, eta_d=e_d)
    return (None if g_q is None else kl.deriv * g_q), kl.deriv * g_d


def vat_perturbation(model, example, cfg, rng=None, noise=None):
    """Label-free perturbation from one (or more) power-method steps on the KL.

    ``example`` is ``(q, d)``.  Random probe directions come from ``noise``
    (a ``(noise_q, noise_d)`` pair of standard-normal draws) or are drawn from
    ``rng``.  Both perturbable inputs are probed together, each offset scaled
    to norm xi * epsilon, and each returned vector is normalized to epsilon
    on its own.
    """
    q, d = example[0], example[1]
    dim_q, dim_d = model.input_dims()
    if noise is None:
        noise = (
            None if dim_q is None else rng.normal(dim_q),
            rng.normal(dim_d),
        )
    if cfg.epsilon == 0:
        return Perturbation(
            None if dim_q is None else np.zeros(dim_q), np.zeros(dim_d)
        )
    ref = model.score(q, d)
    radius = cfg.xi * cfg.epsilon
    e_q = None if noise[0] is None else l2_normalize(noise[0], radius)
    e_d = l2_normalize(noise[1], radius)
    for _ in range(cfg.power_iters):
        g_q, g_d = _kl_probe_grads(model, q, d, ref, e_q, e_d)
        e_q = None if g_q is None else l2_normalize(g_q, radius)
        e_d = l2_normalize(g_d, radius)
    return Perturbation(
        None if g_q is None else l2_normalize(g_q, cfg.epsilon),
        l2_normalize(g_d, cfg.epsilon),
    )


def apply_continuous(x, eta):
    x = np.asarray(x, dtype=np.float64)
    eta = np.asarray(eta, dtype=np.float64)
    if x.shape != eta.shape:
        raise ValueError(f"shape mismatch: {x.shape} vs {eta.shape}")
    return x + eta


def apply_discrete(x_onehot, eta, Z):
    """Perturbed embedding (x + eta) @ Z of a one-hot (or mixed) input."""
    x_onehot = np.asarray(x_onehot, dtype=np.float64)
    eta = np.asarray(eta, dtype=np.float64)
    Z = np.asarray(Z, dtype=np.float64)
    if x_onehot.shape != eta.shape or x_onehot.shape != (Z.shape[0],):
        raise ValueError(
            f"dimension mismatch: one-hot {x_onehot.shape}, eta {eta.shape}, Z {Z.shape}"
        )
    return (x_onehot + eta) @ Z
