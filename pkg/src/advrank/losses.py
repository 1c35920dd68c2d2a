"""Pointwise cross entropy, pairwise preference loss and Bernoulli KL.

Each loss returns its value together with the derivative with respect to the
score (or score difference) so that callers can chain it into model
gradients.
"""

import math
from typing import NamedTuple

from .numerics import sigmoid, softplus

PROB_CLAMP = 1e-12


class LossValue(NamedTuple):
    value: float
    deriv: float


def pointwise_ce(score, y):
    """-log p(y | score) with p(1) = sigmoid(score)."""
    if y == 1:
        return LossValue(softplus(-score), sigmoid(score) - 1.0)
    if y == 0:
        return LossValue(softplus(score), sigmoid(score))
    raise ValueError(f"label must be 0 or 1, got {y!r}")


def pairwise_loss(score_plus, score_minus):
    """-log sigmoid(score_plus - score_minus); deriv is w.r.t. the difference."""
    diff = score_plus - score_minus
    return LossValue(softplus(-diff), sigmoid(diff) - 1.0)


def clamp_prob(p):
    return min(max(p, PROB_CLAMP), 1.0 - PROB_CLAMP)


def _log1p_minus_x(x):
    # log(1 + x) - x; series below |x| < 1e-3 where the subtraction cancels
    if abs(x) < 1e-3:
        x2 = x * x
        return x2 * (-0.5 + x * (1.0 / 3.0 + x * (-0.25 + x * 0.2)))
    return math.log1p(x) - x


def bernoulli_kl(p, p_prime):
    p = clamp_prob(p)
    q = clamp_prob(p_prime)
    d = p - q
    if abs(d) < PROB_CLAMP:
        return 0.0
    a = d / q
    b = -d / (1.0 - q)
    if abs(a) < 0.1 and abs(b) < 0.1:
        # split off the exact quadratic term so near-equal inputs keep precision
        kl = p * _log1p_minus_x(a) + (1.0 - p) * _log1p_minus_x(b) + d * d / (q * (1.0 - q))
    else:
        kl = p * math.log1p(a) + (1.0 - p) * math.log1p(b)
    return max(kl, 0.0)


def kl_from_scores(score_ref, score_pert):
    """KL between the sigmoid-Bernoulli at ``score_ref`` and at ``score_pert``.

    ``deriv`` is d KL / d score_pert, the only path gradients flow through
    (the reference distribution is a frozen snapshot).
    """
    p = clamp_prob(sigmoid(score_ref))
    q = clamp_prob(sigmoid(score_pert))
    return LossValue(bernoulli_kl(p, q), q - p)
