"""Small numerical helpers shared by the models, losses and samplers.

Vectors and matrices are plain float64 numpy arrays.
"""

import math

import numpy as np

ZERO_NORM = 1e-12
# smallest positive double; keeps sigmoid strictly positive on deep negative input
TINY = 5e-324


def sigmoid(x):
    """Logistic function that never overflows.

    Works on scalars (returns float) and on arrays (elementwise).
    """
    if np.ndim(x) == 0:
        x = float(x)
        if x >= 0:
            return 1.0 / (1.0 + math.exp(-x))
        z = math.exp(x)
        return max(z / (1.0 + z), TINY)
    x = np.asarray(x, dtype=np.float64)
    out = np.empty_like(x)
    pos = x >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    z = np.exp(x[~pos])
    out[~pos] = np.maximum(z / (1.0 + z), TINY)
    return out


def softplus(x):
    """log(1 + exp(x)) without overflow or loss of precision for x << 0."""
    x = float(x)
    if x > 0:
        return x + math.log1p(math.exp(-x))
    return math.log1p(math.exp(x))


def l2_normalize(g, epsilon):
    """Scale ``g`` to L2 norm ``epsilon``; a (near) zero vector maps to zeros."""
    if epsilon <= 0:
        raise ValueError(f"epsilon must be positive, got {epsilon}")
    g = np.asarray(g, dtype=np.float64)
    norm = float(np.sqrt(np.dot(g, g)))
    if norm <= ZERO_NORM:
        return np.zeros_like(g)
    return (epsilon / norm) * g


def sign_scale(g, epsilon):
    """Max-norm steepest ascent direction: ``epsilon * sign(g)`` with sign(0) = 0."""
    if epsilon <= 0:
        raise ValueError(f"epsilon must be positive, got {epsilon}")
    return epsilon * np.sign(np.asarray(g, dtype=np.float64))


def softmax_with_temperature(scores, tau):
    scores = np.asarray(scores, dtype=np.float64)
    if tau <= 0:
        raise ValueError(f"temperature must be positive, got {tau}")
    if scores.size == 0:
        raise ValueError("softmax of an empty score vector")
    z = scores / tau
    z = np.exp(z - z.max())
    return z / z.sum()


def finite_diff_grad(f, x, h=1e-5):
    """Central-difference gradient of a scalar function ``f`` at ``x``.

    Used as an independent oracle for the analytic gradients.
    """
    if h <= 0:
        raise ValueError("step h must be positive")
    x = np.array(x, dtype=np.float64)
    grad = np.empty_like(x)
    flat = x.reshape(-1)
    gflat = grad.reshape(-1)
    for i in range(flat.size):
        orig = flat[i]
        flat[i] = orig + h
        fp = f(x)
        flat[i] = orig - h
        fm = f(x)
        flat[i] = orig
        if not (math.isfinite(fp) and math.isfinite(fm)):
            raise FloatingPointError(f"non-finite function value probing coordinate {i}")
        gflat[i] = (fp - fm) / (2.0 * h)
    return grad


def relative_error(a, b, floor=1e-8):
    """Elementwise |a - b| / max(|a|, |b|), with an absolute fallback near zero."""
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    diff = np.abs(a - b)
    scale = np.maximum(np.abs(a), np.abs(b))
    return np.where(scale < floor, diff, diff / np.maximum(scale, floor))


class Rng:
    """Seeded random stream (PCG64) with named, independent child streams.

    Child streams let separate concerns (shuffling, negative sampling, VAT
    noise) draw without perturbing each other's sequences.
    """

    def __init__(self, seed):
        self.seed = int(seed)
        self._seq = np.random.SeedSequence(self.seed)
        self.gen = np.random.Generator(np.random.PCG64(self._seq))

    def child(self, name):
        key = [self.seed] + [ord(c) for c in name]
        return Rng._from_entropy(key, self.seed)

    @classmethod
    def _from_entropy(cls, entropy, seed):
        obj = cls.__new__(cls)
        obj.seed = seed
        obj._seq = np.random.SeedSequence(entropy)
        obj.gen = np.random.Generator(np.random.PCG64(obj._seq))
        return obj

    def random(self, size=None):
        return self.gen.random(size)

    def integers(self, high, size=None):
        return self.gen.integers(0, high, size=size)

    def normal(self, size=None):
        return self.gen.standard_normal(size)

    def permutation(self, n):
        return self.gen.permutation(n)

    def uniform(self, low, high, size=None):
        return self.gen.uniform(low, high, size)
