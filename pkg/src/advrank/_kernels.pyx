# cython: language_level=3, boundscheck=False, wraparound=False, cdivision=True, initializedcheck=False
"""Compiled training epochs for the matrix factorization and MLP scorers.

Mirrors ``trainer.python_epoch`` step for step: same randomness protocol
(pre-drawn ``EpochPlan``), same term order and the same clean / regularizer
accumulator split.  Results agree with the Python path to rounding.
"""

import numpy as np
cimport numpy as cnp
from libc.math cimport exp, floor, log1p, sqrt

ctypedef cnp.int64_t i64

cdef double PROB_CLAMP = 1e-12
cdef double ZERO_NORM = 1e-12
cdef double TINY = 5e-324

OBJECTIVE_CODES = {
    "plain_pointwise": 0,
    "plain_pairwise": 1,
    "pointwise_at": 2,
    "pairwise_at": 3,
    "full_vat": 4,
    "pointwise_svat": 5,
    "pairwise_svat": 6,
}


cdef inline double sigmoid(double x) noexcept nogil:
    cdef double z
    if x >= 0:
        return 1.0 / (1.0 + exp(-x))
    z = exp(x)
    z = z / (1.0 + z)
    return z if z > TINY else TINY


cdef inline double softplus(double x) noexcept nogil:
    if x > 0:
        return x + log1p(exp(-x))
    return log1p(exp(x))


cdef inline double clamp_prob(double p) noexcept nogil:
    if p < PROB_CLAMP:
        return PROB_CLAMP
    if p > 1.0 - PROB_CLAMP:
        return 1.0 - PROB_CLAMP
    return p


cdef inline double log1p_minus_x(double x) noexcept nogil:
    cdef double x2
    if -1e-3 < x < 1e-3:
        x2 = x * x
        return x2 * (-0.5 + x * (1.0 / 3.0 + x * (-0.25 + x * 0.2)))
    return log1p(x) - x


cdef double bernoulli_kl(double p, double q) noexcept nogil:
    cdef double d, a, b, kl
    p = clamp_prob(p)
    q = clamp_prob(q)
    d = p - q
    if -PROB_CLAMP < d < PROB_CLAMP:
        return 0.0
    a = d / q
    b = -d / (1.0 - q)
    if -0.1 < a < 0.1 and -0.1 < b < 0.1:
        kl = p * log1p_minus_x(a) + (1.0 - p) * log1p_minus_x(b) + d * d / (q * (1.0 - q))
    else:
        kl = p * log1p(a) + (1.0 - p) * log1p(b)
    return kl if kl > 0.0 else 0.0


cdef void l2_normalize(double* g, double eps, int n, double* out) noexcept nogil:
    cdef double s = 0.0, f
    cdef int i
    for i in range(n):
        s += g[i] * g[i]
    s = sqrt(s)
    if s <= ZERO_NORM:
        for i in range(n):
            out[i] = 0.0
        return
    f = eps / s
    for i in range(n):
        out[i] = f * g[i]


cdef void project(double* g, double eps, bint max_norm, int n, double* out) noexcept nogil:
    cdef int i
    if eps == 0.0:
        for i in range(n):
            out[i] = 0.0
    elif max_norm:
        for i in range(n):
            out[i] = eps if g[i] > 0 else (-eps if g[i] < 0 else 0.0)
    else:
        l2_normalize(g, eps, n, out)


cdef class Scorer:
    """Model interface for the kernel; ``slot`` 0 is the clean, 1 the
    regularizer accumulator."""

    cdef public int dq, dd

    cdef double score(self, i64 q, i64 d, double* eq, double* ed) noexcept:
        return 0.0

    cdef void grads(self, i64 q, i64 d, double* eq, double* ed, double* gq, double* gd) noexcept:
        pass

    cdef void accum(self, i64 q, i64 d, double up, double* eq, double* ed, int slot) noexcept:
        pass

    cdef void reset(self) noexcept:
        pass

    cdef void apply(self, double lr, double wd, double alpha) noexcept:
        pass


cdef class MFScorer(Scorer):
    cdef double[:, ::1] U, V
    cdef double[::1] b
    cdef int k
    # touched-row table: at most one user and two items per example
    cdef i64[::1] rows
    cdef int[::1] kinds
    cdef int n_rows
    cdef double[:, :, ::1] gvec
    cdef double[:, ::1] gb
    cdef double[::1] vu, vi

    def __init__(self, U, V, b, int batch_size=1):
        cap = 3 * batch_size + 1
        self.U = U
        self.V = V
        self.b = b
        self.k = U.shape[1]
        self.dq = self.k
        self.dd = self.k
        self.rows = np.zeros(cap, dtype=np.int64)
        self.kinds = np.zeros(cap, dtype=np.intc)
        self.gvec = np.zeros((2, cap, self.k))
        self.gb = np.zeros((2, cap))
        self.vu = np.zeros(self.k)
        self.vi = np.zeros(self.k)
        self.n_rows = 0

    cdef inline void load(self, i64 q, i64 d, double* eq, double* ed) noexcept:
        cdef int j
        for j in range(self.k):
            self.vu[j] = self.U[q, j] + (eq[j] if eq != NULL else 0.0)
            self.vi[j] = self.V[d, j] + (ed[j] if ed != NULL else 0.0)

    cdef double score(self, i64 q, i64 d, double* eq, double* ed) noexcept:
        cdef double s = 0.0
        cdef int j
        self.load(q, d, eq, ed)
        for j in range(self.k):
            s += self.vu[j] * self.vi[j]
        return s + self.b[d]

    cdef void grads(self, i64 q, i64 d, double* eq, double* ed, double* gq, double* gd) noexcept:
        cdef int j
        self.load(q, d, eq, ed)
        for j in range(self.k):
            gq[j] = self.vi[j]
            gd[j] = self.vu[j]

    cdef int slot_of(self, int kind, i64 row) noexcept:
        cdef int s, j
        for s in range(self.n_rows):
            if self.kinds[s] == kind and self.rows[s] == row:
                return s
        s = self.n_rows
        self.n_rows += 1
        self.kinds[s] = kind
        self.rows[s] = row
        for j in range(self.k):
            self.gvec[0, s, j] = 0.0
            self.gvec[1, s, j] = 0.0
        self.gb[0, s] = 0.0
        self.gb[1, s] = 0.0
        return s

    cdef void accum(self, i64 q, i64 d, double up, double* eq, double* ed, int slot) noexcept:
        cdef int su, si, j
        if up == 0.0:
            return
        self.load(q, d, eq, ed)
        su = self.slot_of(0, q)
        si = self.slot_of(1, d)
        for j in range(self.k):
            self.gvec[slot, su, j] += up * self.vi[j]
            self.gvec[slot, si, j] += up * self.vu[j]
        self.gb[slot, si] += up

    cdef void reset(self) noexcept:
        self.n_rows = 0

    cdef void apply(self, double lr, double wd, double alpha) noexcept:
        cdef int s, j
        cdef i64 r
        cdef double g
        for s in range(self.n_rows):
            r = self.rows[s]
            if self.kinds[s] == 0:
                for j in range(self.k):
                    g = self.gvec[0, s, j] + alpha * self.gvec[1, s, j]
                    if wd != 0.0:
                        g = g + wd * self.U[r, j]
                    self.U[r, j] -= lr * g
            else:
                for j in range(self.k):
                    g = self.gvec[0, s, j] + alpha * self.gvec[1, s, j]
                    if wd != 0.0:
                        g = g + wd * self.V[r, j]
                    self.V[r, j] -= lr * g
                g = self.gb[0, s] + alpha * self.gb[1, s]
                if wd != 0.0:
                    g = g + wd * self.b[r]
                self.b[r] -= lr * g
        self.n_rows = 0


cdef class MLPScorer(Scorer):
    cdef double[:, ::1] W1, X
    cdef double[::1] b1, w2, b2
    cdef int l, k
    cdef double[:, :, ::1] gW1
    cdef double[:, ::1] gb1, gw2
    cdef double[::1] gb2
    cdef double[::1] x, h

    def __init__(self, W1, b1, w2, b2, X):
        self.W1 = W1
        self.b1 = b1
        self.w2 = w2
        self.b2 = b2
        self.X = X
        self.l = W1.shape[0]
        self.k = W1.shape[1]
        self.dq = 0
        self.dd = self.k
        self.gW1 = np.zeros((2, self.l, self.k))
        self.gb1 = np.zeros((2, self.l))
        self.gw2 = np.zeros((2, self.l))
        self.gb2 = np.zeros(2)
        self.x = np.zeros(self.k)
        self.h = np.zeros(self.l)

    cdef inline void forward(self, i64 d, double* ed) noexcept:
        cdef int i, j
        cdef double s
        for j in range(self.k):
            self.x[j] = self.X[d, j] + (ed[j] if ed != NULL else 0.0)
        for i in range(self.l):
            s = 0.0
            for j in range(self.k):
                s += self.W1[i, j] * self.x[j]
            self.h[i] = s + self.b1[i]

    cdef double score(self, i64 q, i64 d, double* eq, double* ed) noexcept:
        cdef int i
        cdef double s = 0.0
        self.forward(d, ed)
        for i in range(self.l):
            if self.h[i] > 0:
                s += self.w2[i] * self.h[i]
        return s + self.b2[0]

    cdef void grads(self, i64 q, i64 d, double* eq, double* ed, double* gq, double* gd) noexcept:
        cdef int i, j
        self.forward(d, ed)
        for j in range(self.k):
            gd[j] = 0.0
        for i in range(self.l):
            if self.h[i] > 0:
                for j in range(self.k):
                    gd[j] += self.W1[i, j] * self.w2[i]

    cdef void accum(self, i64 q, i64 d, double up, double* eq, double* ed, int slot) noexcept:
        cdef int i, j
        cdef double back
        if up == 0.0:
            return
        self.forward(d, ed)
        for i in range(self.l):
            if self.h[i] > 0:
                back = up * self.w2[i]
                for j in range(self.k):
                    self.gW1[slot, i, j] += back * self.x[j]
                self.gb1[slot, i] += back
                self.gw2[slot, i] += up * self.h[i]
        self.gb2[slot] += up

    cdef void reset(self) noexcept:
        self.gW1[:, :, :] = 0.0
        self.gb1[:, :] = 0.0
        self.gw2[:, :] = 0.0
        self.gb2[:] = 0.0

    cdef void apply(self, double lr, double wd, double alpha) noexcept:
        cdef int i, j
        cdef double g
        for i in range(self.l):
            for j in range(self.k):
                g = self.gW1[0, i, j] + alpha * self.gW1[1, i, j]
                if wd != 0.0:
                    g = g + wd * self.W1[i, j]
                self.W1[i, j] -= lr * g
            g = self.gb1[0, i] + alpha * self.gb1[1, i]
            if wd != 0.0:
                g = g + wd * self.b1[i]
            self.b1[i] -= lr * g
        for i in range(self.l):
            g = self.gw2[0, i] + alpha * self.gw2[1, i]
            if wd != 0.0:
                g = g + wd * self.w2[i]
            self.w2[i] -= lr * g
        g = self.gb2[0] + alpha * self.gb2[1]
        if wd != 0.0:
            g = g + wd * self.b2[0]
        self.b2[0] -= lr * g
        self.reset()


cdef class Epoch:
    cdef Scorer m
    cdef int dq, dd
    cdef double eps, xi, tau
    cdef bint max_norm
    cdef int power_iters
    cdef double[::1] eq, ep, em, gq, gd, gq2, gd2, e, e2, cand_scores, cdf
    cdef i64[::1] indptr, docs, last_refresh
    cdef double[::1] cache
    cdef i64 pool_size, refresh_every, batch
    cdef int sampler_kind

    def __init__(self, Scorer m, indptr, docs, cache, last_refresh, i64 batch,
                 int sampler_kind, double tau, i64 pool_size, i64 refresh_every,
                 double eps, bint max_norm, double xi, int power_iters):
        self.m = m
        self.dq = m.dq
        self.dd = m.dd
        width = max(self.dq, self.dd, 1)
        self.eq = np.zeros(width)
        self.ep = np.zeros(width)
        self.em = np.zeros(width)
        self.gq = np.zeros(width)
        self.gd = np.zeros(width)
        self.gq2 = np.zeros(width)
        self.gd2 = np.zeros(width)
        self.e = np.zeros(width)
        self.e2 = np.zeros(width)
        self.indptr = indptr
        self.docs = docs
        self.cache = cache
        self.last_refresh = last_refresh
        self.batch = batch
        self.sampler_kind = sampler_kind
        self.tau = tau
        self.pool_size = pool_size
        self.refresh_every = refresh_every
        self.eps = eps
        self.max_norm = max_norm
        self.xi = xi
        self.power_iters = power_iters
        cap = max(int(np.max(np.diff(indptr))) if len(indptr) > 1 else 1, 1)
        self.cand_scores = np.zeros(cap)
        self.cdf = np.zeros(cap)

    # -- sampling --------------------------------------------------------

    cdef i64 sample(self, i64 q, double[:] u) except -1:
        cdef i64 start = self.indptr[q], n = self.indptr[q + 1] - self.indptr[q]
        cdef i64 m, j, r, a, bb, tmp, idx
        cdef double ts, mx, z, total, target
        if n == 0:
            raise ValueError(f"no negative candidates for query {q}")
        if self.sampler_kind == 0:
            idx = <i64>floor(u[0] * n)
            if idx > n - 1:
                idx = n - 1
            return self.docs[start + idx]
        m = n if self.pool_size < 0 else min(self.pool_size, n)
        if m < n:
            for j in range(m):
                r = <i64>floor(u[j] * (n - j))
                if r > n - j - 1:
                    r = n - j - 1
                r += j
                a = start + j
                bb = start + r
                tmp = self.docs[a]
                self.docs[a] = self.docs[bb]
                self.docs[bb] = tmp
                ts = self.cache[a]
                self.cache[a] = self.cache[bb]
                self.cache[bb] = ts
        if self.refresh_every == 1:
            for j in range(m):
                self.cand_scores[j] = self.m.score(q, self.docs[start + j], NULL, NULL)
        else:
            if self.last_refresh[q] < 0 or self.batch - self.last_refresh[q] >= self.refresh_every:
                for j in range(n):
                    self.cache[start + j] = self.m.score(q, self.docs[start + j], NULL, NULL)
                self.last_refresh[q] = self.batch
            for j in range(m):
                self.cand_scores[j] = self.cache[start + j]
        mx = self.cand_scores[0] / self.tau
        for j in range(1, m):
            z = self.cand_scores[j] / self.tau
            if z > mx:
                mx = z
        total = 0.0
        for j in range(m):
            self.cdf[j] = exp(self.cand_scores[j] / self.tau - mx)
            total += self.cdf[j]
        z = 0.0
        for j in range(m):
            z += self.cdf[j] / total
            self.cdf[j] = z
        target = u[u.shape[0] - 1] * self.cdf[m - 1]
        idx = 0
        while idx < m and self.cdf[idx] <= target:
            idx += 1
        if idx > m - 1:
            idx = m - 1
        return self.docs[start + idx]

    # -- terms -------------------------------------------------------------

    cdef double ce(self, i64 q, i64 d, int y, double* eq, double* ed, int slot) noexcept:
        cdef double s = self.m.score(q, d, eq, ed)
        cdef double value, deriv
        if y == 1:
            value = softplus(-s)
            deriv = sigmoid(s) - 1.0
        else:
            value = softplus(s)
            deriv = sigmoid(s)
        self.m.accum(q, d, deriv, eq, ed, slot)
        return value

    cdef double ce_adv(self, i64 q, i64 d, int y) noexcept:
        cdef double s = self.m.score(q, d, NULL, NULL)
        cdef double deriv = sigmoid(s) - 1.0 if y == 1 else sigmoid(s)
        cdef int j
        cdef double* eq = NULL
        self.m.grads(q, d, NULL, NULL, &self.gq[0], &self.gd[0])
        for j in range(self.dq):
            self.gq[j] = deriv * self.gq[j]
        for j in range(self.dd):
            self.gd[j] = deriv * self.gd[j]
        if self.dq:
            project(&self.gq[0], self.eps, self.max_norm, self.dq, &self.eq[0])
            eq = &self.eq[0]
        project(&self.gd[0], self.eps, self.max_norm, self.dd, &self.ep[0])
        return self.ce(q, d, y, eq, &self.ep[0], 1)

    cdef double pair(self, i64 q, i64 dp, i64 dm, double* eq, double* ep, double* em, int slot) noexcept:
        cdef double sp = self.m.score(q, dp, eq, ep)
        cdef double sm = self.m.score(q, dm, eq, em)
        cdef double diff = sp - sm
        cdef double deriv = sigmoid(diff) - 1.0
        self.m.accum(q, dp, deriv, eq, ep, slot)
        self.m.accum(q, dm, -deriv, eq, em, slot)
        return softplus(-diff)

    cdef double pair_adv(self, i64 q, i64 dp, i64 dm) noexcept:
        cdef double diff = self.m.score(q, dp, NULL, NULL) - self.m.score(q, dm, NULL, NULL)
        cdef double deriv = sigmoid(diff) - 1.0
        cdef int j
        cdef double* eq = NULL
        self.m.grads(q, dp, NULL, NULL, &self.gq[0], &self.gd[0])
        self.m.grads(q, dm, NULL, NULL, &self.gq2[0], &self.gd2[0])
        if self.dq:
            for j in range(self.dq):
                self.gq[j] = deriv * (self.gq[j] - self.gq2[j])
            project(&self.gq[0], self.eps, self.max_norm, self.dq, &self.eq[0])
            eq = &self.eq[0]
        for j in range(self.dd):
            self.gd[j] = deriv * self.gd[j]
            self.gd2[j] = -deriv * self.gd2[j]
        project(&self.gd[0], self.eps, self.max_norm, self.dd, &self.ep[0])
        project(&self.gd2[0], self.eps, self.max_norm, self.dd, &self.em[0])
        return self.pair(q, dp, dm, eq, &self.ep[0], &self.em[0], 1)

    cdef void vat(self, i64 q, i64 d, double ref_p, double* noise) noexcept:
        """Joint power step: both offsets probe together, each is normalized
        on its own."""
        cdef double radius = self.xi * self.eps
        cdef double s, deriv
        cdef int it, j
        cdef double* eqp = NULL
        if self.dq:
            l2_normalize(noise, radius, self.dq, &self.e[0])
            eqp = &self.e[0]
        l2_normalize(&noise[self.dq], radius, self.dd, &self.e2[0])
        for it in range(self.power_iters):
            s = self.m.score(q, d, eqp, &self.e2[0])
            deriv = clamp_prob(sigmoid(s)) - ref_p
            self.m.grads(q, d, eqp, &self.e2[0], &self.gq2[0], &self.gd2[0])
            for j in range(self.dq):
                self.gq2[j] = deriv * self.gq2[j]
            for j in range(self.dd):
                self.gd2[j] = deriv * self.gd2[j]
            if self.dq:
                l2_normalize(&self.gq2[0], radius, self.dq, &self.e[0])
            l2_normalize(&self.gd2[0], radius, self.dd, &self.e2[0])
        if self.dq:
            l2_normalize(&self.gq2[0], self.eps, self.dq, &self.eq[0])
        l2_normalize(&self.gd2[0], self.eps, self.dd, &self.ep[0])

    cdef double kl(self, i64 q, i64 d, double[:] noise) noexcept:
        cdef double ref = self.m.score(q, d, NULL, NULL)
        cdef double ref_p = clamp_prob(sigmoid(ref))
        cdef double* eq = NULL
        cdef double s, qp
        cdef int j
        if self.eps == 0.0:
            for j in range(self.dq):
                self.eq[j] = 0.0
            for j in range(self.dd):
                self.ep[j] = 0.0
        else:
            self.vat(q, d, ref_p, &noise[0])
        if self.dq:
            eq = &self.eq[0]
        s = self.m.score(q, d, eq, &self.ep[0])
        qp = clamp_prob(sigmoid(s))
        self.m.accum(q, d, qp - ref_p, eq, &self.ep[0], 1)
        return bernoulli_kl(ref_p, qp)


def run_epoch(Scorer model, pool, plan, cfg):
    """Run one epoch in place; returns (per-step losses, #negatives drawn)."""
    cdef int obj = OBJECTIVE_CODES[cfg.objective]
    sc = cfg.sampler
    pc = cfg.perturb
    cdef Epoch ep = Epoch(
        model, pool.indptr, pool.docs, pool.scores, pool.last_refresh, pool.batch,
        0 if sc.kind == "uniform" else 1, sc.tau,
        -1 if sc.pool_size is None else sc.pool_size, sc.refresh_every,
        pc.epsilon, pc.norm == "max", pc.xi, pc.power_iters,
    )
    cdef i64[:, ::1] steps = plan.steps
    cdef double[:, ::1] uniforms = plan.uniforms
    cdef double[:, :, ::1] noise = plan.noise
    cdef double lr = cfg.lr, wd = cfg.weight_decay, alpha = cfg.alpha
    cdef Py_ssize_t n_steps = steps.shape[0], k
    cdef i64 q, dp, dm, lab = 0, n_neg = 0, bs = cfg.batch_size, in_batch = 0
    cdef double lc, lr_
    losses = np.empty(n_steps)
    cdef double[::1] out = losses
    model.reset()
    for k in range(n_steps):
        q = steps[k, 0]
        dp = steps[k, 1]
        if steps[k, 2] == 0:
            lr_ = ep.kl(q, dp, noise[k, 0])
            out[k] = 0.0 + alpha * lr_
        else:
            dm = ep.sample(q, uniforms[lab])
            lab += 1
            n_neg += 1
            lc = 0.0
            lr_ = 0.0
            if obj == 0 or obj == 2 or obj == 5:
                lc += ep.ce(q, dp, 1, NULL, NULL, 0)
                lc += ep.ce(q, dm, 0, NULL, NULL, 0)
                if obj == 2:
                    lr_ += ep.ce_adv(q, dp, 1)
                    lr_ += ep.ce_adv(q, dm, 0)
                elif obj == 5:
                    lr_ += ep.kl(q, dp, noise[k, 0])
                    lr_ += ep.kl(q, dm, noise[k, 1])
            else:
                lc += ep.pair(q, dp, dm, NULL, NULL, NULL, 0)
                if obj == 3:
                    lr_ += ep.pair_adv(q, dp, dm)
                elif obj == 6:
                    lr_ += ep.kl(q, dp, noise[k, 0])
                    lr_ += ep.kl(q, dm, noise[k, 1])
                elif obj == 4:
                    lr_ += ep.kl(q, dp, noise[k, 0])
            out[k] = lc + alpha * lr_
        in_batch += 1
        if in_batch == bs or k == n_steps - 1:
            model.apply(lr / in_batch, wd, alpha)
            ep.batch += 1
            in_batch = 0
    pool.batch = ep.batch
    return losses, n_neg
