"""Time one training epoch with the compiled kernels and with the pure-Python loop.

    python benchmarks/bench_kernels.py [--objective pairwise_at] [--repeats 3]

Uses a synthetic MovieLens-sized item recommendation dataset (943 users,
1682 items, ~55k positives) and a 46-feature web search dataset, so no
downloads are needed.  The Python loop is timed on a slice of the epoch
and scaled up, since a full Python epoch takes minutes.
"""

import argparse
import time

import numpy as np

from advrank import kernels
from advrank.data import RankingDataset
from advrank.models import MatFac, RankMlp
from advrank.numerics import Rng
from advrank.perturb import PerturbConfig
from advrank.sampling import NegativePool, SamplerConfig
from advrank.trainer import EpochPlan, TrainConfig, make_streams, plan_epoch, python_epoch


def itemrec_data(seed=0, n_users=943, n_items=1682, density=0.035):
    rng = np.random.default_rng(seed)
    pop = rng.pareto(1.2, n_items) + 1
    pop /= pop.sum()
    labeled, unlabeled = [], []
    for _ in range(n_users):
        k = max(1, rng.binomial(n_items, density))
        pos = np.unique(rng.choice(n_items, size=k, p=pop))
        mask = np.ones(n_items, dtype=bool)
        mask[pos] = False
        labeled.append(pos.tolist())
        unlabeled.append(np.flatnonzero(mask).tolist())
    return RankingDataset.from_groups("ids", labeled, unlabeled, n_items, list(range(n_users)))


def websearch_data(seed=0, n_queries=470, per_query=40):
    rng = np.random.default_rng(seed)
    n = n_queries * per_query
    X = rng.random((n, 46))
    labeled, unlabeled = [], []
    for q in range(n_queries):
        refs = list(range(q * per_query, (q + 1) * per_query))
        labeled.append(refs[:3])
        unlabeled.append(refs[3:])
    return RankingDataset.from_groups("features", labeled, unlabeled, n, list(range(n_queries)), features=X)


def timed(run, model, dataset, plan, cfg):
    pool = NegativePool.from_dataset(dataset)
    pool.docs = pool.docs.copy()
    t0 = time.perf_counter()
    run(model, pool, plan, cfg)
    return time.perf_counter() - t0


def head(plan, n):
    return EpochPlan(plan.steps[:n], plan.uniforms[:n], plan.noise[:n])


def bench(name, dataset, make_model, cfg, repeats, python_steps):
    model = make_model()
    plan = plan_epoch(dataset, model, cfg, make_streams(cfg.seed), dataset.train_queries())
    n = len(plan.steps)
    fast = kernels.epoch_runner(model, dataset, cfg, backend="cython")
    cy = min(timed(fast, make_model(), dataset, plan, cfg) for _ in range(repeats))
    part = head(plan, min(python_steps, n))
    py = min(timed(python_epoch, make_model(), dataset, part, cfg) for _ in range(repeats)) * n / len(part.steps)
    print(f"{name:<28} {n:>7} {cy:>10.3f} {py:>10.2f} {py / cy:>8.1f}x")


def main():
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--objective", default="pairwise_at")
    ap.add_argument("--repeats", type=int, default=3)
    ap.add_argument("--python-steps", type=int, default=3000, help="steps timed for the Python loop")
    args = ap.parse_args()
    if kernels._kernels is None:
        raise SystemExit("compiled extension not built: python setup.py build_ext --inplace")
    print(f"{'case':<28} {'steps':>7} {'cython s':>10} {'python s':>10} {'speedup':>9}")
    items = itemrec_data()
    cfg = TrainConfig(objective=args.objective, lr=0.005, perturb=PerturbConfig(epsilon=0.01),
                      sampler=SamplerConfig(tau=0.5, pool_size=64))
    bench(f"MatFac k=5 / {args.objective}", items,
          lambda: MatFac(items.n_queries, items.n_docs, 5, Rng(0)), cfg, args.repeats, args.python_steps)
    web = websearch_data()
    cfg = TrainConfig(objective=args.objective, lr=0.004, perturb=PerturbConfig(epsilon=300.0),
                      sampler=SamplerConfig(pool_size=64))
    bench(f"RankMlp 46-46-1 / {args.objective}", web,
          lambda: RankMlp(46, rng=Rng(0)), cfg, args.repeats, min(args.python_steps, 1000))


if __name__ == "__main__":
    main()
