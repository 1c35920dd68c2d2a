"""Backend selection for the training epoch loop.

The compiled extension (``_kernels``) covers the matrix factorization and
MLP scorers; everything else, or any run with ``ADVRANK_BACKEND=python``,
goes through the pure-Python reference loop ``trainer.python_epoch``.
"""

import os

import numpy as np

try:
    from . import _kernels
except ImportError:  # extension not built
    _kernels = None

BACKEND = "cython" if _kernels is not None and os.environ.get("ADVRANK_BACKEND") != "python" else "python"


def _make_scorer(model, dataset, batch_size=1):
    from .models import MatFac, RankMlp

    for arr in model.params().values():
        if arr.dtype != np.float64 or not arr.flags.c_contiguous:
            return None
    if isinstance(model, MatFac) and dataset.kind == "ids":
        return _kernels.MFScorer(model.U, model.V, model.b, batch_size)
    if isinstance(model, RankMlp) and dataset.kind == "features":
        X = np.ascontiguousarray(dataset.features, dtype=np.float64)
        return _kernels.MLPScorer(model.W1, model.b1, model.w2, model.b2, X)
    return None


def epoch_runner(model, dataset, cfg, backend=None):
    """Callable ``run(model, pool, plan, cfg) -> (losses, n_negatives)``."""
    backend = backend or BACKEND
    if backend not in ("cython", "python"):
        raise ValueError(f"unknown backend {backend!r}")
    if backend == "cython":
        if _kernels is None:
            raise RuntimeError("compiled kernels are not available; build the extension or use backend='python'")
        scorer = _make_scorer(model, dataset, cfg.batch_size)
        if scorer is not None:
            def run(model, pool, plan, cfg):
                return _kernels.run_epoch(scorer, pool, plan, cfg)
            return run
    from .trainer import python_epoch

    return python_epoch
