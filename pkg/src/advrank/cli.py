"""Command line driver: ``advrank train|evaluate|sweep|ablation|fetch-data``.

Runs are described by a JSON spec file (flat keys, see ``ExperimentSpec``);
command line flags override spec values.  Every output directory gets the
resolved spec, a provenance record, the final report (TSV + JSON), the
learning curve and a checkpoint.  Report files contain no timings, so a rerun
with the same spec is byte-identical.
"""

import dataclasses
import hashlib
import json
import sys
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional

import click

from . import __version__, kernels
from .data import (
    DATA_ROOT_ENV, LETOR_FEATURES, data_root, fetch_movielens, load_dataset,
    load_letor_fold, load_movielens, save_dataset, subsample_labels, verify_letor,
)
from .metrics import CUTOFFS, METRICS, evaluate
from .models import MatFac, RankMlp, load_checkpoint, save_checkpoint
from .numerics import Rng
from .perturb import PerturbConfig
from .sampling import KINDS, SamplerConfig
from .trainer import OBJECTIVES, TrainConfig, TrainingAborted, train

TASKS = ("itemrec", "websearch")
NORMS = ("l2", "max")
ABLATION_OBJECTIVES = ("pairwise_at", "pairwise_svat", "full_vat", "plain_pairwise")

# filled in for keys left unset (None) in a spec
TASK_DEFAULTS = {
    "itemrec": {"epsilon": 0.01, "lr": 0.005, "epochs": 300, "dim": 5, "tau": 0.5},
    "websearch": {"epsilon": 300.0, "lr": 0.004, "epochs": 100, "dim": LETOR_FEATURES, "tau": 1.0},
}

EXIT_OK, EXIT_CONFIG, EXIT_ABORT = 0, 1, 2


class SpecError(ValueError):
    pass


@dataclass
class ExperimentSpec:
    task: str = "itemrec"
    data_root: Optional[str] = None
    fold: str = "Fold1"
    split_ratio: float = 0.8
    split_seed: int = 0
    objective: str = "pairwise_at"
    sampler: str = "adversarial"
    tau: Optional[float] = None
    pool_size: object = 64  # int or "all"
    refresh_every: int = 1
    epsilon: Optional[float] = None
    norm: str = "l2"
    xi: float = 0.01
    power_iters: int = 1
    alpha: float = 1.0
    epochs: Optional[int] = None
    lr: Optional[float] = None
    batch_size: int = 1
    weight_decay: float = 0.0
    seed: int = 0
    label_fraction: float = 1.0
    eval_every: int = 25
    cutoffs: list = field(default_factory=lambda: list(CUTOFFS))
    fractions: list = field(default_factory=lambda: [0.05, 0.1, 0.2, 0.5, 1.0])
    dim: Optional[int] = None
    out: str = "runs/default"

    @classmethod
    def from_dict(cls, raw):
        known = {f.name for f in dataclasses.fields(cls)}
        unknown = sorted(set(raw) - known)
        if unknown:
            raise SpecError(f"unknown spec keys: {', '.join(unknown)}")
        return cls(**raw)

    def with_(self, **changes):
        return dataclasses.replace(self, **{k: v for k, v in changes.items() if v is not None})

    def resolved(self):
        """Copy with task defaults filled in; raises SpecError listing every
        invalid field."""
        if self.task not in TASKS:
            raise SpecError(f"task: must be one of {TASKS}, got {self.task!r}")
        spec = dataclasses.replace(self)
        for key, value in TASK_DEFAULTS[self.task].items():
            if getattr(spec, key) is None:
                setattr(spec, key, value)
        if spec.data_root is None:
            spec.data_root = str(data_root())
        checks = [
            ("objective", spec.objective in OBJECTIVES, f"must be one of {OBJECTIVES}"),
            ("sampler", spec.sampler in KINDS, f"must be one of {KINDS}"),
            ("norm", spec.norm in NORMS, f"must be one of {NORMS}"),
            ("epsilon", _num(spec.epsilon) and spec.epsilon >= 0, "must be >= 0"),
            ("tau", _num(spec.tau) and spec.tau > 0, "must be > 0"),
            ("xi", _num(spec.xi) and spec.xi > 0, "must be > 0"),
            ("lr", _num(spec.lr) and spec.lr > 0, "must be > 0"),
            ("alpha", _num(spec.alpha) and spec.alpha >= 0, "must be >= 0"),
            ("weight_decay", _num(spec.weight_decay) and spec.weight_decay >= 0, "must be >= 0"),
            ("epochs", _int(spec.epochs) and spec.epochs >= 1, "must be an integer >= 1"),
            ("batch_size", _int(spec.batch_size) and spec.batch_size >= 1, "must be an integer >= 1"),
            ("refresh_every", _int(spec.refresh_every) and spec.refresh_every >= 1, "must be an integer >= 1"),
            ("power_iters", _int(spec.power_iters) and spec.power_iters >= 1, "must be an integer >= 1"),
            ("eval_every", _int(spec.eval_every) and spec.eval_every >= 0, "must be an integer >= 0"),
            ("seed", _int(spec.seed) and spec.seed >= 0, "must be an integer >= 0"),
            ("split_seed", _int(spec.split_seed) and spec.split_seed >= 0, "must be an integer >= 0"),
            ("split_ratio", _num(spec.split_ratio) and 0 < spec.split_ratio < 1, "must be in (0, 1)"),
            ("label_fraction", _fraction(spec.label_fraction), "must be in (0, 1]"),
            ("pool_size", spec.pool_size == "all" or (_int(spec.pool_size) and spec.pool_size >= 1),
             'must be an integer >= 1 or "all"'),
            ("dim", _int(spec.dim) and spec.dim >= 1, "must be an integer >= 1"),
            ("cutoffs", isinstance(spec.cutoffs, list) and bool(spec.cutoffs)
             and all(_int(n) and n >= 1 for n in spec.cutoffs), "must be a non-empty list of integers >= 1"),
            ("fractions", isinstance(spec.fractions, list) and bool(spec.fractions)
             and all(_fraction(f) for f in spec.fractions), "must be a non-empty list of values in (0, 1]"),
        ]
        errors = [f"{name}: {msg} (got {getattr(spec, name)!r})" for name, ok, msg in checks if not ok]
        if errors:
            raise SpecError("invalid spec:\n  " + "\n  ".join(errors))
        return spec

    def train_config(self):
        return TrainConfig(
            objective=self.objective,
            epochs=self.epochs,
            lr=self.lr,
            batch_size=self.batch_size,
            perturb=PerturbConfig(self.epsilon, self.norm, self.xi, self.power_iters),
            sampler=SamplerConfig(
                kind=self.sampler, tau=self.tau,
                pool_size=None if self.pool_size == "all" else self.pool_size,
                refresh_every=self.refresh_every,
            ),
            alpha=self.alpha,
            weight_decay=self.weight_decay,
            seed=self.seed,
            eval_every=self.eval_every,
        )

    def to_json(self):
        return json.dumps(dataclasses.asdict(self), indent=1, sort_keys=True) + "\n"

    def config_hash(self):
        payload = {k: v for k, v in dataclasses.asdict(self).items() if k not in ("out", "data_root")}
        return hashlib.sha256(json.dumps(payload, sort_keys=True).encode()).hexdigest()[:16]


def _num(x):
    return isinstance(x, (int, float)) and not isinstance(x, bool)


def _int(x):
    return isinstance(x, int) and not isinstance(x, bool)


def _fraction(x):
    return _num(x) and 0 < x <= 1


def load_spec(path):
    try:
        raw = json.loads(Path(path).read_text())
    except OSError as exc:
        raise SpecError(f"cannot read spec {path}: {exc}") from None
    except json.JSONDecodeError as exc:
        raise SpecError(f"spec {path} is not valid JSON: {exc}") from None
    if not isinstance(raw, dict):
        raise SpecError(f"spec {path} must be a JSON object")
    return ExperimentSpec.from_dict(raw)


def label_seed(seed, fraction):
    """Sub-seed for label subsampling, derived from the master seed and the
    fraction so that sweep cells draw independent subsets."""
    return int(Rng(seed).child(f"labels:{fraction!r}").integers(2**31 - 1))


# -- data --------------------------------------------------------------------


def _cached(root, name, build):
    cache = Path(root) / "cache"
    paths = [cache / f"{name}-{part}.npz" for part in ("train", "test")]
    if all(p.exists() for p in paths):
        return tuple(load_dataset(p) for p in paths)
    parts = build()
    try:
        cache.mkdir(parents=True, exist_ok=True)
        for ds, p in zip(parts, paths):
            save_dataset(ds, p)
    except OSError:
        pass  # read-only data root: just skip caching
    return parts


def load_task_data(spec):
    """(train, test) datasets for a resolved spec."""
    root = Path(spec.data_root)
    if spec.task == "itemrec":
        if not (root / "ml-100k" / "u.data").exists():
            raise SpecError(
                f"MovieLens data not found under {root} (set {DATA_ROOT_ENV} or run `advrank fetch-data`)"
            )
        name = f"movielens-{spec.split_ratio!r}-{spec.split_seed}"
        return _cached(root, name, lambda: load_movielens(root, spec.split_ratio, spec.split_seed))
    ok, msg = verify_letor(root, spec.fold)
    if not ok:
        raise SpecError(f"MQ2008-semi data not available: {msg}")
    return _cached(root, f"mq2008semi-{spec.fold}", lambda: load_letor_fold(root, spec.fold))


def build_model(spec, train_ds):
    rng = Rng(spec.seed).child("init")
    if spec.task == "itemrec":
        return MatFac(train_ds.n_queries, train_ds.n_docs, spec.dim, rng)
    return RankMlp(train_ds.features.shape[1], spec.dim, rng)


# -- runs --------------------------------------------------------------------


def _fmt(x):
    return f"{x:.9g}"


def write_curve(path, logs, columns):
    lines = ["\t".join(["epoch", "mean_loss", "n_positives", "n_negatives", *columns])]
    for e in logs:
        vals = [e.metrics[c] if e.metrics else None for c in columns]
        lines.append("\t".join(
            [str(e.epoch), _fmt(e.mean_loss), str(e.n_positives), str(e.n_negatives)]
            + ["" if v is None else _fmt(v) for v in vals]
        ))
    Path(path).write_text("\n".join(lines) + "\n")


def method_name(spec):
    return f"{spec.objective}+{spec.sampler}"


def _write_outputs(out, spec, report):
    report_tsv = ["metric\tmethod\tvalue", *report.tsv_rows(method_name(spec))]
    (out / "report.tsv").write_text("\n".join(report_tsv) + "\n")
    (out / "report.json").write_text(report.to_json())


def _prepare_out(spec):
    out = Path(spec.out)
    out.mkdir(parents=True, exist_ok=True)
    (out / "spec.json").write_text(spec.to_json())
    provenance = {
        "version": __version__,
        "seed": spec.seed,
        "config_hash": spec.config_hash(),
        "backend": kernels.BACKEND,
    }
    (out / "provenance.json").write_text(json.dumps(provenance, indent=1, sort_keys=True) + "\n")
    return out


def run_experiment(spec, data=None, echo=None):
    """Train and evaluate one configuration; returns the final EvalReport."""
    spec = spec.resolved()
    train_ds, test_ds = data if data is not None else load_task_data(spec)
    if spec.label_fraction < 1:
        train_ds = subsample_labels(train_ds, spec.label_fraction, label_seed(spec.seed, spec.label_fraction))
    out = _prepare_out(spec)
    model = build_model(spec, train_ds)
    cfg = spec.train_config()
    cutoffs = tuple(spec.cutoffs)

    def evaluate_now(m):
        return evaluate(m, test_ds, cutoffs).aggregate()

    columns = [f"{m}@{n}" for m in METRICS for n in cutoffs]
    if echo is not None:
        echo(f"# {method_name(spec)} -> {out}")
        echo("\t".join(["epoch", "mean_loss", "seconds", *columns]))

    def log(entry):
        if echo is not None:
            echo(entry.tsv(columns))

    _, logs = train(model, train_ds, cfg, evaluate=evaluate_now, log=log)
    meta = {
        "task": spec.task,
        "method": method_name(spec),
        "config_hash": spec.config_hash(),
        "seed": spec.seed,
        "epoch": spec.epochs,
        "label_fraction": spec.label_fraction,
        "fold": spec.fold if spec.task == "websearch" else None,
    }
    report = evaluate(model, test_ds, cutoffs, meta=meta)
    write_curve(out / "curve.tsv", logs, report.columns)
    _write_outputs(out, spec, report)
    save_checkpoint(model, out / "checkpoint.json")
    return report


def run_sweep(spec, fractions=None, echo=None):
    spec = spec.resolved()
    fractions = list(spec.fractions if fractions is None else fractions)
    data = load_task_data(spec)
    base = Path(spec.out)
    rows = ["fraction\tmetric\tmethod\tvalue"]
    reports = {}
    for f in fractions:
        cell = spec.with_(label_fraction=f, out=str(base / f"fraction-{f!r}"))
        report = run_experiment(cell, data, echo)
        reports[f] = report
        rows += [f"{f!r}\t{r}" for r in report.tsv_rows(method_name(spec))]
    base.mkdir(parents=True, exist_ok=True)
    (base / "sweep.tsv").write_text("\n".join(rows) + "\n")
    return reports


def run_ablation(spec, echo=None):
    """{uniform, adversarial} x {pairwise_at, pairwise_svat, full_vat, plain}
    with shared seeds and data split."""
    spec = spec.resolved()
    data = load_task_data(spec)
    base = Path(spec.out)
    reports = {}
    columns = None
    lines = []
    for objective in ABLATION_OBJECTIVES:
        for kind in ("uniform", "adversarial"):
            cell = spec.with_(objective=objective, sampler=kind, out=str(base / f"{objective}-{kind}"))
            report = run_experiment(cell, data, echo)
            reports[(objective, kind)] = report
            columns = report.columns
            agg = report.aggregate()
            lines.append("\t".join([objective, kind, *(_fmt(agg[c]) for c in columns)]))
    base.mkdir(parents=True, exist_ok=True)
    (base / "ablation.tsv").write_text("\n".join(["\t".join(["objective", "sampler", *columns]), *lines]) + "\n")
    return reports


# -- command line --------------------------------------------------------------


def _spec_options(fn):
    options = [
        click.option("--task", type=click.Choice(TASKS)),
        click.option("--objective", type=click.Choice(OBJECTIVES)),
        click.option("--sampler", type=click.Choice(KINDS)),
        click.option("--epsilon", type=float),
        click.option("--tau", type=float),
        click.option("--norm", type=click.Choice(NORMS)),
        click.option("--epochs", type=int),
        click.option("--lr", type=float),
        click.option("--seed", type=int),
        click.option("--label-fraction", type=float),
        click.option("--out", type=click.Path(file_okay=False)),
        click.argument("spec_file", required=False, type=click.Path(dir_okay=False)),
    ]
    for opt in reversed(options):
        fn = opt(fn)
    return fn


def _build_spec(spec_file, **flags):
    spec = load_spec(spec_file) if spec_file else ExperimentSpec()
    return spec.with_(**flags).resolved()


def _echo(msg):
    click.echo(msg, err=True)


def _guard(fn, *args):
    try:
        fn(*args)
    except SpecError as exc:
        click.echo(f"config error: {exc}", err=True)
        return EXIT_CONFIG
    except TrainingAborted as exc:
        click.echo(f"training aborted: {exc}", err=True)
        return EXIT_ABORT
    except OSError as exc:
        click.echo(f"error: {exc}", err=True)
        return EXIT_ABORT
    return EXIT_OK


@click.group()
@click.version_option(__version__)
def cli():
    """Adversarial sampling and training for semi-supervised ranking."""


@cli.command("train")
@_spec_options
def train_cmd(spec_file, **flags):
    """Train one configuration and write reports to --out."""
    def go():
        spec = _build_spec(spec_file, **flags)
        report = run_experiment(spec, echo=_echo)
        agg = report.aggregate()
        click.echo(" ".join(f"{c}={agg[c]:.4f}" for c in report.columns))
    return _guard(go)


@cli.command("evaluate")
@_spec_options
@click.option("--checkpoint", required=True, type=click.Path(dir_okay=False))
def evaluate_cmd(spec_file, checkpoint, **flags):
    """Evaluate a saved checkpoint on the test split."""
    def go():
        spec = _build_spec(spec_file, **flags)
        _, test_ds = load_task_data(spec)
        try:
            model = load_checkpoint(checkpoint)
        except (OSError, ValueError) as exc:
            raise SpecError(f"cannot load checkpoint {checkpoint}: {exc}") from None
        out = _prepare_out(spec)
        report = evaluate(model, test_ds, tuple(spec.cutoffs),
                          meta={"task": spec.task, "checkpoint": str(checkpoint), "seed": spec.seed})
        _write_outputs(out, spec, report)
        agg = report.aggregate()
        click.echo(" ".join(f"{c}={agg[c]:.4f}" for c in report.columns))
    return _guard(go)


@cli.command("sweep")
@_spec_options
@click.option("--fractions", help="comma separated label fractions, e.g. 0.05,0.1,1.0")
def sweep_cmd(spec_file, fractions, **flags):
    """One run per label fraction; consolidated sweep.tsv."""
    def go():
        spec = _build_spec(spec_file, **flags)
        fr = None
        if fractions:
            try:
                fr = [float(x) for x in fractions.split(",")]
            except ValueError:
                raise SpecError(f"fractions: cannot parse {fractions!r}") from None
            spec = spec.with_(fractions=fr).resolved()
        run_sweep(spec, echo=_echo)
        click.echo(str(Path(spec.out) / "sweep.tsv"))
    return _guard(go)


@cli.command("ablation")
@_spec_options
def ablation_cmd(spec_file, **flags):
    """Sampler x objective grid; writes ablation.tsv."""
    def go():
        spec = _build_spec(spec_file, **flags)
        run_ablation(spec, echo=_echo)
        click.echo(str(Path(spec.out) / "ablation.tsv"))
    return _guard(go)


@cli.command("fetch-data")
@click.option("--task", type=click.Choice(TASKS + ("all",)), default="all")
@click.option("--root", type=click.Path(file_okay=False), help=f"data root (default ${DATA_ROOT_ENV} or ./data)")
def fetch_cmd(task, root):
    """Download MovieLens 100k and check the LETOR files."""
    root = Path(root) if root else data_root()
    status = EXIT_OK
    if task in ("itemrec", "all"):
        try:
            ok, msg = fetch_movielens(root)
        except OSError as exc:
            ok, msg = False, f"download failed: {exc}"
        click.echo(f"movielens: {msg}")
        status = status if ok else EXIT_ABORT
    if task in ("websearch", "all"):
        ok, msg = verify_letor(root)
        click.echo(f"mq2008-semi: {msg}")
        status = status if ok else EXIT_ABORT
    return status


def main(argv=None):
    try:
        code = cli.main(args=argv, prog_name="advrank", standalone_mode=False)
    except click.exceptions.Exit as exc:
        code = exc.exit_code
    except click.ClickException as exc:
        exc.show()
        code = EXIT_CONFIG
    except click.exceptions.Abort:
        code = EXIT_ABORT
    sys.exit(code or 0)


if __name__ == "__main__":
    main()
