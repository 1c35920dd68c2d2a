import os
from pathlib import Path

import pytest

# acceptance criteria append (criterion, passed, detail) here
ACCEPTANCE = []

DATA_ROOT = Path(os.environ.get("ADVRANK_DATA", "/root/data"))


def has_movielens():
    return (DATA_ROOT / "ml-100k" / "u.data").exists()


def has_letor():
    return (DATA_ROOT / "MQ2008-semi" / "Fold1" / "train.txt").exists()


@pytest.fixture
def record_criterion():
    def record(name, passed, detail=""):
        ACCEPTANCE.append((name, passed, detail))
    return record


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE:
        return
    terminalreporter.section("acceptance criteria")
    for name, passed, detail in sorted(ACCEPTANCE, key=lambda r: r[0]):
        terminalreporter.write_line(f"{'PASS' if passed else 'FAIL'}  {name}  {detail}")


def read_curve(path):
    lines = Path(path).read_text().splitlines()
    header = lines[0].split("\t")
    return [dict(zip(header, line.split("\t"))) for line in lines[1:]]


def _itemrec_run(root, **overrides):
    from advrank.cli import ExperimentSpec, run_experiment

    spec = ExperimentSpec(task="itemrec", data_root=str(DATA_ROOT), out=str(root), eval_every=0, **overrides)
    report = run_experiment(spec)
    return {"report": report, "curve": read_curve(root / "curve.tsv"), "out": root}


@pytest.fixture(scope="session")
def movielens_at_run(tmp_path_factory):
    """Default itemrec configuration: PairwiseAT, adversarial sampler."""
    return _itemrec_run(tmp_path_factory.mktemp("ml-at"))


@pytest.fixture(scope="session")
def movielens_baseline_run(tmp_path_factory):
    """Same settings, plain pairwise loss with uniform sampling."""
    return _itemrec_run(tmp_path_factory.mktemp("ml-base"), objective="plain_pairwise", sampler="uniform")
