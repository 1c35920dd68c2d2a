import io
import math

import numpy as np
import pytest

from _synthetic import feature_dataset, ids_dataset, letor_line, movielens_lines
from conftest import DATA_ROOT, has_movielens
from advrank.data import (
    DataFormatError, compile_letor_dataset, compile_movielens_dataset, data_root,
    load_dataset, load_letor_fold, parse_letor, parse_movielens, save_dataset,
    serialize_letor, subsample_labels, verify_letor, verify_movielens,
)


def feats(seed=0, n=46):
    return np.round(np.random.default_rng(seed).random(n), 6).tolist()


def disjoint(ds):
    return all(not set(ds.labeled(q)) & set(ds.unlabeled(q)) for q in range(ds.n_queries))


class TestParseLetor:
    def test_example_line(self):
        f = [0.5, 0.25] + [0.0] * 44
        (rec,) = parse_letor([letor_line(1, "10", f)])
        assert rec.relevance == 1
        assert rec.query_id == "10"
        assert rec.features[0] == 0.5
        assert rec.doc_id == "GX000-00-0000000"

    def test_any_feature_order(self):
        toks = " ".join(f"{j}:{j / 100}" for j in range(46, 0, -1))
        (rec,) = parse_letor([f"0 qid:7 {toks}"])
        np.testing.assert_array_equal(rec.features, np.arange(1, 47) / 100)

    def test_missing_feature_is_named(self):
        toks = " ".join(f"{j}:0.1" for j in range(1, 47) if j != 17)
        with pytest.raises(DataFormatError, match="17"):
            parse_letor([f"0 qid:7 {toks}"])

    def test_empty_input(self):
        assert parse_letor([]) == []
        assert parse_letor(["\n", "   \n"]) == []

    @pytest.mark.parametrize("line", [
        "x qid:1 1:0",
        "3 qid:1 1:0",
        "1 query:1 1:0",
        "1",
        "1 qid:1 47:0.5",
        "1 qid:1 1:abc",
        "1 qid:1 1",
    ])
    def test_malformed_reports_line_number(self, line):
        good = letor_line(0, "1", feats())
        with pytest.raises(DataFormatError, match="line 2"):
            parse_letor([good, line])

    def test_file_order(self):
        lines = [letor_line(r, q, feats(k)) for k, (r, q) in enumerate([(2, "b"), (-1, "a"), (0, "b")])]
        recs = parse_letor(lines)
        assert [(r.relevance, r.query_id) for r in recs] == [(2, "b"), (-1, "a"), (0, "b")]

    def test_round_trip(self):
        lines = [letor_line(r, q, feats(k), f"docid = D{k}") for k, (r, q) in enumerate([(1, "3"), (0, "3"), (-1, "4")])]
        text = serialize_letor(parse_letor(lines))
        assert serialize_letor(parse_letor(io.StringIO(text))) == text
        assert [r.doc_id for r in parse_letor(io.StringIO(text))] == ["D0", "D1", "D2"]


class TestCompileLetor:
    def records(self):
        spec = [(2, "a"), (-1, "a"), (0, "a"), (1, "b"), (-1, "b"), (2, "c")]
        return parse_letor([letor_line(r, q, feats(k)) for k, (r, q) in enumerate(spec)])

    def test_pools(self):
        ds = compile_letor_dataset(self.records())
        assert ds.query_keys == ["a", "b", "c"]
        assert ds.labeled(0).tolist() == [0]
        assert ds.unlabeled(0).tolist() == [1, 2]
        assert ds.labeled(1).tolist() == [3]
        assert ds.unlabeled(2).tolist() == []

    def test_conservation_and_disjointness(self):
        recs = self.records()
        ds = compile_letor_dataset(recs)
        for q, key in enumerate(ds.query_keys):
            assert ds.labeled(q).size + ds.unlabeled(q).size == sum(r.query_id == key for r in recs)
        assert disjoint(ds)

    def test_grades_for_evaluation(self):
        ds = compile_letor_dataset(self.records())
        assert ds.grades.tolist() == [2, -1, 0, 1, -1, 2]
        assert ds.grade(0, 1) == 0
        assert ds.grade(0, 0) == 2

    def test_empty(self):
        ds = compile_letor_dataset([])
        assert ds.n_queries == 0 and ds.features.shape == (0, 46)

    def test_load_fold(self, tmp_path):
        fold = tmp_path / "MQ2008-semi" / "Fold1"
        fold.mkdir(parents=True)
        for name, n in (("train.txt", 3), ("test.txt", 2)):
            (fold / name).write_text("\n".join(letor_line(k % 3 - 1, "q1", feats(k)) for k in range(n)) + "\n")
        assert verify_letor(tmp_path)[0]
        train, test = load_letor_fold(tmp_path)
        assert train.n_docs == 3 and test.n_docs == 2

    def test_verify_missing(self, tmp_path):
        ok, msg = verify_letor(tmp_path, "Fold2")
        assert not ok and "Fold2" in msg


class TestParseMovielens:
    def test_example_line(self):
        (x,) = parse_movielens(["196\t242\t3\t881250949\n"])
        assert (x.user_id, x.item_id, x.rating, x.timestamp) == (196, 242, 3, 881250949)

    @pytest.mark.parametrize("line", ["1\t2\t6\t0", "1\t2\t0\t0", "1 2 3 4", "1\t2\tx\t4", "1\t2\t3"])
    def test_malformed(self, line):
        with pytest.raises(DataFormatError, match="line 2"):
            parse_movielens(["1\t1\t1\t1", line])

    @pytest.mark.skipif(not has_movielens(), reason="MovieLens 100k not available")
    def test_full_file(self):
        with open(DATA_ROOT / "ml-100k" / "u.data") as fh:
            rows = parse_movielens(fh)
        assert len(rows) == 100_000
        assert len({r.user_id for r in rows}) == 943
        # the distributed file references 1682 distinct items
        assert len({r.item_id for r in rows}) == 1682


class TestCompileMovielens:
    def interactions(self, seed=0):
        return parse_movielens(io.StringIO(movielens_lines(seed=seed)))

    def test_hand_example(self):
        rows = parse_movielens(["1\t10\t5\t0", "1\t20\t3\t0", "1\t30\t4\t0", "2\t10\t4\t0", "2\t30\t1\t0"])
        train, test = compile_movielens_dataset(rows, split_ratio=0.5, seed=0)
        assert train.n_docs == 3 and train.query_keys == [1, 2]
        # item 20 (rating 3) is never labeled
        for ds in (train, test):
            for q in range(2):
                assert 1 not in ds.labeled(q).tolist()
        n_pos = train.n_labeled() + test.n_labeled()
        assert n_pos == 3
        assert train.n_labeled() == round(0.5 * 3)

    def test_pools_and_split(self):
        rows = self.interactions()
        train, test = compile_movielens_dataset(rows)
        assert disjoint(train) and disjoint(test)
        n_pos = sum(r.rating >= 4 for r in rows)
        assert train.n_labeled() + test.n_labeled() == n_pos
        assert train.n_labeled() == round(0.8 * n_pos)
        for q in range(train.n_queries):
            assert train.labeled(q).size + train.unlabeled(q).size == train.n_docs
            # test candidates exclude train positives
            assert not set(test.candidates(q)) & set(train.labeled(q))

    def test_deterministic_split(self):
        a, _ = compile_movielens_dataset(self.interactions(), seed=4)
        b, _ = compile_movielens_dataset(self.interactions(), seed=4)
        c, _ = compile_movielens_dataset(self.interactions(), seed=5)
        assert a.labeled_docs.tobytes() == b.labeled_docs.tobytes()
        assert a.labeled_docs.tobytes() != c.labeled_docs.tobytes()

    def test_id_maps_dense(self):
        rows = parse_movielens(["7\t100\t5\t0", "3\t50\t4\t0", "7\t50\t4\t0"])
        train, _ = compile_movielens_dataset(rows, split_ratio=0.5)
        maps = train.meta["id_maps"]
        assert maps["users"] == {"3": 0, "7": 1}
        assert maps["items"] == {"50": 0, "100": 1}

    def test_users_without_positives_reported(self):
        rows = parse_movielens(["1\t1\t5\t0", "1\t2\t5\t0", "2\t1\t2\t0"])
        train, _ = compile_movielens_dataset(rows, split_ratio=0.5)
        assert train.meta["users_without_positives"] >= 1
        assert 1 not in train.train_queries().tolist()

    def test_bad_ratio(self):
        with pytest.raises(ValueError):
            compile_movielens_dataset([], split_ratio=1.0)


class TestSubsample:
    def test_identity(self):
        ds = feature_dataset()
        assert subsample_labels(ds, 1.0, 0) is ds

    def test_count_and_subset(self):
        ds = ids_dataset()
        sub = subsample_labels(ds, 0.3, 1)
        assert sub.n_labeled() == math.ceil(0.3 * ds.n_labeled())
        for q in range(ds.n_queries):
            assert set(sub.labeled(q)) <= set(ds.labeled(q))
            np.testing.assert_array_equal(sub.unlabeled(q), ds.unlabeled(q))
        assert disjoint(sub)

    def test_deterministic(self):
        ds = ids_dataset()
        a, b = subsample_labels(ds, 0.5, 3), subsample_labels(ds, 0.5, 3)
        assert a.labeled_docs.tobytes() == b.labeled_docs.tobytes()

    def test_emptied_queries_leave_training(self):
        ds = ids_dataset(n_users=40, density=0.05)
        sub = subsample_labels(ds, 0.05, 0)
        assert sub.train_queries().size < ds.train_queries().size

    @pytest.mark.parametrize("fraction", [0.0, -0.1, 1.5])
    def test_bad_fraction(self, fraction):
        with pytest.raises(ValueError):
            subsample_labels(ids_dataset(), fraction, 0)


class TestCache:
    @pytest.mark.parametrize("make", [feature_dataset, ids_dataset])
    def test_round_trip(self, tmp_path, make):
        ds = make()
        save_dataset(ds, tmp_path / "ds")
        back = load_dataset(tmp_path / "ds")
        assert back.kind == ds.kind and back.query_keys == ds.query_keys
        for name in ("labeled_indptr", "labeled_docs", "unlabeled_indptr", "unlabeled_docs", "features", "grades"):
            a, b = getattr(ds, name), getattr(back, name)
            assert (a is None and b is None) or a.tobytes() == b.tobytes()

    def test_rejects_other_format(self, tmp_path):
        save_dataset(ids_dataset(), tmp_path / "ds")
        (tmp_path / "ds.json").write_text('{"format": "x"}')
        with pytest.raises(DataFormatError):
            load_dataset(tmp_path / "ds")


class TestRoots:
    def test_env_override(self, monkeypatch, tmp_path):
        monkeypatch.setenv("ADVRANK_DATA", str(tmp_path))
        assert data_root() == tmp_path

    def test_verify_movielens_missing(self, tmp_path):
        ok, msg = verify_movielens(tmp_path)
        assert not ok and "missing" in msg

    def test_verify_movielens_wrong_size(self, tmp_path):
        (tmp_path / "ml-100k").mkdir()
        (tmp_path / "ml-100k" / "u.data").write_text(movielens_lines())
        ok, msg = verify_movielens(tmp_path)
        assert not ok and "size" in msg

    @pytest.mark.skipif(not has_movielens(), reason="MovieLens 100k not available")
    def test_verify_movielens_real(self):
        assert verify_movielens(DATA_ROOT)[0]
