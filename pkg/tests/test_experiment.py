import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from ctxmon.experiment import E2EConfig, build_e2e_corpus, load_corpus, make_loso_folds, simulate_corpus
from ctxmon.kinematics import save_trajectory


def test_two_operators_give_two_folds():
    folds = make_loso_folds(["A", "B"] * 5)
    assert [f.test_group for f in folds] == ["A", "B"]
    assert folds[0].test.tolist() == [0, 2, 4, 6, 8] and folds[0].train.tolist() == [1, 3, 5, 7, 9]


def test_single_group_and_missing_group_raise():
    with pytest.raises(ValueError):
        make_loso_folds(["A"] * 4)
    with pytest.raises(ValueError):
        make_loso_folds(["A", "", "B"])


def test_five_super_trials():
    groups = [str(i % 5 + 1) for i in range(39)]
    folds = make_loso_folds(groups)
    assert len(folds) == 5
    assert sorted(len(f.test) for f in folds) == [7, 8, 8, 8, 8]


@settings(max_examples=100, deadline=None)
@given(st.lists(st.sampled_from("ABCDE"), min_size=2, max_size=50))
def test_folds_partition_the_corpus(groups):
    if len(set(groups)) < 2:
        with pytest.raises(ValueError):
            make_loso_folds(groups)
        return
    folds = make_loso_folds(groups)
    tested = np.concatenate([f.test for f in folds])
    assert sorted(tested.tolist()) == list(range(len(groups)))
    for f in folds:
        assert set(f.train.tolist()).isdisjoint(f.test.tolist())
        assert len(f.train) + len(f.test) == len(groups)
        assert {groups[i] for i in f.test} == {f.test_group}
        assert f.test_group not in {groups[i] for i in f.train}


def test_load_corpus_errors(tmp_path):
    with pytest.raises(FileNotFoundError):
        load_corpus(tmp_path / "missing")
    with pytest.raises(FileNotFoundError):
        load_corpus(tmp_path)
    with pytest.raises(ValueError):
        load_corpus(tmp_path, "parquet")


def test_load_corpus_round_trip(tmp_path):
    demos = simulate_corpus(E2EConfig(n_demos=3, seed=2))
    for t in demos:
        save_trajectory(t, tmp_path / f"{t.name}.csv")
    back = load_corpus(tmp_path)
    assert [t.name for t in back] == sorted(t.name for t in demos)
    assert {t.group for t in back} == {t.group for t in demos}


def test_e2e_corpus_is_seeded_and_labelled():
    cfg = E2EConfig(n_demos=8, seed=11)
    a, info_a = build_e2e_corpus(cfg)
    b, info_b = build_e2e_corpus(cfg)
    assert info_a == info_b
    assert all(x.data.tobytes() == y.data.tobytes() for x, y in zip(a, b))
    assert sum(d["scenario"] != "none" for d in info_a["demos"]) == 4
    assert {t.group for t in a} == {"A", "B"}
    # unsafe labels only appear in demos the oracle flagged
    for t, d in zip(a, info_a["demos"]):
        if any(s.unsafe for s in t.segments):
            assert d["events"]
