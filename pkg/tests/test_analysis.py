import itertools
import math

import numpy as np
import pytest
from hypothesis import given, strategies as st
from scipy.stats import studentized_range

from dstlab.analysis import (
    NEMENYI_Q_05,
    AnalysisError,
    HarnessError,
    always_kept_fraction,
    average_ranks,
    cd_groups,
    end_mask_similarity,
    first_update_similarity,
    init_vs_end,
    is_monotone,
    itop_curve,
    jaccard,
    layer_jaccards,
    mean_jaccard,
    nemenyi_cd,
    random_baseline_jr,
    read_results_csv,
)
from dstlab.config import ExperimentConfig
from dstlab.topology import Mask, MaskSnapshot, er_allocate


def snap(layers, step=0, kind="update", seed=0, criterion="magnitude"):
    return MaskSnapshot(Mask({k: np.asarray(v, bool) for k, v in layers.items()}), step, criterion, "random",
                        seed, 0.5, meta={"kind": kind})


# -- jaccard ---------------------------------------------------------------------------


def test_jaccard_examples():
    assert jaccard([1, 2, 3], [3, 2, 1]) == 1.0
    assert jaccard([1, 2], [3, 4]) == 0.0
    assert jaccard([1], [1, 2]) == 0.5
    assert jaccard([], []) == 1.0
    assert jaccard(np.array([True, False, True]), np.array([True, True, False])) == pytest.approx(1 / 3)


index_sets = st.sets(st.integers(0, 40), max_size=25)


@given(index_sets, index_sets)
def test_jaccard_properties(a, b):
    j = jaccard(sorted(a), sorted(b))
    assert j == jaccard(sorted(b), sorted(a))
    assert 0.0 <= j <= 1.0
    if a or b:
        assert (j == 1.0) == (a == b)
        assert j == pytest.approx(len(a & b) / len(a | b))


def test_mean_jaccard_examples():
    a = {"x": np.array([1, 1, 0, 0], bool), "y": np.array([1, 0], bool)}
    b = {"x": np.array([1, 1, 0, 0], bool), "y": np.array([0, 1], bool)}
    assert mean_jaccard(a, a) == 1.0
    assert mean_jaccard(a, b) == 0.5
    with pytest.raises(AnalysisError, match="layer mismatch"):
        mean_jaccard(a, {"x": a["x"]})


def test_mean_jaccard_recount_oracle():
    rng = np.random.default_rng(3)
    for _ in range(20):
        a = {f"l{i}": rng.random((5, 7)) < 0.3 for i in range(3)}
        b = {f"l{i}": rng.random((5, 7)) < 0.3 for i in range(3)}
        manual = []
        for name in a:
            inter = union = 0
            for u, v in zip(a[name].ravel().tolist(), b[name].ravel().tolist()):
                inter += u and v
                union += u or v
            manual.append(1.0 if union == 0 else inter / union)
        assert mean_jaccard(Mask(a), Mask(b)) == pytest.approx(sum(manual) / 3, rel=1e-15)
        assert list(layer_jaccards(a, b)) == ["l0", "l1", "l2"]


# -- random baseline ----------------------------------------------------------------------


def test_random_baseline_closed_form():
    plan = er_allocate([(1000, 100)], 0.2)
    jr = random_baseline_jr(plan, range(6))
    assert jr == pytest.approx(0.2 / 1.8, abs=0.02)
    assert random_baseline_jr(er_allocate([(10, 10)], 1.0), [0, 1]) == 1.0


def test_random_baseline_prune_sets():
    # a prune fraction rho of a density-d mask: every layer is a random subset of size rho*d*n
    plan = er_allocate([(1000, 100)], 1.0)
    jr = random_baseline_jr(plan, range(4), prune_fraction=0.5)
    assert jr == pytest.approx(0.5 / 1.5, abs=0.02)


def test_random_baseline_needs_distinct_seeds():
    plan = er_allocate([(10, 10)], 0.5)
    with pytest.raises(AnalysisError):
        random_baseline_jr(plan, [0])
    with pytest.raises(AnalysisError, match="distinct"):
        random_baseline_jr(plan, [3, 3])


# -- similarity matrices -------------------------------------------------------------------


FAST = ExperimentConfig(data_samples=2000, density=1.0, update_period=10, epochs=2, lr=0.05, batch_size=64)


@pytest.fixture(scope="module")
def first_matrix():
    crits = ["magnitude", "mest:0", "set", "snip", "rsensitivity", "random_prune"]
    return first_update_similarity(FAST, crits, seeds=[0, 1])


def test_first_update_matrix_shape(first_matrix):
    m = first_matrix
    k = len(m.labels)
    assert m.values.shape == (k, k) and m.n_seeds == 2
    np.testing.assert_array_equal(np.diag(m.values), 1.0)
    np.testing.assert_array_equal(m.values, m.values.T)
    assert np.all((0 <= m.values) & (m.values <= 1))
    assert m.get("magnitude", "mest:0") == 1.0
    assert m.per_layer.shape == (k, k, 3)
    # matrix entries are the layer means of the per-layer values
    np.testing.assert_allclose(m.values[~np.eye(k, dtype=bool)],
                               m.per_layer.mean(axis=2)[~np.eye(k, dtype=bool)], rtol=1e-15)
    assert m.to_csv().splitlines()[0] == "criterion," + ",".join(m.labels)
    assert len(m.per_layer_csv().splitlines()) == 1 + k * k * 3


def test_first_update_is_deterministic(first_matrix):
    again = first_update_similarity(FAST, list(first_matrix.labels), seeds=[0, 1])
    np.testing.assert_array_equal(again.values, first_matrix.values)


def test_first_update_detects_diverged_state(monkeypatch):
    from dstlab import analysis

    calls = iter(range(100))
    monkeypatch.setattr(analysis, "_state_hash", lambda net, mask: str(next(calls)))
    with pytest.raises(HarnessError, match="diverged"):
        first_update_similarity(FAST, ["magnitude", "snip"], seeds=[0])


def test_first_update_argument_errors():
    with pytest.raises(AnalysisError, match="duplicate"):
        first_update_similarity(FAST, ["snip", "snip"], seeds=[0])
    with pytest.raises(AnalysisError):
        first_update_similarity(FAST, ["snip"], seeds=[])


def test_end_mask_similarity_two_runs():
    a = snap({"x": [1, 1, 0, 0], "y": [1, 0]}, seed=0)
    b = snap({"x": [1, 0, 1, 0], "y": [1, 0]}, seed=0)
    m = end_mask_similarity({"a": [a], "b": [b]})
    assert m.values.shape == (2, 2)
    np.testing.assert_array_equal(np.diag(m.values), 1.0)
    assert m.get("a", "b") == m.get("b", "a") == pytest.approx((1 / 3 + 1) / 2)
    c = snap({"x": [1, 1, 1, 0], "y": [1, 0]}, seed=4)
    with pytest.raises(AnalysisError, match="density mismatch.*seed 4"):
        end_mask_similarity({"a": [a], "c": [c]})
    with pytest.raises(AnalysisError):
        end_mask_similarity({"a": [a], "b": []})


def test_init_vs_end():
    s0 = snap({"x": [1, 1, 0, 0]}, step=0, kind="init")
    assert init_vs_end([s0]) == 1.0
    s1 = snap({"x": [0, 1, 1, 0]}, step=50)
    assert init_vs_end([s1, s0]) == pytest.approx(1 / 3)


def test_always_kept_fraction():
    a = {"x": np.array([1, 1, 0, 0, 0, 0], bool)}
    b = {"x": np.array([0, 0, 1, 1, 0, 0], bool)}
    c = {"x": np.array([1, 0, 0, 1, 0, 0], bool)}
    assert always_kept_fraction([a]) == (1.0, 1.0)
    kept, removed = always_kept_fraction([a, b])
    assert kept == 0.0 and removed == 0.5
    # recount: only position 0 is active in both; positions 2, 4, 5 are inactive in both
    kept, removed = always_kept_fraction([a, c])
    assert kept == 1 / 2 and removed == 3 / 4
    with pytest.raises(AnalysisError, match="density"):
        always_kept_fraction([a, {"x": np.ones(6, bool)}])


# -- ITOP curve ---------------------------------------------------------------------------


def test_itop_curve():
    s = [snap({"x": [1, 0, 0, 0]}, 0, "init"), snap({"x": [0, 1, 0, 0]}, 10),
         snap({"x": [1, 0, 0, 0]}, 20), snap({"x": [1, 0, 0, 0]}, 20, "final")]
    curve = itop_curve(s)
    assert curve == [(0, 0.25), (10, 0.5), (20, 0.5)]
    assert is_monotone(curve)
    assert len(itop_curve(s, include_final=True)) == 4
    flat = itop_curve([snap({"x": [1, 0]}, 0, "init"), snap({"x": [1, 0]}, 99, "final")])
    assert flat == [(0, 0.5)]
    assert not is_monotone([(0, 0.5), (1, 0.4)])


# -- ranks ----------------------------------------------------------------------------------


HAND = {
    "s1": {"A": 0.9, "B": 0.8, "C": 0.7},
    "s2": {"A": 0.7, "B": 0.9, "C": 0.8},
    "s3": {"A": 0.8, "B": 0.8, "C": 0.6},
    "s4": {"A": 0.9, "B": 0.6, "C": 0.9},
}


def test_hand_rank_fixture():
    t = average_ranks(HAND)
    np.testing.assert_array_equal(t.ranks, [[1, 2, 3], [3, 1, 2], [1.5, 1.5, 3], [1.5, 3, 1.5]])
    assert t.average == {"A": 1.75, "B": 1.875, "C": 2.375}
    assert t.cd == pytest.approx(2.343 * math.sqrt(0.5), rel=1e-15)
    assert t.groups == [["A", "B", "C"]]
    np.testing.assert_array_equal(t.ranks.sum(axis=1), 6.0)
    rep = t.report()
    assert rep["n_settings"] == 4 and rep["critical_distance"] == t.cd
    assert t.to_csv().splitlines()[-1] == "average,1.75,1.875,2.375"


def test_lower_is_better():
    t = average_ranks(HAND, higher_is_better=False)
    assert t.average == {"A": 2.25, "B": 2.125, "C": 1.625}


def test_all_tied():
    t = average_ranks({s: {"a": 1.0, "b": 1.0, "c": 1.0, "d": 1.0} for s in "xyz"})
    assert set(t.average.values()) == {2.5}
    assert t.groups == [["a", "b", "c", "d"]]


def test_missing_cells_listed():
    bad = {"s1": {"A": 1.0, "B": 2.0}, "s2": {"A": 1.0}, "s3": {"B": 1.0}}
    with pytest.raises(AnalysisError, match="s2/B, s3/A"):
        average_ranks(bad)


@given(st.lists(st.lists(st.integers(0, 4), min_size=5, max_size=5), min_size=1, max_size=8))
def test_rank_sums(rows):
    results = {f"s{i}": {f"m{j}": float(v) for j, v in enumerate(r)} for i, r in enumerate(rows)}
    t = average_ranks(results)
    np.testing.assert_allclose(t.ranks.sum(axis=1), 15.0)
    assert sum(t.average.values()) == pytest.approx(15.0)


def test_nemenyi_q_table_against_studentized_range():
    for k, q in NEMENYI_Q_05.items():
        exact = studentized_range.ppf(0.95, k, 1e6) / math.sqrt(2)
        assert abs(exact - q) < 1e-3, k
    assert nemenyi_cd(2, 9) == pytest.approx(1.960 / 3)
    with pytest.raises(AnalysisError):
        nemenyi_cd(11, 4)
    with pytest.raises(AnalysisError):
        nemenyi_cd(3, 4, alpha=0.1)


def test_cd_groups():
    avg = {"a": 1.0, "b": 1.5, "c": 2.6, "d": 3.0}
    assert cd_groups(avg, 1.0) == [["a", "b"], ["c", "d"]]
    assert cd_groups(avg, 1.2) == [["a", "b"], ["b", "c"], ["c", "d"]]
    assert cd_groups(avg, 0.1) == [["a"], ["b"], ["c"], ["d"]]


def test_read_results_csv(tmp_path):
    p = tmp_path / "r.csv"
    rows = ["setting,method,score"] + [f"{s},{m},{v}" for s, row in HAND.items() for m, v in row.items()]
    p.write_text("\n".join(rows) + "\n")
    assert read_results_csv(p) == HAND
    p.write_text("a,b\n1,2\n")
    with pytest.raises(AnalysisError, match="expected columns"):
        read_results_csv(p)
    p.write_text("setting,method,score\nx,A,oops\n")
    with pytest.raises(AnalysisError, match=":2:"):
        read_results_csv(p)
    p.write_text("setting,method,score\nx,A,1\nx,A,2\n")
    with pytest.raises(AnalysisError, match="duplicate"):
        read_results_csv(p)
