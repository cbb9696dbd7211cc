import json
import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st
from hypothesis.extra.numpy import arrays
from scipy.integrate import trapezoid

from qvcbi.metrics import (
    ClassMetrics, MetricsReport, binary_cross_entropy, confusion_binary, cross_entropy, evaluate_node,
    mann_whitney_pairs, one_vs_rest, read_class_table, read_confusion, roc_auc, write_class_table,
    write_confusion, write_prior_table, write_report_json, write_roc,
)
from oracles import pairwise_auc


def test_auc_perfect_separation():
    assert roc_auc([0.9, 0.8, 0.1, 0.2], [1, 1, 0, 0]).auc == 1.0


def test_auc_pairwise_example():
    assert roc_auc([0.1, 0.4, 0.35, 0.8], [0, 0, 1, 1]).auc == 0.75


def test_auc_all_ties():
    assert roc_auc(np.full(7, 0.3), [0, 1, 0, 1, 1, 0, 0]).auc == 0.5


@pytest.mark.parametrize("labels", [[1, 1, 1], [0, 0, 0]])
def test_auc_single_class_error(labels):
    with pytest.raises(ValueError, match="positive and one negative"):
        roc_auc([0.1, 0.2, 0.3], labels)


def test_auc_bad_inputs():
    with pytest.raises(ValueError, match="differ in length"):
        roc_auc([0.1, 0.2], [0, 1, 1])
    with pytest.raises(ValueError, match="0 or 1"):
        roc_auc([0.1, 0.2], [0, 2])


def test_auc_matches_pairwise_oracle():
    rng = np.random.default_rng(0)
    for _ in range(100):
        n = int(rng.integers(2, 200))
        s = np.round(rng.normal(size=n), int(rng.integers(1, 4)))  # rounding forces ties
        y = rng.integers(0, 2, n)
        y[0], y[1] = 0, 1
        ref = pairwise_auc(s, y)
        assert abs(roc_auc(s, y).auc - ref) <= 1e-12
        assert abs(mann_whitney_pairs(s, y) - ref) <= 1e-12


# lattice scores so exp and affine maps stay strictly increasing in floating point
_scores = arrays(np.int64, st.integers(4, 60), elements=st.integers(-50, 50)).map(lambda a: a / 10.0)


@settings(max_examples=60, deadline=None)
@given(s=_scores, seed=st.integers(0, 2**32 - 1))
def test_auc_properties(s, seed):
    rng = np.random.default_rng(seed)
    y = rng.integers(0, 2, s.size)
    y[0], y[-1] = 0, 1
    a = roc_auc(s, y)
    assert 0.0 <= a.auc <= 1.0
    assert roc_auc(-s, y).auc == pytest.approx(1.0 - a.auc, abs=1e-12)
    # strictly increasing transforms
    assert roc_auc(np.exp(s), y).auc == pytest.approx(a.auc, abs=1e-12)
    assert roc_auc(3.0 * s + 7.0, y).auc == pytest.approx(a.auc, abs=1e-12)
    # trapezoid under the emitted curve
    assert trapezoid(a.tpr, a.fpr) == pytest.approx(a.auc, abs=1e-9)
    assert a.fpr[0] == 0.0 and a.tpr[0] == 0.0 and a.fpr[-1] == 1.0 and a.tpr[-1] == 1.0
    assert np.all(np.diff(a.fpr) >= 0) and np.all(np.diff(a.tpr) >= 0)


def test_tpr_at_interpolates():
    r = roc_auc([0.9, 0.8, 0.7, 0.6], [1, 0, 1, 0])
    # curve: (0,0) (0,.5) (.5,.5) (.5,1) (1,1)
    assert r.tpr_at(0.25) == 0.5
    assert r.tpr_at(0.75) == 1.0


def test_one_vs_rest_example():
    q = np.array([[0.1, 0.9], [0.8, 0.2]])
    sc, lab, nex = one_vs_rest(q, [0, 1], [1, 0], 1)
    np.testing.assert_array_equal(sc, [0.9, 0.2])
    np.testing.assert_array_equal(lab, [1, 0])
    assert nex == 0
    assert roc_auc(sc, lab).auc == 1.0


def test_one_vs_rest_pruned_point_excluded():
    q = np.array([[0.1, 0.9], [0.8, 0.2], [np.nan, np.nan]])
    sc, lab, nex = one_vs_rest(q, [0, 1, 2], [1, 0, 1], 1)
    assert nex == 1 and sc.size == 2
    sc, lab, nex = one_vs_rest(q[:2], [0, 1, -1], [1, 0, 1], 1)
    assert nex == 1
    sc, lab, nex = one_vs_rest(q[:2], [0, 1], [1, 0], 1, valid=np.array([True, False]))
    assert nex == 1 and sc.tolist() == [0.9]


def test_one_vs_rest_single_class_propagates():
    q = np.array([[0.1, 0.9], [0.8, 0.2]])
    sc, lab, _ = one_vs_rest(q, [0, 1], [1, 1], 1)
    with pytest.raises(ValueError):
        roc_auc(sc, lab)


def test_cross_entropy_examples():
    assert cross_entropy(np.eye(3), [0, 1, 2]) == 0.0
    assert cross_entropy(np.full((5, 4), 0.25), [0, 1, 2, 3, 3]) == pytest.approx(math.log(4), abs=1e-15)
    assert cross_entropy([[0.7, 0.3]], [0]) == pytest.approx(-math.log(0.7), abs=1e-15)
    assert round(cross_entropy([[0.7, 0.3]], [0]), 4) == 0.3567
    # clipping keeps a confidently wrong prediction finite
    assert cross_entropy([[1.0, 0.0]], [1]) == pytest.approx(-math.log(1e-12))


def test_cross_entropy_errors():
    with pytest.raises(ValueError, match="empty"):
        cross_entropy(np.zeros((0, 2)), [])
    with pytest.raises(ValueError, match="range"):
        cross_entropy([[0.5, 0.5]], [2])


def test_binary_cross_entropy():
    assert binary_cross_entropy([0.3], [1]) == pytest.approx(-math.log(0.3))


def test_confusion_examples():
    y = [1, 1, 0, 0, 0]
    np.testing.assert_array_equal(confusion_binary([0.9, 0.6, 0.1, 0.4, 0.2], y), [[1, 0], [0, 1]])
    np.testing.assert_array_equal(confusion_binary([0.1, 0.4, 0.9, 0.6, 0.8], y), [[0, 1], [1, 0]])
    # threshold is inclusive
    np.testing.assert_array_equal(confusion_binary([0.5, 0.5, 0.2, 0.2, 0.2], y), [[1, 0], [0, 1]])
    np.testing.assert_array_equal(confusion_binary([0.5, 0.5, 0.2, 0.2, 0.2], y, 0.6), [[0, 1], [0, 1]])


def test_confusion_table_layout_anchor():
    # 766 damaged / 116548 undamaged buildings; rows are normalised by true class
    npos, nneg = 766, 116548
    y = np.r_[np.ones(npos), np.zeros(nneg)]
    s = np.r_[np.ones(npos - 1), 0.0, np.ones(4149), np.zeros(nneg - 4149)]
    c = np.round(confusion_binary(s, y), 4)
    np.testing.assert_array_equal(c, [[0.9987, 0.0013], [0.0356, 0.9644]])
    np.testing.assert_allclose(confusion_binary(s, y).sum(axis=1), 1.0)


def _toy_eval():
    rng = np.random.default_rng(3)
    L = 300
    cls = rng.integers(0, 4, L)
    post = np.full((L, 4), 0.1)
    post[np.arange(L), cls] += rng.uniform(0.2, 0.8, L)
    post /= post.sum(axis=1, keepdims=True)
    prior = np.full((L, 4), 0.25)
    return post, np.arange(L), cls, prior


def test_evaluate_node_report():
    post, cells, cls, prior = _toy_eval()
    rep = evaluate_node(post, cells, cls, "BD", prior=prior, keep_roc=True)
    assert [c.cls for c in rep.classes] == [1, 2, 3]
    for c in rep.classes:
        assert c.auc_posterior > 0.9 and c.auc_prior == 0.5
        assert c.n_pos + c.n_neg == 300
    assert rep.damaged_auc_prior == 0.5 and rep.damaged_auc_posterior > 0.9
    assert rep.n_points == 300 and rep.n_excluded == 0
    assert set(rep.roc) == {1, 2, 3}
    valid = np.ones(300, dtype=bool)
    valid[:10] = False
    assert evaluate_node(post, cells, cls, valid=valid).n_excluded == 10


def test_tables_round_trip(tmp_path):
    post, cells, cls, prior = _toy_eval()
    reps = [evaluate_node(post, cells, cls, "BD", prior=prior, keep_roc=True)]
    reps.append(MetricsReport("LS", [ClassMetrics(1, 0.8, None, 0.2, 5, 7)], [[1, 0], [0, 1]], 0.5, 0.1, 12, 0))
    write_class_table(tmp_path / "c.csv", reps)
    rows = read_class_table(tmp_path / "c.csv")
    flat = [(r.node, c) for r in reps for c in r.classes]
    assert len(rows) == len(flat)
    for row, (node, c) in zip(rows, flat):
        assert row == {"node": node, "class": c.cls, "auc_posterior": c.auc_posterior, "auc_prior": c.auc_prior,
                       "cross_entropy": c.cross_entropy, "n_pos": c.n_pos, "n_neg": c.n_neg}
    write_confusion(tmp_path / "k.csv", reps[0])
    np.testing.assert_array_equal(read_confusion(tmp_path / "k.csv"), reps[0].confusion)
    write_prior_table(tmp_path / "p.csv", reps)
    assert (tmp_path / "p.csv").read_text().splitlines()[2] == "LS,,"
    write_report_json(tmp_path / "m.json", reps)
    assert json.loads((tmp_path / "m.json").read_text())[0]["node"] == "BD"
    r = reps[0].roc[1]
    write_roc(tmp_path / "r.csv", r)
    arr = np.genfromtxt(tmp_path / "r.csv", delimiter=",", skip_header=1)
    np.testing.assert_array_equal(arr[:, 1], r.fpr)
    np.testing.assert_array_equal(arr[:, 2], r.tpr)
