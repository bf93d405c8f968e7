import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st
from hypothesis.extra.numpy import arrays

from protosal import metrics as M
from protosal.metrics import MetricConfig, MetricUndefined


# ---------------------------------------------------------------------------
# naive references, written loop by loop

def ref_judd(P, Q):
    P, Q = P.ravel(), Q.ravel().astype(bool)
    pos, neg = [p for p, q in zip(P, Q) if q], [p for p, q in zip(P, Q) if not q]
    pts = [(0.0, 0.0)]
    for t in sorted(set(pos), reverse=True):
        tp = sum(1 for p in pos if p >= t) / len(pos)
        fp = sum(1 for p in neg if p >= t) / len(neg)
        pts.append((fp, tp))
    pts.append((1.0, 1.0))
    return sum((b[0] - a[0]) * (a[1] + b[1]) / 2 for a, b in zip(pts, pts[1:]))


def ref_nss(P, Q):
    vals = list(P.ravel())
    mu = sum(vals) / len(vals)
    sd = math.sqrt(sum((v - mu) ** 2 for v in vals) / len(vals))
    fix = [v for v, q in zip(vals, Q.ravel()) if q]
    return sum((v - mu) / sd for v in fix) / len(fix)


def ref_cc(P, Q):
    p, q = list(P.ravel()), list(Q.ravel())
    mp, mq = sum(p) / len(p), sum(q) / len(q)
    cov = sum((a - mp) * (b - mq) for a, b in zip(p, q))
    return cov / math.sqrt(sum((a - mp) ** 2 for a in p) * sum((b - mq) ** 2 for b in q))


def ref_kl(P, Q, eps):
    return sum(q * math.log((q + eps) / (p + eps)) for p, q in zip(P.ravel(), Q.ravel()))


def ref_sim(P, Q):
    return sum(min(p, q) for p, q in zip(P.ravel(), Q.ravel()))


def ref_ig(P, Q, B, eps):
    terms = [math.log2(eps + p) - math.log2(eps + b) for p, b, q in zip(P.ravel(), B.ravel(), Q.ravel()) if q]
    return sum(terms) / len(terms)


def _dist(rng):
    v = rng.random((8, 8))
    return v / v.sum()


@pytest.mark.parametrize("seed", range(10))
def test_against_naive_references(seed):
    rng = np.random.default_rng(seed)
    P, Pd, Qd = rng.random((8, 8)), _dist(rng), _dist(rng)
    Q = M.binarize_gt(rng.random((8, 8)), 0.2)
    B = np.full((8, 8), 1 / 64)
    assert abs(M.auc_judd(P, Q) - ref_judd(P, Q)) < 1e-9
    assert abs(M.nss(P, Q) - ref_nss(P, Q)) < 1e-9
    assert abs(M.cc(Pd, Qd) - ref_cc(Pd, Qd)) < 1e-9
    assert abs(M.kl(Pd, Qd, 2.2e-16) - ref_kl(Pd, Qd, 2.2e-16)) < 1e-9
    assert abs(M.sim(Pd, Qd) - ref_sim(Pd, Qd)) < 1e-9
    assert abs(M.infogain(Pd, Q, B) - ref_ig(Pd, Q, B, 2.2e-16)) < 1e-9
    assert abs(M.mae(P, Qd) - np.mean([abs(a - b) for a, b in zip(P.ravel(), Qd.ravel())])) < 1e-9
    assert abs(M.mse(P, Qd) - np.mean([(a - b) ** 2 for a, b in zip(P.ravel(), Qd.ravel())])) < 1e-9


def test_judd_with_ties_matches_reference():
    rng = np.random.default_rng(3)
    P = rng.integers(0, 4, (8, 8)) / 3
    Q = M.binarize_gt(rng.random((8, 8)), 0.3)
    assert abs(M.auc_judd(P, Q) - ref_judd(P, Q)) < 1e-12


# ---------------------------------------------------------------------------
# hand examples

def test_normalize_examples():
    np.testing.assert_array_equal(M.normalize_map(np.array([[-1.0, 1.0]])), [[0.5, 0.5]])
    np.testing.assert_array_equal(M.normalize_map(np.array([[1.0, 3.0]]), "distribution"), [[0.25, 0.75]])
    np.testing.assert_array_equal(M.normalize_map(np.array([[0.0, 2.0]])), [[0.0, 1.0]])
    np.testing.assert_array_equal(M.normalize_map(np.array([[-3.0, 1.0]]), signed_mode="positive"), [[0.0, 1.0]])
    with pytest.raises(MetricUndefined):
        M.normalize_map(np.zeros((2, 2)), "distribution")
    with pytest.raises(ValueError):
        M.normalize_map(np.array([[np.nan, 1.0]]))


def test_binarize_examples():
    g = np.array([[4, 3], [2, 1]])
    np.testing.assert_array_equal(M.binarize_gt(g, 0.25), [[1, 0], [0, 0]])
    np.testing.assert_array_equal(M.binarize_gt(g, 0.5), [[1, 1], [0, 0]])
    np.testing.assert_array_equal(M.binarize_gt(np.ones((2, 2)), 0.5), [[1, 1], [0, 0]])
    assert M.binarize_gt(np.ones((5, 5)), 0.2).sum() == 5
    with pytest.raises(ValueError):
        M.binarize_gt(g, 1.0)


def test_judd_examples():
    rng = np.random.default_rng(0)
    Q = M.binarize_gt(rng.random((10, 10)))
    assert M.auc_judd(Q.astype(float), Q) == 1.0
    assert M.auc_judd(np.full((10, 10), 0.5), Q) == 0.5
    with pytest.raises(MetricUndefined):
        M.auc_judd(np.ones((2, 2)), np.zeros((2, 2)))


def test_judd_monotone_invariance():
    rng = np.random.default_rng(1)
    P, Q = rng.random((12, 12)), M.binarize_gt(rng.random((12, 12)))
    assert M.auc_judd(P, Q) == pytest.approx(M.auc_judd(P ** 3 * 7 + 2, Q), abs=1e-15)


def test_borji_examples():
    rng = np.random.default_rng(0)
    Q = M.binarize_gt(rng.random((16, 16)))
    P = Q.astype(float)
    assert 0.99 <= M.auc_borji(P, Q, rng=np.random.default_rng(1)) <= 1.0
    const = M.auc_borji(np.full((16, 16), 0.5), Q, rng=np.random.default_rng(1))
    assert abs(const - 0.5) <= 0.02
    P2 = rng.random((16, 16))
    assert M.auc_borji(P2, Q, rng=np.random.default_rng(5)) == M.auc_borji(P2, Q, rng=np.random.default_rng(5))


def test_shuffled_penalises_centre_bias():
    h = 32
    r = np.arange(h) - (h - 1) / 2
    blob = np.exp(-(r[:, None] ** 2 + r[None, :] ** 2) / (2 * 6.0 ** 2))
    Q = M.binarize_gt(blob, 0.2)
    rng = np.random.default_rng(4)
    P = np.clip(blob + 0.3 * rng.random(blob.shape), 0, None)
    P = (P - P.min()) / (P.max() - P.min())
    assert M.auc_shuffled(P, Q, rng=np.random.default_rng(0)) < M.auc_judd(P, Q)
    const = M.auc_shuffled(np.full(Q.shape, 0.5), Q, rng=np.random.default_rng(0))
    assert abs(const - 0.5) <= 0.02
    a = M.auc_shuffled(P, Q, rng=np.random.default_rng(2))
    assert a == M.auc_shuffled(P, Q, rng=np.random.default_rng(2))


def test_shuffled_crossimage():
    rng = np.random.default_rng(0)
    Q = M.binarize_gt(rng.random((8, 8)))
    cfg = MetricConfig(sauc_mode="crossimage")
    with pytest.raises(MetricUndefined):
        M.auc_shuffled(rng.random((8, 8)), Q, cfg)
    others = [M.binarize_gt(rng.random((8, 8))) for _ in range(3)]
    assert 0 <= M.auc_shuffled(Q.astype(float), Q, cfg, np.random.default_rng(0), others) <= 1


def test_nss_examples():
    P = np.array([[2.0, 0.0], [0.0, 0.0]])
    assert M.nss(P, np.array([[1, 0], [0, 0]])) == pytest.approx(1.5 / math.sqrt(0.75), abs=1e-12)
    assert M.nss(P, np.ones((2, 2))) == pytest.approx(0.0, abs=1e-12)
    assert M.nss(P, np.array([[0, 1], [0, 0]])) < 0
    with pytest.raises(MetricUndefined):
        M.nss(np.ones((2, 2)), np.eye(2))
    rng = np.random.default_rng(0)
    P, Q = rng.random((8, 8)), M.binarize_gt(rng.random((8, 8)))
    assert M.nss(3 * P + 5, Q) == pytest.approx(M.nss(P, Q), abs=1e-12)


def test_infogain_examples():
    B = np.full((2, 2), 0.25)
    Q = np.array([[1, 0], [0, 0]])
    assert M.infogain(B, Q, B) == 0.0
    P = np.array([[0.7, 0.1], [0.1, 0.1]])
    assert M.infogain(P, Q, B) == pytest.approx(math.log2(0.7 / 0.25), abs=1e-12)
    assert M.infogain(P, Q, B) > 0


def test_mae_mse_examples():
    assert M.mae(np.ones((2, 2)), np.ones((2, 2))) == 0 == M.mse(np.ones((2, 2)), np.ones((2, 2)))
    assert M.mae([[1, 0]], [[0, 0]]) == 0.5 == M.mse([[1, 0]], [[0, 0]])
    assert M.mae([[1, 1]], [[0, 0]]) == 1 == M.mse([[1, 1]], [[0, 0]])
    assert M.mae([[0, 1]], [[1, 0]], signed=True) == 0.0
    with pytest.raises(ValueError):
        M.mse(np.ones((2, 2)), np.ones((2, 3)))


def test_sim_cc_kl_examples():
    assert M.sim([[0.5, 0.5]], [[0.25, 0.75]]) == pytest.approx(0.75)
    assert M.sim([[1.0, 0.0]], [[0.0, 1.0]]) == 0.0
    with pytest.raises(ValueError):
        M.sim([[0.5, 0.6]], [[0.5, 0.5]])
    rng = np.random.default_rng(0)
    P = rng.random((6, 6))
    assert M.cc(P, P) == pytest.approx(1.0, abs=1e-12)
    assert M.cc(P, P.max() - P) == pytest.approx(-1.0, abs=1e-12)
    with pytest.raises(MetricUndefined):
        M.cc(np.ones((2, 2)), P[:2, :2])
    assert M.kl([[0.5, 0.5]], [[0.9, 0.1]]) == pytest.approx(0.9 * math.log(1.8) + 0.1 * math.log(0.2), abs=1e-12)
    assert abs(M.kl([[0.5, 0.5]], [[0.5, 0.5]])) < 1e-12
    assert M.kl([[1.0, 0.0]], [[0.0, 1.0]]) > 30
    a, b = np.array([[0.5, 0.5]]), np.array([[0.9, 0.1]])
    assert M.sim(a, b) == M.sim(b, a)
    assert M.kl(a, b) != pytest.approx(M.kl(b, a))


def test_evaluate_pair_bundle():
    rng = np.random.default_rng(0)
    m = rng.random((12, 12))
    res = {r.metric_id: r for r in M.evaluate_pair(m, m)}
    assert list(res) == list(M.METRICS)
    for k in ("SIM", "CC", "jAUC"):
        assert abs(res[k].value - 1) < 1e-12
    for k in ("KL", "MAE", "MSE"):
        assert abs(res[k].value) < 1e-12
    assert all(r.orientation == M.ORIENTATION[r.metric_id] for r in res.values())
    assert {k for k, v in M.ORIENTATION.items() if v == M.DISSIMILARITY} == {"MAE", "MSE", "KL"}


def test_evaluate_pair_constant_saliency_marks_missing():
    rng = np.random.default_rng(1)
    res = {r.metric_id: r for r in M.evaluate_pair(np.ones((8, 8)), rng.random((8, 8)))}
    assert res["NSS"].missing and res["CC"].missing
    assert math.isnan(res["NSS"].value)
    assert [k for k, r in res.items() if r.missing] == ["NSS", "CC"]
    assert res["jAUC"].value == 0.5


def test_evaluate_pair_deterministic_per_key():
    rng = np.random.default_rng(2)
    a, b = rng.random((10, 10)), rng.random((10, 10))
    one = [r.value for r in M.evaluate_pair(a, b, key=("img", "saliency", 3))]
    two = [r.value for r in M.evaluate_pair(a, b, key=("img", "saliency", 3))]
    assert one == two


@settings(max_examples=40, deadline=None)
@given(arrays(np.float64, (6, 6), elements=st.floats(0, 1)))
def test_identity_property(m):
    if m.max() == m.min() or m.sum() == 0:
        return
    res = {r.metric_id: r.value for r in M.evaluate_pair(m, m)}
    assert abs(res["SIM"] - 1) < 1e-6
    b = M.binarize_gt(m, 0.2).astype(bool)
    if m[b].min() > m[~b].max():
        # jAUC reaches 1 only when the binarisation cut separates values strictly
        assert abs(res["jAUC"] - 1) < 1e-6
    assert abs(res["KL"]) < 1e-6 and abs(res["MSE"]) < 1e-6 and abs(res["MAE"]) < 1e-6
    assert abs(res["CC"] - 1) < 1e-6


@settings(max_examples=40, deadline=None)
@given(arrays(np.float64, (5, 5), elements=st.floats(0, 1)), arrays(np.float64, (5, 5), elements=st.floats(0, 1)))
def test_ranges(p, q):
    if p.sum() == 0 or q.sum() == 0:
        return
    P, Qd = p / p.sum(), q / q.sum()
    assert -1e-12 <= M.sim(P, Qd) <= 1 + 1e-12
    Q = M.binarize_gt(q, 0.2)
    assert 0 <= M.auc_judd(p, Q) <= 1
