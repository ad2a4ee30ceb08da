import numpy as np
import pytest

from hgsc.evaluation import (EvalError, ari, complexity_measure,
                             concat_representation, evaluate, f1_scores,
                             kmeans, kmeans_cluster, linear_probe, nmi,
                             silhouette)


# ------------------------------------------------------------------ concat

def test_concat_zero_left_half():
    Z = np.zeros((4, 3))
    Zt = np.ones((4, 2))
    X = concat_representation(Z, Zt)
    assert X.shape == (4, 5)
    assert np.abs(X[:, :3]).max() == 0.0


def test_concat_duplicated_halves():
    Z = np.random.default_rng(0).standard_normal((5, 2))
    X = concat_representation(Z, Z)
    assert np.array_equal(X[:, :2], X[:, 2:])


def test_concat_slice_oracle():
    rng = np.random.default_rng(1)
    Z, Zt = rng.standard_normal((6, 3)), rng.standard_normal((6, 4))
    X = concat_representation(Z, Zt)
    for i in range(6):
        assert np.array_equal(X[i], np.concatenate([Z[i], Zt[i]]))


def test_concat_mismatch():
    with pytest.raises(EvalError):
        concat_representation(np.zeros((3, 2)), np.zeros((4, 2)))


# ---------------------------------------------------------------------- f1

def brute_force_f1(y_true, y_pred, c):
    """Independent confusion-matrix oracle with explicit loops."""
    per_class = []
    for k in range(c):
        tp = sum(1 for t, p in zip(y_true, y_pred) if t == k and p == k)
        fp = sum(1 for t, p in zip(y_true, y_pred) if t != k and p == k)
        fn = sum(1 for t, p in zip(y_true, y_pred) if t == k and p != k)
        prec = tp / (tp + fp) if tp + fp else 0.0
        rec = tp / (tp + fn) if tp + fn else 0.0
        per_class.append(2 * prec * rec / (prec + rec) if prec + rec else 0.0)
    acc = sum(1 for t, p in zip(y_true, y_pred) if t == p) / len(y_true)
    return sum(per_class) / c, acc


def test_f1_perfect_predictions():
    y = np.array([0, 1, 2, 1, 0])
    macro, micro = f1_scores(y, y, 3)
    assert macro == micro == 1.0


def test_f1_single_class_predictions_balanced():
    y_true = np.array([0, 0, 1, 1])
    y_pred = np.zeros(4, dtype=int)
    macro, micro = f1_scores(y_true, y_pred, 2)
    assert micro == pytest.approx(0.5)
    assert macro == pytest.approx((2 / 3) / 2)


def test_f1_matches_brute_force():
    rng = np.random.default_rng(2)
    for _ in range(100):
        n = int(rng.integers(2, 12))
        c = int(rng.integers(2, 5))
        y_true = rng.integers(0, c, size=n)
        y_pred = rng.integers(0, c, size=n)
        macro, micro = f1_scores(y_true, y_pred, c)
        o_macro, o_micro = brute_force_f1(y_true, y_pred, c)
        assert macro == pytest.approx(o_macro, abs=1e-12)
        assert micro == pytest.approx(o_micro, abs=1e-12)


# -------------------------------------------------------------------- probe

def test_linear_probe_separable():
    rng = np.random.default_rng(3)
    n = 60
    labels = np.repeat([0, 1], n // 2)
    X = np.where(labels[:, None] == 0, -3.0, 3.0) + 0.3 * rng.standard_normal((n, 4))
    idx = rng.permutation(n)
    train, test = idx[:30], idx[30:]
    (macro, _), (micro, _) = linear_probe(X, labels, train, test)
    assert macro == 1.0
    assert micro == 1.0


def test_linear_probe_missing_class():
    X = np.random.default_rng(4).standard_normal((10, 3))
    labels = np.array([0] * 5 + [1] * 5)
    with pytest.raises(EvalError, match="class 1"):
        linear_probe(X, labels, np.arange(5), np.arange(5, 10))


def test_linear_probe_reports_spread():
    rng = np.random.default_rng(5)
    X = rng.standard_normal((40, 6))
    labels = rng.integers(0, 2, size=40)
    labels[:2] = [0, 1]
    (ma, ma_s), (mi, mi_s) = linear_probe(X, labels, np.arange(20), np.arange(20, 40))
    assert 0.0 <= ma <= 1.0 and 0.0 <= mi <= 1.0
    assert ma_s >= 0.0 and mi_s >= 0.0


# ------------------------------------------------------------------- kmeans

def test_kmeans_trivial_clusters():
    rng = np.random.default_rng(6)
    centers = np.array([[0.0, 0.0], [20.0, 0.0], [0.0, 20.0]])
    labels = np.repeat(np.arange(3), 10)
    X = centers[labels] + 0.2 * rng.standard_normal((30, 2))
    v_nmi, v_ari, assign = kmeans_cluster(X, labels, 3, seed=0)
    assert v_nmi == pytest.approx(1.0)
    assert v_ari == pytest.approx(1.0)


def test_kmeans_six_point_instance_matches_exhaustive():
    X = np.array([[0.0], [0.2], [0.4], [10.0], [10.2], [10.4]])
    assign, inertia = kmeans(X, 2, restarts=10, seed=1)

    # oracle: brute force over all assignments into 2 nonempty clusters
    best = None
    for mask in range(1, 2**6 - 1):
        lab = np.array([(mask >> i) & 1 for i in range(6)])
        cost = 0.0
        for j in (0, 1):
            pts = X[lab == j]
            if len(pts):
                cost += float(((pts - pts.mean(axis=0)) ** 2).sum())
        if best is None or cost < best[1]:
            best = (lab, cost)
    assert inertia == pytest.approx(best[1], abs=1e-12)
    assert nmi(assign, best[0]) == pytest.approx(1.0)


def test_kmeans_too_few_points():
    with pytest.raises(EvalError):
        kmeans(np.zeros((2, 1)), 3)


def test_kmeans_deterministic():
    rng = np.random.default_rng(7)
    X = rng.standard_normal((40, 3))
    a1, i1 = kmeans(X, 4, seed=9)
    a2, i2 = kmeans(X, 4, seed=9)
    assert np.array_equal(a1, a2) and i1 == i2


# ----------------------------------------------------------------- nmi/ari

def brute_force_nmi(a, b):
    """Dictionary-based mutual information, arithmetic normalization."""
    from collections import Counter
    from math import log
    n = len(a)
    ca, cb, cab = Counter(a), Counter(b), Counter(zip(a, b))
    if len(ca) == len(cb) == 1:
        return 1.0
    mi = sum(cnt / n * log(n * cnt / (ca[x] * cb[y]))
             for (x, y), cnt in cab.items())
    ha = -sum(v / n * log(v / n) for v in ca.values())
    hb = -sum(v / n * log(v / n) for v in cb.values())
    if (ha + hb) / 2 <= 0 or mi <= 0:
        return 0.0
    return min(mi / ((ha + hb) / 2), 1.0)


def brute_force_ari(a, b):
    """Pair-counting adjusted Rand oracle."""
    n = len(a)
    ss = sd = ds = dd = 0
    for i in range(n):
        for j in range(i + 1, n):
            sa, sb = a[i] == a[j], b[i] == b[j]
            ss += sa and sb
            sd += sa and not sb
            ds += (not sa) and sb
            dd += (not sa) and (not sb)
    num = 2.0 * (ss * dd - sd * ds)
    den = (ss + sd) * (sd + dd) + (ss + ds) * (ds + dd)
    return 1.0 if den == 0 else num / den


def test_nmi_identical_partitions():
    a = np.array([0, 0, 1, 1, 2, 2])
    assert nmi(a, a) == pytest.approx(1.0)
    perm = np.array([2, 2, 0, 0, 1, 1])
    assert nmi(a, perm) == pytest.approx(1.0)


def test_nmi_single_cluster_zero():
    labels = np.array([0, 1, 0, 1])
    assert nmi(labels, np.zeros(4, dtype=int)) == 0.0


def test_nmi_matches_brute_force():
    rng = np.random.default_rng(8)
    for _ in range(100):
        n = int(rng.integers(2, 12))
        a = rng.integers(0, 3, size=n)
        b = rng.integers(0, 3, size=n)
        assert nmi(a, b) == pytest.approx(brute_force_nmi(a.tolist(), b.tolist()),
                                          abs=1e-12)


def test_ari_matches_brute_force():
    rng = np.random.default_rng(9)
    for _ in range(100):
        n = int(rng.integers(2, 12))
        a = rng.integers(0, 3, size=n)
        b = rng.integers(0, 3, size=n)
        assert ari(a, b) == pytest.approx(brute_force_ari(a.tolist(), b.tolist()),
                                          abs=1e-12)


def test_ari_permutation_invariant():
    rng = np.random.default_rng(10)
    a = rng.integers(0, 3, size=20)
    b = rng.integers(0, 3, size=20)
    remap = np.array([2, 0, 1])
    assert ari(a, b) == pytest.approx(ari(remap[a], b))
    assert nmi(a, b) == pytest.approx(nmi(remap[a], b))


# --------------------------------------------------------------- silhouette

def test_silhouette_two_tight_pairs():
    X = np.array([[0.0, 0.0], [0.0, 0.1], [10.0, 0.0], [10.0, 0.1]])
    assign = np.array([0, 0, 1, 1])
    s = silhouette(X, assign)
    assert s > 0.9
    # hand value for point 0: a = 0.1, b = mean of the two cross distances
    b0 = (10.0 + np.hypot(10.0, 0.1)) / 2
    expected0 = (b0 - 0.1) / b0
    D = np.sqrt(((X[:, None, :] - X[None, :, :]) ** 2).sum(-1))
    a0 = D[0, 1]
    assert (b0 - a0) / max(a0, b0) == pytest.approx(expected0)


def test_silhouette_identical_points_zero():
    X = np.ones((6, 2))
    assign = np.array([0, 0, 0, 1, 1, 1])
    assert silhouette(X, assign) == 0.0


def test_silhouette_single_cluster_error():
    with pytest.raises(EvalError):
        silhouette(np.random.default_rng(0).standard_normal((5, 2)), np.zeros(5))


def brute_force_silhouette(X, assign):
    n = X.shape[0]
    vals = []
    for i in range(n):
        own = [j for j in range(n) if assign[j] == assign[i] and j != i]
        if not own:
            vals.append(0.0)
            continue
        a = np.mean([np.linalg.norm(X[i] - X[j]) for j in own])
        b = np.inf
        for c in set(assign.tolist()) - {assign[i]}:
            others = [j for j in range(n) if assign[j] == c]
            b = min(b, np.mean([np.linalg.norm(X[i] - X[j]) for j in others]))
        m = max(a, b)
        vals.append(0.0 if m == 0 else (b - a) / m)
    return float(np.mean(vals))


def test_silhouette_matches_direct_oracle():
    rng = np.random.default_rng(11)
    for _ in range(100):
        n = int(rng.integers(4, 12))
        X = rng.standard_normal((n, 3))
        assign = rng.integers(0, 3, size=n)
        if np.unique(assign).size < 2:
            assign[0] = (assign[1] + 1) % 3
        assert silhouette(X, assign) == pytest.approx(
            brute_force_silhouette(X, assign), abs=1e-12)


# --------------------------------------------------------------- complexity

def test_complexity_zero_scatter():
    X = np.array([[0.0, 0.0], [0.0, 0.0], [5.0, 0.0], [5.0, 0.0]])
    labels = np.array([0, 0, 1, 1])
    assert complexity_measure(X, labels) == 0.0


def test_complexity_fixed_instance():
    # two symmetric 1-d classes: scatter 1 each, centroids at -4 and 4
    X = np.array([[-5.0], [-3.0], [3.0], [5.0]])
    labels = np.array([0, 0, 1, 1])
    got = complexity_measure(X, labels)
    assert got == pytest.approx((1.0 + 1.0) / 8.0)


def test_complexity_coincident_centroids():
    X = np.array([[1.0], [-1.0], [1.0], [-1.0]])
    labels = np.array([0, 0, 1, 1])
    with pytest.raises(EvalError):
        complexity_measure(X, labels)


def test_complexity_translation_and_scale_invariance():
    rng = np.random.default_rng(12)
    X = rng.standard_normal((30, 4))
    labels = rng.integers(0, 3, size=30)
    base = complexity_measure(X, labels)
    assert complexity_measure(X + 7.5, labels) == pytest.approx(base)
    assert complexity_measure(3.0 * X, labels) == pytest.approx(base)


def test_complexity_needs_two_classes():
    with pytest.raises(EvalError):
        complexity_measure(np.zeros((4, 2)), np.zeros(4, dtype=int))


# ------------------------------------------------------------- integration

def test_evaluate_perfect_embeddings():
    rng = np.random.default_rng(13)
    n, c = 60, 3
    labels = np.repeat(np.arange(c), n // c)
    Z = np.eye(c)[labels] * 10 + 0.1 * rng.standard_normal((n, c))
    Zt = np.eye(c)[labels] * 10 + 0.1 * rng.standard_normal((n, c))
    idx = rng.permutation(n)
    report = evaluate(Z, Zt, labels, idx[:30], idx[30:], c, repeats=2, seed=0)
    assert report.macro_f1[0] == pytest.approx(1.0)
    assert report.nmi[0] == pytest.approx(1.0)
    assert report.ari[0] == pytest.approx(1.0)
    assert report.silhouette[0] > 0.8
    assert report.complexity[0] >= 0.0


def test_eval_report_tsv(tmp_path):
    rng = np.random.default_rng(14)
    n = 30
    labels = np.repeat([0, 1], 15)
    Z = np.where(labels[:, None] == 0, -4.0, 4.0) + rng.standard_normal((n, 3))
    report = evaluate(Z, Z, labels, np.arange(0, n, 2), np.arange(1, n, 2),
                      2, repeats=2, seed=1)
    path = tmp_path / "report.tsv"
    report.to_tsv(str(path))
    lines = path.read_text().splitlines()
    assert lines[0] == "metric\tmean\tstd"
    assert len(lines) == 7
    assert len(report.summary().splitlines()) == 6
