import numpy as np
import pytest

from hgsc.encoders import (DenseLayer, EncoderConfigError, EncoderStack,
                           RankDeficientError, cluster_assign, hetero_encode,
                           hetero_backward, mlp_forward, orthogonal_layer,
                           project)
from hgsc.graph import build_neighborhoods
from hgsc.synth import SynthSpec, generate


def make_layer(W, b=None, activation="relu"):
    layer = DenseLayer(W.shape[0], W.shape[1], activation)
    layer.W = np.asarray(W, dtype=np.float64)
    layer.b = np.zeros(W.shape[1]) if b is None else np.asarray(b, dtype=np.float64)
    layer.zero_grads()
    return layer


def gram_schmidt(P):
    """Independent QR oracle (classical Gram-Schmidt, positive diagonal)."""
    Q = np.zeros_like(P, dtype=np.float64)
    for j in range(P.shape[1]):
        v = P[:, j].astype(np.float64)
        for i in range(j):
            v = v - (P[:, j] @ Q[:, i]) * Q[:, i]
        Q[:, j] = v / np.linalg.norm(v)
    return Q


# ------------------------------------------------------------- mlp_forward

def test_mlp_identity_passthrough():
    X = np.abs(np.random.default_rng(0).standard_normal((5, 3)))
    layer = make_layer(np.eye(3))
    out, _ = mlp_forward([layer], X)
    assert np.array_equal(out, X)


def test_mlp_zero_weights():
    X = np.random.default_rng(1).standard_normal((4, 3))
    out, _ = mlp_forward([make_layer(np.zeros((3, 2)))], X)
    assert np.array_equal(out, np.zeros((4, 2)))


def test_mlp_matches_dense_oracle():
    rng = np.random.default_rng(2)
    X = rng.standard_normal((3, 2))
    W = rng.standard_normal((2, 4))
    b = rng.standard_normal(4)
    out, _ = mlp_forward([make_layer(W, b, activation="none")], X)
    oracle = np.einsum("ni,io->no", X, W) + b
    assert np.abs(out - oracle).max() < 1e-10


def test_mlp_dim_mismatch():
    with pytest.raises(EncoderConfigError):
        make_layer(np.eye(3)).forward(np.zeros((2, 4)))


# -------------------------------------------------------- orthogonal layer

def test_orthogonal_layer_orthonormal_input():
    P = np.array([[1.0, 0.0], [0.0, 1.0], [0.0, 0.0], [0.0, 0.0]])
    Y, R = orthogonal_layer(P)
    assert np.allclose(R, np.eye(2), atol=1e-12)
    assert np.allclose(Y, 2.0 * P, atol=1e-12)
    assert np.allclose(Y.T @ Y, 4.0 * np.eye(2), atol=1e-10)


def test_orthogonal_layer_reference_matrix():
    P = np.array([[1.0, 0.0], [1.0, 1.0], [0.0, 1.0], [0.0, 0.0]])
    Y, R = orthogonal_layer(P)
    n = 4
    assert np.abs(Y.T @ Y - n * np.eye(2)).max() < 1e-6 * n
    # Gram-Schmidt oracle: Y / sqrt(n) equals the orthonormal factor
    Q = gram_schmidt(P)
    assert np.allclose(Y / np.sqrt(n), Q, atol=1e-10)


def test_orthogonal_layer_duplicate_columns():
    P = np.ones((5, 2))
    with pytest.raises(RankDeficientError):
        orthogonal_layer(P)


def test_orthogonal_layer_span_preserved():
    rng = np.random.default_rng(3)
    for _ in range(20):
        n, c = int(rng.integers(4, 40)), int(rng.integers(1, 6))
        P = rng.standard_normal((n, c))
        Y, _ = orthogonal_layer(P)
        # projection of Y onto span(P) leaves no residual
        Qp, _ = np.linalg.qr(P)
        resid = Y - Qp @ (Qp.T @ Y)
        assert np.abs(resid).max() < 1e-8
        assert np.abs(Y.T @ Y / n - np.eye(c)).max() < 1e-6


# ----------------------------------------------------------- cluster assign

def test_cluster_assign_block_constant():
    blocks = np.repeat(np.arange(3), 4)
    H = np.eye(3)[blocks] * np.array([2.0, 1.0, 3.0])[blocks][:, None]
    p = make_layer(np.eye(3))
    assign, _ = cluster_assign(p, H)
    for b in range(3):
        members = assign.yhat[blocks == b]
        assert (members == members[0]).all()
    n = H.shape[0]
    assert np.abs(assign.Y.T @ assign.Y - n * np.eye(3)).max() < 1e-6 * n


def test_cluster_assign_single_cluster():
    H = np.abs(np.random.default_rng(4).standard_normal((6, 2))) + 0.1
    p = make_layer(np.array([[1.0], [1.0]]))
    assign, _ = cluster_assign(p, H)
    assert (assign.yhat == 0).all()
    col = assign.Y[:, 0]
    P = np.maximum(H @ p.W + p.b, 0)[:, 0]
    assert np.allclose(col, np.sqrt(6) * P / np.linalg.norm(P))


def test_cluster_assign_identity():
    c = 4
    H = np.eye(c)
    p = make_layer(np.eye(c))
    assign, _ = cluster_assign(p, H)
    assert np.allclose(assign.Y, np.sqrt(c) * np.eye(c))
    assert assign.yhat.tolist() == list(range(c))


def test_cluster_assign_argmax_tie_breaks_low():
    Y = np.array([[0.5, 0.5], [0.2, 0.7]])
    assert np.argmax(Y, axis=1).tolist() == [0, 1]


# ------------------------------------------------------------ hetero encode

def small_graph(seed=0, relations=2):
    spec = SynthSpec(n=10, c=2, feature_dim=4, aux_count=6, aux_feature_dim=3,
                     relations=relations, edges_per_node=2, seed=seed)
    g = generate(spec)
    return g, build_neighborhoods(g)


def make_stack(g, nb, d1=5, d2=3, c=2, seed=0):
    dims = {t: g.features[t].shape[1] for t in g.node_types}
    rels = [(name, nb.entries[name][0]) for name in sorted(nb.entries)]
    return EncoderStack(dims, g.target_type, rels, d1=d1, d2=d2, c=c, seed=seed)


def test_hetero_encode_empty_neighborhood():
    g, nb = small_graph()
    # disconnect node 0 everywhere
    for name in nb.entries:
        nb.entries[name][1][0] = np.array([], dtype=np.int64)
    nb._agg_cache.clear()
    stack = make_stack(g, nb)
    Zt, _ = hetero_encode(stack, g, nb)
    f0 = g.features[g.target_type][0] @ stack.f_theta[g.target_type].W \
        + stack.f_theta[g.target_type].b
    expect = np.zeros(stack.d1)
    for name in sorted(nb.entries):
        comb = stack.combiners[name]
        expect += np.maximum(np.concatenate([f0, np.zeros(stack.d1)]) @ comb.W + comb.b, 0)
    expect /= len(nb.entries)
    assert np.allclose(Zt[0], expect, atol=1e-12)


def test_hetero_encode_single_neighbor_concat():
    g, nb = small_graph(relations=1)
    name = next(iter(nb.entries))
    nbr_type, lists = nb.entries[name]
    for i in range(nb.n):
        lists[i] = np.array([1], dtype=np.int64) if i == 0 else np.array([], dtype=np.int64)
    nb._agg_cache.clear()
    stack = make_stack(g, nb)
    Zt, _ = hetero_encode(stack, g, nb)
    ft = stack.f_theta
    self_part = g.features[g.target_type][0] @ ft[g.target_type].W + ft[g.target_type].b
    nbr_part = g.features[nbr_type][1] @ ft[nbr_type].W + ft[nbr_type].b
    comb = stack.combiners[name]
    expect = np.maximum(np.concatenate([self_part, nbr_part]) @ comb.W + comb.b, 0)
    assert np.allclose(Zt[0], expect, atol=1e-12)


def test_hetero_encode_identical_relations_average():
    g, nb = small_graph(relations=2)
    names = sorted(nb.entries)
    # same neighbor structure and same neighbor type for both relations
    src = nb.entries[names[0]]
    nb.entries[names[1]] = (src[0], [a.copy() for a in src[1]])
    nb._agg_cache.clear()
    stack = make_stack(g, nb)
    # identical combiner parameters make the relation terms equal
    stack.combiners[names[1]].W = stack.combiners[names[0]].W.copy()
    stack.combiners[names[1]].b = stack.combiners[names[0]].b.copy()
    Zt, _ = hetero_encode(stack, g, nb)
    single = dict(nb.entries)
    del single[names[1]]
    nb_single = type(nb)(target_type=nb.target_type, n=nb.n, entries=single,
                         counts=nb.counts)
    stack_single = make_stack(g, nb_single)
    stack_single.set_params({k: v for k, v in stack.named_params().items()
                             if k in stack_single.named_params()})
    Zt_single, _ = hetero_encode(stack_single, g, nb_single)
    assert np.allclose(Zt, Zt_single, atol=1e-12)


def test_hetero_encode_missing_projection_is_config_error():
    g, nb = small_graph()
    stack = make_stack(g, nb)
    del stack.f_theta["ctx0"]
    with pytest.raises(EncoderConfigError):
        hetero_encode(stack, g, nb)


# ----------------------------------------------------------------- project

def test_project_identity():
    M = np.abs(np.random.default_rng(5).standard_normal((6, 3)))
    q = make_layer(np.eye(3))
    out, _ = project(q, M)
    assert np.array_equal(out, M)


def test_project_shared_parameters():
    rng = np.random.default_rng(6)
    q = DenseLayer(3, 2, "relu", rng)
    A = np.abs(rng.standard_normal((4, 3)))
    B = np.abs(rng.standard_normal((4, 3)))
    out_a, _ = project(q, A)
    out_b, _ = project(q, B)
    q.W[0, 0] += 0.5
    out_a2, _ = project(q, A)
    out_b2, _ = project(q, B)
    assert not np.allclose(out_a, out_a2)
    assert not np.allclose(out_b, out_b2)


def test_project_matches_oracle():
    rng = np.random.default_rng(7)
    q = DenseLayer(4, 3, "none", rng)
    M = rng.standard_normal((5, 4))
    out, _ = project(q, M)
    assert np.abs(out - (M @ q.W + q.b)).max() < 1e-10


# ---------------------------------------------------------------- backward

def test_linear_backward_column_sums():
    # loss = sum of outputs -> weight gradient is the column sums of input
    rng = np.random.default_rng(8)
    X = rng.standard_normal((7, 3))
    layer = DenseLayer(3, 2, "none", rng)
    out, cache = layer.forward(X)
    layer.backward(cache, np.ones_like(out))
    assert np.allclose(layer.gw, np.tile(X.sum(axis=0)[:, None], (1, 2)))
    assert np.allclose(layer.gb, np.full(2, 7.0))


def test_zero_upstream_gives_zero_grads():
    rng = np.random.default_rng(9)
    layer = DenseLayer(3, 2, "relu", rng)
    out, cache = layer.forward(rng.standard_normal((5, 3)))
    g_in = layer.backward(cache, np.zeros_like(out))
    assert np.abs(layer.gw).max() == 0.0
    assert np.abs(layer.gb).max() == 0.0
    assert np.abs(g_in).max() == 0.0


def test_dense_layer_fd_gradient():
    rng = np.random.default_rng(10)
    X = rng.standard_normal((6, 4))
    T = rng.standard_normal((6, 3))
    layer = DenseLayer(4, 3, "relu", rng)

    def loss():
        out, cache = layer.forward(X)
        return 0.5 * float(((out - T) ** 2).sum()), out, cache

    base, out, cache = loss()
    layer.zero_grads()
    layer.backward(cache, out - T)
    h = 1e-6
    for arr, grad in ((layer.W, layer.gw), (layer.b, layer.gb)):
        flat, gflat = arr.ravel(), grad.ravel()
        for idx in range(flat.size):
            orig = flat[idx]
            flat[idx] = orig + h
            f_plus = loss()[0]
            flat[idx] = orig - h
            f_minus = loss()[0]
            flat[idx] = orig
            fd = (f_plus - f_minus) / (2 * h)
            assert abs(fd - gflat[idx]) / max(abs(fd), abs(gflat[idx]), 1e-6) < 1e-4


def test_hetero_backward_fd():
    g, nb = small_graph(seed=3)
    stack = make_stack(g, nb, seed=3)
    W_loss = np.random.default_rng(11).standard_normal((nb.n, stack.d1))

    def loss_value():
        Zt, cache = hetero_encode(stack, g, nb)
        return float((Zt * W_loss).sum()), cache

    base, cache = loss_value()
    stack.zero_grads()
    hetero_backward(stack, cache, W_loss)
    grads = {k: v.copy() for k, v in stack.named_grads().items()}
    params = stack.named_params()
    h = 1e-6
    for name in ("f_theta.ctx0.W", "f_theta.item.W", "combiner.rel0.W", "combiner.rel1.b"):
        flat = params[name].ravel()
        gflat = grads[name].ravel()
        rng = np.random.default_rng(12)
        for idx in rng.choice(flat.size, size=min(10, flat.size), replace=False):
            orig = flat[idx]
            flat[idx] = orig + h
            f_plus = loss_value()[0]
            flat[idx] = orig - h
            f_minus = loss_value()[0]
            flat[idx] = orig
            fd = (f_plus - f_minus) / (2 * h)
            assert abs(fd - gflat[idx]) / max(abs(fd), abs(gflat[idx]), 1e-6) < 1e-4


# ------------------------------------------------------------- stack state

def test_stack_determinism():
    g, nb = small_graph()
    s1 = make_stack(g, nb, seed=77)
    s2 = make_stack(g, nb, seed=77)
    for k, v in s1.named_params().items():
        assert np.array_equal(v, s2.named_params()[k])
    s3 = make_stack(g, nb, seed=78)
    assert any(not np.array_equal(v, s3.named_params()[k])
               for k, v in s1.named_params().items())


def test_checkpoint_round_trip(tmp_path):
    g, nb = small_graph()
    stack = make_stack(g, nb, seed=5)
    path = str(tmp_path / "ckpt.npz")
    stack.save(path, config_json='{"c": 2}')
    loaded, cfg_json = EncoderStack.load(path)
    assert cfg_json == '{"c": 2}'
    for k, v in stack.named_params().items():
        assert np.array_equal(v, loaded.named_params()[k])
