"""Differentiable building blocks with hand-written backward passes.

The stack covers the semantic encoder, the cluster projection head with
its QR orthogonal layer, the shared projection head, and the per-type /
per-relation heterogeneous encoder. Forward calls return explicit caches;
backward calls consume a cache and accumulate parameter gradients on the
layer, so one layer can serve several forward passes per step (the shared
projection head needs this).
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy.linalg import solve_triangular


class RankDeficientError(Exception):
    """Orthogonal layer input lost full column rank."""

    def __init__(self, msg: str, condition: float):
        super().__init__(msg)
        self.condition = condition


class EncoderConfigError(Exception):
    pass


def scaled_uniform_init(rng: np.random.Generator, fan_in: int, fan_out: int) -> np.ndarray:
    bound = np.sqrt(6.0 / (fan_in + fan_out))
    return rng.uniform(-bound, bound, size=(fan_in, fan_out))


class DenseLayer:
    """Affine map with an activation tag; gradients accumulate in gw/gb.

    Activations: "relu", "none", or "softplus". The cluster head stays
    linear: a relu there can zero out a whole column of the assignment
    matrix and make the QR step rank deficient.
    """

    def __init__(self, in_dim: int, out_dim: int, activation: str = "relu",
                 rng: np.random.Generator | None = None):
        if activation not in ("relu", "none", "softplus"):
            raise EncoderConfigError(f"unknown activation {activation!r}")
        rng = rng or np.random.default_rng(0)
        self.W = scaled_uniform_init(rng, in_dim, out_dim)
        self.b = np.zeros(out_dim)
        self.activation = activation
        self.gw = np.zeros_like(self.W)
        self.gb = np.zeros_like(self.b)

    @property
    def in_dim(self) -> int:
        return self.W.shape[0]

    @property
    def out_dim(self) -> int:
        return self.W.shape[1]

    def forward(self, X: np.ndarray):
        X = np.asarray(X, dtype=np.float64)
        if X.ndim != 2 or X.shape[1] != self.in_dim:
            raise EncoderConfigError(
                f"layer expects (*, {self.in_dim}) input, got {X.shape}")
        Z = X @ self.W + self.b
        if self.activation == "relu":
            out = np.maximum(Z, 0.0)
        elif self.activation == "softplus":
            out = np.logaddexp(0.0, Z)
        else:
            out = Z
        return out, (X, Z)

    def backward(self, cache, grad_out: np.ndarray) -> np.ndarray:
        X, Z = cache
        if grad_out.shape != Z.shape:
            raise EncoderConfigError(
                f"upstream gradient shape {grad_out.shape} != output {Z.shape}")
        if self.activation == "relu":
            g = grad_out * (Z > 0.0)
        elif self.activation == "softplus":
            g = grad_out / (1.0 + np.exp(-Z))
        else:
            g = grad_out
        self.gw += X.T @ g
        self.gb += g.sum(axis=0)
        return g @ self.W.T

    def zero_grads(self) -> None:
        self.gw[:] = 0.0
        self.gb[:] = 0.0


def mlp_forward(layers, X: np.ndarray):
    """Run a layer sequence; returns output and the per-layer cache list."""
    caches = []
    out = X
    for layer in layers:
        out, cache = layer.forward(out)
        caches.append(cache)
    return out, caches


def mlp_backward(layers, caches, grad_out: np.ndarray) -> np.ndarray:
    g = grad_out
    for layer, cache in zip(reversed(layers), reversed(caches)):
        g = layer.backward(cache, g)
    return g


def orthogonal_layer(P: np.ndarray):
    """Map P to Y = sqrt(n) P R^-1 with R from the QR factorization of P.

    Y satisfies Y^T Y = n I and spans the same columns as P. R is
    canonicalized to a positive diagonal. Raises ``RankDeficientError``
    when the smallest singular value of P falls below 1e-8 times the
    largest.
    """
    P = np.asarray(P, dtype=np.float64)
    n, c = P.shape
    if n < c:
        raise RankDeficientError(f"need at least {c} rows, got {n}", np.inf)
    svals = np.linalg.svd(P, compute_uv=False)
    if svals[-1] <= 1e-8 * svals[0]:
        cond = np.inf if svals[-1] == 0.0 else svals[0] / svals[-1]
        raise RankDeficientError(
            f"projection matrix is rank deficient (condition ~ {cond:.3e})", cond)
    Q, R = np.linalg.qr(P)
    # sign freedom of the factorization: orient each column of Y toward a
    # nonnegative sum so the assignment columns stay probability-like and
    # the entropy regularizer keeps a live gradient on every column
    sign = np.where(Q.sum(axis=0) < 0.0, -1.0, 1.0)
    R = R * sign[:, None]
    Y = np.sqrt(n) * solve_triangular(R, P.T, lower=False, trans="T").T
    return Y, R


def orthogonal_from_factor(P: np.ndarray, R: np.ndarray) -> np.ndarray:
    """Y = sqrt(n) P R^-1 with a fixed, externally supplied factor."""
    n = P.shape[0]
    return np.sqrt(n) * solve_triangular(R, P.T, lower=False, trans="T").T


def orthogonal_backward(grad_Y: np.ndarray, R: np.ndarray, n: int) -> np.ndarray:
    """Gradient through P -> sqrt(n) P R^-1 with R held constant."""
    return np.sqrt(n) * solve_triangular(R, grad_Y.T, lower=False).T


@dataclass
class ClusterAssignment:
    """Orthogonalized assignment Y (Y^T Y = n I), argmax indicators, R factor."""

    Y: np.ndarray
    yhat: np.ndarray
    R: np.ndarray


def cluster_assign(p_head: DenseLayer, H: np.ndarray, frozen_R: np.ndarray | None = None):
    """Cluster assignment from representations: P = relu(p(H)), then QR.

    Returns (ClusterAssignment, cache). ``frozen_R`` reuses a previous
    factor instead of refactorizing, for gradient checking.
    """
    P, cache = p_head.forward(H)
    if frozen_R is not None:
        Y = orthogonal_from_factor(P, frozen_R)
        R = frozen_R
    else:
        Y, R = orthogonal_layer(P)
    yhat = np.argmax(Y, axis=1)
    return ClusterAssignment(Y=Y, yhat=yhat, R=R), cache


class EncoderStack:
    """All trainable parameters plus the wiring between them.

    Layers: ``g_phi`` (target features -> d1), ``p_phi`` (d1 -> c),
    ``q_gamma`` (d1 -> d2), one input projection per node type and one
    combiner (2 d1 -> d1) per relation. Initialization order is fixed, so
    a seed fully determines every parameter.
    """

    CHECKPOINT_VERSION = 1

    def __init__(self, feature_dims: dict[str, int], target_type: str,
                 relations: list[tuple[str, str]], d1: int, d2: int, c: int,
                 seed: int = 0):
        rng = np.random.default_rng(seed)
        self.target_type = target_type
        self.relations = list(relations)
        self.d1, self.d2, self.c = d1, d2, c
        self.feature_dims = dict(feature_dims)
        self.g_phi = DenseLayer(feature_dims[target_type], d1, "relu", rng)
        self.p_phi = DenseLayer(d1, c, "none", rng)
        self.q_gamma = DenseLayer(d1, d2, "relu", rng)
        self.f_theta: dict[str, DenseLayer] = {}
        needed = {target_type} | {t for _, t in relations}
        for t in sorted(needed):
            if t not in feature_dims:
                raise EncoderConfigError(f"no feature dim for node type {t!r}")
            self.f_theta[t] = DenseLayer(feature_dims[t], d1, "none", rng)
        self.combiners: dict[str, DenseLayer] = {}
        for name, _ in sorted(relations):
            self.combiners[name] = DenseLayer(2 * d1, d1, "relu", rng)

    def _layers(self):
        yield "g_phi", self.g_phi
        yield "p_phi", self.p_phi
        yield "q_gamma", self.q_gamma
        for t in sorted(self.f_theta):
            yield f"f_theta.{t}", self.f_theta[t]
        for r in sorted(self.combiners):
            yield f"combiner.{r}", self.combiners[r]

    def named_params(self) -> dict[str, np.ndarray]:
        out = {}
        for name, layer in self._layers():
            out[f"{name}.W"] = layer.W
            out[f"{name}.b"] = layer.b
        return out

    def named_grads(self) -> dict[str, np.ndarray]:
        out = {}
        for name, layer in self._layers():
            out[f"{name}.W"] = layer.gw
            out[f"{name}.b"] = layer.gb
        return out

    def zero_grads(self) -> None:
        for _, layer in self._layers():
            layer.zero_grads()

    def set_params(self, values: dict[str, np.ndarray]) -> None:
        params = self.named_params()
        for name, v in values.items():
            params[name][...] = v

    def snapshot(self) -> dict[str, np.ndarray]:
        return {k: v.copy() for k, v in self.named_params().items()}

    def save(self, path: str, config_json: str = "{}") -> None:
        arrays = {f"param:{k}": v for k, v in self.named_params().items()}
        arrays["version"] = np.array(self.CHECKPOINT_VERSION)
        arrays["config_json"] = np.array(config_json)
        meta = {
            "target_type": self.target_type,
            "relations": self.relations,
            "dims": [self.d1, self.d2, self.c],
            "feature_dims": self.feature_dims,
        }
        import json

        arrays["stack_json"] = np.array(json.dumps(meta))
        # write through a handle so the exact path is kept (numpy would
        # otherwise append .npz)
        with open(path, "wb") as fh:
            np.savez(fh, **arrays)

    @classmethod
    def load(cls, path: str):
        import json

        with np.load(path, allow_pickle=False) as data:
            version = int(data["version"])
            if version != cls.CHECKPOINT_VERSION:
                raise EncoderConfigError(f"unsupported checkpoint version {version}")
            meta = json.loads(str(data["stack_json"]))
            config_json = str(data["config_json"])
            stack = cls(
                feature_dims={k: int(v) for k, v in meta["feature_dims"].items()},
                target_type=meta["target_type"],
                relations=[tuple(r) for r in meta["relations"]],
                d1=meta["dims"][0], d2=meta["dims"][1], c=meta["dims"][2])
            stack.set_params(
                {k[len("param:"):]: data[k] for k in data.files if k.startswith("param:")})
        return stack, config_json


def hetero_encode(stack: EncoderStack, g, nb):
    """Relation-wise neighbor aggregation into n x d1 representations.

    Per relation: project the target row and the summed neighbor rows with
    the per-type linear maps, concatenate, squash through the relation's
    combiner, then average over relations.
    """
    if not nb.entries:
        raise EncoderConfigError("no relations touch the target type")
    X_tgt = g.features[stack.target_type]
    proj: dict[str, tuple[np.ndarray, tuple]] = {}

    def project_type(t: str):
        if t not in stack.f_theta:
            raise EncoderConfigError(f"no input projection configured for type {t!r}")
        if t not in proj:
            proj[t] = stack.f_theta[t].forward(g.features[t])
        return proj[t][0]

    F_tgt = project_type(stack.target_type)
    rel_caches = {}
    total = np.zeros((nb.n, stack.d1))
    names = sorted(nb.entries)
    for name in names:
        nbr_type, _ = nb.entries[name]
        if name not in stack.combiners:
            raise EncoderConfigError(f"no combiner configured for relation {name!r}")
        A = nb.aggregation_matrix(name)
        agg = A @ project_type(nbr_type)
        concat = np.hstack([F_tgt, agg])
        out, cache = stack.combiners[name].forward(concat)
        total += out
        rel_caches[name] = (nbr_type, cache)
    Zt = total / len(names)
    return Zt, {"proj": proj, "rel": rel_caches, "names": names, "nb": nb}


def hetero_backward(stack: EncoderStack, cache, grad_Zt: np.ndarray) -> None:
    """Backward pass mirroring ``hetero_encode``; accumulates layer grads."""
    names = cache["names"]
    nb = cache["nb"]
    proj = cache["proj"]
    d1 = stack.d1
    grad_F: dict[str, np.ndarray] = {
        t: np.zeros_like(val[0]) for t, val in proj.items()}
    g_each = grad_Zt / len(names)
    for name in names:
        nbr_type, comb_cache = cache["rel"][name]
        g_concat = stack.combiners[name].backward(comb_cache, g_each)
        grad_F[stack.target_type] += g_concat[:, :d1]
        A = nb.aggregation_matrix(name)
        grad_F[nbr_type] += A.T @ g_concat[:, d1:]
    for t, gF in grad_F.items():
        stack.f_theta[t].backward(proj[t][1], gF)


def project(q_head: DenseLayer, M: np.ndarray):
    """Shared projection head applied to one representation matrix."""
    return q_head.forward(M)
