"""Closed-form k-sparse affinity matrices and their Laplacians.

Each row of the affinity matrix solves a simplex-constrained quadratic
over the k nearest candidates; the per-row scale and shift follow from
the KKT conditions, so generic rows carry exactly k positive weights
summing to one. Candidate search is exact: a blocked full pairwise scan
for small inputs, and a cell-pruned search (triangle-inequality bounds)
that returns the same neighbors for large ones.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy.sparse import csr_matrix, diags


class AffinityError(Exception):
    pass


@dataclass
class AffinityMatrix:
    """Row-stochastic k-sparse affinity over n nodes.

    ``indices[i]`` holds node i's k nearest candidates sorted by distance,
    ``weights[i]`` the matching weights. ``alpha`` is the mean of the
    per-row scales; ``lambdas`` the per-row simplex shifts. Rows flagged
    ``degenerate`` hit a distance tie through the (k+1)-th candidate and
    fall back to uniform weights.
    """

    n: int
    k: int
    indices: np.ndarray
    weights: np.ndarray
    alpha: float
    alphas: np.ndarray
    lambdas: np.ndarray
    degenerate: np.ndarray

    def to_csr(self) -> csr_matrix:
        indptr = np.arange(0, self.n * self.k + 1, self.k, dtype=np.int64)
        return csr_matrix(
            (self.weights.ravel().copy(), self.indices.ravel().copy(), indptr),
            shape=(self.n, self.n))

    def row_sums(self) -> np.ndarray:
        return self.weights.sum(axis=1)

    def save_tsv(self, path: str) -> None:
        """Export nonzero entries as (i, j, s_ij) triplets."""
        with open(path, "w", encoding="utf-8") as fh:
            for i in range(self.n):
                for j, w in zip(self.indices[i], self.weights[i]):
                    if w > 0.0:
                        fh.write(f"{i}\t{j}\t{format(w, '.17g')}\n")


@dataclass
class Laplacian:
    """L = D - (S + S^T)/2 with D the degree matrix of the symmetrized part."""

    matrix: csr_matrix

    @property
    def n(self) -> int:
        return self.matrix.shape[0]

    def dense(self) -> np.ndarray:
        return self.matrix.toarray()


def pairwise_distance(h_i, h_j, f_i=None, f_j=None, beta: float = 0.0) -> float:
    """Squared-distance blend d_ij = |h_i - h_j|^2 + beta |f_i - f_j|^2."""
    h_i = np.asarray(h_i, dtype=np.float64)
    h_j = np.asarray(h_j, dtype=np.float64)
    if h_i.shape != h_j.shape:
        raise AffinityError(f"representation dims differ: {h_i.shape} vs {h_j.shape}")
    d = float(np.sum((h_i - h_j) ** 2))
    if beta != 0.0:
        if f_i is None or f_j is None:
            raise AffinityError("beta > 0 requires both f vectors")
        f_i = np.asarray(f_i, dtype=np.float64)
        f_j = np.asarray(f_j, dtype=np.float64)
        if f_i.shape != f_j.shape:
            raise AffinityError(f"assignment dims differ: {f_i.shape} vs {f_j.shape}")
        d += beta * float(np.sum((f_i - f_j) ** 2))
    return d


def _sq_dists(A: np.ndarray, B: np.ndarray) -> np.ndarray:
    """Pairwise squared Euclidean distances, clipped at zero."""
    sq_a = np.einsum("ij,ij->i", A, A)
    sq_b = np.einsum("ij,ij->i", B, B)
    return _sq_dists_pre(A, sq_a, B, sq_b)


def _sq_dists_pre(A, sq_a, B, sq_b) -> np.ndarray:
    """Same as _sq_dists with precomputed squared norms."""
    D = sq_a[:, None] + sq_b[None, :] - 2.0 * (A @ B.T)
    np.maximum(D, 0.0, out=D)
    return D


def _select_rows(D: np.ndarray, cand: np.ndarray, k1: int):
    """Pick the k1 smallest entries per row of D with (value, index) order.

    ``cand`` maps D's columns to node indices. Ties at the selection
    boundary are resolved exactly: every column with a value equal to the
    boundary value is considered and the lowest node indices win. The tie
    test uses one extra partitioned value per row, so the generic case
    costs a single partition pass.
    """
    b, width = D.shape
    if width < k1:
        raise AffinityError("candidate distances are not finite (feature overflow?)")
    idx_out = np.empty((b, k1), dtype=np.int64)
    dist_out = np.empty((b, k1), dtype=np.float64)
    if width == k1:
        order = np.lexsort((np.broadcast_to(cand, D.shape), D), axis=1)
        cidx = np.broadcast_to(cand, D.shape)
        idx_out[:] = np.take_along_axis(cidx, order, axis=1)
        dist_out[:] = np.take_along_axis(D, order, axis=1)
        if not np.isfinite(dist_out).all():
            raise AffinityError("candidate distances are not finite (feature overflow?)")
        return idx_out, dist_out
    part = np.argpartition(D, k1, axis=1)[:, :k1 + 1]
    vals = np.take_along_axis(D, part, axis=1)
    inner = np.partition(vals, k1 - 1, axis=1)
    kthval = inner[:, k1 - 1]
    nextval = inner[:, k1]
    if not np.isfinite(kthval).all():
        raise AffinityError("candidate distances are not finite (feature overflow?)")
    clean = nextval > kthval
    if clean.any():
        rows = np.nonzero(clean)[0]
        sub = vals[rows]
        cidx = cand[part[rows]]
        order = np.lexsort((cidx, sub), axis=1)[:, :k1]
        idx_out[rows] = np.take_along_axis(cidx, order, axis=1)
        dist_out[rows] = np.take_along_axis(sub, order, axis=1)
    for r in np.nonzero(~clean)[0]:
        cols = np.nonzero(D[r] <= kthval[r])[0]
        if cols.size < k1:
            raise AffinityError("candidate distances are not finite (feature overflow?)")
        order = np.lexsort((cand[cols], D[r, cols]))[:k1]
        idx_out[r] = cand[cols[order]]
        dist_out[r] = D[r, cols[order]]
    return idx_out, dist_out


def _knn_scan(X: np.ndarray, k: int, block: int = 2048):
    """Exact (k+1)-nearest candidates by blocked full pairwise scan."""
    n = X.shape[0]
    sq = np.einsum("ij,ij->i", X, X)
    idx = np.empty((n, k + 1), dtype=np.int64)
    dist = np.empty((n, k + 1), dtype=np.float64)
    cand = np.arange(n, dtype=np.int64)
    for s in range(0, n, block):
        e = min(n, s + block)
        D = sq[s:e, None] + sq[None, :] - 2.0 * (X[s:e] @ X.T)
        np.maximum(D, 0.0, out=D)
        D[np.arange(e - s), np.arange(s, e)] = np.inf
        idx[s:e], dist[s:e] = _select_rows(D, cand, k + 1)
    return idx, dist


def _lloyd_cells(X: np.ndarray, m: int, iters: int = 3):
    """Deterministic coarse clustering used only to prune the kNN search."""
    n = X.shape[0]
    rng = np.random.default_rng(0)
    centers = X[rng.choice(n, size=m, replace=False)].copy()
    assign = None
    for _ in range(iters):
        D = _sq_dists(X, centers)
        assign = np.argmin(D, axis=1)
        sums = np.zeros_like(centers)
        np.add.at(sums, assign, X)
        counts = np.bincount(assign, minlength=m)
        filled = counts > 0
        centers[filled] = sums[filled] / counts[filled, None]
    D = _sq_dists(X, centers)
    assign = np.argmin(D, axis=1)
    return centers, assign, D


def _subspace_bounds(V: np.ndarray, assign: np.ndarray, m: int) -> np.ndarray:
    """Per-point lower bounds to each cell within one subspace.

    Returns an (n, m) matrix of max(0, |v - center_c| - radius_c) where the
    center and radius are computed over the cell members' rows of V. Any
    member j of cell c satisfies |v - v_j| >= that bound.
    """
    n = V.shape[0]
    centers = np.zeros((m, V.shape[1]))
    np.add.at(centers, assign, V)
    counts = np.bincount(assign, minlength=m)
    filled = counts > 0
    centers[filled] /= counts[filled, None]
    dist = np.sqrt(_sq_dists(V, centers))
    radius = np.zeros(m)
    np.maximum.at(radius, assign, dist[np.arange(n), assign])
    return np.maximum(dist - radius[None, :], 0.0)


def _knn_pruned(X: np.ndarray, k: int, split_dim: int | None = None):
    """Exact (k+1)-nearest candidates via cell pruning.

    Points are bucketed into coarse cells; for each query group the search
    first scans enough nearby cells to bound the (k+1)-th distance, then
    visits every remaining cell whose lower bound does not exceed that
    bound. Results match the full scan.

    When the metric is a sum over two blocks of coordinates (the
    representation part and the scaled assignment part), ``split_dim``
    marks the boundary: cells are formed on the first block, whose
    geometry is stable, and the lower bound adds the per-subspace bounds,
    which stays valid for the summed metric.
    """
    n = X.shape[0]
    m = int(np.clip(n // 20, 8, 512))
    cell_space = X[:, :split_dim] if split_dim else X
    _, assign, _ = _lloyd_cells(cell_space, m)
    sq = np.einsum("ij,ij->i", X, X)
    members_of = [np.nonzero(assign == c)[0] for c in range(m)]
    if split_dim:
        lb = (_subspace_bounds(X[:, :split_dim], assign, m) ** 2
              + _subspace_bounds(X[:, split_dim:], assign, m) ** 2)
    else:
        lb = _subspace_bounds(X, assign, m) ** 2
    idx = np.empty((n, k + 1), dtype=np.int64)
    dist = np.empty((n, k + 1), dtype=np.float64)
    for c in range(m):
        Q = members_of[c]
        if Q.size == 0:
            continue
        group_lb = lb[Q].min(axis=0)
        order = np.argsort(group_lb, kind="stable")
        first, total = [], 0
        for cell in order:
            first.append(cell)
            total += members_of[cell].size
            if total >= k + 2:
                break
        if total < k + 2:
            raise AffinityError(f"need {k + 1} candidates, have {n - 1}")
        in_first = np.zeros(m, dtype=bool)
        in_first[first] = True
        cand1 = np.concatenate([members_of[cell] for cell in first])
        D1 = _sq_dists_pre(X[Q], sq[Q], X[cand1], sq[cand1])
        D1[Q[:, None] == cand1[None, :]] = np.inf
        tau = np.partition(D1, k, axis=1)[:, k]
        needed = (lb[Q] <= tau[:, None]).any(axis=0) & ~in_first
        extra = np.nonzero(needed)[0]
        if extra.size:
            cand2 = np.concatenate([members_of[cell] for cell in extra])
            D2 = _sq_dists_pre(X[Q], sq[Q], X[cand2], sq[cand2])
            D2[Q[:, None] == cand2[None, :]] = np.inf
            D = np.hstack([D1, D2])
            cand = np.concatenate([cand1, cand2])
        else:
            D, cand = D1, cand1
        idx[Q], dist[Q] = _select_rows(D, cand, k + 1)
    return idx, dist


def nearest_candidates(X: np.ndarray, k: int, method: str = "auto",
                       split_dim: int | None = None):
    """(k+1)-nearest neighbor search behind ``build_affinity``.

    Candidates are sorted ascending by squared distance; exact ties break
    toward the lower node index. Self matches are excluded. ``split_dim``
    is forwarded to the pruned search (two-block metric bounds).
    """
    n = X.shape[0]
    if k + 1 > n - 1:
        raise AffinityError(f"need k+1={k + 1} candidates, have {n - 1}")
    if method == "auto":
        method = "pruned" if n > 1500 else "scan"
    if method == "scan":
        idx, dist = _knn_scan(X, k)
    elif method == "pruned":
        idx, dist = _knn_pruned(X, k, split_dim=split_dim)
    else:
        raise AffinityError(f"unknown search method {method!r}")
    if not np.isfinite(dist).all():
        raise AffinityError("candidate distances are not finite (feature overflow?)")
    return idx, dist


def compute_alpha(d_rows: np.ndarray, k: int):
    """Per-row scale and simplex shift from sorted candidate distances.

    For row i with ascending distances d_1..d_{k+1}:
        alpha_i  = (k/2) d_{k+1} - (1/2) sum_{j<=k} d_j
        lambda_i = 1/k + sum_{j<=k} d_j / (2 k alpha_i)
    Returns (mean alpha, per-row alphas, per-row lambdas). Rows with
    alpha_i <= 0 (a tie running through the (k+1)-th candidate) get
    lambda_i = 1/k; callers give them uniform weights.
    """
    d_rows = np.asarray(d_rows, dtype=np.float64)
    if d_rows.ndim == 1:
        d_rows = d_rows[None, :]
    if d_rows.shape[1] < k + 1:
        raise AffinityError(f"need k+1={k + 1} sorted distances per row")
    head = d_rows[:, :k]
    head_sum = head.sum(axis=1)
    alphas = 0.5 * k * d_rows[:, k] - 0.5 * head_sum
    degenerate = alphas <= 0.0
    lambdas = np.full(alphas.shape, 1.0 / k)
    ok = ~degenerate
    lambdas[ok] = 1.0 / k + head_sum[ok] / (2.0 * k * alphas[ok])
    return float(alphas.mean()), alphas, lambdas


def solve_affinity_row(d_row: np.ndarray, alpha_i: float, lambda_i: float) -> np.ndarray:
    """Closed-form simplex weights s_j = max(-d_j / (2 alpha) + lambda, 0).

    With (alpha_i, lambda_i) from ``compute_alpha`` the k weights are
    nonnegative and sum to one. alpha_i <= 0 signals a degenerate row and
    yields uniform weights over the candidates.
    """
    d_row = np.asarray(d_row, dtype=np.float64)
    if alpha_i <= 0.0:
        return np.full(d_row.shape, 1.0 / d_row.shape[-1])
    return np.maximum(-d_row / (2.0 * alpha_i) + lambda_i, 0.0)


def build_affinity(H: np.ndarray, Y: np.ndarray | None = None, beta: float = 0.0,
                   k: int = 10, method: str = "auto") -> AffinityMatrix:
    """Row-stochastic k-sparse affinity from representations H (and Y).

    The candidate metric is |h_i - h_j|^2 + beta |y_i - y_j|^2, realized as
    squared Euclidean distance on [H, sqrt(beta) Y]. Deterministic given
    inputs; distance ties break toward lower node index.
    """
    H = np.asarray(H, dtype=np.float64)
    if H.ndim != 2:
        raise AffinityError("H must be 2-d")
    if not np.all(np.isfinite(H)):
        raise AffinityError("H contains non-finite values")
    if k < 1:
        raise AffinityError("k must be >= 1")
    if beta != 0.0 and Y is not None:
        Y = np.asarray(Y, dtype=np.float64)
        if Y.shape[0] != H.shape[0]:
            raise AffinityError("H and Y row counts differ")
        X = np.hstack([H, np.sqrt(beta) * Y])
        split = H.shape[1]
    else:
        X = H
        split = None
    idx, dist = nearest_candidates(X, k, method=method, split_dim=split)
    alpha, alphas, lambdas = compute_alpha(dist, k)
    with np.errstate(divide="ignore", invalid="ignore"):
        weights = np.maximum(
            -dist[:, :k] / (2.0 * alphas[:, None]) + lambdas[:, None], 0.0)
    degenerate = alphas <= 0.0
    if degenerate.any():
        weights[degenerate] = 1.0 / k
    return AffinityMatrix(
        n=H.shape[0], k=k, indices=idx[:, :k], weights=weights,
        alpha=alpha, alphas=alphas, lambdas=lambdas, degenerate=degenerate)


def laplacian(S: AffinityMatrix | csr_matrix) -> Laplacian:
    """Symmetrized graph Laplacian L = D - (S + S^T)/2."""
    C = S.to_csr() if isinstance(S, AffinityMatrix) else csr_matrix(S)
    W = (C + C.T) * 0.5
    deg = np.asarray(W.sum(axis=1)).ravel()
    L = (diags(deg) - W).tocsr()
    return Laplacian(matrix=L)


def propagate(S: AffinityMatrix, H: np.ndarray) -> np.ndarray:
    """Message passing Z = S H; each row of Z mixes neighbor rows of H."""
    H = np.asarray(H, dtype=np.float64)
    if H.shape[0] != S.n:
        raise AffinityError(f"S is {S.n}x{S.n} but H has {H.shape[0]} rows")
    return S.to_csr() @ H
