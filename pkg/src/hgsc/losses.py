"""Training objective: spectral term, dual consistency terms, and their sum.

Every loss returns its value together with analytic gradients for the
matrix inputs that carry gradient. Hard cluster indicators are constants
in all backward passes.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field

import numpy as np

from .affinity import AffinityMatrix, laplacian

log = logging.getLogger(__name__)

ENTROPY_EPS = 1e-8


@dataclass
class LossReport:
    """Scalars of one objective evaluation; total = l_sp + mu*l_nc + delta*l_cc."""

    l_sp: float
    l_nc: float
    l_cc: float
    total: float
    entropy: float
    grads: dict = field(default_factory=dict, repr=False)

    def row(self, epoch: int) -> str:
        return (f"{epoch}\t{self.l_sp:.12g}\t{self.l_nc:.12g}\t{self.l_cc:.12g}"
                f"\t{self.total:.12g}\t{self.entropy:.12g}")

    LOG_HEADER = "epoch\tl_sp\tl_nc\tl_cc\ttotal\tentropy"


def assignment_entropy(Y: np.ndarray):
    """Entropy of the clamped column means of Y, with its gradient."""
    n = Y.shape[0]
    p = Y.mean(axis=0)
    clamped = p < ENTROPY_EPS
    pc = np.maximum(p, ENTROPY_EPS)
    h = float(-(pc * np.log(pc)).sum())
    # zero gradient through clamped columns
    dh_dp = np.where(clamped, 0.0, -(np.log(pc) + 1.0))
    grad_Y = np.broadcast_to(dh_dp / n, Y.shape)
    return h, grad_Y


def spectral_loss(S: AffinityMatrix, Y: np.ndarray, gamma: float):
    """Affinity-weighted assignment smoothness minus entropy regularizer.

    value = (1/n^2) sum_ij s_ij |y_i - y_j|^2 - gamma H(Y). The first term
    equals (2/n^2) Tr(Y^T L_S Y); the gradient uses that form.
    Returns (value, grad_Y, entropy).
    """
    Y = np.asarray(Y, dtype=np.float64)
    n = S.n
    if Y.shape[0] != n:
        raise ValueError(f"Y has {Y.shape[0]} rows, affinity is over {n} nodes")
    diff = Y[:, None, :] - Y[S.indices]
    smooth = float((S.weights * np.einsum("ikc,ikc->ik", diff, diff)).sum()) / n**2
    L = laplacian(S).matrix
    grad = (4.0 / n**2) * (L @ Y)
    h, grad_h = assignment_entropy(Y)
    value = smooth - gamma * h
    grad = grad - gamma * grad_h
    return value, grad, h


def node_consistency(Q: np.ndarray, Qt: np.ndarray, eta: float):
    """Frobenius alignment plus log-sum-exp decorrelation.

    value = |Q - Qt|_F^2 + eta log sum_ij exp(C_ij), C = Q^T Q + Qt^T Qt.
    The log-sum-exp is max-shifted. Returns (value, grad_Q, grad_Qt).
    """
    Q = np.asarray(Q, dtype=np.float64)
    Qt = np.asarray(Qt, dtype=np.float64)
    if Q.shape != Qt.shape:
        raise ValueError(f"shape mismatch: {Q.shape} vs {Qt.shape}")
    Rdiff = Q - Qt
    fro = float((Rdiff * Rdiff).sum())
    C = Q.T @ Q + Qt.T @ Qt
    cmax = C.max()
    E = np.exp(C - cmax)
    Z = E.sum()
    lse = float(cmax + np.log(Z))
    W = E / Z
    Wsym = W + W.T
    grad_Q = 2.0 * Rdiff + eta * (Q @ Wsym)
    grad_Qt = -2.0 * Rdiff + eta * (Qt @ Wsym)
    return fro + eta * lse, grad_Q, grad_Qt


def cluster_pool(Q: np.ndarray, yhat: np.ndarray, c: int):
    """Average-pool rows of Q by cluster indicator.

    Empty clusters yield a zero row; their count stays zero and a warning
    is logged. Returns (Qhat, counts).
    """
    Q = np.asarray(Q, dtype=np.float64)
    yhat = np.asarray(yhat)
    if yhat.min(initial=0) < 0 or yhat.max(initial=0) >= c:
        raise ValueError("cluster indicator out of range")
    Qhat = np.zeros((c, Q.shape[1]))
    np.add.at(Qhat, yhat, Q)
    counts = np.bincount(yhat, minlength=c).astype(np.int64)
    nonempty = counts > 0
    Qhat[nonempty] /= counts[nonempty, None]
    if not nonempty.all():
        log.warning("empty clusters: %s", np.nonzero(~nonempty)[0].tolist())
    return Qhat, counts


def cluster_consistency(Qt: np.ndarray, Qhat: np.ndarray, yhat: np.ndarray):
    """Squared alignment of each row of Qt to its cluster centroid.

    value = sum_i |qt_i - qhat_{y_i}|^2. Returns (value, grad_Qt, grad_Qhat);
    the indicator is constant.
    """
    Qt = np.asarray(Qt, dtype=np.float64)
    Qhat = np.asarray(Qhat, dtype=np.float64)
    yhat = np.asarray(yhat)
    if yhat.max(initial=0) >= Qhat.shape[0] or yhat.min(initial=0) < 0:
        raise IndexError("cluster indicator out of range for centroid matrix")
    diff = Qt - Qhat[yhat]
    value = float((diff * diff).sum())
    grad_Qt = 2.0 * diff
    grad_Qhat = np.zeros_like(Qhat)
    np.add.at(grad_Qhat, yhat, -2.0 * diff)
    return value, grad_Qt, grad_Qhat


def total_objective(l_sp: float, l_nc: float, l_cc: float,
                    mu: float, delta: float) -> float:
    return l_sp + mu * l_nc + delta * l_cc


def write_log(path: str, reports: list[tuple[int, LossReport]]) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        fh.write(LossReport.LOG_HEADER + "\n")
        for epoch, rep in reports:
            fh.write(rep.row(epoch) + "\n")
