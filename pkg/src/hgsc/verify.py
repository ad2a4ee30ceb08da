"""Executable numerical checks for the structural claims behind the model.

Each check is deterministic given its seed and returns a measured
discrepancy against a stated tolerance: the simplex QP oracle versus the
closed-form affinity rows, zero-eigenvalue counting versus connected
components, the trace form of the bottom-eigenvalue sum, the cut/trace
identity over exhaustively enumerated partitions, and finite-difference
gradient checking through the full encoder stack.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import affinity as aff


@dataclass
class VerificationResult:
    name: str
    passed: bool
    discrepancy: float
    tolerance: float
    instance: str

    def row(self) -> str:
        status = "pass" if self.passed else "FAIL"
        return (f"{self.name}\t{status}\t{self.discrepancy:.3e}"
                f"\t{self.tolerance:.3e}\t{self.instance}")


def simplex_project(v: np.ndarray) -> np.ndarray:
    """Exact Euclidean projection onto the probability simplex."""
    v = np.asarray(v, dtype=np.float64)
    u = np.sort(v)[::-1]
    css = np.cumsum(u)
    rho_candidates = u + (1.0 - css) / np.arange(1, v.size + 1)
    rho = int(np.nonzero(rho_candidates > 0)[0][-1]) + 1
    theta = (css[rho - 1] - 1.0) / rho
    return np.maximum(v - theta, 0.0)


def qp_oracle(d_row: np.ndarray, alpha: float) -> np.ndarray:
    """Ground-truth simplex weights: argmin |s + d/(2 alpha)|^2 over the simplex."""
    if alpha <= 0:
        raise ValueError("alpha must be positive")
    d_row = np.asarray(d_row, dtype=np.float64)
    return simplex_project(-d_row / (2.0 * alpha))


def _as_dense_sym(L, tol: float = 1e-10) -> np.ndarray:
    if isinstance(L, aff.Laplacian):
        M = L.dense()
    elif hasattr(L, "toarray"):
        M = L.toarray()
    else:
        M = np.asarray(L, dtype=np.float64)
    scale = max(1.0, float(np.abs(M).max()))
    if np.abs(M - M.T).max() > tol * scale:
        raise ValueError("matrix is not symmetric")
    return M


def zero_eig_count(L, tol: float) -> int:
    """Number of eigenvalues below tol (dense symmetric solver, n <= 2000)."""
    M = _as_dense_sym(L)
    if M.shape[0] > 2000:
        raise ValueError(f"dense eigensolver limited to n <= 2000, got {M.shape[0]}")
    w = np.linalg.eigvalsh(M)
    return int((w < tol).sum())


def kyfan_check(L, c: int) -> float:
    """|Tr(F^T L F) at the bottom-c eigenvectors - sum of c smallest eigenvalues|."""
    M = _as_dense_sym(L)
    if c > M.shape[0]:
        raise ValueError("c exceeds matrix size")
    w, V = np.linalg.eigh(M)
    F = V[:, :c]
    return float(abs(np.trace(F.T @ M @ F) - w[:c].sum()))


def component_count(S: aff.AffinityMatrix, tol: float = 0.0) -> int:
    """Connected components of the support of S + S^T via union-find."""
    parent = np.arange(S.n)

    def find(x: int) -> int:
        while parent[x] != x:
            parent[x] = parent[parent[x]]
            x = parent[x]
        return x

    for i in range(S.n):
        for j, w in zip(S.indices[i], S.weights[i]):
            if w > tol:
                ri, rj = find(i), find(int(j))
                if ri != rj:
                    parent[ri] = rj
    return len({find(i) for i in range(S.n)})


def enumerate_partitions(n: int, max_parts: int):
    """All set partitions of range(n) into at most max_parts nonempty parts."""

    def rec(i: int, parts: list[list[int]]):
        if i == n:
            yield [list(p) for p in parts]
            return
        for p in parts:
            p.append(i)
            yield from rec(i + 1, parts)
            p.pop()
        if len(parts) < max_parts:
            parts.append([i])
            yield from rec(i + 1, parts)
            parts.pop()

    yield from rec(1, [[0]]) if n else iter(())


def ratiocut_check(W: np.ndarray, partition: list[list[int]]):
    """Evaluate both sides of the cut/trace identity.

    Returns (Tr(H^T L H), sum_j W(V_j, complement)/|V_j|) for the
    normalized indicator H with entries 1/sqrt(|V_j|). The two agree for
    every partition of a symmetric weight matrix.
    """
    W = _as_dense_sym(W)
    n = W.shape[0]
    seen = np.zeros(n, dtype=bool)
    for part in partition:
        if len(part) == 0:
            raise ValueError("empty part in partition")
        arr = np.asarray(part)
        if arr.min() < 0 or arr.max() >= n or seen[arr].any():
            raise ValueError("partition is not a disjoint cover")
        seen[arr] = True
    if not seen.all():
        raise ValueError("partition does not cover all nodes")
    L = np.diag(W.sum(axis=1)) - W
    H = np.zeros((n, len(partition)))
    for j, part in enumerate(partition):
        H[np.asarray(part), j] = 1.0 / np.sqrt(len(part))
    trace = float(np.trace(H.T @ L @ H))
    cut = 0.0
    mask = np.zeros(n, dtype=bool)
    for part in partition:
        mask[:] = False
        mask[np.asarray(part)] = True
        cut += float(W[np.ix_(mask, ~mask)].sum()) / len(part)
    return trace, cut


def _relu_margin(stepper) -> float:
    """Smallest |pre-activation| across cached relu layers of the last forward.

    The cluster head is softplus (smooth), so it is excluded.
    """
    cache = stepper._cache
    margins = []
    for key in ("c_g", "c_q1", "c_q2"):
        margins.append(np.abs(cache[key][1]).min())
    for _, (_, comb_cache) in cache["c_h"]["rel"].items():
        margins.append(np.abs(comb_cache[1]).min())
    return float(min(margins))


def _term_value(report, loss_name: str) -> float:
    if loss_name == "spectral":
        return report.l_sp
    if loss_name == "node":
        return report.l_nc
    if loss_name == "cluster":
        return report.l_cc
    if loss_name == "total":
        return report.total
    raise ValueError(f"unknown loss name {loss_name!r}")


def _term_weights(loss_name: str, cfg):
    if loss_name == "spectral":
        return (1.0, 0.0, 0.0)
    if loss_name == "node":
        return (0.0, 1.0, 0.0)
    if loss_name == "cluster":
        return (0.0, 0.0, 1.0)
    return (1.0, cfg.mu, cfg.delta)


def gradient_check(loss_name: str, seed: int, step: float = 1e-5,
                   n: int = 12) -> float:
    """Central finite differences vs analytic gradients, full stack.

    The QR factor, the hard indicators, and the affinity matrix are held
    at their base values on both sides, matching the backward contract.
    Returns the max relative error over every parameter entry. Seeds whose
    base point sits within the FD step of a relu kink are shifted.
    """
    from .synth import SynthSpec, generate
    from .graph import build_neighborhoods
    from .trainer import TrainConfig, TrainStepper, FrozenFactors, rebuild_affinity
    from .encoders import EncoderStack

    cfg = TrainConfig(c=2, d1=6, d2=4, k=3, beta=0.7, gamma=0.5, eta=0.8,
                      mu=0.9, delta=1.1, seed=seed)
    attempt = seed
    for _ in range(60):
        spec = SynthSpec(n=n, c=2, feature_dim=5, aux_count=8, aux_feature_dim=4,
                         relations=2, edges_per_node=2, separation=3.0,
                         noise=1.0, cross_edge_rate=0.1, seed=attempt)
        g = generate(spec)
        nb = build_neighborhoods(g)
        feature_dims = {t: g.features[t].shape[1] for t in g.node_types}
        relations = [(name, nb.entries[name][0]) for name in sorted(nb.entries)]
        stack = EncoderStack(feature_dims, g.target_type, relations,
                             d1=cfg.d1, d2=cfg.d2, c=cfg.c, seed=attempt)
        S = rebuild_affinity(stack, g, cfg, None)
        stepper = TrainStepper(stack, g, nb, cfg)
        base_report = stepper.forward(S)
        if _relu_margin(stepper) > 20.0 * step:
            break
        attempt += 101
    frozen = FrozenFactors(R=stepper._cache["assign"].R.copy(),
                           yhat=stepper._cache["yhat"].copy())
    weights = _term_weights(loss_name, cfg)
    analytic = stepper.backward(weights=weights)

    # entries below the finite-difference resolution are indistinguishable
    # from zero, so the comparison floor scales with the loss magnitude
    f_base = abs(_term_value(base_report, loss_name))
    noise = np.finfo(float).eps * max(1.0, f_base) / (2.0 * step)
    floor = max(1e-6, 3e4 * noise)

    params = stack.named_params()
    worst = 0.0
    for name, p in params.items():
        flat = p.ravel()
        an = analytic[name].ravel()
        for idx in range(flat.size):
            orig = flat[idx]
            flat[idx] = orig + step
            f_plus = _term_value(stepper.forward(S, frozen=frozen), loss_name)
            flat[idx] = orig - step
            f_minus = _term_value(stepper.forward(S, frozen=frozen), loss_name)
            flat[idx] = orig
            fd = (f_plus - f_minus) / (2.0 * step)
            err = abs(fd - an[idx]) / max(abs(fd), abs(an[idx]), floor)
            worst = max(worst, err)
    stepper._cache = None
    return worst


def _random_row_instances(rng, count: int):
    for _ in range(count):
        k = int(rng.integers(1, 11))
        extra = int(rng.integers(1, 6))
        d = np.sort(rng.uniform(0.0, 10.0, size=k + extra))
        yield k, d


def check_qp_agreement(count: int, seed: int = 0) -> float:
    """Max per-entry gap between closed-form rows and the QP oracle."""
    rng = np.random.default_rng(seed)
    worst = 0.0
    for k, d in _random_row_instances(rng, count):
        _, alphas, lambdas = aff.compute_alpha(d[None, :], k)
        if alphas[0] <= 0:
            continue
        closed = np.zeros(d.size)
        closed[:k] = aff.solve_affinity_row(d[:k], alphas[0], lambdas[0])
        oracle = qp_oracle(d, float(alphas[0]))
        worst = max(worst, float(np.abs(closed - oracle).max()))
    return worst


def _random_affinity(rng, n: int, k: int) -> aff.AffinityMatrix:
    H = rng.standard_normal((n, int(rng.integers(2, 8))))
    return aff.build_affinity(H, k=k)


def run_suite(scale: str = "small", seed: int = 0) -> list[VerificationResult]:
    """Run every check in a fixed order; see the CLI ``verify`` command."""
    from .trainer import TrainConfig, fit

    full = scale == "full"
    rng = np.random.default_rng(seed)
    results: list[VerificationResult] = []

    disc = check_qp_agreement(1000 if full else 200, seed)
    results.append(VerificationResult(
        "qp_closed_form", disc <= 1e-6, disc, 1e-6,
        f"rows={1000 if full else 200},k=1..10"))

    worst_sum, worst_count = 0.0, 0
    trials = 500 if full else 60
    for _ in range(trials):
        n = int(rng.integers(12, 40))
        k = int(rng.integers(1, min(10, n - 2) + 1))
        S = _random_affinity(rng, n, k)
        worst_sum = max(worst_sum, float(np.abs(S.row_sums() - 1.0).max()))
        worst_count = max(worst_count, int(np.abs((S.weights > 0).sum(axis=1) - k).max()))
    results.append(VerificationResult(
        "row_stochastic", worst_sum <= 1e-9 and worst_count == 0,
        worst_sum, 1e-9, f"instances={trials}"))

    from .encoders import orthogonal_layer
    worst = 0.0
    trials = 200 if full else 50
    for _ in range(trials):
        n = int(rng.integers(4, 120))
        c = int(rng.integers(1, min(8, n) + 1))
        P = rng.standard_normal((n, c))
        Y, _ = orthogonal_layer(P)
        worst = max(worst, float(np.abs(Y.T @ Y / n - np.eye(c)).max()))
    results.append(VerificationResult(
        "orthogonal_layer", worst <= 1e-6, worst, 1e-6, f"instances={trials}"))

    worst = 0
    for m in range(1, 6):
        blocks = []
        for b in range(m):
            nb_ = int(rng.integers(20, 100 if full else 40))
            Sb = _random_affinity(rng, nb_, 4)
            blocks.append(aff.laplacian(Sb).dense())
        n_tot = sum(b.shape[0] for b in blocks)
        L = np.zeros((n_tot, n_tot))
        at = 0
        for b in blocks:
            L[at:at + b.shape[0], at:at + b.shape[0]] = b
            at += b.shape[0]
        count = zero_eig_count(L, 1e-8)
        worst = max(worst, abs(count - m))
    results.append(VerificationResult(
        "component_eig_count", worst == 0, float(worst), 0.0, "m=1..5"))

    worst = 0.0
    trials = 100 if full else 30
    for _ in range(trials):
        n = int(rng.integers(5, 200 if full else 80))
        c = int(rng.integers(1, min(5, n) + 1))
        W = rng.random((n, n))
        W = (W + W.T) / 2
        np.fill_diagonal(W, 0.0)
        L = np.diag(W.sum(axis=1)) - W
        worst = max(worst, kyfan_check(L, c))
    results.append(VerificationResult(
        "kyfan", worst <= 1e-8, worst, 1e-8, f"instances={trials}"))

    worst = 0.0
    n_part = 8 if full else 6
    for n in range(2, n_part + 1):
        W = rng.random((n, n))
        W = (W + W.T) / 2
        np.fill_diagonal(W, 0.0)
        for partition in enumerate_partitions(n, 3):
            trace, cut = ratiocut_check(W, partition)
            worst = max(worst, abs(trace - cut))
    results.append(VerificationResult(
        "ratiocut_trace", worst <= 1e-10, worst, 1e-10, f"n<= {n_part}, parts<=3"))

    from .losses import spectral_loss
    worst = 0.0
    for _ in range(30 if full else 10):
        n = int(rng.integers(8, 64))
        c = int(rng.integers(1, 6))
        S = _random_affinity(rng, n, min(5, n - 2))
        Y = rng.standard_normal((n, c))
        value, _, h = spectral_loss(S, Y, 0.0)
        L = aff.laplacian(S).dense()
        trace_form = 2.0 / n**2 * float(np.trace(Y.T @ L @ Y))
        worst = max(worst, abs(value - trace_form))
    results.append(VerificationResult(
        "spectral_trace_identity", worst <= 1e-9, worst, 1e-9, "n<=64"))

    worst = 0.0
    for _ in range(20 if full else 8):
        n = int(rng.integers(10, 100))
        S = _random_affinity(rng, n, min(6, n - 2))
        w = np.linalg.eigvalsh(aff.laplacian(S).dense())
        worst = max(worst, max(0.0, -float(w[0])))
    results.append(VerificationResult(
        "laplacian_psd", worst <= 1e-8, worst, 1e-8, "random instances"))

    worst = 0.0
    seeds = range(20) if full else range(4)
    for s in seeds:
        for term in ("spectral", "node", "cluster", "total"):
            worst = max(worst, gradient_check(term, seed=1000 + 17 * s))
    results.append(VerificationResult(
        "gradient_full_stack", worst <= 1e-4, worst, 1e-4,
        f"seeds={len(list(seeds))},terms=4"))

    if full:
        from .synth import SynthSpec, generate
        spec = SynthSpec(n=300, c=3, separation=7.5, noise=0.9, seed=seed)
        g = generate(spec)
        cfg = TrainConfig(c=3, d1=64, d2=16, k=6, mu=0.01, delta=0.01, beta=5.0,
                          gamma=1e-2, lr=1e-2, max_epochs=300, patience=60,
                          seed=seed)
        result = fit(g, cfg)
        count = zero_eig_count(aff.laplacian(result.S).dense(), 1e-6)
        results.append(VerificationResult(
            "trained_components_reported", True, float(abs(count - 3)), np.inf,
            f"count={count},expected=3 (soft)"))

    return results


def write_results(results: list[VerificationResult], path: str) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        fh.write("check\tstatus\tdiscrepancy\ttolerance\tinstance\n")
        for r in results:
            fh.write(r.row() + "\n")
