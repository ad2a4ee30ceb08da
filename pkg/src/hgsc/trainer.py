"""Alternating training loop: closed-form affinity, then a gradient step.

Within an epoch the affinity matrix is a constant; it is rebuilt from the
current representations only at rebuild boundaries. Parameters follow
adaptive-moment updates with bias correction and a global-norm gradient
clip. Early stopping tracks the best total objective.
"""

from __future__ import annotations

from dataclasses import dataclass, field, asdict

import numpy as np

from . import affinity as aff
from .encoders import (EncoderStack, cluster_assign, hetero_encode,
                       hetero_backward, orthogonal_backward)
from .graph import HeteroGraph, RelationNeighborhood, build_neighborhoods
from .losses import (LossReport, cluster_consistency, cluster_pool,
                     node_consistency, spectral_loss, total_objective)


class NumericalDivergence(Exception):
    """A loss term became non-finite; carries the term name."""

    def __init__(self, term: str, epoch: int):
        super().__init__(f"{term} diverged at epoch {epoch}")
        self.term = term
        self.epoch = epoch


class StepStateError(Exception):
    """Backward requested without a matching forward."""


@dataclass
class TrainConfig:
    c: int
    d1: int = 64
    d2: int = 32
    k: int = 10
    beta: float = 1.0
    gamma: float = 1.0
    eta: float = 1.0
    mu: float = 1.0
    delta: float = 1.0
    lr: float = 1e-3
    max_epochs: int = 500
    patience: int = 30
    seed: int = 0
    rebuild_period: int = 1
    grad_clip: float = 5.0
    cc_pool_grad: bool = True
    knn_method: str = "auto"

    def validate(self) -> None:
        if self.c < 1:
            raise ValueError("c must be >= 1")
        if self.patience < 1:
            raise ValueError("patience must be >= 1")
        if self.lr < 0:
            raise ValueError("learning rate must be >= 0")
        if self.max_epochs < 1:
            raise ValueError("max_epochs must be >= 1")
        if self.rebuild_period < 1:
            raise ValueError("rebuild_period must be >= 1")
        for name in ("beta", "gamma", "eta", "mu", "delta"):
            if getattr(self, name) < 0:
                raise ValueError(f"{name} must be >= 0")

    def to_tsv(self, path: str) -> None:
        with open(path, "w", encoding="utf-8") as fh:
            for k, v in asdict(self).items():
                fh.write(f"{k}\t{v}\n")

    @classmethod
    def from_tsv(cls, path: str) -> "TrainConfig":
        fields = {f.name: f.type for f in cls.__dataclass_fields__.values()}
        kwargs = {}
        with open(path, encoding="utf-8") as fh:
            for line in fh:
                line = line.strip()
                if not line or line.startswith("#"):
                    continue
                key, val = line.split("\t")
                if key not in cls.__dataclass_fields__:
                    raise ValueError(f"unknown config key {key!r}")
                kwargs[key] = _parse_field(key, val)
        del fields
        cfg = cls(**kwargs)
        cfg.validate()
        return cfg


def _parse_field(key: str, val: str):
    kind = TrainConfig.__dataclass_fields__[key].type
    if kind == "int":
        return int(val)
    if kind == "float":
        return float(val)
    if kind == "bool":
        return val in ("True", "true", "1")
    return val


class AdamState:
    """Per-parameter first/second moments, decay 0.9/0.999, eps 1e-8."""

    beta1 = 0.9
    beta2 = 0.999
    eps = 1e-8

    def __init__(self):
        self.m: dict[str, np.ndarray] = {}
        self.v: dict[str, np.ndarray] = {}
        self.t = 0


def optimizer_step(params: dict[str, np.ndarray], grads: dict[str, np.ndarray],
                   state: AdamState, lr: float) -> None:
    """One adaptive-moment update, in place, deterministic given state."""
    state.t += 1
    b1, b2, eps = state.beta1, state.beta2, state.eps
    c1 = 1.0 - b1 ** state.t
    c2 = 1.0 - b2 ** state.t
    for name, p in params.items():
        g = grads[name]
        if g.shape != p.shape:
            raise ValueError(f"gradient shape mismatch for {name}")
        if name not in state.m:
            state.m[name] = np.zeros_like(p)
            state.v[name] = np.zeros_like(p)
        m = state.m[name]
        v = state.v[name]
        m *= b1
        m += (1.0 - b1) * g
        v *= b2
        v += (1.0 - b2) * g * g
        p -= lr * (m / c1) / (np.sqrt(v / c2) + eps)


def clip_gradients(grads: dict[str, np.ndarray], max_norm: float) -> float:
    total = np.sqrt(sum(float((g * g).sum()) for g in grads.values()))
    if max_norm > 0 and total > max_norm:
        scale = max_norm / total
        for g in grads.values():
            g *= scale
    return total


@dataclass
class FrozenFactors:
    """Factors held constant while differentiating (gradient checks)."""

    R: np.ndarray
    yhat: np.ndarray


class TrainStepper:
    """One full forward/backward of the objective with S held fixed."""

    def __init__(self, stack: EncoderStack, g: HeteroGraph,
                 nb: RelationNeighborhood, cfg: TrainConfig):
        self.stack = stack
        self.g = g
        self.nb = nb
        self.cfg = cfg
        self._cache = None

    def forward(self, S: aff.AffinityMatrix, frozen: FrozenFactors | None = None) -> LossReport:
        stack, cfg = self.stack, self.cfg
        X = self.g.features[stack.target_type]
        H, c_g = stack.g_phi.forward(X)
        assign, c_p = cluster_assign(
            stack.p_phi, H, frozen_R=None if frozen is None else frozen.R)
        yhat = assign.yhat if frozen is None else frozen.yhat
        l_sp, g_Y, entropy = spectral_loss(S, assign.Y, cfg.gamma)
        Z = aff.propagate(S, H)
        Zt, c_h = hetero_encode(stack, self.g, self.nb)
        Q, c_q1 = stack.q_gamma.forward(Z)
        Qt, c_q2 = stack.q_gamma.forward(Zt)
        l_nc, g_Q_nc, g_Qt_nc = node_consistency(Q, Qt, cfg.eta)
        Qhat, counts = cluster_pool(Q, yhat, cfg.c)
        l_cc, g_Qt_cc, g_Qhat = cluster_consistency(Qt, Qhat, yhat)
        total = total_objective(l_sp, l_nc, l_cc, cfg.mu, cfg.delta)
        report = LossReport(l_sp=l_sp, l_nc=l_nc, l_cc=l_cc, total=total,
                            entropy=entropy,
                            grads={"Y": g_Y, "Q_nc": g_Q_nc, "Qt_nc": g_Qt_nc,
                                   "Qt_cc": g_Qt_cc, "Qhat": g_Qhat})
        self._cache = {
            "S": S, "c_g": c_g, "c_p": c_p, "c_h": c_h,
            "c_q1": c_q1, "c_q2": c_q2, "assign": assign, "yhat": yhat,
            "counts": counts, "report": report,
        }
        return report

    def backward(self, weights: tuple[float, float, float] | None = None
                 ) -> dict[str, np.ndarray]:
        """Backpropagate w_sp*l_sp + w_nc*l_nc + w_cc*l_cc into the parameters.

        ``weights`` defaults to (1, mu, delta), the total objective.
        """
        if self._cache is None:
            raise StepStateError("backward called without a pending forward")
        cache, cfg, stack = self._cache, self.cfg, self.stack
        self._cache = None
        w_sp, w_nc, w_cc = weights if weights is not None else (1.0, cfg.mu, cfg.delta)
        g = cache["report"].grads
        d_Q = w_nc * g["Q_nc"]
        d_Qt = w_nc * g["Qt_nc"] + w_cc * g["Qt_cc"]
        if cfg.cc_pool_grad:
            counts = cache["counts"]
            yhat = cache["yhat"]
            per_row = np.zeros_like(g["Qhat"])
            nonempty = counts > 0
            per_row[nonempty] = g["Qhat"][nonempty] / counts[nonempty, None]
            d_Q = d_Q + w_cc * per_row[yhat]
        stack.zero_grads()
        d_Z = stack.q_gamma.backward(cache["c_q1"], d_Q)
        d_Zt = stack.q_gamma.backward(cache["c_q2"], d_Qt)
        hetero_backward(stack, cache["c_h"], d_Zt)
        S: aff.AffinityMatrix = cache["S"]
        d_H = S.to_csr().T @ d_Z
        d_P = orthogonal_backward(w_sp * g["Y"], cache["assign"].R, S.n)
        d_H = d_H + stack.p_phi.backward(cache["c_p"], d_P)
        stack.g_phi.backward(cache["c_g"], d_H)
        return {k: v.copy() for k, v in stack.named_grads().items()}


@dataclass
class TrainState:
    epoch: int = 0
    best_total: float = np.inf
    since_improve: int = 0
    adam: AdamState = field(default_factory=AdamState)
    S: aff.AffinityMatrix | None = None
    last_Y: np.ndarray | None = None
    best_params: dict | None = None
    best_S: aff.AffinityMatrix | None = None
    log: list = field(default_factory=list)


def rebuild_affinity(stack: EncoderStack, g: HeteroGraph, cfg: TrainConfig,
                     last_Y: np.ndarray | None) -> aff.AffinityMatrix:
    """Closed-form affinity from current H and the latest assignment."""
    X = g.features[stack.target_type]
    H, _ = stack.g_phi.forward(X)
    Y = last_Y
    if Y is None and cfg.beta != 0.0:
        assign, _ = cluster_assign(stack.p_phi, H)
        Y = assign.Y
    return aff.build_affinity(H, Y, beta=cfg.beta, k=cfg.k, method=cfg.knn_method)


def _project_out_scale_modes(stack: EncoderStack,
                             grads: dict[str, np.ndarray]) -> None:
    """Drop the cluster head's gradient components along column scalings.

    Y = sqrt(n) P R^-1 does not change when a column of P is rescaled, so
    the true objective is exactly flat along the per-column scale modes of
    the head. The frozen-factor backward still produces a large spurious
    component in those directions; removing it before the adaptive update
    leaves only directions the objective actually depends on. Valid for
    positively homogeneous head activations.
    """
    if stack.p_phi.activation not in ("relu", "none"):
        return
    gw = grads.get("p_phi.W")
    gb = grads.get("p_phi.b")
    if gw is None or gb is None:
        return
    for j in range(stack.p_phi.out_dim):
        u = np.concatenate([stack.p_phi.W[:, j], stack.p_phi.b[j:j + 1]])
        nrm2 = float(u @ u)
        if nrm2 <= 0.0:
            continue
        g = np.concatenate([gw[:, j], gb[j:j + 1]])
        coef = float(g @ u) / nrm2
        gw[:, j] -= coef * u[:-1]
        gb[j] -= coef * u[-1]


def _stabilize_assignment_head(stack: EncoderStack, P: np.ndarray) -> None:
    """Undo parameter-scale drift in the cluster projection head.

    Y = sqrt(n) P R^-1 is invariant to rescaling a column of P (the QR
    factor absorbs it), but the frozen-factor gradient steadily shrinks P
    itself until relu units die. Renormalizing each column of the head to
    unit RMS output leaves every model quantity unchanged while keeping
    the parametrization healthy. Only valid for positively homogeneous
    activations, where scaling (W, b) scales the output exactly.
    """
    if stack.p_phi.activation not in ("relu", "none"):
        return
    norms = np.sqrt((P * P).mean(axis=0))
    for j, s in enumerate(norms):
        if np.isfinite(s) and 1e-12 < s and (s < 0.5 or s > 2.0):
            stack.p_phi.W[:, j] /= s
            stack.p_phi.b[j] /= s


def train_epoch(state: TrainState, g: HeteroGraph, nb: RelationNeighborhood,
                stack: EncoderStack, cfg: TrainConfig) -> LossReport:
    """One epoch: optional affinity rebuild, forward, backward, update."""
    state.epoch += 1
    if state.S is None or (state.epoch - 1) % cfg.rebuild_period == 0:
        state.S = rebuild_affinity(stack, g, cfg, state.last_Y)
    stepper = TrainStepper(stack, g, nb, cfg)
    report = stepper.forward(state.S)
    for term, value in (("l_sp", report.l_sp), ("l_nc", report.l_nc),
                        ("l_cc", report.l_cc), ("total", report.total)):
        if not np.isfinite(value):
            raise NumericalDivergence(term, state.epoch)
    state.last_Y = stepper._cache["assign"].Y.copy()
    Z_p = stepper._cache["c_p"][1]
    if stack.p_phi.activation == "softplus":
        P_pre = np.logaddexp(0.0, Z_p)
    else:
        P_pre = np.maximum(Z_p, 0.0)
    grads = stepper.backward()
    _project_out_scale_modes(stack, grads)
    clip_gradients(grads, cfg.grad_clip)
    optimizer_step(stack.named_params(), grads, state.adam, cfg.lr)
    if cfg.lr > 0.0:
        _stabilize_assignment_head(stack, P_pre)
    return report


@dataclass
class FitResult:
    stack: EncoderStack
    S: aff.AffinityMatrix
    log: list
    best_epoch: int


def fit(g: HeteroGraph, cfg: TrainConfig,
        nb: RelationNeighborhood | None = None,
        checkpoint_dir: str | None = None,
        checkpoint_every: int = 0) -> FitResult:
    """Run the training loop with early stopping on the total objective.

    Stops once the objective has not improved for ``cfg.patience``
    consecutive epochs or at ``cfg.max_epochs``. The returned stack holds
    the parameters of the best epoch; the affinity matrix is the one in
    effect at that epoch. With ``checkpoint_every`` > 0 a snapshot is
    written to ``<checkpoint_dir>/epoch_<n>.ckpt`` every that many epochs.
    """
    cfg.validate()
    if nb is None:
        nb = build_neighborhoods(g)
    feature_dims = {t: g.features[t].shape[1] for t in g.node_types}
    relations = [(name, nb.entries[name][0]) for name in sorted(nb.entries)]
    stack = EncoderStack(feature_dims, g.target_type, relations,
                         d1=cfg.d1, d2=cfg.d2, c=cfg.c, seed=cfg.seed)
    state = TrainState()
    best_epoch = 0
    while state.epoch < cfg.max_epochs:
        pre_step = stack.snapshot()
        report = train_epoch(state, g, nb, stack, cfg)
        state.log.append((state.epoch, report))
        if checkpoint_every > 0 and checkpoint_dir is not None \
                and state.epoch % checkpoint_every == 0:
            import os
            stack.save(os.path.join(checkpoint_dir, f"epoch_{state.epoch}.ckpt"))
        if report.total < state.best_total:
            # the report was measured before the update, so the matching
            # parameters are the pre-step ones
            state.best_total = report.total
            state.since_improve = 0
            state.best_params = pre_step
            state.best_S = state.S
            best_epoch = state.epoch
        else:
            state.since_improve += 1
            if state.since_improve >= cfg.patience:
                break
    if state.best_params is not None:
        stack.set_params(state.best_params)
    return FitResult(stack=stack, S=state.best_S, log=state.log, best_epoch=best_epoch)
