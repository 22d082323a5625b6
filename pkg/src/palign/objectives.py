"""Candidate-label training objectives.

Each loss maps a batch of posteriors ``f`` (B, C) to a :class:`LossValue`
holding the batch-mean scalar and ``dL/df``. Targets derived from the model
(confidence rows, pseudo-targets, selected labels) are treated as constants.
Candidate sets ``Y`` are boolean masks (B, C).
"""

from __future__ import annotations

from collections import Counter
from dataclasses import dataclass, field, replace

import numpy as np

from .errors import PROB_FLOOR, UNIFORM_FALLBACK, ConfigError
from .numerics import PROB_FLOOR as FLOOR
from .numerics import l2_normalize

OBJECTIVES = ("ce", "naive", "proden", "cc", "lw", "pllcr", "pico", "cavl")


@dataclass
class LossValue:
    value: float
    grad: np.ndarray
    # PLLCR only: one dL/df per augmented view.
    view_grads: list[np.ndarray] = field(default_factory=list)

    def __add__(self, other: "LossValue") -> "LossValue":
        return combine(self, other, 1.0)


def combine(a: LossValue, b: LossValue, weight: float) -> LossValue:
    """a + weight * b, including gradients."""
    views = list(a.view_grads)
    for k, g in enumerate(b.view_grads):
        if k < len(views):
            views[k] = views[k] + weight * g
        else:
            views.append(weight * g)
    return LossValue(a.value + weight * b.value, a.grad + weight * b.grad, views)


def _clamp(x: np.ndarray, diag: Counter | None) -> np.ndarray:
    low = x < FLOOR
    if np.any(low):
        if diag is not None:
            diag[PROB_FLOOR] += int(low.sum())
        x = np.where(low, FLOOR, x)
    return x


def _batch(f) -> np.ndarray:
    return np.atleast_2d(np.asarray(f, dtype=np.float64))


def _weighted_ce(weights: np.ndarray, f: np.ndarray, diag: Counter | None) -> LossValue:
    """mean_b -Σ_i w_bi log f_bi with w held fixed."""
    B = f.shape[0]
    fc = _clamp(f, diag)
    nz = weights != 0
    logs = np.where(nz, np.log(fc), 0.0)
    value = -float((weights * logs).sum()) / B
    grad = np.where(nz, -weights / fc, 0.0) / B
    return LossValue(value, grad)


def ce_loss(f, y, diag: Counter | None = None) -> LossValue:
    f = _batch(f)
    y = np.atleast_1d(np.asarray(y, dtype=np.int64))
    if np.any(y < 0) or np.any(y >= f.shape[1]):
        raise ConfigError("label out of range")
    onehot = np.zeros_like(f)
    onehot[np.arange(f.shape[0]), y] = 1.0
    return _weighted_ce(onehot, f, diag)


def naive_avg_loss(f, Y, diag: Counter | None = None) -> LossValue:
    f = _batch(f)
    Y = np.atleast_2d(np.asarray(Y, dtype=bool))
    w = Y / Y.sum(axis=1, keepdims=True)
    return _weighted_ce(w, f, diag)


def restricted(f, Y, diag: Counter | None = None) -> np.ndarray:
    """Renormalize each row of f over its candidate set; zero elsewhere."""
    f = _batch(f)
    Y = np.atleast_2d(np.asarray(Y, dtype=bool))
    masked = np.where(Y, f, 0.0)
    tot = masked.sum(axis=1, keepdims=True)
    bad = tot[:, 0] < FLOOR
    if np.any(bad):
        if diag is not None:
            diag[UNIFORM_FALLBACK] += int(bad.sum())
        masked[bad] = Y[bad].astype(np.float64)
        tot[bad] = Y[bad].sum(axis=1, keepdims=True)
    return masked / tot


def init_confidence(f, Y, diag: Counter | None = None) -> np.ndarray:
    """Confidence matrix from the untrained model's output restricted to candidates."""
    return restricted(f, Y, diag)


def proden_update(conf: np.ndarray, f, Y, indices, diag: Counter | None = None) -> np.ndarray:
    """Return a copy of ``conf`` with the batch rows set to f renormalized over Y."""
    out = np.array(conf, dtype=np.float64, copy=True)
    out[np.asarray(indices)] = restricted(f, Y, diag)
    return out


def proden_loss(conf: np.ndarray, f, indices, diag: Counter | None = None) -> LossValue:
    return _weighted_ce(np.asarray(conf)[np.asarray(indices)], _batch(f), diag)


def cc_loss(f, Y, diag: Counter | None = None) -> LossValue:
    f = _batch(f)
    Y = np.atleast_2d(np.asarray(Y, dtype=bool))
    B = f.shape[0]
    mass = _clamp(np.where(Y, f, 0.0).sum(axis=1), diag)
    value = -float(np.log(mass).sum()) / B
    grad = np.where(Y, -1.0 / mass[:, None], 0.0) / B
    return LossValue(value, grad)


def lw_weights(f, Y) -> np.ndarray:
    """Non-candidate weights f_j / Σ_{k∉Y} f_k (zero rows when Y is full)."""
    f = _batch(f)
    Y = np.atleast_2d(np.asarray(Y, dtype=bool))
    neg = np.where(Y, 0.0, f)
    tot = neg.sum(axis=1, keepdims=True)
    return np.divide(neg, tot, out=np.zeros_like(neg), where=tot > 0)


def lw_loss(
    conf: np.ndarray,
    f,
    Y,
    beta_lw: float = 1.0,
    indices=None,
    weights: np.ndarray | None = None,
    diag: Counter | None = None,
) -> LossValue:
    """Candidate term weighted by ``conf`` plus β_lw·Σ_{j∉Y} w_j·(−log(1−f_j)).

    ``conf`` is the full matrix when ``indices`` is given, else the batch rows.
    """
    if beta_lw < 0:
        raise ConfigError("beta_lw must be non-negative")
    f = _batch(f)
    Y = np.atleast_2d(np.asarray(Y, dtype=bool))
    rows = np.asarray(conf)[np.asarray(indices)] if indices is not None else np.atleast_2d(conf)
    cand = _weighted_ce(np.where(Y, rows, 0.0), f, diag)
    if beta_lw == 0:
        return cand
    w = lw_weights(f, Y) if weights is None else weights
    B = f.shape[0]
    comp = _clamp(1.0 - f, diag)
    nz = w != 0
    value = -float(np.where(nz, w * np.log(comp), 0.0).sum()) / B
    grad = np.where(nz, w / comp, 0.0) / B
    return combine(cand, LossValue(value, grad), beta_lw)


def ramp(t: float, lam: float, t_prime: float) -> float:
    """min(t·λ/T′, λ)."""
    if t_prime <= 0:
        return lam
    return min(t * lam / t_prime, lam)


def pllcr_targets(f_views, Y, diag: Counter | None = None) -> np.ndarray:
    mean_view = np.mean([_batch(v) for v in f_views], axis=0)
    return restricted(mean_view, Y, diag)


def pllcr_loss(
    f_clean,
    f_views,
    Y,
    t: float,
    lam: float = 1.0,
    t_prime: float = 25.0,
    targets: np.ndarray | None = None,
    diag: Counter | None = None,
) -> LossValue:
    """Non-candidate supervision on the clean view plus ramped consistency on views."""
    f_clean = _batch(f_clean)
    Y = np.atleast_2d(np.asarray(Y, dtype=bool))
    B = f_clean.shape[0]
    comp = _clamp(1.0 - f_clean, diag)
    neg = ~Y
    sup_value = -float(np.where(neg, np.log(comp), 0.0).sum()) / B
    sup_grad = np.where(neg, 1.0 / comp, 0.0) / B
    K = len(f_views)
    if K < 1:
        raise ConfigError("pllcr needs at least one augmented view")
    d = pllcr_targets(f_views, Y, diag) if targets is None else targets
    gamma = ramp(t, lam, t_prime)
    cons_value = 0.0
    view_grads = []
    for view in f_views:
        lv = _weighted_ce(d, _batch(view), diag)
        cons_value += lv.value / K
        view_grads.append(gamma * lv.grad / K)
    return LossValue(sup_value + gamma * cons_value, sup_grad, view_grads)


def cavl_select(logits, Y) -> np.ndarray:
    """Argmax of logits over candidates (lowest index on ties)."""
    logits = np.atleast_2d(np.asarray(logits, dtype=np.float64))
    Y = np.atleast_2d(np.asarray(Y, dtype=bool))
    return np.argmax(np.where(Y, logits, -np.inf), axis=1)


def cavl_loss(f, logits, Y, diag: Counter | None = None) -> LossValue:
    return ce_loss(f, cavl_select(logits, Y), diag)


# --------------------------------------------------------------------- PiCO


@dataclass(frozen=True)
class PicoConfig:
    queue_size: int = 1024
    proto_momentum: float = 0.9
    target_blend: float = 0.9
    tau_c: float = 0.07
    cont_weight: float = 0.5


@dataclass
class PicoState:
    prototypes: np.ndarray       # (C, d) unit rows
    pseudo_targets: np.ndarray   # (N, C)
    queue_z: np.ndarray          # (Q, d)
    queue_y: np.ndarray          # (Q,)
    capacity: int
    proto_momentum: float

    def copy(self) -> "PicoState":
        return replace(
            self,
            prototypes=self.prototypes.copy(),
            pseudo_targets=self.pseudo_targets.copy(),
            queue_z=self.queue_z.copy(),
            queue_y=self.queue_y.copy(),
        )


def pico_init(embeddings, f, Y, capacity: int, proto_momentum: float = 0.9,
              diag: Counter | None = None) -> PicoState:
    """Prototypes from class means of embeddings under the restricted-argmax label."""
    z = np.atleast_2d(np.asarray(embeddings, dtype=np.float64))
    f = _batch(f)
    C = f.shape[1]
    targets = restricted(f, Y, diag)
    labels = np.argmax(targets, axis=1)
    protos = np.zeros((C, z.shape[1]))
    for c in range(C):
        members = labels == c
        if members.any():
            protos[c] = z[members].mean(axis=0)
        # Classes nobody selected get the mean of their candidate-holders.
        if np.linalg.norm(protos[c]) <= 1e-12:
            holders = np.asarray(Y, dtype=bool)[:, c]
            protos[c] = z[holders].mean(axis=0) if holders.any() else np.eye(z.shape[1])[c % z.shape[1]]
    return PicoState(
        prototypes=l2_normalize(protos),
        pseudo_targets=targets,
        queue_z=np.zeros((0, z.shape[1])),
        queue_y=np.zeros(0, dtype=np.int64),
        capacity=int(capacity),
        proto_momentum=float(proto_momentum),
    )


def update_pseudo_targets(state: PicoState, z, Y, indices, blend: float = 0.9) -> np.ndarray:
    """s ← blend·s + (1−blend)·one-hot(argmax_{c∈Y} ⟨z, μ_c⟩); returns the new batch rows."""
    z = np.atleast_2d(z)
    scores = np.where(np.asarray(Y, dtype=bool), z @ state.prototypes.T, -np.inf)
    hard = np.argmax(scores, axis=1)
    onehot = np.zeros((z.shape[0], state.prototypes.shape[0]))
    onehot[np.arange(z.shape[0]), hard] = 1.0
    idx = np.asarray(indices)
    rows = blend * state.pseudo_targets[idx] + (1.0 - blend) * onehot
    state.pseudo_targets[idx] = rows
    return rows


def supcon_loss(z, labels, queue_z, queue_y, tau_c: float) -> float:
    """InfoNCE of each query against the queue; positives share the pseudo label.

    Queries without any positive in the queue are skipped.
    """
    if queue_z.shape[0] == 0:
        return 0.0
    z = np.atleast_2d(z)
    logits = z @ queue_z.T / tau_c
    logits = logits - logits.max(axis=1, keepdims=True)
    log_prob = logits - np.log(np.exp(logits).sum(axis=1, keepdims=True))
    pos = np.asarray(labels)[:, None] == queue_y[None, :]
    has_pos = pos.any(axis=1)
    if not has_pos.any():
        return 0.0
    per_query = -(np.where(pos, log_prob, 0.0).sum(axis=1)[has_pos] / pos.sum(axis=1)[has_pos])
    return float(per_query.mean())


def pico_step(state: PicoState, f, embeddings, Y, indices, epoch: int,
              cfg: PicoConfig = PicoConfig(), diag: Counter | None = None) -> tuple[LossValue, PicoState]:
    """One PiCO batch: target update, classification loss, prototype EMA, contrastive term, enqueue.

    The embeddings are frozen here, so the contrastive term only contributes to
    the scalar, never to ``dL/df``.
    """
    state = state.copy()
    f = _batch(f)
    z = np.atleast_2d(np.asarray(embeddings, dtype=np.float64))
    Y = np.atleast_2d(np.asarray(Y, dtype=bool))
    rows = update_pseudo_targets(state, z, Y, indices, cfg.target_blend)
    loss = _weighted_ce(rows, f, diag)

    pseudo = cavl_select(f, Y)
    g = state.proto_momentum
    for zi, c in zip(z, pseudo):
        state.prototypes[c] = l2_normalize(g * state.prototypes[c] + (1.0 - g) * zi)

    if epoch > 0:
        cont = supcon_loss(z, pseudo, state.queue_z, state.queue_y, cfg.tau_c)
        loss = LossValue(loss.value + cfg.cont_weight * cont, loss.grad)

    state.queue_z = np.concatenate([state.queue_z, z])[-state.capacity:]
    state.queue_y = np.concatenate([state.queue_y, pseudo])[-state.capacity:]
    return loss, state
