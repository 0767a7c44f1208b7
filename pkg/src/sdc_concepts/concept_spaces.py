"""Linear concept heads: an interpretable ridge map with ReLU fine-tuning, and the
contrastively learned shared-decodable-concept head."""
from __future__ import annotations

import logging
from dataclasses import dataclass, field

import numpy as np
from scipy import linalg

from .decoder import Adam, infonce_loss, leaky_relu, leaky_relu_grad, topk_accuracy
from .errors import ShapeError, TrainingDiverged, ValidationError, ZeroVectorError

log = logging.getLogger(__name__)

SDC_COMPONENT_GRID = (32, 64, 128, 256, 512, 1024)


@dataclass
class ProjectionHead:
    W: np.ndarray  # c x d
    train_leaky_slope: float = 0.05
    space_tag: str = "sdc"
    meta: dict = field(default_factory=dict)

    @property
    def c(self):
        return self.W.shape[0]

    @property
    def d(self):
        return self.W.shape[1]


def apply_head(head: ProjectionHead, Y, mode="inference"):
    """Concept scores: ReLU at inference, leaky ReLU with the head's slope in training."""
    Y = np.asarray(Y, dtype=np.float64)
    if Y.ndim != 2 or Y.shape[1] != head.d:
        raise ShapeError(f"head expects {head.d} columns, got {Y.shape}")
    pre = Y @ head.W.T
    if mode == "inference":
        return np.maximum(pre, 0.0)
    if mode == "train":
        return leaky_relu(pre, head.train_leaky_slope)
    raise ValidationError(f"unknown mode {mode!r}")


def fit_things_map(U_avg, T, alpha=1.0) -> ProjectionHead:
    """argmin_W ||U W^T - T||^2 + alpha ||W||^2 (no intercept)."""
    U = np.asarray(U_avg, dtype=np.float64)
    T = np.asarray(T, dtype=np.float64)
    if U.ndim != 2 or T.ndim != 2 or U.shape[0] != T.shape[0]:
        raise ShapeError(f"row counts differ: {U.shape} vs {T.shape}")
    if alpha <= 0:
        raise ValidationError("alpha must be positive")
    A = U.T @ U
    A[np.diag_indices(A.shape[0])] += alpha
    Wt = linalg.solve(A, U.T @ T, assume_a="pos")
    return ProjectionHead(Wt.T.copy(), 0.0, "things", {"alpha": float(alpha)})


def relu_fit_loss(W, U, T):
    return float(np.mean((np.maximum(U @ W.T, 0.0) - T) ** 2))


def finetune_relu_head(head: ProjectionHead, U_avg, T, steps=500, lr=0.1) -> ProjectionHead:
    """Gradient descent on mean((ReLU(U W^T) - T)^2) starting from the ridge solution.

    The best iterate is returned, so the fitted loss never goes up.
    """
    U = np.asarray(U_avg, dtype=np.float64)
    T = np.asarray(T, dtype=np.float64)
    W = head.W.copy()
    best_W, best = W.copy(), relu_fit_loss(W, U, T)
    start = best
    for _ in range(steps):
        pre = U @ W.T
        resid = np.maximum(pre, 0.0) - T
        grad = (2.0 / resid.size) * ((resid * (pre > 0)).T @ U)
        W -= lr * grad
        loss = relu_fit_loss(W, U, T)
        if not np.isfinite(loss):
            raise TrainingDiverged("ReLU fine-tuning diverged")
        if loss < best:
            best, best_W = loss, W.copy()
    meta = dict(head.meta, finetune_steps=int(steps), finetune_lr=float(lr),
                loss_before=start, loss_after=best)
    return ProjectionHead(best_W, head.train_leaky_slope, head.space_tag, meta)


@dataclass
class PooledValSet:
    Y_clip_all: np.ndarray
    Y_brain_all: np.ndarray
    participant_of_row: np.ndarray

    def __post_init__(self):
        if self.Y_clip_all.shape != self.Y_brain_all.shape:
            raise ShapeError("pooled matrices must align")
        if self.participant_of_row.shape != (self.Y_clip_all.shape[0],):
            raise ShapeError("participant labels must match the row count")


def pool_validation(per_participant) -> PooledValSet:
    """Stack {participant: (Y_clip_val, Y_brain_val)} in sorted participant order."""
    keys = sorted(per_participant)
    clip = np.vstack([per_participant[k][0] for k in keys])
    brain = np.vstack([per_participant[k][1] for k in keys])
    labels = np.concatenate([[k] * len(per_participant[k][0]) for k in keys]).astype(object)
    return PooledValSet(np.asarray(clip, dtype=np.float64), np.asarray(brain, dtype=np.float64), labels)


def sdc_objective(W, Y_clip, Y_brain, slope=0.05, tau=1.0, symmetric=False):
    """Contrastive loss between leaky-ReLU projections of both views, and dLoss/dW."""
    pc = Y_clip @ W.T
    pb = Y_brain @ W.T
    q = leaky_relu(pc, slope)
    k = leaky_relu(pb, slope)
    loss, gq, gk = infonce_loss(q, k, tau)
    if symmetric:
        loss2, gk2, gq2 = infonce_loss(k, q, tau)
        loss, gq, gk = 0.5 * (loss + loss2), 0.5 * (gq + gq2), 0.5 * (gk + gk2)
    gq = gq * leaky_relu_grad(pc, slope)
    gk = gk * leaky_relu_grad(pb, slope)
    return loss, gq.T @ Y_clip + gk.T @ Y_brain


def fit_sdc(pooled: PooledValSet, c, iters=10000, batch=3000, lr=2e-4, slope=0.05, seed=0,
            symmetric=False, probe_every=500, adam=(0.9, 0.999, 1e-8)) -> ProjectionHead:
    """Adam on the contrastive objective over uniformly drawn pooled batches."""
    Yc, Yb = pooled.Y_clip_all, pooled.Y_brain_all
    n, d = Yc.shape
    if c < 1:
        raise ValidationError("c must be >= 1")
    if n < batch:
        raise ValidationError(f"pooled set has {n} rows, fewer than batch size {batch}")
    rng = np.random.default_rng(seed)
    W = rng.normal(0.0, 1.0 / np.sqrt(d), size=(c, d))
    probe = rng.choice(n, size=batch, replace=False)
    opt = Adam([W], *adam)
    probes = []
    for it in range(iters + 1):
        if (probe_every and it % probe_every == 0) or it == iters:
            probes.append((it, sdc_objective(W, Yc[probe], Yb[probe], slope, symmetric=symmetric)[0]))
        if it == iters:
            break
        idx = rng.choice(n, size=batch, replace=False)
        loss, grad = sdc_objective(W, Yc[idx], Yb[idx], slope, symmetric=symmetric)
        if not np.isfinite(loss):
            raise TrainingDiverged(f"SDC loss became {loss} at iteration {it}")
        opt.step([grad], lr)
    meta = {"iters": int(iters), "batch": int(batch), "lr": float(lr), "seed": int(seed),
            "symmetric": bool(symmetric), "probe_loss": [[int(i), float(v)] for i, v in probes]}
    return ProjectionHead(W, slope, "sdc", meta)


def space_topk(head: ProjectionHead, Y_true, Y_pred, k) -> float:
    """Top-k retrieval after mapping both sides through the head (inference mode)."""
    try:
        return topk_accuracy(apply_head(head, Y_true), apply_head(head, Y_pred), k)
    except ZeroVectorError as exc:
        raise ZeroVectorError(f"all-zero concept scores: {exc}", row=exc.row) from None
