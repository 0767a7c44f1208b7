"""Sparse voxel masks per concept and mask-to-concept specificity."""
from __future__ import annotations

import logging
from dataclasses import dataclass, field

import numpy as np

from . import kernels
from .decoder import decode
from .errors import ShapeError, ValidationError

log = logging.getLogger(__name__)

DEFAULT_ALPHA = 1e-3


@dataclass
class ConceptMask:
    participant_id: str
    concept_index: int
    lasso_weights: np.ndarray
    alpha: float
    voxel_ids: np.ndarray = None
    y_offset: float = 0.0
    sweeps: int = 0
    converged: bool = True
    max_delta: float = 0.0
    objective: np.ndarray = field(default=None, repr=False)

    def __post_init__(self):
        self.lasso_weights = np.asarray(self.lasso_weights, dtype=np.float64)
        if self.voxel_ids is None:
            self.voxel_ids = np.arange(self.lasso_weights.size)
        self.voxel_ids = np.asarray(self.voxel_ids, dtype=np.int64)

    @property
    def binary(self) -> np.ndarray:
        return (self.lasso_weights != 0).astype(np.int8)

    @property
    def support(self) -> np.ndarray:
        """Native voxel ids with a nonzero weight."""
        return self.voxel_ids[self.lasso_weights != 0]


def _prepare(X, y, center=True):
    X = np.asfortranarray(X, dtype=np.float64)
    y = np.asarray(y, dtype=np.float64)
    if X.ndim != 2 or y.shape != (X.shape[0],):
        raise ShapeError(f"X {X.shape} and y {y.shape} do not align")
    offset = float(y.mean()) if center else 0.0
    return X, y - offset, offset


def lasso_alpha_max(X, y, center=True) -> float:
    """Smallest penalty whose solution is all zeros: ||X^T y||_inf / n."""
    X, yc, _ = _prepare(X, y, center)
    dots = np.empty(X.shape[1])
    kernels.column_dots(X, yc, dots)
    return float(np.max(np.abs(dots * (1.0 / X.shape[0]))))


def fit_lasso_mask(X, y, alpha=DEFAULT_ALPHA, tol=1e-7, max_sweeps=10_000, participant_id="",
                   concept_index=0, voxel_ids=None, warm_start=None, center=True) -> ConceptMask:
    """Cyclic coordinate descent on (1/2n)||X m - y||^2 + alpha ||m||_1.

    ``y`` is centred first (the intercept is not penalised). Columns with
    zero variance keep a zero coefficient.
    """
    if alpha <= 0:
        raise ValidationError("alpha must be positive")
    X, yc, offset = _prepare(X, y, center)
    n, v = X.shape
    if n < 2:
        raise ValidationError("need at least two rows")
    w = np.zeros(v) if warm_start is None else np.array(warm_start, dtype=np.float64)
    col_sq = np.einsum("ij,ij->j", X, X) / n
    w[col_sq == 0] = 0.0
    r = yc - X @ w
    objective = np.empty(max_sweeps + 1)
    sweeps, max_delta = kernels.lasso_cd(X, r, w, col_sq, float(alpha), float(tol), int(max_sweeps), objective)
    converged = max_delta < tol
    if not converged:
        log.warning("lasso for %s/%d stopped after %d sweeps, max change %.2e",
                    participant_id, concept_index, sweeps, max_delta)
    return ConceptMask(participant_id, int(concept_index), w, float(alpha), voxel_ids, offset,
                       int(sweeps), bool(converged), float(max_delta), objective[:sweeps + 1].copy())


def lasso_objective(X, y, weights, alpha, center=True):
    X, yc, _ = _prepare(X, y, center)
    r = X @ weights - yc
    return 0.5 * (r @ r) / X.shape[0] + alpha * np.abs(weights).sum()


def kkt_check(X, y, mask: ConceptMask, center=True) -> float:
    """Largest violation of the lasso optimality conditions."""
    X, yc, _ = _prepare(X, y, center)
    w = mask.lasso_weights
    grad = X.T @ (X @ w - yc) / X.shape[0]
    active = w != 0
    viol = np.where(active, np.abs(grad + mask.alpha * np.sign(w)),
                    np.maximum(0.0, np.abs(grad) - mask.alpha))
    return float(viol.max()) if viol.size else 0.0


def lasso_path(X, y, alphas, **kwargs):
    """Warm-started fits along ``alphas`` in the given order."""
    out, warm = [], None
    for a in alphas:
        mask = fit_lasso_mask(X, y, a, warm_start=warm, **kwargs)
        out.append(mask)
        warm = mask.lasso_weights
    return out


# --- specificity ------------------------------------------------------------

@dataclass
class SpecificityMatrix:
    values: np.ndarray  # NaN where undefined
    participant_id: str = "AVERAGED"
    counts: np.ndarray = None

    @property
    def defined(self):
        return np.isfinite(self.values)


def pearson(a, b):
    a = a - a.mean()
    b = b - b.mean()
    den = np.sqrt((a @ a) * (b @ b))
    return float((a @ b) / den) if den > 0 else 0.0


def specificity_matrix(model, masks, X_test, Y_test, head, eps=1e-6) -> SpecificityMatrix:
    """Ratio of masked to unmasked decodability.

    Entry (i, j) correlates the true score on concept i with the score decoded
    from voxels in mask j only, relative to the correlation using all voxels.
    Rows whose unmasked correlation is below ``eps`` in magnitude are NaN.
    """
    W = head.W
    c = W.shape[0]
    by_concept = {m.concept_index: m for m in masks}
    missing = sorted(set(range(c)) - set(by_concept))
    if missing:
        raise ValidationError(f"masks missing for concepts {missing}")
    X_test = np.asarray(X_test, dtype=np.float64)
    true_scores = np.asarray(Y_test, dtype=np.float64) @ W.T
    full_scores = decode(model, X_test) @ W.T
    D = np.full((c, c), np.nan)
    denom = np.array([pearson(true_scores[:, i], full_scores[:, i]) for i in range(c)])
    for j in range(c):
        keep = by_concept[j].binary.astype(bool)
        if keep.size != X_test.shape[1]:
            raise ShapeError("mask length differs from voxel count")
        masked_scores = decode(model, X_test * keep) @ W.T
        for i in range(c):
            if abs(denom[i]) >= eps:
                D[i, j] = pearson(true_scores[:, i], masked_scores[:, i]) / denom[i]
    pid = masks[0].participant_id if masks else ""
    return SpecificityMatrix(D, pid)


def average_specificity(matrices) -> SpecificityMatrix:
    """Entrywise mean over the defined entries of each input."""
    if not matrices:
        raise ValidationError("nothing to average")
    shape = matrices[0].values.shape
    if any(m.values.shape != shape for m in matrices):
        raise ShapeError("specificity matrices differ in shape")
    # sorted so the sum does not depend on input order (NaNs sort last)
    stack = np.sort(np.stack([m.values for m in matrices]), axis=0)
    counts = np.isfinite(stack).sum(axis=0)
    total = np.where(np.isfinite(stack), stack, 0.0).sum(axis=0)
    with np.errstate(invalid="ignore", divide="ignore"):
        mean = np.where(counts > 0, total / np.maximum(counts, 1), np.nan)
    return SpecificityMatrix(mean, "AVERAGED", counts)


def diagonal_contrast(D: SpecificityMatrix):
    """(mean of defined diagonal, mean of defined off-diagonal)."""
    vals = D.values
    diag = np.eye(vals.shape[0], dtype=bool)
    ok = np.isfinite(vals)
    return float(vals[diag & ok].mean()), float(vals[~diag & ok].mean())
