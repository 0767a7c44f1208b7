"""Nearest-image lists, exact t-SNE layouts and the artifact manifest."""
from __future__ import annotations

import csv
import hashlib
import io
import json
import platform
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import kernels
from .concept_spaces import ProjectionHead, apply_head
from .errors import DegenerateInputError, SDCError, ShapeError, ValidationError

MANIFEST = "summary.json"


@dataclass
class ConceptImageReport:
    concept_index: int
    stimulus_ids: list
    scores: np.ndarray
    k: int


def top_images(head: ProjectionHead, embeddings, concept, k=10) -> ConceptImageReport:
    """Stimuli ranked by inference score on one concept; ties go to the smaller id."""
    Y = embeddings.values
    ids = np.asarray(embeddings.stimulus_ids, dtype=str)
    if not 0 <= concept < head.c:
        raise ShapeError(f"concept {concept} outside 0..{head.c - 1}")
    if not 1 <= k <= Y.shape[0]:
        raise ValidationError(f"k={k} must lie in [1, {Y.shape[0]}]")
    scores = apply_head(head, Y)[:, concept]
    order = np.lexsort((ids, -scores))[:k]
    return ConceptImageReport(int(concept), [str(s) for s in ids[order]], scores[order], int(k))


# --- t-SNE ------------------------------------------------------------------

@dataclass
class TsneLayout:
    points: np.ndarray
    perplexity: float
    iterations: int
    kl: float
    kl_history: np.ndarray = field(repr=False, default=None)


def _sqdist(X):
    sq = np.einsum("ij,ij->i", X, X)
    D = sq[:, None] + sq[None, :] - 2.0 * (X @ X.T)
    np.fill_diagonal(D, 0.0)
    return np.maximum(D, 0.0)


def joint_affinities(X, perplexity, tol=1e-5, max_steps=200):
    """Symmetrised input affinities with per-point bandwidths matched to ``perplexity``."""
    D = np.ascontiguousarray(_sqdist(np.asarray(X, dtype=np.float64)))
    m = D.shape[0]
    cond = np.zeros((m, m))
    gap = np.zeros(m)
    kernels.perplexity_search(D, float(perplexity), tol, max_steps, cond, gap)
    bad = np.flatnonzero(~(gap <= 100 * tol))
    if bad.size:
        raise DegenerateInputError(
            f"bandwidth search failed for {bad.size} points (first: {bad[0]}); duplicate-heavy input?")
    P = (cond + cond.T) / (2.0 * m)
    return np.maximum(P, np.finfo(np.float64).eps)


def _row_keys(X):
    return [int.from_bytes(hashlib.sha256(np.ascontiguousarray(row).tobytes()).digest()[:8], "little")
            for row in X]


def _initial_points(X, seed, init):
    m = X.shape[0]
    if init == "content":
        keys = _row_keys(X)
    elif init == "index":
        keys = range(m)
    else:
        raise ValidationError(f"unknown init {init!r}")
    out = np.empty((m, 2))
    for i, key in enumerate(keys):
        out[i] = np.random.default_rng([int(seed), key]).standard_normal(2)
    return 1e-4 * out


def _kl(P, Q):
    return float(np.sum(P * np.log(P / Q)))


def tsne(X, perplexity=30.0, iterations=1000, seed=0, learning_rate=200.0, exaggeration=12.0,
         exaggeration_iters=250, init="index", guard=True) -> TsneLayout:
    """Exact t-SNE with early exaggeration, momentum switching and adaptive gains.

    ``init="index"`` seeds each point's start from (seed, row index);
    ``init="content"`` from (seed, hash of the row) and optimises in an order
    fixed by those hashes, so permuting the input rows permutes the layout
    rows and nothing else.
    """
    X = np.asarray(X, dtype=np.float64)
    m = X.shape[0]
    if m > 5000:
        raise ValidationError("exact t-SNE is limited to 5000 points")
    if perplexity > m - 1:
        raise ValidationError(f"perplexity {perplexity} unreachable with {m} points")
    if guard and not perplexity < m / 3:
        raise ValidationError(f"perplexity must be below m/3 = {m / 3:.3g}")
    if init == "content":
        # run in a canonical row order so a permuted input yields exactly the permuted layout
        keys = _row_keys(X)
        order = np.array(sorted(range(m), key=lambda i: (keys[i], X[i].tobytes())), dtype=np.int64)
        layout = tsne(X[order], perplexity, iterations, seed, learning_rate, exaggeration, exaggeration_iters,
                      "canonical", guard)
        points = np.empty_like(layout.points)
        points[order] = layout.points
        layout.points = points
        return layout
    P = joint_affinities(X, perplexity)
    Y = _initial_points(X, seed, "content" if init == "canonical" else init)
    update = np.zeros_like(Y)
    gains = np.ones_like(Y)
    kl_hist = np.empty(iterations)
    for it in range(iterations):
        exag = exaggeration if it < exaggeration_iters else 1.0
        momentum = 0.5 if it < exaggeration_iters else 0.8
        num = 1.0 / (1.0 + _sqdist(Y))
        np.fill_diagonal(num, 0.0)
        Q = np.maximum(num / num.sum(), np.finfo(np.float64).eps)
        kl_hist[it] = _kl(P, Q)
        Wt = (exag * P - Q) * num
        grad = 4.0 * (Wt.sum(axis=1)[:, None] * Y - Wt @ Y)
        flip = np.sign(grad) != np.sign(update)
        gains = np.where(flip, gains + 0.2, gains * 0.8)
        np.maximum(gains, 0.01, out=gains)
        update = momentum * update - learning_rate * gains * grad
        Y = Y + update
        Y = Y - Y.mean(axis=0)
    if not np.all(np.isfinite(Y)):
        raise SDCError("t-SNE produced non-finite coordinates")
    num = 1.0 / (1.0 + _sqdist(Y))
    np.fill_diagonal(num, 0.0)
    kl = _kl(P, np.maximum(num / num.sum(), np.finfo(np.float64).eps))
    return TsneLayout(Y, float(perplexity), int(iterations), kl, kl_hist)


# --- artifacts --------------------------------------------------------------

def fmt(x):
    """Shortest round-tripping text for a float."""
    return repr(float(x))


def csv_text(header, rows):
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(header)
    w.writerows(rows)
    return buf.getvalue()


def top_images_csv(reports):
    rows = [[r.concept_index, rank + 1, sid, fmt(score)]
            for r in reports for rank, (sid, score) in enumerate(zip(r.stimulus_ids, r.scores))]
    return csv_text(["concept_index", "rank", "stimulus_id", "score"], rows)


def tsne_csv(entries):
    """``entries``: iterable of (concept_index, stimulus_ids, TsneLayout)."""
    rows = [[sid, fmt(x), fmt(y), concept]
            for concept, ids, layout in entries for sid, (x, y) in zip(ids, layout.points)]
    return csv_text(["stimulus_id", "x", "y", "concept_index"], rows)


def canonical_json(obj):
    return json.dumps(obj, sort_keys=True, indent=1, allow_nan=True) + "\n"


def config_hash(config) -> str:
    return hashlib.sha256(json.dumps(config, sort_keys=True).encode()).hexdigest()


def versions():
    import scipy
    from . import __version__
    return {"sdc_concepts": __version__, "numpy": np.__version__, "scipy": scipy.__version__,
            "python": platform.python_version(), "kernels": kernels.BACKEND}


def _sha256(path):
    return hashlib.sha256(Path(path).read_bytes()).hexdigest()


def write_artifact(out_dir, name, content):
    path = Path(out_dir) / name
    path.parent.mkdir(parents=True, exist_ok=True)
    if isinstance(content, bytes):
        path.write_bytes(content)
    elif isinstance(content, str):
        path.write_text(content)
    else:
        path.write_text(canonical_json(content))
    return path


def update_manifest(out_dir, stage, files, config=None, seeds=None):
    """Record ``files`` (paths relative to ``out_dir``) under ``stage`` in summary.json."""
    out_dir = Path(out_dir)
    path = out_dir / MANIFEST
    manifest = json.loads(path.read_text()) if path.exists() else {"stages": {}, "artifacts": {}}
    if config is not None:
        manifest["config_hash"] = config_hash(config)
    if seeds is not None:
        manifest.setdefault("seeds", {}).update(seeds)
    manifest["versions"] = versions()
    names = sorted(str(f) for f in files)
    manifest["stages"][stage] = names
    for name in names:
        manifest["artifacts"][name] = _sha256(out_dir / name)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(canonical_json(manifest))
    return manifest


def emit_report(out_dir, bundle=None, config=None, seeds=None, stage="report"):
    """Write every artifact in ``bundle`` (name -> str/bytes/JSON object) and the manifest."""
    bundle = bundle or {}
    for name in sorted(bundle):
        try:
            write_artifact(out_dir, name, bundle[name])
        except OSError as exc:
            raise SDCError(f"cannot write {Path(out_dir) / name}: {exc}") from exc
    return update_manifest(out_dir, stage, list(bundle), config or {}, seeds or {})
