"""Cross-participant consistency of concept masks via ROI fraction vectors."""
from __future__ import annotations

import logging
from dataclasses import dataclass, field
from itertools import combinations, permutations

import numpy as np

from .dataio import UNASSIGNED, RoiAtlas
from .errors import AtlasError, ConsistencyError, EmptyMaskError, GroupError, ZeroVectorError

log = logging.getLogger(__name__)

# 1-based concept indices of a 32-component head, grouped by localizer category
DEFAULT_LOCALIZER_GROUPS = {
    "face": (4, 5),
    "place": (8, 9, 10, 14, 32),
    "body": (2, 15, 16, 18, 24),
}
DEFAULT_GROUPS_INDEX_BASE = 1


@dataclass
class RoiFractionVector:
    values: np.ndarray
    participant_id: str = ""
    concept_index: int = 0


def roi_fractions(mask, atlas: RoiAtlas) -> RoiFractionVector:
    """Share of the mask's voxels falling in each ROI; unassigned voxels count toward no bin."""
    support = mask.support
    if support.size == 0:
        raise EmptyMaskError(f"mask {mask.participant_id}/{mask.concept_index} is empty")
    rois = atlas.lookup(support)
    rois = rois[rois != UNASSIGNED]
    counts = np.bincount(rois, minlength=atlas.n_rois).astype(np.float64)
    return RoiFractionVector(counts / support.size, mask.participant_id, mask.concept_index)


def cosine_sim(a, b) -> float:
    a = a.values if isinstance(a, RoiFractionVector) else np.asarray(a, dtype=np.float64)
    b = b.values if isinstance(b, RoiFractionVector) else np.asarray(b, dtype=np.float64)
    if a.shape != b.shape:
        raise AtlasError("fraction vectors have different lengths")
    na, nb = np.sqrt(a @ a), np.sqrt(b @ b)
    if na == 0 or nb == 0:
        raise ZeroVectorError("cosine similarity of a zero vector")
    return float(min(1.0, (a @ b) / (na * nb)))


@dataclass
class ConsistencyReport:
    concepts: list  # dicts: index, green, red, median_green, median_red, score
    ranking: list
    participants: list
    skipped: list = field(default_factory=list)

    def by_index(self, i):
        return next(c for c in self.concepts if c["index"] == i)

    def top(self, m=7):
        return self.ranking[:m]

    def to_json(self):
        return {
            "concepts": [{"index": c["index"], "green": c["green"], "red": c["red"], "score": c["score"],
                          "median_green": c["median_green"], "median_red": c["median_red"]}
                         for c in self.concepts],
            "ranking": self.ranking,
            "participants": self.participants,
            "skipped": [list(s) for s in self.skipped],
            "pair_counts": {"green": "S*(S-1)/2 (unordered participant pairs)",
                            "red": "(c-1)*S*(S-1) (ordered participant pairs s != t, every other concept j)"},
        }


def green_red(fractions) -> ConsistencyReport:
    """Within-concept (Green) and cross-concept (Red) cross-participant similarities.

    ``fractions`` maps (participant_id, concept) to a RoiFractionVector or None
    for a missing mask. Green pairs are unordered; Red uses ordered participant
    pairs because cossim(f_is, f_jt) and cossim(f_it, f_js) are different masks.
    Score = median(Green) - median(Red); ranking is by score descending.
    """
    participants = sorted({p for p, _ in fractions})
    concepts = sorted({c for _, c in fractions})
    if len(participants) < 2:
        raise ConsistencyError("need at least two participants")
    present = {key: f for key, f in fractions.items() if f is not None}
    skipped = sorted(key for key, f in fractions.items() if f is None)
    skipped += sorted((p, c) for p in participants for c in concepts if (p, c) not in fractions)
    for key in skipped:
        log.warning("no mask for participant %s concept %s; skipped", *key)

    rows = []
    for i in concepts:
        green = [cosine_sim(present[s, i], present[t, i])
                 for s, t in combinations(participants, 2)
                 if (s, i) in present and (t, i) in present]
        red = [cosine_sim(present[s, i], present[t, j])
               for s, t in permutations(participants, 2) for j in concepts
               if j != i and (s, i) in present and (t, j) in present]
        mg = float(np.median(green)) if green else float("nan")
        mr = float(np.median(red)) if red else float("nan")
        rows.append({"index": int(i), "green": green, "red": red,
                     "median_green": mg, "median_red": mr, "score": mg - mr})
    scored = [r for r in rows if np.isfinite(r["score"])]
    ranking = [r["index"] for r in sorted(scored, key=lambda r: (-r["score"], r["index"]))]
    return ConsistencyReport(rows, ranking, participants, skipped)


def fractions_for(masks, atlases):
    """Fraction vectors for every mask; empty masks map to None."""
    out = {}
    for m in masks:
        try:
            out[m.participant_id, m.concept_index] = roi_fractions(m, atlases[m.participant_id])
        except EmptyMaskError:
            out[m.participant_id, m.concept_index] = None
    return out


def localizer_overlap(masks, groups, localizers, index_base=0):
    """Voxels of each category's pooled masks falling in each localizer region.

    ``groups`` maps category -> concept indices (``index_base`` says whether they
    are 0- or 1-based); ``localizers`` maps participant -> RoiAtlas of
    functional regions. Returns per-participant counts plus the across-participant
    mean and standard error, each shaped categories x regions.
    """
    cats = list(groups)
    for cat in cats:
        if len(groups[cat]) == 0:
            raise GroupError(f"group {cat!r} is empty")
    by_pid = {}
    for m in masks:
        by_pid.setdefault(m.participant_id, {})[m.concept_index] = m
    pids = sorted(by_pid)
    if not pids:
        raise GroupError("no masks given")
    n_regions = max(localizers[p].n_rois for p in pids)
    counts = np.zeros((len(pids), len(cats), n_regions))
    for a, pid in enumerate(pids):
        for b, cat in enumerate(cats):
            idx = [int(i) - index_base for i in groups[cat]]
            bad = [i for i in idx if i not in by_pid[pid]]
            if bad:
                raise GroupError(f"group {cat!r} references concepts {bad} with no mask for {pid}")
            pooled = set()
            for i in idx:
                pooled.update(int(v) for v in by_pid[pid][i].support)
            if pooled:
                regions = localizers[pid].lookup(sorted(pooled))
                regions = regions[regions != UNASSIGNED]
                counts[a, b] = np.bincount(regions, minlength=n_regions)[:n_regions]
    mean = counts.mean(axis=0)
    sem = counts.std(axis=0, ddof=1) / np.sqrt(len(pids)) if len(pids) > 1 else np.zeros_like(mean)
    return {"participants": pids, "categories": cats, "counts": counts, "mean": mean, "sem": sem}
