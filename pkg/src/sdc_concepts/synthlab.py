"""Synthetic multi-participant data with planted concepts and known voxel supports."""
from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field

import numpy as np

from .dataio import (
    UNASSIGNED,
    EmbeddingMatrix,
    ResponseMatrix,
    RoiAtlas,
    TrialTable,
)
from .errors import SpecError

CONSISTENCY_MODES = ("consistent", "shuffled")


@dataclass
class SynthSpec:
    participants: int = 8
    stimuli: int = 1500
    reps: int = 3
    embed_dim: int = 64
    true_concepts: int = 8
    support_size: int = 25
    extra_voxels: int = 400
    noise_sigma: float = 1.0
    consistency_mode: str = "consistent"
    seed: int = 0
    nonlinearity: bool = True
    nonlinearity_gain: float = 1.0
    background_rois: int = 8
    things_classes: int = 400
    incomplete_fraction: float = 0.0
    trials_per_session: int = 750

    @property
    def voxels(self):
        return self.true_concepts * self.support_size + self.extra_voxels

    def validate(self):
        counts = dict(participants=self.participants, stimuli=self.stimuli, reps=self.reps,
                      embed_dim=self.embed_dim, true_concepts=self.true_concepts,
                      support_size=self.support_size, things_classes=self.things_classes,
                      trials_per_session=self.trials_per_session)
        for name, value in counts.items():
            if int(value) != value or value <= 0:
                raise SpecError(f"{name} must be a positive integer, got {value}")
        if self.extra_voxels < 0 or self.background_rois < 0:
            raise SpecError("extra_voxels and background_rois must be non-negative")
        if self.extra_voxels > 0 and self.background_rois == 0:
            raise SpecError("non-coding voxels need at least one background ROI")
        if self.true_concepts > self.embed_dim:
            raise SpecError("cannot plant more orthonormal concepts than embedding dimensions")
        if not self.noise_sigma >= 0:
            raise SpecError("noise_sigma must be >= 0")
        if self.consistency_mode not in CONSISTENCY_MODES:
            raise SpecError(f"consistency_mode must be one of {CONSISTENCY_MODES}")
        if not 0.0 <= self.incomplete_fraction < 1.0:
            raise SpecError("incomplete_fraction must lie in [0, 1)")

    def to_json(self):
        return asdict(self)


@dataclass
class SynthTruth:
    true_projection: np.ndarray
    supports: dict  # (participant_id, concept) -> sorted voxel ids
    atlases: dict  # participant_id -> RoiAtlas
    concept_roi: dict  # (participant_id, concept) -> roi id
    loadings: dict = field(default_factory=dict)

    def to_json(self, projection_path="true_projection.sdcm"):
        return {
            "true_projection": projection_path,
            "supports": [{"participant_id": p, "concept_index": int(c), "roi_id": int(self.concept_roi[p, c]),
                          "voxels": [int(v) for v in vox]}
                         for (p, c), vox in sorted(self.supports.items())],
            "atlas": {p: {"n_rois": a.n_rois} for p, a in sorted(self.atlases.items())},
        }


@dataclass
class SynthData:
    responses: dict  # participant_id -> ResponseMatrix
    embeddings: EmbeddingMatrix
    trials: TrialTable
    truth: SynthTruth
    things_embeddings: np.ndarray  # class-averaged embeddings, classes x d
    things_targets: np.ndarray  # nonnegative concept targets, classes x c*


def participant_ids(n):
    return [f"P{i + 1}" for i in range(n)]


def _unit_rows(rng, n, d):
    Y = rng.standard_normal((n, d))
    return Y / np.linalg.norm(Y, axis=1, keepdims=True)


def concept_drive(Y, W):
    """ReLU concept scores rescaled by sqrt(d) so unit-norm embeddings give O(1) drive."""
    return np.maximum(Y @ W.T, 0.0) * np.sqrt(Y.shape[1])


def _voxel_signal(drive, loading, nonlinearity, gain=1.0):
    out = loading * drive
    return np.tanh(gain * out) if nonlinearity else out


def coding_signal_variance(spec: SynthSpec, samples=200_000, seed=12345):
    """Monte-Carlo variance of a coding voxel's noiseless response, averaged over loadings."""
    rng = np.random.default_rng(seed)
    z = np.maximum(rng.standard_normal(samples), 0.0)
    a = rng.uniform(0.5, 1.5, size=64)
    return float(np.mean([_voxel_signal(z, ai, spec.nonlinearity, spec.nonlinearity_gain).var() for ai in a]))


def sigma_for_noise_ceiling(spec: SynthSpec, target_nc):
    """Trial noise std that puts the expected coding-voxel noise ceiling at ``target_nc`` percent."""
    if not 0 < target_nc < 100:
        raise SpecError("target noise ceiling must lie in (0, 100)")
    signal = coding_signal_variance(spec)
    return float(np.sqrt(spec.reps * signal * (100.0 / target_nc - 1.0)))


def generate(spec: SynthSpec) -> SynthData:
    """Draw a full dataset; identical specs give bit-identical outputs."""
    spec.validate()
    root = np.random.SeedSequence(spec.seed)
    shared_seq, *part_seqs = root.spawn(spec.participants + 1)
    rng = np.random.default_rng(shared_seq)

    d, c = spec.embed_dim, spec.true_concepts
    q, _ = np.linalg.qr(rng.standard_normal((d, c)))
    W = q.T.copy()
    Y = _unit_rows(rng, spec.stimuli, d)
    stim_ids = [f"s{i:05d}" for i in range(spec.stimuli)]
    drive = concept_drive(Y, W)

    # class-averaged embeddings and nonnegative targets standing in for an interpretable space
    U = _unit_rows(rng, spec.things_classes, d)
    T = np.maximum(U @ W.T, 0.0)

    v = spec.voxels
    bg_rois = np.arange(c, c + spec.background_rois)
    pids = participant_ids(spec.participants)
    responses, supports, atlases, concept_roi, loadings = {}, {}, {}, {}, {}
    cols = {k: [] for k in ("row", "stim", "pid", "session", "rep", "shared")}

    for s, (pid, seq) in enumerate(zip(pids, part_seqs)):
        prng = np.random.default_rng(seq)
        layout = prng.permutation(v)
        roi_of_voxel = np.full(v, UNASSIGNED, dtype=np.int64)
        signal = np.zeros((spec.stimuli, v))
        for i in range(c):
            vox = np.sort(layout[i * spec.support_size:(i + 1) * spec.support_size])
            roi = i if spec.consistency_mode == "consistent" else (i + s) % c
            sign = prng.choice([-1.0, 1.0])
            a = sign * prng.uniform(0.5, 1.5, size=vox.size)
            signal[:, vox] = _voxel_signal(drive[:, i:i + 1], a, spec.nonlinearity, spec.nonlinearity_gain)
            roi_of_voxel[vox] = roi
            supports[pid, i] = vox
            concept_roi[pid, i] = roi
            loadings[pid, i] = a
        noise_vox = layout[c * spec.support_size:]
        if noise_vox.size:
            roi_of_voxel[noise_vox] = prng.choice(bg_rois, size=noise_vox.size)

        reps = np.full(spec.stimuli, spec.reps)
        n_short = int(round(spec.incomplete_fraction * spec.stimuli))
        if n_short and spec.reps > 1:
            short = prng.choice(spec.stimuli, n_short, replace=False)
            reps[short] = prng.integers(1, spec.reps, size=n_short)
        stim_of_trial = prng.permutation(np.repeat(np.arange(spec.stimuli), reps))
        # repetition numbers follow presentation order
        rep_of_trial = _renumber_reps(stim_of_trial)
        noise = prng.standard_normal((stim_of_trial.size, v)) * spec.noise_sigma
        X = signal[stim_of_trial] + noise
        responses[pid] = ResponseMatrix(X, pid, np.arange(v))
        atlases[pid] = RoiAtlas({int(j): int(roi_of_voxel[j]) for j in range(v)}, c + spec.background_rois)

        n_trials = stim_of_trial.size
        cols["row"].append(np.arange(n_trials))
        cols["stim"].append(np.array(stim_ids, dtype=object)[stim_of_trial])
        cols["pid"].append(np.full(n_trials, pid, dtype=object))
        cols["session"].append(np.arange(n_trials) // spec.trials_per_session + 1)
        cols["rep"].append(rep_of_trial)
        cols["shared"].append(np.ones(n_trials, dtype=bool))

    trials = TrialTable(*(np.concatenate(cols[k]) for k in ("row", "stim", "pid", "session", "rep", "shared")))
    truth = SynthTruth(W, supports, atlases, concept_roi, loadings)
    return SynthData(responses, EmbeddingMatrix(Y, stim_ids, "clip"), trials, truth, U, T)


def _renumber_reps(stim_of_trial):
    seen = {}
    out = np.empty(stim_of_trial.size, dtype=np.int64)
    for t, stim in enumerate(stim_of_trial):
        seen[stim] = seen.get(stim, 0) + 1
        out[t] = seen[stim]
    return out


def jaccard(mask_a, mask_b) -> float:
    a, b = set(int(x) for x in mask_a), set(int(x) for x in mask_b)
    if not a and not b:
        return 1.0
    return len(a & b) / len(a | b)


def write_dataset(data: SynthData, out_dir, spec: SynthSpec = None):
    """Write a generated dataset in the standard on-disk layout; returns written paths."""
    from pathlib import Path

    from .dataio import store_matrix, write_array, write_atlas, write_trials

    out = Path(out_dir)
    for sub in ("responses", "atlas", "localizer"):
        (out / sub).mkdir(parents=True, exist_ok=True)
    written = [out / "embeddings.sdcm", out / "trials.csv"]
    store_matrix(written[0], data.embeddings)
    write_trials(written[1], data.trials)
    c = data.truth.true_projection.shape[0]
    for pid, resp in sorted(data.responses.items()):
        store_matrix(out / "responses" / f"{pid}.sdcm", resp)
        write_atlas(out / "atlas" / f"{pid}.csv", data.truth.atlases[pid])
        # functional localizer: one region per planted concept, covering its support
        regions = {int(v): UNASSIGNED for v in resp.voxel_ids}
        regions.update({int(v): i for (p, i), vox in data.truth.supports.items() if p == pid for v in vox})
        write_atlas(out / "localizer" / f"{pid}.csv", RoiAtlas(regions, c))
        written += [out / "responses" / f"{pid}.sdcm", out / "atlas" / f"{pid}.csv", out / "localizer" / f"{pid}.csv"]
    write_array(out / "things_embeddings.sdcm", data.things_embeddings, dtype="<f8")
    write_array(out / "things_targets.sdcm", data.things_targets, dtype="<f8")
    write_array(out / "true_projection.sdcm", data.truth.true_projection, dtype="<f8")
    (out / "truth.json").write_text(json.dumps(data.truth.to_json(), sort_keys=True, indent=1) + "\n")
    written += [out / n for n in ("things_embeddings.sdcm", "things_targets.sdcm", "true_projection.sdcm",
                                  "truth.json")]
    if spec is not None:
        (out / "synth_spec.json").write_text(json.dumps(spec.to_json(), sort_keys=True, indent=1) + "\n")
        written.append(out / "synth_spec.json")
    return written
