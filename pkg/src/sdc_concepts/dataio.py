"""Matrix containers, trial tables, atlases, fold construction and voxel selection."""
from __future__ import annotations

import csv
import json
import os
import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .errors import (
    AtlasError,
    CorruptFile,
    DataError,
    EmptySelection,
    FormatError,
    NoiseCeilingError,
    SplitError,
)

MAGIC = b"SDCM"
VERSION = 1
_HEADER = struct.Struct("<4sHBBQQ")
# dtype code 1 (float64) is an extension used for model parameters
_DTYPES = {0: np.dtype("<f4"), 1: np.dtype("<f8")}
_CODES = {np.dtype("<f4"): 0, np.dtype("<f8"): 1}
SPACE_TAGS = ("clip", "things", "sdc", "other")
UNASSIGNED = -1


@dataclass
class EmbeddingMatrix:
    values: np.ndarray
    stimulus_ids: list
    space_tag: str = "other"

    def __post_init__(self):
        self.values = np.asarray(self.values)
        if self.values.ndim != 2 or self.values.shape[1] == 0:
            raise DataError(f"embedding matrix must be 2-D with cols > 0, got {self.values.shape}")
        if len(self.stimulus_ids) != self.values.shape[0]:
            raise DataError("stimulus_ids length does not match row count")
        if len(set(self.stimulus_ids)) != len(self.stimulus_ids):
            raise DataError("stimulus_ids must be unique")
        if self.space_tag not in SPACE_TAGS:
            raise DataError(f"unknown space tag {self.space_tag!r}")
        _check_finite(self.values)

    @property
    def shape(self):
        return self.values.shape

    def rows_for(self, stimulus_ids):
        index = {s: i for i, s in enumerate(self.stimulus_ids)}
        try:
            return np.array([index[s] for s in stimulus_ids], dtype=np.int64)
        except KeyError as exc:
            raise DataError(f"stimulus {exc.args[0]!r} missing from embedding matrix") from None


@dataclass
class ResponseMatrix:
    values: np.ndarray
    participant_id: str
    voxel_ids: np.ndarray

    def __post_init__(self):
        self.values = np.asarray(self.values)
        self.voxel_ids = np.asarray(self.voxel_ids, dtype=np.int64)
        if self.values.ndim != 2:
            raise DataError("response matrix must be 2-D")
        if self.voxel_ids.shape != (self.values.shape[1],):
            raise DataError("voxel_ids length does not match column count")
        if np.unique(self.voxel_ids).size != self.voxel_ids.size:
            raise DataError("voxel_ids must be unique")
        _check_finite(self.values)

    @property
    def shape(self):
        return self.values.shape

    def select(self, columns) -> "ResponseMatrix":
        columns = np.asarray(columns, dtype=np.int64)
        return ResponseMatrix(self.values[:, columns], self.participant_id, self.voxel_ids[columns])


def _check_finite(values):
    if not np.all(np.isfinite(values)):
        raise DataError("non-finite values in matrix")


# --- binary container -------------------------------------------------------

def write_array(path, values, dtype="<f4"):
    values = np.ascontiguousarray(values, dtype=np.dtype(dtype))
    if values.ndim != 2:
        raise DataError("only 2-D arrays can be stored")
    code = _CODES[values.dtype]
    with open(path, "wb") as fh:
        fh.write(_HEADER.pack(MAGIC, VERSION, code, 0, values.shape[0], values.shape[1]))
        fh.write(values.tobytes(order="C"))


def read_array(path) -> np.ndarray:
    raw = Path(path).read_bytes()
    if len(raw) < _HEADER.size:
        if raw[:4] != MAGIC[: len(raw)]:
            raise FormatError(f"{path}: bad magic")
        raise CorruptFile(f"{path}: truncated header")
    magic, version, code, order, rows, cols = _HEADER.unpack_from(raw)
    if magic != MAGIC:
        raise FormatError(f"{path}: bad magic {magic!r}")
    if version != VERSION:
        raise FormatError(f"{path}: unsupported version {version}")
    if code not in _DTYPES or order != 0:
        raise FormatError(f"{path}: unsupported dtype code {code} / order {order}")
    dtype = _DTYPES[code]
    expected = rows * cols * dtype.itemsize
    payload = raw[_HEADER.size:]
    if len(payload) != expected:
        raise CorruptFile(f"{path}: payload has {len(payload)} bytes, header implies {expected}")
    values = np.frombuffer(payload, dtype=dtype).reshape(rows, cols).copy()
    _check_finite(values)
    return values


def _meta_path(path):
    return Path(str(path) + ".meta.json")


def _dump_json(path, obj):
    Path(path).write_text(json.dumps(obj, sort_keys=True, indent=1) + "\n")


def store_matrix(path, matrix, dtype="<f4"):
    """Write a matrix and its ``.meta.json`` sidecar."""
    write_array(path, matrix.values, dtype=dtype)
    if isinstance(matrix, ResponseMatrix):
        meta = {"participant_id": matrix.participant_id,
                "voxel_ids": [int(v) for v in matrix.voxel_ids]}
    else:
        meta = {"space_tag": matrix.space_tag, "stimulus_ids": list(matrix.stimulus_ids)}
    _dump_json(_meta_path(path), meta)


def load_matrix(path):
    """Read a container; the sidecar decides between response and embedding matrices."""
    values = read_array(path)
    meta_file = _meta_path(path)
    meta = json.loads(meta_file.read_text()) if meta_file.exists() else {}
    if "participant_id" in meta:
        voxel_ids = meta.get("voxel_ids", list(range(values.shape[1])))
        return ResponseMatrix(values, str(meta["participant_id"]), np.asarray(voxel_ids, dtype=np.int64))
    ids = meta.get("stimulus_ids", [str(i) for i in range(values.shape[0])])
    return EmbeddingMatrix(values, list(ids), meta.get("space_tag", "other"))


# --- trial table ------------------------------------------------------------

TRIAL_HEADER = ["trial_row", "stimulus_id", "participant_id", "session", "repetition", "shared"]


@dataclass
class TrialTable:
    trial_row: np.ndarray
    stimulus_id: np.ndarray
    participant_id: np.ndarray
    session: np.ndarray
    repetition: np.ndarray
    shared: np.ndarray

    def __post_init__(self):
        self.trial_row = np.asarray(self.trial_row, dtype=np.int64)
        self.stimulus_id = np.asarray(self.stimulus_id, dtype=object)
        self.participant_id = np.asarray(self.participant_id, dtype=object)
        self.session = np.asarray(self.session, dtype=np.int64)
        self.repetition = np.asarray(self.repetition, dtype=np.int64)
        self.shared = np.asarray(self.shared, dtype=bool)
        n = self.trial_row.size
        if any(a.shape != (n,) for a in (self.stimulus_id, self.participant_id,
                                         self.session, self.repetition, self.shared)):
            raise DataError("trial table columns differ in length")
        self.validate()

    def __len__(self):
        return self.trial_row.size

    def validate(self):
        if np.any(self.repetition < 1):
            raise DataError("repetition values must be >= 1")
        keys = set()
        reps = {}
        for stim, pid, rep in zip(self.stimulus_id, self.participant_id, self.repetition):
            key = (stim, pid, int(rep))
            if key in keys:
                raise DataError(f"duplicate (stimulus, participant, repetition) {key}")
            keys.add(key)
            reps.setdefault((stim, pid), []).append(int(rep))
        for key, got in reps.items():
            if sorted(got) != list(range(1, len(got) + 1)):
                raise DataError(f"repetitions for {key} have gaps: {sorted(got)}")

    def participants(self):
        return sorted(set(self.participant_id))

    def subset(self, mask) -> "TrialTable":
        return TrialTable(self.trial_row[mask], self.stimulus_id[mask], self.participant_id[mask],
                          self.session[mask], self.repetition[mask], self.shared[mask])

    def for_participant(self, participant_id) -> "TrialTable":
        """Rows of one participant, ordered by ``trial_row``."""
        sub = self.subset(self.participant_id == participant_id)
        order = np.argsort(sub.trial_row, kind="stable")
        return sub.subset(order)


def read_trials(path) -> TrialTable:
    with open(path, newline="") as fh:
        reader = csv.reader(fh)
        header = next(reader, None)
        if header != TRIAL_HEADER:
            raise DataError(f"{path}: expected header {','.join(TRIAL_HEADER)}")
        cols = [[] for _ in TRIAL_HEADER]
        for lineno, row in enumerate(reader, start=2):
            if len(row) != len(TRIAL_HEADER):
                raise DataError(f"{path}:{lineno}: expected {len(TRIAL_HEADER)} fields")
            try:
                cols[0].append(int(row[0]))
                cols[1].append(row[1])
                cols[2].append(row[2])
                cols[3].append(int(row[3]))
                cols[4].append(int(row[4]))
                cols[5].append(_parse_bool(row[5]))
            except ValueError as exc:
                raise DataError(f"{path}:{lineno}: {exc}") from None
    return TrialTable(*cols)


def _parse_bool(text):
    low = text.strip().lower()
    if low in ("1", "true"):
        return True
    if low in ("0", "false"):
        return False
    raise ValueError(f"cannot parse boolean {text!r}")


def write_trials(path, trials: TrialTable):
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(TRIAL_HEADER)
        for row in zip(trials.trial_row, trials.stimulus_id, trials.participant_id,
                       trials.session, trials.repetition, trials.shared):
            w.writerow([int(row[0]), row[1], row[2], int(row[3]), int(row[4]), int(bool(row[5]))])


# --- atlas ------------------------------------------------------------------

@dataclass
class RoiAtlas:
    voxel_to_roi: dict
    n_rois: int = 360
    names: dict = field(default_factory=dict)

    def __post_init__(self):
        if self.n_rois <= 0:
            raise AtlasError("atlas needs at least one ROI")
        for vox, roi in self.voxel_to_roi.items():
            if roi != UNASSIGNED and not 0 <= roi < self.n_rois:
                raise AtlasError(f"voxel {vox}: roi {roi} outside 0..{self.n_rois - 1}")

    def lookup(self, voxels) -> np.ndarray:
        try:
            return np.array([self.voxel_to_roi[int(v)] for v in voxels], dtype=np.int64)
        except KeyError as exc:
            raise AtlasError(f"voxel {exc.args[0]} not in atlas") from None


def read_atlas(path, n_rois=None) -> RoiAtlas:
    mapping = {}
    with open(path, newline="") as fh:
        reader = csv.reader(fh)
        if next(reader, None) != ["voxel_index", "roi_id"]:
            raise DataError(f"{path}: expected header voxel_index,roi_id")
        for lineno, row in enumerate(reader, start=2):
            try:
                mapping[int(row[0])] = int(row[1])
            except (ValueError, IndexError):
                raise DataError(f"{path}:{lineno}: bad atlas row {row}") from None
    if n_rois is None:
        n_rois = max(360, max(mapping.values(), default=-1) + 1)
    return RoiAtlas(mapping, n_rois)


def write_atlas(path, atlas: RoiAtlas):
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["voxel_index", "roi_id"])
        for vox in sorted(atlas.voxel_to_roi):
            w.writerow([vox, atlas.voxel_to_roi[vox]])


# --- folds ------------------------------------------------------------------

@dataclass
class DatasetSplit:
    train_rows: np.ndarray
    val_rows: np.ndarray
    test_rows: np.ndarray
    seed: int
    val_stimuli: list = field(default_factory=list)
    test_stimuli: list = field(default_factory=list)

    def to_json(self):
        return {"seed": self.seed,
                "train_rows": [int(r) for r in self.train_rows],
                "val_rows": [int(r) for r in self.val_rows],
                "test_rows": [int(r) for r in self.test_rows],
                "val_stimuli": list(self.val_stimuli),
                "test_stimuli": list(self.test_stimuli)}

    @classmethod
    def from_json(cls, obj):
        return cls(np.asarray(obj["train_rows"], dtype=np.int64),
                   np.asarray(obj["val_rows"], dtype=np.int64),
                   np.asarray(obj["test_rows"], dtype=np.int64),
                   int(obj["seed"]), list(obj["val_stimuli"]), list(obj["test_stimuli"]))


def make_split(trials: TrialTable, val_size: int, test_size: int, seed: int) -> DatasetSplit:
    """Stimulus-level train/val/test folds for a single participant's trials.

    Stimuli seen fewer than the maximum number of times go to train. The test
    fold is drawn from shared, fully repeated stimuli; validation from the
    remaining fully repeated ones. Folds depend only on the inputs and seed.
    """
    if len(trials.participants()) > 1:
        raise SplitError("make_split expects the trials of a single participant")
    if val_size < 0 or test_size < 0:
        raise SplitError("fold sizes must be non-negative")
    counts = {}
    shared = {}
    for stim, flag in zip(trials.stimulus_id, trials.shared):
        counts[stim] = counts.get(stim, 0) + 1
        shared[stim] = shared.get(stim, False) or bool(flag)
    if not counts:
        raise SplitError("empty trial table")
    top = max(counts.values())
    full = sorted(s for s, c in counts.items() if c == top)
    if val_size + test_size > len(full):
        raise SplitError(f"need {val_size + test_size} fully repeated stimuli, have {len(full)}")
    full_shared = [s for s in full if shared[s]]
    if test_size > len(full_shared):
        raise SplitError(f"need {test_size} shared fully repeated stimuli, have {len(full_shared)}")

    rng = np.random.default_rng(seed)
    test = sorted(full_shared[i] for i in rng.choice(len(full_shared), test_size, replace=False))
    taken = set(test)
    rest = [s for s in full if s not in taken]
    val = sorted(rest[i] for i in rng.choice(len(rest), val_size, replace=False))
    val_set, test_set = set(val), taken
    in_val = np.array([s in val_set for s in trials.stimulus_id], dtype=bool)
    in_test = np.array([s in test_set for s in trials.stimulus_id], dtype=bool)
    rows = trials.trial_row
    return DatasetSplit(np.sort(rows[~in_val & ~in_test]), np.sort(rows[in_val]),
                        np.sort(rows[in_test]), int(seed), val, test)


# --- noise ceiling ----------------------------------------------------------

def nc_from_variances(signal_var, noise_var, mean_reps):
    """Percent of variance in an r-trial average explained by the stimulus."""
    signal_var = np.asarray(signal_var, dtype=np.float64)
    noise_var = np.asarray(noise_var, dtype=np.float64)
    # written as 100 / (1 + noise / (r * signal)) so zero noise gives exactly 100
    ok = signal_var > 0
    with np.errstate(invalid="ignore", divide="ignore"):
        ratio = noise_var / (mean_reps * np.where(ok, signal_var, 1.0))
        nc = np.where(ok, 100.0 / (1.0 + ratio), 0.0)
    return np.clip(nc, 0.0, 100.0)


def _group_rows(trials: TrialTable, rows):
    """Map response rows to stimulus groups: returns (stimulus ids, sorted rows, group starts)."""
    pos = {int(r): i for i, r in enumerate(trials.trial_row)}
    try:
        idx = np.array([pos[int(r)] for r in rows], dtype=np.int64)
    except KeyError as exc:
        raise DataError(f"row {exc.args[0]} has no trial record") from None
    stims = trials.stimulus_id[idx].astype(str)
    order = np.lexsort((np.asarray(rows), stims))
    stims = stims[order]
    starts = np.flatnonzero(np.r_[True, stims[1:] != stims[:-1]])
    return stims[starts], np.asarray(rows)[order], starts


def noise_ceiling(responses, trials: TrialTable, train_rows) -> np.ndarray:
    """Per-voxel noise ceiling (percent) from the repetition structure of ``train_rows``."""
    values = responses.values if isinstance(responses, ResponseMatrix) else np.asarray(responses)
    _, rows, starts = _group_rows(trials, train_rows)
    counts = np.diff(np.r_[starts, rows.size])
    keep = counts >= 2
    if not np.any(keep):
        raise NoiseCeilingError("no stimulus is repeated within the training rows")
    x = values[rows].astype(np.float64)
    # shift each group by its first repetition: identical repetitions give exactly zero spread
    shifted = x - np.repeat(x[starts], counts, axis=0)
    shift_means = np.add.reduceat(shifted, starts, axis=0) / counts[:, None]
    means = x[starts] + shift_means
    dev = shifted - np.repeat(shift_means, counts, axis=0)
    ss = np.add.reduceat(dev * dev, starts, axis=0)
    within = ss[keep] / (counts[keep] - 1)[:, None]
    noise_var = within.mean(axis=0)
    mean_reps = counts[keep].mean()
    if keep.sum() >= 2:
        between = means[keep].var(axis=0, ddof=1)
    else:
        between = np.zeros(values.shape[1])
    signal_var = np.maximum(0.0, between - noise_var / mean_reps)
    return nc_from_variances(signal_var, noise_var, mean_reps)


def select_voxels(nc, threshold) -> np.ndarray:
    """Indices with noise ceiling strictly above ``threshold``, ascending."""
    if not 0.0 <= threshold <= 100.0:
        raise ValueError("threshold must lie in [0, 100]")
    picked = np.flatnonzero(np.asarray(nc) > threshold)
    if picked.size == 0:
        raise EmptySelection(f"no voxel exceeds a noise ceiling of {threshold}%")
    return picked


# --- transforms -------------------------------------------------------------

@dataclass
class ZScore:
    mean: np.ndarray
    std: np.ndarray

    @classmethod
    def fit(cls, X):
        X = np.asarray(X, dtype=np.float64)
        std = X.std(axis=0)
        return cls(X.mean(axis=0), np.where(std > 0, std, 1.0))

    def apply(self, X):
        return (np.asarray(X, dtype=np.float64) - self.mean) / self.std


def average_repetitions(responses, trials: TrialTable, rows):
    """Average the rows of each stimulus; returns (stimulus ids sorted, n_stim x v)."""
    values = responses.values if isinstance(responses, ResponseMatrix) else np.asarray(responses)
    stims, rows, starts = _group_rows(trials, rows)
    counts = np.diff(np.r_[starts, rows.size])
    sums = np.add.reduceat(values[rows].astype(np.float64), starts, axis=0)
    return list(stims), sums / counts[:, None]


def trial_stimuli(trials: TrialTable, rows):
    """Stimulus id of each response row in ``rows``."""
    pos = {int(r): i for i, r in enumerate(trials.trial_row)}
    return [trials.stimulus_id[pos[int(r)]] for r in rows]


def ensure_dir(path):
    os.makedirs(path, exist_ok=True)
    return Path(path)
