"""File-backed pipeline stages shared by the CLI subcommands.

Every stage reads the data directory plus earlier stage outputs from the
output directory, writes its own artifacts and records them in the
``summary.json`` manifest.
"""
from __future__ import annotations

import json
import logging
from dataclasses import asdict, dataclass, field, fields
from functools import cached_property
from pathlib import Path

import numpy as np

from . import dataio, reporter
from .concept_spaces import (
    ProjectionHead,
    finetune_relu_head,
    fit_sdc,
    fit_things_map,
    pool_validation,
    space_topk,
)
from .consistency import fractions_for, green_red, localizer_overlap
from .dataio import EmbeddingMatrix, ResponseMatrix
from .decoder import (
    RIDGE_GRID,
    DecoderMLP,
    RidgeModel,
    TrainConfig,
    chance_accuracy,
    decode,
    topk_accuracy,
    train_mlp,
    train_ridge,
)
from .errors import SDCError, ValidationError, ZeroVectorError
from .mask_finder import ConceptMask, average_specificity, diagonal_contrast, fit_lasso_mask, specificity_matrix
from .reporter import csv_text, fmt
from .synthlab import jaccard

log = logging.getLogger(__name__)

STAGES = ("split", "noise-ceiling", "train-decoder", "fit-things", "fit-sdc", "eval-topk",
          "fit-masks", "specificity", "consistency", "report")

DEFAULT_PATHS = {
    "responses": "responses/{participant}.sdcm",
    "embeddings": "embeddings.sdcm",
    "trials": "trials.csv",
    "atlas": "atlas/{participant}.csv",
    "localizer": "localizer/{participant}.csv",
    "things_embeddings": "things_embeddings.sdcm",
    "things_targets": "things_targets.sdcm",
    "truth": "truth.json",
}


class PipelineAssertion(SDCError):
    """A built-in consistency check on the produced artifacts failed."""


@dataclass
class PipelineConfig:
    """Desk-scale defaults; see ``full_scale`` for the full-size settings."""

    data_dir: str = "data"
    out_dir: str = "out"
    paths: dict = field(default_factory=lambda: dict(DEFAULT_PATHS))
    participants: list = None
    val_size: int = 500
    test_size: int = 200
    split_seed: int = 0
    nc_threshold: float = 5.0
    hidden: int = 1024
    decoder: dict = field(default_factory=lambda: TrainConfig(lr_init=1e-3).to_json())
    ridge_grid: list = field(default_factory=lambda: list(RIDGE_GRID))
    things_alpha: float = 1.0
    things_finetune_steps: int = 500
    things_lr: float = 0.05
    sdc_c: int = 16
    sdc_iters: int = 1000
    sdc_batch: int = 256
    sdc_lr: float = 2e-3
    sdc_slope: float = 0.05
    sdc_seed: int = 0
    sdc_symmetric: bool = False
    lasso_alpha: float = 5e-3
    lasso_tol: float = 1e-7
    lasso_max_sweeps: int = 10_000
    mask_heads: list = field(default_factory=lambda: ["sdc", "things"])
    topk_ks: list = field(default_factory=lambda: [1, 5, 10])
    consistency_top_m: int = 7
    localizer_groups: dict = None
    localizer_index_base: int = 0
    top_k: int = 10
    tsne_top_k: int = 250
    tsne_perplexity: float = 30.0
    tsne_iterations: int = 1000
    tsne_seed: int = 0
    tsne_concepts: list = None
    strict: bool = False
    threads: int = None

    @classmethod
    def from_json(cls, obj):
        known = {f.name for f in fields(cls)}
        unknown = sorted(set(obj) - known)
        if unknown:
            raise ValidationError(f"unknown config fields: {unknown}")
        cfg = cls(**obj)
        cfg.paths = dict(DEFAULT_PATHS, **(obj.get("paths") or {}))
        cfg.decoder = dict(TrainConfig(lr_init=1e-3).to_json(), **(obj.get("decoder") or {}))
        return cfg

    @classmethod
    def load(cls, path):
        try:
            return cls.from_json(json.loads(Path(path).read_text()))
        except json.JSONDecodeError as exc:
            raise ValidationError(f"{path}: invalid JSON ({exc})") from None

    def to_json(self):
        return asdict(self)

    def train_config(self) -> TrainConfig:
        return TrainConfig(**self.decoder)

    def seeds(self):
        return {"split": self.split_seed, "decoder": int(self.decoder["seed"]),
                "sdc": self.sdc_seed, "tsne": self.tsne_seed}

    def set_seed(self, seed):
        self.split_seed = self.sdc_seed = self.tsne_seed = int(seed)
        self.decoder = dict(self.decoder, seed=int(seed))

    def hashed(self):
        """Config fields that influence artifacts (runtime knobs excluded)."""
        out = self.to_json()
        for key in ("threads", "data_dir", "out_dir"):
            out.pop(key)
        return out


def full_scale(**overrides) -> PipelineConfig:
    """Settings reported for the full natural-scenes analysis."""
    cfg = PipelineConfig(val_size=1000, test_size=1000, hidden=5000, decoder=TrainConfig().to_json(),
                         sdc_c=32, sdc_iters=10_000, sdc_batch=3000, sdc_lr=2e-4, lasso_alpha=1e-3)
    for key, value in overrides.items():
        setattr(cfg, key, value)
    return cfg


@dataclass
class Prepared:
    voxel_ids: np.ndarray
    X_train: np.ndarray
    Y_train: np.ndarray
    val_ids: list
    X_val: np.ndarray
    Y_val: np.ndarray
    test_ids: list
    X_test: np.ndarray
    Y_test: np.ndarray


def _write_json(path, obj):
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(reporter.canonical_json(obj))


class Workspace:
    """Lazy access to inputs and to the outputs of earlier stages."""

    def __init__(self, cfg: PipelineConfig):
        self.cfg = cfg
        self.data = Path(cfg.data_dir)
        self.out = Path(cfg.out_dir)
        self._prepared = {}

    def input_path(self, key, participant=None):
        return self.data / self.cfg.paths[key].format(participant=participant)

    def require(self, path):
        if not Path(path).exists():
            raise SDCError(f"missing input {path}")
        return path

    @cached_property
    def trials(self):
        return dataio.read_trials(self.require(self.input_path("trials")))

    @cached_property
    def embeddings(self) -> EmbeddingMatrix:
        return dataio.load_matrix(self.require(self.input_path("embeddings")))

    @cached_property
    def participants(self):
        return sorted(self.cfg.participants) if self.cfg.participants else self.trials.participants()

    def responses(self, pid) -> ResponseMatrix:
        m = dataio.load_matrix(self.require(self.input_path("responses", pid)))
        if not isinstance(m, ResponseMatrix):
            raise SDCError(f"{self.input_path('responses', pid)} lacks participant metadata")
        return m

    def atlas(self, pid):
        return dataio.read_atlas(self.require(self.input_path("atlas", pid)))

    def localizer(self, pid):
        path = self.input_path("localizer", pid)
        if not path.exists():
            return None
        loc = dataio.read_atlas(path)
        return dataio.RoiAtlas(loc.voxel_to_roi, max(loc.voxel_to_roi.values(), default=0) + 1)

    @cached_property
    def truth(self):
        path = self.input_path("truth")
        return json.loads(path.read_text()) if path.exists() else None

    # -- stage outputs --

    def read_out_json(self, name):
        path = self.out / name
        if not path.exists():
            raise SDCError(f"{path} not found; run the stage that produces it first")
        return json.loads(path.read_text())

    @cached_property
    def splits(self):
        return {p: dataio.DatasetSplit.from_json(s) for p, s in self.read_out_json("splits.json").items()}

    @cached_property
    def selected(self):
        return {p: np.asarray(v, dtype=np.int64) for p, v in self.read_out_json("selected_voxels.json").items()}

    def prepared(self, pid) -> Prepared:
        if pid not in self._prepared:
            self._prepared[pid] = self._prepare(pid)
        return self._prepared[pid]

    def _prepare(self, pid):
        trials = self.trials.for_participant(pid)
        split = self.splits[pid]
        resp = self.responses(pid)
        col = {int(v): i for i, v in enumerate(resp.voxel_ids)}
        resp = resp.select([col[int(v)] for v in self.selected[pid]])
        z = dataio.ZScore.fit(resp.values[split.train_rows])
        emb = self.embeddings
        X_train = z.apply(resp.values[split.train_rows])
        Y_train = emb.values[emb.rows_for(dataio.trial_stimuli(trials, split.train_rows))].astype(np.float64)
        val_ids, X_val = dataio.average_repetitions(resp, trials, split.val_rows) if split.val_rows.size else ([], None)
        test_ids, X_test = dataio.average_repetitions(resp, trials, split.test_rows)
        Y_val = emb.values[emb.rows_for(val_ids)].astype(np.float64) if val_ids else None
        return Prepared(resp.voxel_ids, X_train, Y_train, val_ids,
                        z.apply(X_val) if X_val is not None else None, Y_val,
                        test_ids, z.apply(X_test), emb.values[emb.rows_for(test_ids)].astype(np.float64))

    def model(self, pid) -> DecoderMLP:
        d = self.out / "models" / pid
        meta = json.loads((d / "model.json").read_text())
        p = {k: dataio.read_array(d / f"{k}.sdcm") for k in ("W1", "b1", "W2", "b2")}
        return DecoderMLP(p["W1"], p["b1"][0], p["W2"], p["b2"][0], meta["slope"], meta["history"])

    def ridge(self, pid) -> RidgeModel:
        d = self.out / "ridge" / pid
        meta = json.loads((d / "ridge.json").read_text())
        return RidgeModel(dataio.read_array(d / "W.sdcm"), dataio.read_array(d / "b.sdcm")[0],
                          meta["lambda"], meta["selection"])

    def head(self, name) -> ProjectionHead:
        if name == "truth":
            if self.truth is None:
                raise SDCError("head 'truth' needs a truth.json in the data directory")
            W = dataio.read_array(self.data / self.truth["true_projection"]).astype(np.float64)
            return ProjectionHead(W, 0.0, "other", {"source": "planted"})
        d = self.out / "heads" / name
        if not (d / "head.json").exists():
            raise SDCError(f"head {name!r} has not been fitted")
        meta = json.loads((d / "head.json").read_text())
        return ProjectionHead(dataio.read_array(d / "W.sdcm"), meta["slope"], meta["space_tag"], meta["meta"])

    def masks(self, head_name):
        """{participant: [ConceptMask]} rebuilt from the masks CSV and its JSON record."""
        record = self.read_out_json(f"masks_{head_name}.json")
        weights = {}
        with open(self.out / f"masks_{head_name}.csv") as fh:
            next(fh)
            for line in fh:
                pid, concept, vox, w = line.rstrip("\n").split(",")
                weights.setdefault((pid, int(concept)), {})[int(vox)] = float(w)
        out = {}
        for entry in record["masks"]:
            pid, concept = entry["participant_id"], entry["concept_index"]
            vox = self.selected[pid]
            w = np.zeros(vox.size)
            pos = {int(v): i for i, v in enumerate(vox)}
            for v, val in weights.get((pid, concept), {}).items():
                w[pos[v]] = val
            out.setdefault(pid, []).append(ConceptMask(pid, concept, w, entry["alpha"], vox, entry["y_offset"],
                                                       entry["sweeps"], entry["converged"], entry["max_delta"]))
        return out


# --- stages -------------------------------------------------------------------

def stage_split(ws: Workspace):
    cfg = ws.cfg
    splits = {pid: dataio.make_split(ws.trials.for_participant(pid), cfg.val_size, cfg.test_size, cfg.split_seed)
              for pid in ws.participants}
    _write_json(ws.out / "splits.json", {p: s.to_json() for p, s in splits.items()})
    return ["splits.json"]


def stage_noise_ceiling(ws: Workspace):
    rows, selected = [], {}
    for pid in ws.participants:
        resp = ws.responses(pid)
        nc = dataio.noise_ceiling(resp, ws.trials.for_participant(pid), ws.splits[pid].train_rows)
        picked = dataio.select_voxels(nc, ws.cfg.nc_threshold)
        flags = np.zeros(nc.size, dtype=bool)
        flags[picked] = True
        rows += [[pid, int(v), fmt(x), int(f)] for v, x, f in zip(resp.voxel_ids, nc, flags)]
        selected[pid] = [int(v) for v in resp.voxel_ids[picked]]
    (ws.out / "noise_ceiling.csv").write_text(csv_text(["participant_id", "voxel_index", "nc", "selected"], rows))
    _write_json(ws.out / "selected_voxels.json", selected)
    return ["noise_ceiling.csv", "selected_voxels.json"]


def stage_train_decoder(ws: Workspace):
    cfg = ws.cfg
    tcfg = cfg.train_config()
    files = []
    for pid in ws.participants:
        prep = ws.prepared(pid)
        model = train_mlp(prep.X_train, prep.Y_train, tcfg, cfg.hidden)
        d = ws.out / "models" / pid
        d.mkdir(parents=True, exist_ok=True)
        for name, arr in zip(("W1", "b1", "W2", "b2"), model.params()):
            dataio.write_array(d / f"{name}.sdcm", np.atleast_2d(arr), dtype="<f8")
            files.append(f"models/{pid}/{name}.sdcm")
        v, h, dim = model.dims
        _write_json(d / "model.json", {"hidden": h, "dims": {"voxels": v, "hidden": h, "embedding": dim},
                                       "slope": model.leaky_slope, "train_config": tcfg.to_json(),
                                       "final_loss": model.history[-1], "history": model.history,
                                       "voxel_ids": [int(x) for x in prep.voxel_ids]})
        files.append(f"models/{pid}/model.json")

        if prep.X_val is None:
            raise SDCError("ridge selection needs a non-empty validation fold")
        ridge = train_ridge(prep.X_train, prep.Y_train, cfg.ridge_grid, prep.X_val, prep.Y_val)
        rd = ws.out / "ridge" / pid
        rd.mkdir(parents=True, exist_ok=True)
        dataio.write_array(rd / "W.sdcm", ridge.W, dtype="<f8")
        dataio.write_array(rd / "b.sdcm", ridge.b[None, :], dtype="<f8")
        _write_json(rd / "ridge.json", {"lambda": ridge.lam, "selection": ridge.selection})
        files += [f"ridge/{pid}/W.sdcm", f"ridge/{pid}/b.sdcm", f"ridge/{pid}/ridge.json"]
    return files


def _save_head(ws, name, head):
    d = ws.out / "heads" / name
    d.mkdir(parents=True, exist_ok=True)
    dataio.write_array(d / "W.sdcm", head.W, dtype="<f8")
    _write_json(d / "head.json", {"c": head.c, "d": head.d, "slope": head.train_leaky_slope,
                                  "space_tag": head.space_tag, "meta": head.meta})
    return [f"heads/{name}/W.sdcm", f"heads/{name}/head.json"]


def stage_fit_things(ws: Workspace):
    cfg = ws.cfg
    U = dataio.read_array(ws.require(ws.input_path("things_embeddings"))).astype(np.float64)
    T = dataio.read_array(ws.require(ws.input_path("things_targets"))).astype(np.float64)
    head = fit_things_map(U, T, cfg.things_alpha)
    head = finetune_relu_head(head, U, T, cfg.things_finetune_steps, cfg.things_lr)
    return _save_head(ws, "things", head)


def stage_fit_sdc(ws: Workspace):
    cfg = ws.cfg
    per = {}
    for pid in ws.participants:
        prep = ws.prepared(pid)
        per[pid] = (prep.Y_val, decode(ws.model(pid), prep.X_val))
    head = fit_sdc(pool_validation(per), cfg.sdc_c, cfg.sdc_iters, cfg.sdc_batch, cfg.sdc_lr,
                   cfg.sdc_slope, cfg.sdc_seed, cfg.sdc_symmetric)
    return _save_head(ws, "sdc", head)


def _available_heads(ws):
    return [h for h in ("things", "sdc") if (ws.out / "heads" / h / "head.json").exists()]


def stage_eval_topk(ws: Workspace, ks=None):
    ks = list(ks or ws.cfg.topk_ks)
    heads = {name: ws.head(name) for name in _available_heads(ws)}
    rows = []
    for pid in ws.participants:
        prep = ws.prepared(pid)
        n = prep.Y_test.shape[0]
        bad = [k for k in ks if not 1 <= k <= n]
        if bad:
            raise ValidationError(f"k values {bad} invalid for {n} test items")
        preds = {"mlp": decode(ws.model(pid), prep.X_test), "ridge": ws.ridge(pid).predict(prep.X_test)}
        for model_name, pred in preds.items():
            for k in ks:
                rows.append([pid, model_name, "clip", k, fmt(topk_accuracy(prep.Y_test, pred, k)),
                             fmt(chance_accuracy(k, n)), n])
            for head_name, head in heads.items():
                for k in ks:
                    try:
                        acc = fmt(space_topk(head, prep.Y_test, pred, k))
                    except ZeroVectorError as exc:
                        log.warning("%s/%s in %s space: %s", pid, model_name, head_name, exc)
                        acc = "nan"
                    rows.append([pid, model_name, head_name, k, acc, fmt(chance_accuracy(k, n)), n])
    (ws.out / "topk.csv").write_text(
        csv_text(["participant_id", "model", "space", "k", "accuracy", "chance", "n"], rows))
    return ["topk.csv"]


def stage_fit_masks(ws: Workspace):
    cfg = ws.cfg
    files = []
    for name in cfg.mask_heads:
        head = ws.head(name)
        rows, record = [], []
        for pid in ws.participants:
            prep = ws.prepared(pid)
            targets = prep.Y_val @ head.W.T
            for i in range(head.c):
                m = fit_lasso_mask(prep.X_val, targets[:, i], cfg.lasso_alpha, cfg.lasso_tol, cfg.lasso_max_sweeps,
                                   participant_id=pid, concept_index=i, voxel_ids=prep.voxel_ids)
                nz = np.flatnonzero(m.lasso_weights)
                rows += [[pid, i, int(m.voxel_ids[j]), fmt(m.lasso_weights[j])] for j in nz]
                record.append({"participant_id": pid, "concept_index": i, "alpha": m.alpha, "y_offset": m.y_offset,
                               "sweeps": m.sweeps, "converged": m.converged, "max_delta": m.max_delta,
                               "support_size": int(nz.size)})
        (ws.out / f"masks_{name}.csv").write_text(
            csv_text(["participant_id", "concept_index", "voxel_index", "weight"], rows))
        _write_json(ws.out / f"masks_{name}.json", {"head": name, "masks": record})
        files += [f"masks_{name}.csv", f"masks_{name}.json"]
    return files


def specificity_csv(D):
    c = D.values.shape[0]
    rows = [[i] + [fmt(x) for x in D.values[i]] for i in range(c)]
    return csv_text(["concept"] + [str(j) for j in range(c)], rows)


def stage_specificity(ws: Workspace):
    files = []
    for name in ws.cfg.mask_heads:
        head = ws.head(name)
        masks = ws.masks(name)
        mats = []
        for pid in ws.participants:
            prep = ws.prepared(pid)
            D = specificity_matrix(ws.model(pid), masks[pid], prep.X_test, prep.Y_test, head)
            mats.append(D)
            fname = f"specificity/{name}_{pid}.csv"
            reporter.write_artifact(ws.out, fname, specificity_csv(D))
            files.append(fname)
        avg = average_specificity(mats)
        reporter.write_artifact(ws.out, f"specificity/{name}_avg.csv", specificity_csv(avg))
        diag, off = diagonal_contrast(avg)
        reporter.write_artifact(ws.out, f"specificity/{name}_contrast.json",
                                {"mean_diagonal": diag, "mean_off_diagonal": off, "participants": len(mats)})
        files += [f"specificity/{name}_avg.csv", f"specificity/{name}_contrast.json"]
    return files


def stage_consistency(ws: Workspace):
    cfg = ws.cfg
    files = []
    atlases = {pid: ws.atlas(pid) for pid in ws.participants}
    for name in cfg.mask_heads:
        masks = [m for pid in ws.participants for m in ws.masks(name)[pid]]
        report = green_red(fractions_for(masks, atlases))
        obj = report.to_json()
        obj["top"] = report.top(cfg.consistency_top_m)
        _write_json(ws.out / f"consistency_{name}.json", obj)
        rows = [[c["index"], kind, fmt(v)] for c in report.concepts
                for kind in ("green", "red") for v in c[kind]]
        (ws.out / f"consistency_{name}.csv").write_text(csv_text(["concept_index", "set", "cosine"], rows))
        files += [f"consistency_{name}.json", f"consistency_{name}.csv"]
        localizers = {pid: ws.localizer(pid) for pid in ws.participants}
        if cfg.localizer_groups and all(loc is not None for loc in localizers.values()):
            res = localizer_overlap(masks, cfg.localizer_groups, localizers, cfg.localizer_index_base)
            rows = [[cat, r, fmt(res["mean"][a, r]), fmt(res["sem"][a, r])]
                    for a, cat in enumerate(res["categories"]) for r in range(res["mean"].shape[1])]
            (ws.out / f"localizer_{name}.csv").write_text(
                csv_text(["category", "region", "mean_count", "sem"], rows))
            files.append(f"localizer_{name}.csv")
    return files


def stage_report(ws: Workspace):
    cfg = ws.cfg
    head = ws.head("sdc")
    emb = ws.embeddings
    concepts = cfg.tsne_concepts if cfg.tsne_concepts is not None else list(range(head.c))
    tops = [reporter.top_images(head, emb, i, min(cfg.top_k, emb.shape[0])) for i in range(head.c)]
    layouts = []
    for i in concepts:
        sel = reporter.top_images(head, emb, i, min(cfg.tsne_top_k, emb.shape[0]))
        X = emb.values[emb.rows_for(sel.stimulus_ids)].astype(np.float64)
        layouts.append((i, sel.stimulus_ids, reporter.tsne(X, cfg.tsne_perplexity, cfg.tsne_iterations, cfg.tsne_seed)))
    bundle = {"top_images.csv": reporter.top_images_csv(tops), "tsne.csv": reporter.tsne_csv(layouts),
              "tsne_kl.json": {str(i): lay.kl for i, _, lay in layouts}}
    for name, content in bundle.items():
        reporter.write_artifact(ws.out, name, content)
    return sorted(bundle)


STAGE_FUNCS = {
    "split": stage_split,
    "noise-ceiling": stage_noise_ceiling,
    "train-decoder": stage_train_decoder,
    "fit-things": stage_fit_things,
    "fit-sdc": stage_fit_sdc,
    "eval-topk": stage_eval_topk,
    "fit-masks": stage_fit_masks,
    "specificity": stage_specificity,
    "consistency": stage_consistency,
    "report": stage_report,
}


def run_stage(ws: Workspace, stage, **kwargs):
    ws.out.mkdir(parents=True, exist_ok=True)
    files = STAGE_FUNCS[stage](ws, **kwargs)
    reporter.update_manifest(ws.out, stage, files, ws.cfg.hashed(), ws.cfg.seeds())
    return files


# --- whole pipeline -------------------------------------------------------------

def verify_outputs(ws: Workspace):
    """Structural checks: manifest complete and current, masks consistent with their weights."""
    manifest = json.loads((ws.out / reporter.MANIFEST).read_text())
    for name, digest in manifest["artifacts"].items():
        path = ws.out / name
        if not path.exists():
            raise PipelineAssertion(f"manifest lists missing artifact {name}")
        if reporter._sha256(path) != digest:
            raise PipelineAssertion(f"artifact {name} changed after it was recorded")
    listed = set(manifest["artifacts"]) | {reporter.MANIFEST}
    orphans = sorted(str(p.relative_to(ws.out)) for p in ws.out.rglob("*") if p.is_file()
                     and str(p.relative_to(ws.out)) not in listed)
    if orphans:
        raise PipelineAssertion(f"artifacts missing from the manifest: {orphans}")
    for name in ws.cfg.mask_heads:
        if not (ws.out / f"masks_{name}.json").exists():
            continue  # fit-masks has not run for this head
        for pid, masks in ws.masks(name).items():
            for m in masks:
                if not np.array_equal(m.binary.astype(bool), m.lasso_weights != 0):
                    raise PipelineAssertion(f"binary mask disagrees with weights for {pid}/{m.concept_index}")


def truth_checks(ws: Workspace):
    """Compare recovered structure with the planted truth of a synthetic dataset."""
    supports = {(s["participant_id"], s["concept_index"]): set(s["voxels"]) for s in ws.truth["supports"]}
    out, topk = {}, {}
    if (ws.out / "topk.csv").exists():
        with open(ws.out / "topk.csv") as fh:
            next(fh)
            for line in fh:
                pid, model, space, k, acc, chance, n = line.rstrip("\n").split(",")
                topk.setdefault((model, space, int(k)), []).append(float(acc))
    if ("mlp", "clip", 1) in topk:
        mlp = float(np.mean(topk["mlp", "clip", 1]))
        out["mlp_top1"] = mlp
        out["ridge_top1"] = float(np.mean(topk["ridge", "clip", 1]))
        if ("mlp", "sdc", 1) in topk:
            sdc = [a for a in topk["mlp", "sdc", 1] if np.isfinite(a)]
            out["sdc_top1"] = float(np.mean(sdc)) if sdc else None
    # only heads whose concepts are the planted ones can be scored against the truth
    for name in ws.cfg.mask_heads:
        if name not in ("truth", "things"):
            continue
        masks = ws.masks(name)
        scores = [jaccard(m.support, supports[pid, m.concept_index])
                  for pid in masks for m in masks[pid] if (pid, m.concept_index) in supports]
        report = json.loads((ws.out / f"consistency_{name}.json").read_text())
        contrast = json.loads((ws.out / "specificity" / f"{name}_contrast.json").read_text())
        out[name] = {"mean_jaccard": float(np.mean(scores)),
                     "mean_diagonal": contrast["mean_diagonal"],
                     "mean_off_diagonal": contrast["mean_off_diagonal"],
                     "min_consistency_score": float(min(c["score"] for c in report["concepts"]))}
    return out


def run_pipeline(cfg: PipelineConfig, stages=STAGES):
    ws = Workspace(cfg)
    for stage in stages:
        if stage == "fit-things" and not ws.input_path("things_embeddings").exists():
            log.info("no interpretable-space inputs; skipping fit-things")
            continue
        log.info("stage %s", stage)
        run_stage(ws, stage)
    if ws.truth is not None and "consistency" in stages:
        reporter.write_artifact(ws.out, "checks.json", truth_checks(ws))
        reporter.update_manifest(ws.out, "checks", ["checks.json"], cfg.hashed(), cfg.seeds())
    verify_outputs(ws)
    return ws
