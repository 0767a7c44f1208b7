"""Acceptance gate: one recorded pass/fail line per criterion (printed in the terminal summary)."""
import hashlib
import json
import time
from pathlib import Path

import numpy as np
import pytest

from sdc_concepts import cli, dataio, synthlab
from sdc_concepts.concept_spaces import sdc_objective
from sdc_concepts.dataio import ResponseMatrix, TrialTable
from sdc_concepts.decoder import (
    RIDGE_GRID,
    chance_accuracy,
    contrastive_step,
    fit_ridge,
    infonce_loss,
    init_mlp,
    topk_accuracy,
    train_ridge,
)
from sdc_concepts.mask_finder import fit_lasso_mask, kkt_check, lasso_alpha_max
from sdc_concepts.pipeline import PipelineConfig, run_pipeline
from sdc_concepts.reporter import tsne

H = 1e-6


def _fd(f, x):
    """Central differences of scalar f with respect to every entry of x (modified in place)."""
    g = np.zeros_like(x)
    for idx in np.ndindex(*x.shape):
        old = x[idx]
        x[idx] = old + H
        up = f()
        x[idx] = old - H
        down = f()
        x[idx] = old
        g[idx] = (up - down) / (2 * H)
    return g


def _rel_err(analytic, numeric):
    return float(np.max(np.abs(analytic - numeric) / np.maximum(np.maximum(np.abs(analytic), np.abs(numeric)), 1e-5)))


# -- 1 -----------------------------------------------------------------------

def test_c1_gradients(acceptance):
    start = time.perf_counter()
    rng = np.random.default_rng(1)
    worst = {}
    for trial in range(5):
        m, d = rng.integers(3, 7), rng.integers(2, 6)
        q, k = rng.standard_normal((m, d)), rng.standard_normal((m, d))
        tau = rng.uniform(0.5, 2.0)
        _, dq, dk = infonce_loss(q, k, tau)
        worst["infonce"] = max(worst.get("infonce", 0),
                               _rel_err(dq, _fd(lambda: infonce_loss(q, k, tau)[0], q)),
                               _rel_err(dk, _fd(lambda: infonce_loss(q, k, tau)[0], k)))

        v, h = rng.integers(3, 8), rng.integers(3, 8)
        model = init_mlp(v, h, d, rng)
        X, Y = rng.standard_normal((m, v)), rng.standard_normal((m, d))
        _, grads = contrastive_step(model, X, Y, tau)
        for p, g in zip(model.params(), grads):
            worst["mlp"] = max(worst.get("mlp", 0), _rel_err(g, _fd(lambda: contrastive_step(model, X, Y, tau)[0], p)))

        c = rng.integers(2, 5)
        W = rng.standard_normal((c, d))
        Yc, Yb = rng.standard_normal((m, d)), rng.standard_normal((m, d))
        for sym in (False, True):
            _, gW = sdc_objective(W, Yc, Yb, 0.05, symmetric=sym)
            worst["sdc"] = max(worst.get("sdc", 0),
                               _rel_err(gW, _fd(lambda: sdc_objective(W, Yc, Yb, 0.05, symmetric=sym)[0], W)))
    elapsed = time.perf_counter() - start
    ok = max(worst.values()) <= 1e-4 and elapsed < 5
    acceptance("1 gradients", ok, f"max rel err {json.dumps({k: float(f'{v:.2e}') for k, v in worst.items()})}, "
                                  f"{elapsed:.2f}s (need <=1e-4, <5s)")


# -- 2 -----------------------------------------------------------------------

def test_c2_ridge_oracle(acceptance):
    rng = np.random.default_rng(2)
    worst = 0.0
    for _ in range(50):
        X, Y = rng.standard_normal((200, 50)), rng.standard_normal((200, 4))
        lam = float(rng.choice(RIDGE_GRID))
        model = fit_ridge(X, Y, lam)
        Xc, Yc = X - X.mean(0), Y - Y.mean(0)
        resid = (Xc.T @ Xc + lam * np.eye(50)) @ model.W.T - Xc.T @ Yc
        worst = max(worst, float(np.abs(resid).max() / max(1.0, np.abs(Xc.T @ Yc).max())))
    selection_ok = True
    for _ in range(10):
        W = rng.standard_normal((30, 8))
        X, Xv = rng.standard_normal((120, 30)), rng.standard_normal((60, 30))
        Y, Yv = X @ W + 3 * rng.standard_normal((120, 8)), Xv @ W + 3 * rng.standard_normal((60, 8))
        model = train_ridge(X, Y, RIDGE_GRID, Xv, Yv)
        accs = [topk_accuracy(Yv, fit_ridge(X, Y, lam).predict(Xv), 1) for lam in RIDGE_GRID]
        selection_ok &= model.lam == RIDGE_GRID[int(np.argmax(accs))]
    acceptance("2 ridge", worst <= 1e-6 and selection_ok,
               f"max normal-equation residual {worst:.1e} (<=1e-6), grid argmax agrees: {selection_ok}")


# -- 3 -----------------------------------------------------------------------

def test_c3_lasso_oracle(acceptance, backend):
    rng = np.random.default_rng(3)
    worst_kkt, monotone, threshold = 0.0, True, True
    for _ in range(50):
        X = rng.standard_normal((200, 100))
        y = X[:, :5] @ rng.standard_normal(5) + rng.standard_normal(200)
        amax = lasso_alpha_max(X, y)
        mask = fit_lasso_mask(X, y, 0.1 * amax)
        assert mask.converged
        worst_kkt = max(worst_kkt, kkt_check(X, y, mask))
        obj = mask.objective
        monotone &= bool(np.all(np.diff(obj) <= 1e-12 * abs(obj[0])))
        threshold &= not fit_lasso_mask(X, y, amax).lasso_weights.any()
        threshold &= bool(fit_lasso_mask(X, y, amax * (1 - 1e-9)).lasso_weights.any())
    acceptance(f"3 lasso [{backend}]", worst_kkt <= 1e-6 and monotone and threshold,
               f"max KKT violation {worst_kkt:.1e} (<=1e-6), zero threshold exact: {threshold}, "
               f"objective non-increasing: {monotone}")


# -- 4 -----------------------------------------------------------------------

def _brute_topk(Y_true, Y_pred, k):
    n = Y_true.shape[0]
    hits = 0
    for i in range(n):
        p = Y_pred[i] / np.linalg.norm(Y_pred[i])
        dist = [1 - p @ (Y_true[j] / np.linalg.norm(Y_true[j])) for j in range(n)]
        order = sorted(range(n), key=lambda j: (dist[j], j))
        hits += i in order[:k]
    return 100.0 * hits / n


def test_c4_retrieval_oracle(acceptance):
    rng = np.random.default_rng(4)
    agree = True
    for _ in range(100):
        n, d = int(rng.integers(2, 65)), int(rng.integers(2, 9))
        Y = rng.standard_normal((n, d))
        P = Y + rng.uniform(0.1, 3.0) * rng.standard_normal((n, d))
        if rng.random() < 0.2:  # exact duplicates force ties
            Y[n // 2] = Y[0]
        for k in range(1, n + 1):
            agree &= topk_accuracy(Y, P, k) == _brute_topk(Y, P, k)
    n, k = 1000, 5
    accs = [topk_accuracy(rng.standard_normal((n, 16)), rng.standard_normal((n, 16)), k) for _ in range(200)]
    empirical, chance = float(np.mean(accs)), chance_accuracy(k, n)
    rel = abs(empirical - chance) / chance
    acceptance("4 retrieval", agree and rel <= 0.5,
               f"brute-force agreement: {agree}; chance {chance:.3f}% vs empirical {empirical:.3f}% "
               f"(rel dev {rel:.2f} <= 0.5)")


# -- 5 and 8 -----------------------------------------------------------------

def _tree_hashes(root):
    root = Path(root)
    return {str(p.relative_to(root)): hashlib.sha256(p.read_bytes()).hexdigest()
            for p in sorted(root.rglob("*")) if p.is_file()}


@pytest.fixture(scope="module")
def synthetic_runs(tmp_path_factory):
    base = tmp_path_factory.mktemp("acceptance")
    spec = synthlab.SynthSpec()
    spec.noise_sigma = synthlab.sigma_for_noise_ceiling(spec, 30.0)
    (base / "config.json").write_text(json.dumps({"mask_heads": ["truth", "things", "sdc"]}))

    start = time.perf_counter()
    synthlab.write_dataset(synthlab.generate(spec), base / "data", spec)
    argv = ["pipeline", "--config", str(base / "config.json"), "--data", str(base / "data"), "--strict"]
    assert cli.main(argv + ["--out", str(base / "run1")]) == 0
    elapsed = time.perf_counter() - start
    assert cli.main(argv + ["--out", str(base / "run2")]) == 0

    shuffled = synthlab.SynthSpec(noise_sigma=spec.noise_sigma, consistency_mode="shuffled")
    synthlab.write_dataset(synthlab.generate(shuffled), base / "data_shuffled", shuffled)
    cfg = PipelineConfig(data_dir=str(base / "data_shuffled"), out_dir=str(base / "shuffled"),
                         mask_heads=["truth"], strict=True)
    run_pipeline(cfg, stages=("split", "noise-ceiling", "train-decoder", "fit-masks", "specificity", "consistency"))
    return {"base": base, "elapsed": elapsed, "spec": spec}


def _checks(run):
    return json.loads((run / "checks.json").read_text())


def _topk(run, model, space, k=1):
    rows = (run / "topk.csv").read_text().splitlines()[1:]
    out = {}
    for line in rows:
        pid, m, s, kk, acc, chance, n = line.split(",")
        if (m, s, int(kk)) == (model, space, k):
            out[pid] = (float(acc), float(chance))
    return out


def test_c5a_mlp_above_chance(acceptance, synthetic_runs):
    res = _topk(synthetic_runs["base"] / "run1", "mlp", "clip")
    ratios = {pid: acc / chance for pid, (acc, chance) in res.items()}
    acceptance("5a mlp >= 10x chance", min(ratios.values()) >= 10,
               f"top-1 / chance per participant min {min(ratios.values()):.1f}, mean "
               f"{np.mean(list(ratios.values())):.1f} (need >= 10)")


def test_c5b_mlp_beats_ridge(acceptance, synthetic_runs):
    c = _checks(synthetic_runs["base"] / "run1")
    acceptance("5b mlp >= ridge", c["mlp_top1"] >= c["ridge_top1"],
               f"mean top-1 mlp {c['mlp_top1']:.2f}% vs ridge {c['ridge_top1']:.2f}%")


def test_c5c_sdc_beats_raw(acceptance, synthetic_runs):
    c = _checks(synthetic_runs["base"] / "run1")
    acceptance("5c sdc space >= raw", c["sdc_top1"] >= c["mlp_top1"],
               f"mean top-1 sdc space {c['sdc_top1']:.2f}% vs raw {c['mlp_top1']:.2f}%")


def test_c5d_mask_recovery(acceptance, synthetic_runs):
    c = _checks(synthetic_runs["base"] / "run1")["truth"]
    acceptance("5d jaccard >= 0.5", c["mean_jaccard"] >= 0.5, f"mean Jaccard {c['mean_jaccard']:.3f}")


def test_c5e_specificity_diagonal(acceptance, synthetic_runs):
    c = _checks(synthetic_runs["base"] / "run1")["truth"]
    acceptance("5e diag >= offdiag + 0.1", c["mean_diagonal"] >= c["mean_off_diagonal"] + 0.1,
               f"mean diag {c['mean_diagonal']:.3f} vs off-diag {c['mean_off_diagonal']:.3f}")


def test_c5f_green_red(acceptance, synthetic_runs):
    base = synthetic_runs["base"]
    consistent = json.loads((base / "run1" / "consistency_truth.json").read_text())
    shuffled = json.loads((base / "shuffled" / "consistency_truth.json").read_text())
    gap_c = min(c["score"] for c in consistent["concepts"])
    gap_s = max(c["score"] for c in shuffled["concepts"])
    acceptance("5f green-red", gap_c >= 0.2 and gap_s < 0.05,
               f"consistent min gap {gap_c:.3f} (>=0.2), shuffled max gap {gap_s:.3f} (<0.05)")


def test_c5_runtime(acceptance, synthetic_runs):
    elapsed = synthetic_runs["elapsed"]
    acceptance("5 runtime", elapsed <= 600, f"synth + pipeline {elapsed:.0f}s (<= 600s)")


def test_c8_determinism(acceptance, synthetic_runs):
    base = synthetic_runs["base"]
    a, b = _tree_hashes(base / "run1"), _tree_hashes(base / "run2")
    differing = sorted(k for k in a.keys() | b.keys() if a.get(k) != b.get(k))
    acceptance("8 determinism", not differing and len(a) > 0,
               f"{len(a)} artifacts compared, {len(differing)} differ {differing[:3]}")


# -- 6 -----------------------------------------------------------------------

def _trials(stimuli, reps):
    stim = np.repeat(np.arange(stimuli), reps)
    n = stim.size
    return TrialTable(np.arange(n), np.array([f"s{i}" for i in stim], dtype=object),
                      np.full(n, "P1", dtype=object), np.ones(n, dtype=np.int64),
                      np.tile(np.arange(1, reps + 1), stimuli), np.ones(n, dtype=bool))


def test_c6a_zero_noise(acceptance):
    rng = np.random.default_rng(61)
    spec = synthlab.SynthSpec(participants=1, stimuli=200, noise_sigma=0.0, extra_voxels=0)
    data = synthlab.generate(spec)
    trials = data.trials
    nc = dataio.noise_ceiling(data.responses["P1"], trials, np.arange(len(trials)))
    signal = rng.standard_normal((50, 7))
    resp = ResponseMatrix(np.repeat(signal, 3, axis=0), "P1", np.arange(7))
    nc2 = dataio.noise_ceiling(resp, _trials(50, 3), np.arange(150))
    acceptance("6a zero noise", np.all(nc == 100.0) and np.all(nc2 == 100.0),
               f"coding-voxel NC min {min(nc.min(), nc2.min())} (need 100)")


def test_c6b_analytic(acceptance):
    value = float(dataio.nc_from_variances(1.0, 1.0, 3.0))
    # a response matrix whose sample variances are exactly equal, through the full estimator
    within = np.array([-1.0, 0.0, 1.0])  # unbiased variance 1
    means = np.array([-1.0, 1.0]) * np.sqrt((1 + 1 / 3) / 2)  # between variance 1 + 1/3
    X = (means[:, None] + within[None, :]).reshape(-1, 1)
    full = float(dataio.noise_ceiling(ResponseMatrix(X, "P1", [0]), _trials(2, 3), np.arange(6))[0])
    err = max(abs(value - 75), abs(full - 75))
    acceptance("6b analytic 75", err <= 1e-9, f"NC {value!r} / {full!r} (75 +- 1e-9)")


def test_c6c_pure_noise(acceptance):
    rng = np.random.default_rng(63)
    stimuli, reps, repeats = 500, 3, 1000
    X = rng.standard_normal((stimuli * reps, repeats))
    nc = dataio.noise_ceiling(ResponseMatrix(X, "P1", np.arange(repeats)), _trials(stimuli, reps),
                              np.arange(stimuli * reps))
    frac = float(np.mean(nc <= 10))
    acceptance("6c pure noise", frac >= 0.99,
               f"NC <= 10 in {100 * frac:.1f}% of {repeats} simulations (need >= 99%)")


# -- 7 -----------------------------------------------------------------------

def test_c7_tsne(acceptance):
    rng = np.random.default_rng(7)
    centers = rng.standard_normal((3, 16)) * 10
    labels = np.repeat(np.arange(3), 50)
    purities, kl_ok, trend_ok, endpoint_ok = [], True, True, True
    for seed in range(5):
        X = centers[labels] + rng.standard_normal((150, 16))
        lay = tsne(X, perplexity=30, iterations=1000, seed=seed)
        kl_ok &= bool(np.all(lay.kl_history >= 0)) and lay.kl >= 0
        post = lay.kl_history[250:]
        windows = post[: post.size // 50 * 50].reshape(-1, 50).mean(axis=1)
        trend_ok &= bool(np.all(np.diff(windows) <= 1e-9))
        endpoint_ok &= bool(windows[-1] <= windows[0])
        D = ((lay.points[:, None] - lay.points[None]) ** 2).sum(-1)
        np.fill_diagonal(D, np.inf)
        nn = np.argsort(D, axis=1)[:, :5]
        purities.append(float(np.mean(labels[nn] == labels[:, None])))
    acceptance("7 t-SNE", kl_ok and trend_ok and min(purities) >= 0.9,
               f"KL >= 0: {kl_ok}, 50-iteration window means non-increasing after exaggeration: {trend_ok} "
               f"(last window <= first: {endpoint_ok}), "
               f"5-NN purity min {min(purities):.3f} over 5 seeds (>= 0.9)")
