import json

import numpy as np
import pytest

from sdc_concepts import reporter
from sdc_concepts.concept_spaces import ProjectionHead
from sdc_concepts.dataio import EmbeddingMatrix
from sdc_concepts.errors import DegenerateInputError, ShapeError, ValidationError
from sdc_concepts.reporter import emit_report, top_images, tsne


def _emb(Y, ids=None):
    ids = ids or [f"s{i:03d}" for i in range(len(Y))]
    return EmbeddingMatrix(np.asarray(Y, dtype=np.float32), ids, "clip")


def test_top_images_matches_brute_force(rng):
    for _ in range(20):
        Y = rng.standard_normal((40, 6))
        Y[rng.choice(40, 5)] = Y[0]  # ties
        head = ProjectionHead(rng.standard_normal((3, 6)), 0.05, "sdc")
        emb = _emb(Y)
        for concept in range(3):
            rep = top_images(head, emb, concept, 15)
            scores = np.maximum(emb.values.astype(np.float64) @ head.W.T, 0)[:, concept]
            expected = sorted(range(40), key=lambda i: (-scores[i], emb.stimulus_ids[i]))[:15]
            assert rep.stimulus_ids == [emb.stimulus_ids[i] for i in expected]
            assert np.all(np.diff(rep.scores) <= 0)
            assert len(set(rep.stimulus_ids)) == 15


def test_top_images_self_match(rng):
    Y = np.abs(rng.standard_normal((20, 5)))
    head = ProjectionHead(Y[7:8].astype(np.float32).astype(np.float64) / np.linalg.norm(Y[7]), 0.05, "sdc")
    Yn = Y / np.linalg.norm(Y, axis=1, keepdims=True)
    assert top_images(head, _emb(Yn), 0, 1).stimulus_ids == ["s007"]


def test_top_images_invariant_to_appended_zero_scores(rng):
    Y = np.abs(rng.standard_normal((30, 4)))
    head = ProjectionHead(np.ones((1, 4)), 0.05, "sdc")
    base = top_images(head, _emb(Y), 0, 10)
    extra = np.vstack([Y, -np.abs(rng.standard_normal((10, 4)))])
    ids = [f"s{i:03d}" for i in range(30)] + [f"z{i}" for i in range(10)]
    assert top_images(head, _emb(extra, ids), 0, 10).stimulus_ids == base.stimulus_ids


def test_top_images_errors(rng):
    head = ProjectionHead(np.ones((2, 3)), 0.05, "sdc")
    with pytest.raises(ShapeError):
        top_images(head, _emb(np.ones((4, 3))), 2)
    with pytest.raises(ValidationError):
        top_images(head, _emb(np.ones((4, 3))), 0, 5)


def test_tsne_equilateral_triangle():
    X = np.eye(3) * 5.0
    for seed in range(5):
        lay = tsne(X, perplexity=2, iterations=1000, seed=seed, guard=False)
        d = [np.linalg.norm(lay.points[i] - lay.points[j]) for i, j in ((0, 1), (0, 2), (1, 2))]
        assert max(d) <= 1.05 * min(d)


def test_tsne_kl_nonnegative_and_finite(rng):
    X = rng.standard_normal((40, 5))
    lay = tsne(X, perplexity=8, iterations=400, seed=1)
    assert np.all(lay.kl_history >= 0) and lay.kl >= 0
    assert np.all(np.isfinite(lay.points)) and lay.points.shape == (40, 2)
    assert lay.kl_history[-1] <= lay.kl_history[300]


def test_tsne_content_mode_permutation_equivariant(rng):
    X = rng.standard_normal((50, 4))
    perm = rng.permutation(50)
    a = tsne(X, 10, 500, seed=2, init="content")
    b = tsne(X[perm], 10, 500, seed=2, init="content")
    np.testing.assert_array_equal(a.points[perm], b.points)


def test_tsne_deterministic(rng):
    X = rng.standard_normal((30, 4))
    np.testing.assert_array_equal(tsne(X, 5, 200, seed=4).points, tsne(X, 5, 200, seed=4).points)


def test_tsne_guards(rng):
    X = rng.standard_normal((30, 4))
    with pytest.raises(ValidationError):
        tsne(X, perplexity=10)
    with pytest.raises(ValidationError):
        tsne(X, perplexity=30, guard=False)
    with pytest.raises(DegenerateInputError):
        tsne(np.zeros((40, 3)), perplexity=5)


def test_affinities_agree_across_backends(rng):
    from sdc_concepts import kernels

    impls = kernels.backends()
    X = rng.standard_normal((50, 6))
    D = np.ascontiguousarray(reporter._sqdist(X))
    out = {}
    for name, impl in impls.items():
        P, gap = np.zeros((50, 50)), np.zeros(50)
        impl.perplexity_search(D, 12.0, 1e-5, 200, P, gap)
        assert np.all(gap <= 1e-5)
        out[name] = P
        rows = np.where(P > 0, P, 1.0)
        entropy = -(P * np.log(rows)).sum(axis=1)
        np.testing.assert_allclose(np.exp(entropy), 12.0, rtol=1e-4)
    ref = out["python"]
    for P in out.values():
        np.testing.assert_allclose(P, ref, atol=1e-14)


def test_manifest_and_hash(tmp_path):
    m = emit_report(tmp_path, {}, {"a": 1}, {"s": 0})
    assert m["artifacts"] == {} and (tmp_path / "summary.json").exists()
    assert set(m) >= {"config_hash", "seeds", "versions", "stages"}
    h = reporter.config_hash
    assert h({"a": 1, "b": [1, 2]}) == h({"b": [1, 2], "a": 1})
    assert h({"a": 1}) != h({"a": 2}) and h({"a": 1}) != h({"a": 1, "b": None})


def test_emit_report_byte_identical(tmp_path):
    bundle = {"x.csv": "a,b\n1,2\n", "y.json": {"k": [1.5, 2]}, "sub/z.bin": b"\x00\x01"}
    for d in ("one", "two"):
        emit_report(tmp_path / d, bundle, {"c": 1}, {"seed": 3})
    for name in list(bundle) + ["summary.json"]:
        assert (tmp_path / "one" / name).read_bytes() == (tmp_path / "two" / name).read_bytes()
    manifest = json.loads((tmp_path / "one" / "summary.json").read_text())
    assert sorted(manifest["artifacts"]) == sorted(bundle)


def test_csv_formats(rng):
    head = ProjectionHead(np.eye(2), 0.05, "sdc")
    emb = _emb(np.array([[1.0, 0.0], [0.5, 0.2], [0.0, 1.0]]))
    text = reporter.top_images_csv([top_images(head, emb, 0, 2)])
    assert text.splitlines() == ["concept_index,rank,stimulus_id,score", "0,1,s000,1.0", "0,2,s001,0.5"]
    lay = reporter.TsneLayout(np.array([[0.25, -1.0]]), 5.0, 10, 0.1)
    assert reporter.tsne_csv([(3, ["s9"], lay)]).splitlines() == ["stimulus_id,x,y,concept_index", "s9,0.25,-1.0,3"]
