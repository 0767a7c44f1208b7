import numpy as np
import pytest

from sdc_concepts import dataio, synthlab
from sdc_concepts.errors import SpecError
from sdc_concepts.synthlab import SynthSpec, generate, jaccard

SMALL = dict(participants=3, stimuli=300, reps=3, embed_dim=16, true_concepts=4, support_size=10, extra_voxels=30)


def test_jaccard_examples():
    assert jaccard({1, 2}, {1, 2}) == 1.0
    assert jaccard({1}, {2}) == 0.0
    assert jaccard({1, 2, 3}, {2, 3, 4}) == 0.5
    assert jaccard(set(), set()) == 1.0


def test_spec_validation():
    with pytest.raises(SpecError):
        SynthSpec(participants=0).validate()
    with pytest.raises(SpecError):
        SynthSpec(noise_sigma=-1).validate()
    with pytest.raises(SpecError):
        SynthSpec(consistency_mode="other").validate()
    with pytest.raises(SpecError):
        generate(SynthSpec(embed_dim=4, true_concepts=8))
    assert SynthSpec().voxels == 8 * 25 + 400


def test_deterministic():
    a, b = generate(SynthSpec(**SMALL)), generate(SynthSpec(**SMALL))
    for pid in a.responses:
        np.testing.assert_array_equal(a.responses[pid].values, b.responses[pid].values)
    np.testing.assert_array_equal(a.embeddings.values, b.embeddings.values)
    assert a.truth.supports.keys() == b.truth.supports.keys()


def test_structure():
    spec = SynthSpec(**SMALL)
    data = generate(spec)
    W = data.truth.true_projection
    np.testing.assert_allclose(W @ W.T, np.eye(4), atol=1e-12)
    np.testing.assert_allclose(np.linalg.norm(data.embeddings.values, axis=1), 1.0)
    data.trials.validate()
    assert len(data.trials) == 3 * 300 * 3
    for pid in data.responses:
        sets = [set(data.truth.supports[pid, i]) for i in range(4)]
        assert all(len(s) == 10 for s in sets)
        assert len(set.union(*sets)) == 40
        assert data.responses[pid].shape == (900, spec.voxels)


def test_zero_noise_coding_voxels_at_ceiling():
    data = generate(SynthSpec(**dict(SMALL, noise_sigma=0.0)))
    for pid, resp in data.responses.items():
        trials = data.trials.for_participant(pid)
        coding = sorted(v for (p, _), vox in data.truth.supports.items() if p == pid for v in vox)
        rows = trials.trial_row
        nc = dataio.noise_ceiling(resp.select(coding), trials, rows)
        assert np.all(nc == 100.0)


def test_consistent_and_shuffled_rois():
    c = generate(SynthSpec(**SMALL))
    for i in range(4):
        assert len({c.truth.concept_roi[p, i] for p in c.responses}) == 1
    s = generate(SynthSpec(**dict(SMALL, consistency_mode="shuffled")))
    for i in range(4):
        assert len({s.truth.concept_roi[p, i] for p in s.responses}) == 3
    for pid in c.responses:
        atlas = c.truth.atlases[pid]
        for i in range(4):
            assert set(atlas.lookup(c.truth.supports[pid, i])) == {c.truth.concept_roi[pid, i]}


def test_noncoding_voxels_uncorrelated_with_scores():
    data = generate(SynthSpec(participants=1, stimuli=1200, reps=1, embed_dim=16, true_concepts=4,
                              support_size=10, extra_voxels=30))
    resp = data.responses["P1"]
    coding = {v for vox in data.truth.supports.values() for v in vox}
    noise = [j for j in range(resp.shape[1]) if j not in coding]
    rows = data.embeddings.rows_for(data.trials.stimulus_id)
    scores = np.maximum(data.embeddings.values[rows] @ data.truth.true_projection.T, 0)
    for j in noise:
        for i in range(4):
            assert abs(np.corrcoef(resp.values[:, j], scores[:, i])[0, 1]) < 0.1


def test_noise_ceiling_decreases_with_sigma():
    means = []
    for sigma in (0.2, 0.5, 1.0, 2.0):
        data = generate(SynthSpec(**dict(SMALL, participants=1, noise_sigma=sigma)))
        coding = sorted(v for vox in data.truth.supports.values() for v in vox)
        nc = dataio.noise_ceiling(data.responses["P1"].select(coding), data.trials, data.trials.trial_row)
        means.append(nc.mean())
    assert all(a > b for a, b in zip(means, means[1:]))


def test_sigma_for_noise_ceiling_hits_target():
    spec = SynthSpec(**dict(SMALL, participants=1, stimuli=1500))
    spec.noise_sigma = synthlab.sigma_for_noise_ceiling(spec, 30.0)
    data = generate(spec)
    coding = sorted(v for vox in data.truth.supports.values() for v in vox)
    nc = dataio.noise_ceiling(data.responses["P1"].select(coding), data.trials, data.trials.trial_row)
    assert nc.mean() == pytest.approx(30.0, abs=3.0)
    with pytest.raises(SpecError):
        synthlab.sigma_for_noise_ceiling(spec, 100)


def test_incomplete_repetitions():
    data = generate(SynthSpec(**dict(SMALL, incomplete_fraction=0.2)))
    data.trials.validate()
    counts = np.unique(data.trials.for_participant("P1").stimulus_id, return_counts=True)[1]
    assert counts.min() < 3 and counts.max() == 3


def test_write_dataset_roundtrip(tmp_path):
    spec = SynthSpec(**SMALL)
    data = generate(spec)
    synthlab.write_dataset(data, tmp_path, spec)
    resp = dataio.load_matrix(tmp_path / "responses" / "P2.sdcm")
    np.testing.assert_array_equal(resp.values, data.responses["P2"].values.astype(np.float32))
    trials = dataio.read_trials(tmp_path / "trials.csv")
    assert trials.participants() == ["P1", "P2", "P3"]
    W = dataio.read_array(tmp_path / "true_projection.sdcm")
    np.testing.assert_array_equal(W, data.truth.true_projection)
    loc = dataio.read_atlas(tmp_path / "localizer" / "P1.csv")
    assert set(loc.lookup(data.truth.supports["P1", 2])) == {2}
