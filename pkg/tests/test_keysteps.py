import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from stepkit.errors import ConfigError, DataError
from stepkit.evaluation import hungarian_match
from stepkit.keysteps import (
    ExtractConfig,
    background_reject,
    cluster_features,
    extract_key_steps,
    kmeans,
    split_to_segments,
)
from stepkit.synth import SynthConfig, generate


def test_single_cluster_is_mean():
    x = np.random.default_rng(0).standard_normal((30, 3))
    centers, y, d = cluster_features(x, 1)
    np.testing.assert_allclose(centers[0], x.mean(axis=0), atol=1e-12)
    assert np.all(y == 0)
    np.testing.assert_allclose(d, np.linalg.norm(x - x.mean(axis=0), axis=1), atol=1e-12)


def test_two_blobs():
    rng = np.random.default_rng(1)
    x = np.concatenate([rng.normal(-5, 0.3, (40, 2)), rng.normal(5, 0.3, (40, 2))])
    centers, y, d = cluster_features(x, 2, seed=3)
    for i in range(len(x)):
        own = np.linalg.norm(x[i] - centers[y[i]])
        other = np.linalg.norm(x[i] - centers[1 - y[i]])
        assert own < other
    assert len(set(y[:40])) == 1 and len(set(y[40:])) == 1 and y[0] != y[-1]


def test_zero_noise_clusters_recover_steps():
    manifest, gt = generate(SynthConfig(num_videos=3, cue_noise=0.0, background_fraction=0.0, seed=4))
    for rec, labels in zip(manifest.records, gt.step_labels):
        _, y, _ = cluster_features(rec.features(manifest.modality_names), gt.num_steps, seed=0)
        mapping = hungarian_match(y, labels)
        assert np.array_equal(np.array([mapping[c] for c in y]), labels)


def test_too_few_frames():
    with pytest.raises(DataError):
        cluster_features(np.zeros((3, 2)), 4)


def test_kmeans_deterministic_and_handles_duplicates():
    x = np.repeat(np.eye(3), 5, axis=0)
    c1, l1 = kmeans(x, 5, seed=2)
    c2, l2 = kmeans(x, 5, seed=2)
    assert np.array_equal(c1, c2) and np.array_equal(l1, l2)
    assert np.all(np.isfinite(c1))


def test_unknown_clustering():
    with pytest.raises(ConfigError, match="kmeans"):
        ExtractConfig(clustering="finch").validate()


# -- background rejection ----------------------------------------------------


def test_reject_alpha_zero_identity():
    idx = np.array([4, 1, 9])
    assert np.array_equal(background_reject(idx, [0.3, 0.1, 0.2], 0.0), [1, 4, 9])


def test_reject_removes_farthest():
    idx = np.arange(10)
    dist = np.array([0.1, 0.5, 0.2, 0.9, 0.3, 0.3, 0.1, 0.4, 0.2, 0.0])
    kept = background_reject(idx, dist, 0.1)
    assert len(kept) == 9 and 3 not in kept


def test_reject_tie_removes_largest_index():
    kept = background_reject(np.arange(5), np.ones(5), 0.2)
    assert kept.tolist() == [0, 1, 2, 3]


@settings(max_examples=50, deadline=None)
@given(st.lists(st.floats(0, 10), min_size=1, max_size=40), st.floats(0, 0.95), st.floats(0, 0.95))
def test_reject_monotone_in_alpha(dists, a1, a2):
    lo, hi = sorted((a1, a2))
    idx = np.arange(len(dists))
    assert len(background_reject(idx, dists, hi)) <= len(background_reject(idx, dists, lo))


# -- segments ------------------------------------------------------------------


def test_split_example():
    ts = np.arange(12, dtype=float)
    segs = split_to_segments(np.array([1, 2, 3, 10, 11]), 3.0, ts)
    assert [s.tolist() for s in segs] == [[1, 2, 3], [10, 11]]


def test_split_empty_and_single():
    assert split_to_segments(np.array([], dtype=int), 2.0, np.arange(5.0)) == []
    assert len(split_to_segments(np.arange(5), 2.0, np.arange(5.0))) == 1


@settings(max_examples=50, deadline=None)
@given(st.lists(st.integers(0, 200), min_size=1, max_size=50, unique=True), st.floats(0.5, 20))
def test_split_partitions_input(indices, gap):
    idx = np.sort(np.array(indices))
    ts = np.arange(201) * 0.5
    segs = split_to_segments(idx, gap, ts)
    assert np.array_equal(np.concatenate(segs), idx)
    for s in segs:
        assert np.all(np.diff(ts[s]) <= gap)


# -- full extraction -------------------------------------------------------------


def _segment_of(frame, segments):
    for i, (_, start, stop) in enumerate(segments):
        if start <= frame < stop:
            return i
    return None


@pytest.mark.parametrize("seed", range(3))
def test_zero_noise_one_key_step_per_segment(seed):
    cfg = SynthConfig(num_videos=2, cue_noise=0.0, repeat_probability=0.0, background_fraction=0.0, seed=seed)
    manifest, gt = generate(cfg)
    ex = ExtractConfig(num_clusters=cfg.num_steps, background_ratio=0.0, seed=seed)
    for v, rec in enumerate(manifest.records):
        res = extract_key_steps(rec.features(manifest.modality_names), rec.timestamps, ex)
        assert len(res) == cfg.num_steps
        hit = sorted(_segment_of(s.frame, gt.segments[v]) for s in res.steps)
        assert hit == list(range(len(gt.segments[v])))


def test_repeated_step_yields_two_key_steps():
    cfg = SynthConfig(num_videos=2, cue_noise=0.0, repeat_probability=1.0, background_fraction=0.0, seed=6)
    manifest, gt = generate(cfg)
    ex = ExtractConfig(num_clusters=cfg.num_steps, background_ratio=0.0)
    for v, rec in enumerate(manifest.records):
        res = extract_key_steps(rec.features(manifest.modality_names), rec.timestamps, ex)
        labels = gt.step_labels[v]
        for step in gt.repeated_steps(v):
            picks = [s for s in res.steps if labels[s.frame] == step]
            assert len(picks) >= 2
            assert len({_segment_of(s.frame, gt.segments[v]) for s in picks}) >= 2


def test_constant_features_single_earliest_step():
    x = np.ones((20, 3))
    res = extract_key_steps(x, np.arange(20.0), ExtractConfig(num_clusters=1, background_ratio=0.0,
                                                                gamma_split=2.0))
    assert len(res) == 1 and res.steps[0].frame == 0


def test_extraction_invariants():
    manifest, _ = generate(SynthConfig(num_videos=1, cue_noise=0.4, repeat_probability=0.5, seed=8))
    rec = manifest.records[0]
    x = rec.features(manifest.modality_names).astype(np.float64)
    cfg = ExtractConfig(num_clusters=5, background_ratio=0.2, seed=1)
    res = extract_key_steps(x, rec.timestamps, cfg)
    times = [s.time_s for s in res.steps]
    assert times == sorted(times)
    centers, y, d = cluster_features(x, 5, seed=1)
    np.testing.assert_allclose(res.centers, centers)
    for s in res.steps:
        assert s.distance >= 0
        assert abs(np.linalg.norm(x[s.frame] - res.centers[s.cluster]) - s.distance) < 1e-6
        members = np.flatnonzero(y == s.cluster)
        kept = background_reject(members, d[members], cfg.background_ratio)
        assert s.frame in kept
    again = extract_key_steps(x, rec.timestamps, cfg)
    assert again.to_json() == res.to_json()
