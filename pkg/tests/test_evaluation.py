import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from scipy.stats import special_ortho_group

from oracles import brute_force_match, naive_overall_f1
from stepkit.datamodel import FeatureSequence, Manifest, VideoRecord
from stepkit.errors import DataError
from stepkit.evaluation import (
    baseline_random,
    baseline_uniform,
    hungarian_match,
    kendalls_tau,
    ksl_metrics,
    overlap_matrix,
    phase_classification,
    stratified_subset,
    tau_from_retrieval,
)
from stepkit.pipeline import EvalOptions, evaluate, phase_split
from stepkit.report import loss_curve_svg, render_html, render_markdown


# -- matching --------------------------------------------------------------------


def test_worked_matching_example():
    mapping = hungarian_match([0, 0, 1, 0], [0, 0, 1, 1])
    assert mapping == {0: 0, 1: 1}
    O = overlap_matrix([0, 0, 1, 0], [0, 0, 1, 1], [0, 1], [0, 1])
    assert O[0, 0] + O[1, 1] == 3


def test_permutation_recovered():
    rng = np.random.default_rng(0)
    gt = rng.integers(0, 5, 200)
    gt[::7] = -1
    perm = rng.permutation(5)
    pred = np.where(gt >= 0, perm[np.maximum(gt, 0)], rng.integers(0, 5, 200))
    mapping = hungarian_match(pred, gt)
    assert all(mapping[perm[s]] == s for s in range(5))


def test_more_clusters_than_steps():
    mapping = hungarian_match([0, 1, 2, 2, 1], [0, 1, 1, 0, 1])
    assert len(mapping) == 2


def _random_instance(rng):
    K, S = rng.integers(1, 7, size=2)
    T = int(rng.integers(5, 40))
    pred = rng.integers(0, K, T)
    gt = rng.integers(-1, S, T)
    if not (gt >= 0).any():
        gt[0] = 0
    return pred, gt


def test_matches_brute_force_200_instances():
    rng = np.random.default_rng(123)
    for _ in range(200):
        pred, gt = _random_instance(rng)
        clusters = sorted(set(pred.tolist()))
        steps = sorted(set(gt[gt >= 0].tolist()))
        O = overlap_matrix(pred, gt, clusters, steps)
        assign, total = brute_force_match(O)
        expected = {clusters[k]: steps[s] for k, s in assign.items()}
        got = hungarian_match(pred, gt)
        assert got == expected
        assert sum(O[clusters.index(k), steps.index(s)] for k, s in got.items()) == total


# -- KSL metrics -----------------------------------------------------------------


@pytest.mark.parametrize("mode", ["per_step", "overall"])
def test_perfect_predictions(mode):
    gt = np.array([0, 0, 1, 1, 2, 2, -1])
    pred = np.array([2, 2, 0, 0, 1, 1, 1])
    s = ksl_metrics(np.where(gt >= 0, pred, -1), gt, mode)
    assert s.f1 == 1.0 and s.iou == 1.0


def test_worked_f1_example():
    s = ksl_metrics([0, 0, 1, 0], [0, 0, 1, 1], "overall")
    assert s.precision == pytest.approx(0.75) and s.recall == pytest.approx(0.75)
    assert s.f1 == pytest.approx(0.75)


def test_single_cluster_two_steps():
    s = ksl_metrics([0, 0, 0, 0], [0, 0, 1, 1], "overall")
    assert (s.precision, s.recall, s.f1) == pytest.approx((0.5, 0.5, 0.5))


def test_per_step_single_step_exact():
    assert ksl_metrics([3, 3, 3], [0, 0, 0], "per_step").f1 == 1.0


def test_unmatched_step_scores_zero():
    s = ksl_metrics([0, 0, 0, 0], [0, 0, 1, 1], "per_step")
    assert s.per_step[1].f1 == 0.0 and s.per_step[1].iou == 0.0
    assert s.recall == pytest.approx(0.5)


def test_no_key_frames_is_error():
    with pytest.raises(DataError):
        ksl_metrics([0, 1], [-1, -1])


@settings(max_examples=40, deadline=None)
@given(st.integers(0, 10_000), st.sampled_from(["per_step", "overall"]))
def test_relabeling_invariance(seed, mode):
    rng = np.random.default_rng(seed)
    pred, gt = _random_instance(rng)
    perm = rng.permutation(int(pred.max()) + 1)
    a = ksl_metrics(pred, gt, mode).to_json()
    b = ksl_metrics(perm[pred], gt, mode).to_json()
    for key in ("precision", "recall", "f1", "iou"):
        assert a[key] == pytest.approx(b[key], abs=1e-12)


@settings(max_examples=40, deadline=None)
@given(st.integers(0, 10_000))
def test_f1_is_harmonic_mean(seed):
    pred, gt = _random_instance(np.random.default_rng(seed))
    for mode in ("per_step", "overall"):
        s = ksl_metrics(pred, gt, mode)
        for v in (s, *s.per_step.values()):
            expected = 2 * v.precision * v.recall / (v.precision + v.recall) if v.precision + v.recall else 0
            assert abs(v.f1 - expected) < 1e-9
            assert 0 <= v.iou <= 1 and 0 <= v.f1 <= 1


# -- baselines ---------------------------------------------------------------------


def test_uniform_baseline():
    assert baseline_uniform(10, 2).tolist() == [0] * 5 + [1] * 5


def test_random_baseline_reproducible():
    assert np.array_equal(baseline_random(50, 7, seed=3), baseline_random(50, 7, seed=3))
    with pytest.raises(DataError):
        baseline_random(3, 7)


def test_random_baseline_matches_monte_carlo():
    K, T = 7, 140
    gt = np.repeat(np.arange(K), T // K)
    ours = np.mean([ksl_metrics(baseline_random(T, K, seed=s), gt, "overall").f1 for s in range(100)])
    rng = np.random.default_rng(2024)
    sims = [naive_overall_f1(rng.integers(0, K, T).tolist(), gt.tolist()) for _ in range(150)]
    assert abs(ours - np.mean(sims)) <= 0.02


# -- phase probe ---------------------------------------------------------------------


def test_probe_separable():
    rng = np.random.default_rng(0)
    y = np.repeat([0, 1], 100)
    x = rng.standard_normal((200, 5))
    x[:, 0] += np.where(y == 1, 6.0, -6.0)
    assert phase_classification(x[::2], y[::2], x[1::2], y[1::2], 1.0) == 1.0


def test_probe_shuffled_labels_near_chance():
    accs = []
    for seed in range(5):
        rng = np.random.default_rng(seed)
        x = rng.standard_normal((400, 4))
        y = rng.permutation(np.repeat([0, 1], 200))
        accs.append(phase_classification(x[:200], y[:200], x[200:], y[200:], 1.0, seed=seed))
    assert abs(np.mean(accs) - 0.5) <= 0.05


def test_fraction_saturation_and_coverage():
    y = np.repeat([0, 1, 2], [50, 3, 1])
    rng = np.random.default_rng(0)
    assert np.array_equal(stratified_subset(y, 0.9999, rng), np.arange(54))
    sub = stratified_subset(y, 0.1, rng)
    assert set(y[sub]) == {0, 1, 2}


# -- Kendall's tau ---------------------------------------------------------------------


def test_tau_self_and_reverse():
    x = np.random.default_rng(0).standard_normal((12, 4))
    assert kendalls_tau(x, x) == 1.0
    assert kendalls_tau(x, x[::-1]) == -1.0


def test_tau_enumerated_case():
    assert tau_from_retrieval([1, 0, 2, 3]) == pytest.approx(4 / 6)


def test_tau_ties_count_discordant():
    assert tau_from_retrieval([0, 0, 1]) == pytest.approx((2 - 1) / 3)


@settings(max_examples=20, deadline=None)
@given(st.integers(0, 10_000))
def test_tau_rotation_invariant(seed):
    rng = np.random.default_rng(seed)
    a, b = rng.standard_normal((10, 4)), rng.standard_normal((14, 4))
    R = special_ortho_group.rvs(4, random_state=seed)
    assert kendalls_tau(a, b) == pytest.approx(kendalls_tau(a @ R, b @ R))


# -- pipeline-level evaluation ------------------------------------------------------------


def _oracle_manifest(V=3, T=60, S=4):
    records = []
    for v in range(V):
        labels = np.repeat(np.arange(S), T // S)
        labels[:3] = -1
        onehot = np.eye(S + 1)[np.where(labels < 0, S, labels)]
        seq = FeatureSequence("m1", onehot)
        records.append(VideoRecord(f"v{v}", {"m1": seq}, labels, np.where(labels < 0, S, labels)))
    return Manifest(records, ["m1"])


def test_oracle_embeddings_score_perfectly():
    manifest = _oracle_manifest()
    feats = lambda rec: rec.features(["m1"]).astype(np.float64)[:, :4]
    gt_only = lambda rec: np.where(rec.step_labels[:, None] >= 0, feats(rec), 0)
    report = evaluate(manifest, gt_only, EvalOptions(num_clusters=5, baselines=["uniform"], fractions=(1.0,)))
    # four step clusters plus one for background; background frames never count
    assert report.ksl["model"]["overall"]["recall"] == 1.0
    s = evaluate(manifest, lambda rec: rec.features(["m1"]).astype(np.float64),
                 EvalOptions(num_clusters=4, baselines=["uniform"], fractions=(1.0,)))
    assert s.ksl["uniform"]["per_step"]["f1"] <= s.ksl["model"]["per_step"]["f1"]
    assert s.phase_accuracy["1.0"] == 1.0


def test_tau_section_lists_all_pairs():
    manifest = _oracle_manifest(V=4)
    report = evaluate(manifest, lambda r: r.features(["m1"]).astype(np.float64) + np.arange(60)[:, None] * 1e-3,
                      EvalOptions(num_clusters=4, fractions=()))
    assert len(report.kendalls_tau["pairs"]) == 6


def test_missing_labels_named():
    m = _oracle_manifest(V=1)
    m.records[0] = VideoRecord("v0", m.records[0].modalities)
    with pytest.raises(DataError, match="step_labels"):
        evaluate(m, lambda r: r.features(["m1"]), EvalOptions(num_clusters=2))


def test_phase_split():
    assert phase_split(1) == ([0], [])
    assert phase_split(5) == ([0, 1, 2, 3], [4])
    assert phase_split(10)[1] == [8, 9]


def test_report_rendering():
    report = evaluate(_oracle_manifest(), lambda r: r.features(["m1"]).astype(np.float64),
                      EvalOptions(num_clusters=4, baselines=["random"], fractions=(0.5,)))
    page = render_html(report, [3.0, 2.0, 1.5])
    assert "<svg" in page and "Kendall" in page and "random" in page
    md = render_markdown(report)
    assert md.startswith("# ") and "| model | per_step |" in md
    assert "no training history" in loss_curve_svg([])
