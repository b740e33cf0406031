import numpy as np
import pytest
from hypothesis import assume, given, settings
from hypothesis import strategies as st

from fakeformer import evaluation as ev
from fakeformer.evaluation import MetricError
from fakeformer.verify import oracle_auc

score_lists = st.lists(st.sampled_from([0.0, 0.25, 0.5, 0.75, 1.0]) | st.floats(-5, 5), min_size=2, max_size=30)


# AUC


def test_auc_small_cases():
    assert ev.auc([0.9, 0.8, 0.2, 0.1], [1, 1, 0, 0]) == 1.0
    assert ev.auc([0.3] * 6, [0, 1, 0, 1, 1, 0]) == 0.5
    assert ev.auc([0.9, 0.8, 0.2, 0.1], [0, 1, 0, 1]) == 0.25


@given(st.data())
def test_auc_matches_pair_counting(data):
    scores = data.draw(score_lists)
    labels = data.draw(st.lists(st.integers(0, 1), min_size=len(scores), max_size=len(scores)))
    assume(0 < sum(labels) < len(labels))
    assert ev.auc(scores, labels) == oracle_auc(scores, labels)


def test_auc_needs_both_classes():
    with pytest.raises(MetricError):
        ev.auc([0.1, 0.2], [1, 1])
    with pytest.raises(MetricError):
        ev.auc([0.1, 0.2], [1, 2])
    with pytest.raises(MetricError):
        ev.auc([0.1, np.nan], [0, 1])
    with pytest.raises(MetricError):
        ev.auc([0.1], [0, 1])


# AP


def _ap_oracle(scores, labels):
    # walk the ranking with ties kept in input order
    order = sorted(range(len(scores)), key=lambda i: -scores[i])
    hits, total = 0, 0.0
    for rank, i in enumerate(order, 1):
        if labels[i]:
            hits += 1
            total += hits / rank
    return total / sum(labels)


def test_ap_cases():
    assert ev.average_precision([0.9, 0.8, 0.2], [1, 1, 0]) == 1.0
    assert ev.average_precision([0.9, 0.8, 0.2], [1, 0, 1]) == pytest.approx(5 / 6, abs=1e-15)
    for n in (1, 3, 7, 20):
        labels = [0] * (n - 1) + [1]
        assert ev.average_precision(np.linspace(1, 0, n), labels) == pytest.approx(1 / n, abs=1e-15)


@given(st.data())
def test_ap_matches_rank_walk(data):
    scores = data.draw(score_lists)
    labels = data.draw(st.lists(st.integers(0, 1), min_size=len(scores), max_size=len(scores)))
    assume(sum(labels) > 0)
    assert ev.average_precision(scores, labels) == pytest.approx(_ap_oracle(scores, labels), abs=1e-12)


def test_ap_needs_a_positive():
    with pytest.raises(MetricError):
        ev.average_precision([0.2, 0.1], [0, 0])


# video level


def test_video_scores():
    assert ev.video_level_scores([0.7], ["a"]) == {"a": 0.7}
    assert ev.video_level_scores([0.2, 0.4, 0.6], ["v"] * 3)["v"] == pytest.approx(0.4)
    assert ev.video_level_scores([0.2, 0.4, 0.6], ["v"] * 3, "max")["v"] == 0.6
    with pytest.raises(MetricError):
        ev.video_level_scores([0.1], ["a"], "median")


@settings(max_examples=50)
@given(st.lists(st.tuples(st.floats(0, 1), st.sampled_from("abcde")), min_size=1, max_size=40))
def test_video_grouping_matches_pregrouped(frames):
    scores = [s for s, _ in frames]
    ids = [i for _, i in frames]
    got = ev.video_level_scores(scores, ids)
    for vid in set(ids):
        members = [s for s, i in frames if i == vid]
        assert got[vid] == pytest.approx(sum(members) / len(members), abs=1e-12)


def test_video_label_is_any_fake():
    ids, s, y = ev.video_level([0.1, 0.9, 0.5], [0, 1, 0], ["a", "a", "b"])
    assert ids == ["a", "b"] and y.tolist() == [1, 0]


# SSIM


def test_ssim_identity_and_inverse():
    rng = np.random.default_rng(0)
    x = rng.uniform(size=(3, 32, 32))
    assert abs(ev.ssim(x, x) - 1.0) <= 1e-12
    binary = (rng.uniform(size=(32, 32)) > 0.5).astype(float)
    assert ev.ssim(binary, 1.0 - binary) < 0.1


def test_ssim_direct_formula_on_constant_images():
    a, b = np.full((16, 16), 0.2), np.full((16, 16), 0.6)
    c1 = ev.SSIM_C1
    ref = (2 * 0.2 * 0.6 + c1) / (0.2**2 + 0.6**2 + c1)
    assert ev.ssim(a, b) == pytest.approx(ref, abs=1e-12)


def test_mask_ssim_full_mask():
    rng = np.random.default_rng(1)
    a, b = rng.uniform(size=(3, 24, 24)), rng.uniform(size=(3, 24, 24))
    assert ev.mask_ssim(a, b, np.ones((24, 24))) == pytest.approx(ev.ssim_map(a, b).mean(), abs=1e-15)
    with pytest.raises(MetricError):
        ev.mask_ssim(a, b, np.zeros((24, 24)))
    with pytest.raises(MetricError):
        ev.ssim(a, b[:, :20])


# stratification


def test_single_bin_equals_global_auc():
    rng = np.random.default_rng(2)
    s, y, q = rng.uniform(size=50), rng.integers(0, 2, 50), rng.uniform(size=50)
    y[:2] = [0, 1]
    y[2] = 1
    rows = ev.stratify_by_ssim(s, y, q, edges=[0.0, 1.0])
    assert len(rows) == 1 and rows[0]["auc"] == ev.auc(s, y)


def test_stratified_auc_falls_with_ssim():
    rng = np.random.default_rng(3)
    edges = list(ev.DEFAULT_SSIM_EDGES)
    n_real, scores, labels, q = 40, [], [], []
    scores += list(rng.uniform(0, 0.5, n_real))
    labels += [0] * n_real
    q += [0.0] * n_real
    for lo, hi in zip(edges[:-1], edges[1:]):
        mid = (lo + hi) / 2
        # harder (lower-scoring) fakes at higher similarity
        scores += list(rng.uniform(0.5 - mid * 0.6, 1.0 - mid * 0.6, 20))
        labels += [1] * 20
        q += [mid] * 20
    rows = ev.stratify_by_ssim(scores, labels, q, edges)
    assert rows[0]["lo"] == 0.0 and rows[0]["count"] == 0 and rows[0]["auc"] is None
    aucs = [r["auc"] for r in rows[1:]]
    assert all(a >= b for a, b in zip(aucs, aucs[1:])) and aucs[0] > aucs[-1]
    s, y, qq = np.array(scores), np.array(labels), np.array(q)
    for r in rows[1:]:
        sel = (y == 0) | ((qq >= r["lo"]) & (qq < r["hi"]) & (y == 1))
        assert r["auc"] == oracle_auc(s[sel], y[sel])


def test_default_edges():
    assert ev.DEFAULT_SSIM_EDGES == (0.6, 0.8, 0.9, 0.925, 0.95, 0.97, 1.0)


# perturbations


@pytest.mark.parametrize("kind", ev.PERTURBATIONS)
def test_perturb_severity_zero_and_range(kind):
    img = np.random.default_rng(4).uniform(size=(3, 32, 32))
    assert np.array_equal(ev.perturb(img, kind, 0, 0), img)
    for s in range(1, 6):
        out = ev.perturb(img, kind, s, s)
        assert out.shape == img.shape and out.min() >= 0.0 and out.max() <= 1.0
        assert np.array_equal(out, ev.perturb(img, kind, s, s))


def test_noise_level_at_severity_five():
    img = np.full((3, 32, 32), 0.5)
    stds = [np.std(ev.perturb(img, "noise", 5, seed) - img) for seed in range(50)]
    assert abs(np.mean(stds) - 0.05) <= 0.2 * 0.05


def test_blur_keeps_mean_brightness():
    img = np.random.default_rng(5).uniform(0.2, 0.8, size=(3, 32, 32))
    for s in range(1, 6):
        assert abs(ev.perturb(img, "blur", s, 0).mean() - img.mean()) <= 1e-3


def test_block_count_and_fill():
    img = np.zeros((3, 64, 64))
    out = ev.perturb(img, "block", 1, 0)
    assert (out == 0.5).sum() == 3 * 8 * 8


def test_contrast_scales_about_mean():
    img = np.random.default_rng(6).uniform(0.4, 0.6, size=(3, 16, 16))
    out = ev.perturb(img, "contrast", 3, 0)
    ratio = (out - img.mean()) / (img - img.mean())
    assert np.allclose(ratio, ratio.flat[0]) and abs(abs(ratio.flat[0] - 1.0) - 0.3) < 1e-9


def test_perturb_rejects_bad_input():
    img = np.zeros((3, 8, 8))
    with pytest.raises(MetricError):
        ev.perturb(img, "rotate", 1, 0)
    with pytest.raises(MetricError):
        ev.perturb(img, "noise", 6, 0)


# reports


def test_report_and_csv():
    rep = ev.build_report([0.9, 0.1, 0.8, 0.3], [1, 0, 1, 0])
    assert rep.auc == 1.0 and rep.ap == 1.0 and (rep.n_pos, rep.n_neg) == (2, 2)
    rep.bins = [{"lo": 0.0, "hi": 1.0, "auc": None, "count": 0}]
    text = ev.report_to_csv([rep])
    lines = text.strip().splitlines()
    assert lines[0] == "section,key,auc,ap,count"
    assert lines[1].startswith("overall,frame,1.0,1.0,4")
    assert lines[2] == "mask_ssim,0.0-1.0,,,0"
