import numpy as np
import pytest

from csvdkit.calibrate import Lesion, connected_components
from csvdkit.matching import (
    MatchRule,
    candidate_scores,
    detection_metrics,
    dice,
    evaluate_case,
    match_instances,
    nsd,
    surface_voxels,
)
from csvdkit.volume import BinaryMask, affine_from_spacing

from oracles import brute_nsd, greedy_reference, surface


def point_lesion(id_, centroid):
    c = np.asarray(centroid, dtype=float)
    return Lesion(id_, np.zeros((1, 3), int), c, 1, 1.0, flat_index=np.array([id_]))


def lesions_of(mask, affine=None):
    return connected_components(BinaryMask(mask.astype(float), np.eye(4) if affine is None else affine))


def test_centroid_exactly_five_mm_matches():
    for other in ([5.0, 0, 0], [3.0, 4.0, 0]):
        res = match_instances([point_lesion(1, [0, 0, 0])], [point_lesion(1, other)], MatchRule.centroid())
        assert res.tp == 1
    res = match_instances([point_lesion(1, [0, 0, 0])], [point_lesion(1, [5.0 + 1e-9, 0, 0])], MatchRule.centroid())
    assert res.tp == 0


def test_iou_exactly_ten_percent_does_not_match():
    gt = np.zeros((12, 3, 3), bool)
    gt[0, 1, 1] = True
    pred10 = np.zeros_like(gt)
    pred10[0:10, 1, 1] = True  # IoU = 1/10
    pred9 = np.zeros_like(gt)
    pred9[0:9, 1, 1] = True  # IoU = 1/9
    rule = MatchRule.iou()
    assert candidate_scores(lesions_of(pred10), lesions_of(gt), rule)[0, 0] == 0.1
    assert match_instances(lesions_of(pred10), lesions_of(gt), rule).tp == 0
    assert match_instances(lesions_of(pred9), lesions_of(gt), rule).tp == 1


def test_one_to_one_and_extra_predictions_are_fp():
    gt = [point_lesion(1, [0, 0, 0])]
    pred = [point_lesion(1, [1, 0, 0]), point_lesion(2, [0.5, 0, 0])]
    res = match_instances(pred, gt, MatchRule.centroid())
    assert res.matches == [(2, 1, 0.5)]
    assert res.unmatched_pred == [1]
    p, r, f1, fp = detection_metrics(res)
    assert (p, r, fp) == (0.5, 1.0, 1)
    assert f1 == pytest.approx(2 / 3)


def test_empty_cases():
    both = match_instances([], [], MatchRule.centroid())
    assert detection_metrics(both) == (1.0, 1.0, 1.0, 0)
    miss = match_instances([], [point_lesion(1, [0, 0, 0])], MatchRule.centroid())
    assert detection_metrics(miss) == (0.0, 0.0, 0.0, 0)
    spurious = match_instances([point_lesion(1, [0, 0, 0])], [], MatchRule.iou())
    assert detection_metrics(spurious) == (0.0, 0.0, 0.0, 1)


def random_points(rng, n):
    return [point_lesion(i + 1, rng.uniform(0, 20, 3)) for i in range(n)]


@pytest.mark.parametrize("seed", range(20))
def test_greedy_matches_reference_and_swaps(seed):
    rng = np.random.default_rng(seed)
    pred, gt = random_points(rng, int(rng.integers(0, 9))), random_points(rng, int(rng.integers(0, 9)))
    rule = MatchRule.centroid()
    res = match_instances(pred, gt, rule)
    scores = candidate_scores(pred, gt, rule)
    ref = greedy_reference(scores, scores <= 5.0, lower_is_better=True)
    assert {(p - 1, g - 1) for p, g, _ in res.matches} == ref

    back = match_instances(gt, pred, rule)
    p, r, f1, _ = detection_metrics(res)
    p2, r2, f12, _ = detection_metrics(back)
    assert (p, r) == (r2, p2) and f1 == f12
    assert res.swapped().tp == back.tp


def test_surface_excludes_interior():
    m = np.zeros((5, 5, 5), bool)
    m[1:4, 1:4, 1:4] = True
    s = surface_voxels(m)
    assert s.sum() == 26 and not s[2, 2, 2]
    full = np.ones((3, 3, 3), bool)
    assert surface_voxels(full).sum() == 26  # out of bounds counts as background


def cube(shape, lo, hi):
    m = np.zeros(shape)
    m[lo[0] : hi[0], lo[1] : hi[1], lo[2] : hi[2]] = 1
    return m


def test_nsd_identities():
    a = BinaryMask(cube((10, 10, 10), (2, 2, 2), (6, 6, 6)))
    assert nsd(a, a) == 1.0
    b = BinaryMask(cube((10, 10, 10), (3, 2, 2), (7, 6, 6)))
    assert nsd(a, b, 1.0) == 1.0
    assert nsd(a, b, 0.5) < 1.0
    empty = BinaryMask(np.zeros((10, 10, 10)))
    assert nsd(empty, empty) == 1.0 and nsd(a, empty) == 0.0
    assert dice(a, a) == 1.0 and dice(a, b) == pytest.approx(2 * 48 / 128)


@pytest.mark.parametrize("seed", range(10))
def test_nsd_matches_brute_force(seed):
    rng = np.random.default_rng(100 + seed)
    shape = tuple(rng.integers(2, 9, size=3))
    aff = affine_from_spacing(rng.uniform(0.5, 2.0, 3))
    a = rng.random(shape) < 0.4
    b = rng.random(shape) < 0.4
    tol = float(rng.uniform(0.5, 2.5))
    assert sorted(map(tuple, np.argwhere(surface_voxels(a)).tolist())) == sorted(
        tuple(int(c) for c in v) for v in surface(a)
    )
    got = nsd(BinaryMask(a.astype(float), aff), BinaryMask(b.astype(float), aff), tol)
    assert abs(got - brute_nsd(a, b, aff, tol)) <= 1e-12


def test_evaluate_case_pair_scores_match_whole_volume():
    gt = cube((20, 20, 20), (2, 2, 2), (6, 6, 6)) + cube((20, 20, 20), (12, 12, 12), (15, 15, 15))
    pred = cube((20, 20, 20), (3, 2, 2), (7, 6, 6))
    res, m = evaluate_case(lesions_of(pred), lesions_of(gt), BinaryMask(pred), BinaryMask(gt), MatchRule.centroid())
    assert (m.tp_count, m.fn_count, m.fp_count) == (1, 1, 0)
    one = BinaryMask(cube((20, 20, 20), (2, 2, 2), (6, 6, 6)))
    assert m.dsc == pytest.approx(dice(BinaryMask(pred), one))
    assert m.nsd == pytest.approx(nsd(BinaryMask(pred), one))


def test_evaluate_case_without_matches_has_no_overlap_scores():
    gt = cube((8, 8, 8), (0, 0, 0), (2, 2, 2))
    pred = cube((8, 8, 8), (6, 6, 6), (8, 8, 8))
    _, m = evaluate_case(lesions_of(pred), lesions_of(gt), BinaryMask(pred), BinaryMask(gt), MatchRule.iou())
    assert m.dsc is None and m.nsd is None and m.f1 == 0.0
