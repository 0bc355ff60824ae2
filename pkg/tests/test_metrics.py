from __future__ import annotations

import math

import numpy as np
import pytest

import oracles
from conftest import random_mask, random_pair
from tumorpipe.metrics import (
    HD95_UNDEFINED,
    MetricParams,
    MetricTable,
    boundary_hd95,
    boundary_nsd,
    connected_components,
    dilate_mask,
    evaluate_case,
    lesion_wise_metric,
    match_lesions,
    overlap_dice,
)
from tumorpipe.taskspec import builtin_task
from tumorpipe.volio import Volume


def _cube(shape, lo, hi):
    m = np.zeros(shape, bool)
    m[lo[0] : hi[0], lo[1] : hi[1], lo[2] : hi[2]] = True
    return m


# -- connected components -------------------------------------------------


def test_empty_mask_has_no_components():
    assert connected_components(np.zeros((5, 5, 5), bool)).n_components == 0


def test_corner_diagonal_connectivity():
    m = np.zeros((3, 3, 3), bool)
    m[0, 0, 0] = m[1, 1, 1] = True
    assert connected_components(m, 26).n_components == 1
    assert connected_components(m, 18).n_components == 2
    assert connected_components(m, 6).n_components == 2


@pytest.mark.parametrize("connectivity", [6, 18, 26])
def test_components_match_union_find(rng, connectivity):
    for _ in range(100 // 3 + 1):
        m = random_mask(rng, (12, 12, 12), density=rng.uniform(0.05, 0.35), smooth=False)
        got = connected_components(m, connectivity)
        want = oracles.union_find_components(m, connectivity)
        assert got.n_components == want.max()
        np.testing.assert_array_equal(got.labels, want)
        assert list(got.voxel_counts) == [int((want == i).sum()) for i in range(1, got.n_components + 1)]


def test_component_ids_invariant_to_input_type(rng):
    m = random_mask(rng, (8, 9, 10))
    v = Volume(m.astype(np.uint8))
    np.testing.assert_array_equal(connected_components(v).labels, connected_components(m).labels)


# -- dilation -------------------------------------------------------------


def test_dilate_radius_zero_is_identity(rng):
    m = random_mask(rng, (6, 7, 8))
    np.testing.assert_array_equal(dilate_mask(m, 0), m)


def test_dilate_single_voxel_cube():
    m = np.zeros((5, 5, 5), bool)
    m[2, 2, 2] = True
    assert dilate_mask(m, 1).sum() == 27


def test_dilate_matches_brute_force(rng):
    for _ in range(5):
        m = random_mask(rng, (10, 10, 10), density=0.03, smooth=False)
        np.testing.assert_array_equal(dilate_mask(m, 2), oracles.chebyshev_dilation(m, 2))


# -- dice / nsd / hd95 ----------------------------------------------------


def test_dice_closed_forms():
    a = _cube((6, 6, 6), (1, 1, 1), (3, 3, 3))
    b = _cube((6, 6, 6), (2, 1, 1), (4, 3, 3))
    assert overlap_dice(a, a) == 1.0
    assert overlap_dice(a, _cube((6, 6, 6), (4, 4, 4), (6, 6, 6))) == 0.0
    assert overlap_dice(a, b) == 0.5
    assert overlap_dice(np.zeros((2, 2, 2)), np.zeros((2, 2, 2))) == 1.0


def test_dim_mismatch_raises():
    with pytest.raises(ValueError):
        overlap_dice(np.zeros((2, 2, 2)), np.zeros((2, 2, 3)))
    with pytest.raises(ValueError):
        boundary_nsd(np.ones((2, 2, 2)), np.ones((2, 2, 3)), (1, 1, 1))


def test_nsd_identity_and_empty():
    a = _cube((6, 6, 6), (1, 1, 1), (4, 4, 4))
    assert boundary_nsd(a, a, (1, 1, 1), 1.0) == 1.0
    assert boundary_nsd(np.zeros_like(a), np.zeros_like(a), (1, 1, 1)) == 1.0
    assert boundary_nsd(a, np.zeros_like(a), (1, 1, 1)) == 0.0


def test_nsd_offset_against_oracle_and_spacing_monotone():
    a = _cube((12, 12, 12), (2, 2, 2), (8, 8, 8))
    b = np.roll(a, 1, axis=0)
    v1 = boundary_nsd(a, b, (1, 1, 1), 1.0)
    assert v1 == pytest.approx(oracles.nsd(a, b, (1, 1, 1), 1.0), abs=1e-12)
    v3 = boundary_nsd(a, b, (3, 3, 3), 1.0)
    assert v3 == pytest.approx(oracles.nsd(a, b, (3, 3, 3), 1.0), abs=1e-12)
    assert v3 < v1


def test_hd95_simple_cases():
    a = _cube((6, 6, 6), (1, 1, 1), (4, 4, 4))
    assert boundary_hd95(a, a, (1, 1, 1)) == 0.0
    p = np.zeros((10, 3, 3), bool)
    q = p.copy()
    p[1, 1, 1] = q[5, 1, 1] = True
    assert boundary_hd95(p, q, (1, 1, 1)) == 4.0
    assert boundary_hd95(p, np.zeros_like(p), (1, 1, 1)) == HD95_UNDEFINED
    assert boundary_hd95(np.zeros_like(p), np.zeros_like(p), (1, 1, 1)) == 0.0


def test_distance_metrics_match_oracle(rng):
    for _ in range(40):
        a, b, spacing = random_pair(rng)
        assert boundary_nsd(a, b, spacing, 1.0) == pytest.approx(oracles.nsd(a, b, spacing, 1.0), abs=1e-9)
        got, want = boundary_hd95(a, b, spacing), oracles.hd95(a, b, spacing)
        assert got == want or abs(got - want) <= 1e-9


def test_metric_symmetry(rng):
    for _ in range(20):
        a, b, s = random_pair(rng)
        assert overlap_dice(a, b) == overlap_dice(b, a)
        assert boundary_nsd(a, b, s) == pytest.approx(boundary_nsd(b, a, s), abs=1e-12)
        assert boundary_hd95(a, b, s) == pytest.approx(boundary_hd95(b, a, s), abs=1e-12)


def test_hd95_scales_with_spacing(rng):
    for _ in range(10):
        a, b, s = random_pair(rng)
        if not a.any() or not b.any():
            continue
        k = 2.5
        assert boundary_hd95(a, b, tuple(k * x for x in s)) == pytest.approx(k * boundary_hd95(a, b, s), rel=1e-12)


# -- lesion-wise ----------------------------------------------------------


def test_match_single_overlap():
    a = _cube((10, 10, 10), (2, 2, 2), (5, 5, 5))
    m = match_lesions(a, a)
    assert m.matched_pred == {1: frozenset({1})}
    assert not m.unmatched_pred


def test_match_respects_dilation_radius():
    ref = _cube((16, 8, 8), (2, 2, 2), (5, 5, 5))
    pred = _cube((16, 8, 8), (7, 2, 2), (9, 5, 5))  # gap of 2 voxels along x
    assert match_lesions(ref, pred, dilation_radius=3).matched_pred[1] == {1}
    m0 = match_lesions(ref, pred, dilation_radius=0)
    assert m0.unmatched_pred == {1}


def test_match_largest_intersection_wins():
    ref = np.zeros((20, 6, 6), bool)
    ref[2:4, 2:4, 2:4] = True  # lesion 1, halo x 0..6 at radius 3
    ref[14:16, 2:4, 2:4] = True  # lesion 2, halo x 11..18
    pred = np.zeros_like(ref)
    pred[2:14, 3, 3] = True  # 5 voxels in halo 1, 3 in halo 2
    m = match_lesions(ref, pred, dilation_radius=3)
    assert m.matched_pred[1] == {1} and m.matched_pred[2] == frozenset()
    pred2 = np.zeros_like(ref)
    pred2[4:16, 3, 3] = True
    m = match_lesions(ref, pred2, dilation_radius=1)
    # halo 1 covers x 1..4 (1 voxel of the bar), halo 2 covers x 13..16 (3 voxels)
    assert m.matched_pred[2] == {1} and m.matched_pred[1] == frozenset()


def test_match_tie_goes_to_lower_lesion():
    ref = np.zeros((20, 6, 6), bool)
    ref[2:4, 2:4, 2:4] = True
    ref[14:16, 2:4, 2:4] = True
    pred = np.zeros_like(ref)
    pred[5:13, 3, 3] = True  # exactly one voxel inside each radius-2 halo
    m = match_lesions(ref, pred, dilation_radius=2)
    assert m.matched_pred[1] == {1}


def test_lesion_wise_perfect_and_false_positive():
    ref = _cube((20, 10, 10), (2, 2, 2), (6, 6, 6))
    assert lesion_wise_metric(ref, ref, "dice") == 1.0
    pred = ref.copy()
    pred[15:17, 7:9, 7:9] = True
    assert lesion_wise_metric(ref, pred, "dice") == 0.5
    empty = np.zeros_like(ref)
    assert lesion_wise_metric(empty, empty, "nsd") == 1.0
    assert lesion_wise_metric(empty, pred, "nsd") == 0.0


def test_lesion_wise_equals_global_for_single_components():
    ref = _cube((12, 12, 12), (2, 2, 2), (7, 7, 7))
    pred = _cube((12, 12, 12), (3, 2, 2), (8, 7, 6))
    assert lesion_wise_metric(ref, pred, "dice") == overlap_dice(ref, pred)
    assert lesion_wise_metric(ref, pred, "nsd", (1, 1, 2)) == boundary_nsd(ref, pred, (1, 1, 2))


def _phantom(rng, shape=(24, 24, 24), n=3):
    m = np.zeros(shape, bool)
    centres = [(5, 5, 5), (17, 6, 16), (8, 18, 12)][:n]
    for c in centres:
        r = rng.integers(2, 4, size=3)
        lo = [max(ci - ri, 0) for ci, ri in zip(c, r)]
        hi = [ci + ri for ci, ri in zip(c, r)]
        m[lo[0] : hi[0], lo[1] : hi[1], lo[2] : hi[2]] = True
    return m


def test_lesion_wise_three_lesion_phantoms(rng):
    for _ in range(8):
        ref = _phantom(rng)
        pred = _phantom(rng) ^ (rng.random(ref.shape) < 0.003)
        s = tuple(rng.uniform(0.5, 2.0, 3))
        for metric in ("dice", "nsd"):
            assert lesion_wise_metric(ref, pred, metric, s) == pytest.approx(
                oracles.lesion_wise(ref, pred, metric, s), abs=1e-9
            )


def test_lesion_wise_invariant_to_component_order():
    ref = _phantom(np.random.default_rng(1))
    pred = _phantom(np.random.default_rng(2))
    flipped = lesion_wise_metric(ref[::-1], pred[::-1], "dice")
    assert flipped == pytest.approx(lesion_wise_metric(ref, pred, "dice"), abs=1e-12)


def test_min_lesion_filter_drops_small_false_positives():
    ref = _cube((20, 10, 10), (2, 2, 2), (6, 6, 6))
    pred = ref.copy()
    pred[15, 8, 8] = True
    assert lesion_wise_metric(ref, pred, "dice", min_lesion_voxels=2) == 1.0


# -- case evaluation ------------------------------------------------------


def _ped_case(rng):
    spec = builtin_task("PED")
    lab = np.zeros((20, 20, 20), np.uint8)
    lab[4:16, 4:16, 4:16] = spec.base_labels["ED"]
    lab[6:14, 6:14, 6:14] = spec.base_labels["NET"]
    lab[8:12, 8:12, 8:12] = spec.base_labels["ET"]
    lab[9:11, 9:11, 9:11] = spec.base_labels["CC"]
    return spec, Volume(lab)


def test_evaluate_case_perfect_ped(rng):
    spec, ref = _ped_case(rng)
    rows = evaluate_case(ref, ref, spec)
    assert len(rows) == 6 * 5
    assert all(r.value == 1.0 for r in rows if r.metric == "lw_dice")
    assert {r.region for r in rows} == set(spec.region_names)


def test_evaluate_case_empty_prediction_men_rt():
    spec = builtin_task("MEN-RT")
    lab = np.zeros((10, 10, 10), np.uint8)
    lab[3:6, 3:6, 3:6] = 1
    rows = evaluate_case(Volume(lab), Volume(np.zeros_like(lab)), spec)
    lw = [r for r in rows if r.metric == "lw_dice"]
    assert len(lw) == 1 and lw[0].region == "GTV" and lw[0].value == 0.0
    assert math.isinf([r for r in rows if r.metric == "hd95"][0].value)


def test_evaluate_case_met_cardinality(rng):
    spec = builtin_task("MET")
    lab = rng.choice([0, 1, 2, 3, 4], size=(10, 10, 10), p=[0.7, 0.1, 0.1, 0.05, 0.05]).astype(np.uint8)
    pred = np.where(rng.random(lab.shape) < 0.1, 0, lab).astype(np.uint8)
    params = MetricParams(metrics=("lw_dice", "hd95"))
    rows = evaluate_case(Volume(lab), Volume(pred), spec, params)
    assert len(rows) == len(spec.regions) * 2
    assert len({(r.region, r.metric) for r in rows}) == len(rows)


def test_evaluate_case_geometry_mismatch():
    spec, ref = _ped_case(None)
    other = Volume(np.zeros((20, 20, 20), np.uint8), spacing=(1, 1, 2))
    with pytest.raises(ValueError):
        evaluate_case(ref, other, spec)


def test_metric_table_round_trip(tmp_path, rng):
    spec, ref = _ped_case(rng)
    pred = ref.with_data(np.zeros(ref.dims, np.uint8))
    table = MetricTable(evaluate_case(ref, pred, spec, case_id="c1", candidate_id="m"))
    table.to_csv(tmp_path / "t.csv")
    table.to_json(tmp_path / "t.json")
    for name in ("t.csv", "t.json"):
        back = MetricTable.read(tmp_path / name)
        assert back.rows == table.rows
    header = (tmp_path / "t.csv").read_text().splitlines()[0]
    assert header == "case_id,candidate_id,region,metric,value"
