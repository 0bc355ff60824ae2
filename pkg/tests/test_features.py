from __future__ import annotations

import math

import numpy as np
import pytest

from tumorpipe.features import (
    FIRST_ORDER_FEATURES,
    SHAPE_FEATURES,
    FeatureError,
    FeatureVector,
    extract_first_order_features,
    extract_shape_features,
    ingest_features_csv,
    merge_features,
    write_features_csv,
)


def ball(r: int) -> np.ndarray:
    g = np.indices((2 * r + 5,) * 3) - (r + 2)
    return (g**2).sum(axis=0) <= r * r


def test_single_voxel():
    m = np.zeros((3, 3, 3), bool)
    m[1, 1, 1] = True
    f = extract_shape_features(m, (1, 1, 1)).as_dict()
    assert f["VoxelVolume"] == 1.0
    assert f["Elongation"] == 0.0 and f["MajorAxisLength"] == 0.0
    assert all(math.isfinite(v) for v in f.values())


def test_cube_matches_hand_computed_mesh():
    f = extract_shape_features(np.ones((10, 10, 10), bool), (1, 1, 1)).as_dict()
    # iso-0.5 surface of a cube: 6 faces of 9x9, 12 bevelled edges, 8 corner triangles
    area = 6 * 81 + 12 * 9 * math.sqrt(0.5) + 8 * (math.sqrt(3) / 4 * 0.5)
    # 1000 minus the edge prisms and corner tetrahedra cut off by the bevel
    volume = 1000 - 12 * 9 * 0.125 - 8 * (1 / 6) * 0.125 * 5
    assert f["VoxelVolume"] == 1000.0
    assert f["SurfaceArea"] == pytest.approx(area, rel=1e-5)
    assert f["MeshVolume"] == pytest.approx(volume, rel=1e-5)
    assert f["Sphericity"] == pytest.approx((36 * math.pi * volume**2) ** (1 / 3) / area, rel=1e-5)
    axis = 4 * math.sqrt((100 - 1) / 12)
    for k in ("MajorAxisLength", "MinorAxisLength", "LeastAxisLength"):
        assert f[k] == pytest.approx(axis)
    assert f["Elongation"] == pytest.approx(1.0) and f["Flatness"] == pytest.approx(1.0)


def test_sphere_sphericity_near_one():
    s = extract_shape_features(ball(8), (1, 1, 1)).as_dict()["Sphericity"]
    # marching cubes on a staircase surface overestimates area by a few percent
    assert 0.90 < s < 1.0
    assert s > extract_shape_features(np.ones((4, 4, 16), bool), (1, 1, 1)).as_dict()["Sphericity"]


def test_spacing_scales_shape():
    m = np.zeros((6, 6, 6), bool)
    m[1:5, 1:4, 2:4] = True
    iso = extract_shape_features(m, (1, 1, 1)).as_dict()
    big = extract_shape_features(m, (2, 2, 2)).as_dict()
    assert big["VoxelVolume"] == pytest.approx(8 * iso["VoxelVolume"])
    assert big["SurfaceArea"] == pytest.approx(4 * iso["SurfaceArea"], rel=1e-5)
    assert big["Maximum3DDiameter"] == pytest.approx(2 * iso["Maximum3DDiameter"], rel=1e-5)
    assert big["Sphericity"] == pytest.approx(iso["Sphericity"], rel=1e-5)


def test_planar_diameters_follow_axes():
    m = np.zeros((22, 6, 6), bool)
    m[1:21, 2:4, 2:4] = True  # long in x
    f = extract_shape_features(m, (1, 1, 1)).as_dict()
    assert f["Maximum2DDiameterRow"] < 3 < f["Maximum2DDiameterSlice"]
    assert f["Maximum2DDiameterSlice"] == pytest.approx(f["Maximum2DDiameterColumn"])
    assert f["Elongation"] < 0.2


def test_empty_mask_errors():
    with pytest.raises(FeatureError):
        extract_shape_features(np.zeros((3, 3, 3), bool), (1, 1, 1))
    with pytest.raises(FeatureError):
        extract_first_order_features(np.zeros((3, 3, 3)), np.zeros((3, 3, 3), bool))


def test_constant_region():
    img = np.full((2, 2, 2), 5.0)
    f = extract_first_order_features(img, np.ones((2, 2, 2), bool)).as_dict()
    assert f["Mean"] == 5 and f["Variance"] == 0 and f["Entropy"] == 0
    assert f["Skewness"] == 0 and f["Kurtosis"] == 0 and f["Uniformity"] == 1


def sorted_percentile(values, q):
    s = sorted(values)
    pos = q / 100 * (len(s) - 1)
    lo = int(math.floor(pos))
    hi = min(lo + 1, len(s) - 1)
    return s[lo] + (s[hi] - s[lo]) * (pos - lo)


def test_uniform_1_to_100_against_sort_oracle():
    vals = np.arange(1, 101, dtype=float)
    rng = np.random.default_rng(5)
    img = rng.permutation(vals).reshape(4, 5, 5)
    f = extract_first_order_features(img, np.ones(img.shape, bool), bin_width=10, spacing=(1, 1, 2)).as_dict()
    assert f["10Percentile"] == pytest.approx(sorted_percentile(vals, 10))
    assert f["90Percentile"] == pytest.approx(sorted_percentile(vals, 90))
    assert f["Median"] == pytest.approx(50.5)
    assert f["InterquartileRange"] == pytest.approx(sorted_percentile(vals, 75) - sorted_percentile(vals, 25))
    assert f["Range"] == 99 and f["Minimum"] == 1 and f["Maximum"] == 100
    assert f["Energy"] == pytest.approx(sum(v * v for v in vals))
    assert f["TotalEnergy"] == pytest.approx(2 * f["Energy"])
    assert f["RootMeanSquared"] == pytest.approx(math.sqrt(sum(v * v for v in vals) / 100))
    assert f["Variance"] == pytest.approx((100**2 - 1) / 12)
    assert f["MeanAbsoluteDeviation"] == pytest.approx(25.0)
    # bins floor(v/10) - 0: {1..9} -> 9, ten each for 10..99, {100} -> 1
    counts = np.array([9] + [10] * 9 + [1]) / 100
    assert f["Entropy"] == pytest.approx(-(counts * np.log2(counts)).sum())
    assert f["Uniformity"] == pytest.approx((counts**2).sum())
    inner = [v for v in vals if f["10Percentile"] <= v <= f["90Percentile"]]
    assert f["RobustMeanAbsoluteDeviation"] == pytest.approx(np.mean(np.abs(np.array(inner) - np.mean(inner))))


def test_moments():
    rng = np.random.default_rng(9)
    half = rng.normal(size=200)
    sym = np.concatenate([half, -half]).reshape(4, 10, 10)
    f = extract_first_order_features(sym, np.ones(sym.shape, bool)).as_dict()
    assert abs(f["Skewness"]) < 1e-9
    x = rng.exponential(size=1000).reshape(10, 10, 10)
    f = extract_first_order_features(x, np.ones(x.shape, bool)).as_dict()
    d = x.ravel() - x.mean()
    assert f["Skewness"] == pytest.approx(np.mean(d**3) / np.mean(d**2) ** 1.5)
    assert f["Kurtosis"] == pytest.approx(np.mean(d**4) / np.mean(d**2) ** 2)


def test_prefix_and_names():
    img = np.arange(27.0).reshape(3, 3, 3)
    fv = extract_first_order_features(img, img > 3, prefix="t1_")
    assert fv.names == tuple("t1_" + n for n in FIRST_ORDER_FEATURES)
    assert len(SHAPE_FEATURES) == 14 and len(FIRST_ORDER_FEATURES) == 18


def test_csv_round_trip_and_errors(tmp_path):
    vecs = [FeatureVector(f"c{i}", tuple(f"f{j}" for j in range(5)), tuple(float(i * j) + 0.1 for j in range(5))) for i in range(3)]
    write_features_csv(vecs, tmp_path / "f.csv")
    back = ingest_features_csv(tmp_path / "f.csv")
    assert back == vecs
    (tmp_path / "nan.csv").write_text("case_id,a,b\nx,1,2\ny,nan,3\n")
    with pytest.raises(FeatureError, match=r"case y, column a"):
        ingest_features_csv(tmp_path / "nan.csv")
    (tmp_path / "blank.csv").write_text("case_id,a,b\nx,1,\n")
    with pytest.raises(FeatureError, match=r"column b"):
        ingest_features_csv(tmp_path / "blank.csv")
    (tmp_path / "ragged.csv").write_text("case_id,a,b\nx,1,2,3\n")
    with pytest.raises(FeatureError):
        ingest_features_csv(tmp_path / "ragged.csv")


def test_merge_internal_and_external(caplog):
    shape = FeatureVector("c", SHAPE_FEATURES, tuple(range(14)))
    ext_names = tuple(f"{seq}_{i}" for seq in ("t1", "t1c", "t2", "flair") for i in range(93))
    ext = FeatureVector("c", ext_names, tuple(1.0 for _ in ext_names))
    merged = merge_features(shape, ext)
    assert len(merged.names) == len(set(merged.names)) == 14 + 4 * 93
    over = FeatureVector("c", ("VoxelVolume",), (99.0,))
    with caplog.at_level("WARNING"):
        assert merge_features(shape, over).as_dict()["VoxelVolume"] == 99.0
    assert "overridden" in caplog.text
    with pytest.raises(FeatureError):
        merge_features(shape, FeatureVector("d", (), ()))
