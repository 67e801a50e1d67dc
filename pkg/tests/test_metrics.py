import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from protoseg.errors import InvalidInputError
from protoseg.metrics import (CaseMetrics, aggregate_metrics, evaluate_case, overlap_metrics,
                              surface_distances, surface_voxels, write_report)


def _mask(shape=(8, 8, 8)):
    return np.zeros(shape, dtype=np.uint8)


def brute_force_distances(a_coords, b_coords, spacing):
    """All-pairs oracle: per voxel, scan every voxel of the other surface."""
    scale = np.asarray(spacing, dtype=np.float64)
    a = np.asarray(a_coords, dtype=np.float64) * scale
    b = np.asarray(b_coords, dtype=np.float64) * scale
    d_ab = [min(np.sqrt(((pa - pb) ** 2).sum()) for pb in b) for pa in a]
    d_ba = [min(np.sqrt(((pb - pa) ** 2).sum()) for pa in a) for pb in b]
    pooled = np.asarray(d_ab + d_ba)
    return pooled.mean(), np.percentile(pooled, 95)


# ---------------------------------------------------------------------------
# overlap
# ---------------------------------------------------------------------------

def test_identical_masks_score_perfect():
    m = _mask()
    m[2:5, 2:5, 2:5] = 1
    assert overlap_metrics(m, m) == (1.0, 1.0, 1.0)


def test_disjoint_masks_score_zero():
    a, b = _mask(), _mask()
    a[0, 0, 0] = 1
    b[7, 7, 7] = 1
    assert overlap_metrics(a, b) == (0.0, 0.0, 0.0)


def test_half_cube_counting_oracle():
    gt = _mask()
    gt[2:6, 2:6, 2:6] = 1          # 4x4x4 cube
    pred = _mask()
    pred[2:6, 2:6, 2:4] = 1        # left half along Z
    dsc, ppv, sen = overlap_metrics(pred, gt)
    assert abs(dsc - 2.0 / 3.0) < 1e-12
    assert ppv == 1.0 and sen == 0.5


def test_empty_cases_flag_missing():
    empty = _mask()
    full = _mask()
    full[1, 1, 1] = 1
    assert overlap_metrics(empty, empty) == (1.0, None, None)
    dsc, ppv, sen = overlap_metrics(empty, full)
    assert dsc == 0.0 and ppv is None and sen == 0.0
    dsc, ppv, sen = overlap_metrics(full, empty)
    assert dsc == 0.0 and ppv == 0.0 and sen is None


def test_non_binary_input_raises():
    bad = _mask().astype(np.float32)
    bad[0, 0, 0] = 0.5
    with pytest.raises(InvalidInputError):
        overlap_metrics(bad, _mask())


def test_overlap_exact_against_counting_oracle_random():
    rng = np.random.default_rng(0)
    for _ in range(10):
        pred = (rng.random((6, 6, 6)) > 0.6).astype(np.uint8)
        gt = (rng.random((6, 6, 6)) > 0.6).astype(np.uint8)
        dsc, ppv, sen = overlap_metrics(pred, gt)
        tp = int(np.sum(pred & gt))
        fp = int(np.sum(pred & ~gt.astype(bool)))
        fn = int(np.sum(~pred.astype(bool) & gt))
        assert dsc == (1.0 if (2 * tp + fp + fn) == 0 else 2 * tp / (2 * tp + fp + fn))
        if pred.sum():
            assert ppv == tp / (tp + fp)
        if gt.sum():
            assert sen == tp / (tp + fn)


def test_dsc_symmetric_ppv_sen_swap():
    rng = np.random.default_rng(1)
    pred = (rng.random((6, 6, 6)) > 0.5).astype(np.uint8)
    gt = (rng.random((6, 6, 6)) > 0.5).astype(np.uint8)
    d1, p1, s1 = overlap_metrics(pred, gt)
    d2, p2, s2 = overlap_metrics(gt, pred)
    assert d1 == d2 and p1 == s2 and s1 == p2


# ---------------------------------------------------------------------------
# surfaces
# ---------------------------------------------------------------------------

def test_single_voxel_is_its_own_surface():
    m = _mask()
    m[3, 4, 5] = 1
    assert surface_voxels(m).tolist() == [[3, 4, 5]]


def test_solid_cube_surface_excludes_center():
    m = _mask()
    m[2:5, 2:5, 2:5] = 1
    surf = surface_voxels(m)
    assert surf.shape[0] == 26
    assert [3, 3, 3] not in surf.tolist()


def test_empty_mask_has_empty_surface():
    assert surface_voxels(_mask()).shape == (0, 3)


def test_volume_edge_counts_as_boundary():
    m = np.ones((3, 3, 3), dtype=np.uint8)
    surf = surface_voxels(m)
    assert surf.shape[0] == 26  # all but the center voxel touch the grid edge


# ---------------------------------------------------------------------------
# distances
# ---------------------------------------------------------------------------

def test_identical_surfaces_have_zero_distance():
    m = _mask()
    m[2:5, 2:5, 2:5] = 1
    surf = surface_voxels(m)
    assert surface_distances(surf, surf, (1, 1, 1)) == (0.0, 0.0)


def test_parallel_points_three_apart():
    a = np.array([[0, 0, 0]])
    b = np.array([[3, 0, 0]])
    asd, hd95 = surface_distances(a, b, (1.0, 1.0, 1.0))
    assert asd == 3.0 and hd95 == 3.0


def test_spacing_scales_distances():
    a = np.array([[0, 0, 0]])
    b = np.array([[3, 0, 0]])
    asd, _ = surface_distances(a, b, (2.0, 1.0, 1.0))
    assert asd == 6.0


def test_empty_surface_is_missing_not_error():
    a = np.empty((0, 3))
    b = np.array([[1, 1, 1]])
    assert surface_distances(a, b, (1, 1, 1)) == (None, None)


@settings(max_examples=15, deadline=None)
@given(seed=st.integers(0, 500),
       spacing=st.sampled_from([(1.0, 1.0, 1.0), (2.0, 1.0, 1.0), (0.7, 0.7, 1.5)]))
def test_distances_match_all_pairs_oracle(seed, spacing):
    rng = np.random.default_rng(seed)
    pred = (rng.random((6, 6, 6)) > 0.7).astype(np.uint8)
    gt = (rng.random((6, 6, 6)) > 0.7).astype(np.uint8)
    sp, sg = surface_voxels(pred), surface_voxels(gt)
    if sp.shape[0] == 0 or sg.shape[0] == 0:
        assert surface_distances(sp, sg, spacing) == (None, None)
        return
    asd, hd95 = surface_distances(sp, sg, spacing)
    oracle_asd, oracle_hd = brute_force_distances(sp, sg, spacing)
    assert abs(asd - oracle_asd) < 1e-9
    assert abs(hd95 - oracle_hd) < 1e-9


def test_distances_are_symmetric_and_translation_invariant():
    rng = np.random.default_rng(7)
    pred = _mask((10, 10, 10))
    gt = _mask((10, 10, 10))
    pred[2:5, 2:5, 2:5] = 1
    gt[3:6, 3:7, 2:5] = 1
    sp, sg = surface_voxels(pred), surface_voxels(gt)
    fwd = surface_distances(sp, sg, (1, 1, 1))
    rev = surface_distances(sg, sp, (1, 1, 1))
    np.testing.assert_allclose(fwd, rev, rtol=0, atol=1e-12)
    shifted = surface_distances(sp + 2, sg + 2, (1, 1, 1))
    base = surface_distances(sp, sg, (1, 1, 1))
    assert abs(shifted[0] - base[0]) < 1e-9 and abs(shifted[1] - base[1]) < 1e-9


# ---------------------------------------------------------------------------
# report
# ---------------------------------------------------------------------------

def test_aggregate_means_recomputable_and_missing_excluded():
    rows = [
        CaseMetrics("a", 0.9, 0.8, 0.7, 1.0, 2.0),
        CaseMetrics("b", 0.5, None, 0.9, 3.0, 4.0, flags=["missing:ppv"]),
    ]
    report = aggregate_metrics(rows)
    assert abs(report.aggregates["dsc"]["mean"] - 0.7) < 1e-9
    assert abs(report.aggregates["ppv"]["mean"] - 0.8) < 1e-9
    assert report.missing_counts["ppv"] == 1
    expected_half = 1.96 * np.std([0.9, 0.5], ddof=1) / np.sqrt(2)
    assert abs(report.aggregates["dsc"]["half_width_95"] - expected_half) < 1e-9


def test_evaluate_case_flags_and_report_files(tmp_path):
    pred, gt = _mask(), _mask()
    gt[2:4, 2:4, 2:4] = 1
    row = evaluate_case("x", pred, gt, (1, 1, 1))
    assert "missing:ppv" in row.flags and "missing:asd_mm" in row.flags
    report = aggregate_metrics([row])
    write_report(report, tmp_path / "r.csv", tmp_path / "r.json")
    text = (tmp_path / "r.csv").read_text()
    assert "case_id" in text and "mean_dsc" in text
    assert (tmp_path / "r.json").exists()
