import dataclasses

import numpy as np
import pytest
import torch

from protoseg.config import NetworkConfig
from protoseg.errors import InvalidInputError
from protoseg.inference import (apply_roi_mask, coverage_counts, make_model_predictor,
                                predict_case, sliding_window_predict, window_origins)
from protoseg.prototypes import PrototypeBank
from protoseg.synthetic import SyntheticSpec, generate_synthetic_case
from protoseg.training import init_parameters

CFG = NetworkConfig(channel_base=4, hidden_size=16, num_transformer_layers=1, window_size=1,
                    patch_dims=(16, 16, 8), stride=(8, 8, 4), batch_cases=1,
                    stage1_epochs=1, stage2_epochs=1)


def _pair(shape=(24, 24, 12), seed=0):
    rng = np.random.default_rng(seed)
    pre = rng.normal(size=shape).astype(np.float32)
    post = pre + rng.normal(size=shape).astype(np.float32)
    return pre, post


def constant_stub(value: float):
    def predict(window):
        return np.full(window.shape[1:], value, dtype=np.float32)
    return predict


# ---------------------------------------------------------------------------
# geometry
# ---------------------------------------------------------------------------

def test_window_origins_cover_and_clamp():
    origins = window_origins((24, 16, 10), (16, 16, 8), (8, 8, 4))
    assert (8, 0, 2) in origins                      # clamped final windows
    counts = coverage_counts((24, 16, 10), (16, 16, 8), (8, 8, 4))
    assert counts.min() >= 1


def test_coverage_depends_only_on_shape():
    a = coverage_counts((24, 24, 12), (16, 16, 8), (8, 8, 4))
    b = coverage_counts((24, 24, 12), (16, 16, 8), (8, 8, 4))
    assert np.array_equal(a, b)


def test_patch_larger_than_volume_rejected_in_origins():
    with pytest.raises(InvalidInputError):
        window_origins((8, 8, 8), (16, 16, 8), (8, 8, 4))


# ---------------------------------------------------------------------------
# averaging
# ---------------------------------------------------------------------------

def test_single_window_equals_one_forward_pass():
    model = init_parameters(CFG, 3).eval()
    predictor = make_model_predictor(model, None, CFG)
    pre, post = _pair((16, 16, 8), 1)
    out = sliding_window_predict(pre, post, predictor, CFG)
    from protoseg.volumes import build_input_tensor
    direct = predictor(build_input_tensor(pre, post, CFG.window_size))
    np.testing.assert_allclose(out, direct, rtol=0, atol=1e-6)


def test_constant_stub_survives_overlap_averaging():
    pre, post = _pair((24, 24, 12), 2)
    out = sliding_window_predict(pre, post, constant_stub(0.7), CFG)
    np.testing.assert_allclose(out, 0.7, rtol=0, atol=1e-6)


def test_two_window_overlap_is_the_mean_and_matches_count_oracle():
    # volume sized for exactly two windows along the first axis
    cfg = dataclasses.replace(CFG, patch_dims=(16, 16, 8), stride=(8, 16, 8))
    shape = (24, 16, 8)
    values = iter([0.2, 0.6])

    def indexed_stub(window):
        return np.full(window.shape[1:], next(values), dtype=np.float32)

    pre, post = _pair(shape, 3)
    out = sliding_window_predict(pre, post, indexed_stub, cfg)
    accum = np.zeros(shape)
    counts = np.zeros(shape, dtype=np.int32)
    for origin, v in zip(window_origins(shape, cfg.patch_dims, cfg.stride), (0.2, 0.6)):
        sl = tuple(slice(o, o + p) for o, p in zip(origin, cfg.patch_dims))
        accum[sl] += v
        counts[sl] += 1
    np.testing.assert_allclose(out, accum / counts, rtol=0, atol=1e-6)
    np.testing.assert_allclose(out[8:16], 0.4, rtol=0, atol=1e-6)  # overlap region


def test_output_independent_of_visit_order():
    model = init_parameters(CFG, 4).eval()
    predictor = make_model_predictor(model, None, CFG)
    pre, post = _pair((24, 24, 12), 5)
    origins = window_origins(pre.shape, CFG.patch_dims, CFG.stride)
    shuffled = list(origins)
    np.random.default_rng(0).shuffle(shuffled)
    a = sliding_window_predict(pre, post, predictor, CFG, origins=origins)
    b = sliding_window_predict(pre, post, predictor, CFG, origins=shuffled)
    np.testing.assert_allclose(a, b, rtol=0, atol=1e-6)


def test_volume_smaller_than_patch_is_padded_and_cropped():
    pre, post = _pair((10, 12, 6), 6)
    out = sliding_window_predict(pre, post, constant_stub(0.3), CFG)
    assert out.shape == (10, 12, 6)
    np.testing.assert_allclose(out, 0.3, rtol=0, atol=1e-6)


def test_non_overlapping_stride_covers_each_voxel_once():
    cfg = dataclasses.replace(CFG, stride=CFG.patch_dims)
    counts = coverage_counts((32, 32, 16), cfg.patch_dims, cfg.stride)
    assert counts.max() == 1 and counts.min() == 1


# ---------------------------------------------------------------------------
# roi and end-to-end case prediction
# ---------------------------------------------------------------------------

def test_roi_all_ones_is_identity_and_zeros_blank():
    prob = np.random.default_rng(7).random((6, 6, 6)).astype(np.float32)
    assert np.array_equal(apply_roi_mask(prob, np.ones_like(prob)), prob)
    assert apply_roi_mask(prob, np.zeros_like(prob)).sum() == 0


def test_roi_matches_elementwise_product_oracle():
    rng = np.random.default_rng(8)
    prob = rng.random((5, 5, 5)).astype(np.float32)
    roi = (rng.random((5, 5, 5)) > 0.5).astype(np.uint8)
    np.testing.assert_array_equal(apply_roi_mask(prob, roi), prob * roi)
    with pytest.raises(InvalidInputError):
        apply_roi_mask(prob, np.ones((4, 4, 4)))


def test_predict_case_round_trips_native_grid():
    case = generate_synthetic_case(
        SyntheticSpec(grid_size=(32, 32, 32), seed=5, spacing_mm=(0.5, 1.0, 1.0)))
    model = init_parameters(CFG, 9).eval()
    mask, prob, info = predict_case(case, model, None, CFG)
    assert mask.shape == case.shape
    assert prob.shape == (16, 32, 32)  # resampled working grid
    assert set(np.unique(mask)) <= {0, 1}
    assert info["num_windows"] >= 1


def test_predict_case_uses_fused_output_when_bank_available(tiny_cfg):
    cfg = dataclasses.replace(CFG, prototypes_per_class=2)
    model = init_parameters(cfg, 10).eval()
    bank = PrototypeBank(torch.randn(2, 2, 4), momentum=0.9)
    case = generate_synthetic_case(SyntheticSpec(grid_size=(32, 32, 32), seed=6))
    mask_fused, prob_fused, _ = predict_case(case, model, bank, cfg)
    mask_plain, prob_plain, _ = predict_case(case, model, None, cfg)
    assert not np.allclose(prob_fused, prob_plain)
