import dataclasses

import numpy as np

from protoseg.config import NetworkConfig
from protoseg.sampling import (KIND_FALLBACK, KIND_FULL, KIND_PARTIAL, build_batch,
                               prepare_case, sample_patches)
from protoseg.synthetic import SyntheticSpec, generate_synthetic_case
from protoseg.volumes import VolumeCase

CFG = NetworkConfig(channel_base=8, hidden_size=16, num_transformer_layers=1, window_size=1,
                    patch_dims=(16, 16, 8), stride=(8, 8, 8), batch_cases=2,
                    stage1_epochs=1, stage2_epochs=1)


def _cube_case(shape=(32, 32, 32), lo=12, hi=18, case_id="cube"):
    rng = np.random.default_rng(0)
    pre = rng.normal(size=shape).astype(np.float32)
    post = pre + 1.0
    mask = np.zeros(shape, dtype=np.uint8)
    mask[lo:hi, lo:hi, lo:hi] = 1
    return VolumeCase(case_id, pre, post, mask, (1.0, 1.0, 1.0))


def _empty_case(shape=(32, 32, 32), case_id="empty", seed=0):
    rng = np.random.default_rng(seed)
    pre = rng.normal(size=shape).astype(np.float32)
    return VolumeCase(case_id, pre, pre + 0.5, np.zeros(shape, dtype=np.uint8), (1.0, 1.0, 1.0))


def test_centroid_patch_contains_whole_small_tumor():
    case = _cube_case(lo=14, hi=18)  # 4^3 cube fits in a 16x16x8 patch
    records = sample_patches(case, CFG, np.random.default_rng(1))
    assert records[0].kind == KIND_FULL
    assert records[0].label.sum() == case.tumor_mask.sum()


def test_partial_patches_contain_tumor():
    case = _cube_case()
    for seed in range(5):
        records = sample_patches(case, CFG, np.random.default_rng(seed))
        for rec in records[1:]:
            assert rec.kind == KIND_PARTIAL
            assert rec.label.sum() >= 1


def test_empty_mask_yields_three_fallback_patches():
    records = sample_patches(_empty_case(), CFG, np.random.default_rng(2))
    assert [r.kind for r in records] == [KIND_FALLBACK] * 3


def test_hundred_seeded_empty_cases_never_crash():
    for seed in range(100):
        case = _empty_case(case_id=f"e{seed}", seed=seed)
        records = sample_patches(case, CFG, np.random.default_rng(seed))
        assert len(records) == 3
        assert all(r.label.sum() == 0 for r in records)


def test_labels_match_recrop_oracle_bitwise():
    case = _cube_case()
    prepared = prepare_case(case, CFG.patch_dims)
    for rec in sample_patches(case, CFG, np.random.default_rng(3)):
        sl = tuple(slice(o, o + d) for o, d in zip(rec.origin, CFG.patch_dims))
        assert np.array_equal(rec.label, prepared.tumor_mask[sl])
        assert np.array_equal(rec.input[0], prepared.post_contrast[sl])


def test_small_volume_is_padded_to_patch_dims():
    case = _cube_case(shape=(12, 16, 6), lo=2, hi=5)
    records = sample_patches(case, CFG, np.random.default_rng(4))
    for rec in records:
        assert rec.input.shape == (2, *CFG.patch_dims)
        assert rec.label.shape == CFG.patch_dims


def test_oversized_tumor_still_samples():
    case = _cube_case(shape=(32, 32, 32), lo=2, hi=30)  # tumor larger than the patch
    records = sample_patches(case, CFG, np.random.default_rng(5))
    assert records[0].kind == KIND_FULL
    assert records[0].label.sum() > 0


def test_batch_size_and_determinism():
    cases = [_cube_case(case_id="a"), _cube_case(lo=8, hi=14, case_id="b")]
    batch1 = build_batch(cases, CFG, np.random.default_rng(6))
    batch2 = build_batch(cases, CFG, np.random.default_rng(6))
    assert len(batch1) == 6
    assert [r.origin for r in batch1] == [r.origin for r in batch2]
    assert [r.case_id for r in batch1] == ["a"] * 3 + ["b"] * 3


def test_balanced_sampling_beats_uniform_on_foreground_fraction():
    # ~0.13% foreground: uniform crops mostly miss, the balanced sampler never does
    spec = SyntheticSpec(grid_size=(64, 64, 64), tumor_radius_range_mm=(4.0, 5.0), seed=11)
    case = generate_synthetic_case(spec)
    cfg = dataclasses.replace(CFG, patch_dims=(16, 16, 16), stride=(8, 8, 8))
    rng = np.random.default_rng(12)
    sampled = []
    for _ in range(0, 1000, 3):
        sampled.extend(r.label.mean() for r in sample_patches(case, cfg, rng))
    uniform = []
    for _ in range(1000):
        origin = [rng.integers(0, 64 - 16 + 1) for _ in range(3)]
        sl = tuple(slice(o, o + 16) for o in origin)
        uniform.append(case.tumor_mask[sl].mean())
    assert np.mean(sampled) >= 10 * np.mean(uniform)
