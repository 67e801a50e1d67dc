import dataclasses

import numpy as np
import pytest
import torch

from protoseg.config import AblationFlags, NetworkConfig
from protoseg.synthetic import SyntheticSpec, generate_synthetic_case


@pytest.fixture(scope="session", autouse=True)
def _single_thread():
    # the determinism contract assumes single-threaded execution
    torch.set_num_threads(1)


@pytest.fixture(scope="session")
def tiny_cfg() -> NetworkConfig:
    return NetworkConfig(
        channel_base=8, hidden_size=64, num_transformer_layers=2, window_size=2,
        num_classes=2, prototypes_per_class=5,
        patch_dims=(64, 64, 32), stride=(32, 32, 16),
        stage1_epochs=20, stage2_epochs=20, batch_cases=2, seed=7,
    )


@pytest.fixture(scope="session")
def grad_cfg() -> NetworkConfig:
    # smallest config exercising every module; window size 1 is forced by the
    # 16x16x8 patch (token grid 2x2x1)
    return NetworkConfig(
        channel_base=4, hidden_size=16, num_transformer_layers=1, window_size=1,
        num_classes=2, prototypes_per_class=2,
        patch_dims=(16, 16, 8), stride=(8, 8, 8),
        stage1_epochs=1, stage2_epochs=1, batch_cases=1, seed=3,
    )


def make_cases(n: int, grid=(72, 72, 40), seed0: int = 100, **spec_kwargs):
    return [
        generate_synthetic_case(
            SyntheticSpec(grid_size=grid, seed=seed0 + i, **spec_kwargs), case_id=f"case{i:02d}"
        )
        for i in range(n)
    ]


@pytest.fixture(scope="session")
def small_cases():
    return make_cases(4)


def smoke_cfg(tiny_cfg, **overrides) -> NetworkConfig:
    """Tiny config shrunk for fast structural tests."""
    base = dict(stage1_epochs=2, stage2_epochs=2)
    base.update(overrides)
    return dataclasses.replace(tiny_cfg, **base)


def rel_err(a: float, b: float, floor: float = 1e-8) -> float:
    return abs(a - b) / max(abs(a), abs(b), floor)


def grad_close(analytic: float, numeric: float, rtol: float = 1e-4, atol: float = 1e-8) -> bool:
    """Relative agreement, with an absolute guard for the finite-difference
    noise floor (loss precision / step size)."""
    return abs(analytic - numeric) <= atol + rtol * max(abs(analytic), abs(numeric))


def central_difference(f, tensor: torch.Tensor, index, eps: float = 1e-5) -> float:
    """Two-sided finite difference of scalar-valued f at one tensor entry."""
    with torch.no_grad():
        orig = tensor[index].item()
        tensor[index] = orig + eps
        up = float(f())
        tensor[index] = orig - eps
        down = float(f())
        tensor[index] = orig
    return (up - down) / (2 * eps)


def sample_indices(shape, rng: np.random.Generator, count: int):
    total = int(np.prod(shape))
    picks = rng.choice(total, size=min(count, total), replace=False)
    return [np.unravel_index(int(p), shape) for p in picks]


def flags_off(**on) -> AblationFlags:
    base = dict(use_transformer=False, use_encoder2=False, use_prototypes=False,
                use_fusion=False, two_stage=False)
    base.update(on)
    return AblationFlags(**base)
