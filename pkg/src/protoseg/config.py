"""Network/training configuration and its validation.

The config is a plain frozen dataclass serialized to/from JSON. Validation
never raises: it returns the list of violations so callers can report all
problems at once (`require_valid` wraps that into an exception for pipeline
entry points).
"""

from __future__ import annotations

import dataclasses
import hashlib
import json
from dataclasses import dataclass, field
from typing import Tuple

from .errors import ConfigError

Triple = Tuple[int, int, int]


@dataclass(frozen=True)
class AblationFlags:
    """Module switches for the ablation rows (all on = full model)."""

    use_transformer: bool = True
    use_encoder2: bool = True
    use_prototypes: bool = True
    use_fusion: bool = True
    two_stage: bool = True


@dataclass(frozen=True)
class NetworkConfig:
    """All architectural and optimization hyperparameters.

    Defaults reproduce the reference setting: channel base 32, hidden size 256,
    8 transformer layers, 2 classes x 5 prototypes, loss weights 0.2/0.05,
    128x128x48 patches with 64x64x8 sliding-window stride, 300+200 epochs at
    initial learning rates 0.01/0.001, weight decay 1e-4.
    """

    channel_base: int = 32          # width of the first encoder stage (M)
    hidden_size: int = 256          # transformer token width
    num_transformer_layers: int = 8
    window_size: int = 2            # cubic attention window edge, in tokens
    num_classes: int = 2
    prototypes_per_class: int = 5
    temperature: float = 0.1        # contrastive softmax temperature
    prototype_momentum: float = 0.999
    fused_loss_weight: float = 0.2      # weight on the fused-head loss term
    contrast_loss_weight: float = 0.05  # weight on the voxel-prototype term
    patch_dims: Triple = (128, 128, 48)
    stride: Triple = (64, 64, 8)
    stage1_epochs: int = 300
    stage2_epochs: int = 200
    stage1_lr: float = 0.01
    stage2_lr: float = 0.001
    weight_decay: float = 1e-4
    batch_cases: int = 2
    seed: int = 0
    assign_across_classes: bool = False  # ablation: prototype argmax over all classes
    flags: AblationFlags = field(default_factory=AblationFlags)

    @property
    def num_prototype_slots(self) -> int:
        return self.num_classes * self.prototypes_per_class

    @property
    def bottleneck_channels(self) -> int:
        """Channel width of the second encoder's output (4x the base)."""
        return 4 * self.channel_base

    @property
    def num_attention_heads(self) -> int:
        # one head per 32 channels, at least one
        return max(1, self.hidden_size // 32)

    def token_grid(self, patch_dims: Triple | None = None) -> Triple:
        """Spatial grid of the stride-8 bottleneck for the given patch size."""
        dims = patch_dims if patch_dims is not None else self.patch_dims
        return (dims[0] // 8, dims[1] // 8, dims[2] // 8)

    def to_json_dict(self) -> dict:
        d = dataclasses.asdict(self)
        d["flags"] = dataclasses.asdict(self.flags)
        return d

    def to_json(self, indent: int | None = 2) -> str:
        return json.dumps(self.to_json_dict(), indent=indent, sort_keys=True)

    @classmethod
    def from_json_dict(cls, data: dict) -> "NetworkConfig":
        known = {f.name for f in dataclasses.fields(cls)}
        unknown = set(data) - known
        if unknown:
            raise ConfigError(f"unknown config keys: {sorted(unknown)}")
        data = dict(data)
        if "flags" in data:
            flag_fields = {f.name for f in dataclasses.fields(AblationFlags)}
            bad = set(data["flags"]) - flag_fields
            if bad:
                raise ConfigError(f"unknown flag keys: {sorted(bad)}")
            data["flags"] = AblationFlags(**data["flags"])
        for key in ("patch_dims", "stride"):
            if key in data:
                data[key] = tuple(data[key])
        return cls(**data)

    @classmethod
    def from_json(cls, text: str) -> "NetworkConfig":
        return cls.from_json_dict(json.loads(text))

    def config_hash(self) -> str:
        return hashlib.sha256(self.to_json(indent=None).encode()).hexdigest()[:16]


def patch_dim_violations(dims: Triple, window_size: int, what: str = "patch") -> list:
    """Divisibility checks shared by config validation and input construction."""
    violations = []
    for axis, name in zip(range(3), "HWZ"):
        size = dims[axis]
        if size <= 0:
            violations.append(f"{what} {name}={size} must be positive")
        elif size % 8 != 0:
            violations.append(f"{what} {name}={size} not divisible by 8")
        elif window_size > 0 and (size // 8) % window_size != 0:
            violations.append(
                f"{what} {name}={size}: token grid {size // 8} not divisible by window size {window_size}"
            )
    return violations


def validate_config(cfg: NetworkConfig) -> list:
    """Return all invariant violations (empty list means the config is valid)."""
    v = []
    for name in ("channel_base", "hidden_size", "num_transformer_layers", "window_size",
                 "num_classes", "prototypes_per_class", "stage1_epochs", "stage2_epochs",
                 "batch_cases"):
        if getattr(cfg, name) < 1:
            v.append(f"{name} must be a positive integer")
    if cfg.temperature <= 0:
        v.append("temperature must be > 0")
    if not (0.0 <= cfg.prototype_momentum <= 1.0):
        v.append("prototype_momentum outside [0,1]")
    for name in ("fused_loss_weight", "contrast_loss_weight", "weight_decay"):
        if getattr(cfg, name) < 0:
            v.append(f"{name} must be >= 0")
    for name in ("stage1_lr", "stage2_lr"):
        if getattr(cfg, name) <= 0:
            v.append(f"{name} must be > 0")
    v.extend(patch_dim_violations(cfg.patch_dims, cfg.window_size))
    for axis, name in zip(range(3), "HWZ"):
        if cfg.stride[axis] < 1:
            v.append(f"stride {name}={cfg.stride[axis]} must be >= 1")
    if cfg.hidden_size >= 1 and cfg.hidden_size % cfg.num_attention_heads != 0:
        v.append(
            f"hidden_size {cfg.hidden_size} not divisible by {cfg.num_attention_heads} attention heads"
        )
    return v


def require_valid(cfg: NetworkConfig) -> NetworkConfig:
    violations = validate_config(cfg)
    if violations:
        raise ConfigError("; ".join(violations))
    return cfg
