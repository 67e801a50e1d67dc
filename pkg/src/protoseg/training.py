"""Two-stage optimization: convolutional backbone first, then joint training
of the transformer and the prototype head at a lower learning rate.

Stage 1 optimizes both encoders, the token embedding, the decoder and the
intermediate head on the intermediate probability alone; transformer blocks
and the prototype head stay at their initial values (they are outside both
the forward path and the optimizer). Stage 2 reactivates everything, seeds
the prototype bank from the first batch, and interleaves one momentum update
of the bank after every gradient step.

Optimizer: SGD with momentum 0.9 and the configured weight decay; learning
rate follows a per-stage polynomial decay (power 0.9, floor 1e-6). Both
choices are recorded in the training-log header.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from pathlib import Path
from typing import IO, List, Optional, Sequence

import numpy as np
import torch
import torch.nn as nn

from .config import NetworkConfig, require_valid
from .errors import ConfigError, DivergenceError
from .losses import LossBreakdown, ppc_from_similarity, total_loss
from .network import HybridSegModel, build_model
from .prototypes import (PrototypeBank, assign_from_similarity, compute_cluster_means,
                         init_prototypes, momentum_update, refresh_dead_prototypes)
from .sampling import build_batch
from .volumes import VolumeCase

SGD_MOMENTUM = 0.9
LR_DECAY_POWER = 0.9
LR_FLOOR = 1e-6
CHECKPOINT_VERSION = 1

LOG_COLUMNS = ("stage", "epoch", "iteration", "lr", "dice_p1", "bce_p1", "dice_pf",
               "bce_pf", "ppc", "ppc_skipped", "total", "lambda1", "lambda2")


def set_deterministic_mode(threads: int = 1) -> None:
    """Single-threaded execution; the determinism contract assumes this."""
    torch.set_num_threads(threads)


def step_lr(iteration: int, total_iterations: int, lr0: float) -> float:
    """Polynomial decay lr0 * (1 - t/T)^0.9, floored at 1e-6."""
    if total_iterations <= 0:
        return max(lr0, LR_FLOOR)
    frac = min(max(iteration / total_iterations, 0.0), 1.0)
    return max(lr0 * (1.0 - frac) ** LR_DECAY_POWER, LR_FLOOR)


def _fan_in_out(module: nn.Module):
    w = module.weight
    if isinstance(module, nn.Linear):
        return w.shape[1], w.shape[0]
    receptive = int(np.prod(w.shape[2:]))
    if isinstance(module, nn.ConvTranspose3d):
        return w.shape[0] * receptive, w.shape[1] * receptive
    return w.shape[1] * receptive, w.shape[0] * receptive


def xavier_bound(fan_in: int, fan_out: int) -> float:
    return math.sqrt(6.0 / (fan_in + fan_out))


def init_parameters(cfg: NetworkConfig, seed: int) -> HybridSegModel:
    """Build the model and initialize it: Xavier-uniform weights, zero biases.

    Draws come from a dedicated generator in module-construction order, so a
    seed fully determines every parameter.
    """
    model = build_model(cfg)
    gen = torch.Generator().manual_seed(seed)
    with torch.no_grad():
        for module in model.modules():
            if isinstance(module, (nn.Conv3d, nn.ConvTranspose3d, nn.Linear)):
                bound = xavier_bound(*_fan_in_out(module))
                module.weight.uniform_(-bound, bound, generator=gen)
                if module.bias is not None:
                    module.bias.zero_()
            elif isinstance(module, (nn.BatchNorm3d, nn.LayerNorm)):
                module.weight.fill_(1.0)
                module.bias.zero_()
    return model


def _stage1_modules(model: HybridSegModel) -> List[nn.Module]:
    mods = [model.encoder1, model.decoder, model.seg_head]
    if model.encoder2 is not None:
        mods.append(model.encoder2)
    if model.embedding is not None:
        mods.append(model.embedding)
    return mods


def stage_parameters(model: HybridSegModel, stage: int):
    """Parameters trained in the given stage; stage 1 excludes the transformer
    blocks and the prototype head."""
    if stage == 2:
        return list(model.parameters())
    params = []
    for mod in _stage1_modules(model):
        params.extend(mod.parameters())
    return params


def _make_optimizer(params, lr: float, weight_decay: float) -> torch.optim.SGD:
    return torch.optim.SGD(params, lr=lr, momentum=SGD_MOMENTUM, weight_decay=weight_decay)


class TrainLogWriter:
    """CSV sink for per-iteration loss breakdowns."""

    def __init__(self, target: Path | IO, cfg: NetworkConfig):
        self._own = isinstance(target, (str, Path))
        self._fh = open(target, "w") if self._own else target
        self._fh.write(
            f"# optimizer=sgd momentum={SGD_MOMENTUM} weight_decay={cfg.weight_decay} "
            f"lr_schedule=poly{LR_DECAY_POWER} lr_floor={LR_FLOOR} seed={cfg.seed}\n"
        )
        self._fh.write(",".join(LOG_COLUMNS) + "\n")

    def log(self, stage: int, epoch: int, iteration: int, lr: float,
            breakdown: LossBreakdown, ppc_skipped: bool) -> None:
        values = breakdown.as_floats()
        row = [str(stage), str(epoch), str(iteration), repr(float(lr)),
               repr(values["dice_p1"]), repr(values["bce_p1"]), repr(values["dice_pf"]),
               repr(values["bce_pf"]), repr(values["ppc"]), str(int(ppc_skipped)),
               repr(values["total"]), repr(values["lambda1"]), repr(values["lambda2"])]
        self._fh.write(",".join(row) + "\n")

    def close(self) -> None:
        self._fh.flush()
        if self._own:
            self._fh.close()


@dataclass
class TrainState:
    """Everything needed to continue training exactly where it stopped."""

    cfg: NetworkConfig
    model: HybridSegModel
    stage: int
    iteration: int                 # completed iterations within the stage
    optimizer: torch.optim.SGD
    sampler_rng: np.random.Generator
    bank: Optional[PrototypeBank]
    best_dsc: float = float("-inf")


def records_to_tensors(batch) -> tuple:
    inputs = torch.from_numpy(np.stack([r.input for r in batch]))
    labels = torch.from_numpy(np.stack([r.label for r in batch])).long()
    return inputs, labels


def _iterations_per_epoch(n_cases: int, batch_cases: int) -> int:
    return max(1, math.ceil(n_cases / batch_cases))


def new_state(cfg: NetworkConfig, stage: int = 1) -> TrainState:
    require_valid(cfg)
    model = init_parameters(cfg, cfg.seed)
    rng = np.random.default_rng([cfg.seed, stage])
    opt = _make_optimizer(stage_parameters(model, stage),
                          cfg.stage1_lr if stage == 1 else cfg.stage2_lr,
                          cfg.weight_decay)
    return TrainState(cfg=cfg, model=model, stage=stage, iteration=0,
                      optimizer=opt, sampler_rng=rng, bank=None)


def _features_by_class(x_flat: torch.Tensor, labels_flat: torch.Tensor, num_classes: int):
    groups = []
    for c in range(num_classes):
        groups.append(x_flat[labels_flat == c])
    return groups


def _similarity_to_flat(similarity: torch.Tensor) -> torch.Tensor:
    # (B, S, H, W, Z) -> (V, S)
    s = similarity.shape[1]
    return similarity.permute(0, 2, 3, 4, 1).reshape(-1, s)


def run_stage(state: TrainState, cases: Sequence[VolumeCase], epochs: int, lr0: float, *,
              transformer_active: bool, prototypes_active: bool,
              writer: Optional[TrainLogWriter] = None,
              val_cases: Sequence[VolumeCase] = (), val_every: int = 0,
              checkpoint_dir: Optional[Path] = None,
              stop_after: Optional[int] = None) -> TrainState:
    """Drive one optimization stage from the state's current iteration.

    `stop_after` interrupts at that iteration count without touching the
    learning-rate schedule (for checkpoint-and-resume).
    """
    cfg = state.cfg
    if not cases:
        raise ConfigError("no training cases")
    model = state.model
    model.train()
    n = len(cases)
    per_epoch = _iterations_per_epoch(n, cfg.batch_cases)
    total_iters = epochs * per_epoch
    limit = total_iters if stop_after is None else min(total_iters, stop_after)
    c = cfg.num_classes
    use_prototypes = prototypes_active and cfg.flags.use_prototypes

    while state.iteration < limit:
        it = state.iteration
        epoch = it // per_epoch
        lr = step_lr(it, total_iters, lr0)
        for group in state.optimizer.param_groups:
            group["lr"] = lr
        picks = state.sampler_rng.choice(n, size=min(cfg.batch_cases, n), replace=False)
        batch = build_batch([cases[i] for i in picks], cfg, state.sampler_rng)
        inputs, labels = records_to_tensors(batch)

        if use_prototypes and state.bank is None:
            with torch.no_grad():
                warm = model(inputs, bank=None, activate_transformer=transformer_active)
                x_flat = warm.x.permute(0, 2, 3, 4, 1).reshape(-1, cfg.channel_base)
                state.bank = init_prototypes(
                    _features_by_class(x_flat, labels.reshape(-1), c), cfg,
                    np.random.default_rng([cfg.seed, 97]),
                )

        out = model(inputs, bank=state.bank if use_prototypes else None,
                    activate_transformer=transformer_active)
        labels_f = labels.to(out.p1.dtype)
        ppc_term = None
        ppc_skipped = False
        assignment = None
        sim_flat = None
        if use_prototypes:
            sim_flat = _similarity_to_flat(out.similarity)
            labels_flat = labels.reshape(-1)
            assignment = assign_from_similarity(sim_flat.detach(), labels_flat, c,
                                                cfg.prototypes_per_class,
                                                across_classes=cfg.assign_across_classes)
            present = torch.bincount(labels_flat, minlength=c) > 0
            if bool(present.all()):
                ppc_term = ppc_from_similarity(sim_flat, assignment.slot_index, cfg.temperature)
            else:
                ppc_skipped = True
        lam1 = cfg.fused_loss_weight if out.pf is not None else 0.0
        lam2 = cfg.contrast_loss_weight if ppc_term is not None else 0.0
        breakdown = total_loss(out.p1, out.pf, labels_f, ppc_term, lam1, lam2)
        if not torch.isfinite(breakdown.total):
            if writer:
                writer.close()
            raise DivergenceError(it, f"non-finite loss at stage {state.stage} iteration {it}")
        state.optimizer.zero_grad()
        breakdown.total.backward()
        state.optimizer.step()

        if use_prototypes:
            x_flat = out.x.detach().permute(0, 2, 3, 4, 1).reshape(-1, cfg.channel_base)
            means, empty = compute_cluster_means(x_flat, assignment)
            momentum_update(state.bank, means, empty)
            refresh_dead_prototypes(state.bank, x_flat, assignment, sim_flat.detach())

        if writer:
            writer.log(state.stage, epoch, it, lr, breakdown, ppc_skipped)
        state.iteration += 1

        end_of_epoch = state.iteration % per_epoch == 0
        if end_of_epoch and val_cases and val_every and ((epoch + 1) % val_every == 0):
            dsc = evaluate_dsc(model, state.bank, val_cases, cfg)
            if dsc > state.best_dsc:
                state.best_dsc = dsc
                if checkpoint_dir is not None:
                    save_checkpoint(Path(checkpoint_dir) / "ckpt_best.pt", state)
            model.train()
    return state


def evaluate_dsc(model: HybridSegModel, bank: Optional[PrototypeBank],
                 cases: Sequence[VolumeCase], cfg: NetworkConfig) -> float:
    """Mean sliding-window Dice over the given cases."""
    from .inference import predict_case
    from .metrics import overlap_metrics

    scores = []
    for case in cases:
        mask, _, _ = predict_case(case, model, bank, cfg)
        dsc, _, _ = overlap_metrics(mask, case.tumor_mask.astype(np.uint8))
        scores.append(0.0 if dsc is None else dsc)
    return float(np.mean(scores)) if scores else float("nan")


def train_stage1(model_or_state, cases: Sequence[VolumeCase], cfg: NetworkConfig,
                 **kwargs) -> TrainState:
    """Backbone warm-up on the intermediate probability only."""
    if isinstance(model_or_state, TrainState):
        state = model_or_state
    else:
        state = new_state(cfg, stage=1)
        state.model = model_or_state
        state.optimizer = _make_optimizer(stage_parameters(state.model, 1), cfg.stage1_lr,
                                          cfg.weight_decay)
    return run_stage(state, cases, cfg.stage1_epochs, cfg.stage1_lr,
                     transformer_active=False, prototypes_active=False, **kwargs)


def train_stage2(state: TrainState, cases: Sequence[VolumeCase], cfg: NetworkConfig,
                 **kwargs) -> TrainState:
    """Joint optimization with the transformer and prototype head active."""
    if state.stage != 2:
        state.stage = 2
        state.iteration = 0
        state.sampler_rng = np.random.default_rng([cfg.seed, 2])
        state.optimizer = _make_optimizer(stage_parameters(state.model, 2), cfg.stage2_lr,
                                          cfg.weight_decay)
    return run_stage(state, cases, cfg.stage2_epochs, cfg.stage2_lr,
                     transformer_active=True, prototypes_active=True, **kwargs)


def train_single_stage(state: TrainState, cases: Sequence[VolumeCase], cfg: NetworkConfig,
                       **kwargs) -> TrainState:
    """No warm-up: every enabled module trains from the first iteration."""
    state.stage = 2
    state.optimizer = _make_optimizer(stage_parameters(state.model, 2), cfg.stage1_lr,
                                      cfg.weight_decay)
    epochs = cfg.stage1_epochs + cfg.stage2_epochs
    return run_stage(state, cases, epochs, cfg.stage1_lr,
                     transformer_active=True, prototypes_active=True, **kwargs)


# ---------------------------------------------------------------------------
# checkpointing
# ---------------------------------------------------------------------------

def save_checkpoint(path, state: TrainState) -> None:
    payload = {
        "format_version": CHECKPOINT_VERSION,
        "config": state.cfg.to_json_dict(),
        "config_hash": state.cfg.config_hash(),
        "stage": state.stage,
        "iteration": state.iteration,
        "best_dsc": state.best_dsc,
        "model": state.model.state_dict(),
        "optimizer": state.optimizer.state_dict(),
        "sampler_rng": state.sampler_rng.bit_generator.state,
        "torch_rng": torch.get_rng_state(),
        "bank": state.bank.state_dict() if state.bank is not None else None,
    }
    torch.save(payload, path)


def load_checkpoint(path) -> TrainState:
    payload = torch.load(path, map_location="cpu", weights_only=False)
    if payload.get("format_version") != CHECKPOINT_VERSION:
        raise ConfigError(f"{path}: unsupported checkpoint version {payload.get('format_version')}")
    cfg = NetworkConfig.from_json_dict(payload["config"])
    model = build_model(cfg)
    model.load_state_dict(payload["model"])
    stage = payload["stage"]
    opt = _make_optimizer(stage_parameters(model, stage),
                          cfg.stage1_lr if stage == 1 else cfg.stage2_lr, cfg.weight_decay)
    opt.load_state_dict(payload["optimizer"])
    rng = np.random.default_rng()
    rng.bit_generator.state = payload["sampler_rng"]
    torch.set_rng_state(payload["torch_rng"])
    bank = PrototypeBank.from_state_dict(payload["bank"]) if payload["bank"] is not None else None
    return TrainState(cfg=cfg, model=model, stage=stage, iteration=payload["iteration"],
                      optimizer=opt, sampler_rng=rng, bank=bank,
                      best_dsc=payload["best_dsc"])
