"""Command-line entry points: synth / train / infer / eval / inspect.

Exit codes: 0 ok, 2 usage or configuration problem, 3 I/O failure,
4 numeric failure (training divergence).
"""

from __future__ import annotations

import hashlib
import json
import os
import sys
import time
from pathlib import Path

import click
import numpy as np

from . import inference, metrics, training
from .config import NetworkConfig, validate_config
from .errors import ConfigError, DivergenceError, ProtosegError, VolumeIOError
from .network import build_model, count_parameters, estimate_flops
from .synthetic import SyntheticSpec, generate_synthetic_case
from .volumes import VolumeCase, load_case, load_volume, resample_case, save_case, save_volume

EXIT_CONFIG = 2
EXIT_IO = 3
EXIT_NUMERIC = 4


def _fail(code: int, message: str):
    click.echo(f"error: {message}", err=True)
    sys.exit(code)


def _guarded(fn):
    def wrapper(*args, **kwargs):
        try:
            return fn(*args, **kwargs)
        except ConfigError as exc:
            _fail(EXIT_CONFIG, str(exc))
        except (VolumeIOError, OSError) as exc:
            _fail(EXIT_IO, str(exc))
        except DivergenceError as exc:
            _fail(EXIT_NUMERIC, str(exc))
        except ProtosegError as exc:
            _fail(EXIT_CONFIG, str(exc))

    wrapper.__name__ = fn.__name__
    wrapper.__doc__ = fn.__doc__
    return wrapper


@click.group()
def main():
    """Prototype-guided hybrid segmentation toolkit.

    PROTOSEG_THREADS sets the default torch thread count for train/infer
    (overridden by --threads; --deterministic forces one thread).
    """


def _apply_threads(threads: int, deterministic: bool) -> None:
    import torch

    if deterministic:
        training.set_deterministic_mode(1)
        return
    if not threads:
        threads = int(os.environ.get("PROTOSEG_THREADS", "0") or 0)
    if threads:
        torch.set_num_threads(threads)


def _load_config(path: str | None) -> NetworkConfig:
    if path is None:
        cfg = NetworkConfig()
    else:
        try:
            cfg = NetworkConfig.from_json(Path(path).read_text())
        except (OSError, json.JSONDecodeError) as exc:
            raise VolumeIOError(f"{path}: cannot read config ({exc})") from exc
    violations = validate_config(cfg)
    if violations:
        raise ConfigError("invalid config: " + "; ".join(violations))
    return cfg


def _read_manifest(data_dir: Path) -> dict:
    manifest_path = Path(data_dir) / "manifest.json"
    if not manifest_path.exists():
        raise VolumeIOError(f"{manifest_path}: dataset manifest not found")
    try:
        return json.loads(manifest_path.read_text())
    except json.JSONDecodeError as exc:
        raise VolumeIOError(f"{manifest_path}: malformed manifest ({exc})") from exc


def _load_dataset(data_dir: Path) -> list:
    manifest = _read_manifest(data_dir)
    return [load_case(Path(data_dir) / entry["dir"], case_id=entry["id"])
            for entry in manifest["cases"]]


# ---------------------------------------------------------------------------
# synth
# ---------------------------------------------------------------------------

@main.command()
@click.option("--spec", "spec_path", type=click.Path(exists=True, dir_okay=False),
              help="Synthetic-spec JSON (defaults used when omitted).")
@click.option("--out", "out_dir", required=True, type=click.Path(file_okay=False))
@click.option("--count", default=8, show_default=True, help="Number of cases to generate.")
@click.option("--fmt", type=click.Choice(["raw", "nifti"]), default="raw", show_default=True)
@_guarded
def synth(spec_path, out_dir, count, fmt):
    """Generate a deterministic synthetic dataset with a manifest."""
    if count < 0:
        raise ConfigError("--count must be >= 0")
    if spec_path is None:
        spec = SyntheticSpec()
    else:
        spec = SyntheticSpec.from_json_dict(json.loads(Path(spec_path).read_text()))
    violations = spec.validate()
    if violations:
        raise ConfigError("invalid synthetic spec: " + "; ".join(violations))
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    spec_dict = spec.to_json_dict()
    spec_hash = hashlib.sha256(json.dumps(spec_dict, sort_keys=True).encode()).hexdigest()[:16]
    entries = []
    for i in range(count):
        case_spec = SyntheticSpec.from_json_dict({**spec_dict, "seed": spec.seed + i})
        case = generate_synthetic_case(case_spec, case_id=f"case{i:04d}")
        save_case(case, out / case.case_id, fmt=fmt)
        entries.append({"id": case.case_id, "seed": case_spec.seed, "dir": case.case_id})
    manifest = {"spec": spec_dict, "spec_hash": spec_hash, "format": fmt, "cases": entries}
    (out / "manifest.json").write_text(json.dumps(manifest, indent=2, sort_keys=True))
    click.echo(f"wrote {count} case(s) to {out} (spec hash {spec_hash})")


# ---------------------------------------------------------------------------
# train
# ---------------------------------------------------------------------------

@main.command()
@click.option("--config", "config_path", type=click.Path(exists=True, dir_okay=False))
@click.option("--data", "data_dir", required=True, type=click.Path(exists=True, file_okay=False))
@click.option("--out", "out_dir", required=True, type=click.Path(file_okay=False))
@click.option("--resume", "resume_path", type=click.Path(exists=True, dir_okay=False))
@click.option("--stage", type=click.IntRange(1, 2), default=None,
              help="Run only this stage (stage 2 requires --resume).")
@click.option("--val-count", default=0, show_default=True,
              help="Hold out the last N cases for validation.")
@click.option("--val-every", default=5, show_default=True)
@click.option("--threads", default=0, help="Torch thread count (0 = library default).")
@click.option("--deterministic", is_flag=True, help="Force single-threaded execution.")
@_guarded
def train(config_path, data_dir, out_dir, resume_path, stage, val_count, val_every,
          threads, deterministic):
    """Run the two-stage schedule (or one requested stage) on a dataset."""
    _apply_threads(threads, deterministic)

    if resume_path:
        state = training.load_checkpoint(resume_path)
        cfg = state.cfg
        if config_path:
            requested = _load_config(config_path)
            if requested.config_hash() != cfg.config_hash():
                raise ConfigError("--config disagrees with the checkpoint's config; "
                                  "drop --config or resume a matching checkpoint")
    else:
        cfg = _load_config(config_path)
        if stage == 2:
            raise ConfigError("--stage 2 needs --resume with a stage-1 checkpoint")
        state = training.new_state(cfg, stage=1)

    cases = [resample_case(c, inference.TARGET_SPACING) for c in _load_dataset(Path(data_dir))]
    if val_count:
        if val_count >= len(cases):
            raise ConfigError(f"--val-count {val_count} leaves no training cases")
        cases, val_cases = cases[:-val_count], cases[-val_count:]
    else:
        val_cases = ()

    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    (out / "config.json").write_text(cfg.to_json())
    writer = training.TrainLogWriter(out / "training_log.csv", cfg)
    common = dict(writer=writer, val_cases=val_cases, val_every=val_every,
                  checkpoint_dir=out)
    try:
        if not cfg.flags.two_stage:
            state = training.train_single_stage(state, cases, cfg, **common)
        else:
            if stage != 2 and state.stage == 1:
                state = training.train_stage1(state, cases, cfg, **common)
            if stage != 1:
                state = training.train_stage2(state, cases, cfg, **common)
    finally:
        writer.close()
    training.save_checkpoint(out / "ckpt_last.pt", state)
    if not (out / "ckpt_best.pt").exists():
        training.save_checkpoint(out / "ckpt_best.pt", state)
    click.echo(f"finished stage {state.stage} at iteration {state.iteration}; "
               f"checkpoints in {out}")


# ---------------------------------------------------------------------------
# infer
# ---------------------------------------------------------------------------

def _iter_input_cases(in_path: Path):
    in_path = Path(in_path)
    if in_path.is_dir() and (in_path / "manifest.json").exists():
        manifest = _read_manifest(in_path)
        for entry in manifest["cases"]:
            yield load_case(in_path / entry["dir"], case_id=entry["id"])
    elif in_path.is_dir():
        yield load_case(in_path)
    else:
        raise VolumeIOError(f"{in_path}: expected a case directory or dataset directory")


@main.command()
@click.option("--ckpt", "ckpt_path", required=True, type=click.Path(exists=True, dir_okay=False))
@click.option("--in", "in_path", required=True, type=click.Path(exists=True))
@click.option("--out", "out_dir", required=True, type=click.Path(file_okay=False))
@click.option("--roi", "roi_path", type=click.Path(exists=True, dir_okay=False),
              help="Binary mask volume; probabilities outside are zeroed.")
@click.option("--fmt", type=click.Choice(["raw", "nifti"]), default="raw", show_default=True)
@click.option("--threads", default=0)
@click.option("--deterministic", is_flag=True)
@_guarded
def infer(ckpt_path, in_path, out_dir, roi_path, fmt, threads, deterministic):
    """Predict masks and probability volumes for one case or a dataset."""
    _apply_threads(threads, deterministic)
    state = training.load_checkpoint(ckpt_path)
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    (out / "config.json").write_text(state.cfg.to_json())
    roi = None
    if roi_path:
        roi, _ = load_volume(roi_path)
        roi = (roi > 0).astype(np.uint8)
    suffix = ".nii.gz" if fmt == "nifti" else ".json"
    for case in _iter_input_cases(Path(in_path)):
        start = time.monotonic()
        mask, prob, info = inference.predict_case(case, state.model, state.bank, state.cfg,
                                                  roi=roi)
        if roi is not None and not mask.any():
            click.echo(f"warning: {case.case_id}: empty mask after ROI restriction", err=True)
        info["runtime_s"] = round(time.monotonic() - start, 3)
        save_volume(prob, inference.TARGET_SPACING, out / f"{case.case_id}_prob{suffix}")
        save_volume(mask.astype(np.float32), case.spacing_mm, out / f"{case.case_id}_mask{suffix}")
        (out / f"{case.case_id}.json").write_text(json.dumps(info, indent=2, sort_keys=True))
        click.echo(f"{case.case_id}: {int(mask.sum())} foreground voxel(s), "
                   f"{info['num_windows']} window(s), {info['runtime_s']}s")


# ---------------------------------------------------------------------------
# eval
# ---------------------------------------------------------------------------

def _find_pred_mask(pred_dir: Path, case_id: str):
    for suffix in (".json", ".nii.gz", ".nii"):
        candidate = pred_dir / f"{case_id}_mask{suffix}"
        if candidate.exists():
            return candidate
    return None


@main.command(name="eval")
@click.option("--pred", "pred_dir", required=True, type=click.Path(exists=True, file_okay=False))
@click.option("--gt", "gt_dir", required=True, type=click.Path(exists=True, file_okay=False))
@click.option("--out", "out_prefix", required=True,
              help="Report prefix; writes <prefix>.csv and <prefix>.json.")
@click.option("--overlay", "overlay_dir", type=click.Path(file_okay=False),
              help="Write per-slice contour overlays (PNG) here.")
@_guarded
def eval_cmd(pred_dir, gt_dir, out_prefix, overlay_dir):
    """Score predicted masks against a dataset's ground truth."""
    pred_dir, gt_dir = Path(pred_dir), Path(gt_dir)
    manifest = _read_manifest(gt_dir)
    unmatched = [entry["id"] for entry in manifest["cases"]
                 if _find_pred_mask(pred_dir, entry["id"]) is None]
    if unmatched:
        raise ConfigError(f"no prediction found for case(s): {', '.join(unmatched)}")
    rows = []
    for entry in manifest["cases"]:
        case = load_case(gt_dir / entry["dir"], case_id=entry["id"])
        pred, _ = load_volume(_find_pred_mask(pred_dir, entry["id"]))
        pred = (pred > 0.5).astype(np.uint8)
        if pred.shape != case.shape:
            raise ConfigError(f"{entry['id']}: prediction shape {pred.shape} does not match "
                              f"ground truth {case.shape}")
        rows.append(metrics.evaluate_case(entry["id"], pred, case.tumor_mask.astype(np.uint8),
                                          case.spacing_mm))
        if overlay_dir:
            _write_overlays(Path(overlay_dir) / entry["id"], case, pred)
    report = metrics.aggregate_metrics(rows)
    out_prefix = Path(out_prefix)
    out_prefix.parent.mkdir(parents=True, exist_ok=True)
    metrics.write_report(report, out_prefix.with_suffix(".csv"), out_prefix.with_suffix(".json"))
    for name in metrics.METRIC_NAMES:
        agg = report.aggregates[name]
        click.echo(f"{name}: {agg['mean']:.4f} +- {agg['half_width_95']:.4f} "
                   f"(n={agg['n']}, missing={report.missing_counts[name]})")


def _write_overlays(out_dir: Path, case: VolumeCase, pred: np.ndarray) -> None:
    import matplotlib
    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    out_dir.mkdir(parents=True, exist_ok=True)
    gt = case.tumor_mask
    for z in range(case.shape[2]):
        if not (gt[:, :, z].any() or pred[:, :, z].any()):
            continue
        fig, ax = plt.subplots(figsize=(4, 4))
        ax.imshow(case.post_contrast[:, :, z].T, cmap="gray", origin="lower")
        if gt[:, :, z].any():
            ax.contour(gt[:, :, z].T, levels=[0.5], colors="red", linewidths=1.0)
        if pred[:, :, z].any():
            ax.contour(pred[:, :, z].T, levels=[0.5], colors="lime", linewidths=1.0)
        ax.set_axis_off()
        fig.savefig(out_dir / f"slice_{z:03d}.png", bbox_inches="tight", dpi=100)
        plt.close(fig)


# ---------------------------------------------------------------------------
# inspect
# ---------------------------------------------------------------------------

def _parse_dims(text: str):
    try:
        dims = tuple(int(p) for p in text.lower().split("x"))
    except ValueError as exc:
        raise ConfigError(f"--input-dims must look like 128x128x48, got '{text}'") from exc
    if len(dims) != 3:
        raise ConfigError(f"--input-dims must have three axes, got '{text}'")
    return dims


@main.command()
@click.option("--config", "config_path", type=click.Path(exists=True, dir_okay=False))
@click.option("--input-dims", "input_dims", default=None,
              help="HxWxZ for the FLOP estimate (defaults to the config patch size).")
@_guarded
def inspect(config_path, input_dims):
    """Report parameter counts per module and the forward FLOP estimate."""
    cfg = _load_config(config_path)
    dims = _parse_dims(input_dims) if input_dims else cfg.patch_dims
    model = build_model(cfg)
    total = 0
    click.echo(f"{'module':<14} {'parameters':>12}")
    for name in ("encoder1", "encoder2", "embedding", "transformer", "decoder",
                 "seg_head", "distance_net", "fused_head"):
        module = getattr(model, name)
        if module is None:
            continue
        n = sum(p.numel() for p in module.parameters())
        total += n
        click.echo(f"{name:<14} {n:>12,}")
    click.echo(f"{'total':<14} {total:>12,}")
    assert total == count_parameters(cfg)
    flops = estimate_flops(cfg, dims)
    click.echo(f"parameters: {total / 1e6:.2f} M")
    click.echo(f"flops @ {dims[0]}x{dims[1]}x{dims[2]}: {flops / 1e9:.1f} G (multiply-add = 2)")


if __name__ == "__main__":
    main()
