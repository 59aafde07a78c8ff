"""``drhuman`` command line: synthetic data, the three training stages, rendering and metrics."""
from __future__ import annotations

import argparse
import json
import sys
import time
import warnings
from dataclasses import dataclass, fields
from pathlib import Path

import numpy as np
from threadpoolctl import threadpool_limits

from . import battery
from ._validation import InvariantError
from .autodiff import checkpoint
from .autodiff.checkpoint import CheckpointError
from .body import BodyModel, generate_template, load_model, save_model
from .mesh import MeshError, save_obj
from .metrics import iou, mse, ssim
from .refiner import vertex_bounds
from .render import Camera
from .trainer import (Avatar, Dataset, TrainConfig, TrainingError, TrainingLog, holdout_dataset,
                      load_dataset, make_synthetic_scene, save_dataset, save_png,
                      train_mesh_stage, train_texture_stages)

EXIT_OK, EXIT_CONFIG, EXIT_DATA, EXIT_INVARIANT = 0, 2, 3, 4
COMMANDS = ("synth", "fit-mesh", "fit-texture", "render", "reenact", "gradcheck", "eval")
LPIPS_NOTICE = ("note: LPIPS and FVD need pretrained perceptual networks and are not computed; "
                "metrics.json holds SSIM, MSE (0-255 scale) and IoU only")


class ConfigError(ValueError):
    pass


class DataError(ValueError):
    pass


@dataclass
class RunConfig:
    """Paths and sizes used by the commands; training keys live in :class:`TrainConfig`."""

    out_dir: str = "out"
    data_dir: str | None = None
    holdout_dir: str | None = None
    pred_dir: str | None = None
    model_path: str | None = None
    refiner_path: str | None = None
    avatar_path: str | None = None
    poses_path: str | None = None
    cameras_path: str | None = None
    image_size: int = 128
    n_views: int = 16
    holdout_views: int = 4
    gradcheck_seeds: int = 20


PATH_KEYS = ("out_dir", "data_dir", "holdout_dir", "pred_dir", "model_path", "refiner_path",
             "avatar_path", "poses_path", "cameras_path")


def load_config(path, overrides: dict | None = None) -> tuple[RunConfig, TrainConfig]:
    """Split a flat JSON config into run and training settings; unknown keys are errors.

    Relative paths are resolved against the config file's directory.
    """
    raw: dict = {}
    base = Path.cwd()
    if path is not None:
        path = Path(path)
        try:
            raw = json.loads(path.read_text())
        except FileNotFoundError:
            raise ConfigError(f"config file {path} does not exist") from None
        except json.JSONDecodeError as exc:
            raise ConfigError(f"config file {path} is not valid JSON: {exc}") from None
        if not isinstance(raw, dict):
            raise ConfigError(f"config file {path} must hold a JSON object")
        base = path.resolve().parent
    raw.update(overrides or {})
    run_keys = {f.name for f in fields(RunConfig)}
    train_keys = {f.name for f in fields(TrainConfig)}
    unknown = sorted(set(raw) - run_keys - train_keys)
    if unknown:
        raise ConfigError(f"unknown config keys: {unknown}")
    run = RunConfig(**{k: v for k, v in raw.items() if k in run_keys})
    for key in PATH_KEYS:
        value = getattr(run, key)
        if value is not None and not Path(value).is_absolute():
            setattr(run, key, str(base / value))
    for key in ("image_size", "n_views", "holdout_views", "gradcheck_seeds"):
        if int(getattr(run, key)) < 1:
            raise ConfigError(f"{key} must be positive")
    try:
        train = TrainConfig.from_dict({k: v for k, v in raw.items() if k in train_keys})
    except (InvariantError, TypeError) as exc:
        raise ConfigError(str(exc)) from None
    return run, train


def _need(run: RunConfig, key: str) -> Path:
    value = getattr(run, key)
    if value is None:
        raise ConfigError(f"this command needs '{key}' in the config")
    p = Path(value)
    if not p.exists():
        raise DataError(f"{key} {p} does not exist")
    return p


def _data(run: RunConfig, key: str = "data_dir") -> Dataset:
    try:
        return load_dataset(_need(run, key))
    except InvariantError as exc:
        raise DataError(str(exc)) from None


def _model(run: RunConfig, near: Path | None = None) -> BodyModel:
    if run.model_path is not None:
        return load_model(_need(run, "model_path"))
    if near is not None and (near.parent / "model.json").exists():
        return load_model(near.parent / "model.json")
    return generate_template()


def _write_json(path: Path, obj) -> None:
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(json.dumps(obj, indent=1, sort_keys=True))


# -- commands ------------------------------------------------------------------------------

def cmd_synth(run: RunConfig, train: TrainConfig) -> int:
    out = Path(run.out_dir)
    truth, data = make_synthetic_scene(train.seed, run.n_views, run.image_size, train.atlas_size)
    save_dataset(data, out / "data")
    save_dataset(holdout_dataset(truth, run.holdout_views), out / "holdout")
    save_model(truth.model, out / "model.json")
    save_obj(truth.mesh, out / "truth.obj")
    save_png(out / "truth_texture.png", truth.texture)
    _write_json(out / "scene.json", {"seed": train.seed, "beta": truth.beta.tolist(),
                                     "theta": truth.theta.tolist(), "n_views": run.n_views})
    print(f"wrote {len(data)} training and {run.holdout_views} held-out views to {out}")
    return EXIT_OK


def cmd_fit_mesh(run: RunConfig, train: TrainConfig) -> int:
    data = _data(run)
    model = _model(run, Path(run.data_dir))
    out = Path(run.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    log = TrainingLog(out / "mesh_log.jsonl")
    res = train_mesh_stage(model, data, train, log, out / "checkpoints")
    checkpoint.save(out / "refiner.drh", {k: t.data for k, t in res.weights.items()})
    save_model(model, out / "model.json")
    print(f"mesh stage: IoU {res.initial_iou:.4f} -> {res.final_iou:.4f} "
          f"(unrefined {res.unrefined_iou:.4f}); refiner saved to {out / 'refiner.drh'}")
    return EXIT_OK


def cmd_fit_texture(run: RunConfig, train: TrainConfig) -> int:
    from .autodiff import Tensor

    data = _data(run)
    ref_path = _need(run, "refiner_path")
    model = _model(run, ref_path)
    refiner = {k: Tensor(v) for k, v in checkpoint.load(ref_path).items() if k.startswith("gm.")}
    out = Path(run.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    log = TrainingLog(out / "texture_log.jsonl")
    res = train_texture_stages(model, refiner, data, train, log, out / "checkpoints")
    avatar = Avatar(model, data[0].beta.copy(), refiner, res.gtn, res.grn,
                    clamp=not train.no_clamp, clamp_table=dict(train.clamp_table))
    avatar.save(out / "avatar.drh")
    save_model(model, out / "model.json")
    print(f"texture stages done ({'coarse only' if res.grn is None else 'with refinement'}); "
          f"avatar saved to {out / 'avatar.drh'}")
    return EXIT_OK


def _avatar(run: RunConfig, train: TrainConfig) -> Avatar:
    path = _need(run, "avatar_path")
    try:
        avatar = Avatar.load(path, _model(run, path))
    except InvariantError as exc:
        raise DataError(str(exc)) from None
    if train.no_clamp:
        avatar.clamp = False
    if train.no_refinement:
        avatar.grn = None
    return avatar


def cmd_render(run: RunConfig, train: TrainConfig) -> int:
    avatar = _avatar(run, train)
    data = _data(run)
    from .trainer import Sample

    frames = []
    for s in data:
        f = avatar.render(s.theta, s.camera)
        frames.append(Sample(s.frame_id, np.clip(f.image, 0.0, 1.0), f.mask, s.theta, s.beta,
                             s.camera))
    save_dataset(Dataset(frames), Path(run.out_dir) / "render")
    print(f"rendered {len(frames)} frames to {Path(run.out_dir) / 'render'}")
    return EXIT_OK


def load_poses(path) -> list[np.ndarray]:
    try:
        raw = json.loads(Path(path).read_text())
        poses = raw["poses"] if isinstance(raw, dict) else raw
        arr = [np.asarray(p, dtype=np.float64).reshape(-1) for p in poses]
    except (KeyError, TypeError, ValueError) as exc:
        raise DataError(f"malformed pose file {path}: {exc}") from None
    bad = [i for i, p in enumerate(arr) if p.size != 72]
    if not arr or bad:
        raise DataError(f"pose file {path} needs a non-empty list of 72-vectors (bad: {bad[:5]})")
    return arr


def load_cameras(path) -> list[Camera]:
    try:
        raw = json.loads(Path(path).read_text())
        items = raw["cameras"] if isinstance(raw, dict) and "cameras" in raw else raw
        items = items if isinstance(items, list) else [items]
        return [Camera.from_dict(c) for c in items]
    except (KeyError, TypeError, ValueError) as exc:
        raise DataError(f"malformed camera file {path}: {exc}") from None


def check_frame(avatar: Avatar, frame) -> list[str]:
    """Invariant violations of one reenacted frame (empty when all hold)."""
    problems = []
    if avatar.clamp:
        k = vertex_bounds(frame.skinned.part_labels, avatar.clamp_table)
        off = np.abs(frame.refined.positions() - frame.skinned.positions())
        if np.any(off > k):
            problems.append("refined mesh leaves the clamp bounds")
    if not np.all(np.isfinite(frame.image)) or frame.image.min() < 0.0 or frame.image.max() > 1.0:
        problems.append("image values outside [0, 1]")
    if not np.all((frame.visibility == 0.0) | (frame.visibility == 1.0)):
        problems.append("visibility map is not binary")
    return problems


def cmd_reenact(run: RunConfig, train: TrainConfig) -> int:
    avatar = _avatar(run, train)
    poses = load_poses(_need(run, "poses_path"))
    cams = load_cameras(_need(run, "cameras_path"))
    out = Path(run.out_dir) / "reenact"
    out.mkdir(parents=True, exist_ok=True)
    rows, failures = [], []
    for ci, cam in enumerate(cams):
        for fi, theta in enumerate(poses):
            t0 = time.perf_counter()
            frame = avatar.render(theta, cam)
            elapsed = time.perf_counter() - t0
            problems = check_frame(avatar, frame)
            name = f"c{ci:02d}_f{fi:04d}.png"
            save_png(out / name, frame.image)
            rows.append({"camera": ci, "pose": fi, "file": name, "seconds": elapsed,
                         "violations": problems})
            failures += [f"{name}: {p}" for p in problems]
    _write_json(Path(run.out_dir) / "reenact.json",
                {"frames": rows, "max_seconds": max(r["seconds"] for r in rows),
                 "mean_seconds": float(np.mean([r["seconds"] for r in rows]))})
    print(f"reenacted {len(poses)} poses x {len(cams)} cameras into {out}")
    if failures:
        for f in failures:
            print(f"invariant violated: {f}", file=sys.stderr)
        return EXIT_INVARIANT
    return EXIT_OK


def cmd_gradcheck(run: RunConfig, train: TrainConfig) -> int:
    t0 = time.perf_counter()
    results = battery.run_battery(range(train.seed, train.seed + run.gradcheck_seeds))
    worst: dict[str, float] = {}
    for r in results:
        group = r.name.split("/")[0]
        worst[group] = max(worst.get(group, 0.0), r.error / r.tol)
    for group, ratio in worst.items():
        print(f"{group:24s} worst error/tolerance {ratio:.3g} {'ok' if ratio < 1 else 'FAIL'}")
    failed = [r for r in results if not r.passed]
    _write_json(Path(run.out_dir) / "gradcheck.json",
                {"seconds": time.perf_counter() - t0, "passed": not failed,
                 "checks": [{"name": r.name, "seed": r.seed, "error": r.error, "tol": r.tol,
                             "passed": r.passed} for r in results]})
    if failed:
        for r in failed:
            print(f"gradcheck failed: {r.name} seed {r.seed} error {r.error:.3g} >= {r.tol}",
                  file=sys.stderr)
        return EXIT_INVARIANT
    print(f"all {len(results)} gradient checks passed")
    return EXIT_OK


def _frame_files(root: Path) -> dict[int, tuple[Path, Path | None]]:
    frames = root / "frames"
    if not frames.is_dir():
        raise DataError(f"{root} has no frames/ directory")
    out = {}
    for f in sorted(frames.glob("*.png")):
        try:
            fid = int(f.stem)
        except ValueError:
            continue
        m = root / "masks" / f.name
        out[fid] = (f, m if m.exists() else None)
    return out


def evaluate_dirs(pred_dir, ref_dir) -> dict:
    """Per-frame SSIM, MSE and IoU for frames present in both directories, plus means."""
    from .trainer import load_png

    pred, ref = _frame_files(Path(pred_dir)), _frame_files(Path(ref_dir))
    common = sorted(set(pred) & set(ref))
    if not common:
        raise DataError(f"no frame ids shared by {pred_dir} and {ref_dir}")
    rows = []
    for fid in common:
        a, b = load_png(pred[fid][0]), load_png(ref[fid][0])
        if a.shape != b.shape:
            raise DataError(f"frame {fid}: image sizes differ {a.shape} vs {b.shape}")
        row = {"frame": fid, "ssim": ssim(a, b), "mse": mse(a, b)}
        if pred[fid][1] is not None and ref[fid][1] is not None:
            ma = (load_png(pred[fid][1], 1) >= 0.5).astype(float)
            mb = (load_png(ref[fid][1], 1) >= 0.5).astype(float)
            row["iou"] = iou(ma, mb)
        rows.append(row)
    means = {}
    for key in ("ssim", "mse", "iou"):
        vals = [r[key] for r in rows if key in r]
        if vals:
            means[key] = float(np.sum(vals) / len(vals))
    return {"frames": rows, "mean": means, "n_frames": len(rows)}


def cmd_eval(run: RunConfig, train: TrainConfig) -> int:
    result = evaluate_dirs(_need(run, "pred_dir"), _need(run, "data_dir"))
    _write_json(Path(run.out_dir) / "metrics.json", result)
    print(LPIPS_NOTICE)
    print(" ".join(f"{k}={v:.6g}" for k, v in result["mean"].items()))
    return EXIT_OK


HANDLERS = {"synth": cmd_synth, "fit-mesh": cmd_fit_mesh, "fit-texture": cmd_fit_texture,
            "render": cmd_render, "reenact": cmd_reenact, "gradcheck": cmd_gradcheck,
            "eval": cmd_eval}


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="drhuman", description=__doc__)
    p.add_argument("command", choices=COMMANDS)
    p.add_argument("--config", help="JSON config (flat keys, see README)")
    p.add_argument("--seed", type=int)
    p.add_argument("--no-refinement", action="store_true", help="skip the adversarial stage")
    p.add_argument("--no-clamp", action="store_true", help="leave refiner offsets unbounded")
    p.add_argument("--saturating", action="store_true", help="use the saturating generator loss")
    p.add_argument("--out", help="output directory")
    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    overrides: dict = {}
    if args.seed is not None:
        overrides["seed"] = args.seed
    if args.no_refinement:
        overrides["no_refinement"] = True
    if args.no_clamp:
        overrides["no_clamp"] = True
    if args.saturating:
        overrides["saturating_gan"] = True
    try:
        run, train = load_config(args.config, overrides)
        if args.out is not None:
            run.out_dir = str(Path(args.out).resolve())
        with threadpool_limits(limits=1), warnings.catch_warnings():
            warnings.simplefilter("ignore", RuntimeWarning)
            return HANDLERS[args.command](run, train)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except (DataError, CheckpointError, MeshError, FileNotFoundError) as exc:
        print(f"data error: {exc}", file=sys.stderr)
        return EXIT_DATA
    except (TrainingError, InvariantError, FloatingPointError) as exc:
        print(f"invariant failure: {exc}", file=sys.stderr)
        return EXIT_INVARIANT


if __name__ == "__main__":
    sys.exit(main())
