"""Stage-wise training, the synthetic scene oracle, datasets and logs."""
from __future__ import annotations

import json
import math
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path
from typing import Iterable, Mapping, Sequence

import numpy as np
from PIL import Image
from threadpoolctl import threadpool_limits

from . import autodiff as ad
from ._validation import InvariantError, check_binary, check_image, check_pose, check_shape_params
from .autodiff import Tensor, checkpoint
from .body import BodyModel, generate_template, skin
from .mesh import PARTS, Adjacency, Mesh, build_adjacency, vertex_normals
from .metrics import iou, mse, ssim
from .refiner import (CLAMP_TABLE, LAMBDA_GL, LAMBDA_GN, RefinerConfig, init_weights,
                      mesh_loss, refine_mesh, vertex_bounds)
from .render import (Camera, rasterize, rasterize_uv, sample_texture, soft_silhouette,
                     texture_sampler, visibility_map)
from .texture import (ALPHA1, ALPHA2, FaceNotVisibleError, GeneratorSpec, RegionMasks,
                      coarse_texture, face_box, init_discriminator, init_generator,
                      discriminator_loss, generator_loss, refined_texture, region_masks,
                      regularization_loss, resample, texture_loss, warm_start_refiner,
                      CROP_SIZE)


class TrainingError(RuntimeError):
    """Training hit a non-finite value; ``diagnostics`` describes where."""

    def __init__(self, message: str, diagnostics: dict):
        super().__init__(message)
        self.diagnostics = diagnostics


# -- configuration ---------------------------------------------------------------------------

@dataclass
class TrainConfig:
    mesh_epochs: int = 20
    mesh_batch: int = 4
    mesh_lr: float = 1e-4
    texture_epochs: int = 40
    texture_batch: int = 8
    pretrain_steps: int = 2000
    lr_gtn: float = 2e-3
    lr_grn: float = 2e-4
    lr_disc: float = 2e-5
    beta1: float = 0.5
    beta2: float = 0.999
    eps: float = 1e-8
    weight_decay: float = 1e-2
    clip_norm: float = 10.0
    lambda_gl: float = LAMBDA_GL
    lambda_gn: float = LAMBDA_GN
    alpha1: float = ALPHA1
    alpha2: float = ALPHA2
    sigma: float = 2.5e-6
    blocks: int = 3
    layers: int = 6
    width: int = 128
    atlas_size: int = 128
    checkpoint_every: int = 5
    seed: int = 0
    no_clamp: bool = False
    no_refinement: bool = False
    saturating_gan: bool = False
    clamp_table: dict = field(default_factory=lambda: dict(CLAMP_TABLE))

    def __post_init__(self):
        positive = ("mesh_epochs", "mesh_batch", "mesh_lr", "texture_epochs", "texture_batch",
                    "lr_gtn", "lr_grn", "lr_disc", "eps", "clip_norm", "sigma", "blocks",
                    "layers", "width", "atlas_size", "checkpoint_every")
        for name in positive:
            if not getattr(self, name) > 0:
                raise InvariantError(f"config value {name} must be positive")
        for name in ("pretrain_steps", "weight_decay", "lambda_gl", "lambda_gn", "alpha1",
                     "alpha2"):
            if getattr(self, name) < 0:
                raise InvariantError(f"config value {name} must be >= 0")
        if not (0 <= self.beta1 < 1 and 0 <= self.beta2 < 1):
            raise InvariantError("Adam betas must lie in [0, 1)")
        if self.atlas_size % 8:
            raise InvariantError("atlas_size must be divisible by 8")

    def refiner_config(self) -> RefinerConfig:
        return RefinerConfig(self.blocks, self.layers, self.width, self.seed)

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: Mapping) -> "TrainConfig":
        known = {f.name for f in fields(cls)}
        unknown = sorted(set(d) - known)
        if unknown:
            raise InvariantError(f"unknown training config keys: {unknown}")
        return cls(**dict(d))


# -- optimizer ------------------------------------------------------------------------------

@dataclass
class OptimizerState:
    m: dict = field(default_factory=dict)
    v: dict = field(default_factory=dict)
    step: int = 0
    beta1: float = 0.5
    beta2: float = 0.999
    eps: float = 1e-8
    weight_decay: float = 1e-2

    @classmethod
    def from_config(cls, config: TrainConfig) -> "OptimizerState":
        return cls(beta1=config.beta1, beta2=config.beta2, eps=config.eps,
                   weight_decay=config.weight_decay)

    def tensors(self, prefix: str) -> dict[str, np.ndarray]:
        out = {f"{prefix}.step": np.array(float(self.step))}
        out.update({f"{prefix}.m.{k}": v for k, v in self.m.items()})
        out.update({f"{prefix}.v.{k}": v for k, v in self.v.items()})
        return out

    def load(self, blob: Mapping[str, np.ndarray], prefix: str) -> None:
        self.step = int(np.asarray(blob[f"{prefix}.step"]).item())
        self.m = {k[len(prefix) + 3:]: v.copy() for k, v in blob.items()
                  if k.startswith(f"{prefix}.m.")}
        self.v = {k[len(prefix) + 3:]: v.copy() for k, v in blob.items()
                  if k.startswith(f"{prefix}.v.")}


def adamw_step(params: Mapping[str, Tensor], grads: Mapping[str, np.ndarray] | None,
               state: OptimizerState, lr: float):
    """One decoupled-weight-decay Adam update, in place.

    ``w <- w - lr * (m_hat / (sqrt(v_hat) + eps) + weight_decay * w)``.
    ``grads`` defaults to each tensor's ``.grad``.
    """
    if grads is None:
        grads = {k: p.grad for k, p in params.items()}
    for name in params:
        g = grads.get(name)
        if g is None:
            raise InvariantError(f"no gradient for parameter {name!r}")
        if g.shape != params[name].shape:
            raise InvariantError(f"gradient for {name!r} has shape {g.shape}, "
                                 f"expected {params[name].shape}")
    state.step += 1
    t = state.step
    c1 = 1.0 - state.beta1 ** t
    c2 = 1.0 - state.beta2 ** t
    for name, p in params.items():
        g = grads[name]
        m = state.m.get(name)
        v = state.v.get(name)
        m = (1 - state.beta1) * g if m is None else state.beta1 * m + (1 - state.beta1) * g
        v = (1 - state.beta2) * g * g if v is None else state.beta2 * v + (1 - state.beta2) * g * g
        state.m[name], state.v[name] = m, v
        update = (m / c1) / (np.sqrt(v / c2) + state.eps) + state.weight_decay * p.data
        p.data = p.data - lr * update
    return params, state


def lr_schedule(base_lr: float, epoch: float, total_epochs: float) -> float:
    """Constant for the first half, then linear decay reaching 0 at ``total_epochs``."""
    if total_epochs <= 0 or not 0 <= epoch <= total_epochs:
        raise ValueError(f"epoch {epoch} outside [0, {total_epochs}]")
    half = total_epochs / 2.0
    if epoch < half:
        return base_lr
    return base_lr * (total_epochs - epoch) / half


def clip_grad_norm(params: Mapping[str, Tensor], max_norm: float) -> float:
    """Rescale ``.grad`` of ``params`` in place so the global norm is at most ``max_norm``."""
    total = math.sqrt(sum(float(np.sum(p.grad * p.grad)) for p in params.values()))
    if total > max_norm:
        scale = max_norm / total
        for p in params.values():
            p.grad = p.grad * scale
    return total


def _clear_grads(*groups: Mapping[str, Tensor]) -> None:
    for group in groups:
        for p in group.values():
            p.grad = None


# -- datasets -------------------------------------------------------------------------------

@dataclass(frozen=True)
class Sample:
    frame_id: int
    image: np.ndarray       # 3×H×W in [0, 1]
    silhouette: np.ndarray  # 1×H×W binary
    theta: np.ndarray
    beta: np.ndarray
    camera: Camera


class Dataset(Sequence):
    """Ordered frames with silhouettes, SMPL-style parameters and cameras."""

    def __init__(self, samples: Iterable[Sample]):
        self.samples = list(samples)
        if not self.samples:
            raise InvariantError("dataset is empty")
        shape = self.samples[0].image.shape
        for s in self.samples:
            check_image(s.image, 3, f"frame {s.frame_id}")
            check_binary(s.silhouette, f"mask {s.frame_id}")
            check_pose(s.theta, f"theta of frame {s.frame_id}")
            check_shape_params(s.beta, f"beta of frame {s.frame_id}")
            if s.image.shape != shape or s.silhouette.shape != (1,) + shape[1:]:
                raise InvariantError(f"frame {s.frame_id} size differs from frame "
                                     f"{self.samples[0].frame_id}")
            if (s.camera.height, s.camera.width) != shape[1:]:
                raise InvariantError(f"camera of frame {s.frame_id} does not match the image size")

    def __len__(self) -> int:
        return len(self.samples)

    def __getitem__(self, i):
        return self.samples[i]

    @property
    def image_size(self) -> tuple[int, int]:
        return self.samples[0].image.shape[1:]

    def subset(self, idx: Iterable[int]) -> "Dataset":
        return Dataset([self.samples[i] for i in idx])


def save_png(path, img: np.ndarray) -> None:
    arr = np.asarray(img, dtype=np.float64)
    if arr.ndim == 3 and arr.shape[0] == 1:
        arr = arr[0]
    if arr.ndim == 3:
        arr = arr.transpose(1, 2, 0)
    Image.fromarray(np.round(np.clip(arr, 0.0, 1.0) * 255.0).astype(np.uint8)).save(path)


def load_png(path, channels: int = 3) -> np.ndarray:
    try:
        img = Image.open(path)
        img = img.convert("RGB" if channels == 3 else "L")
    except (OSError, ValueError) as exc:
        raise InvariantError(f"cannot read image {path}: {exc}") from None
    arr = np.asarray(img, dtype=np.float64) / 255.0
    return arr.transpose(2, 0, 1) if channels == 3 else arr[None]


def save_dataset(dataset: Dataset, root) -> None:
    """``frames/NNNN.png``, ``masks/NNNN.png``, ``poses.json`` and ``cameras.json``."""
    root = Path(root)
    (root / "frames").mkdir(parents=True, exist_ok=True)
    (root / "masks").mkdir(parents=True, exist_ok=True)
    poses, cams = [], []
    for s in dataset:
        save_png(root / "frames" / f"{s.frame_id:04d}.png", s.image)
        save_png(root / "masks" / f"{s.frame_id:04d}.png", s.silhouette)
        poses.append({"frame": s.frame_id, "theta": s.theta.tolist(), "beta": s.beta.tolist()})
        cams.append({"frame": s.frame_id, **s.camera.to_dict()})
    (root / "poses.json").write_text(json.dumps({"frames": poses}, indent=1))
    (root / "cameras.json").write_text(json.dumps({"cameras": cams}, indent=1))


def load_dataset(root) -> Dataset:
    root = Path(root)
    for name in ("poses.json", "cameras.json", "frames", "masks"):
        if not (root / name).exists():
            raise InvariantError(f"dataset directory {root} lacks {name}")
    try:
        poses = json.loads((root / "poses.json").read_text())["frames"]
        cams = {c["frame"]: Camera.from_dict(c)
                for c in json.loads((root / "cameras.json").read_text())["cameras"]}
    except (KeyError, TypeError, json.JSONDecodeError) as exc:
        raise InvariantError(f"malformed dataset metadata in {root}: {exc}") from None
    samples = []
    for p in poses:
        fid = int(p["frame"])
        if fid not in cams:
            raise InvariantError(f"no camera for frame {fid}")
        img = load_png(root / "frames" / f"{fid:04d}.png", 3)
        mask = (load_png(root / "masks" / f"{fid:04d}.png", 1) >= 0.5).astype(np.float64)
        samples.append(Sample(fid, img, mask, np.asarray(p["theta"], dtype=np.float64),
                              np.asarray(p["beta"], dtype=np.float64), cams[fid]))
    return Dataset(samples)


# -- logging --------------------------------------------------------------------------------

class TrainingLog:
    """JSON-lines records kept in memory and optionally appended to a file."""

    def __init__(self, path=None):
        self.records: list[dict] = []
        self.path = Path(path) if path is not None else None
        if self.path is not None:
            self.path.parent.mkdir(parents=True, exist_ok=True)

    def write(self, record: dict) -> None:
        self.records.append(record)
        if self.path is not None:
            with self.path.open("a") as fh:
                fh.write(json.dumps(record, sort_keys=True) + "\n")


def _check_finite(value: float, diagnostics: dict, out_dir=None) -> None:
    if math.isfinite(value):
        return
    if out_dir is not None:
        Path(out_dir).mkdir(parents=True, exist_ok=True)
        (Path(out_dir) / "diagnostics.json").write_text(
            json.dumps({k: (v if not isinstance(v, float) or math.isfinite(v) else repr(v))
                        for k, v in diagnostics.items()}, indent=1, sort_keys=True))
    raise TrainingError(f"non-finite loss in stage {diagnostics.get('stage')} at step "
                        f"{diagnostics.get('step')}: {diagnostics}", diagnostics)


# -- synthetic scene ------------------------------------------------------------------------

SCENE_RADIUS = 3.2
SCENE_HEIGHT = 0.9
SCENE_TARGET = (0.0, 0.88, 0.0)
SCENE_FOV = 35.0


def scene_pose() -> np.ndarray:
    """Relaxed A-pose: both shoulders rotated so the arms hang beside the body."""
    theta = np.zeros(72)
    theta[16 * 3 + 2] = -1.2
    theta[17 * 3 + 2] = 1.2
    return theta


def ring_cameras(n: int, image_size: int = 128, offset: float = 0.0,
                 radius: float = SCENE_RADIUS, height: float = SCENE_HEIGHT,
                 fov_deg: float = SCENE_FOV) -> list[Camera]:
    """``n`` cameras evenly spaced on a horizontal ring, all looking at the body."""
    cams = []
    for i in range(n):
        a = offset + 2 * np.pi * i / n
        eye = (radius * np.sin(a), height, radius * np.cos(a))
        cams.append(Camera.look_at(eye, SCENE_TARGET, size=(image_size, image_size),
                                   fov_deg=fov_deg))
    return cams


def face_part_majority(mesh: Mesh) -> np.ndarray:
    lab = mesh.part_labels[mesh.faces]
    out = lab[:, 0].copy()
    agree = lab[:, 1] == lab[:, 2]
    out[agree] = lab[agree, 1]
    return out


def procedural_texture(mesh: Mesh, size: int, rng: np.random.Generator) -> np.ndarray:
    """Per-part base colors with horizontal stripes; uncovered texels are mid-gray."""
    base = rng.uniform(0.25, 0.85, (len(PARTS), 3))
    tex = np.full((3, size, size), 0.5)
    face_part = face_part_majority(mesh)
    rows = np.arange(size)
    stripes = np.where((rows // max(size // 16, 1)) % 2 == 0, 1.0, 0.7)[:, None]
    for p in range(len(PARTS)):
        sel = face_part == p
        if not sel.any():
            continue
        cover = rasterize_uv(mesh, sel, size).astype(bool)
        for c in range(3):
            tex[c][cover] = (base[p, c] * stripes * np.ones((1, size)))[cover]
    return tex


@dataclass
class SceneTruth:
    model: BodyModel
    theta: np.ndarray
    beta: np.ndarray
    offsets: np.ndarray
    texture: np.ndarray
    mesh: Mesh
    cameras: list
    seed: int


def render_truth(truth: SceneTruth, cameras: Sequence[Camera], first_id: int = 0) -> Dataset:
    samples = []
    tex = Tensor(truth.texture)
    for i, cam in enumerate(cameras):
        raster = rasterize(truth.mesh, cam)
        with ad.no_grad():
            img = sample_texture(tex, texture_sampler(raster, truth.texture.shape[1]),
                                 cam.height, cam.width).data
        samples.append(Sample(first_id + i, np.clip(img, 0.0, 1.0), raster.mask[None],
                              truth.theta.copy(), truth.beta.copy(), cam))
    return Dataset(samples)


def make_synthetic_scene(seed: int = 0, n_views: int = 16, image_size: int = 128,
                         atlas_size: int = 128, model: BodyModel | None = None,
                         offset_scale: float = 0.8) -> tuple[SceneTruth, Dataset]:
    """Ground-truth avatar plus hard renders from a ring of ``n_views`` cameras.

    The truth mesh is the skinned body displaced along its vertex normals by
    ``offset_scale * K(part)``, so every component stays within that bound.
    """
    if n_views < 4:
        raise InvariantError("the synthetic scene needs at least 4 views")
    rng = np.random.default_rng(seed)
    model = generate_template(seed) if model is None else model
    beta = rng.normal(0.0, 0.5, 10)
    theta = scene_pose()
    P = skin(model, theta, beta)
    with ad.no_grad():
        normals = vertex_normals(P).data
    k = vertex_bounds(P.part_labels)[:, 0]
    offsets = offset_scale * k[:, None] * normals
    mesh = P.with_vertices(Tensor(P.positions() + offsets))
    texture = procedural_texture(mesh, atlas_size, rng)
    cams = ring_cameras(n_views, image_size)
    truth = SceneTruth(model, theta, beta, offsets, texture, mesh, cams, seed)
    return truth, render_truth(truth, cams)


def holdout_dataset(truth: SceneTruth, n_views: int = 4, first_id: int = 1000) -> Dataset:
    """Novel ring cameras placed between the training views."""
    n_train = len(truth.cameras)
    cams = ring_cameras(n_views, truth.cameras[0].width, offset=np.pi / n_train)
    return render_truth(truth, cams, first_id)


# -- stage 1: mesh refiner ----------------------------------------------------------------

def _pose_key(s: Sample) -> bytes:
    return s.theta.tobytes() + s.beta.tobytes()


class PosedCache:
    """Skinned meshes and adjacency, shared by samples with identical parameters."""

    def __init__(self, model: BodyModel):
        self.model = model
        self._meshes: dict[bytes, Mesh] = {}
        self.adjacency: Adjacency = build_adjacency(model.template)

    def mesh(self, s: Sample) -> Mesh:
        key = _pose_key(s)
        if key not in self._meshes:
            with ad.no_grad():
                P = skin(self.model, s.theta, s.beta)
            self._meshes[key] = P.with_vertices(Tensor(P.positions()))
        return self._meshes[key]


def refined_meshes(weights, dataset: Dataset, cache: PosedCache, config: TrainConfig) -> list[Mesh]:
    out, seen = [], {}
    with ad.no_grad():
        for s in dataset:
            key = _pose_key(s)
            if key not in seen:
                M = refine_mesh(weights, cache.mesh(s), cache.adjacency, config.clamp_table,
                                clamp=not config.no_clamp)
                seen[key] = M.with_vertices(Tensor(M.positions()))
            out.append(seen[key])
    return out


def mean_iou(meshes: Sequence[Mesh], dataset: Dataset) -> float:
    vals = [iou(rasterize(M, s.camera).mask[None], s.silhouette) for M, s in zip(meshes, dataset)]
    return float(np.mean(vals))


def _batches(n: int, batch: int, rng_seed) -> list[np.ndarray]:
    order = np.random.default_rng(rng_seed).permutation(n)
    return [order[i:i + batch] for i in range(0, n, batch)]


def _save_checkpoint(path: Path, tensors: Mapping) -> None:
    path.parent.mkdir(parents=True, exist_ok=True)
    checkpoint.save(path, tensors)


@dataclass
class MeshStageResult:
    weights: dict
    initial_iou: float
    final_iou: float
    unrefined_iou: float
    epoch_losses: list


def train_mesh_stage(model: BodyModel, dataset: Dataset, config: TrainConfig,
                     log: TrainingLog | None = None, checkpoint_dir=None,
                     resume=None) -> MeshStageResult:
    """Fit the refiner weights to the silhouettes (mesh loss over batches of views)."""
    log = TrainingLog() if log is None else log
    cache = PosedCache(model)
    weights = init_weights(config.refiner_config())
    state = OptimizerState.from_config(config)
    start = 0
    if resume is not None:
        blob = checkpoint.load(resume)
        for k in weights:
            weights[k].data = blob[k].copy()
        state.load(blob, "opt.gm")
        start = int(np.asarray(blob["meta.epoch"]).item())
    posed = [cache.mesh(s) for s in dataset]
    unrefined = mean_iou(posed, dataset)
    initial = mean_iou(refined_meshes(weights, dataset, cache, config), dataset)
    log.write({"stage": "mesh", "epoch": start, "step": state.step, "iou": initial,
               "unrefined_iou": unrefined})
    epoch_losses = []
    n = len(dataset)
    for epoch in range(start, config.mesh_epochs):
        lr = lr_schedule(config.mesh_lr, epoch, config.mesh_epochs)
        losses = []
        for idx in _batches(n, config.mesh_batch, (config.seed, 1, epoch)):
            groups: dict[bytes, list[int]] = {}
            for i in idx:
                groups.setdefault(_pose_key(dataset[i]), []).append(int(i))
            parts_total = {"silhouette": 0.0, "laplacian": 0.0, "normal": 0.0}
            with ad.session():
                _clear_grads(weights)
                loss = None
                for members in groups.values():
                    P = cache.mesh(dataset[members[0]])
                    M = refine_mesh(weights, P, cache.adjacency, config.clamp_table,
                                    clamp=not config.no_clamp)
                    parts: dict = {}
                    term = mesh_loss(M, [dataset[i].silhouette for i in members],
                                     [dataset[i].camera for i in members], cache.adjacency,
                                     config.lambda_gl, config.lambda_gn, config.sigma, parts)
                    w = len(members) / len(idx)
                    for k in parts_total:
                        parts_total[k] += w * parts[k]
                    loss = term * w if loss is None else loss + term * w
                value = loss.item()
                _check_finite(value, {"stage": "mesh", "epoch": epoch, "step": state.step + 1,
                                      "loss": value, **parts_total}, checkpoint_dir)
                loss.backward()
            adamw_step(weights, None, state, lr)
            losses.append(value)
            log.write({"stage": "mesh", "epoch": epoch + 1, "step": state.step, "lr": lr,
                       "loss": value, **parts_total})
        meshes = refined_meshes(weights, dataset, cache, config)
        epoch_iou = mean_iou(meshes, dataset)
        epoch_losses.append(float(np.mean(losses)))
        log.write({"stage": "mesh", "epoch": epoch + 1, "step": state.step,
                   "loss": epoch_losses[-1], "iou": epoch_iou})
        if checkpoint_dir is not None and ((epoch + 1) % config.checkpoint_every == 0
                                           or epoch + 1 == config.mesh_epochs):
            blob = {k: v.data for k, v in weights.items()}
            blob.update(state.tensors("opt.gm"))
            blob["meta.epoch"] = np.array(float(epoch + 1))
            _save_checkpoint(Path(checkpoint_dir) / f"mesh_epoch{epoch + 1:03d}.drh", blob)
    final = mean_iou(refined_meshes(weights, dataset, cache, config), dataset)
    return MeshStageResult(weights, initial, final, unrefined, epoch_losses)


# -- stages 2 and 3: textures -------------------------------------------------------------

@dataclass
class ViewCache:
    sample: Sample
    mesh: Mesh
    sampler: object
    x_v: np.ndarray
    masks: RegionMasks
    real_masked: np.ndarray
    crop_box: tuple | None


def prepare_views(model: BodyModel, refiner_weights, dataset: Dataset,
                  config: TrainConfig) -> list[ViewCache]:
    """Everything about a view that stays fixed once the mesh is frozen."""
    cache = PosedCache(model)
    meshes = refined_meshes(refiner_weights, dataset, cache, config)
    views = []
    for s, M in zip(dataset, meshes):
        raster = rasterize(M, s.camera)
        with ad.no_grad():
            pred = soft_silhouette(M, s.camera, config.sigma).data
        masks = region_masks(pred, s.silhouette, M, s.camera)
        try:
            box = face_box(M, s.camera)
        except FaceNotVisibleError:
            box = None
        views.append(ViewCache(s, M, texture_sampler(raster, config.atlas_size),
                               visibility_map(M, s.camera, config.atlas_size), masks,
                               s.image * masks.B, box))
    return views


def _render(texture, view: ViewCache) -> Tensor:
    cam = view.sample.camera
    return sample_texture(texture, view.sampler, cam.height, cam.width)


def _stream(n: int, batch: int, seed) -> Iterable[np.ndarray]:
    """Endless batches; each pass over the data uses a fresh seeded permutation."""
    buf: list[int] = []
    epoch = 0
    while True:
        while len(buf) < batch:
            buf.extend(np.random.default_rng((*seed, epoch)).permutation(n).tolist())
            epoch += 1
        yield np.array(buf[:batch])
        buf = buf[batch:]


def train_coarse_stage(views: Sequence[ViewCache], config: TrainConfig,
                       log: TrainingLog | None = None, out_dir=None) -> dict[str, Tensor]:
    """Fit G_TN with the masked L1 texture loss for ``pretrain_steps`` steps."""
    log = TrainingLog() if log is None else log
    gtn = init_generator("gtn.", GeneratorSpec(1, config.atlas_size), config.seed)
    state = OptimizerState.from_config(config)
    stream = _stream(len(views), config.texture_batch, (config.seed, 2))
    steps = config.pretrain_steps
    for step in range(steps):
        idx = next(stream)
        lr = lr_schedule(config.lr_gtn, step, steps)
        with ad.session():
            _clear_grads(gtn)
            loss = None
            for i in idx:
                v = views[i]
                term = texture_loss(_render(coarse_texture(gtn, v.x_v), v), v.sample.image,
                                    v.masks.B)
                loss = term if loss is None else loss + term
            loss = loss / float(len(idx))
            value = loss.item()
            _check_finite(value, {"stage": "texture", "step": step + 1, "loss": value}, out_dir)
            loss.backward()
        adamw_step(gtn, None, state, lr)
        log.write({"stage": "texture", "epoch": (step * config.texture_batch) // len(views),
                   "step": step + 1, "lr": lr, "loss": value})
    return gtn


@dataclass
class RefineStageResult:
    grn: dict
    d1: dict
    d2: dict


def _coarse_cache(gtn, views: Sequence[ViewCache]) -> list[tuple[np.ndarray, np.ndarray]]:
    out = []
    with ad.no_grad():
        for v in views:
            x_p = coarse_texture(gtn, v.x_v).data
            out.append((x_p, _render(Tensor(x_p), v).data))
    return out


def train_refine_stage(views: Sequence[ViewCache], gtn, config: TrainConfig,
                       log: TrainingLog | None = None, checkpoint_dir=None) -> RefineStageResult:
    """Adversarial refinement: G_RN against the face (D1) and image (D2) discriminators."""
    log = TrainingLog() if log is None else log
    coarse = _coarse_cache(gtn, views)
    grn = warm_start_refiner(gtn)
    d1 = init_discriminator("d1.", seed=config.seed + 1)
    d2 = init_discriminator("d2.", seed=config.seed + 2)
    s_g, s_d1, s_d2 = (OptimizerState.from_config(config) for _ in range(3))
    n = len(views)
    step = 0
    for epoch in range(config.texture_epochs):
        lr_g = lr_schedule(config.lr_grn, epoch, config.texture_epochs)
        lr_d = lr_schedule(config.lr_disc, epoch, config.texture_epochs)
        for idx in _batches(n, config.texture_batch, (config.seed, 3, epoch)):
            step += 1
            fakes = {}
            with ad.session():
                _clear_grads(grn, d1, d2)
                total = None
                adv_sum, reg_sum = 0.0, 0.0
                for i in idx:
                    v = views[i]
                    x_p, i_tn = coarse[i]
                    fake = _render(refined_texture(grn, v.x_v, x_p), v)
                    fakes[int(i)] = fake.data
                    adv = generator_loss(d2, "d2.", fake, config.saturating_gan)
                    if v.crop_box is not None:
                        adv = adv + generator_loss(d1, "d1.", resample(fake, v.crop_box, CROP_SIZE),
                                                   config.saturating_gan)
                    reg = regularization_loss(v.sample.image, fake, i_tn, v.masks.B, v.masks.C,
                                              config.alpha1, config.alpha2)
                    adv_sum += adv.item()
                    reg_sum += reg.item()
                    term = adv + reg
                    total = term if total is None else total + term
                loss_g = total / float(len(idx))
                value_g = loss_g.item()
                _check_finite(value_g, {"stage": "refine", "epoch": epoch, "step": step,
                                        "loss_g": value_g}, checkpoint_dir)
                loss_g.backward()
            clip_grad_norm(grn, config.clip_norm)
            adamw_step(grn, None, s_g, lr_g)

            with ad.session():
                _clear_grads(d1, d2)
                total = None
                used_d1 = False
                for i in idx:
                    v = views[int(i)]
                    term = discriminator_loss(d2, "d2.", v.real_masked, fakes[int(i)])
                    if v.crop_box is not None:
                        term = term + discriminator_loss(
                            d1, "d1.", resample(v.real_masked, v.crop_box, CROP_SIZE).data,
                            resample(fakes[int(i)], v.crop_box, CROP_SIZE).data)
                        used_d1 = True
                    total = term if total is None else total + term
                loss_d = total / float(len(idx))
                value_d = loss_d.item()
                _check_finite(value_d, {"stage": "refine", "epoch": epoch, "step": step,
                                        "loss_d": value_d}, checkpoint_dir)
                loss_d.backward()
            clip_grad_norm(d2, config.clip_norm)
            adamw_step(d2, None, s_d2, lr_d)
            if used_d1:
                clip_grad_norm(d1, config.clip_norm)
                adamw_step(d1, None, s_d1, lr_d)
            log.write({"stage": "refine", "epoch": epoch + 1, "step": step, "lr_g": lr_g,
                       "lr_d": lr_d, "loss_g": value_g, "loss_d": value_d,
                       "adversarial": adv_sum / len(idx), "regularization": reg_sum / len(idx)})
        if checkpoint_dir is not None and ((epoch + 1) % config.checkpoint_every == 0
                                           or epoch + 1 == config.texture_epochs):
            blob = {k: t.data for g in (grn, d1, d2) for k, t in g.items()}
            for name, st in (("grn", s_g), ("d1", s_d1), ("d2", s_d2)):
                blob.update(st.tensors(f"opt.{name}"))
            blob["meta.epoch"] = np.array(float(epoch + 1))
            _save_checkpoint(Path(checkpoint_dir) / f"refine_epoch{epoch + 1:03d}.drh", blob)
    return RefineStageResult(grn, d1, d2)


def weights_checksum(*groups: Mapping[str, Tensor]) -> str:
    merged = {k: t.data for g in groups for k, t in g.items()}
    return checkpoint.checksum(merged)


@dataclass
class TextureStageResult:
    gtn: dict
    grn: dict | None
    d1: dict | None
    d2: dict | None


def train_texture_stages(model: BodyModel, refiner_weights, dataset: Dataset,
                         config: TrainConfig, log: TrainingLog | None = None,
                         checkpoint_dir=None) -> TextureStageResult:
    """Stage 2 (coarse texture) then, unless ``no_refinement``, stage 3 (adversarial).

    The refiner weights are frozen; their checksum is compared before and after.
    """
    log = TrainingLog() if log is None else log
    before = weights_checksum(refiner_weights)
    views = prepare_views(model, refiner_weights, dataset, config)
    gtn = train_coarse_stage(views, config, log, checkpoint_dir)
    if checkpoint_dir is not None:
        _save_checkpoint(Path(checkpoint_dir) / "texture_final.drh",
                         {k: t.data for k, t in gtn.items()})
    result = TextureStageResult(gtn, None, None, None)
    gtn_sum = weights_checksum(gtn)
    if not config.no_refinement:
        r = train_refine_stage(views, gtn, config, log, checkpoint_dir)
        result = TextureStageResult(gtn, r.grn, r.d1, r.d2)
    after = weights_checksum(refiner_weights)
    gtn_after = weights_checksum(gtn)
    log.write({"stage": "freeze", "refiner_checksum_before": before,
               "refiner_checksum_after": after, "gtn_checksum_before": gtn_sum,
               "gtn_checksum_after": gtn_after})
    if before != after or gtn_sum != gtn_after:
        raise TrainingError("frozen weights changed during texture training",
                            {"stage": "freeze", "refiner": [before, after],
                             "gtn": [gtn_sum, gtn_after]})
    return result


# -- avatars ---------------------------------------------------------------------------------

@dataclass
class Avatar:
    """Everything needed to render the fitted person under new poses and cameras."""

    model: BodyModel
    beta: np.ndarray
    refiner: dict
    gtn: dict
    grn: dict | None = None
    clamp: bool = True
    clamp_table: dict = field(default_factory=lambda: dict(CLAMP_TABLE))
    _adjacency: Adjacency | None = field(default=None, repr=False)

    @property
    def atlas_size(self) -> int:
        return self.gtn["gtn.texel_bias"].shape[1]

    @property
    def adjacency(self) -> Adjacency:
        if self._adjacency is None:
            self._adjacency = build_adjacency(self.model.template)
        return self._adjacency

    def tensors(self) -> dict[str, np.ndarray]:
        out = {k: t.data for g in (self.refiner, self.gtn, self.grn or {}) for k, t in g.items()}
        out["avatar.beta"] = np.asarray(self.beta, dtype=np.float64)
        out["avatar.clamp"] = np.array(1.0 if self.clamp else 0.0)
        out["avatar.clamp_table"] = np.array([self.clamp_table[p] for p in PARTS])
        return out

    def save(self, path) -> None:
        _save_checkpoint(Path(path), self.tensors())

    @classmethod
    def load(cls, path, model: BodyModel) -> "Avatar":
        blob = checkpoint.load(path)
        for key in ("avatar.beta", "avatar.clamp", "gtn.texel_bias", "gm.b1.W"):
            if key not in blob:
                raise InvariantError(f"avatar checkpoint {path} lacks tensor {key!r}")
        group = lambda pre: {k: Tensor(v) for k, v in blob.items() if k.startswith(pre)}
        table = dict(zip(PARTS, blob["avatar.clamp_table"].tolist())) \
            if "avatar.clamp_table" in blob else dict(CLAMP_TABLE)
        return cls(model, blob["avatar.beta"], group("gm."), group("gtn."),
                   group("grn.") or None, bool(blob["avatar.clamp"]), table)

    def posed_mesh(self, theta) -> tuple[Mesh, Mesh]:
        """(skinned, refined) meshes for ``theta``."""
        with ad.no_grad():
            P = skin(self.model, check_pose(theta), self.beta)
            P = P.with_vertices(Tensor(P.positions()))
            M = refine_mesh(self.refiner, P, self.adjacency, self.clamp_table, clamp=self.clamp)
        return P, M.with_vertices(Tensor(M.positions()))

    def texture(self, x_v: np.ndarray, refined: bool = True) -> np.ndarray:
        with ad.no_grad():
            x_p = coarse_texture(self.gtn, x_v)
            if refined and self.grn is not None:
                return refined_texture(self.grn, x_v, x_p).data
            return x_p.data

    def render(self, theta, camera: Camera, refined: bool = True) -> "Frame":
        P, M = self.posed_mesh(theta)
        x_v = visibility_map(M, camera, self.atlas_size)
        tex = self.texture(x_v, refined)
        raster = rasterize(M, camera)
        with ad.no_grad():
            img = sample_texture(Tensor(tex), texture_sampler(raster, self.atlas_size),
                                 camera.height, camera.width).data
        return Frame(img, raster.mask[None], P, M, x_v, tex)


@dataclass
class Frame:
    image: np.ndarray
    mask: np.ndarray
    skinned: Mesh
    refined: Mesh
    visibility: np.ndarray
    texture: np.ndarray


def evaluate(avatar: Avatar, dataset: Dataset, refined: bool = True) -> dict:
    """Per-frame and mean SSIM, MSE, IoU and masked L1 (L_pt) against ``dataset``."""
    rows = []
    for s in dataset:
        f = avatar.render(s.theta, s.camera, refined)
        B = np.maximum(f.mask, s.silhouette)
        with ad.no_grad():
            l_pt = texture_loss(f.image, s.image, B).item()
        rows.append({"frame": s.frame_id, "ssim": ssim(f.image, s.image),
                     "mse": mse(f.image, s.image), "iou": iou(f.mask, s.silhouette),
                     "l_pt": l_pt})
    means = {k: float(np.mean([r[k] for r in rows])) for k in ("ssim", "mse", "iou", "l_pt")}
    return {"frames": rows, "mean": means}


# -- full pipeline -------------------------------------------------------------------------

@dataclass
class PipelineResult:
    avatar: Avatar
    mesh: MeshStageResult
    texture: TextureStageResult
    log: TrainingLog


def run_pipeline(model: BodyModel, dataset: Dataset, config: TrainConfig,
                 out_dir=None) -> PipelineResult:
    """All three stages in order, single-threaded for reproducibility."""
    out = Path(out_dir) if out_dir is not None else None
    log_path = None
    if out is not None:
        out.mkdir(parents=True, exist_ok=True)
        log_path = out / "train_log.jsonl"
        if log_path.exists():
            log_path.unlink()
    log = TrainingLog(log_path)
    ckpt = out / "checkpoints" if out is not None else None
    with threadpool_limits(limits=1):
        mesh = train_mesh_stage(model, dataset, config, log, ckpt)
        tex = train_texture_stages(model, mesh.weights, dataset, config, log, ckpt)
    beta = dataset[0].beta
    avatar = Avatar(model, beta.copy(), mesh.weights, tex.gtn, tex.grn,
                    clamp=not config.no_clamp, clamp_table=dict(config.clamp_table))
    if out is not None:
        avatar.save(out / "avatar.drh")
        _save_checkpoint(out / "refiner.drh", {k: t.data for k, t in mesh.weights.items()})
    return PipelineResult(avatar, mesh, tex, log)
