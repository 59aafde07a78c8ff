"""scikit-learn style wrappers around the training stages.

``X`` is always a :class:`~drhuman.trainer.Dataset`; ``y`` is unused because
the targets (images and silhouettes) travel inside the samples.
"""
from __future__ import annotations

import numpy as np
from sklearn.base import BaseEstimator, TransformerMixin
from sklearn.utils.validation import check_is_fitted

from .body import BodyModel, generate_template
from .refiner import CLAMP_TABLE
from .trainer import (Avatar, Dataset, PosedCache, TrainConfig, evaluate, mean_iou,
                      refined_meshes, run_pipeline, train_mesh_stage, train_texture_stages)


def check_dataset(X) -> Dataset:
    if isinstance(X, Dataset):
        return X
    try:
        return Dataset(list(X))
    except TypeError:
        raise TypeError(f"expected a Dataset or a sequence of samples, got {type(X).__name__}") from None


class _ConfigMixin:
    _config_keys: tuple = ()

    def _train_config(self) -> TrainConfig:
        return TrainConfig(**{k: getattr(self, k) for k in self._config_keys},
                           clamp_table=dict(CLAMP_TABLE))

    def _body(self) -> BodyModel:
        return self.model if self.model is not None else generate_template()


class MeshRefiner(_ConfigMixin, TransformerMixin, BaseEstimator):
    """Stage 1. ``transform`` maps samples to their refined meshes."""

    _config_keys = ("mesh_epochs", "mesh_batch", "mesh_lr", "sigma", "blocks", "layers",
                    "width", "seed", "no_clamp")

    def __init__(self, model: BodyModel | None = None, mesh_epochs: int = 20, mesh_batch: int = 4,
                 mesh_lr: float = 1e-4, sigma: float = 2.5e-6, blocks: int = 3, layers: int = 6,
                 width: int = 128, seed: int = 0, no_clamp: bool = False):
        self.model = model
        self.mesh_epochs = mesh_epochs
        self.mesh_batch = mesh_batch
        self.mesh_lr = mesh_lr
        self.sigma = sigma
        self.blocks = blocks
        self.layers = layers
        self.width = width
        self.seed = seed
        self.no_clamp = no_clamp

    def fit(self, X, y=None):
        X = check_dataset(X)
        self.model_ = self._body()
        res = train_mesh_stage(self.model_, X, self._train_config())
        self.weights_ = res.weights
        self.history_ = res.epoch_losses
        self.unrefined_iou_ = res.unrefined_iou
        return self

    def transform(self, X):
        check_is_fitted(self, "weights_")
        X = check_dataset(X)
        return refined_meshes(self.weights_, X, PosedCache(self.model_), self._train_config())

    def score(self, X, y=None) -> float:
        """Mean hard-silhouette IoU over the samples."""
        X = check_dataset(X)
        return mean_iou(self.transform(X), X)


class TextureModel(_ConfigMixin, BaseEstimator):
    """Stages 2 and 3 on top of a fitted :class:`MeshRefiner`."""

    _config_keys = ("pretrain_steps", "texture_epochs", "texture_batch", "lr_gtn", "lr_grn",
                    "lr_disc", "atlas_size", "sigma", "seed", "no_refinement", "no_clamp",
                    "saturating_gan")

    def __init__(self, refiner: MeshRefiner | None = None, pretrain_steps: int = 2000,
                 texture_epochs: int = 40, texture_batch: int = 8, lr_gtn: float = 2e-3,
                 lr_grn: float = 2e-4, lr_disc: float = 2e-5, atlas_size: int = 128,
                 sigma: float = 2.5e-6, seed: int = 0, no_refinement: bool = False,
                 no_clamp: bool = False, saturating_gan: bool = False):
        self.refiner = refiner
        self.pretrain_steps = pretrain_steps
        self.texture_epochs = texture_epochs
        self.texture_batch = texture_batch
        self.lr_gtn = lr_gtn
        self.lr_grn = lr_grn
        self.lr_disc = lr_disc
        self.atlas_size = atlas_size
        self.sigma = sigma
        self.seed = seed
        self.no_refinement = no_refinement
        self.no_clamp = no_clamp
        self.saturating_gan = saturating_gan

    def fit(self, X, y=None):
        if self.refiner is None:
            raise ValueError("TextureModel needs a fitted MeshRefiner")
        check_is_fitted(self.refiner, "weights_")
        X = check_dataset(X)
        model = self.refiner.model_
        res = train_texture_stages(model, self.refiner.weights_, X, self._train_config())
        self.avatar_ = Avatar(model, X[0].beta.copy(), self.refiner.weights_, res.gtn, res.grn,
                              clamp=not self.no_clamp)
        return self

    def predict(self, X) -> np.ndarray:
        """Rendered images, N×3×H×W."""
        check_is_fitted(self, "avatar_")
        return np.stack([self.avatar_.render(s.theta, s.camera).image for s in check_dataset(X)])

    def score(self, X, y=None) -> float:
        """Mean SSIM against the samples' images."""
        check_is_fitted(self, "avatar_")
        return evaluate(self.avatar_, check_dataset(X))["mean"]["ssim"]


class AvatarPipeline(_ConfigMixin, BaseEstimator):
    """All three stages with one set of hyperparameters."""

    _config_keys = tuple(k for k in TrainConfig.__dataclass_fields__ if k != "clamp_table")

    def __init__(self, model: BodyModel | None = None, **params):
        self.model = model
        defaults = TrainConfig()
        unknown = sorted(set(params) - set(self._config_keys))
        if unknown:
            raise TypeError(f"unknown parameters {unknown}")
        for k in self._config_keys:
            setattr(self, k, params.get(k, getattr(defaults, k)))

    @classmethod
    def _get_param_names(cls):
        return sorted(("model",) + cls._config_keys)

    def fit(self, X, y=None):
        X = check_dataset(X)
        self.result_ = run_pipeline(self._body(), X, self._train_config())
        self.avatar_ = self.result_.avatar
        return self

    def predict(self, X) -> np.ndarray:
        check_is_fitted(self, "avatar_")
        return np.stack([self.avatar_.render(s.theta, s.camera).image for s in check_dataset(X)])

    def score(self, X, y=None) -> float:
        check_is_fitted(self, "avatar_")
        return evaluate(self.avatar_, check_dataset(X))["mean"]["ssim"]
