"""Estimator facade over training, rendering and correspondence."""
from __future__ import annotations

import dataclasses
from pathlib import Path
from typing import Optional, Sequence, Union

import numpy as np
from sklearn.base import BaseEstimator, TransformerMixin
from sklearn.utils.validation import check_array, check_is_fitted

from . import checkpoint as ckpt
from . import correspondence as corr
from .dataset import ObjectRecord, View, load_dataset
from .exceptions import ValidationError
from .render import render_view
from .trainer import TrainConfig, init_training, train


class TemplateNeRF(TransformerMixin, BaseEstimator):
    """Template-conditioned radiance field learned from posed images.

    ``fit`` takes a list of :class:`ObjectRecord` (or a dataset directory).
    ``transform`` maps points on one instance into template coordinates and
    ``predict`` maps them onto another instance through the template.

    :param config: a :class:`TrainConfig`, a dict of its fields, or None
        for defaults.
    :param steps: training steps; None runs ``config.max_steps``.
    :param grid_resolution: marching-cubes grid for surface extraction.
    :param level: density iso-level of the extracted surface.
    """

    def __init__(self, config=None, steps: Optional[int] = None, grid_resolution: int = 64,
                 level: float = 10.0, metrics_path=None):
        self.config = config
        self.steps = steps
        self.grid_resolution = grid_resolution
        self.level = level
        self.metrics_path = metrics_path

    def _train_config(self) -> TrainConfig:
        if self.config is None:
            return TrainConfig()
        if isinstance(self.config, TrainConfig):
            return dataclasses.replace(self.config)
        return TrainConfig.from_dict(dict(self.config))

    def fit(self, X: Union[str, Path, Sequence[ObjectRecord]], y=None):
        dataset = load_dataset(X) if isinstance(X, (str, Path)) else list(X)
        if not dataset or not all(isinstance(o, ObjectRecord) for o in dataset):
            raise ValidationError("fit expects a nonempty list of ObjectRecord or a dataset path")
        self.state_ = init_training(self._train_config(), dataset)
        self.history_ = train(self.state_, dataset, self.steps, self.metrics_path)
        self.n_objects_ = self.state_.num_objects
        self._meshes = {}
        return self

    @classmethod
    def from_checkpoint(cls, path, **kwargs) -> "TemplateNeRF":
        state = ckpt.load_checkpoint(path)
        est = cls(config=state.config, **kwargs)
        est.state_ = state
        est.history_ = []
        est.n_objects_ = state.num_objects
        est._meshes = {}
        return est

    def save(self, path):
        check_is_fitted(self, "state_")
        ckpt.save_checkpoint(self.state_, path)

    def _instance(self, index) -> int:
        index = int(index)
        if not 0 <= index < self.n_objects_:
            raise ValidationError(f"instance {index} out of range [0, {self.n_objects_})")
        return index

    def latents(self, instance: int):
        check_is_fitted(self, "state_")
        return self.state_.latents(self._instance(instance))

    def transform(self, X, instance: int = 0) -> np.ndarray:
        """Template-space coordinates of points given on ``instance``."""
        check_is_fitted(self, "state_")
        X = check_array(X, dtype=np.float64)
        if X.shape[1] != 3:
            raise ValidationError("points must have 3 columns")
        return corr.to_template(self.state_.model, X, self.latents(instance).shape_code)

    def mesh(self, instance: int) -> corr.Mesh:
        i = self._instance(instance)
        if i not in self._meshes:
            self._meshes[i] = corr.extract_mesh(
                self.state_.model, self.latents(i).shape_code, self.grid_resolution, self.level
            )
        return self._meshes[i]

    def correspond(self, X, source: int, target: int) -> corr.CorrespondenceMap:
        X = check_array(X, dtype=np.float64)
        return corr.correspond(
            self.state_.model, self.latents(source), self.latents(target), X,
            self.grid_resolution, self.level, target_mesh=self.mesh(target),
            source_instance=source, target_instance=target,
        )

    def predict(self, X, source: int = 0, target: int = 0) -> np.ndarray:
        """Points on ``target`` corresponding to points ``X`` on ``source``."""
        return self.correspond(X, source, target).target_points

    def render(self, instance: int, camera: View, resolution=None, n_samples: Optional[int] = None):
        check_is_fitted(self, "state_")
        cfg = self.state_.config
        return render_view(self.state_.model, self.latents(instance), camera, resolution,
                           n_samples or cfg.samples_per_ray, cfg.background)
