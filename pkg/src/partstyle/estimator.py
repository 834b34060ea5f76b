"""scikit-learn style wrapper: ``fit`` learns a style field, ``transform`` applies it."""

from __future__ import annotations

import math
from pathlib import Path

import torch
from sklearn.base import BaseEstimator, TransformerMixin
from sklearn.utils.validation import check_is_fitted

from .field import FieldConfig
from .mesh import PartitionedMesh, StylizedMesh, load_mesh
from .trainer import TrainConfig, parse_prompt, run, stylize


def check_mesh(mesh, parts=None) -> PartitionedMesh:
    """Accept a mesh object or an OBJ path (with optional parts sidecar)."""
    if isinstance(mesh, PartitionedMesh):
        return mesh
    if isinstance(mesh, StylizedMesh):
        return mesh.base
    if isinstance(mesh, (str, Path)):
        return load_mesh(mesh, parts)
    raise TypeError(f"expected a PartitionedMesh or a path, got {type(mesh).__name__}")


class PartStylizer(TransformerMixin, BaseEstimator):
    """Text-driven part-aware stylization.

    Parameters mirror :class:`TrainConfig`; ``prompt`` is a comma-separated
    list of ``<style> <part>`` pairs.
    """

    def __init__(
        self,
        prompt=None,
        iterations=2000,
        learning_rate=5e-4,
        seed=0,
        grounding="toy",
        localizer=None,
        embedding="toy",
        mode="full",
        alternation="every-other",
        image_size=512,
        grid_size=32,
        view_sigma=math.radians(15.0),
        hidden_width=256,
        num_frequencies=6,
        out_dir=None,
    ):
        self.prompt = prompt
        self.iterations = iterations
        self.learning_rate = learning_rate
        self.seed = seed
        self.grounding = grounding
        self.localizer = localizer
        self.embedding = embedding
        self.mode = mode
        self.alternation = alternation
        self.image_size = image_size
        self.grid_size = grid_size
        self.view_sigma = view_sigma
        self.hidden_width = hidden_width
        self.num_frequencies = num_frequencies
        self.out_dir = out_dir

    def train_config(self) -> TrainConfig:
        return TrainConfig(
            iterations=self.iterations, learning_rate=self.learning_rate, seed=self.seed,
            grounding=self.grounding, localizer=self.localizer, embedding=self.embedding,
            mode=self.mode, alternation=self.alternation, image_size=self.image_size,
            grid_size=self.grid_size, view_sigma=self.view_sigma,
            field=FieldConfig(hidden_width=self.hidden_width, num_frequencies=self.num_frequencies),
        )

    def fit(self, X, y=None):
        mesh = check_mesh(X)
        if not self.prompt:
            raise ValueError("PartStylizer needs a prompt")
        self.prompt_ = parse_prompt(self.prompt, mesh)
        art = run(self.train_config(), mesh, self.prompt_, out_dir=self.out_dir)
        self.field_ = art.field
        self.anchor_ = art.anchor
        self.loss_log_ = art.loss_log
        self.metadata_ = art.metadata
        return self

    def transform(self, X) -> StylizedMesh:
        check_is_fitted(self, "field_")
        mesh = check_mesh(X)
        with torch.no_grad():
            return stylize(self.field_, mesh).detach()
