"""Model checkpoints: model config + float32 parameters + the feature normalizer."""

from __future__ import annotations

from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import container
from .errors import DataError
from .features import Normalizer
from .rae import ModelConfig, RaeModel, parameter_shapes


@dataclass
class Checkpoint:
    model: RaeModel
    normalizer: Normalizer | None = None
    meta: dict = field(default_factory=dict)


def save_checkpoint(path: str | Path, model: RaeModel, normalizer: Normalizer | None = None, meta: dict | None = None) -> None:
    tensors = {f"param.{k}": v for k, v in model.params.items()}
    dtypes = {}
    if normalizer is not None:
        tensors["normalizer.mean"] = normalizer.mean
        tensors["normalizer.std"] = normalizer.std
        dtypes = {"normalizer.mean": "<f8", "normalizer.std": "<f8"}
    header = {"kind": "model", "model_config": model.config.to_dict(), "meta": meta or {}}
    container.save(path, header, tensors, dtypes)


def load_checkpoint(path: str | Path, dtype: str | None = None) -> Checkpoint:
    header, tensors = container.load(path)
    if header.get("kind") != "model":
        raise DataError(f"{path}: not a model checkpoint")
    cfg_dict = dict(header["model_config"])
    if dtype is not None:
        cfg_dict["dtype"] = dtype
    cfg = ModelConfig(**cfg_dict)
    params = {}
    for name, shape in parameter_shapes(cfg).items():
        arr = tensors.get(f"param.{name}")
        if arr is None or arr.shape != shape:
            got = None if arr is None else arr.shape
            raise DataError(f"{path}: parameter {name} has shape {got}, expected {shape}")
        params[name] = arr.astype(cfg.dtype)
    normalizer = None
    if "normalizer.mean" in tensors:
        normalizer = Normalizer(tensors["normalizer.mean"], tensors["normalizer.std"])
    return Checkpoint(RaeModel(cfg, params), normalizer, header.get("meta", {}))


def load_parameters_into(model: RaeModel, path: str | Path) -> None:
    """Copy checkpoint parameters into ``model``; shapes and config must agree."""
    ck = load_checkpoint(path, dtype=model.config.dtype)
    if ck.model.config != model.config:
        raise DataError(f"{path}: warm-start config {ck.model.config} does not match model config {model.config}")
    for k, v in ck.model.params.items():
        np.copyto(model.params[k], v)
