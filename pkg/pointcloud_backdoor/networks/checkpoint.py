"""Checkpoint format: ``meta.json`` plus a flat little-endian float32 blob.

The layout manifest in ``meta.json`` lists every tensor of the state dict in
order with its shape, offset and element count inside ``params.f32``.
"""

import logging
from pathlib import Path
from typing import Union

import numpy as np
import torch
import torch.nn as nn

from ..errors import InvalidInputError, MissingArtifactError
from ..models import CheckpointMeta, TensorLayout
from ..utils import sha256_bytes, write_bytes_atomic, write_json_atomic
from .classifiers import PointNetMini, build_classifier
from .morphnet import MorphNet

logger = logging.getLogger(__name__)

PARAMS_FILE = "params.f32"
META_FILE = "meta.json"


def _layout_and_blob(model: nn.Module) -> tuple[list[TensorLayout], bytes]:
    layout: list[TensorLayout] = []
    chunks: list[np.ndarray] = []
    offset = 0
    for name, tensor in model.state_dict().items():
        array = tensor.detach().cpu().to(torch.float32).numpy().astype("<f4").ravel()
        layout.append(
            TensorLayout(
                name=name, shape=list(tensor.shape), offset=offset, count=int(array.size)
            )
        )
        chunks.append(array)
        offset += int(array.size)
    blob = np.concatenate(chunks).tobytes() if chunks else b""
    return layout, blob


def model_digest(model: nn.Module) -> str:
    """SHA256 of the parameter blob exactly as :func:`save_checkpoint` writes it."""
    _, blob = _layout_and_blob(model)
    return sha256_bytes(blob)


def save_checkpoint(
    model: nn.Module, directory: Path, seed: int = 0, epoch: int = 0
) -> CheckpointMeta:
    """Write a classifier or generator checkpoint to ``directory``."""
    layout, blob = _layout_and_blob(model)
    if isinstance(model, MorphNet):
        meta = CheckpointMeta(
            kind="morphnet",
            arch="morphnet",
            num_classes=model.num_classes,
            num_points=model.num_points,
            seed=seed,
            epoch=epoch,
            residual_mode=model.residual_mode,
            n_blocks=model.n_blocks,
            grid_seed=model.grid_seed,
            variant=model.variant,
            knn_k=model.knn_k,
            layout=layout,
        )
    elif isinstance(model, PointNetMini):
        meta = CheckpointMeta(
            kind="classifier",
            arch=model.arch,
            num_classes=model.num_classes,
            num_points=model.num_points,
            seed=seed,
            epoch=epoch,
            layout=layout,
        )
    else:
        raise InvalidInputError(f"cannot checkpoint {type(model).__name__}")

    directory.mkdir(parents=True, exist_ok=True)
    write_bytes_atomic(directory / PARAMS_FILE, blob)
    write_json_atomic(directory / META_FILE, meta)
    logger.info("Saved %s checkpoint to %s", meta.arch, directory)
    return meta


def read_checkpoint_meta(directory: Path) -> CheckpointMeta:
    meta_path = directory / META_FILE
    if not meta_path.exists():
        raise MissingArtifactError(f"checkpoint not found: {directory}")
    return CheckpointMeta.model_validate_json(meta_path.read_text(encoding="utf-8"))


def load_checkpoint(directory: Path) -> Union[PointNetMini, MorphNet]:
    """Rebuild the model described by ``meta.json`` and load its parameters."""
    meta = read_checkpoint_meta(directory)
    params_path = directory / PARAMS_FILE
    if not params_path.exists():
        raise MissingArtifactError(f"checkpoint parameters not found: {params_path}")

    model: Union[PointNetMini, MorphNet]
    if meta.kind == "morphnet":
        model = MorphNet(
            meta.num_classes,
            meta.num_points,
            n_blocks=meta.n_blocks or 1,
            residual_mode=meta.residual_mode or "mean",
            variant=meta.variant or "morph",
            knn_k=meta.knn_k or 8,
            grid_seed=meta.grid_seed or 0,
        )
    else:
        model = build_classifier(meta.arch, meta.num_classes, meta.num_points, meta.seed)

    blob = np.fromfile(params_path, dtype="<f4")
    expected = sum(entry.count for entry in meta.layout)
    if blob.size != expected:
        raise InvalidInputError(
            f"{params_path} holds {blob.size} floats but the layout declares {expected}"
        )
    current = model.state_dict()
    if [entry.name for entry in meta.layout] != list(current):
        raise InvalidInputError(f"checkpoint layout in {directory} does not match {meta.arch}")

    state: dict[str, torch.Tensor] = {}
    for entry in meta.layout:
        values = blob[entry.offset : entry.offset + entry.count].reshape(entry.shape)
        state[entry.name] = torch.from_numpy(values.astype(np.float32))
    model.load_state_dict(state)
    model.eval()
    return model


def load_classifier(directory: Path) -> PointNetMini:
    model = load_checkpoint(directory)
    if not isinstance(model, PointNetMini):
        raise InvalidInputError(f"{directory} holds a generator, not a classifier")
    return model


def load_morphnet(directory: Path) -> MorphNet:
    model = load_checkpoint(directory)
    if not isinstance(model, MorphNet):
        raise InvalidInputError(f"{directory} holds a classifier, not a generator")
    return model


__all__ = [
    "load_checkpoint",
    "load_classifier",
    "load_morphnet",
    "model_digest",
    "read_checkpoint_meta",
    "save_checkpoint",
]
