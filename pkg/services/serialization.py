"""
Model Serialization

A checkpoint is a JSON manifest plus a sidecar blob of little-endian
float64 values. The manifest lists the layers, where each tensor sits in
the blob, the blob's sha256, the normalization record and whatever
training state is needed to resume.
"""

import hashlib
import json
import logging
import math
import os
from dataclasses import dataclass, field
from typing import Any, Dict, List, Optional, Tuple

import numpy as np
import torch
from pydantic import ValidationError
from torch import nn

from models.manifest_models import (
    FORMAT_VERSION,
    LayerEntry,
    ModelManifest,
    NormalizationRecord,
    TensorEntry,
)
from services.network import Network, NetworkError, layer_kind
from services.tensor import DTYPE, Tensor

logger = logging.getLogger(__name__)

BLOB_DTYPE = np.dtype("<f8")
MOMENT_PREFIX = "adam."

Moments = Dict[str, Tuple[Tensor, Tensor, int]]


class SerializationError(ValueError):
    """Raised for unreadable, inconsistent or tampered checkpoints"""


@dataclass
class Checkpoint:
    """A loaded checkpoint"""

    network: Network
    manifest: ModelManifest
    moments: Moments = field(default_factory=dict)

    @property
    def rng_state(self) -> Optional[bytes]:
        return bytes.fromhex(self.manifest.rng_state) if self.manifest.rng_state else None

    @property
    def step(self) -> int:
        return int(self.manifest.training.get("step", 0))


def layer_entries(net: Network) -> List[LayerEntry]:
    entries = []
    for layer in net.layers:
        kind = layer_kind(layer)
        if isinstance(layer, nn.Linear):
            entries.append(LayerEntry(kind=kind, in_features=layer.in_features, out_features=layer.out_features))
        elif isinstance(layer, nn.Conv2d):
            entries.append(
                LayerEntry(
                    kind=kind,
                    in_channels=layer.in_channels,
                    out_channels=layer.out_channels,
                    kernel=tuple(layer.kernel_size),
                    stride=layer.stride[0],
                    padding=layer.padding[0],
                )
            )
        else:
            entries.append(LayerEntry(kind=kind))
    return entries


def build_layers(entries: List[LayerEntry]) -> List[nn.Module]:
    layers: List[nn.Module] = []
    for entry in entries:
        if entry.kind == "linear":
            layers.append(nn.Linear(entry.in_features, entry.out_features, dtype=DTYPE))
        elif entry.kind == "conv2d":
            layers.append(
                nn.Conv2d(
                    entry.in_channels,
                    entry.out_channels,
                    tuple(entry.kernel),
                    stride=entry.stride,
                    padding=entry.padding,
                    dtype=DTYPE,
                )
            )
        elif entry.kind == "relu":
            layers.append(nn.ReLU())
        elif entry.kind == "sigmoid":
            layers.append(nn.Sigmoid())
        elif entry.kind == "tanh":
            layers.append(nn.Tanh())
        elif entry.kind == "flatten":
            layers.append(nn.Flatten())
        else:
            raise SerializationError(f"unknown layer kind '{entry.kind}'")
    return layers


def _append(chunks: List[np.ndarray], entries: List[TensorEntry], name: str, t: Tensor, offset: int) -> int:
    values = t.detach().to(DTYPE).reshape(-1).numpy().astype(BLOB_DTYPE)
    chunks.append(values)
    entries.append(TensorEntry(name=name, shape=list(t.shape), offset=offset, count=values.size))
    return offset + values.size


def save_checkpoint(
    net: Network,
    manifest_path: str,
    normalization: Optional[NormalizationRecord] = None,
    clip_inputs: bool = True,
    training: Optional[Dict[str, Any]] = None,
    moments: Optional[Moments] = None,
    rng_state: Optional[bytes] = None,
) -> ModelManifest:
    """
    Write ``manifest_path`` and its ``.bin`` sidecar.

    Args:
        moments: Adam first/second moments and step count per parameter
        rng_state: Generator state to restore on resume
    """
    directory = os.path.dirname(os.path.abspath(manifest_path))
    os.makedirs(directory, exist_ok=True)
    blob_file = os.path.splitext(os.path.basename(manifest_path))[0] + ".bin"

    chunks: List[np.ndarray] = []
    tensors: List[TensorEntry] = []
    offset = 0
    for name, param in net.named_parameters():
        offset = _append(chunks, tensors, name, param, offset)
    training = dict(training or {})
    if moments:
        steps = {}
        for name, (exp_avg, exp_avg_sq, step) in moments.items():
            offset = _append(chunks, tensors, f"{MOMENT_PREFIX}{name}.exp_avg", exp_avg, offset)
            offset = _append(chunks, tensors, f"{MOMENT_PREFIX}{name}.exp_avg_sq", exp_avg_sq, offset)
            steps[name] = step
        training["adam_steps"] = steps

    blob = np.concatenate(chunks).tobytes() if chunks else b""
    with open(os.path.join(directory, blob_file), "wb") as f:
        f.write(blob)

    manifest = ModelManifest(
        format_version=FORMAT_VERSION,
        architecture=net.architecture,
        input_shape=list(net.input_shape),
        num_classes=net.num_classes,
        layers=layer_entries(net),
        tensors=tensors,
        blob_file=blob_file,
        blob_sha256=hashlib.sha256(blob).hexdigest(),
        normalization=normalization or NormalizationRecord(),
        clip_inputs=clip_inputs,
        training=training,
        rng_state=rng_state.hex() if rng_state is not None else None,
    )
    with open(manifest_path, "w") as f:
        f.write(manifest.model_dump_json(indent=2))
    logger.info("Saved checkpoint %s (%d floats)", manifest_path, offset)
    return manifest


def load_manifest(manifest_path: str) -> ModelManifest:
    try:
        with open(manifest_path) as f:
            manifest = ModelManifest.model_validate(json.load(f))
    except FileNotFoundError as e:
        raise SerializationError(f"checkpoint {manifest_path} not found") from e
    except (json.JSONDecodeError, ValidationError) as e:
        raise SerializationError(f"invalid manifest {manifest_path}: {e}") from e
    if manifest.format_version != FORMAT_VERSION:
        raise SerializationError(f"unsupported format version {manifest.format_version}")
    return manifest


def load_checkpoint(manifest_path: str) -> Checkpoint:
    """Read a checkpoint, checking the blob checksum and every tensor's extent."""
    manifest = load_manifest(manifest_path)
    blob_path = os.path.join(os.path.dirname(os.path.abspath(manifest_path)), manifest.blob_file)
    try:
        with open(blob_path, "rb") as f:
            blob = f.read()
    except FileNotFoundError as e:
        raise SerializationError(f"blob {blob_path} not found") from e
    if hashlib.sha256(blob).hexdigest() != manifest.blob_sha256:
        raise SerializationError(f"checksum mismatch for {blob_path}")
    if len(blob) % BLOB_DTYPE.itemsize:
        raise SerializationError(f"{blob_path} is not a whole number of float64 values")
    values = np.frombuffer(blob, dtype=BLOB_DTYPE)

    try:
        net = Network(build_layers(manifest.layers), manifest.input_shape, manifest.num_classes, manifest.architecture)
    except NetworkError as e:
        raise SerializationError(f"stored layers do not compose: {e}") from e

    stored: Dict[str, Tensor] = {}
    for entry in manifest.tensors:
        if entry.count != math.prod(entry.shape) or entry.offset + entry.count > values.size:
            raise SerializationError(f"tensor {entry.name} does not fit the blob")
        chunk = values[entry.offset:entry.offset + entry.count].astype(np.float64)
        stored[entry.name] = torch.from_numpy(chunk.copy()).reshape(entry.shape)

    params = net.named_parameter_dict()
    if set(params) - set(stored):
        raise SerializationError(f"missing parameters: {sorted(set(params) - set(stored))}")
    with torch.no_grad():
        for name, param in params.items():
            if tuple(stored[name].shape) != tuple(param.shape):
                raise SerializationError(f"parameter {name} has shape {tuple(stored[name].shape)}")
            param.copy_(stored[name])

    moments: Moments = {}
    for name, step in manifest.training.get("adam_steps", {}).items():
        first, second = f"{MOMENT_PREFIX}{name}.exp_avg", f"{MOMENT_PREFIX}{name}.exp_avg_sq"
        if first not in stored or second not in stored:
            raise SerializationError(f"missing optimizer state for {name}")
        moments[name] = (stored[first], stored[second], int(step))
    logger.debug("Loaded checkpoint %s", manifest_path)
    return Checkpoint(network=net, manifest=manifest, moments=moments)


def export_weights_csv(net: Network, directory: str) -> List[str]:
    """One CSV per parameter tensor: a shape header line, then the flattened values."""
    os.makedirs(directory, exist_ok=True)
    paths = []
    for name, param in net.named_parameters():
        path = os.path.join(directory, f"{name}.csv")
        values = param.detach().reshape(-1).numpy()
        shape = "x".join(str(s) for s in param.shape)
        np.savetxt(path, values[:, None], delimiter=",", fmt="%.17g", header=f"shape={shape}", comments="# ")
        paths.append(path)
    return paths
