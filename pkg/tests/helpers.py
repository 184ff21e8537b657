"""Shared builders for the test suite"""

import gzip
import struct
from typing import List, Optional, Sequence

import numpy as np
import torch
from torch import nn

from services.network import Network, init_parameters
from services.tensor import DTYPE, Rng

ACTIVATIONS = {"relu": nn.ReLU, "sigmoid": nn.Sigmoid, "tanh": nn.Tanh}


def linear(weight, bias) -> nn.Linear:
    """A Linear layer with the given out×in weight and bias."""
    w = torch.as_tensor(weight, dtype=DTYPE)
    layer = nn.Linear(w.shape[1], w.shape[0], dtype=DTYPE)
    with torch.no_grad():
        layer.weight.copy_(w)
        layer.bias.copy_(torch.as_tensor(bias, dtype=DTYPE))
    return layer


def mlp(widths: Sequence[int], seed: int = 0, activation: str = "relu") -> Network:
    """Fully connected net ``widths[0] -> ... -> widths[-1]`` with seeded weights and biases."""
    layers: List[nn.Module] = []
    for position, (fan_in, fan_out) in enumerate(zip(widths, widths[1:])):
        layers.append(nn.Linear(fan_in, fan_out, dtype=DTYPE))
        if position < len(widths) - 2:
            layers.append(ACTIVATIONS[activation]())
    net = Network(layers, (widths[0],), widths[-1])
    rng = Rng(seed)
    init_parameters(net, rng)
    with torch.no_grad():
        for layer in net.layers:
            if isinstance(layer, nn.Linear):
                layer.bias.copy_(rng.normal(layer.bias.shape, std=0.1))
    return net


def gradient_trap_network() -> Network:
    """
    1 -> 1 -> 2 ReLU net whose cross-entropy gradient vanishes at x = 0.5
    although inputs above 0.71 are classified as class 1.
    """
    return Network(
        [linear([[1.0]], [-0.7]), nn.ReLU(), linear([[0.0], [10.0]], [0.0, -0.1])],
        (1,),
        2,
    )


def write_idx_images(path: str, images: np.ndarray, compress: bool = False, magic: int = 0x00000803) -> None:
    """Write an N×rows×cols uint8 array as an IDX image file."""
    count, rows, cols = images.shape
    raw = struct.pack(">IIII", magic, count, rows, cols) + images.astype(np.uint8).tobytes()
    _write(path, raw, compress)


def write_idx_labels(path: str, labels: Sequence[int], compress: bool = False, magic: int = 0x00000801) -> None:
    raw = struct.pack(">II", magic, len(labels)) + bytes(int(v) for v in labels)
    _write(path, raw, compress)


def _write(path: str, raw: bytes, compress: bool) -> None:
    with open(path, "wb") as f:
        f.write(gzip.compress(raw) if compress else raw)


def corners(lower: torch.Tensor, upper: torch.Tensor) -> torch.Tensor:
    """Every vertex of a box over a flat coordinate vector."""
    n = lower.numel()
    index = torch.arange(2 ** n).unsqueeze(1)
    bits = (index >> torch.arange(n)) & 1
    return torch.where(bits.bool(), upper.reshape(1, -1), lower.reshape(1, -1))


def seeded_box(rng: Rng, n: int, width: Optional[float] = None):
    """A random box over ``n`` coordinates."""
    center = rng.uniform((1, n), -1.0, 1.0)
    radius = rng.uniform((1, n), 0.0, 1.0) if width is None else torch.full((1, n), width, dtype=DTYPE)
    return center - radius, center + radius
