"""
Architecture Parser

Turns layer strings such as ``conv 16 4x4+2; conv 32 4x4+1; fc 100; fc 10``
into networks. Every layer except the final ``fc`` is followed by a ReLU,
and a Flatten is inserted before the first ``fc`` that follows image-shaped
activations.
"""

import logging
import math
import re
from typing import List, Optional, Sequence, Tuple

from torch import nn

from services.network import Network, NetworkError
from services.tensor import DTYPE, conv_output_size

logger = logging.getLogger(__name__)

CONV_PATTERN = re.compile(r"^conv\s+(\d+)\s+(\d+)x(\d+)\+(\d+)(?:\s+p(\d+))?$")
FC_PATTERN = re.compile(r"^fc\s+(\d+|<classes>)$")

# {classes} is filled with the dataset's class count
PRESETS = {
    "toy": "fc 100; fc 100; fc 100; fc {classes}",
    "small": "conv 16 4x4+2; conv 32 4x4+1; fc 100; fc {classes}",
    "medium": "conv 32 3x3+1; conv 32 4x4+2; conv 64 3x3+1; conv 64 4x4+2; fc 512; fc 512; fc {classes}",
    "large": "conv 64 3x3+1; conv 64 3x3+1; conv 128 3x3+2; conv 128 3x3+1; conv 128 3x3+1; fc 512; fc {classes}",
}


class ArchitectureError(ValueError):
    """Raised for grammar violations and layers that do not compose"""


def expand_preset(text: str, num_classes: Optional[int]) -> str:
    name = text.strip().lower()
    if name not in PRESETS:
        return text
    if num_classes is None:
        raise ArchitectureError(f"preset '{name}' needs a class count")
    return PRESETS[name].format(classes=num_classes)


def _tokens(text: str) -> List[str]:
    tokens = [" ".join(part.split()).lower() for part in text.split(";")]
    if not tokens or any(not t for t in tokens):
        raise ArchitectureError(f"empty layer in architecture '{text}'")
    return tokens


def parse_architecture(
    text: str,
    input_shape: Sequence[int],
    num_classes: Optional[int] = None,
) -> Network:
    """
    Build an uninitialized network from an architecture string or preset name.

    Args:
        text: ``<layer> (";" <layer>)*`` with ``conv K WxH+S [pP]``, ``fc N``
            (``fc <classes>`` uses ``num_classes``) and ``flatten``
        input_shape: Per-example input shape, e.g. ``(2,)`` or ``(1, 28, 28)``
        num_classes: Class count; must match the last ``fc`` when both are given

    Returns:
        Network whose parameters still need ``init_parameters``
    """
    expanded = expand_preset(text, num_classes)
    tokens = _tokens(expanded)
    shape: Tuple[int, ...] = tuple(int(s) for s in input_shape)
    layers: List[nn.Module] = []

    for position, token in enumerate(tokens):
        last = position == len(tokens) - 1
        conv = CONV_PATTERN.match(token)
        fc = FC_PATTERN.match(token)

        if conv:
            if len(shape) != 3:
                raise ArchitectureError(f"'{token}' needs a channels x height x width input, got {shape}")
            out_channels, width, height, stride = (int(g) for g in conv.groups()[:4])
            padding = int(conv.group(5) or 0)
            if min(out_channels, width, height, stride) < 1:
                raise ArchitectureError(f"'{token}': sizes and stride must be positive")
            out_h = conv_output_size(shape[1], height, stride, padding)
            out_w = conv_output_size(shape[2], width, stride, padding)
            if out_h < 1 or out_w < 1:
                raise ArchitectureError(f"'{token}' produces an empty output from {shape}")
            layers.append(
                nn.Conv2d(shape[0], out_channels, (height, width), stride=stride, padding=padding, dtype=DTYPE)
            )
            shape = (out_channels, out_h, out_w)
            if last:
                raise ArchitectureError("the final layer must be fc")
            layers.append(nn.ReLU())
        elif fc:
            if fc.group(1) == "<classes>":
                if num_classes is None:
                    raise ArchitectureError("'fc <classes>' needs a class count")
                width = num_classes
            else:
                width = int(fc.group(1))
            if width < 1:
                raise ArchitectureError(f"'{token}': width must be positive")
            if len(shape) != 1:
                layers.append(nn.Flatten())
                shape = (math.prod(shape),)
            layers.append(nn.Linear(shape[0], width, dtype=DTYPE))
            shape = (width,)
            if not last:
                layers.append(nn.ReLU())
        elif token == "flatten":
            layers.append(nn.Flatten())
            shape = (math.prod(shape),)
        else:
            raise ArchitectureError(f"cannot parse layer '{token}'")

    classes = shape[0]
    if num_classes is not None and classes != num_classes:
        raise ArchitectureError(f"last fc has {classes} outputs but the dataset has {num_classes} classes")
    try:
        net = Network(layers, input_shape, classes, architecture=expanded)
    except NetworkError as e:
        raise ArchitectureError(str(e)) from e
    logger.debug("Parsed architecture '%s' into %d layers", expanded, len(layers))
    return net
