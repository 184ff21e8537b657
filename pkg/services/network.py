"""
Network Service

Feed-forward classifiers built from torch layers, the nominal forward
pass, reverse-mode gradients and parameter initialization.
"""

import logging
import math
from typing import Dict, List, Optional, Sequence, Tuple

import torch
from torch import nn

from services.tensor import DTYPE, Rng, Tensor, check_finite

logger = logging.getLogger(__name__)

AFFINE_LAYERS = (nn.Linear, nn.Conv2d)
ACTIVATION_LAYERS = (nn.ReLU, nn.Sigmoid, nn.Tanh)
SUPPORTED_LAYERS = AFFINE_LAYERS + ACTIVATION_LAYERS + (nn.Flatten,)


class NetworkError(ValueError):
    """Raised when a network is malformed or used with mismatched shapes"""


def layer_kind(layer: nn.Module) -> str:
    """Short, stable name for a layer; used in manifests and reports."""
    if isinstance(layer, nn.Linear):
        return "linear"
    if isinstance(layer, nn.Conv2d):
        return "conv2d"
    if isinstance(layer, nn.ReLU):
        return "relu"
    if isinstance(layer, nn.Sigmoid):
        return "sigmoid"
    if isinstance(layer, nn.Tanh):
        return "tanh"
    if isinstance(layer, nn.Flatten):
        return "flatten"
    raise NetworkError(f"unsupported layer {type(layer).__name__}")


class Network(nn.Module):
    """
    Ordered layer stack with a declared input shape and class count.

    The final layer must be Linear so the last affine map can be folded
    into a specification.
    """

    def __init__(
        self,
        layers: Sequence[nn.Module],
        input_shape: Sequence[int],
        num_classes: int,
        architecture: Optional[str] = None,
    ):
        super().__init__()
        self.layers = nn.Sequential(*layers)
        self.input_shape: Tuple[int, ...] = tuple(int(s) for s in input_shape)
        self.num_classes = int(num_classes)
        self.architecture = architecture
        self.to(DTYPE)
        self._validate()

    def _validate(self) -> None:
        if len(self.layers) == 0:
            raise NetworkError("network has no layers")
        for layer in self.layers:
            layer_kind(layer)
            if isinstance(layer, nn.Linear) and layer.bias is None:
                raise NetworkError("linear layers need a bias")
            if isinstance(layer, nn.Conv2d):
                if layer.bias is None:
                    raise NetworkError("conv2d layers need a bias")
                if layer.groups != 1 or layer.dilation != (1, 1) or layer.padding_mode != "zeros":
                    raise NetworkError("only plain zero-padded conv2d is supported")
        if not isinstance(self.layers[-1], nn.Linear):
            raise NetworkError("final layer must be Linear")

        shapes = self.layer_shapes()
        if shapes[-1] != (self.num_classes,):
            raise NetworkError(f"output shape {shapes[-1]} does not match {self.num_classes} classes")

    def layer_shapes(self) -> List[Tuple[int, ...]]:
        """Per-example output shape of every layer, traced with a zero input."""
        shapes = []
        z = torch.zeros((1,) + self.input_shape, dtype=DTYPE)
        with torch.no_grad():
            for index, layer in enumerate(self.layers):
                if isinstance(layer, nn.Linear) and z.dim() != 2:
                    raise NetworkError(f"layer {index} (linear) needs a flattened input, got {tuple(z.shape[1:])}")
                try:
                    z = layer(z)
                except RuntimeError as e:
                    raise NetworkError(f"layer {index} ({layer_kind(layer)}) does not compose: {e}") from e
                shapes.append(tuple(z.shape[1:]))
        return shapes

    def check_input(self, x: Tensor) -> None:
        if tuple(x.shape[1:]) != self.input_shape:
            raise NetworkError(f"input shape {tuple(x.shape[1:])} does not match {self.input_shape}")

    def forward(self, x: Tensor) -> Tensor:
        self.check_input(x)
        return self.layers(x)

    def layer_outputs(self, x: Tensor) -> List[Tensor]:
        """Activations after every layer, in order."""
        self.check_input(x)
        outputs = []
        for layer in self.layers:
            x = layer(x)
            outputs.append(x)
        return outputs

    @property
    def activation_kinds(self) -> List[str]:
        return [layer_kind(layer) for layer in self.layers if isinstance(layer, ACTIVATION_LAYERS)]

    def is_relu_only(self) -> bool:
        return all(kind == "relu" for kind in self.activation_kinds)

    def named_parameter_dict(self) -> Dict[str, Tensor]:
        return dict(self.named_parameters())


def forward(net: Network, x: Tensor) -> Tensor:
    """Nominal logits for a batch ``x``; errors on shape mismatch."""
    return check_finite(net(x), "logits")


class GradientTape:
    """
    Records operations on a set of parameters so a scalar loss can be
    differentiated with respect to them.

    Usage::

        with GradientTape(net.named_parameter_dict()) as tape:
            loss = ...
        grads = backward(tape, loss)
    """

    def __init__(self, parameters: Dict[str, Tensor]):
        self.parameters = parameters
        self._grad_mode = torch.enable_grad()

    def __enter__(self) -> "GradientTape":
        self._grad_mode.__enter__()
        return self

    def __exit__(self, *exc_info) -> None:
        self._grad_mode.__exit__(*exc_info)

    def gradient(self, loss: Tensor, retain_graph: bool = False) -> Dict[str, Tensor]:
        if loss.numel() != 1:
            raise NetworkError(f"loss must be a scalar, got shape {tuple(loss.shape)}")
        if not loss.requires_grad or loss.grad_fn is None:
            raise NetworkError("loss is not connected to the tape")
        names = list(self.parameters)
        grads = torch.autograd.grad(
            loss.reshape(()),
            [self.parameters[name] for name in names],
            retain_graph=retain_graph,
            allow_unused=True,
        )
        return {
            name: torch.zeros_like(self.parameters[name]) if grad is None else grad
            for name, grad in zip(names, grads)
        }


def backward(tape: GradientTape, loss: Tensor) -> Dict[str, Tensor]:
    """Gradient of ``loss`` for every parameter the tape tracks."""
    return tape.gradient(loss)


def init_parameters(net: Network, rng: Rng) -> Network:
    """
    Truncated-normal weights with std sqrt(2 / fan_in), cut at two
    standard deviations; zero biases. Layers are visited in order so a
    seed fixes every value.
    """
    with torch.no_grad():
        for layer in net.layers:
            if not isinstance(layer, AFFINE_LAYERS):
                continue
            fan_in = layer.weight[0].numel()
            std = math.sqrt(2.0 / fan_in)
            nn.init.trunc_normal_(layer.weight, mean=0.0, std=std, a=-2 * std, b=2 * std, generator=rng.generator)
            layer.bias.zero_()
    logger.debug("Initialized %d parameter tensors", len(list(net.parameters())))
    return net


def hidden_units(net: Network) -> int:
    """Number of activation units (the architecture table's '# hidden')."""
    shapes = net.layer_shapes()
    total = 0
    for layer, shape in zip(net.layers, shapes):
        if isinstance(layer, ACTIVATION_LAYERS):
            total += math.prod(shape)
    return total
