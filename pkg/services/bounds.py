"""
Bounds Service

Interval bound propagation: push an l-infinity box through a network
layer by layer, fold the last linear layer into a specification, and
build worst-case logits for the robust loss.

Boxes are carried as (lower, upper) through activations and as
(center, radius) through affine layers, where the radius goes through
the absolute value of the weights.
"""

import logging
from dataclasses import dataclass
from typing import List, Optional, Tuple, Union

import torch
import torch.nn.functional as F
from torch import nn

from services.network import ACTIVATION_LAYERS, Network, NetworkError, layer_kind
from services.tensor import DTYPE, Tensor, conv2d, matmul

logger = logging.getLogger(__name__)

Scalar = Union[float, Tensor]
DomainClip = Optional[Tuple[Scalar, Scalar]]


class BoundsError(ValueError):
    """Raised for invalid boxes, mismatched specifications and non-finite bounds"""


@dataclass
class IntervalBounds:
    """Coordinatewise box ``lower <= z <= upper`` with a leading batch axis."""

    lower: Tensor
    upper: Tensor

    def __post_init__(self):
        if self.lower.shape != self.upper.shape:
            raise BoundsError(f"bound shapes differ: {tuple(self.lower.shape)} vs {tuple(self.upper.shape)}")
        if not bool(torch.isfinite(self.lower).all() and torch.isfinite(self.upper).all()):
            raise BoundsError("non-finite bound detected")
        if bool((self.lower > self.upper).any()):
            raise BoundsError("lower bound exceeds upper bound")

    @classmethod
    def from_center_radius(cls, center: Tensor, radius: Tensor) -> "IntervalBounds":
        return cls(center - radius, center + radius)

    @property
    def center(self) -> Tensor:
        return (self.upper + self.lower) / 2

    @property
    def radius(self) -> Tensor:
        return (self.upper - self.lower) / 2

    @property
    def shape(self) -> Tuple[int, ...]:
        return tuple(self.lower.shape)

    def contains(self, z: Tensor, tol: float = 0.0) -> Tensor:
        """Per-example flag: every coordinate of ``z`` lies in the box."""
        inside = (z >= self.lower - tol) & (z <= self.upper + tol)
        return inside.reshape(inside.shape[0], -1).all(dim=1)

    def __getitem__(self, index) -> "IntervalBounds":
        return IntervalBounds(self.lower[index], self.upper[index])


@dataclass
class LinearSpecification:
    """The property ``c·z + d <= 0`` over one layer's activations."""

    c: Tensor
    d: float = 0.0

    def __post_init__(self):
        if self.c.numel() == 0:
            raise BoundsError("specification vector is empty")


def adversarial_specification(num_classes: int, y: int, y_true: int) -> LinearSpecification:
    """``z_y - z_ytrue <= 0``: class ``y`` never beats the true class."""
    if y == y_true:
        raise BoundsError("adversarial specification needs y != y_true")
    if not (0 <= y < num_classes and 0 <= y_true < num_classes):
        raise BoundsError(f"class index out of range for {num_classes} classes")
    c = torch.zeros(num_classes, dtype=DTYPE)
    c[y] = 1.0
    c[y_true] = -1.0
    return LinearSpecification(c=c, d=0.0)


def input_box(x0: Tensor, epsilon: Scalar, domain_clip: DomainClip = None) -> IntervalBounds:
    """
    ``[x0 - eps, x0 + eps]``, intersected with ``[lo, hi]`` when a clip is given.

    ``epsilon`` and the clip ends may be tensors broadcastable to ``x0``
    (per-channel values on normalized data).
    """
    eps = torch.as_tensor(epsilon, dtype=DTYPE)
    if bool((eps < 0).any()):
        raise BoundsError(f"epsilon must be non-negative, got {epsilon}")
    lower = x0 - eps
    upper = x0 + eps
    if domain_clip is not None:
        lo, hi = (torch.as_tensor(v, dtype=DTYPE) for v in domain_clip)
        lower = torch.maximum(lower, lo.expand_as(lower))
        upper = torch.minimum(upper, hi.expand_as(upper))
        if bool((lower > upper).any()):
            raise BoundsError("input box does not intersect the data domain")
    return IntervalBounds(lower, upper)


def affine_interval(layer: nn.Module, bounds: IntervalBounds) -> IntervalBounds:
    """Center-radius propagation: ``mu' = W mu + b``, ``r' = |W| r``."""
    mu, r = bounds.center, bounds.radius
    try:
        if isinstance(layer, nn.Linear):
            mu_out = matmul(mu.reshape(mu.shape[0], -1), layer.weight.t()) + layer.bias
            r_out = matmul(r.reshape(r.shape[0], -1), layer.weight.abs().t())
        elif isinstance(layer, nn.Conv2d):
            stride, padding = layer.stride[0], layer.padding[0]
            mu_out = conv2d(mu, layer.weight, layer.bias, stride, padding)
            zero_bias = torch.zeros_like(layer.bias)
            r_out = conv2d(r, layer.weight.abs(), zero_bias, stride, padding)
        else:
            raise BoundsError(f"{type(layer).__name__} is not an affine layer")
    except ValueError as e:
        if isinstance(e, BoundsError):
            raise
        raise BoundsError(str(e)) from e
    return IntervalBounds.from_center_radius(mu_out, r_out)


ACTIVATION_FUNCTIONS = {
    "relu": torch.relu,
    "sigmoid": torch.sigmoid,
    "tanh": torch.tanh,
}


def activation_interval(fn: Union[str, nn.Module], bounds: IntervalBounds) -> IntervalBounds:
    """Monotone activations map a box to ``[fn(lower), fn(upper)]``."""
    name = fn if isinstance(fn, str) else layer_kind(fn)
    if name not in ACTIVATION_FUNCTIONS:
        raise BoundsError(f"'{name}' is not a monotone activation")
    f = ACTIVATION_FUNCTIONS[name]
    return IntervalBounds(f(bounds.lower), f(bounds.upper))


def propagate(net: Network, bounds: IntervalBounds, stop_before_last: bool = False) -> List[IntervalBounds]:
    """
    Bounds after every layer of ``net`` (all but the last when
    ``stop_before_last``), starting from an input box.
    """
    try:
        net.check_input(bounds.lower)
    except NetworkError as e:
        raise BoundsError(str(e)) from e

    layers = list(net.layers)
    if stop_before_last:
        layers = layers[:-1]

    per_layer = []
    current = bounds
    for layer in layers:
        if isinstance(layer, (nn.Linear, nn.Conv2d)):
            current = affine_interval(layer, current)
        elif isinstance(layer, ACTIVATION_LAYERS):
            current = activation_interval(layer, current)
        elif isinstance(layer, nn.Flatten):
            current = IntervalBounds(layer(current.lower), layer(current.upper))
        else:
            raise BoundsError(f"unsupported layer {type(layer).__name__}")
        per_layer.append(current)
    return per_layer


def elide(last: nn.Linear, spec: LinearSpecification) -> LinearSpecification:
    """Fold the final affine map into the specification: ``c' = W^T c``, ``d' = c·b + d``."""
    if not isinstance(last, nn.Linear):
        raise BoundsError("only a Linear layer can be elided")
    if spec.c.shape != (last.out_features,):
        raise BoundsError(f"specification length {tuple(spec.c.shape)} does not match {last.out_features} outputs")
    c_new = matmul(last.weight.t(), spec.c.reshape(-1, 1)).reshape(-1)
    d_new = torch.dot(spec.c, last.bias) + spec.d
    return LinearSpecification(c=c_new, d=d_new)


def spec_upper_bound(bounds: IntervalBounds, spec: LinearSpecification) -> Tensor:
    """
    Maximum of ``c·z + d`` over the box: each coordinate takes its upper
    end where ``c`` is positive and its lower end otherwise. Returns one
    value per example when the box has a batch axis.
    """
    lower = bounds.lower.reshape(bounds.lower.shape[0], -1) if bounds.lower.dim() > 1 else bounds.lower[None]
    upper = bounds.upper.reshape(bounds.upper.shape[0], -1) if bounds.upper.dim() > 1 else bounds.upper[None]
    c = spec.c.reshape(-1)
    if lower.shape[1] != c.shape[0]:
        raise BoundsError(f"specification length {c.shape[0]} does not match box size {lower.shape[1]}")
    corner = torch.where(c > 0, upper, lower)
    value = (corner * c).sum(dim=1) + spec.d
    return value if bounds.lower.dim() > 1 else value[0]


def _as_labels(y_true: Union[int, Tensor], batch: int, num_classes: int) -> Tensor:
    labels = torch.as_tensor(y_true, dtype=torch.long).reshape(-1)
    if labels.numel() == 1 and batch > 1:
        labels = labels.expand(batch)
    if labels.numel() != batch:
        raise BoundsError(f"{labels.numel()} labels for a batch of {batch}")
    if bool(((labels < 0) | (labels >= num_classes)).any()):
        raise BoundsError(f"class index out of range for {num_classes} classes")
    return labels


def logit_bounds(net: Network, x0: Tensor, epsilon: Scalar, domain_clip: DomainClip = None) -> IntervalBounds:
    return propagate(net, input_box(x0, epsilon, domain_clip))[-1]


def worst_case_logits(
    net: Network,
    x0: Tensor,
    epsilon: Scalar,
    y_true: Union[int, Tensor],
    use_elision: bool = True,
    domain_clip: DomainClip = None,
) -> Tensor:
    """
    Worst-case logits for a batch ``x0``.

    Without elision the true class takes its lower bound and every other
    class its upper bound. With elision, entry ``y`` is the bound on
    ``z_y - z_ytrue`` computed through the folded last layer and the true
    class entry is 0; cross-entropy is unchanged by that constant shift.
    """
    return box_worst_case_logits(net, input_box(x0, epsilon, domain_clip), y_true, use_elision)


def box_worst_case_logits(
    net: Network,
    box: IntervalBounds,
    y_true: Union[int, Tensor],
    use_elision: bool = True,
) -> Tensor:
    """Worst-case logits over an arbitrary batch of input boxes."""
    batch = box.lower.shape[0]
    labels = _as_labels(y_true, batch, net.num_classes)
    one_hot = F.one_hot(labels, net.num_classes).to(torch.bool)

    if not use_elision:
        final = propagate(net, box)[-1]
        return torch.where(one_hot, final.lower, final.upper)

    hidden = propagate(net, box, stop_before_last=True)
    penultimate = hidden[-1] if hidden else box
    last = net.layers[-1]
    mu = penultimate.center.reshape(batch, -1)
    r = penultimate.radius.reshape(batch, -1)

    # rows: W_y - W_ytrue for every class y
    w_diff = last.weight.unsqueeze(0) - last.weight[labels].unsqueeze(1)
    b_diff = last.bias.unsqueeze(0) - last.bias[labels].unsqueeze(1)
    z_hat = torch.einsum("bnh,bh->bn", w_diff, mu) + torch.einsum("bnh,bh->bn", w_diff.abs(), r) + b_diff
    return torch.where(one_hot, torch.zeros_like(z_hat), z_hat)


def worst_case_margins(
    net: Network,
    x0: Tensor,
    epsilon: Scalar,
    y_true: Union[int, Tensor],
    use_elision: bool = True,
    domain_clip: DomainClip = None,
) -> Tensor:
    """Upper bounds on ``z_y - z_ytrue`` for every class; the true-class column is 0."""
    z_hat = worst_case_logits(net, x0, epsilon, y_true, use_elision, domain_clip)
    labels = _as_labels(y_true, x0.shape[0], net.num_classes)
    return z_hat - z_hat.gather(1, labels.unsqueeze(1))


def max_violation(margins: Tensor, y_true: Union[int, Tensor]) -> Tensor:
    """Largest margin over the classes other than the true one."""
    labels = _as_labels(y_true, margins.shape[0], margins.shape[1])
    mask = F.one_hot(labels, margins.shape[1]).to(torch.bool)
    return margins.masked_fill(mask, float("-inf")).max(dim=1).values
