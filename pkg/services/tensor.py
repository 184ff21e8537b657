"""
Tensor Service

Validated float64 tensor operations on top of torch. Every public
operation checks its shape contract and refuses to return non-finite
values, so errors surface where they happen instead of propagating.
"""

import hashlib
import logging
import math
from typing import Callable, Dict, Optional, Sequence, Tuple, Union

import torch
import torch.nn.functional as F

logger = logging.getLogger(__name__)

DTYPE = torch.float64
Tensor = torch.Tensor
Operand = Union[Tensor, float, int]

MAX_AXES = 4


class TensorError(ValueError):
    """Raised on shape mismatches, invalid domains and non-finite results"""


def configure_determinism(num_threads: int = 1) -> None:
    """
    Pin torch to deterministic kernels and a fixed intra-op thread count.

    Args:
        num_threads: Number of intra-op threads (reduction order depends on it)
    """
    torch.use_deterministic_algorithms(True)
    torch.set_num_threads(num_threads)
    torch.set_default_dtype(DTYPE)
    logger.debug("Deterministic torch configured with %d thread(s)", num_threads)


def check_finite(t: Tensor, what: str = "tensor") -> Tensor:
    if not bool(torch.isfinite(t).all()):
        raise TensorError(f"non-finite values in {what}")
    return t


def as_tensor(values, shape: Optional[Sequence[int]] = None) -> Tensor:
    """
    Build a float64 tensor from nested sequences, arrays or tensors.

    Args:
        values: Anything ``torch.as_tensor`` accepts
        shape: Optional target shape; ``product(shape)`` must match the value count

    Returns:
        A detached float64 tensor
    """
    t = torch.as_tensor(values, dtype=DTYPE)
    if shape is not None:
        shape = tuple(int(s) for s in shape)
        if any(s < 0 for s in shape):
            raise TensorError(f"negative extent in shape {shape}")
        numel = math.prod(shape)
        if numel != t.numel():
            raise TensorError(f"shape {shape} holds {numel} values, got {t.numel()}")
        t = t.reshape(shape)
    if t.dim() > MAX_AXES:
        raise TensorError(f"at most {MAX_AXES} axes supported, got {t.dim()}")
    return check_finite(t, "input")


def matmul(a: Tensor, b: Tensor) -> Tensor:
    """Matrix product of an m×k and a k×n tensor."""
    if a.dim() != 2 or b.dim() != 2:
        raise TensorError(f"matmul expects 2-axis operands, got {tuple(a.shape)} and {tuple(b.shape)}")
    if a.shape[1] != b.shape[0]:
        raise TensorError(f"inner extents differ: {tuple(a.shape)} · {tuple(b.shape)}")
    return check_finite(torch.matmul(a, b), "matmul output")


def conv_output_size(size: int, kernel: int, stride: int, padding: int) -> int:
    return (size + 2 * padding - kernel) // stride + 1


def conv2d(x: Tensor, w: Tensor, b: Tensor, stride: int = 1, padding: int = 0) -> Tensor:
    """
    Cross-correlation (no kernel flip) with explicit zero padding, N×C×H×W layout.

    Args:
        x: Input batch N×C×H×W
        w: Kernels K×C×h×w
        b: Per-output-channel bias of length K
        stride: Positive stride applied to both spatial axes
        padding: Non-negative zero padding applied to both spatial axes
    """
    if x.dim() != 4 or w.dim() != 4:
        raise TensorError(f"conv2d expects 4-axis input and kernel, got {tuple(x.shape)} and {tuple(w.shape)}")
    if stride < 1 or padding < 0:
        raise TensorError(f"invalid stride={stride} or padding={padding}")
    if x.shape[1] != w.shape[1]:
        raise TensorError(f"channel mismatch: input has {x.shape[1]}, kernel expects {w.shape[1]}")
    if b.dim() != 1 or b.shape[0] != w.shape[0]:
        raise TensorError(f"bias length {tuple(b.shape)} does not match {w.shape[0]} output channels")
    out_h = conv_output_size(x.shape[2], w.shape[2], stride, padding)
    out_w = conv_output_size(x.shape[3], w.shape[3], stride, padding)
    if out_h < 1 or out_w < 1:
        raise TensorError(f"empty conv2d output ({out_h}×{out_w})")
    return check_finite(F.conv2d(x, w, b, stride=stride, padding=padding), "conv2d output")


def _safe_log(t: Tensor) -> Tensor:
    if bool((t <= 0).any()):
        raise TensorError("log of non-positive value")
    return torch.log(t)


UNARY_OPS: Dict[str, Callable[[Tensor], Tensor]] = {
    "abs": torch.abs,
    "relu": torch.relu,
    "sigmoid": torch.sigmoid,
    "tanh": torch.tanh,
    "softplus": F.softplus,
    "exp": torch.exp,
    "log": _safe_log,
}

BINARY_OPS: Dict[str, Callable[[Tensor, Tensor], Tensor]] = {
    "add": torch.add,
    "sub": torch.sub,
    "mul": torch.mul,
    "max": torch.maximum,
}


def _broadcastable(a: Tensor, b: Tensor) -> Tuple[Tensor, Tensor]:
    if a.shape == b.shape:
        return a, b
    if b.numel() == 1 and b.dim() <= 1:
        return a, b.reshape(()).expand_as(a)
    if a.numel() == 1 and a.dim() <= 1:
        return a.reshape(()).expand_as(b), b
    raise TensorError(f"shape mismatch: {tuple(a.shape)} vs {tuple(b.shape)}")


def elementwise(op: str, a: Operand, b: Optional[Operand] = None) -> Tensor:
    """
    Apply a named elementwise operation.

    Unary ops take only ``a``; binary ops need both operands with equal
    shapes, or one operand that is a scalar.
    """
    a = a if isinstance(a, torch.Tensor) else torch.tensor(float(a), dtype=DTYPE)
    if op in UNARY_OPS:
        if b is not None:
            raise TensorError(f"{op} is unary")
        return check_finite(UNARY_OPS[op](a), f"{op} output")
    if op in BINARY_OPS:
        if b is None:
            raise TensorError(f"{op} needs two operands")
        b = b if isinstance(b, torch.Tensor) else torch.tensor(float(b), dtype=DTYPE)
        a, b = _broadcastable(a, b)
        return check_finite(BINARY_OPS[op](a, b), f"{op} output")
    raise TensorError(f"unknown elementwise op '{op}'")


class Rng:
    """Seeded random stream backed by torch's CPU Mersenne Twister"""

    algorithm = "mt19937"

    def __init__(self, seed: int):
        if not 0 <= int(seed) < 2**64:
            raise TensorError(f"seed must fit in 64 unsigned bits, got {seed}")
        self.seed = int(seed)
        self.generator = torch.Generator(device="cpu")
        self.generator.manual_seed(self.seed)

    def fork(self, stream: int) -> "Rng":
        """Independent child stream; depends only on (seed, stream)."""
        digest = hashlib.sha256(f"{self.seed}:{stream}".encode()).digest()
        return Rng(int.from_bytes(digest[:8], "little"))

    def uniform(self, shape: Sequence[int], low: Operand = 0.0, high: Operand = 1.0) -> Tensor:
        u = torch.rand(tuple(shape), generator=self.generator, dtype=DTYPE)
        return low + (high - low) * u

    def normal(self, shape: Sequence[int], std: float = 1.0) -> Tensor:
        return std * torch.randn(tuple(shape), generator=self.generator, dtype=DTYPE)

    def permutation(self, n: int) -> Tensor:
        return torch.randperm(n, generator=self.generator)

    def get_state(self) -> bytes:
        return bytes(self.generator.get_state().tolist())

    def set_state(self, state: bytes) -> None:
        self.generator.set_state(torch.tensor(list(state), dtype=torch.uint8))
