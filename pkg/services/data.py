"""
Data Service

MNIST IDX ingestion, the separated 2-D toy problem, normalization
bookkeeping and seeded batching.
"""

import gzip
import logging
import os
from collections import Counter
from dataclasses import dataclass, field, replace
from typing import Iterator, List, Optional, Sequence, Tuple, Union

import numpy as np
import torch

from models.config_models import ToySpec
from models.manifest_models import NormalizationRecord
from models.result_models import DatasetManifest
from services.tensor import DTYPE, Rng, Tensor

logger = logging.getLogger(__name__)

IDX_IMAGES_MAGIC = 0x00000803
IDX_LABELS_MAGIC = 0x00000801
GZIP_MAGIC = b"\x1f\x8b"

MNIST_FILES = {
    "train": ("train-images-idx3-ubyte", "train-labels-idx1-ubyte"),
    "test": ("t10k-images-idx3-ubyte", "t10k-labels-idx1-ubyte"),
}


class DataFormatError(ValueError):
    """Raised for malformed IDX files and inconsistent datasets"""


class ToyGenerationError(RuntimeError):
    """Raised when rejection sampling runs out of attempts"""


@dataclass
class Dataset:
    """Inputs (N×…) with integer labels and a normalization record"""

    inputs: Tensor
    labels: Tensor
    class_count: int
    normalization: NormalizationRecord = field(default_factory=NormalizationRecord)
    provenance: str = ""
    shuffle_seed: Optional[int] = None

    def __post_init__(self):
        self.inputs = self.inputs.to(DTYPE)
        self.labels = torch.as_tensor(self.labels, dtype=torch.long).reshape(-1)
        if self.inputs.shape[0] != self.labels.shape[0]:
            raise DataFormatError(f"{self.inputs.shape[0]} inputs but {self.labels.shape[0]} labels")
        if self.labels.numel() and bool(((self.labels < 0) | (self.labels >= self.class_count)).any()):
            raise DataFormatError(f"labels outside [0, {self.class_count})")
        if not self.normalization.applied and self.inputs.numel():
            if float(self.inputs.min()) < 0.0 or float(self.inputs.max()) > 1.0:
                raise DataFormatError("unnormalized inputs must lie in [0, 1]")

    def __len__(self) -> int:
        return int(self.labels.shape[0])

    @property
    def input_shape(self) -> Tuple[int, ...]:
        return tuple(self.inputs.shape[1:])

    def subset(self, index: Union[slice, Sequence[int], Tensor]) -> "Dataset":
        if not isinstance(index, slice):
            index = torch.as_tensor(index, dtype=torch.long)
        return replace(self, inputs=self.inputs[index], labels=self.labels[index])

    def take(self, n: Optional[int]) -> "Dataset":
        return self if n is None or n >= len(self) else self.subset(slice(0, n))

    def batches(self, batch_size: int, rng: Rng) -> Iterator[Tuple[Tensor, Tensor]]:
        """One shuffled epoch; the order depends only on the generator state."""
        order = rng.permutation(len(self))
        for start in range(0, len(self), batch_size):
            index = order[start:start + batch_size]
            yield self.inputs[index], self.labels[index]

    def manifest(self) -> DatasetManifest:
        counts = Counter(int(y) for y in self.labels.tolist())
        return DatasetManifest(
            provenance=self.provenance,
            count=len(self),
            input_shape=self.input_shape,
            class_count=self.class_count,
            label_histogram=dict(sorted(counts.items())),
            normalization=self.normalization.model_dump(),
            shuffle_seed=self.shuffle_seed,
        )


def _read_maybe_gzip(path: str) -> bytes:
    with open(path, "rb") as f:
        raw = f.read()
    if raw[:2] == GZIP_MAGIC:
        raw = gzip.decompress(raw)
    return raw


def _header(raw: bytes, words: int, path: str) -> List[int]:
    if len(raw) < 4 * words:
        raise DataFormatError(f"{path}: truncated header")
    return [int(v) for v in np.frombuffer(raw, dtype=">u4", count=words)]


def load_idx(images_path: str, labels_path: str, class_count: int = 10) -> Dataset:
    """
    Parse an IDX image file (magic 0x00000803) and label file (0x00000801).

    Pixels are unsigned bytes scaled to [0, 1]; images become N×1×rows×cols.
    Gzip-compressed files are decompressed transparently.
    """
    images_raw = _read_maybe_gzip(images_path)
    labels_raw = _read_maybe_gzip(labels_path)

    magic, count, rows, cols = _header(images_raw, 4, images_path)
    if magic != IDX_IMAGES_MAGIC:
        raise DataFormatError(f"{images_path}: bad magic 0x{magic:08x}")
    expected = 16 + count * rows * cols
    if len(images_raw) < expected:
        raise DataFormatError(f"{images_path}: truncated file ({len(images_raw)} of {expected} bytes)")

    label_magic, label_count = _header(labels_raw, 2, labels_path)
    if label_magic != IDX_LABELS_MAGIC:
        raise DataFormatError(f"{labels_path}: bad magic 0x{label_magic:08x}")
    if len(labels_raw) < 8 + label_count:
        raise DataFormatError(f"{labels_path}: truncated file")
    if label_count != count:
        raise DataFormatError(f"count mismatch: {count} images, {label_count} labels")

    pixels = np.frombuffer(images_raw, dtype=np.uint8, count=count * rows * cols, offset=16)
    labels = np.frombuffer(labels_raw, dtype=np.uint8, count=count, offset=8)

    inputs = torch.from_numpy(pixels.astype(np.float64) / 255.0).reshape(count, 1, rows, cols)
    logger.info("Loaded %d images of %dx%d from %s", count, rows, cols, images_path)
    return Dataset(
        inputs=inputs,
        labels=torch.from_numpy(labels.astype(np.int64)),
        class_count=class_count,
        provenance=f"idx:{os.path.abspath(images_path)}",
    )


def load_mnist(directory: str, split: str = "train") -> Dataset:
    """Load a split from a directory holding the standard MNIST file names."""
    if split not in MNIST_FILES:
        raise DataFormatError(f"unknown split '{split}'")
    paths = []
    for name in MNIST_FILES[split]:
        for candidate in (name, name + ".gz"):
            path = os.path.join(directory, candidate)
            if os.path.isfile(path):
                paths.append(path)
                break
        else:
            raise DataFormatError(f"{name} not found in {directory}")
    return load_idx(*paths)


def generate_toy(spec: ToySpec) -> Dataset:
    """
    Rejection-sample ``point_count`` points of the unit square so that every
    pair is at least ``min_pairwise_linf`` apart and every pair of opposite
    classes at least ``min_cross_class_linf`` apart.
    """
    rng = Rng(spec.seed)
    labels = torch.zeros(spec.point_count, dtype=torch.long)
    labels[rng.permutation(spec.point_count)[:spec.positive_count]] = 1

    lo, hi = spec.domain
    points: List[Tensor] = []
    attempts = 0
    for label in labels.tolist():
        while True:
            attempts += 1
            if attempts > spec.max_attempts:
                raise ToyGenerationError(f"no separated configuration after {spec.max_attempts} draws")
            candidate = rng.uniform((2,), lo, hi)
            if all(_separated(candidate, p, label == int(q), spec) for p, q in zip(points, labels)):
                points.append(candidate)
                break

    logger.debug("Toy dataset sampled in %d draws", attempts)
    return Dataset(
        inputs=torch.stack(points),
        labels=labels,
        class_count=2,
        provenance=f"toy:seed={spec.seed}",
    )


def _separated(a: Tensor, b: Tensor, same_class: bool, spec: ToySpec) -> bool:
    distance = float((a - b).abs().max())
    required = spec.min_pairwise_linf if same_class else max(spec.min_pairwise_linf, spec.min_cross_class_linf)
    return distance >= required


def _channel_view(inputs: Tensor) -> Tuple[Tensor, Tuple[int, ...]]:
    """Inputs as (channels, values) plus the broadcast shape of a per-channel vector."""
    if inputs.dim() == 4:
        channels = inputs.shape[1]
        return inputs.transpose(0, 1).reshape(channels, -1), (channels, 1, 1)
    return inputs.reshape(1, -1), ()


def channel_stats(ds: Dataset) -> NormalizationRecord:
    """Per-channel mean and std; compute these on the training split only."""
    values, _ = _channel_view(ds.inputs)
    return NormalizationRecord(
        mean=values.mean(dim=1).tolist(),
        std=values.std(dim=1, unbiased=False).tolist(),
        applied=False,
    )


def _stat_tensors(record: NormalizationRecord, inputs: Tensor) -> Tuple[Tensor, Tensor]:
    _, shape = _channel_view(inputs)
    mean = torch.tensor(record.mean, dtype=DTYPE)
    std = torch.tensor(record.std, dtype=DTYPE)
    if bool((std <= 0).any()):
        raise DataFormatError("zero standard deviation")
    if shape:
        return mean.reshape(shape), std.reshape(shape)
    return mean.reshape(()), std.reshape(())


def normalize(ds: Dataset, stats: Optional[NormalizationRecord] = None) -> Dataset:
    """``(x - mean) / std`` per channel; the record travels with the dataset."""
    if ds.normalization.applied:
        raise DataFormatError("dataset is already normalized")
    stats = stats or channel_stats(ds)
    mean, std = _stat_tensors(stats, ds.inputs)
    record = NormalizationRecord(mean=stats.mean, std=stats.std, applied=True)
    return replace(ds, inputs=(ds.inputs - mean) / std, normalization=record)


def to_pixels(record: NormalizationRecord, inputs: Tensor) -> Tensor:
    """Network-unit inputs back in pixel units."""
    if not record.applied:
        return inputs
    mean, std = _stat_tensors(record, inputs)
    return inputs * std + mean


def denormalize(ds: Dataset) -> Dataset:
    if not ds.normalization.applied:
        return ds
    record = NormalizationRecord(mean=ds.normalization.mean, std=ds.normalization.std, applied=False)
    return replace(ds, inputs=to_pixels(ds.normalization, ds.inputs), normalization=record)


def normalized_epsilon(epsilon: float, record: NormalizationRecord, inputs: Tensor) -> Union[float, Tensor]:
    """Pixel-unit radius expressed in the units the network sees."""
    if not record.applied:
        return epsilon
    _, std = _stat_tensors(record, inputs)
    return epsilon / std


def domain_clip(record: NormalizationRecord, inputs: Tensor, domain: Tuple[float, float] = (0.0, 1.0)):
    """The pixel domain [0, 1] in network units."""
    if not record.applied:
        return domain
    mean, std = _stat_tensors(record, inputs)
    return (domain[0] - mean) / std, (domain[1] - mean) / std


def split(ds: Dataset, holdout: int, rng: Rng) -> Tuple[Dataset, Dataset]:
    """Seeded split into (train, holdout)."""
    if not 0 <= holdout <= len(ds):
        raise DataFormatError(f"holdout size {holdout} out of range for {len(ds)} examples")
    order = rng.permutation(len(ds))
    held = replace(ds.subset(order[:holdout]), shuffle_seed=rng.seed)
    kept = replace(ds.subset(order[holdout:]), shuffle_seed=rng.seed)
    return kept, held
