"""Model manifest schema shared by checkpoints and exports"""

from typing import Any, Dict, List, Optional, Tuple

from pydantic import BaseModel, Field

FORMAT_VERSION = 1


class NormalizationRecord(BaseModel):
    """Per-channel statistics and whether they were applied to the inputs"""

    mean: List[float] = Field(default_factory=lambda: [0.0])
    std: List[float] = Field(default_factory=lambda: [1.0])
    applied: bool = False


class LayerEntry(BaseModel):
    """One layer of the stored network"""

    kind: str = Field(..., description="linear | conv2d | relu | sigmoid | tanh | flatten")
    in_features: Optional[int] = None
    out_features: Optional[int] = None
    in_channels: Optional[int] = None
    out_channels: Optional[int] = None
    kernel: Optional[Tuple[int, int]] = None
    stride: Optional[int] = None
    padding: Optional[int] = None


class TensorEntry(BaseModel):
    """Location of one parameter (or optimizer moment) in the blob"""

    name: str
    shape: List[int]
    offset: int = Field(..., ge=0, description="Index of the first float64 in the blob")
    count: int = Field(..., ge=0)


class ModelManifest(BaseModel):
    """JSON manifest; parameters live in a sidecar little-endian float64 blob"""

    format_version: int = FORMAT_VERSION
    architecture: Optional[str] = None
    input_shape: List[int]
    num_classes: int
    layers: List[LayerEntry]
    tensors: List[TensorEntry]
    blob_file: str
    blob_sha256: str
    normalization: NormalizationRecord = Field(default_factory=NormalizationRecord)
    clip_inputs: bool = True
    training: Dict[str, Any] = Field(default_factory=dict, description="Config, step and curriculum state")
    rng_state: Optional[str] = Field(default=None, description="Hex-encoded generator state")
