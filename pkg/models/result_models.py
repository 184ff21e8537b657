"""Result and report models; every JSON line the toolkit writes is one of these"""

from enum import Enum
from typing import Dict, List, Optional, Tuple

from pydantic import BaseModel, Field, model_validator


class VerificationStatus(str, Enum):
    """Outcome of a verification attempt"""
    VERIFIED = "verified"
    FALSIFIED = "falsified"
    UNKNOWN = "unknown"


class Provenance(str, Enum):
    """Which procedure settled the outcome"""
    IBP = "ibp"
    PGD = "pgd"
    BAB = "bab"
    NOMINAL = "nominal"


class VerificationOutcome(BaseModel):
    """Verified(bound) | Falsified(counterexample) | Unknown(gap)"""

    status: VerificationStatus
    provenance: Provenance
    best_upper_bound: float = Field(..., description="Upper bound on the worst margin over the box")
    best_lower_bound: float = Field(..., description="Worst margin observed at a concrete input")
    nodes_explored: int = Field(default=0, ge=0)
    wall_time: float = Field(default=0.0, ge=0.0, description="Seconds")
    counterexample: Optional[List[float]] = Field(default=None, description="Flattened input")
    counterexample_class: Optional[int] = None

    @model_validator(mode="after")
    def validate_status(self):
        if self.status == VerificationStatus.VERIFIED and self.best_upper_bound > 0:
            raise ValueError("verified outcome with a positive upper bound")
        if self.status == VerificationStatus.FALSIFIED and self.counterexample is None:
            raise ValueError("falsified outcome without a counterexample")
        return self

    @property
    def is_verified(self) -> bool:
        return self.status == VerificationStatus.VERIFIED


class MetricsRecord(BaseModel):
    """One logged training step"""

    step: int
    kappa: float
    epsilon: float
    lr: float
    loss: float
    nominal_err: float = Field(..., ge=0.0, le=1.0)
    ibp_verified_err: float = Field(..., ge=0.0, le=1.0)


class AttackRecord(BaseModel):
    """Per-example PGD outcome"""

    index: int
    success: bool
    loss: float
    linf_distance: float = Field(..., ge=0.0)


class VerificationRecord(BaseModel):
    """Per-example verification outcome"""

    index: int
    status: VerificationStatus
    provenance: Provenance
    ibp_margin: float
    bab_upper: float
    bab_lower: float
    nodes: int
    time_ms: float


class ErrorRates(BaseModel):
    """Nominal, empirical and verified error rates at one radius"""

    epsilon: float
    count: int = Field(..., ge=1)
    nominal_err: float = Field(..., ge=0.0, le=1.0)
    pgd_rate: float = Field(..., ge=0.0, le=1.0)
    bab_rate: float = Field(..., ge=0.0, le=1.0)
    ibp_rate: float = Field(..., ge=0.0, le=1.0)

    @model_validator(mode="after")
    def validate_sandwich(self):
        if not (self.nominal_err <= self.pgd_rate <= self.bab_rate <= self.ibp_rate):
            raise ValueError("rates violate nominal <= pgd <= bab <= ibp")
        return self


class TightnessReport(BaseModel):
    """IBP estimate against the complete verifier across radii"""

    dataset: str
    architecture: str
    rows: List[ErrorRates]


class PolytopeBox(BaseModel):
    """IBP box of the sampled layer (sidecar of the point-cloud CSV)"""

    checkpoint: str
    layer: int
    lower: List[float]
    upper: List[float]
    area: float = Field(..., ge=0.0)
    points: int
    points_outside: int = Field(..., ge=0)


class HuntFinding(BaseModel):
    """An example where PGD fails but the complete verifier finds an attack"""

    index: int
    label: int
    pgd: AttackRecord
    pgd_point: List[float] = Field(..., description="Best PGD iterate, flattened")
    counterexample: List[float]
    counterexample_class: int
    counterexample_margin: float
    linf_distance: float


class AblationRow(BaseModel):
    """Final IBP verified accuracy of one training variant across seeds"""

    variant: str
    use_epsilon_schedule: bool
    use_elision: bool
    loss_variant: str
    verified_accuracy: List[float]
    diverged: int = Field(default=0, ge=0)
    median: float
    q25: float
    q75: float


class ErrorReport(BaseModel):
    """Machine-readable failure of a CLI run"""

    error: str
    message: str
    subcommand: Optional[str] = None


class DatasetManifest(BaseModel):
    """Provenance and shape of a dataset used by a run"""

    provenance: str
    count: int
    input_shape: Tuple[int, ...]
    class_count: int
    label_histogram: Dict[int, int]
    normalization: Dict[str, object]
    shuffle_seed: Optional[int] = None
