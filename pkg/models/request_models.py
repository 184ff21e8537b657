"""Request models for the certification service"""

from typing import List, Optional

from pydantic import BaseModel, Field, field_validator

from models.config_models import AttackConfig, BabConfig


class CheckpointRequest(BaseModel):
    """Common fields: a stored model and one input"""

    checkpoint: str = Field(..., description="Manifest path relative to the checkpoint root")
    input: List[float] = Field(..., min_length=1, description="Flattened input in pixel units")
    label: int = Field(..., ge=0)
    epsilon: float = Field(..., ge=0.0)

    @field_validator("checkpoint")
    @classmethod
    def validate_checkpoint(cls, v):
        """Checkpoint paths stay inside the checkpoint root"""
        if ".." in v or v.startswith("/"):
            raise ValueError("Invalid checkpoint path: path traversal not allowed")
        return v


class CertifyRequest(CheckpointRequest):
    """Certify one input with IBP and, if needed, branch and bound"""

    bab: BabConfig = Field(default_factory=BabConfig)
    use_elision: bool = True


class AttackRequest(CheckpointRequest):
    """Run PGD against one input"""

    attack: Optional[AttackConfig] = None


class AttackResponse(BaseModel):
    success: bool
    loss: float
    linf_distance: float
    x_adv: List[float]
    predicted_class: int
