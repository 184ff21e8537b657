"""
Certification Routes

Certify or attack a single input against a stored checkpoint.
"""

import logging
import math
import os
from typing import List, Tuple

import torch
from fastapi import APIRouter, HTTPException

from models.config_models import AttackConfig
from models.manifest_models import NormalizationRecord
from models.request_models import AttackRequest, AttackResponse, CertifyRequest, CheckpointRequest
from models.result_models import Provenance, VerificationOutcome, VerificationStatus
from services import data as data_service
from services.attack import PGDAttack
from services.bounds import max_violation
from services.data import Dataset
from services.network import Network
from services.serialization import load_checkpoint
from services.tensor import DTYPE
from services.verify import bab_verify, concrete_margin, ibp_verified
from utils.settings import get_settings

logger = logging.getLogger(__name__)

router = APIRouter(prefix="/api", tags=["certify"])


def _prepare(request: CheckpointRequest) -> Tuple[Network, torch.Tensor, object, object, NormalizationRecord]:
    """Load the checkpoint and express the input, radius and domain in network units."""
    root = get_settings().checkpoint_root
    if not root:
        raise ValueError("No checkpoint root configured (set IBPCERT_CHECKPOINT_ROOT)")
    checkpoint = load_checkpoint(os.path.join(root, request.checkpoint))
    net = checkpoint.network
    if request.label >= net.num_classes:
        raise ValueError(f"label {request.label} out of range for {net.num_classes} classes")

    x = torch.tensor(request.input, dtype=DTYPE)
    expected = math.prod(net.input_shape)
    if x.numel() != expected:
        raise ValueError(f"input has {x.numel()} values, the model expects {expected}")
    ds = Dataset(inputs=x.reshape((1,) + net.input_shape), labels=[request.label], class_count=net.num_classes)
    record = checkpoint.manifest.normalization
    if record.applied:
        ds = data_service.normalize(ds, record)

    eps = data_service.normalized_epsilon(request.epsilon, ds.normalization, ds.inputs)
    domain = data_service.domain_clip(ds.normalization, ds.inputs) if checkpoint.manifest.clip_inputs else None
    return net, ds.inputs, eps, domain, ds.normalization


def _pixels(record: NormalizationRecord, x: torch.Tensor) -> List[float]:
    return data_service.to_pixels(record, x).reshape(-1).tolist()


@router.post("/certify", response_model=VerificationOutcome)
def certify(request: CertifyRequest):
    """
    Certify one input

    IBP answers first; inputs it cannot certify go to branch and bound
    with the requested budget. Unknown means the budget ran out.

    Raises:
        HTTPException: 400 for invalid input, 500 for internal errors
    """
    try:
        net, x, eps, domain, record = _prepare(request)
        label = torch.tensor([request.label])
        margin, wrong = concrete_margin(net, x, label)
        if bool(wrong[0]):
            return VerificationOutcome(
                status=VerificationStatus.FALSIFIED,
                provenance=Provenance.NOMINAL,
                best_upper_bound=float(margin[0]),
                best_lower_bound=float(margin[0]),
                counterexample=_pixels(record, x),
                counterexample_class=int(net(x).argmax(dim=1)[0]),
            )
        verified, margins = ibp_verified(net, x, label, eps, request.use_elision, request.bab.tolerance, domain)
        if bool(verified[0]):
            return VerificationOutcome(
                status=VerificationStatus.VERIFIED,
                provenance=Provenance.IBP,
                best_upper_bound=float(max_violation(margins, label)[0]),
                best_lower_bound=float(margin[0]),
                nodes_explored=1,
            )
        outcome = bab_verify(net, x[0], request.label, eps, request.bab, domain)
        if outcome.counterexample is not None:
            network_units = torch.tensor(outcome.counterexample, dtype=DTYPE).reshape(x.shape)
            outcome = outcome.model_copy(update={"counterexample": _pixels(record, network_units)})
        logger.info("Certify %s: %s after %d nodes", request.checkpoint, outcome.status.value, outcome.nodes_explored)
        return outcome
    except ValueError as e:
        raise HTTPException(status_code=400, detail=str(e))
    except RuntimeError as e:
        raise HTTPException(status_code=500, detail=str(e))


@router.post("/attack", response_model=AttackResponse)
def attack(request: AttackRequest):
    """Run PGD against one input"""
    try:
        net, x, eps, domain, record = _prepare(request)
        cfg = request.attack or AttackConfig.evaluation(request.epsilon)
        result = PGDAttack(net, cfg).attack(x, request.label, epsilon=eps, domain=domain)
        with torch.no_grad():
            predicted = int(net(result.x_adv).argmax(dim=1)[0])
        x_adv = data_service.to_pixels(record, result.x_adv)
        original = data_service.to_pixels(record, x)
        return AttackResponse(
            success=bool(result.success[0]),
            loss=float(result.loss[0]),
            linf_distance=float((x_adv - original).abs().max()),
            x_adv=x_adv.reshape(-1).tolist(),
            predicted_class=predicted,
        )
    except ValueError as e:
        raise HTTPException(status_code=400, detail=str(e))
    except RuntimeError as e:
        raise HTTPException(status_code=500, detail=str(e))


@router.get("/health")
async def health_check():
    """Health check endpoint"""
    return {"status": "healthy", "service": "ibp-certifier"}
