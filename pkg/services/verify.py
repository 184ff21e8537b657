"""
Verification Service

IBP certification, a complete input-splitting branch-and-bound verifier,
the verified / empirical error cascade, polytope sampling of one layer's
reachable set, and the search for examples PGD misses.
"""

import heapq
import itertools
import logging
import math
import time
from dataclasses import dataclass, field
from typing import List, Optional, Sequence, Tuple, Union

import torch
import torch.nn.functional as F

from models.config_models import AttackConfig, AttackInit, AttackLoss, BabConfig, StepRule
from models.result_models import (
    AttackRecord,
    ErrorRates,
    HuntFinding,
    Provenance,
    VerificationOutcome,
    VerificationRecord,
    VerificationStatus,
)
from services.attack import PGDAttack, attack_loss, box_attack, misclassified
from services.bounds import (
    DomainClip,
    IntervalBounds,
    Scalar,
    box_worst_case_logits,
    input_box,
    max_violation,
    propagate,
    worst_case_margins,
)
from services.data import Dataset
from services.network import Network
from services.tensor import DTYPE, Rng, Tensor

logger = logging.getLogger(__name__)


class VerificationError(ValueError):
    """Raised for networks or requests the verifier cannot handle"""


def ibp_verified(
    net: Network,
    x0: Tensor,
    y_true: Union[int, Tensor],
    epsilon: Scalar,
    use_elision: bool = True,
    tolerance: float = 1e-6,
    domain: DomainClip = None,
) -> Tuple[Tensor, Tensor]:
    """
    Per-example verified flags and per-class margin bounds.

    An example is verified when every bound on ``z_y - z_ytrue`` with
    ``y != ytrue`` is at most ``-tolerance``.
    """
    with torch.no_grad():
        margins = worst_case_margins(net, x0, epsilon, y_true, use_elision, domain)
        verified = max_violation(margins, y_true) <= -tolerance
    return verified, margins


def concrete_margin(net: Network, x: Tensor, labels: Tensor) -> Tuple[Tensor, Tensor]:
    """``max_{y != ytrue} z_y - z_ytrue`` at concrete inputs, with the misclassification flags."""
    with torch.no_grad():
        logits = net(x)
        return attack_loss(logits, labels, AttackLoss.MARGIN), misclassified(logits, labels)


def _box_upper_bounds(net: Network, lower: Tensor, upper: Tensor, labels: Tensor) -> Tensor:
    """Elided IBP bound on the worst margin for a batch of boxes."""
    with torch.no_grad():
        z_hat = box_worst_case_logits(net, IntervalBounds(lower, upper), labels, use_elision=True)
        return max_violation(z_hat, labels)


@dataclass(order=True)
class _Node:
    key: float
    node_id: int
    lower: Tensor = field(compare=False)
    upper: Tensor = field(compare=False)

    @property
    def upper_bound(self) -> float:
        return -self.key


class BranchAndBound:
    """
    Complete verifier for ReLU networks by splitting the input box.

    Nodes are explored highest bound first (ties by creation order) in
    batches of ``cfg.batch_nodes``. Each explored node tries its center and
    a short PGD run restricted to the node; a node whose bound is at most
    ``-tolerance`` is proved safe, and any other node is halved along its
    widest input coordinate. Nodes narrower than ``min_box_width`` are not
    split and leave the outcome unknown.
    """

    def __init__(self, net: Network, cfg: BabConfig):
        if not net.is_relu_only():
            raise VerificationError("branch and bound supports ReLU networks only")
        self.net = net
        self.cfg = cfg
        self.attack_cfg = AttackConfig(
            epsilon=0.0,
            steps=max(cfg.attack_steps, 1),
            restarts=cfg.attack_restarts,
            step_rule=StepRule.SIGNED,
            loss=AttackLoss.MARGIN,
            init=AttackInit.CENTER,
            domain_clip=None,
            seed=cfg.seed,
        )

    def _search(self, lower: Tensor, upper: Tensor, labels: Tensor, generator: torch.Generator):
        """Best concrete point per node: the center, then PGD inside the node."""
        center = (lower + upper) / 2
        if self.cfg.attack_steps == 0:
            margin, mis = concrete_margin(self.net, center, labels)
            return center, margin, mis
        x, _, _ = box_attack(self.net, lower, upper, labels, self.attack_cfg, generator, start=center)
        margin, mis = concrete_margin(self.net, x, labels)
        return x, margin, mis

    def verify(
        self,
        x0: Tensor,
        y_true: int,
        epsilon: Scalar,
        domain: DomainClip = None,
    ) -> VerificationOutcome:
        """
        Decide (or, with ``optimality_gap`` set, solve) the worst-margin
        problem for one example over its epsilon-box.
        """
        cfg = self.cfg
        started = time.perf_counter()
        x0 = x0.reshape((1,) + self.net.input_shape).to(DTYPE)
        if not 0 <= int(y_true) < self.net.num_classes:
            raise VerificationError(f"class index {y_true} out of range")
        generator = torch.Generator(device="cpu")
        generator.manual_seed(cfg.seed)
        gap = cfg.optimality_gap

        root = input_box(x0, epsilon, domain)
        counter = itertools.count()
        one_label = torch.tensor([int(y_true)], dtype=torch.long)

        best_x = torch.minimum(torch.maximum(x0, root.lower), root.upper)
        best_margin_t, best_mis_t = concrete_margin(self.net, best_x, one_label)
        best_margin, best_mis = float(best_margin_t[0]), bool(best_mis_t[0])

        root_bound = float(_box_upper_bounds(self.net, root.lower, root.upper, one_label)[0])
        nodes_explored = 1
        closed_bound = -math.inf
        stuck_bound = -math.inf
        heap: List[_Node] = []

        def prunable(bound: float) -> bool:
            if gap is None:
                return bound <= -cfg.tolerance
            return bound <= best_margin + gap

        def close(bound: float) -> None:
            nonlocal closed_bound
            closed_bound = max(closed_bound, bound)

        if prunable(root_bound) or (gap is None and best_mis):
            close(root_bound)
        else:
            heapq.heappush(heap, _Node(-root_bound, next(counter), root.lower[0], root.upper[0]))

        while heap and not (gap is None and best_mis):
            if nodes_explored >= cfg.max_nodes or time.perf_counter() - started > cfg.time_budget:
                logger.info("BaB budget exhausted after %d nodes", nodes_explored)
                break
            batch: List[_Node] = []
            while heap and len(batch) < cfg.batch_nodes:
                node = heapq.heappop(heap)
                if prunable(node.upper_bound):
                    close(node.upper_bound)
                    continue
                batch.append(node)
            if not batch:
                break

            lower = torch.stack([n.lower for n in batch])
            upper = torch.stack([n.upper for n in batch])
            labels = one_label.expand(len(batch))
            xs, margins, mis = self._search(lower, upper, labels, generator)
            for i in range(len(batch)):
                margin = float(margins[i])
                # misclassified points first, then larger margins; earlier nodes win ties
                if (bool(mis[i]) and not best_mis) or (bool(mis[i]) == best_mis and margin > best_margin):
                    best_x, best_margin, best_mis = xs[i:i + 1], margin, bool(mis[i])
            if gap is None and best_mis:
                heap.extend(batch)
                break

            child_lower, child_upper = [], []
            for node in batch:
                width = (node.upper - node.lower).reshape(-1)
                dim = int(torch.argmax(width))
                if float(width[dim]) < cfg.min_box_width:
                    stuck_bound = max(stuck_bound, node.upper_bound)
                    continue
                middle = (node.lower.reshape(-1)[dim] + node.upper.reshape(-1)[dim]) / 2
                left_upper = node.upper.clone()
                left_upper.reshape(-1)[dim] = middle
                right_lower = node.lower.clone()
                right_lower.reshape(-1)[dim] = middle
                child_lower += [node.lower, right_lower]
                child_upper += [left_upper, node.upper]
            if not child_lower:
                continue

            bounds = _box_upper_bounds(
                self.net, torch.stack(child_lower), torch.stack(child_upper), one_label.expand(len(child_lower))
            )
            nodes_explored += len(child_lower)
            for lo, hi, bound in zip(child_lower, child_upper, bounds.tolist()):
                if prunable(bound):
                    close(bound)
                else:
                    heapq.heappush(heap, _Node(-bound, next(counter), lo, hi))
            logger.debug("BaB: %d nodes explored, %d open, best margin %.6g", nodes_explored, len(heap), best_margin)

        open_bound = max((n.upper_bound for n in heap), default=-math.inf)
        global_bound = max(closed_bound, open_bound, stuck_bound)
        wall_time = time.perf_counter() - started

        # every leaf (closed, open or unsplittable) is bounded by global_bound
        if best_mis:
            status = VerificationStatus.FALSIFIED
        elif global_bound <= -cfg.tolerance:
            status = VerificationStatus.VERIFIED
        else:
            status = VerificationStatus.UNKNOWN

        counterexample = None
        counterexample_class = None
        if status == VerificationStatus.FALSIFIED:
            self._replay(best_x, x0, epsilon, domain, int(y_true))
            counterexample = best_x.reshape(-1).tolist()
            with torch.no_grad():
                counterexample_class = int(self.net(best_x).argmax(dim=1)[0])

        logger.debug("BaB finished: %s after %d nodes in %.3fs", status.value, nodes_explored, wall_time)
        return VerificationOutcome(
            status=status,
            provenance=Provenance.BAB,
            best_upper_bound=global_bound,
            best_lower_bound=best_margin,
            nodes_explored=nodes_explored,
            wall_time=wall_time,
            counterexample=counterexample,
            counterexample_class=counterexample_class,
        )

    def _replay(self, x: Tensor, x0: Tensor, epsilon: Scalar, domain: DomainClip, y_true: int) -> None:
        """A counterexample must lie in the box and misclassify under a plain forward pass."""
        box = input_box(x0, epsilon, domain)
        if not bool(box.contains(x, tol=1e-12).all()):
            raise VerificationError("counterexample left the input box")
        with torch.no_grad():
            if int(self.net(x).argmax(dim=1)[0]) == y_true:
                raise VerificationError("counterexample does not replay as a misclassification")


def bab_verify(
    net: Network,
    x0: Tensor,
    y_true: int,
    epsilon: Scalar,
    cfg: BabConfig,
    domain: DomainClip = None,
) -> VerificationOutcome:
    return BranchAndBound(net, cfg).verify(x0, y_true, epsilon, domain)


def verified_error(
    net: Network,
    dataset: Dataset,
    epsilon: Scalar,
    attack_cfg: AttackConfig,
    bab_cfg: BabConfig,
    domain: DomainClip = None,
    reported_epsilon: Optional[float] = None,
) -> Tuple[ErrorRates, List[VerificationRecord]]:
    """
    Nominal, PGD, branch-and-bound and IBP error rates on ``dataset``.

    Each example goes through nominal check, IBP, PGD and finally branch
    and bound, stopping at the first conclusive answer; an unknown
    outcome counts as an error.
    """
    if len(dataset) == 0:
        raise ValueError("verified_error needs a non-empty dataset")
    x, y = dataset.inputs, dataset.labels
    count = len(dataset)

    with torch.no_grad():
        nominal_margin, nominal_wrong = concrete_margin(net, x, y)
    verified_ibp, margins = ibp_verified(net, x, y, epsilon, True, bab_cfg.tolerance, domain)
    ibp_margin = max_violation(margins, y)

    pending = (~nominal_wrong & ~verified_ibp).nonzero().reshape(-1)
    pgd_success = torch.zeros(count, dtype=torch.bool)
    pgd_margin = nominal_margin.clone()
    if pending.numel():
        result = PGDAttack(net, attack_cfg).attack(x[pending], y[pending], epsilon=epsilon, domain=domain)
        pgd_success[pending] = result.success
        adv_margin, _ = concrete_margin(net, result.x_adv, y[pending])
        pgd_margin[pending] = adv_margin

    verifier: Optional[BranchAndBound] = None
    records: List[VerificationRecord] = []
    bab_verified = verified_ibp.clone()
    for i in range(count):
        started = time.perf_counter()
        if bool(nominal_wrong[i]):
            status, provenance = VerificationStatus.FALSIFIED, Provenance.NOMINAL
            upper, lower, nodes = float(ibp_margin[i]), float(nominal_margin[i]), 0
        elif bool(verified_ibp[i]):
            status, provenance = VerificationStatus.VERIFIED, Provenance.IBP
            upper, lower, nodes = float(ibp_margin[i]), float(nominal_margin[i]), 1
        elif bool(pgd_success[i]):
            status, provenance = VerificationStatus.FALSIFIED, Provenance.PGD
            upper, lower, nodes = float(ibp_margin[i]), float(pgd_margin[i]), 0
        else:
            verifier = verifier or BranchAndBound(net, bab_cfg)
            outcome = verifier.verify(x[i], int(y[i]), epsilon, domain)
            status, provenance = outcome.status, Provenance.BAB
            upper, lower, nodes = outcome.best_upper_bound, outcome.best_lower_bound, outcome.nodes_explored
            bab_verified[i] = outcome.is_verified
        records.append(
            VerificationRecord(
                index=i,
                status=status,
                provenance=provenance,
                ibp_margin=float(ibp_margin[i]),
                bab_upper=upper,
                bab_lower=lower,
                nodes=nodes,
                time_ms=(time.perf_counter() - started) * 1000.0,
            )
        )

    nominal_err = int(nominal_wrong.sum()) / count
    pgd_rate = int((nominal_wrong | pgd_success).sum()) / count
    bab_rate = int((~bab_verified).sum()) / count
    ibp_rate = int((~verified_ibp).sum()) / count
    eps_value = reported_epsilon if reported_epsilon is not None else float(torch.as_tensor(epsilon).max())
    rates = ErrorRates(
        epsilon=eps_value,
        count=count,
        nominal_err=nominal_err,
        pgd_rate=pgd_rate,
        bab_rate=bab_rate,
        ibp_rate=ibp_rate,
    )
    logger.info(
        "eps=%g over %d examples: nominal %.4f, pgd %.4f, bab %.4f, ibp %.4f",
        eps_value, count, nominal_err, pgd_rate, bab_rate, ibp_rate,
    )
    return rates, records


@dataclass
class PolytopeSample:
    """Sampled activations of one layer and that layer's IBP box, both projected to 2-D"""

    points: Tensor
    lower: Tensor
    upper: Tensor
    layer: int

    @property
    def area(self) -> float:
        return float((self.upper - self.lower).prod())

    @property
    def points_outside(self) -> int:
        inside = (self.points >= self.lower - 1e-12) & (self.points <= self.upper + 1e-12)
        return int((~inside.all(dim=1)).sum())


def _grid_inputs(box: IntervalBounds, samples_per_axis: int, rng: Rng) -> Tensor:
    """A regular grid over 2-D input boxes; seeded uniform samples in higher dimensions."""
    lower, upper = box.lower[0], box.upper[0]
    if lower.numel() == 2:
        ticks = [torch.linspace(0.0, 1.0, samples_per_axis, dtype=DTYPE)] * 2
        u, v = torch.meshgrid(*ticks, indexing="ij")
        fractions = torch.stack([u.reshape(-1), v.reshape(-1)], dim=1).reshape((-1,) + tuple(lower.shape))
    else:
        fractions = rng.uniform((samples_per_axis ** 2,) + tuple(lower.shape))
    return lower + (upper - lower) * fractions


def polytope_sample(
    net: Network,
    x0: Tensor,
    epsilon: Scalar,
    samples_per_axis: int = 101,
    layer_index: int = -1,
    projection: Optional[Sequence[int]] = None,
    domain: DomainClip = None,
    seed: int = 0,
) -> PolytopeSample:
    """
    Map a dense sample of the epsilon-box through the network and pair the
    chosen layer's activations with its IBP box.
    """
    x0 = x0.reshape((1,) + net.input_shape).to(DTYPE)
    box = input_box(x0, epsilon, domain)
    index = layer_index % len(net.layers)
    inputs = _grid_inputs(box, samples_per_axis, Rng(seed))
    with torch.no_grad():
        activations = net.layer_outputs(inputs)[index].reshape(inputs.shape[0], -1)
        layer_box = propagate(net, box)[index]
    lower, upper = layer_box.lower.reshape(-1), layer_box.upper.reshape(-1)

    if projection is None:
        if activations.shape[1] != 2:
            raise VerificationError(
                f"layer {index} has {activations.shape[1]} outputs; choose a 2-D projection"
            )
        projection = (0, 1)
    coords = torch.tensor(list(projection), dtype=torch.long)
    if coords.numel() != 2 or bool((coords >= activations.shape[1]).any()) or bool((coords < 0).any()):
        raise VerificationError(f"projection {tuple(projection)} invalid for {activations.shape[1]} outputs")
    return PolytopeSample(points=activations[:, coords], lower=lower[coords], upper=upper[coords], layer=index)


def pgd_gap_hunt(
    net: Network,
    dataset: Dataset,
    epsilon: Scalar,
    attack_cfg: AttackConfig,
    bab_cfg: BabConfig,
    domain: DomainClip = None,
) -> List[HuntFinding]:
    """Correctly classified examples where PGD fails but branch and bound finds a counterexample."""
    x, y = dataset.inputs, dataset.labels
    with torch.no_grad():
        nominal_wrong = misclassified(net(x), y)
    result = PGDAttack(net, attack_cfg).attack(x, y, epsilon=epsilon, domain=domain)
    verifier = BranchAndBound(net, bab_cfg)

    findings: List[HuntFinding] = []
    for i in range(len(dataset)):
        if bool(nominal_wrong[i]) or bool(result.success[i]):
            continue
        outcome = verifier.verify(x[i], int(y[i]), epsilon, domain)
        if outcome.status != VerificationStatus.FALSIFIED:
            continue
        counterexample = torch.tensor(outcome.counterexample, dtype=DTYPE).reshape((1,) + net.input_shape)
        margin, mis = concrete_margin(net, counterexample, y[i:i + 1])
        if not bool(mis[0]):
            raise VerificationError(f"counterexample for example {i} does not replay")
        findings.append(
            HuntFinding(
                index=i,
                label=int(y[i]),
                pgd=AttackRecord(
                    index=i,
                    success=False,
                    loss=float(result.loss[i]),
                    linf_distance=float(result.linf_distance[i]),
                ),
                pgd_point=result.x_adv[i].reshape(-1).tolist(),
                counterexample=outcome.counterexample,
                counterexample_class=outcome.counterexample_class,
                counterexample_margin=float(margin[0]),
                linf_distance=float((counterexample - x[i:i + 1]).abs().max()),
            )
        )
        logger.info("Example %d: PGD failed, branch and bound found class %d", i, outcome.counterexample_class)
    return findings


def loss_landscape(
    net: Network,
    x0: Tensor,
    y_true: int,
    x_pgd: Tensor,
    x_bab: Tensor,
    points_per_axis: int = 21,
) -> List[Tuple[float, float, float]]:
    """Cross-entropy over ``x0 + u (x_pgd - x0) + v (x_bab - x0)`` for ``u, v`` in [0, 1]."""
    shape = (1,) + net.input_shape
    x0, x_pgd, x_bab = (t.reshape(shape).to(DTYPE) for t in (x0, x_pgd, x_bab))
    ticks = torch.linspace(0.0, 1.0, points_per_axis, dtype=DTYPE)
    u, v = torch.meshgrid(ticks, ticks, indexing="ij")
    u, v = u.reshape(-1), v.reshape(-1)
    expand = (-1,) + (1,) * len(net.input_shape)
    inputs = x0 + u.reshape(expand) * (x_pgd - x0) + v.reshape(expand) * (x_bab - x0)
    labels = torch.full((inputs.shape[0],), int(y_true), dtype=torch.long)
    with torch.no_grad():
        losses = F.cross_entropy(net(inputs), labels, reduction="none")
    return list(zip(u.tolist(), v.tolist(), losses.tolist()))
