"""
Attack Service

Untargeted projected gradient attacks in an l-infinity ball (or any
axis-aligned box), used for empirical robustness, adversarial training
and counterexample search inside the verifier.
"""

import logging
from dataclasses import dataclass
from typing import List, Optional, Tuple, Union

import torch
import torch.nn.functional as F

from models.config_models import AttackConfig, AttackInit, AttackLoss, StepRule
from models.result_models import AttackRecord
from services.data import Dataset
from services.network import Network
from services.tensor import DTYPE, Tensor

logger = logging.getLogger(__name__)

Radius = Union[float, Tensor]


@dataclass
class AttackResult:
    """Best iterate per example and how it fared"""

    x_adv: Tensor
    success: Tensor
    loss: Tensor
    linf_distance: Tensor


def attack_loss(logits: Tensor, labels: Tensor, loss: AttackLoss) -> Tensor:
    """Per-example objective the attack ascends."""
    if loss == AttackLoss.CROSS_ENTROPY:
        return F.cross_entropy(logits, labels, reduction="none")
    true_logit = logits.gather(1, labels.unsqueeze(1)).squeeze(1)
    others = logits.scatter(1, labels.unsqueeze(1), float("-inf"))
    return others.max(dim=1).values - true_logit


def misclassified(logits: Tensor, labels: Tensor) -> Tensor:
    return logits.argmax(dim=1) != labels


def attack_box(
    x0: Tensor,
    epsilon: Radius,
    domain: Optional[Tuple[Radius, Radius]],
) -> Tuple[Tensor, Tensor]:
    """The feasible set of the attack: the epsilon-ball intersected with the domain."""
    eps = torch.as_tensor(epsilon, dtype=DTYPE)
    lower, upper = x0 - eps, x0 + eps
    if domain is not None:
        lower = torch.maximum(lower, torch.as_tensor(domain[0], dtype=DTYPE).expand_as(lower))
        upper = torch.minimum(upper, torch.as_tensor(domain[1], dtype=DTYPE).expand_as(upper))
    return lower, torch.maximum(upper, lower)


def box_attack(
    net: Network,
    lower: Tensor,
    upper: Tensor,
    labels: Tensor,
    cfg: AttackConfig,
    generator: torch.Generator,
    step_size: Optional[Radius] = None,
    start: Optional[Tensor] = None,
) -> Tuple[Tensor, Tensor, Tensor]:
    """
    Projected gradient ascent restricted to ``[lower, upper]``.

    Returns the best visited point per example together with its loss and
    whether it is misclassified. A misclassified iterate beats any
    correctly classified one; otherwise the higher loss wins, and earlier
    iterates (lower restart index) win ties.

    Args:
        start: Starting point of restart 0; later restarts start uniformly
        step_size: Signed-step size, scalar or per coordinate; defaults to
            the box width divided by the number of steps
    """
    if step_size is None:
        step_size = (upper - lower) / cfg.steps

    best_x = lower.clone()
    best_loss = torch.full((lower.shape[0],), float("-inf"), dtype=DTYPE)
    best_mis = torch.zeros(lower.shape[0], dtype=torch.bool)

    def consider(x: Tensor) -> None:
        nonlocal best_x, best_loss, best_mis
        with torch.no_grad():
            logits = net(x)
            loss = attack_loss(logits, labels, cfg.loss)
            mis = misclassified(logits, labels)
            better = (mis & ~best_mis) | ((mis == best_mis) & (loss > best_loss))
            best_x = torch.where(better.reshape((-1,) + (1,) * (x.dim() - 1)), x, best_x)
            best_loss = torch.where(better, loss, best_loss)
            best_mis = best_mis | mis

    for restart in range(cfg.restarts):
        if restart == 0 and start is not None:
            x = torch.minimum(torch.maximum(start, lower), upper)
        else:
            noise = torch.rand(lower.shape, generator=generator, dtype=DTYPE)
            x = lower + (upper - lower) * noise
        x = x.detach().requires_grad_(True)
        consider(x.detach())

        optimizer = torch.optim.Adam([x], lr=cfg.adam_lr, maximize=True) if cfg.step_rule == StepRule.ADAM else None
        for _ in range(cfg.steps):
            with torch.enable_grad():
                loss = attack_loss(net(x), labels, cfg.loss).sum()
                grad, = torch.autograd.grad(loss, x)
            with torch.no_grad():
                if optimizer is None:
                    x.add_(step_size * grad.sign())
                else:
                    x.grad = grad
                    optimizer.step()
                x.copy_(torch.minimum(torch.maximum(x, lower), upper))
            consider(x.detach())

    return best_x.detach(), best_loss, best_mis


class PGDAttack:
    """PGD with restarts in the epsilon-ball around each input"""

    def __init__(self, net: Network, cfg: AttackConfig):
        self.net = net
        self.cfg = cfg
        self.generator = torch.Generator(device="cpu")
        self.generator.manual_seed(cfg.seed)

    def attack(
        self,
        x0: Tensor,
        y_true: Union[int, Tensor],
        init: Optional[Tensor] = None,
        epsilon: Optional[Radius] = None,
        domain: Optional[Tuple[Radius, Radius]] = None,
    ) -> AttackResult:
        """
        Attack a batch.

        Args:
            init: Starting point of the first restart (otherwise the
                configured init rule)
            epsilon: Radius in network units; defaults to ``cfg.epsilon``
            domain: Domain bounds in network units; defaults to ``cfg.domain_clip``
        """
        labels = torch.as_tensor(y_true, dtype=torch.long).reshape(-1).expand(x0.shape[0])
        eps = self.cfg.epsilon if epsilon is None else epsilon
        lower, upper = attack_box(x0, eps, self.cfg.domain_clip if domain is None else domain)

        step = self.cfg.step_size
        if step is None:
            step = 2 * torch.as_tensor(eps, dtype=DTYPE) / self.cfg.steps
        start = init
        if start is None and self.cfg.init == AttackInit.CENTER:
            start = x0

        x_adv, loss, _ = box_attack(self.net, lower, upper, labels, self.cfg, self.generator, step, start)
        with torch.no_grad():
            success = misclassified(self.net(x_adv), labels)
        linf = (x_adv - x0).abs().reshape(x0.shape[0], -1).max(dim=1).values
        return AttackResult(x_adv=x_adv, success=success, loss=loss, linf_distance=linf)


def pgd_attack(
    net: Network,
    x0: Tensor,
    y_true: Union[int, Tensor],
    cfg: AttackConfig,
    init: Optional[Tensor] = None,
) -> Tuple[Tensor, Tensor]:
    """``(x_adv, success)`` for a batch; success means the best iterate is misclassified."""
    result = PGDAttack(net, cfg).attack(x0, y_true, init=init)
    return result.x_adv, result.success


def empirical_error(
    net: Network,
    dataset: Dataset,
    cfg: AttackConfig,
    batch_size: int = 256,
    epsilon: Optional[Radius] = None,
    domain: Optional[Tuple[Radius, Radius]] = None,
) -> Tuple[float, List[AttackRecord]]:
    """
    Fraction of examples that are misclassified nominally or under attack,
    with one record per example.
    """
    if len(dataset) == 0:
        raise ValueError("empirical_error needs a non-empty dataset")
    attacker = PGDAttack(net, cfg)
    records: List[AttackRecord] = []
    errors = 0
    for start in range(0, len(dataset), batch_size):
        x = dataset.inputs[start:start + batch_size]
        y = dataset.labels[start:start + batch_size]
        with torch.no_grad():
            nominal_wrong = misclassified(net(x), y)
        result = attacker.attack(x, y, epsilon=epsilon, domain=domain)
        wrong = nominal_wrong | result.success
        errors += int(wrong.sum())
        for offset in range(x.shape[0]):
            records.append(
                AttackRecord(
                    index=start + offset,
                    success=bool(result.success[offset]),
                    loss=float(result.loss[offset]),
                    linf_distance=float(result.linf_distance[offset]),
                )
            )
    rate = errors / len(dataset)
    logger.info("PGD error over %d examples: %.4f", len(dataset), rate)
    return rate, records
