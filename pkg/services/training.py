"""
Training Service

The robust training loss on worst-case logits, the kappa / epsilon
curricula, Adam with a step-decayed learning rate, and the training loop
for nominal, IBP and PGD adversarial training.
"""

import copy
import logging
import math
from dataclasses import dataclass, field
from typing import Callable, Dict, Iterator, List, Optional, Tuple

import numpy as np
import torch
import torch.nn.functional as F

from models.config_models import (
    AttackConfig,
    LossVariant,
    Method,
    ScheduleConfig,
    SchedulePoint,
    TrainConfig,
)
from models.result_models import AblationRow, MetricsRecord
from services import data as data_service
from services.attack import PGDAttack, misclassified
from services.bounds import worst_case_logits
from services.data import Dataset
from services.network import GradientTape, Network, backward
from services.tensor import Rng, Tensor
from services.verify import ibp_verified

logger = logging.getLogger(__name__)


class ScheduleError(ValueError):
    """Raised for steps outside the configured schedule"""


class DivergenceError(RuntimeError):
    """Raised when the training loss becomes non-finite or explodes"""


class NonFiniteGradientError(RuntimeError):
    """Raised when an optimizer receives a non-finite gradient"""


def schedule_at(cfg: ScheduleConfig, step: int) -> SchedulePoint:
    """
    Curriculum values at ``step``: kappa = 1 and epsilon = 0 through the
    warm-up, a linear ramp to (kappa_final, epsilon_train), then constant.
    The learning rate is multiplied by the decay factor once per decay
    step already reached.
    """
    if not 0 <= step <= cfg.total_steps:
        raise ScheduleError(f"step {step} outside [0, {cfg.total_steps}]")

    target = cfg.target_epsilon
    ramp_end = cfg.warmup_steps + cfg.rampup_steps
    if step <= cfg.warmup_steps:
        kappa, epsilon = 1.0, 0.0
    elif step < ramp_end:
        fraction = (step - cfg.warmup_steps) / cfg.rampup_steps
        kappa = 1.0 + fraction * (cfg.kappa_final - 1.0)
        epsilon = fraction * target
    else:
        kappa, epsilon = cfg.kappa_final, target

    if not cfg.use_epsilon_schedule:
        epsilon = target

    decays = sum(1 for s in cfg.lr_decay_steps if s <= step)
    learning_rate = cfg.lr_initial * cfg.lr_decay_factor ** decays
    return SchedulePoint(step=step, kappa=kappa, epsilon=epsilon, learning_rate=learning_rate)


def _margins(worst_logits: Tensor, labels: Tensor) -> Tuple[Tensor, Tensor]:
    """Margins z_y - z_ytrue and a mask selecting y != ytrue."""
    true_logit = worst_logits.gather(1, labels.unsqueeze(1))
    others = ~F.one_hot(labels, worst_logits.shape[1]).to(torch.bool)
    return worst_logits - true_logit, others


def specification_loss(
    worst_logits: Tensor,
    labels: Tensor,
    variant: LossVariant,
    hinge_margin: float = 1.0,
) -> Tensor:
    """Batch mean of the loss on the worst-case logits."""
    if variant == LossVariant.CROSS_ENTROPY:
        return F.cross_entropy(worst_logits, labels)
    margins, others = _margins(worst_logits, labels)
    if variant == LossVariant.SOFTPLUS:
        per_class = F.softplus(margins)
    else:
        per_class = torch.relu(margins + hinge_margin)
    per_example = (per_class * others).sum(dim=1) / others.sum(dim=1)
    return per_example.mean()


def ibp_loss(
    logits: Tensor,
    worst_logits: Tensor,
    y_true: Tensor,
    kappa: float,
    variant: LossVariant = LossVariant.CROSS_ENTROPY,
    hinge_margin: float = 1.0,
) -> Tensor:
    """``kappa * CE(logits) + (1 - kappa) * spec_loss(worst_logits)``, averaged over the batch."""
    if not 0.0 <= kappa <= 1.0:
        raise ValueError(f"kappa must lie in [0, 1], got {kappa}")
    labels = torch.as_tensor(y_true, dtype=torch.long).reshape(-1)
    if bool(((labels < 0) | (labels >= logits.shape[1])).any()):
        raise ValueError("class index out of range")
    fit = F.cross_entropy(logits, labels)
    if kappa == 1.0:
        return fit
    spec = specification_loss(worst_logits, labels, variant, hinge_margin)
    return kappa * fit + (1.0 - kappa) * spec


def robust_loss(
    net: Network,
    x: Tensor,
    labels: Tensor,
    epsilon,
    kappa: float,
    cfg: TrainConfig,
    domain=None,
) -> Tuple[Tensor, Tensor]:
    """
    The IBP training objective for one batch; returns ``(loss, logits)``.

    At epsilon = 0 the worst-case logits are the nominal logits, so with
    the cross-entropy variant the objective is computed as the plain
    cross-entropy.
    """
    logits = net(x)
    zero_radius = not bool(torch.as_tensor(epsilon).ne(0).any())
    if zero_radius and cfg.loss_variant == LossVariant.CROSS_ENTROPY:
        return F.cross_entropy(logits, labels), logits
    worst = worst_case_logits(net, x, epsilon, labels, cfg.use_elision, domain)
    return ibp_loss(logits, worst, labels, kappa, cfg.loss_variant, cfg.hinge_margin), logits


class Adam:
    """torch Adam driven by explicit gradient dictionaries and a per-step learning rate"""

    def __init__(
        self,
        params: Dict[str, Tensor],
        lr: float = 1e-3,
        beta1: float = 0.9,
        beta2: float = 0.999,
        eps: float = 1e-8,
    ):
        self.params = params
        self.optimizer = torch.optim.Adam(list(params.values()), lr=lr, betas=(beta1, beta2), eps=eps)

    def step(self, grads: Dict[str, Tensor], lr: float) -> None:
        for name, grad in grads.items():
            if not bool(torch.isfinite(grad).all()):
                raise NonFiniteGradientError(f"non-finite gradient for {name}")
        for group in self.optimizer.param_groups:
            group["lr"] = lr
        for name, param in self.params.items():
            param.grad = grads[name].detach().clone()
        self.optimizer.step()
        for param in self.params.values():
            param.grad = None

    def moments(self) -> Dict[str, Tuple[Tensor, Tensor, int]]:
        """(first moment, second moment, step count) per parameter, for checkpoints."""
        out = {}
        for name, param in self.params.items():
            state = self.optimizer.state.get(param)
            if state:
                out[name] = (state["exp_avg"], state["exp_avg_sq"], int(state["step"]))
        return out

    def load_moments(self, moments: Dict[str, Tuple[Tensor, Tensor, int]]) -> None:
        for name, (exp_avg, exp_avg_sq, step) in moments.items():
            param = self.params[name]
            self.optimizer.state[param] = {
                "step": torch.tensor(float(step)),
                "exp_avg": exp_avg.clone(),
                "exp_avg_sq": exp_avg_sq.clone(),
            }


def adam_step(optimizer: Adam, grads: Dict[str, Tensor], lr: float) -> Adam:
    """One Adam update (beta1 0.9, beta2 0.999, eps 1e-8 unless configured otherwise)."""
    optimizer.step(grads, lr)
    return optimizer


@dataclass
class TrainResult:
    """Trained network, ordered metrics and the optimizer state at the end"""

    network: Network
    metrics: List[MetricsRecord]
    steps_completed: int
    optimizer: Adam


CheckpointCallback = Callable[[int, Network, Adam], None]


def _batch_stream(dataset: Dataset, batch_size: int, rng: Rng, start_step: int) -> Iterator[Tuple[Tensor, Tensor]]:
    """
    Endless shuffled batches; the order of epoch ``e`` comes from
    ``rng.fork(e)``, so the stream can be re-entered at any step.
    """
    per_epoch = math.ceil(len(dataset) / batch_size)
    epoch, skip = divmod(start_step, per_epoch)
    while True:
        for index, batch in enumerate(dataset.batches(batch_size, rng.fork(epoch))):
            if index >= skip:
                yield batch
        skip = 0
        epoch += 1


class Trainer:
    """Runs one training configuration on one dataset"""

    def __init__(
        self,
        net: Network,
        cfg: TrainConfig,
        rng: Rng,
        eval_dataset: Optional[Dataset] = None,
    ):
        self.net = net
        self.cfg = cfg
        self.rng = rng
        self.eval_dataset = eval_dataset
        self.params = net.named_parameter_dict()
        self.optimizer = Adam(
            self.params,
            lr=cfg.schedule.lr_initial,
            beta1=cfg.adam_beta1,
            beta2=cfg.adam_beta2,
            eps=cfg.adam_eps,
        )

    def _units(self, dataset: Dataset, epsilon: float):
        """Radius and domain in network units."""
        record = dataset.normalization
        eps = data_service.normalized_epsilon(epsilon, record, dataset.inputs)
        domain = data_service.domain_clip(record, dataset.inputs) if self.cfg.clip_inputs else None
        return eps, domain

    def step_loss(self, x: Tensor, y: Tensor, point: SchedulePoint, dataset: Dataset) -> Tensor:
        eps, domain = self._units(dataset, point.epsilon)
        if self.cfg.method == Method.NOMINAL:
            return F.cross_entropy(self.net(x), y)
        if self.cfg.method == Method.IBP:
            loss, _ = robust_loss(self.net, x, y, eps, point.kappa, self.cfg, domain)
            return loss

        attack_cfg = (self.cfg.attack or AttackConfig.training(point.epsilon)).model_copy(
            update={"epsilon": point.epsilon, "seed": self.rng.fork(10**9 + point.step).seed}
        )
        x_adv = PGDAttack(self.net, attack_cfg).attack(x, y, epsilon=eps, domain=domain).x_adv
        return F.cross_entropy(self.net(x_adv), y)

    def evaluate(self, dataset: Dataset, epsilon: float) -> Tuple[float, float]:
        """(nominal error, IBP verified error) on the held-out slice."""
        eps, domain = self._units(dataset, epsilon)
        with torch.no_grad():
            nominal_wrong = misclassified(self.net(dataset.inputs), dataset.labels)
            verified, _ = ibp_verified(self.net, dataset.inputs, dataset.labels, eps, self.cfg.use_elision, domain=domain)
        count = len(dataset)
        return float(nominal_wrong.sum()) / count, float((~verified).sum()) / count

    def train(
        self,
        dataset: Dataset,
        start_step: int = 0,
        on_checkpoint: Optional[CheckpointCallback] = None,
    ) -> TrainResult:
        if len(dataset) == 0:
            raise ValueError("training needs a non-empty dataset")
        schedule = self.cfg.schedule
        eval_set = (self.eval_dataset or dataset).take(self.cfg.eval_slice)
        batches = _batch_stream(dataset, self.cfg.batch_size, self.rng, start_step)
        metrics: List[MetricsRecord] = []

        logger.info(
            "Training %s (%s loss, elision=%s) for %d steps from step %d",
            self.cfg.method.value, self.cfg.loss_variant.value, self.cfg.use_elision,
            schedule.total_steps, start_step,
        )
        if start_step == 0 and on_checkpoint and 0 in self.cfg.checkpoint_steps:
            on_checkpoint(0, self.net, self.optimizer)

        for step in range(start_step, schedule.total_steps):
            point = schedule_at(schedule, step)
            x, y = next(batches)
            with GradientTape(self.params) as tape:
                loss = self.step_loss(x, y, point, dataset)
            loss_value = float(loss.detach())
            if not math.isfinite(loss_value) or loss_value > self.cfg.divergence_threshold:
                raise DivergenceError(
                    f"loss {loss_value} at step {step} (epsilon={point.epsilon:g}, kappa={point.kappa:g})"
                )
            self.optimizer.step(backward(tape, loss), point.learning_rate)

            completed = step + 1
            if completed % self.cfg.log_every == 0 or completed == schedule.total_steps:
                nominal_err, verified_err = self.evaluate(eval_set, self.cfg.evaluation_epsilon)
                record = MetricsRecord(
                    step=completed,
                    kappa=point.kappa,
                    epsilon=point.epsilon,
                    lr=point.learning_rate,
                    loss=loss_value,
                    nominal_err=nominal_err,
                    ibp_verified_err=verified_err,
                )
                metrics.append(record)
                logger.info(
                    "step %d loss=%.5f nominal_err=%.4f ibp_verified_err=%.4f",
                    completed, loss_value, nominal_err, verified_err,
                )
            if on_checkpoint and completed in self.cfg.checkpoint_steps and completed != schedule.total_steps:
                on_checkpoint(completed, self.net, self.optimizer)

        return TrainResult(
            network=self.net,
            metrics=metrics,
            steps_completed=schedule.total_steps,
            optimizer=self.optimizer,
        )


def train(
    net: Network,
    dataset: Dataset,
    cfg: TrainConfig,
    rng: Rng,
    eval_dataset: Optional[Dataset] = None,
    on_checkpoint: Optional[CheckpointCallback] = None,
) -> TrainResult:
    """Train ``net`` in place from step 0."""
    return Trainer(net, cfg, rng, eval_dataset).train(dataset, on_checkpoint=on_checkpoint)


ABLATION_VARIANTS = [
    ("schedule+elision+xent", True, True, LossVariant.CROSS_ENTROPY),
    ("schedule+xent", True, False, LossVariant.CROSS_ENTROPY),
    ("schedule+elision+softplus", True, True, LossVariant.SOFTPLUS),
    ("schedule+softplus", True, False, LossVariant.SOFTPLUS),
    ("no-schedule+elision+xent", False, True, LossVariant.CROSS_ENTROPY),
]


def ablation_study(
    build_network: Callable[[Rng], Network],
    dataset: Dataset,
    base_cfg: TrainConfig,
    seeds: int,
    eval_dataset: Optional[Dataset] = None,
) -> List[AblationRow]:
    """
    Final IBP verified accuracy of each training variant over ``seeds``
    independent runs. Runs that diverge count with accuracy 0.
    """
    rows = []
    for name, use_schedule, use_elision, variant in ABLATION_VARIANTS:
        accuracies: List[float] = []
        diverged = 0
        for seed in range(seeds):
            schedule = base_cfg.schedule.model_copy(update={"use_epsilon_schedule": use_schedule})
            cfg = base_cfg.model_copy(
                update={
                    "seed": seed,
                    "use_elision": use_elision,
                    "loss_variant": variant,
                    "schedule": schedule,
                    "checkpoint_steps": [],
                }
            )
            rng = Rng(seed)
            net = build_network(rng)
            trainer = Trainer(net, cfg, rng, eval_dataset)
            try:
                trainer.train(dataset)
            except (DivergenceError, NonFiniteGradientError) as e:
                logger.warning("Ablation variant %s seed %d diverged: %s", name, seed, e)
                diverged += 1
                accuracies.append(0.0)
                continue
            evaluation = (eval_dataset or dataset).take(cfg.eval_slice)
            _, verified_err = trainer.evaluate(evaluation, cfg.evaluation_epsilon)
            accuracies.append(1.0 - verified_err)
        q25, median, q75 = (float(v) for v in np.percentile(accuracies, [25, 50, 75]))
        rows.append(
            AblationRow(
                variant=name,
                use_epsilon_schedule=use_schedule,
                use_elision=use_elision,
                loss_variant=variant.value,
                verified_accuracy=accuracies,
                diverged=diverged,
                median=median,
                q25=q25,
                q75=q75,
            )
        )
        logger.info("Ablation %s: median verified accuracy %.4f", name, median)
    return rows
