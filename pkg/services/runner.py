"""
Run Orchestrator

Executes one subcommand for a validated RunConfig: loads data and
checkpoints, calls the engine services and writes the run's artifacts.
"""

import logging
import os
from dataclasses import dataclass
from typing import Callable, Dict, List, Optional, Tuple

import torch

from models.config_models import (
    AttackConfig,
    Method,
    RunConfig,
    ScheduleConfig,
    Subcommand,
    TrainConfig,
)
from models.manifest_models import NormalizationRecord
from models.result_models import PolytopeBox, TightnessReport
from services import data as data_service
from services.architecture import parse_architecture
from services.attack import empirical_error, misclassified
from services.data import Dataset
from services.network import Network, init_parameters
from services.reports import ReportWriter
from services.serialization import Checkpoint, export_weights_csv, load_checkpoint, save_checkpoint
from services.tensor import DTYPE, Rng, configure_determinism
from services.training import Adam, Trainer, ablation_study
from services.verify import loss_landscape, pgd_gap_hunt, polytope_sample, verified_error
from utils.settings import get_settings

logger = logging.getLogger(__name__)

# stream of the run seed reserved for weight initialization
INIT_STREAM = -1


@dataclass
class Datasets:
    """Training split and evaluation split of one run"""

    train: Dataset
    eval: Dataset
    domain: Tuple[float, float]


def load_datasets(cfg: RunConfig, normalization: Optional[NormalizationRecord] = None) -> Datasets:
    """
    The toy problem evaluates on its own training points; IDX data uses
    the configured split. Normalization statistics always come from the
    training split (or from a checkpoint that recorded them).
    """
    if cfg.dataset == "toy":
        toy = data_service.generate_toy(cfg.toy)
        train, evaluation, domain = toy, toy, cfg.toy.domain
    else:
        directory = cfg.dataset[len("idx:"):]
        train = data_service.load_mnist(directory, "train")
        evaluation = train if cfg.eval_split == "train" else data_service.load_mnist(directory, "test")
        domain = (0.0, 1.0)

    stats = None
    if normalization is not None and normalization.applied:
        stats = normalization
    elif cfg.normalize:
        stats = data_service.channel_stats(train)
    if stats is not None:
        train = data_service.normalize(train, stats)
        evaluation = data_service.normalize(evaluation, stats)
    return Datasets(train=train, eval=evaluation.take(cfg.eval_limit), domain=domain)


def network_units(ds: Dataset, epsilon: float, domain: Tuple[float, float], clip: bool = True):
    """Pixel-unit radius and data domain expressed for the network's inputs."""
    eps = data_service.normalized_epsilon(epsilon, ds.normalization, ds.inputs)
    box = data_service.domain_clip(ds.normalization, ds.inputs, domain) if clip else None
    return eps, box


def default_train_config(cfg: RunConfig) -> TrainConfig:
    """Toy runs train full-batch on a short schedule; IDX runs use the MNIST recipe at 1/10 scale."""
    if cfg.dataset == "toy":
        train_size = cfg.toy.point_count
        schedule = ScheduleConfig(
            total_steps=3000,
            warmup_steps=200,
            rampup_steps=1000,
            epsilon_train=cfg.epsilon,
            lr_decay_steps=[2000],
        )
        return TrainConfig(
            schedule=schedule,
            batch_size=train_size,
            seed=cfg.seed,
            eval_slice=train_size,
            log_every=100,
        )
    return TrainConfig(schedule=ScheduleConfig.mnist(cfg.epsilon, scale=0.1), seed=cfg.seed)


def build_network(cfg: RunConfig, ds: Dataset, seed: int) -> Network:
    net = parse_architecture(cfg.arch, ds.input_shape, ds.class_count)
    return init_parameters(net, Rng(seed).fork(INIT_STREAM))


def _checkpoint_training(train_cfg: TrainConfig, step: int) -> Dict[str, object]:
    return {"config": train_cfg.model_dump(mode="json"), "step": step, "seed": train_cfg.seed}


class Runner:
    """Runs subcommands; one instance per invocation"""

    def __init__(self, cfg: RunConfig):
        self.cfg = cfg
        self.writer = ReportWriter(cfg.out)
        self.handlers: Dict[Subcommand, Callable[[], None]] = {
            Subcommand.TRAIN: self.train,
            Subcommand.EVAL: self.evaluate,
            Subcommand.ATTACK: self.attack,
            Subcommand.VERIFY: self.verify,
            Subcommand.TIGHTNESS: self.tightness,
            Subcommand.POLYTOPE: self.polytope,
            Subcommand.HUNT: self.hunt,
            Subcommand.EXPORT: self.export,
            Subcommand.ABLATION: self.ablation,
        }

    def run(self) -> int:
        configure_determinism(get_settings().num_threads)
        self.writer.write_json("effective_config.json", self.cfg)
        self.writer.write_schemas()
        logger.info("Running %s into %s", self.cfg.subcommand.value, self.cfg.out)
        self.handlers[self.cfg.subcommand]()
        return 0

    # --- helpers -------------------------------------------------------

    def _write_manifests(self, data: Datasets) -> None:
        self.writer.write_json("dataset_train.json", data.train.manifest())
        self.writer.write_json("dataset_eval.json", data.eval.manifest())

    def _load_model(self, path: Optional[str] = None) -> Tuple[Checkpoint, Datasets]:
        path = path or self.cfg.checkpoint
        if not path:
            raise ValueError(f"{self.cfg.subcommand.value} needs --checkpoint")
        checkpoint = load_checkpoint(path)
        data = load_datasets(self.cfg, checkpoint.manifest.normalization)
        if data.eval.input_shape != checkpoint.network.input_shape:
            raise ValueError(f"checkpoint expects inputs {checkpoint.network.input_shape}, data has {data.eval.input_shape}")
        self._write_manifests(data)
        return checkpoint, data

    def _attack_config(self) -> AttackConfig:
        base = self.cfg.attack or AttackConfig.evaluation(self.cfg.epsilon, seed=self.cfg.seed)
        return base.model_copy(update={"epsilon": self.cfg.epsilon})

    def _units(self, checkpoint: Checkpoint, data: Datasets, epsilon: float):
        return network_units(data.eval, epsilon, data.domain, checkpoint.manifest.clip_inputs)

    # --- subcommands ---------------------------------------------------

    def train(self) -> None:
        cfg = self.cfg
        resumed: Optional[Checkpoint] = load_checkpoint(cfg.resume) if cfg.resume else None
        data = load_datasets(cfg, resumed.manifest.normalization if resumed else None)
        self._write_manifests(data)

        if resumed is not None:
            train_cfg = TrainConfig.model_validate(resumed.manifest.training["config"])
            net = resumed.network
            start_step = resumed.step
        else:
            train_cfg = cfg.train or default_train_config(cfg)
            net = build_network(cfg, data.train, train_cfg.seed)
            start_step = 0

        rng = Rng(train_cfg.seed)
        if resumed is not None and resumed.rng_state is not None:
            rng.set_state(resumed.rng_state)
        trainer = Trainer(net, train_cfg, rng, data.eval)
        if resumed is not None:
            trainer.optimizer.load_moments(resumed.moments)
        self.writer.write_json("train_config.json", train_cfg)

        def save(step: int, network: Network, optimizer: Adam, name: Optional[str] = None) -> None:
            save_checkpoint(
                network,
                self.writer.path(os.path.join("checkpoints", name or f"step_{step}.json")),
                normalization=data.train.normalization,
                clip_inputs=train_cfg.clip_inputs,
                training=_checkpoint_training(train_cfg, step),
                moments=optimizer.moments(),
                rng_state=rng.get_state(),
            )

        result = trainer.train(data.train, start_step=start_step, on_checkpoint=save)
        self.writer.write_jsonl("metrics.jsonl", result.metrics)
        save(result.steps_completed, net, result.optimizer, "final.json")
        save_checkpoint(
            net,
            self.writer.path("model.json"),
            normalization=data.train.normalization,
            clip_inputs=train_cfg.clip_inputs,
            training=_checkpoint_training(train_cfg, result.steps_completed),
            moments=result.optimizer.moments(),
            rng_state=rng.get_state(),
        )
        nominal_err, verified_err = trainer.evaluate(data.eval.take(train_cfg.eval_slice), train_cfg.evaluation_epsilon)
        self.writer.write_json(
            "train_summary.json",
            {
                "steps": result.steps_completed,
                "nominal_err": nominal_err,
                "ibp_verified_err": verified_err,
                "epsilon": train_cfg.evaluation_epsilon,
            },
        )

    def evaluate(self) -> None:
        checkpoint, data = self._load_model()
        with torch.no_grad():
            wrong = misclassified(checkpoint.network(data.eval.inputs), data.eval.labels)
        nominal_err = float(wrong.sum()) / len(data.eval)
        logger.info("Nominal error over %d examples: %.4f", len(data.eval), nominal_err)
        self.writer.write_json("eval.json", {"nominal_err": nominal_err, "count": len(data.eval)})

    def attack(self) -> None:
        checkpoint, data = self._load_model()
        attack_cfg = self._attack_config()
        eps, domain = self._units(checkpoint, data, attack_cfg.epsilon)
        rate, records = empirical_error(checkpoint.network, data.eval, attack_cfg, epsilon=eps, domain=domain)
        self.writer.write_jsonl("attack.jsonl", records)
        self.writer.write_json(
            "attack_summary.json", {"epsilon": attack_cfg.epsilon, "pgd_rate": rate, "count": len(data.eval)}
        )

    def verify(self) -> None:
        checkpoint, data = self._load_model()
        eps, domain = self._units(checkpoint, data, self.cfg.epsilon)
        rates, records = verified_error(
            checkpoint.network, data.eval, eps, self._attack_config(), self.cfg.bab, domain, self.cfg.epsilon
        )
        self.writer.write_jsonl("verify.jsonl", records)
        self.writer.write_json("summary.json", rates)

    def tightness(self) -> None:
        checkpoint, data = self._load_model()
        rows = []
        for epsilon in self.cfg.epsilons or [self.cfg.epsilon]:
            eps, domain = self._units(checkpoint, data, epsilon)
            attack_cfg = self._attack_config().model_copy(update={"epsilon": epsilon})
            rates, records = verified_error(
                checkpoint.network, data.eval, eps, attack_cfg, self.cfg.bab, domain, epsilon
            )
            self.writer.write_jsonl(f"verify_eps_{epsilon:g}.jsonl", records)
            rows.append(rates)
        report = TightnessReport(
            dataset=self.cfg.dataset,
            architecture=checkpoint.manifest.architecture or self.cfg.arch,
            rows=rows,
        )
        self.writer.write_json("tightness.json", report)
        self.writer.render("tightness.md.j2", "tightness.md", report=report)

    def polytope(self) -> None:
        paths: List[str] = self.cfg.checkpoints or ([self.cfg.checkpoint] if self.cfg.checkpoint else [])
        if not paths:
            raise ValueError("polytope needs --checkpoint or a checkpoints list")
        poly = self.cfg.polytope
        boxes = []
        for position, path in enumerate(paths):
            checkpoint, data = self._load_model(path)
            index = poly.example_index
            if index is None:
                positives = (data.eval.labels == 1).nonzero().reshape(-1)
                index = int(positives[0]) if positives.numel() else 0
            if index >= len(data.eval):
                raise ValueError(f"example index {index} out of range for {len(data.eval)} examples")
            eps, domain = self._units(checkpoint, data, self.cfg.epsilon)
            sample = polytope_sample(
                checkpoint.network,
                data.eval.inputs[index],
                eps,
                poly.samples_per_axis,
                poly.layer_index,
                poly.projection,
                domain,
                seed=self.cfg.seed,
            )
            name = os.path.splitext(os.path.basename(path))[0]
            self.writer.write_csv(
                f"polytope_{position}_{name}.csv",
                ["u", "v", "layer", "checkpoint"],
                ((float(u), float(v), sample.layer, name) for u, v in sample.points.tolist()),
            )
            box = PolytopeBox(
                checkpoint=name,
                layer=sample.layer,
                lower=sample.lower.tolist(),
                upper=sample.upper.tolist(),
                area=sample.area,
                points=int(sample.points.shape[0]),
                points_outside=sample.points_outside,
            )
            self.writer.write_json(f"polytope_{position}_{name}_box.json", box)
            boxes.append(box)
            logger.info("Checkpoint %s: IBP box area %.6g", name, box.area)
        self.writer.write_jsonl("polytope.jsonl", boxes)

    def hunt(self) -> None:
        checkpoint, data = self._load_model()
        net = checkpoint.network
        eps, domain = self._units(checkpoint, data, self.cfg.epsilon)
        findings = pgd_gap_hunt(net, data.eval, eps, self._attack_config(), self.cfg.bab, domain)
        self.writer.write_jsonl("hunt.jsonl", findings)
        for finding in findings:
            landscape = loss_landscape(
                net,
                data.eval.inputs[finding.index],
                finding.label,
                torch.tensor(finding.pgd_point, dtype=DTYPE),
                torch.tensor(finding.counterexample, dtype=DTYPE),
            )
            self.writer.write_csv(f"landscape_{finding.index}.csv", ["u", "v", "loss"], landscape)
        logger.info("Hunt found %d example(s) PGD missed", len(findings))

    def export(self) -> None:
        checkpoint, _ = self._load_model()
        save_checkpoint(
            checkpoint.network,
            self.writer.path("model.json"),
            normalization=checkpoint.manifest.normalization,
            clip_inputs=checkpoint.manifest.clip_inputs,
            training=checkpoint.manifest.training,
            moments=checkpoint.moments,
            rng_state=checkpoint.rng_state,
        )
        if self.cfg.weights_csv:
            paths = export_weights_csv(checkpoint.network, self.writer.path("weights"))
            logger.info("Exported %d weight tensors", len(paths))

    def ablation(self) -> None:
        cfg = self.cfg
        data = load_datasets(cfg)
        self._write_manifests(data)
        base = cfg.train or default_train_config(cfg)
        if base.method != Method.IBP:
            raise ValueError("the ablation compares IBP training variants; set method to ibp")

        def build(rng: Rng) -> Network:
            net = parse_architecture(cfg.arch, data.train.input_shape, data.train.class_count)
            return init_parameters(net, rng.fork(INIT_STREAM))

        rows = ablation_study(build, data.train, base, cfg.ablation_seeds, data.eval)
        self.writer.write_jsonl("ablation.jsonl", rows)
        self.writer.render(
            "ablation.md.j2", "ablation.md", rows=rows, seeds=cfg.ablation_seeds, epsilon=base.evaluation_epsilon
        )


def run(cfg: RunConfig) -> int:
    """Execute ``cfg`` and return the process exit code."""
    return Runner(cfg).run()
