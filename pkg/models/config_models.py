"""Configuration models for training, attacks, verification and runs"""

from enum import Enum
from typing import List, Optional, Tuple

from pydantic import BaseModel, ConfigDict, Field, field_validator, model_validator


class StrictModel(BaseModel):
    """Base for every config: unknown keys are rejected"""

    model_config = ConfigDict(extra="forbid", validate_assignment=True)


class Method(str, Enum):
    """Training methods"""
    NOMINAL = "nominal"
    IBP = "ibp"
    PGD_ADVERSARIAL = "pgd_adversarial"


class LossVariant(str, Enum):
    """Specification loss used on the worst-case logits"""
    CROSS_ENTROPY = "cross_entropy"
    SOFTPLUS = "softplus"
    HINGE = "hinge"


class AttackLoss(str, Enum):
    """Objective maximized by PGD"""
    CROSS_ENTROPY = "cross_entropy_ascent"
    MARGIN = "margin"


class StepRule(str, Enum):
    """How PGD turns a gradient into a step"""
    SIGNED = "signed"
    ADAM = "adam"


class AttackInit(str, Enum):
    """Starting point of each restart"""
    UNIFORM = "uniform"
    CENTER = "center"


class ScheduleConfig(StrictModel):
    """kappa / epsilon curricula and the step-decayed learning rate"""

    total_steps: int = Field(..., ge=1, description="Number of optimizer steps")
    warmup_steps: int = Field(default=0, ge=0, description="Steps at kappa=1, epsilon=0")
    rampup_steps: int = Field(default=0, ge=0, description="Steps of linear ramp after warmup")
    kappa_final: float = Field(default=0.5, ge=0.0, le=1.0)
    epsilon_train: float = Field(default=0.0, ge=0.0, description="Target training radius")
    epsilon_multiplier: float = Field(
        default=1.0,
        gt=0.0,
        description="Scale applied to epsilon_train (1.1 reproduces the '10% higher' recipe)",
    )
    use_epsilon_schedule: bool = Field(
        default=True,
        description="Ablation switch: when false, epsilon is at its target from step 0",
    )
    lr_initial: float = Field(default=1e-3, gt=0.0)
    lr_decay_steps: List[int] = Field(default_factory=list)
    lr_decay_factor: float = Field(default=0.1, gt=0.0)

    @field_validator("lr_decay_steps")
    @classmethod
    def validate_decay_steps(cls, v):
        if any(b <= a for a, b in zip(v, v[1:])):
            raise ValueError("lr_decay_steps must be strictly increasing")
        return v

    @model_validator(mode="after")
    def validate_durations(self):
        if self.warmup_steps + self.rampup_steps > self.total_steps:
            raise ValueError("warmup_steps + rampup_steps exceeds total_steps")
        return self

    @property
    def target_epsilon(self) -> float:
        return self.epsilon_train * self.epsilon_multiplier

    @classmethod
    def mnist(cls, epsilon_train: float, scale: float = 1.0, **overrides) -> "ScheduleConfig":
        """
        The MNIST recipe: 60K steps, warm-up 2K, ramp-up 10K, lr decays at
        15K and 25K. ``scale`` shrinks every duration proportionally.
        """
        values = dict(
            total_steps=max(1, int(round(60000 * scale))),
            warmup_steps=int(round(2000 * scale)),
            rampup_steps=int(round(10000 * scale)),
            lr_decay_steps=[int(round(15000 * scale)), int(round(25000 * scale))],
            epsilon_train=epsilon_train,
        )
        values.update(overrides)
        return cls(**values)


class SchedulePoint(BaseModel):
    """Curriculum values at one training step"""

    step: int
    kappa: float
    epsilon: float
    learning_rate: float


class AttackConfig(StrictModel):
    """Projected gradient attack settings"""

    epsilon: float = Field(default=0.1, ge=0.0)
    steps: int = Field(default=200, ge=1)
    restarts: int = Field(default=10, ge=1)
    step_rule: StepRule = StepRule.SIGNED
    step_size: Optional[float] = Field(
        default=None,
        gt=0.0,
        description="Signed-step size; defaults to 2*epsilon/steps",
    )
    adam_lr: float = Field(default=0.1, gt=0.0, description="Learning rate of the Adam step rule")
    loss: AttackLoss = AttackLoss.CROSS_ENTROPY
    init: AttackInit = AttackInit.UNIFORM
    domain_clip: Optional[Tuple[float, float]] = (0.0, 1.0)
    seed: int = Field(default=0, ge=0)

    @classmethod
    def evaluation(cls, epsilon: float, **overrides) -> "AttackConfig":
        """200 untargeted signed steps, 10 random restarts."""
        return cls(epsilon=epsilon, **overrides)

    @classmethod
    def training(cls, epsilon: float, **overrides) -> "AttackConfig":
        """Inner maximization of adversarial training: 7 Adam steps at lr 0.1."""
        values = dict(epsilon=epsilon, steps=7, restarts=1, step_rule=StepRule.ADAM, adam_lr=0.1)
        values.update(overrides)
        return cls(**values)


class BabConfig(StrictModel):
    """Budgets and tolerances of the input-splitting verifier"""

    max_nodes: int = Field(default=20000, ge=1)
    time_budget: float = Field(default=60.0, gt=0.0, description="Wall-clock seconds per example")
    min_box_width: float = Field(default=1e-4, gt=0.0, description="Boxes narrower than this are not split")
    tolerance: float = Field(default=1e-6, gt=0.0, description="A bound <= -tolerance proves a specification")
    split_rule: str = Field(default="widest", pattern="^widest$")
    batch_nodes: int = Field(default=32, ge=1, description="Nodes bounded per batch")
    attack_steps: int = Field(default=10, ge=0, description="PGD steps inside each sub-box (0 = center only)")
    attack_restarts: int = Field(default=1, ge=1)
    optimality_gap: Optional[float] = Field(
        default=None,
        gt=0.0,
        description="When set, refine until upper and lower margin bounds are this close",
    )
    seed: int = Field(default=0, ge=0)


class TrainConfig(StrictModel):
    """Everything the training loop needs"""

    method: Method = Method.IBP
    loss_variant: LossVariant = LossVariant.CROSS_ENTROPY
    use_elision: bool = True
    batch_size: int = Field(default=100, ge=1)
    seed: int = Field(default=0, ge=0)
    schedule: ScheduleConfig
    eval_epsilon: Optional[float] = Field(
        default=None,
        ge=0.0,
        description="Radius for the logged IBP verified error; defaults to epsilon_train",
    )
    eval_slice: int = Field(default=1000, ge=1, description="Examples in the held-out evaluation slice")
    log_every: int = Field(default=100, ge=1)
    checkpoint_steps: List[int] = Field(default_factory=lambda: [0, 200, 800])
    clip_inputs: bool = Field(default=True, description="Clip training boxes to the data domain")
    hinge_margin: float = Field(default=1.0, gt=0.0)
    adam_beta1: float = Field(default=0.9, ge=0.0, lt=1.0)
    adam_beta2: float = Field(default=0.999, ge=0.0, lt=1.0)
    adam_eps: float = Field(default=1e-8, gt=0.0)
    divergence_threshold: float = Field(default=1e6, gt=0.0)
    attack: Optional[AttackConfig] = Field(
        default=None,
        description="Inner attack for pgd_adversarial; defaults to the 7-step Adam preset",
    )

    @model_validator(mode="after")
    def validate_method(self):
        if self.method == Method.IBP and self.schedule.target_epsilon <= 0:
            raise ValueError("ibp training requires epsilon_train > 0")
        return self

    @property
    def evaluation_epsilon(self) -> float:
        return self.schedule.target_epsilon if self.eval_epsilon is None else self.eval_epsilon


class ToySpec(StrictModel):
    """The 2-D toy problem: separated points in the unit square"""

    point_count: int = Field(default=13, ge=2)
    positive_count: int = Field(default=5, ge=0)
    min_pairwise_linf: float = Field(default=0.08, ge=0.0)
    min_cross_class_linf: float = Field(
        default=0.16,
        ge=0.0,
        description="Separation between opposite classes; 2*epsilon keeps every epsilon-box certifiable",
    )
    domain: Tuple[float, float] = (0.0, 1.0)
    seed: int = Field(default=0, ge=0)
    max_attempts: int = Field(default=100000, ge=1, description="Rejection-sampling budget")

    @model_validator(mode="after")
    def validate_counts(self):
        if self.positive_count > self.point_count:
            raise ValueError("positive_count exceeds point_count")
        if self.domain[0] >= self.domain[1]:
            raise ValueError("empty toy domain")
        return self


class PolytopeConfig(StrictModel):
    """Dense sampling of one layer's reachable set"""

    samples_per_axis: int = Field(default=101, ge=1)
    layer_index: int = Field(default=-1, description="Layer whose outputs are sampled; -1 = logits")
    projection: Optional[Tuple[int, int]] = Field(
        default=None,
        description="Coordinates plotted when the layer is not 2-dimensional",
    )
    example_index: Optional[int] = Field(
        default=None,
        ge=0,
        description="Dataset example to sample around; defaults to the first positive example",
    )


class Subcommand(str, Enum):
    TRAIN = "train"
    EVAL = "eval"
    ATTACK = "attack"
    VERIFY = "verify"
    TIGHTNESS = "tightness"
    POLYTOPE = "polytope"
    HUNT = "hunt"
    EXPORT = "export"
    ABLATION = "ablation"


class RunConfig(StrictModel):
    """One CLI invocation after merging the config file and flags"""

    subcommand: Subcommand
    dataset: str = Field(default="toy", description="'toy' or 'idx:DIR' with the MNIST IDX files")
    toy: ToySpec = Field(default_factory=ToySpec)
    arch: str = Field(default="toy", description="Architecture string or preset name")
    train: Optional[TrainConfig] = None
    attack: Optional[AttackConfig] = None
    bab: BabConfig = Field(default_factory=BabConfig)
    polytope: PolytopeConfig = Field(default_factory=PolytopeConfig)
    out: str = "runs/latest"
    seed: int = Field(default=0, ge=0, lt=2**64)
    epsilon: float = Field(default=0.08, ge=0.0, description="Evaluation radius in pixel units")
    epsilons: List[float] = Field(default_factory=list, description="Radii for the tightness sweep")
    checkpoint: Optional[str] = Field(default=None, description="Model manifest to evaluate or export")
    checkpoints: List[str] = Field(default_factory=list, description="Manifests compared by polytope")
    resume: Optional[str] = None
    eval_split: str = Field(default="test", pattern="^(train|test)$")
    eval_limit: Optional[int] = Field(default=None, ge=1, description="Evaluate only the first N examples")
    normalize: bool = Field(default=False, description="Normalize inputs with training-split channel statistics")
    weights_csv: bool = False
    ablation_seeds: int = Field(default=10, ge=1)

    @field_validator("dataset")
    @classmethod
    def validate_dataset(cls, v):
        if v != "toy" and not v.startswith("idx:"):
            raise ValueError("dataset must be 'toy' or 'idx:PATH'")
        return v
