"""
Command-line entry point

    python cli.py train --dataset toy --arch toy --epsilon 0.08 --out runs/toy
    python cli.py verify --checkpoint runs/toy/model.json --out runs/toy-verify

Settings precedence: built-in defaults < ``--config`` JSON document <
flags. The merged configuration is written to ``<out>/effective_config.json``.
"""

import argparse
import json
import logging
import os
import sys
from typing import Any, Dict, List, Optional

from pydantic import ValidationError

from models.config_models import LossVariant, Method, RunConfig, Subcommand, TrainConfig
from models.result_models import ErrorReport
from services.runner import default_train_config, run
from utils.logging_config import configure_logging
from utils.settings import get_settings

logger = logging.getLogger(__name__)

METHOD_FLAGS = {"nominal": Method.NOMINAL, "ibp": Method.IBP, "pgd": Method.PGD_ADVERSARIAL}
LOSS_FLAGS = {"xent": LossVariant.CROSS_ENTROPY, "softplus": LossVariant.SOFTPLUS, "hinge": LossVariant.HINGE}
TRAINING_SUBCOMMANDS = (Subcommand.TRAIN, Subcommand.ABLATION)

EXIT_FAILURE = 1
EXIT_INVALID = 2
EXIT_RUNTIME = 3


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="ibpcert",
        description="Train, attack and certify classifiers against l-infinity perturbations",
    )
    parser.add_argument("subcommand", choices=[s.value for s in Subcommand])
    parser.add_argument("--config", help="JSON document with RunConfig fields")
    parser.add_argument("--seed", type=int)
    parser.add_argument("--out", help="Output directory")
    parser.add_argument("--epsilon", type=float, help="Radius in pixel units (training target and evaluation)")
    parser.add_argument("--epsilons", type=float, nargs="+", help="Radii for the tightness sweep")
    parser.add_argument("--dataset", help="'toy' or 'idx:DIR'")
    parser.add_argument("--arch", help="Architecture string or preset (toy, small, medium, large)")
    parser.add_argument("--method", choices=sorted(METHOD_FLAGS))
    parser.add_argument("--loss", choices=sorted(LOSS_FLAGS))
    parser.add_argument("--no-elision", action="store_true", help="Bound the full logit box instead of folding the last layer")
    parser.add_argument("--no-eps-schedule", action="store_true", help="Train at the target epsilon from step 0")
    parser.add_argument("--steps", type=int, help="Total training steps")
    parser.add_argument("--checkpoint", help="Model manifest to evaluate or export")
    parser.add_argument("--checkpoints", nargs="+", help="Manifests compared by polytope")
    parser.add_argument("--resume", help="Checkpoint manifest to resume training from")
    parser.add_argument("--eval-split", choices=["train", "test"])
    parser.add_argument("--eval-limit", type=int, help="Evaluate only the first N examples")
    parser.add_argument("--normalize", action="store_true", help="Normalize inputs with training-split statistics")
    parser.add_argument("--weights-csv", action="store_true", help="export: also dump every parameter as CSV")
    parser.add_argument("--ablation-seeds", type=int)
    parser.add_argument("--log-level")
    parser.add_argument("--log-json", action="store_true")
    return parser


def _load_document(path: Optional[str]) -> Dict[str, Any]:
    if not path:
        return {}
    with open(path) as f:
        document = json.load(f)
    if not isinstance(document, dict):
        raise ValueError(f"{path} must hold a JSON object")
    return document


def merge_config(args: argparse.Namespace) -> RunConfig:
    """Config document first, then every flag that was given."""
    values = _load_document(args.config)
    values["subcommand"] = args.subcommand
    if "out" not in values and args.out is None:
        values["out"] = os.path.join(get_settings().default_out_dir, args.subcommand)

    simple = {
        "seed": args.seed,
        "out": args.out,
        "epsilon": args.epsilon,
        "epsilons": args.epsilons,
        "dataset": args.dataset,
        "arch": args.arch,
        "checkpoint": args.checkpoint,
        "checkpoints": args.checkpoints,
        "resume": args.resume,
        "eval_split": args.eval_split,
        "eval_limit": args.eval_limit,
        "ablation_seeds": args.ablation_seeds,
    }
    values.update({k: v for k, v in simple.items() if v is not None})
    if args.normalize:
        values["normalize"] = True
    if args.weights_csv:
        values["weights_csv"] = True

    cfg = RunConfig.model_validate(values)
    if cfg.subcommand in TRAINING_SUBCOMMANDS and not cfg.resume:
        cfg.train = _training_overrides(cfg, args)
    elif any([args.method, args.loss, args.no_elision, args.no_eps_schedule, args.steps]):
        logger.warning("Training flags are ignored by %s", cfg.subcommand.value)
    return cfg


def _training_overrides(cfg: RunConfig, args: argparse.Namespace) -> TrainConfig:
    train = (cfg.train or default_train_config(cfg)).model_dump()
    schedule = train["schedule"]
    if args.seed is not None:
        train["seed"] = args.seed
    if args.epsilon is not None:
        schedule["epsilon_train"] = args.epsilon
    if args.method:
        train["method"] = METHOD_FLAGS[args.method]
    if args.loss:
        train["loss_variant"] = LOSS_FLAGS[args.loss]
    if args.no_elision:
        train["use_elision"] = False
    if args.no_eps_schedule:
        schedule["use_epsilon_schedule"] = False
    if args.steps is not None:
        schedule["total_steps"] = args.steps
        schedule["warmup_steps"] = min(schedule["warmup_steps"], args.steps)
        schedule["rampup_steps"] = min(schedule["rampup_steps"], args.steps - schedule["warmup_steps"])
    return TrainConfig.model_validate(train)


def _report_error(e: Exception, subcommand: Optional[str], out: Optional[str]) -> None:
    report = ErrorReport(error=type(e).__name__, message=str(e), subcommand=subcommand)
    line = report.model_dump_json()
    print(line)
    if out:
        try:
            os.makedirs(out, exist_ok=True)
            with open(os.path.join(out, "error.json"), "w") as f:
                f.write(line + "\n")
        except OSError:
            logger.exception("Could not write error.json to %s", out)


def exit_code_for(e: Exception) -> int:
    if isinstance(e, (ValueError, ValidationError, FileNotFoundError)):
        return EXIT_INVALID
    if isinstance(e, RuntimeError):
        return EXIT_RUNTIME
    return EXIT_FAILURE


def main(argv: Optional[List[str]] = None) -> int:
    args = build_parser().parse_args(argv)
    configure_logging(args.log_level, True if args.log_json else None)
    cfg: Optional[RunConfig] = None
    try:
        cfg = merge_config(args)
        return run(cfg)
    except Exception as e:
        logger.error("%s failed: %s", args.subcommand, e)
        out = cfg.out if cfg is not None else args.out
        _report_error(e, args.subcommand, out)
        return exit_code_for(e)


if __name__ == "__main__":
    sys.exit(main())
