"""
Trans-PEFT Lab - Command line
נקודת הכניסה: תת-פקודה לכל שלב בניסוי
"""
import argparse
import asyncio
import logging
import sys
from pathlib import Path
from typing import Any, Dict, List, Optional

from config import config
from core.errors import ConfigError, TransPeftError
from core.experiment_file import load_experiment_config, parse_overrides
from core.models import Arm, ExperimentConfig, UpdatePair
from core.orchestrator import ExperimentOrchestrator, check_protocol, check_sweep
from storage.artifacts import ArtifactStore
from strategies.perturbation import MIN_DRAWS

logger = logging.getLogger(__name__)

# דגלים שנשמרים במניפסט ומשוחזרים ב---from-manifest
REPLAYED = ["m0", "m1", "pair", "base", "peft", "target", "strategies", "arms", "grid", "draws", "assert_"]


# ========== Parser ==========

def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", type=Path, help="experiment config file (dotted key = value lines)")
    common.add_argument("--set", dest="overrides", action="append", default=[], metavar="KEY=VALUE",
                        help="override one config key; repeatable, wins over --config")
    common.add_argument("--output", type=Path, help="output directory (default: TRANSPEFT_OUTPUT_ROOT)")
    common.add_argument("--jobs", type=int, default=None, help="worker processes for independent jobs")
    common.add_argument("--from-manifest", type=Path, help="re-run with the config and flags of a manifest")

    pair = argparse.ArgumentParser(add_help=False)
    pair.add_argument("--pair", type=Path, help="update_pair.json (default: <output>/update_pair.json)")
    pair.add_argument("--m0", type=Path, help="M0 checkpoint (with --m1, instead of --pair)")
    pair.add_argument("--m1", type=Path, help="M1 checkpoint (with --m0, instead of --pair)")

    parser = argparse.ArgumentParser(prog="transpeft", description="Transferable PEFT experiments at desk scale")
    sub = parser.add_subparsers(dest="command", required=True)

    sub.add_parser("pretrain", parents=[common], help="train M0 on the pretraining mixture")

    update = sub.add_parser("update", parents=[common], help="continual update M0 -> M1")
    update.add_argument("--m0", type=Path, help="M0 checkpoint (default: <output>/m0.ckpt)")

    finetune = sub.add_parser("finetune", parents=[common], help="fine-tune PEFT on one base per seed")
    finetune.add_argument("--base", type=Path, help="base checkpoint (default: <output>/m0.ckpt)")
    finetune.add_argument("--transpeft", dest="strategies", action="store_true",
                          help="train with the configured masking/dropping strategies")

    transfer = sub.add_parser("transfer-eval", parents=[common], help="evaluate a saved PEFT state on a target base")
    transfer.add_argument("--peft", type=Path, required=True)
    transfer.add_argument("--target", type=Path, required=True)

    protocol = sub.add_parser("protocol", parents=[common, pair], help="run the four-arm comparison")
    protocol.add_argument("--arms", default=",".join(a.value for a in Arm), help="comma-separated arm subset")
    protocol.add_argument("--assert", dest="assert_", action="store_true", help="fail (exit 5) unless the effect holds")

    sweep = sub.add_parser("sweep", parents=[common, pair], help="grid over strategy rates or sites")
    sweep.add_argument("--grid", choices=["p_c", "p_i", "site"], default="p_c")
    sweep.add_argument("--assert", dest="assert_", action="store_true", help="fail (exit 5) unless the grid shape holds")

    sub.add_parser("analyze", parents=[common, pair], help="activation similarity, layer influence, weight shift")

    bound = sub.add_parser("bound-report", parents=[common, pair], help="measured terms of the transfer bound")
    bound.add_argument("--draws", type=int, default=None, help="strategy draws per perturbation estimate (default 1000)")

    sub.add_parser("report", parents=[common], help="aggregate arm runs under the output directory")
    return parser


# ========== Settings ==========

def _replay(args: argparse.Namespace) -> Optional[ExperimentConfig]:
    """מילוי דגלים חסרים מתוך מניפסט קיים"""
    if args.from_manifest is None:
        return None
    manifest = ArtifactStore.load_manifest(args.from_manifest)
    if manifest.command != args.command:
        raise ConfigError(f"manifest is for {manifest.command!r}, not {args.command!r}")
    stored = manifest.data.get("arguments", {})
    for name in REPLAYED:
        if name in stored and getattr(args, name, None) in (None, False):
            value = stored[name]
            setattr(args, name, Path(value) if isinstance(value, str) and name not in ("arms", "grid") else value)
    logger.info(f"Replaying {args.from_manifest}")
    try:
        return ExperimentConfig.model_validate(manifest.config)
    except ValueError as e:
        raise ConfigError(f"manifest config is invalid: {e}") from e


def load_settings(args: argparse.Namespace) -> ExperimentConfig:
    overrides = parse_overrides(args.overrides)
    if args.output is not None:
        overrides["output_dir"] = str(args.output)

    replayed = _replay(args)
    if replayed is None:
        return load_experiment_config(args.config, overrides)
    if not overrides:
        return replayed
    data = replayed.model_dump(mode="json")
    for key, value in overrides.items():
        node = data
        *parents, leaf = key.split(".")
        for part in parents:
            node = node.setdefault(part, {})
        node[leaf] = value
    try:
        return ExperimentConfig.model_validate(data)
    except ValueError as e:
        raise ConfigError(f"invalid override on replayed config: {e}") from e


def invocation(args: argparse.Namespace) -> Dict[str, Any]:
    """ערכי הדגלים בצורה שניתנת לשמירה ב-JSON"""
    result = {}
    for name in REPLAYED:
        value = getattr(args, name, None)
        if value is None:
            continue
        result[name] = str(value) if isinstance(value, Path) else value
    return result


def parse_arms(text: str) -> List[Arm]:
    try:
        return [Arm(part.strip()) for part in text.split(",") if part.strip()]
    except ValueError as e:
        raise ConfigError(f"unknown arm in {text!r}; expected {[a.value for a in Arm]}") from e


# ========== Dispatch ==========

def _pair(orchestrator: ExperimentOrchestrator, args: argparse.Namespace) -> UpdatePair:
    if args.m0 is not None or args.m1 is not None:
        if args.m0 is None or args.m1 is None:
            raise ConfigError("--m0 and --m1 must be given together")
        return orchestrator.pair_from_checkpoints(args.m0, args.m1)
    return orchestrator.load_pair(args.pair)


async def dispatch(args: argparse.Namespace, orchestrator: ExperimentOrchestrator) -> None:
    command = args.command
    if command == "pretrain":
        path, fingerprint = await orchestrator.pretrain()
        logger.info(f"M0 written to {path} ({fingerprint[:12]})")
    elif command == "update":
        pair = await orchestrator.update(args.m0)
        logger.info(f"M1 written to {pair.m1_path}: ε_att={pair.epsilon_att:.4g}, ρ={pair.rho:.4g}")
    elif command == "finetune":
        results = await orchestrator.finetune(args.base, strategies=args.strategies)
        for result in results:
            logger.info(f"seed {result.seed}: accuracy {result.metrics['base'].accuracy:.4f}")
    elif command == "transfer-eval":
        result = await orchestrator.transfer_eval(args.peft, args.target)
        logger.info(f"transfer accuracy {result['metrics'].accuracy:.4f}")
    elif command == "protocol":
        result = await orchestrator.run_protocol(_pair(orchestrator, args), parse_arms(args.arms))
        if args.assert_:
            check_protocol(result)
            logger.info("Protocol acceptance checks passed")
    elif command == "sweep":
        if args.assert_ and args.grid == "p_i":
            raise ConfigError("the p_i grid has no acceptance rule; drop --assert")
        points = await orchestrator.sweep(_pair(orchestrator, args), args.grid)
        if args.assert_:
            check_sweep(args.grid, points)
            logger.info(f"Sweep {args.grid} acceptance checks passed")
    elif command == "analyze":
        await orchestrator.analyze(_pair(orchestrator, args))
    elif command == "bound-report":
        await orchestrator.bound_report(_pair(orchestrator, args), draws=args.draws or MIN_DRAWS)
    elif command == "report":
        summary = orchestrator.report()
        logger.info(f"Aggregated {summary['n_runs']} arm runs")


def main(argv: Optional[List[str]] = None) -> int:
    logging.basicConfig(
        level=logging.DEBUG if config.DEBUG else logging.INFO,
        format=config.LOG_FORMAT,
    )
    args = build_parser().parse_args(argv)
    try:
        experiment = load_settings(args)
        orchestrator = ExperimentOrchestrator(
            experiment,
            output_dir=Path(experiment.output_dir) if experiment.output_dir else None,
            jobs=args.jobs if args.jobs is not None else config.JOBS,
            invocation=invocation(args),
        )
        asyncio.run(dispatch(args, orchestrator))
    except TransPeftError as e:
        logger.error(f"[{e.category}] {e}")
        return e.exit_code
    return 0


if __name__ == "__main__":
    sys.exit(main())
