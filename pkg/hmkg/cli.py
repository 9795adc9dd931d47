import argparse
import json
import logging
import os
import sys
from typing import Optional, Sequence

from hmkg.config import HMKGRunnerConfig, SynthesisConfig
from hmkg.evals import cross_validate, evaluate_model, run_ablation
from hmkg.hmkg_model import HMKG
from hmkg.hmkg_training_runner import HMKGTrainingRunner
from hmkg.report import emit_report, format_results_table, render_results
from hmkg.slide_geometry import load_cohort
from hmkg.synthetic_cohort import generate_synthetic_cohort

SEED_ENV_VAR = "HMKG_SEED"


class UsageError(ValueError):
    pass


class HMKGArgumentParser(argparse.ArgumentParser):
    """Raises UsageError instead of printing usage and exiting with status 2."""

    def error(self, message: str):
        raise UsageError(f"{self.prog}: {message}")


def load_runner_config(path: str, cohort_path: Optional[str] = None) -> HMKGRunnerConfig:
    cfg = HMKGRunnerConfig.from_json(path)
    overrides = {}
    if os.environ.get(SEED_ENV_VAR):
        overrides["seed"] = int(os.environ[SEED_ENV_VAR])
    if cohort_path is not None:
        overrides["cohort_path"] = cohort_path
    return cfg.with_overrides(**overrides) if overrides else cfg


def build_parser() -> argparse.ArgumentParser:
    parser = HMKGArgumentParser(
        prog="hmkg", description="Hierarchical multi-scale graph survival models on WSI features"
    )
    parser.add_argument("--log-level", default="WARNING", help="Python logging level")
    sub = parser.add_subparsers(dest="command", required=True)

    synth = sub.add_parser("synth", help="Generate a synthetic cohort")
    synth.add_argument("--spec", required=True, help="SynthesisConfig JSON file")
    synth.add_argument("--out", required=True, help="Output cohort directory")

    train = sub.add_parser("train", help="Train one model on a whole cohort")
    train.add_argument("--config", required=True, help="HMKGRunnerConfig JSON file")
    train.add_argument("--cohort", required=True, help="Cohort directory")
    train.add_argument("--out", required=True, help="Checkpoint directory")

    evaluate = sub.add_parser("eval", help="Score a trained checkpoint on a cohort")
    evaluate.add_argument("--ckpt", required=True, help="Checkpoint directory")
    evaluate.add_argument("--cohort", required=True, help="Cohort directory")

    for name, help_text in (
        ("cv", "Cross-validate the configured variant"),
        ("ablate", "Cross-validate every ablation variant on shared folds"),
    ):
        command = sub.add_parser(name, help=help_text)
        command.add_argument("--config", required=True, help="HMKGRunnerConfig JSON file")
        command.add_argument("--cohort", required=True, help="Cohort directory")
        command.add_argument(
            "--out", default=None, help="Report directory (results.json, table.txt, km.csv)"
        )

    report = sub.add_parser("report", help="Print the table of a results.json")
    report.add_argument("--in", dest="results", required=True, help="results.json file")
    return parser


def run(args: argparse.Namespace) -> None:
    if args.command == "synth":
        spec = SynthesisConfig.from_json(args.spec)
        cohort = generate_synthetic_cohort(spec, out_dir=args.out)
        print(json.dumps({"cohort_id": cohort.cohort_id, "slides": len(cohort), "out": args.out}))

    elif args.command == "train":
        cfg = load_runner_config(args.config, args.cohort)
        output = HMKGTrainingRunner(cfg).run(out_path=args.out)
        print(
            json.dumps(
                {
                    "checkpoint": args.out,
                    "initial_loss": output.epoch_losses[0],
                    "final_loss": output.epoch_losses[-1],
                }
            )
        )

    elif args.command == "eval":
        model = HMKG.load_from_pretrained(args.ckpt)
        cohort = load_cohort(args.cohort)
        evaluation = evaluate_model(model, cohort)
        print(
            json.dumps(
                {
                    "cohort_id": cohort.cohort_id,
                    "variant": model.cfg.variant,
                    "c_index": evaluation.c_index,
                    "logrank_stat": evaluation.logrank.statistic if evaluation.logrank else None,
                    "logrank_p": evaluation.logrank.p_value if evaluation.logrank else None,
                },
                sort_keys=True,
            )
        )

    elif args.command in ("cv", "ablate"):
        # the cohort is loaded once here and handed to every fold
        cfg = load_runner_config(args.config)
        cohort = load_cohort(args.cohort)
        if args.command == "cv":
            results, layout = [cross_validate(cfg, cohort)], "results"
        else:
            results, layout = run_ablation(cfg, cohort), "ablation"
        if args.out is not None:
            emit_report(results, args.out, cfg, layout)
        print(format_results_table(results, layout), end="")

    elif args.command == "report":
        print(render_results(args.results), end="")


def main(argv: Optional[Sequence[str]] = None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
        logging.basicConfig(level=args.log_level.upper())
        run(args)
    except Exception as e:
        sys.stderr.write(json.dumps({"error": type(e).__name__, "message": str(e)}) + "\n")
        return 1
    return 0


if __name__ == "__main__":
    sys.exit(main())
