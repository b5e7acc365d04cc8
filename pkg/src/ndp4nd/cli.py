"""Command-line harness: generate, train, evaluate, adapt, sweep.

Exit codes: 0 success, 2 config error, 3 data error, 4 numerical failure.
"""

from __future__ import annotations

import argparse
import sys

from . import experiment
from .errors import ConfigError, DataFormatError, NumericalError, ParameterError

EXIT_OK = 0
EXIT_CONFIG = 2
EXIT_DATA = 3
EXIT_NUMERICAL = 4


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="ndp4nd",
        description="Network-dynamics stochastic-process experiments.")
    sub = parser.add_subparsers(dest="command", required=True)

    def common(p, checkpoint=False, dataset=False):
        p.add_argument("--config", required=True, help="experiment config JSON")
        p.add_argument("--seed", type=int, default=None, help="override config seed")
        p.add_argument("--out", required=True, help="output directory")
        p.add_argument("--jobs", type=int, default=1, help="parallel workers")
        if checkpoint:
            p.add_argument("--checkpoint", required=True, help="model checkpoint path")
        if dataset:
            p.add_argument("--dataset", required=True, help="dataset .jsonl path")

    common(sub.add_parser("generate", help="sample train/test datasets"))
    common(sub.add_parser("train", help="train a model on a dataset"), dataset=True)
    common(sub.add_parser("evaluate", help="score a checkpoint on a dataset"),
           checkpoint=True, dataset=True)
    adapt = sub.add_parser("adapt", help="grow the context on one task, no retraining")
    common(adapt, checkpoint=True, dataset=True)
    adapt.add_argument("--task-id", type=int, default=None,
                       help="task id to adapt on (default: first in dataset)")
    adapt.add_argument("--ratios", type=float, nargs="+", default=[1.0, 5.0, 20.0],
                       help="observed-ratio schedule in percent")
    sweep = sub.add_parser("sweep", help="MAE versus observed ratio or noise level")
    common(sweep, checkpoint=True, dataset=True)
    sweep.add_argument("--axis", choices=["observed_ratio", "noise_sigma"], required=True)
    sweep.add_argument("--grid", type=float, nargs="+", required=True)
    return parser


def _run(args) -> int:
    config = experiment.load_config(args.config)
    if args.seed is not None:
        config.seed = args.seed
    if args.command == "generate":
        summary = experiment.run_generate(config, args.out, jobs=args.jobs)
        for split in ("train", "test"):
            info = summary[split]
            print(f"{split}: {info['num_tasks']} tasks, "
                  f"mean observed ratio {info['mean_observed_ratio']:.2f}%")
    elif args.command == "train":
        result = experiment.run_train(config, args.dataset, args.out)
        print(f"trained {result['steps']} steps, final loss {result['final_loss']:.6g}, "
              f"checkpoint at {result['checkpoint']}")
    elif args.command == "evaluate":
        report = experiment.run_evaluate(config, args.checkpoint, args.dataset,
                                         args.out, jobs=args.jobs)
        agg = report.aggregate()
        for name in ("mae_interp", "mae_extrap", "dtw_interp", "dtw_extrap"):
            print(f"{name}: {agg[name]['mean']:.6g} ({agg[name]['std']:.6g})")
    elif args.command == "adapt":
        task_id = args.task_id
        if task_id is None:
            _, tasks = experiment.read_dataset_file(args.dataset)
            task_id = tasks[0][0].id
        rows = experiment.run_adapt(config, args.checkpoint, args.dataset, args.out,
                                    task_id=task_id, ratios=tuple(args.ratios))
        for row in rows:
            print(f"stage {row['stage']} (ratio {row['ratio']}%): "
                  f"mae {row['mae']:.6g}, mean variance {row['mean_variance']:.6g}")
    else:  # sweep
        rows = experiment.run_sweep(config, args.checkpoint, args.dataset, args.out,
                                    axis=args.axis, grid=tuple(args.grid))
        for row in rows:
            print(f"{args.axis}={row['axis_value']}: median mae {row['mae_median']:.6g}")
    return EXIT_OK


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return _run(args)
    except (ConfigError, ParameterError) as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except DataFormatError as exc:
        print(f"data error: {exc}", file=sys.stderr)
        return EXIT_DATA
    except NumericalError as exc:
        print(f"numerical failure: {exc}", file=sys.stderr)
        return EXIT_NUMERICAL


if __name__ == "__main__":
    sys.exit(main())
