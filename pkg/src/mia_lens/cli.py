"""Command-line driver.

One subcommand per pipeline stage plus ``run`` for the whole thing.
Stage subcommands expect their prerequisites' completion markers and
refuse to start without them; ``run`` executes everything in order,
skipping stages already marked complete for the same config hash.

Exit codes: 0 on success, 2 when configuration or input validation
fails before work starts, 3 when a stage fails mid-flight.
"""

import argparse
import dataclasses
import logging
import sys

from .config import RunConfig, load_config
from .errors import MiaLensError, StageFailureError
from .errors import (
    CapabilityError,
    DatasetDecodeError,
    DatasetNotFoundError,
    DependencyError,
    InsufficientDataError,
    InvalidConfigurationError,
    InvalidDatasetError,
    InvalidInputError,
    InvalidLayerError,
)
from .pipeline import run_directory, run_pipeline, run_stage

_VALIDATION_ERRORS = (
    InvalidConfigurationError,
    InvalidInputError,
    InvalidLayerError,
    InvalidDatasetError,
    DatasetNotFoundError,
    DatasetDecodeError,
    InsufficientDataError,
    DependencyError,
    CapabilityError,
)

_SUBCOMMANDS = {
    "split": ("split",),
    "train": ("train_target", "train_shadow"),
    "extract": ("extract",),
    "rank": ("rank",),
    "features": ("features",),
    "grid": ("grid",),
    "ensemble": ("ensemble",),
    "ensemble-sweep": ("ensemble",),
    "explain": ("explain",),
    "report": ("report",),
    "run": None,
}

_HELP = {
    "split": "partition the dataset into target/shadow train and test sets",
    "train": "train the target and shadow classifiers",
    "extract": "capture layer activations for both models",
    "rank": "rank neurons per selection method on the shadow activations",
    "features": "build full attack feature blocks per model and layer",
    "grid": "train the attack-model grid over methods and thresholds",
    "ensemble": "rank attack models and build the stacked ensemble",
    "ensemble-sweep": "same stage as ensemble; the sweep is part of it",
    "explain": "attribute attack decisions back to input pixels",
    "report": "assemble the run report and render figures",
    "run": "execute every stage in order",
}


def build_parser():
    parser = argparse.ArgumentParser(
        prog="mia-lens",
        description="White-box membership-inference auditing pipeline.",
    )
    subparsers = parser.add_subparsers(dest="command", required=True)
    for name in _SUBCOMMANDS:
        sub = subparsers.add_parser(name, help=_HELP[name])
        sub.add_argument("--config", metavar="PATH", help="run configuration file")
        sub.add_argument(
            "--out", metavar="DIR", help="output directory (overrides the config)"
        )
        sub.add_argument(
            "--seed", type=int, metavar="N", help="root seed (overrides the config)"
        )
        sub.add_argument(
            "--resume",
            action="store_true",
            default=True,
            help="skip stages whose completion marker matches (always on; "
            "delete the run directory to start over)",
        )
    return parser


def _build_config(args):
    config = load_config(args.config) if args.config else RunConfig()
    overrides = {}
    if args.out is not None:
        overrides["out_dir"] = args.out
    if args.seed is not None:
        overrides["seed"] = args.seed
    if overrides:
        config = dataclasses.replace(config, **overrides)
    return config


def main(argv=None):
    args = build_parser().parse_args(argv)
    logging.basicConfig(
        level=logging.INFO,
        format="%(levelname)s %(name)s: %(message)s",
        stream=sys.stderr,
    )
    try:
        config = _build_config(args)
    except _VALIDATION_ERRORS as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    try:
        if args.command == "run":
            report = run_pipeline(config, resume=args.resume)
            print(f"run {report['status']}: {run_directory(config)}")
        else:
            for stage in _SUBCOMMANDS[args.command]:
                run_stage(config, stage, resume=args.resume)
            print(f"{args.command} complete: {run_directory(config)}")
        return 0
    except StageFailureError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 3
    except _VALIDATION_ERRORS as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    except MiaLensError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 3


if __name__ == "__main__":
    sys.exit(main())
