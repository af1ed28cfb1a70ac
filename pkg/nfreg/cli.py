"""
Command-line entry point: ``nfreg gen-data|train|register|eval``.
"""

import logging
import os
import sys
from argparse import ArgumentParser

import yaml
from jsonschema.exceptions import ValidationError
from ubiquerg import VersionInHelpParser

from ._version import __version__
from .archive import load_archive, save_archive, snap_to_float32
from .config import PipelineConfig, resolve_jobs, select_config
from .evaluation import MethodSpec, default_thresholds, run_benchmark, write_report
from .exceptions import ArchiveVersionError, InvalidInputError, NfregError
from .field import NeuralDeformationField, TrainConfig, train_field, write_loss_history
from .fitting import RefineConfig, register, write_result
from .geometry import read_xyz
from .nicp import NicpConfig
from .segmentation import segment_template, write_labels
from .synthetic import GeneratorConfig, generate_pairs, read_dataset, write_dataset

_LOGGER = logging.getLogger(__name__)

PKG_NAME = "nfreg"
EXIT_OK = 0
EXIT_INPUT = 2
EXIT_VERSION = 3
LOG_LEVELS = ("DEBUG", "INFO", "WARNING", "ERROR", "CRITICAL")


def build_argparser():
    """
    Builds argument parser.

    :return argparse.ArgumentParser
    """
    parser = VersionInHelpParser(
        prog=PKG_NAME,
        description="Register a template to point clouds with a localized neural deformation field.",
        version=__version__,
    )
    level = parser.add_mutually_exclusive_group()
    level.add_argument(
        "--verbosity",
        choices=LOG_LEVELS,
        type=str.upper,
        default="WARNING",
        help="Logging level. Default: %(default)s",
    )
    level.add_argument("--silent", action="store_true", help="Log nothing.")

    common = ArgumentParser(add_help=False)
    common.add_argument("--config", help="Pipeline YAML config; $NFREG_CONFIG when omitted.")
    common.add_argument("--seed", type=int, help="Overrides the config seed.")
    common.add_argument("--jobs", type=int, help="Worker threads; $NFREG_JOBS when omitted.")

    sub = parser.add_subparsers(dest="command", metavar="command")
    sub.required = True

    gen = sub.add_parser("gen-data", parents=[common], help="Write a synthetic dataset.")
    gen.add_argument("out", help="Dataset directory.")
    gen.add_argument("--shapes", type=int, help="Overrides generator.shapes.")

    train = sub.add_parser("train", parents=[common], help="Train a field on a dataset.")
    train.add_argument("dataset", help="Dataset directory written by gen-data.")
    train.add_argument(
        "out", help="Weight archive to write; the loss CSV and segment labels go next to it."
    )

    reg = sub.add_parser("register", parents=[common], help="Register the template to a target.")
    reg.add_argument("weights", help="Weight archive.")
    reg.add_argument("target", help="Target cloud (.xyz).")
    reg.add_argument("out", help="Result directory.")
    reg.add_argument("--no-nicp", action="store_true", help="Skip the NICP stage.")
    reg.add_argument("--no-chamfer", action="store_true", help="Skip Chamfer refinement.")
    reg.add_argument("--displacements", action="store_true", help="Add per-vertex displacements.")
    reg.add_argument(
        "--one-directional", action="store_true", help="Chamfer from target to template only."
    )
    reg.add_argument(
        "--timings", action="store_true", help="Also write stage timings to diagnostics.json."
    )

    ev = sub.add_parser("eval", parents=[common], help="Benchmark the method matrix.")
    ev.add_argument("weights", nargs="+", help="One or more weight archives.")
    ev.add_argument("test", help="Test dataset directory.")
    ev.add_argument("out", help="Report directory.")
    ev.add_argument(
        "--timings", action="store_true", help="Also write per-cell timings to report.json."
    )
    return parser


def _configure_logging(args):
    logger = logging.getLogger(PKG_NAME)
    for h in list(logger.handlers):
        logger.removeHandler(h)
    if args.silent:
        logger.addHandler(logging.NullHandler())
        logger.setLevel(logging.CRITICAL + 1)
        logger.propagate = False
        return logger
    handler = logging.StreamHandler(sys.stderr)
    handler.setFormatter(logging.Formatter("%(levelname)s %(name)s: %(message)s"))
    logger.addHandler(handler)
    logger.setLevel(args.verbosity)
    logger.propagate = False
    return logger


def _load_config(args):
    path = select_config(args.config)
    cfg = PipelineConfig(filepath=path) if path else PipelineConfig()
    if args.seed is not None:
        cfg["seed"] = args.seed
        cfg.validate()
    return cfg


def cmd_gen_data(args, cfg):
    gen = dict(cfg["generator"])
    if args.shapes is not None:
        gen["shapes"] = args.shapes
    gcfg = GeneratorConfig.from_mapping(gen)
    template = gcfg.build_template()
    pairs = generate_pairs(template, gcfg, cfg["seed"], jobs=resolve_jobs(args.jobs))
    write_dataset(args.out, pairs, gcfg, template)
    print(f"Wrote {len(pairs)} shapes to {args.out}")


def cmd_train(args, cfg):
    dataset = read_dataset(args.dataset)
    if len(dataset) == 0:
        raise InvalidInputError(f"Dataset '{args.dataset}' holds no shapes")
    seed = cfg["seed"]
    template = dataset.build_template()
    heads = cfg["heads"]
    segmentation = segment_template(template, heads["segments"], seed=seed)
    field = NeuralDeformationField(
        template,
        segmentation,
        hidden=heads["hidden"],
        offset_cap=heads["offset_cap"],
        seed=seed,
        **cfg["encoder"],
    )
    field, history = train_field(field, dataset, TrainConfig.from_mapping(cfg["training"]), seed=seed)
    field.params = snap_to_float32(field.params)
    save_archive(args.out, field, cfg.to_dict())
    write_loss_history(f"{args.out}.loss.csv", history)
    write_labels(f"{args.out}.labels.csv", segmentation)
    print(f"Trained {field.n_heads} head(s) for {len(history)} epoch(s); final loss {history[-1]:.6g}")


def cmd_register(args, cfg):
    field = load_archive(args.weights)
    target = read_xyz(args.target)
    nicp = NicpConfig.from_mapping(cfg["nicp"])
    nicp.enabled = nicp.enabled and not args.no_nicp
    refine = RefineConfig.from_mapping(cfg["refinement"])
    refine.chamfer = refine.chamfer and not args.no_chamfer
    refine.displacements = refine.displacements or args.displacements
    if args.one_directional:
        refine.chamfer_mode = "one_directional"
    result = register(
        field, target, seed=cfg["seed"], nicp_config=nicp, refine_config=refine
    )
    write_result(args.out, result, include_timings=args.timings)
    for stage, seconds in result.timings.items():
        print(f"{stage}: {seconds:.3f}s")


def cmd_eval(args, cfg):
    if not os.path.isdir(args.test):
        raise InvalidInputError(f"No test dataset directory at '{args.test}'")
    test_set = read_dataset(args.test)
    fields = {}
    for path in args.weights:
        field = load_archive(path)
        label = f"l={field.n_heads}"
        if label in fields:
            label = os.path.splitext(os.path.basename(path))[0]
        fields[label] = field
    ev = cfg["evaluation"]
    methods = [MethodSpec.from_mapping(m) for m in ev["methods"]]
    report = run_benchmark(
        fields if len(fields) > 1 else next(iter(fields.values())),
        test_set,
        methods,
        config=cfg,
        seed=cfg["seed"],
        jobs=resolve_jobs(args.jobs),
        thresholds=default_thresholds(ev["thresholds"], ev["max_threshold"]),
    )
    write_report(args.out, report, include_timings=args.timings)
    for row in report.summary:
        print(f"{row['method']}: mean v2v {row['mean_v2v']:.6g}, mean AUC {row['mean_auc']:.4f}")


COMMANDS = {
    "gen-data": cmd_gen_data,
    "train": cmd_train,
    "register": cmd_register,
    "eval": cmd_eval,
}


def main(argv=None):
    """
    Primary workflow

    :param list[str] argv: arguments, ``sys.argv[1:]`` when None
    :return int: exit code
    """
    parser = build_argparser()
    args = parser.parse_args(argv)
    _configure_logging(args)
    try:
        cfg = _load_config(args)
        COMMANDS[args.command](args, cfg)
    except ArchiveVersionError as e:
        print(f"{PKG_NAME}: {e}", file=sys.stderr)
        return EXIT_VERSION
    except (NfregError, OSError, ValidationError, yaml.YAMLError) as e:
        print(f"{PKG_NAME}: {e}", file=sys.stderr)
        return EXIT_INPUT
    return EXIT_OK
