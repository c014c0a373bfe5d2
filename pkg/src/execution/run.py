# This file is part of the UrbanVerse tool

# src/execution/run.py
import os
import sys
import logging
import argparse
import datetime
import dataclasses
import traceback

# Add parent directory to path to import the pipeline modules
sys.path.append(os.path.dirname(os.path.dirname(os.path.abspath(__file__))))
from common.errors import UrbanVerseError
from execution.pipeline import STAGES, UrbanPipeline, parse_names
from execution.run_config import ABLATIONS, CHOICES, RunConfig

VERBOSITY = {0: logging.WARNING, 1: logging.INFO, 2: logging.DEBUG}
# short negative spellings kept next to the generated --no-<field> flags
NEGATIVE_ALIASES = {"use_positions": "--no-positions"}


def configure_logging(log_file=None, log_level=logging.INFO):
    """Configure logging to file and console"""
    log_format = "%(asctime)s - %(levelname)s - %(message)s"

    # Configure root logger
    logging.basicConfig(level=log_level, format=log_format)
    logging.getLogger().setLevel(log_level)

    # Configure file handler if log_file is provided
    if log_file and log_file != "stdout":
        if log_file == "<>":
            # Use default log file name based on script name
            script_name = os.path.splitext(os.path.basename(sys.argv[0]))[0]
            log_file = f"{script_name}.log"

        file_handler = logging.FileHandler(log_file)
        file_handler.setLevel(log_level)
        file_handler.setFormatter(logging.Formatter(log_format))
        logging.getLogger().addHandler(file_handler)

    return logging.getLogger()


def add_config_arguments(parser):
    """One flag per RunConfig field, kebab-case; unset flags keep the YAML/default value"""
    group = parser.add_argument_group("run configuration (overrides --config)")
    for f in dataclasses.fields(RunConfig):
        flag = "--" + f.name.replace("_", "-")
        if f.type is bool:
            group.add_argument(flag, dest=f.name, action=argparse.BooleanOptionalAction, default=None,
                               help=f"default {f.default}")
            if f.name in NEGATIVE_ALIASES:
                group.add_argument(NEGATIVE_ALIASES[f.name], dest=f.name, action="store_false", default=None,
                                   help=f"same as --no-{f.name.replace('_', '-')}")
        else:
            kind = f.type if f.type in (int, float) else str
            group.add_argument(flag, dest=f.name, type=kind, default=None, choices=CHOICES.get(f.name),
                               help=f"default {f.default}")


def parse_args(argv=None):
    """Parse command line arguments"""
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", type=str, help="RunConfig YAML file")
    common.add_argument("--out-dir", type=str, default="./output", help="Directory for stage outputs")
    common.add_argument("--cities", type=str, help="Comma-separated city directories (grid stage input)")
    common.add_argument("--train-cities", type=str, help="Comma-separated names of the training cities")
    common.add_argument("--test-city", type=str, help="Name of the held-out (or same-city) test city")
    common.add_argument("--embeddings", type=str, action="append", default=[],
                        help="name=path of an external region embeddings.csv, repeatable")
    common.add_argument("--log", type=str, default="<>", help="Log file name. Use stdout for console output.")
    common.add_argument("--prt-vlvl", type=int, default=1, choices=sorted(VERBOSITY),
                        help="Print verbosity level (0 warning, 1 info, 2 debug)")
    add_config_arguments(common)

    parser = argparse.ArgumentParser(description="UrbanVerse cross-city, cross-task urban region prediction")
    sub = parser.add_subparsers(dest="command", required=True, metavar="{" + ",".join(STAGES) + ",all}")

    synth = sub.add_parser("synth", parents=[common], help="Generate seeded synthetic cities")
    synth.add_argument("--spec", type=str, default="configs/synthetic_city.yaml", help="SyntheticCitySpec YAML")
    synth.add_argument("--seeds", type=str, default="0", help="Comma-separated seeds, one city per seed")
    synth.add_argument("--names", type=str, help="Comma-separated city names (default <spec name>A, B, ...)")
    synth.add_argument("--data-dir", type=str, default="./data/synthetic", help="Where the cities are written")

    for name, text in [("grid", "Validate cities and grid raw POIs"), ("walks", "Sample the walk corpus"),
                       ("pretrain", "Pretrain the cell encoder on the training cities"),
                       ("embed", "Extract cell embeddings"), ("aggregate", "Aggregate cells into regions"),
                       ("all", "Run grid through eval")]:
        sub.add_parser(name, parents=[common], help=text)

    train = sub.add_parser("train", parents=[common], help="Train the regression head")
    train.add_argument("--tasks", type=str, help="Comma-separated subset of task ids")

    predict = sub.add_parser("predict", parents=[common], help="Predict the test regions")
    predict.add_argument("--source", type=str, default="train", choices=["train", "finetune"],
                         help="Which stage's head to use")

    evaluate = sub.add_parser("eval", parents=[common], help="Score predictions, optionally export a density")
    evaluate.add_argument("--density-region", type=int, help="Region id for the predictive density export")
    evaluate.add_argument("--density-task", type=str, help="Task id for the predictive density export")
    evaluate.add_argument("--density-samples", type=int, default=100, help="Reverse-diffusion draws for the KDE")
    evaluate.add_argument("--source", type=str, default="train", choices=["train", "finetune"],
                          help="Which stage's head to sample the density from")

    ablate = sub.add_parser("ablate", parents=[common], help="Run the ablation variant matrix")
    ablate.add_argument("--variants", type=str, help=f"Comma-separated subset of {list(ABLATIONS)}")

    finetune = sub.add_parser("finetune", parents=[common], help="Add a task to a trained head")
    finetune.add_argument("--task", type=str, required=True, help="New task id")
    finetune.add_argument("--only-new-task", action="store_true", help="Sample only the new task while training")

    sweep = sub.add_parser("sweep", parents=[common], help="Sensitivity sweep over one hyper-parameter")
    sweep.add_argument("--param", type=str, required=True, help="RunConfig field to vary")
    sweep.add_argument("--values", type=str, required=True, help="Comma-separated values")

    return parser.parse_args(argv)


def parse_embeddings(entries):
    out = {}
    for entry in entries:
        name, sep, path = entry.partition("=")
        if not sep or not name or not path:
            raise argparse.ArgumentTypeError(f"--embeddings expects name=path, got {entry!r}")
        out[name] = path
    return out


def run_stage(pipeline, args):
    """Dispatch one subcommand"""
    command = args.command
    if command == "synth":
        seeds = [int(s) for s in parse_names(args.seeds)]
        dirs = pipeline.run_synth(args.spec, seeds, names=parse_names(args.names) or None, out_root=args.data_dir)
        logging.info(f"Synthetic cities written to {', '.join(dirs)}")
    elif command == "grid":
        pipeline.run_grid()
    elif command == "walks":
        pipeline.run_walks()
    elif command == "pretrain":
        pipeline.run_pretrain()
    elif command == "embed":
        pipeline.run_embed()
    elif command == "aggregate":
        pipeline.run_aggregate()
    elif command == "train":
        pipeline.run_train(tasks=parse_names(args.tasks) or None)
    elif command == "predict":
        pipeline.run_predict(source=args.source)
    elif command == "eval":
        if (args.density_region is None) != (args.density_task is None):
            raise argparse.ArgumentTypeError("--density-region and --density-task go together")
        pipeline.run_eval(density_region=args.density_region, density_task=args.density_task,
                          density_samples=args.density_samples, source=args.source)
    elif command == "ablate":
        pipeline.run_ablate(variants=parse_names(args.variants) or None)
    elif command == "finetune":
        pipeline.run_finetune(args.task, only_new_task=args.only_new_task)
    elif command == "sweep":
        pipeline.run_sweep(args.param, parse_names(args.values))
    elif command == "all":
        pipeline.run_all()


def main(argv=None):
    args = parse_args(argv)
    configure_logging(args.log, VERBOSITY[args.prt_vlvl])
    logging.info(f"Starting UrbanVerse {args.command} at {datetime.datetime.now()}")

    try:
        config = RunConfig.from_yaml(args.config) if args.config else RunConfig()
        config.apply_args(args)
        pipeline = UrbanPipeline(config, out_dir=args.out_dir, city_dirs=parse_names(args.cities),
                                 train_cities=parse_names(args.train_cities), test_city=args.test_city,
                                 external_embeddings=parse_embeddings(args.embeddings))
        pipeline.set_defaults()
        run_stage(pipeline, args)
    except UrbanVerseError as e:
        logging.error(f"{type(e).__name__}: {e}")
        return e.exit_code
    except argparse.ArgumentTypeError as e:
        logging.error(f"Invalid arguments: {e}")
        return 2
    except Exception as e:
        logging.error(f"Unexpected error: {e}")
        logging.debug(traceback.format_exc())
        return 1

    logging.info(f"UrbanVerse {args.command} finished at {datetime.datetime.now()}")
    return 0


if __name__ == "__main__":
    sys.exit(main())
