import logging
import sys
from argparse import ArgumentParser
from pathlib import Path

import tomli
from serde.toml import to_toml

import qkd_twin as qtw
from qkd_twin.pipeline.config import Mode
from qkd_twin.pipeline.pipeline import Scenario
from qkd_twin.pipeline.templates import TEMPLATES

# set up logging
formatter = logging.Formatter(
    "%(asctime)s|%(name)s|%(levelname)s - %(message)s", datefmt="%Y-%m-%d %H:%M:%S"
)

MODE_CHOICES = [m.value for m in Mode]

# set up command line arguments
parser = ArgumentParser(prog="qtw")
parser.add_argument("-v", "--version", action="store_true", help="print version information")
parser.add_argument(
    "--log-level",
    default="INFO",
    choices=("DEBUG", "INFO", "WARNING", "ERROR"),
    help="console log level (default is %(default)s)",
)
subparser = parser.add_subparsers(help="command to run")

########## new ##########


def new_config(args):
    path = Path(args.config)
    if path.is_file() and not args.force:
        print(f"{path.name} already exists, use --force to overwrite it", file=sys.stderr)
        return 1
    config = tomli.loads(to_toml(TEMPLATES[Mode(args.template)]))
    config["name"] = args.name if args.name else path.stem.replace(" ", "_")
    scenario = Scenario(**config)
    scenario.to_file(path)
    return 0


new_parser = subparser.add_parser("new", aliases="n", help="generate configuration files")
new_parser.add_argument("config", help="path to configuration file")
new_parser.add_argument(
    "-t",
    "--template",
    default=Mode.TX_LOOPBACK.value,
    choices=MODE_CHOICES,
    help="starting template (default is %(default)s)",
)
new_parser.add_argument("-n", "--name", help="path-friendly run name (default is the file stem)")
new_parser.add_argument("-f", "--force", action="store_true", help="overwrite an existing file")
new_parser.set_defaults(func=new_config)

########## run ##########


def load_scenario(args) -> Scenario:
    """Configuration file (or the template of ``--mode``) with command-line overrides."""
    if args.config is not None:
        with open(args.config, "rb") as fh:
            config = tomli.load(fh)
    else:
        mode = Mode(args.mode) if args.mode else Mode.TX_LOOPBACK
        config = tomli.loads(to_toml(TEMPLATES[mode]))
    if args.mode is not None:
        config["mode"] = args.mode
    if args.duration is not None:
        config["duration"] = args.duration
    if args.seed is not None:
        config["seed"] = args.seed
    if args.out is not None:
        config["output_directory"] = args.out
    if args.inject_stall is not None:
        stall = config.setdefault("stall", {})
        stall["duration"] = args.inject_stall
    if args.real_time:
        config["time_model"] = "REAL_TIME_THROTTLED"
    return Scenario(**config)


def run(args):
    scenario = load_scenario(args)
    result = scenario.run(quiet=args.quiet)
    print(result.paths["txt"].read_text(), end="")
    return result.exit_code


run_parser = subparser.add_parser("run", aliases="r", help="run a scenario")
run_parser.add_argument("-c", "--config", help="path to configuration file")
run_parser.add_argument(
    "-m", "--mode", choices=MODE_CHOICES, help="override the scenario mode"
)
run_parser.add_argument("-d", "--duration", type=float, help="run length in seconds")
run_parser.add_argument("-s", "--seed", type=int, help="master seed for a reproducible run")
run_parser.add_argument(
    "-o", "--out", help="output directory, if not specified will use current working directory"
)
run_parser.add_argument(
    "--inject-stall",
    type=float,
    metavar="SECONDS",
    help="stop the source for this many seconds, starting at `stall.start`",
)
run_parser.add_argument(
    "--real-time",
    action="store_true",
    help="emit slots at the configured repetition rate instead of as fast as possible",
)
run_parser.add_argument(
    "-q",
    "--quiet",
    action="store_true",
    help="silence the progress bar",
)
run_parser.set_defaults(func=run)

########## main ##########


def main():
    args = parser.parse_args()
    handler = logging.StreamHandler()
    handler.setFormatter(formatter)
    handler.setLevel(args.log_level)
    root = logging.getLogger()
    root.addHandler(handler)
    root.setLevel(args.log_level)
    if args.version:
        print(qtw.__version__)
        return 0
    if hasattr(args, "func"):
        return args.func(args)
    # no inputs, print help
    parser.print_help()
    return 0


if __name__ == "__main__":
    sys.exit(main())
