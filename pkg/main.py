import argparse
import logging
import sys

from dotenv import load_dotenv

from config import ExperimentConfig, load_config, override, resolve_config
from utils import ConfigError, UsageError, setup_logging
from workflows.evaluation import export_summary
from workflows.experiment import gen_traces, ingest_bvh, load_traces, parse_values, run_eval, run_train, sweep

# Load environment variables
load_dotenv()

logger = logging.getLogger("main")

EXIT_OK = 0
EXIT_ERROR = 2


def _config(path):
    return load_config(path) if path else resolve_config({})


def _with_overrides(config: ExperimentConfig, args) -> ExperimentConfig:
    if getattr(args, "seed", None) is not None:
        config = override(config, "run.seed", args.seed)
    if getattr(args, "out", None):
        config = override(config, "run.output_dir", args.out)
    for item in getattr(args, "set", None) or []:
        key, sep, value = item.partition("=")
        if not sep:
            raise ConfigError(item, "overrides must look like key.path=value")
        config = override(config, key, parse_values(value)[0])
    return config


def cmd_gen_traces(args):
    bounds = (args.width, args.depth)
    if args.bvh:
        written = ingest_bvh(args.out, args.bvh, args.count, args.users, args.slots, args.seed,
                             args.frames_per_slot, args.split, bounds)
    else:
        written = gen_traces(args.out, args.count, args.users, args.slots, args.seed, args.split, bounds)
    for name, paths in written.items():
        logger.info(f"{name}: {len(paths)} traces")


def cmd_train(args):
    config = _with_overrides(_config(args.config), args)
    run_train(config)


def cmd_eval(args):
    config = _with_overrides(_config(args.config), args)
    traces = load_traces(args.traces) if args.traces else None
    policies = [p for item in args.policy for p in item.split(",") if p] if args.policy else None
    run_eval(config, policies, args.model, traces, workers=args.workers)


def cmd_sweep(args):
    config = _with_overrides(_config(args.config), args)
    traces = load_traces(args.traces) if args.traces else None
    policies = [p for item in args.policy for p in item.split(",") if p] if args.policy else None
    sweep(config, args.param, parse_values(args.values), policies, args.model, traces, workers=args.workers)


def cmd_summarize(args):
    summary = export_summary(args.csv, args.out)
    for policy, entry in summary.items():
        reward = entry["metrics"].get("mean_reward", {}).get("mean")
        logger.info(f"{policy}: samples={entry['samples']} mean_reward={reward}")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="vrqoe", description="Multi-user VR keyframe allocation experiments")
    parser.add_argument("--log-level", default=None, help="overrides $VRQOE_LOG_LEVEL")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("gen-traces", help="write seeded scene traces, synthetic or from BVH clips")
    p.add_argument("--out", required=True)
    p.add_argument("--count", type=int, default=2500)
    p.add_argument("--users", type=int, default=5)
    p.add_argument("--slots", type=int, default=100)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--split", type=float, default=None, help="train fraction, e.g. 0.8 for a 2000/500 split")
    p.add_argument("--width", type=float, default=10.0)
    p.add_argument("--depth", type=float, default=10.0)
    p.add_argument("--bvh", default=None, help="build traces from the .bvh clips of this directory")
    p.add_argument("--frames-per-slot", type=int, default=1, help="clip frames advanced per slot (with --bvh)")
    p.set_defaults(func=cmd_gen_traces)

    p = sub.add_parser("train", help="train the configured agent")
    p.add_argument("--config", default=None)
    p.add_argument("--out", default=None)
    p.add_argument("--seed", type=int, default=None)
    p.add_argument("--set", action="append", help="override a config key, e.g. agent.epsilon=0.2")
    p.set_defaults(func=cmd_train)

    for name, func, help_text in (("eval", cmd_eval, "evaluate policies on test traces"),
                                  ("sweep", cmd_sweep, "evaluate policies over a parameter grid")):
        p = sub.add_parser(name, help=help_text)
        p.add_argument("--config", default=None)
        p.add_argument("--model", default=None, help="model path, or policy=path pairs, e.g. ddpg=a.json,ps_cddpg=b.json")
        p.add_argument("--traces", default=None)
        p.add_argument("--policy", action="append", help="policy name(s); repeat or comma-separate")
        p.add_argument("--out", default=None)
        p.add_argument("--seed", type=int, default=None)
        p.add_argument("--workers", type=int, default=1)
        p.add_argument("--set", action="append")
        if name == "sweep":
            p.add_argument("--param", required=True, help="dotted config key, e.g. environment.b_max")
            p.add_argument("--values", required=True, help="comma-separated values")
        p.set_defaults(func=func)

    p = sub.add_parser("summarize", help="aggregate metric CSVs per policy")
    p.add_argument("csv", nargs="+")
    p.add_argument("--out", default=None)
    p.set_defaults(func=cmd_summarize)
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    setup_logging(args.log_level)
    try:
        args.func(args)
    except (ValueError, UsageError, FileNotFoundError) as e:
        logger.error(str(e))
        return EXIT_ERROR
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
