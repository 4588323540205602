"""
Experiment runs: trace generation, training, evaluation and parameter sweeps.

A run directory always receives resolved_config.json, so any run can be
repeated from its output directory alone. All randomness flows from
run.seed through SeedSequence-derived streams.
"""

import json
import logging
import os
from typing import Dict, List, Optional, Sequence, Tuple

import pandas as pd

from agents.baseline_agent import LEARNED_POLICIES, VARIANT_POLICY, evaluate, make_policy
from agents.ddpg_agent import DdpgAgent, train
from config import ExperimentConfig, config_digest, echo_config, override
from services.motion_capture import load_clips, trace_from_clips
from services.scene_trace import SceneTrace, list_traces, read_trace, synth_trace, write_trace
from utils import UsageError, spawn_rngs
from workflows.evaluation import exploration_table, slot_reward_table, write_metrics
from workflows.vr_env import VrInteractionEnv

logger = logging.getLogger(__name__)

MODEL_NAME = "model.json"
METRICS_NAME = "metrics.csv"
EVAL_RECORDS_NAME = "eval_records.csv"
EVAL_SUMMARY_NAME = "eval_summary.json"
SLOT_REWARDS_NAME = "slot_rewards.csv"
SWEEP_NAME = "sweep.csv"
EXPLORATION_NAME = "exploration.csv"


def trace_file_name(index: int) -> str:
    return f"trace_{index:05d}.jsonl"


def synth_traces(count: int, users: int, slots: int, seed: int, bounds=(10.0, 10.0)) -> List[SceneTrace]:
    """`count` random-walk traces, trace i drawn from child stream i of `seed`."""
    return [synth_trace(users, slots, bounds, rng) for rng in spawn_rngs(seed, count)]


def gen_traces(out_dir: str, count: int, users: int, slots: int, seed: int,
               train_fraction: Optional[float] = None, bounds=(10.0, 10.0)) -> dict:
    """
    Write seeded synthetic traces as trace_XXXXX.jsonl.

    With train_fraction, the first round(count * train_fraction) traces go to
    out_dir/train and the rest to out_dir/test.

    Returns:
        {"train": [...paths], "test": [...paths]} or {"all": [...paths]}
    """
    return write_trace_split(out_dir, synth_traces(count, users, slots, seed, bounds), train_fraction)


def ingest_bvh(out_dir: str, bvh_dir: str, count: int, users: int, slots: int, seed: int,
               frames_per_slot: int = 1, train_fraction: Optional[float] = None, bounds=(10.0, 10.0)) -> dict:
    """
    Turn the BVH clips of `bvh_dir` into `count` multi-user traces.

    Trace i draws `users` distinct clips (with repeats when the directory holds
    fewer) and its placement from child stream i of `seed`.
    """
    clips = load_clips(bvh_dir)
    traces = []
    for rng in spawn_rngs(seed, count):
        picks = rng.choice(len(clips), size=users, replace=len(clips) < users)
        traces.append(trace_from_clips([clips[i] for i in picks], slots, frames_per_slot, bounds, rng))
    return write_trace_split(out_dir, traces, train_fraction)


def write_trace_split(out_dir: str, traces: Sequence[SceneTrace], train_fraction: Optional[float] = None) -> dict:
    count = len(traces)
    if train_fraction is None:
        groups = {"all": (out_dir, traces)}
    else:
        cut = int(round(count * train_fraction))
        groups = {
            "train": (os.path.join(out_dir, "train"), traces[:cut]),
            "test": (os.path.join(out_dir, "test"), traces[cut:]),
        }
    written = {}
    for name, (directory, group) in groups.items():
        os.makedirs(directory, exist_ok=True)
        written[name] = []
        for i, trace in enumerate(group):
            path = os.path.join(directory, trace_file_name(i))
            write_trace(trace, path)
            written[name].append(path)
        logger.info(f"wrote {len(group)} traces to {directory}")
    return written


def load_traces(directory: str, bounds=None, limit: Optional[int] = None) -> List[SceneTrace]:
    paths = list_traces(directory)
    if limit is not None:
        paths = paths[:limit]
    if not paths:
        raise ValueError(f"no trace files in {directory}")
    return [read_trace(p, bounds) for p in paths]


def resolve_traces(config: ExperimentConfig, split: str) -> List[SceneTrace]:
    """Traces of the `train` or `test` split: from run.*_traces if set, else synthesised from run.seed."""
    directory = config.run.train_traces if split == "train" else config.run.test_traces
    if directory:
        return load_traces(directory)
    env, synth = config.environment, config.run.synth
    traces = synth_traces(synth.count, env.users, env.slots, config.run.seed, env.scene_bounds)
    cut = int(round(synth.count * synth.train_fraction))
    chosen = traces[:cut] if split == "train" else traces[cut:]
    if not chosen:
        raise ValueError(f"synthetic {split} split is empty (count={synth.count}, "
                         f"train_fraction={synth.train_fraction})")
    return chosen


def run_train(config: ExperimentConfig, output_dir: Optional[str] = None,
              traces: Optional[Sequence[SceneTrace]] = None) -> Tuple[DdpgAgent, pd.DataFrame]:
    """
    Train the configured agent variant and write metrics.csv, exploration.csv,
    checkpoints and model.json.

    Every metric row carries a run id: a digest of the resolved config, so equal
    configs share it.
    """
    output_dir = output_dir or config.run.output_dir
    echo_config(config, output_dir)
    traces = list(traces) if traces is not None else resolve_traces(config, "train")
    seed = config.run.seed
    train_rng = spawn_rngs([seed, 2], 1)[0]
    policy = VARIANT_POLICY[config.agent.variant]
    run_id = config_digest(config)
    exploration = []

    agent, history = train(
        lambda: VrInteractionEnv(config.environment),
        traces,
        config.agent,
        train_rng,
        seed=[seed, 1],
        checkpoint_dir=os.path.join(output_dir, "checkpoints"),
        checkpoint_every=config.run.checkpoint_every,
        on_exploration=exploration.append,
    )
    metrics = pd.DataFrame(history)
    metrics.insert(0, "seed", seed)
    metrics.insert(0, "policy", policy)
    metrics.insert(0, "run_id", run_id)
    write_metrics(metrics, os.path.join(output_dir, METRICS_NAME))
    write_metrics(exploration_table(exploration, run_id, policy, seed), os.path.join(output_dir, EXPLORATION_NAME))
    agent.save(os.path.join(output_dir, MODEL_NAME))
    logger.info(f"trained {policy} for {len(history)} episodes; artifacts in {output_dir}")
    return agent, metrics


def load_agent(model_path: Optional[str]) -> DdpgAgent:
    if not model_path:
        raise UsageError("learned policies need a model (--model or run.model_path)")
    if not os.path.exists(model_path):
        raise UsageError(f"model not found: {model_path}")
    return DdpgAgent.load(model_path)


def model_paths(names: Sequence[str], model_path: Optional[str]) -> Dict[str, str]:
    """
    Model file per learned policy name.

    `model_path` is either one path, used for every learned name, or
    comma-separated name=path pairs such as "ddpg=runs/a/model.json,ps_cddpg=runs/b/model.json".
    """
    learned = [name for name in names if name in LEARNED_POLICIES]
    if not learned:
        return {}
    if not model_path:
        raise UsageError("learned policies need a model (--model or run.model_path)")
    if "=" not in model_path:
        return {name: model_path for name in learned}
    pairs = {}
    for item in model_path.split(","):
        name, sep, path = item.strip().partition("=")
        if not sep or not path:
            raise UsageError(f"model entries must look like policy=path, got {item!r}")
        pairs[name] = path
    missing = [name for name in learned if name not in pairs]
    if missing:
        raise UsageError(f"no model given for {', '.join(missing)}")
    return {name: pairs[name] for name in learned}


def _policies(config: ExperimentConfig, names: Sequence[str], model_path: Optional[str]):
    paths = model_paths(names, model_path or config.run.model_path)
    agents = {path: load_agent(path) for path in sorted(set(paths.values()))}
    return [make_policy(name, config.environment, agents.get(paths.get(name))) for name in names]


def run_eval(config: ExperimentConfig, policies: Optional[Sequence[str]] = None,
             model_path: Optional[str] = None, traces: Optional[Sequence[SceneTrace]] = None,
             output_dir: Optional[str] = None, workers: int = 1) -> pd.DataFrame:
    """
    Evaluate each policy on every (test trace, seed) pair; writes eval_records.csv,
    slot_rewards.csv and eval_summary.json.
    """
    output_dir = output_dir or config.run.output_dir
    echo_config(config, output_dir)
    names = list(policies or config.run.eval_policies)
    traces = list(traces) if traces is not None else resolve_traces(config, "test")
    records, slots, summaries = [], [], {}
    for policy in _policies(config, names, model_path):
        result = evaluate(policy, traces, config.environment, config.run.eval_seeds, workers=workers)
        records.append(result.records)
        slots.append(result.slot_rewards)
        summaries[policy.name] = result.summary

    frame = pd.concat(records, ignore_index=True)
    write_metrics(frame, os.path.join(output_dir, EVAL_RECORDS_NAME))
    write_metrics(slot_reward_table(pd.concat(slots, ignore_index=True)), os.path.join(output_dir, SLOT_REWARDS_NAME))
    with open(os.path.join(output_dir, EVAL_SUMMARY_NAME), "w", encoding="utf-8") as f:
        json.dump(summaries, f, indent=2, sort_keys=True)
    return frame


def sweep(config: ExperimentConfig, key_path: str, values: Sequence, policies: Optional[Sequence[str]] = None,
          model_path: Optional[str] = None, traces: Optional[Sequence[SceneTrace]] = None,
          output_dir: Optional[str] = None, workers: int = 1) -> pd.DataFrame:
    """
    Repeat evaluation over a grid of one dotted config key.

    Learned policies are evaluated with the same trained model at every grid point.

    Returns:
        Long-format frame with one row per (policy, value, seed)
    """
    output_dir = output_dir or config.run.output_dir
    names = list(policies or config.run.eval_policies)
    configs = [(value, override(config, key_path, value)) for value in values]
    echo_config(config, output_dir)
    traces = list(traces) if traces is not None else resolve_traces(config, "test")

    rows = []
    for value, cell_config in configs:
        for policy in _policies(cell_config, names, model_path):
            result = evaluate(policy, traces, cell_config.environment, cell_config.run.eval_seeds, workers=workers)
            per_seed = result.records.drop(columns=["policy", "trace"]).groupby("seed", sort=True).mean()
            for seed, metrics in per_seed.iterrows():
                rows.append({"policy": policy.name, "param": key_path, "value": value, "seed": int(seed),
                             **{k: float(v) for k, v in metrics.items()}})
        logger.info(f"sweep {key_path}={value}: {len(names)} policies done")
    frame = pd.DataFrame(rows)
    write_metrics(frame, os.path.join(output_dir, SWEEP_NAME))
    return frame


def parse_values(text: str) -> list:
    """Comma-separated sweep values; numbers become floats (or ints when integral)."""
    values = []
    for item in text.split(","):
        item = item.strip()
        if not item:
            continue
        try:
            number = float(item)
        except ValueError:
            values.append(item)
            continue
        values.append(int(number) if number.is_integer() and "e" not in item.lower() and "." not in item else number)
    if not values:
        raise ValueError("no sweep values given")
    return values

