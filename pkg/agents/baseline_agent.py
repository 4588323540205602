"""
Comparison policies over VrInteractionEnv.

    original         every avatar, every frame, no keyframe extraction
    attention_only   every frame, only avatars inside the field of view (levels 1-3)
    fixed_33/50/66   keyframe ratio 1/3, 1/2 or 2/3 for levels 1-3
    ddpg, cai_ddpg_fullstate, ps_cddpg
                     trained actors (see agents.ddpg_agent)
    greedy_oracle    per-slot brute-force search on a discretised action grid

Fixed policies split bandwidth and CPU uniformly across users.
"""

import itertools
import logging
import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from typing import Dict, List, Optional, Sequence

import numpy as np
import pandas as pd

from config import POLICY_VARIANT, SystemParams
from services.scene_trace import ATTENTION_LEVELS, SceneTrace
from utils import UsageError
from workflows.vr_env import ALL_LEVELS, Action, RawAction, VrInteractionEnv, normalize_action

logger = logging.getLogger(__name__)

FIXED_RATIOS = {"fixed_33": 1.0 / 3.0, "fixed_50": 0.5, "fixed_66": 2.0 / 3.0}
FIXED_POLICIES = ("original", "attention_only", *FIXED_RATIOS)
LEARNED_POLICIES = tuple(POLICY_VARIANT)
VARIANT_POLICY = {variant: name for name, variant in POLICY_VARIANT.items()}
POLICY_KINDS = FIXED_POLICIES + LEARNED_POLICIES + ("greedy_oracle",)
IN_VIEW = np.array([False, True, True, True])


def fixed_ratio_keyframes(ratio: float, fps: int) -> int:
    """clamp(ceil(ratio * fps), 2, fps); rounding first keeps 0.5 * 30 at 15."""
    return int(min(max(math.ceil(round(ratio * fps, 9)), 2), fps))


class FixedPolicy:
    def __init__(self, kind: str, params: SystemParams):
        if kind not in FIXED_POLICIES:
            raise ValueError(f"unknown fixed policy: {kind}")
        self.name = kind
        self.params = params

    def action(self, env: VrInteractionEnv) -> Action:
        users, fps = self.params.users, self.params.fps
        b = np.full(users, self.params.b_max / users)
        f_e = np.full(users, self.params.f_max / users)
        F = np.full((users, ATTENTION_LEVELS), fps, dtype=int)
        if self.name == "original":
            return Action(b=b, f_e=f_e, F=F, levels_sent=ALL_LEVELS.copy(), extract_keyframes=False)
        # Level 0 is not sent; its F only has to stay in range.
        F[:, 0] = 2
        if self.name == "attention_only":
            return Action(b=b, f_e=f_e, F=F, levels_sent=IN_VIEW.copy(), extract_keyframes=False)
        F[:, 1:] = fixed_ratio_keyframes(FIXED_RATIOS[self.name], fps)
        return Action(b=b, f_e=f_e, F=F, levels_sent=IN_VIEW.copy(), extract_keyframes=True)


class LearnedPolicy:
    """Deterministic actor output of a trained agent, normalized into an Action."""

    def __init__(self, name: str, agent=None):
        if agent is not None and VARIANT_POLICY.get(agent.config.variant) != name:
            raise UsageError(f"policy {name} was given a model trained as {agent.config.variant}; "
                             f"pass {name}=PATH to --model")
        self.name = name
        self.agent = agent

    def action(self, env: VrInteractionEnv) -> Action:
        if self.agent is None:
            raise UsageError(f"policy {self.name} has no trained model")
        raw = RawAction.from_vector(self.agent.act(env.state.vector), env.users)
        return normalize_action(raw, env.params)


class GreedyOracle:
    """
    Exhaustive per-slot search for two users: bandwidth and CPU splits on an
    interior grid, and F per occupied attention level from `keyframe_grid`.
    Every candidate is scored in one vectorised call against the realised channel.
    """

    name = "greedy_oracle"

    def __init__(self, params: SystemParams, split_steps: int = 9, keyframe_grid: Sequence[int] = (2, 8, 15, 23, 30)):
        if params.users != 2:
            raise ValueError("the greedy oracle enumerates two-user instances only")
        self.params = params
        shares = np.arange(1, split_steps + 1) / (split_steps + 1)
        self.splits = np.stack([shares, 1.0 - shares], axis=1)
        self.keyframe_grid = [int(min(max(f, 2), params.fps)) for f in keyframe_grid]

    def _keyframe_candidates(self, counts: np.ndarray) -> np.ndarray:
        occupied = [(k, a) for k in range(counts.shape[0]) for a in range(ATTENTION_LEVELS) if counts[k, a] > 0]
        grids = []
        for choice in itertools.product(self.keyframe_grid, repeat=len(occupied)):
            F = np.full(counts.shape, 2, dtype=int)
            for (k, a), value in zip(occupied, choice):
                F[k, a] = value
            grids.append(F)
        return np.stack(grids)

    def action(self, env: VrInteractionEnv) -> Action:
        F_options = self._keyframe_candidates(env.current_snapshot.counts)
        n_b, n_f, n_F = len(self.splits), len(self.splits), len(F_options)
        ib, i_f, iF = np.meshgrid(np.arange(n_b), np.arange(n_f), np.arange(n_F), indexing="ij")
        ib, i_f, iF = ib.ravel(), i_f.ravel(), iF.ravel()
        b = self.splits[ib] * self.params.b_max
        f_e = self.splits[i_f] * self.params.f_max
        F = F_options[iF]
        rewards = env.preview_rewards(b, f_e, F)
        best = int(np.argmax(rewards))
        return Action(b=b[best], f_e=f_e[best], F=F[best])


def make_policy(name: str, params: SystemParams, agent=None):
    if name in FIXED_POLICIES:
        return FixedPolicy(name, params)
    if name in LEARNED_POLICIES:
        return LearnedPolicy(name, agent)
    if name == "greedy_oracle":
        return GreedyOracle(params)
    raise ValueError(f"unknown policy: {name} (expected one of {', '.join(POLICY_KINDS)})")


@dataclass
class EvaluationResult:
    records: pd.DataFrame
    slot_rewards: pd.DataFrame
    summary: Dict[str, float] = field(default_factory=dict)


def _run_episode(policy, trace: SceneTrace, trace_index: int, seed: int, params: SystemParams, fading: bool):
    env = VrInteractionEnv(params, fading=fading)
    env.reset(trace, np.random.default_rng([seed, trace_index]))
    rewards, reports = [], []
    done = False
    while not done:
        _, r, report, done = env.step_action(policy.action(env))
        rewards.append(r)
        reports.append(report)

    delays = np.stack([rep.delays.as_matrix() for rep in reports])
    finite = np.where(np.isfinite(delays), delays, np.nan)
    record = {
        "policy": policy.name,
        "trace": trace_index,
        "seed": seed,
        "mean_reward": float(np.mean(rewards)),
        "mean_qoe": float(np.mean([rep.qoe.mean() for rep in reports])),
        "hfqoe": float(reports[-1].hfqoe),
        "success_rate": float(np.mean([rep.success.mean() for rep in reports])),
    }
    for i, name in enumerate(("t_u", "t_e", "t_d", "t_r")):
        column = finite[..., i]
        record[f"mean_{name}"] = float(np.nanmean(column)) if np.any(np.isfinite(column)) else float("nan")
    for k, value in enumerate(reports[-1].avg_qoe):
        record[f"qoe_user{k}"] = float(value)
    slots = [{"policy": policy.name, "trace": trace_index, "seed": seed, "slot": t, "reward": float(r)}
             for t, r in enumerate(rewards)]
    return record, slots


def evaluate(policy, traces: Sequence[SceneTrace], params: SystemParams, seeds: Sequence[int],
             workers: int = 1, fading: bool = True) -> EvaluationResult:
    """
    Run `policy` on every (trace, seed) pair.

    Each pair owns its environment and its RNG stream (seed, trace index), so
    results do not depend on `workers` or on execution order.
    """
    if not traces:
        raise ValueError("evaluate needs at least one trace")
    jobs = [(i, trace, seed) for seed in seeds for i, trace in enumerate(traces)]
    if workers > 1:
        with ThreadPoolExecutor(max_workers=workers) as pool:
            outputs = list(pool.map(lambda job: _run_episode(policy, job[1], job[0], job[2], params, fading), jobs))
    else:
        outputs = [_run_episode(policy, trace, i, seed, params, fading) for i, trace, seed in jobs]

    records = pd.DataFrame([record for record, _ in outputs])
    slot_rewards = pd.DataFrame([row for _, rows in outputs for row in rows])
    per_seed = records.groupby("seed")[["mean_reward", "mean_qoe", "hfqoe", "success_rate"]].mean()
    summary = {"policy": policy.name, "records": int(len(records))}
    for column in ("mean_reward", "mean_qoe", "hfqoe", "success_rate", "mean_t_u", "mean_t_e", "mean_t_d", "mean_t_r"):
        summary[column] = float(records[column].mean())
    for column in per_seed.columns:
        summary[f"{column}_seed_var"] = float(per_seed[column].var(ddof=0))
    logger.info(f"{policy.name}: mean_reward={summary['mean_reward']:.4f} "
                f"success_rate={summary['success_rate']:.3f} over {len(records)} records")
    return EvaluationResult(records=records, slot_rewards=slot_rewards, summary=summary)
