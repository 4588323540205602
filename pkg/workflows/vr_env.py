"""
Slot-based environment for multi-user VR interaction with keyframe transmission.

Each slot the policy splits the server bandwidth b_max and CPU f_max among users
and picks how many keyframes per second F[k, a] to send for avatars at each
attention level. The environment then computes, per user:

    W_u = xi delta dt                                     (upload, bits)
    W_d = sum_a N[k,a] F[k,a] delta dt                    (download, bits)
    T_u + T_d = (W_u + W_d) / (omega R_k)                 split in proportion to W_u : W_d
    T_e = c_e sum_a N F delta dt / f_e_k
    T_r = (c_r1 sum_a N (xi - F) delta dt + c_r2 xi delta dt) / f_r_k
    QoE = (1 - T/T_max) sum_a (a N[k,a] / N_k) ln(F[k,a] dt / 2),   0 when T >= T_max

Cycle coefficients count cycles per `cycle_basis_bits` bits of motion data.

The functions below broadcast over leading batch axes, so the same code scores a
single action or a grid of candidate actions against one channel realization.
"""

import logging
import math
from dataclasses import dataclass, field
from typing import Optional, Tuple, Union

import numpy as np

from config import SystemParams
from services.channel_model import ChannelRealization, ChannelService
from services.scene_trace import ATTENTION_LEVELS, AttentionSnapshot, SceneTrace, attention_snapshot
from utils import UsageError, make_rng

logger = logging.getLogger(__name__)

LEVEL_WEIGHTS = np.arange(ATTENTION_LEVELS, dtype=float)
ALL_LEVELS = np.ones(ATTENTION_LEVELS, dtype=bool)
DELAY_FIELDS = 4
PER_USER_S2 = DELAY_FIELDS + 2


@dataclass
class RawAction:
    """Actor output: every component strictly inside (0, 1)."""

    b_hat: np.ndarray
    f_hat: np.ndarray
    F_hat: np.ndarray

    @classmethod
    def from_vector(cls, vector, users: int) -> "RawAction":
        vector = np.asarray(vector, dtype=float).reshape(-1)
        if vector.size != action_dim(users):
            raise ValueError(f"raw action has {vector.size} components, expected {action_dim(users)}")
        return cls(
            b_hat=vector[:users],
            f_hat=vector[users:2 * users],
            F_hat=vector[2 * users:].reshape(users, ATTENTION_LEVELS),
        )

    def to_vector(self) -> np.ndarray:
        return np.concatenate([self.b_hat, self.f_hat, self.F_hat.reshape(-1)])


@dataclass
class Action:
    """Physical allocation: Hz, Hz, keyframes per second."""

    b: np.ndarray
    f_e: np.ndarray
    F: np.ndarray
    levels_sent: np.ndarray = field(default_factory=lambda: ALL_LEVELS.copy())
    extract_keyframes: bool = True


@dataclass
class DelayBreakdown:
    t_u: np.ndarray
    t_e: np.ndarray
    t_d: np.ndarray
    t_r: np.ndarray

    @property
    def total(self) -> np.ndarray:
        return self.t_u + self.t_e + self.t_d + self.t_r

    def as_matrix(self) -> np.ndarray:
        """Per-user rows (T_u, T_e, T_d, T_r)."""
        return np.stack([self.t_u, self.t_e, self.t_d, self.t_r], axis=-1)


@dataclass
class QoEReport:
    qoe: np.ndarray
    avg_qoe: np.ndarray
    high: float
    low: float
    sigma_star: float
    hfqoe: float
    qoe_flags: np.ndarray
    hfqoe_flag: bool
    reward: float
    delays: DelayBreakdown
    success: np.ndarray
    slot: int


@dataclass
class EnvState:
    """s1: attention counts (action-irrelevant). s2: delays, QoE and statistics (action-relevant)."""

    s1: np.ndarray
    s2: np.ndarray

    @property
    def vector(self) -> np.ndarray:
        return np.concatenate([self.s1, self.s2])


def action_dim(users: int) -> int:
    return 2 * users + ATTENTION_LEVELS * users


def state_dim(users: int) -> int:
    return ATTENTION_LEVELS * users + PER_USER_S2 * users + 2


def state_masks(users: int) -> Tuple[np.ndarray, np.ndarray]:
    """Index arrays of the s1 and s2 blocks inside EnvState.vector."""
    split = ATTENTION_LEVELS * users
    return np.arange(split), np.arange(split, state_dim(users))


def normalize_action(raw: RawAction, params: SystemParams) -> Action:
    """
    Turn ratios into a feasible allocation.

    b and f_e are shares of b_max and f_max; F = clamp(ceil(F_hat xi), 2, xi).
    """
    b_sum, f_sum = float(np.sum(raw.b_hat)), float(np.sum(raw.f_hat))
    if b_sum <= 0 or f_sum <= 0:
        raise ArithmeticError("raw action shares sum to zero")
    b = params.b_max * np.asarray(raw.b_hat, dtype=float) / b_sum
    f_e = params.f_max * np.asarray(raw.f_hat, dtype=float) / f_sum
    F = np.clip(np.ceil(np.asarray(raw.F_hat, dtype=float) * params.fps), 2, params.fps).astype(int)
    return Action(b=b, f_e=f_e, F=F)


def data_volumes(counts, F, params: SystemParams, levels_sent=ALL_LEVELS):
    """
    Upload and download volume (bits) per user for one slot.

    Args:
        counts: N[k, a], shape (K, 4)
        F: keyframes per second, shape (..., K, 4)
        levels_sent: which attention levels are transmitted at all

    Returns:
        (W_u, W_d), each shaped like F without the level axis
    """
    per_frame = params.frame_bits * params.slot_seconds
    sent = np.asarray(counts, dtype=float) * np.asarray(levels_sent, dtype=float)
    w_d = np.sum(sent * np.asarray(F, dtype=float), axis=-1) * per_frame
    w_u = np.full_like(w_d, params.fps * per_frame)
    return w_u, w_d


def latency_breakdown(w_u, w_d, counts, F, f_e, rate, f_r, params: SystemParams,
                      levels_sent=ALL_LEVELS, extract_keyframes=True) -> DelayBreakdown:
    """
    Per-user latency terms in seconds. A zero rate or CPU share yields infinite delay.
    """
    per_frame = params.frame_bits * params.slot_seconds / params.cycle_basis_bits
    sent = np.asarray(counts, dtype=float) * np.asarray(levels_sent, dtype=float)
    F = np.asarray(F, dtype=float)
    rate = np.asarray(rate, dtype=float)
    f_e = np.asarray(f_e, dtype=float)

    with np.errstate(divide="ignore", invalid="ignore"):
        volume = w_u + w_d
        comm = np.where(rate > 0, volume / (params.compression * rate), np.inf)
        upload_share = np.where(volume > 0, w_u / volume, 0.0)
        t_u = comm * upload_share
        t_d = np.where(np.isfinite(comm), comm - t_u, np.inf)

        extracted = params.c_e * np.sum(sent * F, axis=-1) * per_frame
        if extract_keyframes:
            t_e = np.where(extracted > 0, np.where(f_e > 0, extracted / f_e, np.inf), 0.0)
        else:
            t_e = np.zeros_like(extracted)

        reconstructed = params.c_r1 * np.sum(sent * (params.fps - F), axis=-1) * per_frame
        rendered = params.c_r2 * params.fps * per_frame
        t_r = (reconstructed + rendered) / np.asarray(f_r, dtype=float)
    return DelayBreakdown(t_u=t_u, t_e=t_e, t_d=t_d, t_r=t_r)


def qoe(counts, F, total_delay, params: SystemParams):
    """
    Latency-discounted, attention-weighted keyframe log-utility per user.

    Users who see nobody (N_k = 0) score 0; so does any user at or beyond T_max.
    """
    counts = np.asarray(counts, dtype=float)
    totals = counts.sum(axis=-1)
    with np.errstate(divide="ignore", invalid="ignore"):
        weights = np.where(totals[:, None] > 0, LEVEL_WEIGHTS * counts / totals[:, None], 0.0)
        utility = np.sum(weights * np.log(np.asarray(F, dtype=float) * params.slot_seconds / 2.0), axis=-1)
    utility = np.maximum(utility, 0.0)
    total_delay = np.asarray(total_delay, dtype=float)
    headroom = np.where(total_delay < params.t_max, 1.0 - total_delay / params.t_max, 0.0)
    return headroom * utility


def hfqoe(avg_qoe, high, low):
    """
    Horizon fairness 1 - 2 sigma* / (H - L); 1 when H == L.

    sigma* is the population standard deviation over users (last axis) of avg_qoe.
    """
    sigma = np.std(np.asarray(avg_qoe, dtype=float), axis=-1)
    spread = np.asarray(high, dtype=float) - np.asarray(low, dtype=float)
    with np.errstate(divide="ignore", invalid="ignore"):
        value = np.where(spread > 0, 1.0 - 2.0 * sigma / spread, 1.0)
    return float(value) if np.ndim(value) == 0 else value


def reward(qoe_values, hfqoe_value, params: SystemParams):
    """
    Sum of QoE minus threshold penalties.

    Returns:
        (reward, per-user QoE flags, fairness flag)
    """
    qoe_values = np.asarray(qoe_values, dtype=float)
    qoe_flags = qoe_values < params.qoe_th
    hf_flag = np.asarray(hfqoe_value) < params.hfqoe_th
    value = qoe_values.sum(axis=-1) - params.omega1 * qoe_flags.sum(axis=-1) - params.omega2 * hf_flag
    return value, qoe_flags, hf_flag


class RunningQoE:
    """Per-episode QoE history: running means per user and the running extrema."""

    def __init__(self, users: int):
        self.users = users
        self.reset()

    def reset(self):
        self.sums = np.zeros(self.users)
        self.count = 0
        self.high = -math.inf
        self.low = math.inf

    def preview(self, qoe_values):
        """Statistics after appending qoe_values (shape (..., K)) without storing them."""
        qoe_values = np.asarray(qoe_values, dtype=float)
        avg = (self.sums + qoe_values) / (self.count + 1)
        high = np.maximum(self.high, qoe_values.max(axis=-1))
        low = np.minimum(self.low, qoe_values.min(axis=-1))
        return avg, high, low, hfqoe(avg, high, low)

    def update(self, qoe_values):
        avg, high, low, fairness = self.preview(qoe_values)
        self.sums = self.sums + np.asarray(qoe_values, dtype=float)
        self.count += 1
        self.high, self.low = float(high), float(low)
        return avg, self.high, self.low, float(fairness)

    @property
    def average(self) -> np.ndarray:
        return self.sums / self.count if self.count else np.zeros(self.users)


class VrInteractionEnv:
    """
    reset(trace, rng) starts an episode on a scene trace; step(raw_action) advances
    one slot. The channel of a slot is drawn when the slot becomes current, so
    preview_rewards() can score candidate allocations against it.
    """

    def __init__(self, params: SystemParams, fading: bool = True):
        """Initialize the environment for params.users users"""
        self.params = params
        self.users = params.users
        self.channel_service = ChannelService(params.channel, self.users, fading=fading)
        self.stats = RunningQoE(self.users)
        self.s1_mask, self.s2_mask = state_masks(self.users)
        self.trace: Optional[SceneTrace] = None
        self.snapshots = []
        self.slot = 0
        self.done = True
        self.f_r = None
        self.channel: Optional[ChannelRealization] = None
        self.rng = None
        self.state: Optional[EnvState] = None

    @property
    def state_dim(self) -> int:
        return state_dim(self.users)

    @property
    def action_dim(self) -> int:
        return action_dim(self.users)

    @property
    def current_snapshot(self) -> AttentionSnapshot:
        return self.snapshots[min(self.slot, len(self.snapshots) - 1)]

    def reset(self, trace: SceneTrace, rng=None) -> EnvState:
        if trace is None or trace.duration < 1:
            raise ValueError("reset needs a non-empty trace")
        if trace.users != self.users:
            raise ValueError(f"trace has {trace.users} users, environment expects {self.users}")
        self.rng = make_rng(rng)
        self.trace = trace
        self.snapshots = [attention_snapshot(poses) for poses in trace.slots]
        self.slot = 0
        self.done = False
        self.stats.reset()
        low, high = self.params.f_r_range
        self.f_r = self.rng.uniform(low, high, size=self.users)
        self.channel = self.channel_service.sample(self.rng, slot=0)
        self.state = EnvState(
            s1=self.snapshots[0].counts.reshape(-1).astype(float),
            s2=np.zeros(PER_USER_S2 * self.users + 2),
        )
        logger.debug(f"reset: {trace.duration} slots, f_r (GHz) = {np.round(self.f_r / 1e9, 3).tolist()}")
        return self.state

    def step(self, raw: Union[RawAction, np.ndarray]):
        """
        Advance one slot with an actor output.

        Returns:
            (next EnvState, reward, QoEReport, done)
        """
        if not isinstance(raw, RawAction):
            raw = RawAction.from_vector(raw, self.users)
        return self.step_action(normalize_action(raw, self.params))

    def _evaluate(self, snapshot: AttentionSnapshot, action: Action) -> Tuple[DelayBreakdown, np.ndarray]:
        counts = snapshot.counts
        w_u, w_d = data_volumes(counts, action.F, self.params, action.levels_sent)
        rate = self.channel_service.rate(action.b, self.channel.g_sq)
        if np.any(rate <= 0):
            logger.warning(f"slot {self.slot}: zero-rate link for users {np.flatnonzero(rate <= 0).tolist()}")
        delays = latency_breakdown(w_u, w_d, counts, action.F, action.f_e, rate, self.f_r, self.params,
                                   action.levels_sent, action.extract_keyframes)
        return delays, qoe(counts, action.F, delays.total, self.params)

    def step_action(self, action: Action):
        """Advance one slot with an already normalized allocation."""
        if self.done:
            raise UsageError("episode is done; call reset() first")
        snapshot = self.snapshots[self.slot]
        delays, qoe_values = self._evaluate(snapshot, action)
        avg, high, low, fairness = self.stats.update(qoe_values)
        value, qoe_flags, hf_flag = reward(qoe_values, fairness, self.params)
        total = delays.total
        report = QoEReport(
            qoe=qoe_values,
            avg_qoe=avg,
            high=high,
            low=low,
            sigma_star=float(np.std(avg)),
            hfqoe=fairness,
            qoe_flags=qoe_flags,
            hfqoe_flag=bool(hf_flag),
            reward=float(value),
            delays=delays,
            success=total <= self.params.t_max,
            slot=self.slot,
        )

        self.slot += 1
        self.done = self.slot >= self.trace.duration
        next_counts = self.snapshots[min(self.slot, self.trace.duration - 1)].counts
        # Infinite delays are capped at one slot inside the state.
        delay_block = np.minimum(delays.as_matrix(), self.params.slot_seconds)
        per_user = np.concatenate([delay_block, qoe_values[:, None], avg[:, None]], axis=1)
        self.state = EnvState(
            s1=next_counts.reshape(-1).astype(float),
            s2=np.concatenate([per_user.reshape(-1), [high, low]]),
        )
        if not self.done:
            self.channel = self.channel_service.sample(self.rng, slot=self.slot)
        logger.debug(f"slot {report.slot}: reward={report.reward:.4f} hfqoe={fairness:.3f} "
                     f"success={int(report.success.sum())}/{self.users}")
        return self.state, report.reward, report, self.done

    def preview_rewards(self, b, f_e, F, levels_sent=ALL_LEVELS, extract_keyframes=True):
        """
        Rewards the current slot would give for a batch of allocations.

        Args:
            b, f_e: shape (C, K)
            F: shape (C, K, 4)

        Returns:
            Array of C rewards; environment state is left untouched
        """
        if self.done:
            raise UsageError("episode is done; call reset() first")
        counts = self.snapshots[self.slot].counts
        w_u, w_d = data_volumes(counts, F, self.params, levels_sent)
        rate = self.channel_service.rate(b, self.channel.g_sq)
        delays = latency_breakdown(w_u, w_d, counts, F, f_e, rate, self.f_r, self.params,
                                   levels_sent, extract_keyframes)
        qoe_values = qoe(counts, F, delays.total, self.params)
        fairness = self.stats.preview(qoe_values)[3]
        return reward(qoe_values, fairness, self.params)[0]
