"""
Two-regime toy environment with a known causal structure.

State (z, x): z in {0, 1} is the regime (action-irrelevant block), x the
action-relevant block. When z = 1 the action sets the next x up to small noise;
when z = 0 the next x is drawn from a broad Gaussian whatever the action.
Reward is -(x' - target)^2. Same reset/step interface as VrInteractionEnv, with
an integer episode length in place of a scene trace.
"""

from dataclasses import dataclass

import numpy as np

from utils import UsageError, make_rng
from workflows.vr_env import EnvState


@dataclass
class SyntheticReport:
    regime: int
    x_next: float
    reward: float


class TwoRegimeEnv:
    state_dim = 2
    action_dim = 1
    s1_mask = np.array([0])
    s2_mask = np.array([1])

    def __init__(self, control_noise: float = 0.02, free_mean: float = 0.5, free_std: float = 0.2,
                 target: float = 0.8, p_controllable: float = 0.5):
        self.control_noise = control_noise
        self.free_mean = free_mean
        self.free_std = free_std
        self.target = target
        self.p_controllable = p_controllable
        self.rng = None
        self.slots = 0
        self.slot = 0
        self.done = True
        self.state = None

    def _draw_regime(self) -> int:
        return int(self.rng.random() < self.p_controllable)

    def reset(self, trace=100, rng=None) -> EnvState:
        """`trace` is the episode length in slots."""
        self.rng = make_rng(rng)
        self.slots = int(trace)
        if self.slots < 1:
            raise ValueError("episode length must be at least 1")
        self.slot = 0
        self.done = False
        x = self.rng.normal(self.free_mean, self.free_std)
        self.state = EnvState(s1=np.array([float(self._draw_regime())]), s2=np.array([x]))
        return self.state

    def transition(self, regime: int, action: float) -> float:
        if regime == 1:
            return float(action + self.rng.normal(0.0, self.control_noise))
        return float(self.rng.normal(self.free_mean, self.free_std))

    def step(self, raw):
        if self.done:
            raise UsageError("episode is done; call reset() first")
        action = float(np.asarray(raw, dtype=float).reshape(-1)[0])
        regime = int(self.state.s1[0])
        x_next = self.transition(regime, action)
        value = -(x_next - self.target) ** 2
        self.slot += 1
        self.done = self.slot >= self.slots
        self.state = EnvState(s1=np.array([float(self._draw_regime())]), s2=np.array([x_next]))
        return self.state, value, SyntheticReport(regime=regime, x_next=x_next, reward=value), self.done
