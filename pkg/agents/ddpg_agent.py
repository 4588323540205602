"""
DDPG with causal-action-influence exploration.

Variants:
    ps_cddpg  inference model over the action-relevant state block, active exploration
    cai_ddpg  inference model over the full state, active exploration
    ddpg      no inference model, Gaussian action noise
"""

import logging
import os
from collections import deque
from dataclasses import dataclass
from typing import Callable, List, Optional, Sequence

import numpy as np

from agents.causal_agent import InferenceModel, cai_scores, train_inference
from agents.networks import AdamOptimizer, Mlp, backward_and_step, read_checkpoint, soft_update, write_checkpoint
from config import AgentConfig
from utils import UsageError, make_rng, spawn_rngs

logger = logging.getLogger(__name__)

ACTION_CLIP = 1e-6


class ReplayBuffer:
    """FIFO transition store; the oldest transition is evicted first."""

    def __init__(self, capacity: int):
        if capacity < 1:
            raise ValueError("replay capacity must be positive")
        self.capacity = capacity
        self._items = deque(maxlen=capacity)

    def __len__(self):
        return len(self._items)

    def add(self, state, action, reward: float, next_state, done: bool):
        self._items.append((
            np.asarray(state, dtype=float).copy(),
            np.asarray(action, dtype=float).copy(),
            float(reward),
            np.asarray(next_state, dtype=float).copy(),
            bool(done),
        ))

    def oldest(self):
        return self._items[0]

    def sample(self, batch_size: int, rng):
        """Uniform sample without replacement, as stacked arrays (s, a, r, s', done)."""
        if batch_size > len(self._items):
            raise ValueError(f"cannot sample {batch_size} from {len(self._items)} transitions")
        picks = rng.choice(len(self._items), size=batch_size, replace=False)
        rows = [self._items[i] for i in picks]
        return (
            np.stack([r[0] for r in rows]),
            np.stack([r[1] for r in rows]),
            np.array([r[2] for r in rows]),
            np.stack([r[3] for r in rows]),
            np.array([r[4] for r in rows], dtype=float),
        )


@dataclass
class RankWeights:
    ranks: np.ndarray
    probabilities: np.ndarray


def rank_weights(scores) -> RankWeights:
    """
    Rank candidates by CAI (1 = highest, ties by index) and weight them by
    (N - R) / sum(R), renormalized to a proper distribution.

    Examples:
        >>> rank_weights([0.9, 0.5, 0.3, 0.1]).ranks.tolist()
        [1, 2, 3, 4]
    """
    scores = np.asarray(scores, dtype=float)
    n = scores.size
    if n < 2:
        raise ValueError("rank_weights needs at least 2 candidates")
    order = np.argsort(-scores, kind="stable")
    ranks = np.empty(n, dtype=int)
    ranks[order] = np.arange(1, n + 1)
    raw = (n - ranks) / ranks.sum()
    return RankWeights(ranks=ranks, probabilities=raw / raw.sum())


@dataclass
class ExplorationRecord:
    candidates: np.ndarray
    scores: np.ndarray
    chosen: int
    per_dim: Optional[np.ndarray] = None

    def row(self) -> dict:
        """Flat diagnostics of the chosen candidate: its rank, score and per-dimension KL."""
        weights = rank_weights(self.scores)
        row = {
            "chosen": self.chosen,
            "rank": int(weights.ranks[self.chosen]),
            "cai": float(self.scores[self.chosen]),
            "cai_mean": float(np.mean(self.scores)),
            "cai_max": float(np.max(self.scores)),
        }
        if self.per_dim is not None:
            for i, value in enumerate(self.per_dim[self.chosen]):
                row[f"kl_{i:03d}"] = float(value)
        return row


def explore(actor: Mlp, inference: Optional[InferenceModel], state, config: AgentConfig, rng,
            mode: Optional[str] = None, record: Optional[list] = None) -> np.ndarray:
    """
    Behaviour action. With probability 1 - epsilon this is the actor's output.
    Otherwise, in active mode, N perturbed copies of it are scored by CAI and one
    is picked by rank weight (or the best, with selection="argmax"); in noise
    mode a single perturbed copy is returned.
    """
    mode = mode or config.mode
    action = np.clip(actor.forward(state), ACTION_CLIP, 1.0 - ACTION_CLIP)
    if mode == "none" or config.epsilon <= 0.0:
        return action
    if config.epsilon < 1.0 and rng.random() >= config.epsilon:
        return action

    sigma = np.sqrt(config.cai.noise_variance)
    if mode == "noise":
        return np.clip(action + rng.normal(0.0, sigma, size=action.shape), ACTION_CLIP, 1.0 - ACTION_CLIP)
    if inference is None:
        raise UsageError("active exploration needs an inference model")

    noise = rng.normal(0.0, sigma, size=(config.cai.candidates, action.size))
    candidates = np.clip(action + noise, ACTION_CLIP, 1.0 - ACTION_CLIP)
    batch = cai_scores(inference, state, candidates, rng, config.cai.mc_kl_samples)
    scores = batch.scores
    weights = rank_weights(scores)
    if config.selection == "argmax":
        chosen = int(np.argmin(weights.ranks))
    else:
        chosen = int(rng.choice(candidates.shape[0], p=weights.probabilities))
    if record is not None:
        record.append(ExplorationRecord(candidates=candidates, scores=scores, chosen=chosen, per_dim=batch.per_dim))
    return candidates[chosen]


def critic_target(rewards, next_states, dones, target_actor: Mlp, target_critic: Mlp, gamma: float) -> np.ndarray:
    """y = r + gamma Q'(s', X'(s')), with the bootstrap dropped on terminal transitions."""
    rewards = np.asarray(rewards, dtype=float)
    next_states = np.atleast_2d(np.asarray(next_states, dtype=float))
    if next_states.shape[0] != rewards.shape[0]:
        raise ValueError("rewards and next states disagree on batch size")
    next_actions = target_actor.forward(next_states)
    q_next = target_critic.forward(np.concatenate([next_states, next_actions], axis=1))[:, 0]
    return rewards + gamma * (1.0 - np.asarray(dones, dtype=float)) * q_next


@dataclass
class TrainStats:
    critic_loss: float
    actor_objective: float


class DdpgAgent:
    def __init__(self, state_dim: int, action_dim: int, config: AgentConfig,
                 s2_indices: Optional[Sequence[int]] = None, seed=0):
        """Build online and target networks; `seed` feeds independent init/explore/replay streams."""
        self.state_dim = state_dim
        self.action_dim = action_dim
        self.config = config
        self.s2_indices = None if s2_indices is None else np.asarray(s2_indices, dtype=int)
        self.init_rng, self.explore_rng, self.replay_rng = spawn_rngs(seed, 3)

        self.actor = Mlp([state_dim, *config.actor_hidden, action_dim], "sigmoid", self.init_rng)
        self.critic = Mlp([state_dim + action_dim, *config.critic_hidden, 1], "identity", self.init_rng)
        self.target_actor = self.actor.copy()
        self.target_critic = self.critic.copy()
        self.actor_optimizer = AdamOptimizer(self.actor.parameters(), config.lr_actor)
        self.critic_optimizer = AdamOptimizer(self.critic.parameters(), config.lr_critic)

        self.inference = None
        if config.variant != "ddpg":
            targets = self.s2_indices if config.variant == "ps_cddpg" else None
            if config.variant == "ps_cddpg" and targets is None:
                raise ValueError("ps_cddpg needs the action-relevant state indices")
            self.inference = InferenceModel(state_dim, action_dim, targets, config.inference_hidden,
                                            config.lr_inference, self.init_rng)
        self.replay = ReplayBuffer(config.capacity)
        self.exploration_log: Optional[list] = None

    @property
    def exploration_mode(self) -> str:
        if self.config.variant == "ddpg" and self.config.mode == "active":
            return "noise"
        return self.config.mode

    def act(self, state) -> np.ndarray:
        """Actor output kept inside the open interval (0, 1)."""
        return np.clip(self.actor.forward(np.asarray(state, dtype=float)), ACTION_CLIP, 1.0 - ACTION_CLIP)

    def explore(self, state) -> np.ndarray:
        return explore(self.actor, self.inference, np.asarray(state, dtype=float), self.config,
                       self.explore_rng, self.exploration_mode, self.exploration_log)

    def remember(self, state, action, reward, next_state, done):
        self.replay.add(state, action, reward, next_state, done)

    def train_step(self) -> Optional[TrainStats]:
        """One critic and actor update plus soft target updates; None during warm-up."""
        if len(self.replay) < self.config.warmup:
            return None
        s, a, r, s_next, done = self.replay.sample(self.config.batch_size, self.replay_rng)
        batch = s.shape[0]

        y = critic_target(r, s_next, done, self.target_actor, self.target_critic, self.config.gamma)
        q = self.critic.forward(np.concatenate([s, a], axis=1))[:, 0]
        critic_loss = float(np.mean((q - y) ** 2))
        backward_and_step(self.critic, (2.0 * (q - y) / batch)[:, None], self.critic_optimizer)

        # Ascend Q(s, X(s)): dQ/da from the critic, then through the actor.
        policy_actions = self.actor.forward(s)
        q_policy = self.critic.forward(np.concatenate([s, policy_actions], axis=1))
        _, grad_input = self.critic.backward(np.full_like(q_policy, -1.0 / batch))
        backward_and_step(self.actor, grad_input[:, self.state_dim:], self.actor_optimizer)

        soft_update(self.target_critic, self.critic, self.config.tau)
        soft_update(self.target_actor, self.actor, self.config.tau)
        return TrainStats(critic_loss=critic_loss, actor_objective=float(np.mean(q_policy)))

    def update_inference(self) -> Optional[float]:
        if self.inference is None or len(self.replay) < self.config.warmup:
            return None
        s, a, _, s_next, _ = self.replay.sample(self.config.inference_batch_size, self.replay_rng)
        return train_inference(self.inference, (s, a, s_next))

    def state_dict(self) -> dict:
        return {
            "state_dim": self.state_dim,
            "action_dim": self.action_dim,
            "config": self.config.model_dump(mode="json"),
            "s2_indices": None if self.s2_indices is None else self.s2_indices.tolist(),
            "actor": self.actor.to_dict(),
            "critic": self.critic.to_dict(),
            "target_actor": self.target_actor.to_dict(),
            "target_critic": self.target_critic.to_dict(),
            "actor_optimizer": self.actor_optimizer.to_dict(),
            "critic_optimizer": self.critic_optimizer.to_dict(),
            "inference": None if self.inference is None else self.inference.to_dict(),
            "rng": {
                "init": self.init_rng.bit_generator.state,
                "explore": self.explore_rng.bit_generator.state,
                "replay": self.replay_rng.bit_generator.state,
            },
        }

    def save(self, path: str):
        write_checkpoint(path, self.state_dict())

    @classmethod
    def load(cls, path: str) -> "DdpgAgent":
        """Restore networks, optimizer moments and RNG streams. The replay buffer is not persisted."""
        data = read_checkpoint(path)
        config = AgentConfig.model_validate(data["config"])
        agent = cls.__new__(cls)
        agent.state_dim = int(data["state_dim"])
        agent.action_dim = int(data["action_dim"])
        agent.config = config
        agent.s2_indices = None if data["s2_indices"] is None else np.asarray(data["s2_indices"], dtype=int)
        agent.actor = Mlp.from_dict(data["actor"])
        agent.critic = Mlp.from_dict(data["critic"])
        agent.target_actor = Mlp.from_dict(data["target_actor"])
        agent.target_critic = Mlp.from_dict(data["target_critic"])
        agent.actor_optimizer = AdamOptimizer.from_dict(data["actor_optimizer"], agent.actor.parameters())
        agent.critic_optimizer = AdamOptimizer.from_dict(data["critic_optimizer"], agent.critic.parameters())
        agent.inference = None if data["inference"] is None else InferenceModel.from_dict(data["inference"])
        agent.init_rng, agent.explore_rng, agent.replay_rng = (np.random.default_rng() for _ in range(3))
        agent.init_rng.bit_generator.state = data["rng"]["init"]
        agent.explore_rng.bit_generator.state = data["rng"]["explore"]
        agent.replay_rng.bit_generator.state = data["rng"]["replay"]
        agent.replay = ReplayBuffer(config.capacity)
        agent.exploration_log = None
        return agent


def _episode_row(episode: int, rewards: List[float], reports: list, critic_losses: List[float],
                 inference_losses: List[float]) -> dict:
    row = {
        "episode": episode,
        "mean_reward": float(np.mean(rewards)),
        "critic_loss": float(np.mean(critic_losses)) if critic_losses else np.nan,
        "inference_loss": float(np.mean(inference_losses)) if inference_losses else np.nan,
    }
    if reports and hasattr(reports[-1], "qoe"):
        row["mean_qoe"] = float(np.mean([r.qoe.mean() for r in reports]))
        for k, value in enumerate(reports[-1].avg_qoe):
            row[f"qoe_user{k}"] = float(value)
        row["hfqoe"] = float(reports[-1].hfqoe)
        row["success_rate"] = float(np.mean([r.success.mean() for r in reports]))
        delays = np.stack([r.delays.as_matrix() for r in reports])
        delays = np.where(np.isfinite(delays), delays, np.nan)
        for i, name in enumerate(("t_u", "t_e", "t_d", "t_r")):
            row[f"mean_{name}"] = float(np.nanmean(delays[..., i])) if np.any(np.isfinite(delays[..., i])) else np.nan
    return row


def train(env_factory: Callable, traces: Sequence, config: AgentConfig, rng=None, agent: Optional[DdpgAgent] = None,
          seed=0, checkpoint_dir: Optional[str] = None, checkpoint_every: int = 0,
          on_episode: Optional[Callable[[dict], None]] = None,
          on_exploration: Optional[Callable[[dict], None]] = None):
    """
    Run config.episodes training episodes, each on a trace drawn from `traces`.

    Per slot: explore, step, store, one actor-critic step, one inference step.
    `on_exploration` receives one diagnostics row (episode, slot, rank, CAI,
    per-dimension KL) for every slot that explored by CAI.

    Returns:
        (agent, list of per-episode metric dicts)
    """
    if not traces:
        raise ValueError("train needs at least one trace")
    rng = make_rng(rng)
    env = env_factory()
    if agent is None:
        agent = DdpgAgent(env.state_dim, env.action_dim, config, getattr(env, "s2_mask", None), seed=seed)

    if on_exploration is not None and agent.exploration_log is None:
        agent.exploration_log = []

    history = []
    for episode in range(config.episodes):
        trace = traces[int(rng.integers(len(traces)))]
        state = env.reset(trace, rng)
        rewards, reports, critic_losses, inference_losses = [], [], [], []
        done = False
        slot = 0
        while not done:
            s = state.vector
            logged = len(agent.exploration_log or ())
            raw = agent.explore(s)
            if on_exploration is not None and len(agent.exploration_log) > logged:
                on_exploration({"episode": episode, "slot": slot, **agent.exploration_log.pop().row()})
            slot += 1
            state, r, report, done = env.step(raw)
            agent.remember(s, raw, r, state.vector, done)
            stats = agent.train_step()
            if stats is not None:
                critic_losses.append(stats.critic_loss)
            inference_loss = agent.update_inference()
            if inference_loss is not None:
                inference_losses.append(inference_loss)
            rewards.append(r)
            reports.append(report)

        row = _episode_row(episode, rewards, reports, critic_losses, inference_losses)
        history.append(row)
        if on_episode is not None:
            on_episode(row)
        logger.info(f"episode {episode}: mean_reward={row['mean_reward']:.4f} "
                    f"replay={len(agent.replay)}")
        if checkpoint_dir and checkpoint_every and (episode + 1) % checkpoint_every == 0:
            agent.save(os.path.join(checkpoint_dir, f"checkpoint_{episode + 1:05d}.json"))
    return agent, history
