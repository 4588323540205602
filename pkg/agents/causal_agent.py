"""
Probabilistic dynamics model and causal action influence (CAI) scoring.

The inference model predicts a diagonal Gaussian over the next value of the
action-relevant state block (or the whole state, for the full-state variant).
The CAI score of an action is the mean over predicted dimensions of

    KL( p(s'_j | s, a) || 1/N sum_n p(s'_j | s, a_n) )

where a_1..a_N are candidate actions. The mixture has no closed-form KL, so each
dimension's KL is a seeded Monte-Carlo average of log p(x) - log mixture(x) with
x drawn from p.
"""

import logging
from dataclasses import dataclass
from typing import Optional, Sequence, Tuple

import numpy as np
from scipy.special import logsumexp
from scipy.stats import norm

from agents.networks import (
    AdamOptimizer,
    GaussianPrediction,
    Mlp,
    backward_and_step,
    gaussian_forward,
    gaussian_output_grad,
)
from utils import DomainError

logger = logging.getLogger(__name__)

DEFAULT_MC_SAMPLES = 32


def nll_loss(pred: GaussianPrediction, target) -> Tuple[float, np.ndarray, np.ndarray]:
    """
    Gaussian negative log-likelihood without the constant term, averaged over
    batch and dimensions.

    Returns:
        (loss, dL/dmean, dL/dvar)
    """
    target = np.asarray(target, dtype=float)
    if not np.all(np.isfinite(target)):
        raise ValueError("nll_loss target contains non-finite values")
    if target.shape != pred.mean.shape:
        raise ValueError(f"target shape {target.shape} does not match prediction {pred.mean.shape}")
    n = target.size
    residual = target - pred.mean
    loss = float(np.sum(residual ** 2 / (2.0 * pred.var) + 0.5 * np.log(pred.var)) / n)
    grad_mean = -residual / pred.var / n
    grad_var = (0.5 / pred.var - residual ** 2 / (2.0 * pred.var ** 2)) / n
    return loss, grad_mean, grad_var


def kl_gaussian_pair(mu1, var1, mu2, var2):
    """Closed-form KL(N(mu1, var1) || N(mu2, var2)), elementwise."""
    var1 = np.asarray(var1, dtype=float)
    var2 = np.asarray(var2, dtype=float)
    if np.any(var1 <= 0) or np.any(var2 <= 0):
        raise DomainError("KL needs strictly positive variances")
    diff = np.asarray(mu1, dtype=float) - np.asarray(mu2, dtype=float)
    kl = 0.5 * np.log(var2 / var1) + (var1 + diff ** 2) / (2.0 * var2) - 0.5
    return float(kl) if np.ndim(kl) == 0 else kl


class InferenceModel:
    """
    Gaussian dynamics model f(s, a) -> N(mu, sigma^2) over `target_indices` of the next state.

    Passing the s2 index set gives the partial-state model; None predicts every state dimension.
    """

    def __init__(self, state_dim: int, action_dim: int, target_indices: Optional[Sequence[int]] = None,
                 hidden: Sequence[int] = (256, 256, 256), lr: float = 1e-4, rng=None):
        self.state_dim = state_dim
        self.action_dim = action_dim
        self.target_indices = np.arange(state_dim) if target_indices is None else np.asarray(target_indices, dtype=int)
        if self.target_indices.size == 0 or self.target_indices.max() >= state_dim:
            raise ValueError("target indices must be a non-empty subset of the state")
        self.net = Mlp([state_dim + action_dim, *hidden, 2 * self.target_indices.size], "identity", rng)
        self.optimizer = AdamOptimizer(self.net.parameters(), lr)

    @property
    def output_dim(self) -> int:
        return int(self.target_indices.size)

    def predict(self, s, a) -> GaussianPrediction:
        """Accepts one state with one or many actions, or matching batches of both."""
        s = np.asarray(s, dtype=float)
        a = np.asarray(a, dtype=float)
        if s.ndim == 1 and a.ndim == 2:
            s = np.broadcast_to(s, (a.shape[0], s.shape[0]))
        return gaussian_forward(self.net, s, a)

    def train_batch(self, states, actions, next_states) -> float:
        """One Adam step on the NLL; returns the loss before the step."""
        pred = self.predict(states, actions)
        target = np.asarray(next_states, dtype=float)[..., self.target_indices]
        loss, grad_mean, grad_var = nll_loss(pred, target)
        backward_and_step(self.net, gaussian_output_grad(pred, grad_mean, grad_var), self.optimizer)
        return loss

    def to_dict(self) -> dict:
        return {
            "state_dim": self.state_dim,
            "action_dim": self.action_dim,
            "target_indices": self.target_indices.tolist(),
            "net": self.net.to_dict(),
            "optimizer": self.optimizer.to_dict(),
        }

    @classmethod
    def from_dict(cls, data: dict) -> "InferenceModel":
        model = cls.__new__(cls)
        model.state_dim = int(data["state_dim"])
        model.action_dim = int(data["action_dim"])
        model.target_indices = np.asarray(data["target_indices"], dtype=int)
        model.net = Mlp.from_dict(data["net"])
        model.optimizer = AdamOptimizer.from_dict(data["optimizer"], model.net.parameters())
        return model


def train_inference(model: InferenceModel, batch) -> float:
    """
    Args:
        batch: (states, actions, next_states) arrays with a leading batch axis
    """
    states, actions, next_states = batch
    if len(states) == 0:
        raise ValueError("train_inference needs a non-empty batch")
    return model.train_batch(states, actions, next_states)


@dataclass
class CaiResult:
    score: float
    per_dim: np.ndarray
    standard_error: float


@dataclass
class CaiBatch:
    scores: np.ndarray
    standard_errors: np.ndarray
    per_dim: np.ndarray


def _mixture_kl(mean_p, var_p, mean_q, var_q, rng, samples: int):
    """
    Monte-Carlo KL of each row of p against the equal-weight mixture of q.

    Args:
        mean_p, var_p: (B, d)
        mean_q, var_q: (N, d)

    Returns:
        per-dimension KL (B, d) and per-sample log-ratio averaged over dims (B, L)
    """
    std_p = np.sqrt(var_p)
    x = mean_p[:, None, :] + std_p[:, None, :] * rng.standard_normal((mean_p.shape[0], samples, mean_p.shape[1]))
    log_p = norm.logpdf(x, mean_p[:, None, :], std_p[:, None, :])
    components = norm.logpdf(x[:, :, None, :], mean_q[None, None], np.sqrt(var_q)[None, None])
    log_mix = logsumexp(components, axis=2) - np.log(mean_q.shape[0])
    ratio = log_p - log_mix
    return ratio.mean(axis=1), ratio.mean(axis=2)


def _standard_error(per_sample) -> np.ndarray:
    samples = per_sample.shape[-1]
    if samples < 2:
        return np.zeros(per_sample.shape[:-1])
    return per_sample.std(axis=-1, ddof=1) / np.sqrt(samples)


def cai_score(model, s, a, candidates, rng, samples: int = DEFAULT_MC_SAMPLES) -> CaiResult:
    """
    CAI of action `a` in state `s` against the mixture over `candidates`.

    `model` only needs predict(s, actions) -> GaussianPrediction.
    """
    candidates = np.atleast_2d(np.asarray(candidates, dtype=float))
    if candidates.shape[0] == 0:
        raise ValueError("cai_score needs at least one candidate action")
    p = model.predict(s, np.atleast_2d(np.asarray(a, dtype=float)))
    q = model.predict(s, candidates)
    per_dim, per_sample = _mixture_kl(np.atleast_2d(p.mean), np.atleast_2d(p.var), q.mean, q.var, rng, samples)
    return CaiResult(
        score=float(per_dim[0].mean()),
        per_dim=per_dim[0],
        standard_error=float(_standard_error(per_sample)[0]),
    )


def cai_scores(model, s, candidates, rng, samples: int = DEFAULT_MC_SAMPLES) -> CaiBatch:
    """
    CAI of every candidate against the mixture over all candidates, in one pass.

    Returns:
        CaiBatch with scores (N,), standard errors (N,) and per-dimension KL (N, d)
    """
    candidates = np.atleast_2d(np.asarray(candidates, dtype=float))
    if candidates.shape[0] == 0:
        raise ValueError("cai_scores needs at least one candidate action")
    q = model.predict(s, candidates)
    per_dim, per_sample = _mixture_kl(q.mean, q.var, q.mean, q.var, rng, samples)
    return CaiBatch(scores=per_dim.mean(axis=1), standard_errors=_standard_error(per_sample), per_dim=per_dim)
