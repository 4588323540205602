import math

import numpy as np
import pytest
from scipy.special import logsumexp
from scipy.stats import norm

from agents.causal_agent import (
    InferenceModel,
    cai_score,
    cai_scores,
    kl_gaussian_pair,
    nll_loss,
    train_inference,
)
from agents.networks import GaussianPrediction
from utils import DomainError
from workflows.synthetic_env import TwoRegimeEnv


class ActionBlindModel:
    """Same Gaussian for every action."""

    def predict(self, s, a):
        rows = np.atleast_2d(a).shape[0]
        return GaussianPrediction(mean=np.tile([0.3, -1.0], (rows, 1)), var=np.tile([0.5, 2.0], (rows, 1)))


class ShiftModel:
    """Unit-variance Gaussian centred on the first action component."""

    def predict(self, s, a):
        a = np.atleast_2d(a)
        return GaussianPrediction(mean=a[:, :1].copy(), var=np.ones((a.shape[0], 1)))


def test_nll_examples():
    pred = GaussianPrediction(mean=np.zeros((1, 1)), var=np.ones((1, 1)))
    assert nll_loss(pred, np.zeros((1, 1)))[0] == pytest.approx(0.0)
    assert nll_loss(pred, np.ones((1, 1)))[0] == pytest.approx(0.5)
    wide = GaussianPrediction(mean=np.zeros((1, 1)), var=np.full((1, 1), math.e))
    assert nll_loss(wide, np.zeros((1, 1)))[0] == pytest.approx(0.5)


def test_nll_gradients_match_finite_differences():
    rng = np.random.default_rng(0)
    mean, var, target = rng.normal(size=(3, 2)), rng.uniform(0.2, 2.0, size=(3, 2)), rng.normal(size=(3, 2))
    _, grad_mean, grad_var = nll_loss(GaussianPrediction(mean, var), target)
    eps = 1e-6
    for i in np.ndindex(mean.shape):
        up, down = mean.copy(), mean.copy()
        up[i] += eps
        down[i] -= eps
        fd = (nll_loss(GaussianPrediction(up, var), target)[0] - nll_loss(GaussianPrediction(down, var), target)[0]) / (2 * eps)
        assert grad_mean[i] == pytest.approx(fd, rel=1e-5, abs=1e-9)
        up, down = var.copy(), var.copy()
        up[i] += eps
        down[i] -= eps
        fd = (nll_loss(GaussianPrediction(mean, up), target)[0] - nll_loss(GaussianPrediction(mean, down), target)[0]) / (2 * eps)
        assert grad_var[i] == pytest.approx(fd, rel=1e-5, abs=1e-9)


def test_nll_rejects_non_finite_targets():
    pred = GaussianPrediction(mean=np.zeros((1, 1)), var=np.ones((1, 1)))
    with pytest.raises(ValueError):
        nll_loss(pred, np.array([[np.nan]]))


def test_kl_examples():
    assert kl_gaussian_pair(0.0, 1.0, 0.0, 1.0) == pytest.approx(0.0)
    assert kl_gaussian_pair(0.0, 1.0, 1.0, 1.0) == pytest.approx(0.5)
    assert kl_gaussian_pair(0.0, 1.0, 0.0, 4.0) == pytest.approx(0.5 * math.log(4.0) + 1.0 / 8.0 - 0.5)


def test_kl_is_non_negative():
    rng = np.random.default_rng(1)
    kl = kl_gaussian_pair(rng.normal(size=1000), rng.uniform(0.01, 5, 1000), rng.normal(size=1000), rng.uniform(0.01, 5, 1000))
    assert kl.min() >= -1e-12


def test_kl_needs_positive_variance():
    with pytest.raises(DomainError):
        kl_gaussian_pair(0.0, 0.0, 0.0, 1.0)


def test_action_blind_model_scores_zero():
    result = cai_score(ActionBlindModel(), np.zeros(3), np.array([0.5]), np.random.default_rng(2).uniform(size=(8, 1)),
                       np.random.default_rng(3), samples=64)
    assert abs(result.score) <= 3 * result.standard_error + 1e-12
    batch = cai_scores(ActionBlindModel(), np.zeros(3), np.random.default_rng(2).uniform(size=(8, 1)),
                       np.random.default_rng(3))
    np.testing.assert_allclose(batch.scores, 0.0, atol=1e-12)
    assert batch.per_dim.shape == (8, 2)


def test_score_replays_the_seeded_estimate():
    candidates = np.array([[0.0], [2.0]])
    result = cai_score(ShiftModel(), np.zeros(1), np.array([0.0]), candidates, np.random.default_rng(0), samples=32)

    x = np.random.default_rng(0).standard_normal((1, 32, 1))[0, :, 0]
    log_p = norm.logpdf(x, 0.0, 1.0)
    log_mix = logsumexp([norm.logpdf(x, 0.0, 1.0), norm.logpdf(x, 2.0, 1.0)], axis=0) - math.log(2.0)
    assert result.score == pytest.approx(float(np.mean(log_p - log_mix)), rel=1e-12)


def test_mixture_kl_is_bounded_by_mean_pairwise_kl():
    candidates = np.array([[0.0], [2.0]])
    result = cai_score(ShiftModel(), np.zeros(1), np.array([0.0]), candidates, np.random.default_rng(5), samples=4000)
    assert result.score <= 0.5 * kl_gaussian_pair(0.0, 1.0, 2.0, 1.0) + 3 * result.standard_error


def test_score_ignores_candidate_order():
    candidates = np.random.default_rng(4).normal(size=(6, 1))
    first = cai_score(ShiftModel(), np.zeros(1), np.array([0.2]), candidates, np.random.default_rng(9))
    second = cai_score(ShiftModel(), np.zeros(1), np.array([0.2]), candidates[::-1], np.random.default_rng(9))
    assert first.score == pytest.approx(second.score, rel=1e-12)


def test_inference_output_dims():
    partial = InferenceModel(52, 30, target_indices=np.arange(20, 52), hidden=(8,), rng=0)
    full = InferenceModel(52, 30, hidden=(8,), rng=0)
    assert partial.output_dim == 32 and full.output_dim == 52
    pred = partial.predict(np.zeros(52), np.full((4, 30), 0.5))
    assert pred.mean.shape == (4, 32) and np.all(pred.var > 0)


def test_target_indices_must_fit_the_state():
    with pytest.raises(ValueError):
        InferenceModel(4, 2, target_indices=[4], hidden=(8,), rng=0)


def test_empty_batch_is_rejected():
    model = InferenceModel(2, 1, hidden=(8,), rng=0)
    with pytest.raises(ValueError):
        train_inference(model, (np.zeros((0, 2)), np.zeros((0, 1)), np.zeros((0, 2))))


def _fit_constant(seed):
    model = InferenceModel(2, 1, hidden=(16,), lr=1e-2, rng=seed)
    rng = np.random.default_rng(seed)
    target = np.array([0.5, -0.5])
    losses = []
    for _ in range(500):
        s, a = rng.uniform(size=(32, 2)), rng.uniform(size=(32, 1))
        losses.append(train_inference(model, (s, a, np.tile(target, (32, 1)))))
    return model, losses


def test_constant_target_is_learned():
    model, losses = _fit_constant(0)
    assert losses[-1] < losses[0]
    pred = model.predict(np.array([0.3, 0.7]), np.array([[0.4]]))
    np.testing.assert_allclose(pred.mean[0], [0.5, -0.5], atol=0.1)


def test_training_is_deterministic():
    first, _ = _fit_constant(3)
    second, _ = _fit_constant(3)
    s, a = np.array([0.1, 0.9]), np.array([[0.2]])
    np.testing.assert_array_equal(first.predict(s, a).mean, second.predict(s, a).mean)


@pytest.mark.slow
def test_linear_gaussian_dynamics_reach_the_noise_floor():
    rng = np.random.default_rng(0)
    model = InferenceModel(1, 1, hidden=(32, 32), lr=3e-3, rng=0)

    def batch(n):
        s, a = rng.uniform(-1, 1, size=(n, 1)), rng.uniform(-1, 1, size=(n, 1))
        return s, a, 0.5 * s + 0.3 * a + rng.normal(0.0, 0.1, size=(n, 1))

    for _ in range(3000):
        train_inference(model, batch(64))
    s, a, s_next = batch(2000)
    loss, _, _ = nll_loss(model.predict(s, a), s_next)
    assert loss <= 0.9 * (0.5 + 0.5 * math.log(0.01))


def _regime_cai_ratio(seed):
    env = TwoRegimeEnv()
    env.reset(1, np.random.default_rng(seed))
    rng = np.random.default_rng(seed + 100)
    model = InferenceModel(2, 1, target_indices=[1], hidden=(32, 32), lr=3e-3, rng=seed)
    for _ in range(2000):
        z = (rng.random(128) < 0.5).astype(float)
        x = rng.normal(0.5, 0.2, size=128)
        a = rng.uniform(size=128)
        x_next = np.array([env.transition(int(zi), ai) for zi, ai in zip(z, a)])
        train_inference(model, (np.stack([z, x], axis=1), a[:, None], np.stack([z, x_next], axis=1)))

    scores = {0: [], 1: []}
    for regime in (0, 1):
        for _ in range(20):
            state = np.array([float(regime), rng.normal(0.5, 0.2)])
            candidates = np.clip(0.5 + rng.normal(0.0, 0.1, size=(16, 1)), 1e-6, 1 - 1e-6)
            values = cai_scores(model, state, candidates, rng).scores
            scores[regime].append(values.mean())
    return np.mean(scores[1]) / max(np.mean(scores[0]), 1e-9)


@pytest.mark.slow
def test_cai_separates_controllable_regime():
    ratios = [_regime_cai_ratio(seed) for seed in range(3)]
    assert np.median(ratios) >= 5.0
