import math

import numpy as np
import pytest

from config import SystemParams
from tests.conftest import facing_pair_trace, uniform_raw
from workflows.vr_env import (
    Action,
    RawAction,
    VrInteractionEnv,
    data_volumes,
    hfqoe,
    latency_breakdown,
    normalize_action,
    qoe,
    reward,
    state_dim,
    state_masks,
)
from utils import UsageError

ONE_FRONT = np.array([[0, 0, 0, 1]])


def _raw(b_hat, f_hat, F_hat):
    return RawAction(b_hat=np.asarray(b_hat, dtype=float), f_hat=np.asarray(f_hat, dtype=float),
                     F_hat=np.asarray(F_hat, dtype=float))


def test_normalize_splits_shares_and_rounds_keyframes(two_user_params):
    action = normalize_action(_raw([1.0, 3.0], [0.5, 0.5], [[0.5, 0.01, 0.99, 0.5], [0.1, 0.2, 0.3, 0.4]]),
                              two_user_params)
    np.testing.assert_allclose(action.b, [2.5e6, 7.5e6])
    np.testing.assert_allclose(action.f_e, [5e9, 5e9])
    assert action.F[0].tolist() == [15, 2, 30, 15]
    assert action.F[1].tolist() == [3, 6, 9, 12]


def test_normalize_rejects_zero_shares(two_user_params):
    with pytest.raises(ArithmeticError):
        normalize_action(_raw([0.0, 0.0], [0.5, 0.5], np.full((2, 4), 0.5)), two_user_params)


def test_normalized_actions_are_always_feasible(params):
    draws = np.random.default_rng(0).uniform(1e-6, 1.0, size=(100_000, 30))
    b_sums, f_sums, F_min, F_max = [], [], [], []
    for vector in draws:
        action = normalize_action(RawAction.from_vector(vector, params.users), params)
        b_sums.append(action.b.sum())
        f_sums.append(action.f_e.sum())
        F_min.append(action.F.min())
        F_max.append(action.F.max())
    np.testing.assert_allclose(b_sums, params.b_max, rtol=1e-9)
    np.testing.assert_allclose(f_sums, params.f_max, rtol=1e-9)
    assert min(F_min) >= 2 and max(F_max) <= params.fps


def test_raw_action_width_is_checked():
    with pytest.raises(ValueError):
        RawAction.from_vector(np.full(29, 0.5), 5)


def test_data_volumes(params):
    F = np.array([[30, 30, 30, 15]])
    w_u, w_d = data_volumes(ONE_FRONT, F, params)
    assert w_u[0] == pytest.approx(2.4e6)
    assert w_d[0] == pytest.approx(1.2e6)
    _, none_sent = data_volumes(ONE_FRONT, F, params, levels_sent=[True, True, True, False])
    assert none_sent[0] == 0.0


def test_communication_split_follows_volumes(params):
    F = np.array([[30, 30, 30, 15]])
    w_u, w_d = data_volumes(ONE_FRONT, F, params)
    delays = latency_breakdown(w_u, w_d, ONE_FRONT, F, [1e9], [1.2e7], [2e9], params)
    assert delays.t_u[0] + delays.t_d[0] == pytest.approx(0.1)
    assert delays.t_u[0] == pytest.approx(0.1 * 2.0 / 3.0)
    assert delays.t_d[0] == pytest.approx(0.1 / 3.0)


def test_extraction_and_rendering_terms():
    params = SystemParams(cycle_basis_bits=1, frame_bytes=12500)
    F = np.array([[30, 30, 30, 10]])
    w_u, w_d = data_volumes(ONE_FRONT, F, params)
    delays = latency_breakdown(w_u, w_d, ONE_FRONT, F, [3e9], [1e9], [2e9], params)
    assert delays.t_e[0] == pytest.approx(0.01)
    # 50 * 20 * 1e5 reconstructed plus 240 * 30 * 1e5 rendered, over 2 GHz
    assert delays.t_r[0] == pytest.approx((50 * 20 * 1e5 + 240 * 30 * 1e5) / 2e9)


def test_full_keyframe_rate_leaves_only_rendering(params):
    F = np.full((1, 4), params.fps)
    w_u, w_d = data_volumes(ONE_FRONT, F, params)
    delays = latency_breakdown(w_u, w_d, ONE_FRONT, F, [1e9], [1e9], [2e9], params)
    assert delays.t_r[0] == pytest.approx(240 * 30 * 1e4 / 2e9)


def test_per_bit_cycle_costs_overrun_t_max_on_rendering_alone():
    F = np.full((1, 4), 30)
    for basis, fits in ((8, True), (1, False)):
        params = SystemParams(cycle_basis_bits=basis)
        w_u, w_d = data_volumes(ONE_FRONT, F, params)
        delays = latency_breakdown(w_u, w_d, ONE_FRONT, F, [1e9], [1e9], [params.f_r_range[1]], params)
        assert (delays.t_r[0] < params.t_max) == fits


def test_skipping_extraction_zeroes_its_delay(params):
    F = np.array([[30, 30, 30, 10]])
    w_u, w_d = data_volumes(ONE_FRONT, F, params)
    delays = latency_breakdown(w_u, w_d, ONE_FRONT, F, [0.0], [1e9], [2e9], params, extract_keyframes=False)
    assert delays.t_e[0] == 0.0


def test_zero_rate_means_infinite_delay(params):
    F = np.array([[30, 30, 30, 10]])
    w_u, w_d = data_volumes(ONE_FRONT, F, params)
    delays = latency_breakdown(w_u, w_d, ONE_FRONT, F, [1e9], [0.0], [2e9], params)
    assert math.isinf(delays.t_u[0]) and math.isinf(delays.t_d[0])
    assert qoe(ONE_FRONT, F, delays.total, params)[0] == 0.0


def test_qoe_examples(params):
    F = np.full((1, 4), 30)
    assert qoe(ONE_FRONT, F, [0.075], params)[0] == pytest.approx(0.5 * 3.0 * math.log(15.0))
    assert qoe(ONE_FRONT, F, [params.t_max], params)[0] == 0.0
    assert qoe(ONE_FRONT, np.full((1, 4), 2), [0.0], params)[0] == 0.0


def test_qoe_of_user_who_sees_nobody(params):
    assert qoe(np.zeros((1, 4)), np.full((1, 4), 30), [0.0], params)[0] == 0.0


def test_hfqoe_examples():
    assert hfqoe([1.0, 1.0], 1.0, 1.0) == 1.0
    assert hfqoe([0.0, 1.0], 1.0, 0.0) == pytest.approx(0.0)
    assert hfqoe([2.0, 2.0], 3.0, 1.0) == pytest.approx(1.0)


@pytest.mark.parametrize("qoe_values, fairness, expected", [
    ([2.0, 3.0], 0.9, 5.0),
    ([0.1, 4.0], 0.9, 4.1 - 0.5),
    ([0.1, 0.1, 0.3], 0.5, -1.0),
])
def test_reward_penalties(params, qoe_values, fairness, expected):
    value, _, _ = reward(qoe_values, fairness, params)
    assert float(value) == pytest.approx(expected)


def test_reward_flags(params):
    _, flags, hf_flag = reward([0.1, 0.3], 0.5, params)
    assert flags.tolist() == [True, False]
    assert bool(hf_flag)


def test_state_layout(params):
    assert state_dim(params.users) == 52
    s1, s2 = state_masks(params.users)
    assert s1.tolist() == list(range(20))
    assert s2.tolist() == list(range(20, 52))


def test_reset_state(params, short_trace):
    env = VrInteractionEnv(params)
    state = env.reset(short_trace, np.random.default_rng(0))
    assert state.vector.shape == (52,)
    assert np.all(state.s2 == 0.0)
    np.testing.assert_array_equal(state.s1, env.current_snapshot.counts.reshape(-1))
    assert np.all((env.f_r >= 1.5e9) & (env.f_r <= 2.5e9))


def test_episode_runs_for_trace_duration(params, short_trace):
    env = VrInteractionEnv(params)
    env.reset(short_trace, np.random.default_rng(0))
    flags = [env.step(uniform_raw(params.users))[3] for _ in range(short_trace.duration)]
    assert flags == [False, False, False, True]
    with pytest.raises(UsageError):
        env.step(uniform_raw(params.users))


def test_same_seed_same_rewards(params, short_trace):
    def run():
        env = VrInteractionEnv(params)
        env.reset(short_trace, np.random.default_rng(5))
        return [env.step(uniform_raw(params.users, 0.7))[1] for _ in range(short_trace.duration)]

    assert run() == run()


def test_state_after_step_carries_delays_and_qoe(params, short_trace):
    env = VrInteractionEnv(params)
    env.reset(short_trace, np.random.default_rng(1))
    state, _, report, _ = env.step(uniform_raw(params.users))
    per_user = state.s2[:-2].reshape(params.users, 6)
    np.testing.assert_allclose(per_user[:, 4], report.qoe)
    np.testing.assert_allclose(per_user[:, 5], report.avg_qoe)
    assert state.s2[-2] == report.high and state.s2[-1] == report.low
    assert np.all(per_user[:, :4] <= params.slot_seconds)


def test_starved_user_gets_zero_qoe(params, short_trace):
    env = VrInteractionEnv(params)
    env.reset(short_trace, np.random.default_rng(2))
    raw = uniform_raw(params.users)
    raw[0] = 0.0
    state, _, report, _ = env.step(raw)
    assert report.qoe[0] == 0.0
    assert report.qoe_flags[0]
    assert not report.success[0]
    assert state.s2[0] == params.slot_seconds


def test_qoe_stays_within_bounds(params, short_trace):
    rng = np.random.default_rng(3)
    env = VrInteractionEnv(params)
    env.reset(short_trace, rng)
    upper = 3.0 * math.log(params.fps * params.slot_seconds / 2.0)
    for _ in range(short_trace.duration):
        _, _, report, _ = env.step(rng.uniform(1e-3, 1.0, size=30))
        assert np.all(report.qoe >= 0.0) and np.all(report.qoe <= upper + 1e-12)
        assert report.hfqoe <= 1.0


def test_preview_matches_step(two_user_params):
    env = VrInteractionEnv(two_user_params)
    env.reset(facing_pair_trace(3), np.random.default_rng(4))
    action = normalize_action(RawAction.from_vector(uniform_raw(2, 0.6), 2), two_user_params)
    previewed = env.preview_rewards(action.b[None], action.f_e[None], action.F[None])
    _, value, _, _ = env.step_action(action)
    assert previewed.shape == (1,)
    assert previewed[0] == pytest.approx(value, rel=1e-12)


def test_trace_user_count_must_match(params):
    env = VrInteractionEnv(params)
    with pytest.raises(ValueError):
        env.reset(facing_pair_trace(2), np.random.default_rng(0))


def test_step_action_accepts_restricted_levels(two_user_params):
    env = VrInteractionEnv(two_user_params)
    env.reset(facing_pair_trace(2), np.random.default_rng(0))
    action = Action(b=np.full(2, 5e6), f_e=np.full(2, 5e9), F=np.full((2, 4), 10),
                    levels_sent=np.array([False, False, False, False]), extract_keyframes=False)
    _, _, report, _ = env.step_action(action)
    assert np.all(report.delays.t_d == 0.0)
    assert np.all(report.delays.t_e == 0.0)
