import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from rhythmotion.env import ARM, CARTPOLE, EnvState, MusicCursor, VecDanceEnv, _penalty_done, reset
from rhythmotion.reward_model import RewardModel, RewardModelConfig
from rhythmotion.rl import (
    MusicCache,
    Policy,
    ReturnScaler,
    RLError,
    RolloutBuffer,
    TrainConfig,
    clipped_surrogate,
    collect_rollouts,
    compute_gae,
    generate_dance,
    observe,
    ppo_loss,
    ppo_update,
    reward_model_observer,
    reward_model_rewarder,
    step_reward,
    train_dancer,
)

TINY_RM = RewardModelConfig(dim=16, half_width=30, patch=32, channels=(8, 8, 16), seed=0)
TINY = TrainConfig(batch_size=64, minibatch=32, total_steps=128, n_envs=4, size=32, epochs=2, seed=0, cap=40)


@pytest.fixture(scope="module")
def rm():
    return RewardModel(TINY_RM)


def gae_oracle(rewards, values, dones, last_value, gamma, lam):
    """Explicit double loop: A_t = sum_l (gamma lam)^l delta_{t+l}, stopping at episode ends."""
    n = len(rewards)
    adv = np.zeros(n)
    for t in range(n):
        total, coef = 0.0, 1.0
        for k in range(t, n):
            nxt = last_value if k + 1 == n else values[k + 1]
            live = 0.0 if dones[k] else 1.0
            total += coef * (rewards[k] + gamma * nxt * live - values[k])
            if dones[k]:
                break
            coef *= gamma * lam
        adv[t] = total
    return adv


def test_observation_contract(rm, tone_music, other_music):
    s = reset(CARTPOLE, 0, tone_music)
    o = observe(rm, tone_music, 100, s)
    assert o.shape == (16 + 4,)
    np.testing.assert_array_equal(o, observe(rm, tone_music, 100, s))
    assert np.linalg.norm(o - observe(rm, other_music, 100, s)) > 0
    with pytest.raises(RLError):
        observe(rm, tone_music, 10, s)


def test_step_reward_examples():
    assert step_reward(1.0, 0.0, 1.0) == 1.0
    assert step_reward(0.8, 0.0, 0.5) == pytest.approx(0.4)
    assert step_reward(0.3, -1.0, 1.0) == pytest.approx(-0.7)


def test_gae_analytic_cases():
    r, v = np.array([1.0, 2.0, 3.0]), np.array([0.5, 0.2, 0.1])
    adv, ret = compute_gae(r, v, [False, False, True], 9.0, 1.0, 1.0)
    np.testing.assert_allclose(adv, [6 - 0.5, 5 - 0.2, 3 - 0.1])
    np.testing.assert_allclose(ret, [6, 5, 3])
    z = np.zeros(5)
    np.testing.assert_array_equal(compute_gae(z, z, np.zeros(5, bool), 0.0, 0.99, 0.95)[0], 0)
    adv, _ = compute_gae(r, v, [False, False, False], 0.7, 0.9, 0.0)
    np.testing.assert_allclose(adv, r + 0.9 * np.array([0.2, 0.1, 0.7]) - v)


@settings(max_examples=100, deadline=None)
@given(st.integers(0, 10**6))
def test_gae_matches_double_loop(seed):
    r_ = np.random.default_rng(seed)
    rewards, values = r_.normal(size=(2, 20))
    dones = r_.random(20) < 0.15
    last = float(r_.normal())
    gamma, lam = r_.uniform(0.5, 1.0), r_.uniform(0.0, 1.0)
    adv, _ = compute_gae(rewards, values, dones, last, gamma, lam)
    np.testing.assert_allclose(adv, gae_oracle(rewards, values, dones, last, gamma, lam), atol=1e-8)


def test_clipped_surrogate_cases():
    assert clipped_surrogate(1.5, 2.0, 0.2) == pytest.approx(1.2 * 2.0)
    assert clipped_surrogate(0.5, -1.0, 0.2) == pytest.approx(-0.8)
    assert clipped_surrogate(1.0, 3.0, 0.2) == 3.0


@pytest.mark.parametrize("kind", [CARTPOLE, ARM])
def test_ppo_loss_at_unchanged_parameters(kind, rng):
    policy = Policy(10, kind, 16, seed=1)
    obs = rng.normal(size=(32, 10))
    actions, logp, _ = policy.act(obs, rng)
    adv = rng.normal(size=32)
    rep = ppo_loss(policy, obs, actions, logp, adv, np.zeros(32), TINY, backward=False)
    assert rep["ratio_max_dev"] <= 1e-7
    assert rep["policy_loss"] == pytest.approx(-adv.mean(), abs=1e-9)


@pytest.mark.parametrize("kind", [CARTPOLE, ARM])
def test_zero_advantage_gives_no_policy_gradient(kind, rng):
    cfg = TrainConfig(ent_coef=0.0, vf_coef=0.0)
    policy = Policy(6, kind, 8, seed=2)
    obs = rng.normal(size=(16, 6))
    actions, logp, _ = policy.act(obs, rng)
    policy.store.zero_grad()
    ppo_loss(policy, obs, actions, logp, np.zeros(16), np.zeros(16), cfg)
    assert policy.store.grad_norm() == 0.0


@pytest.mark.parametrize("kind", [CARTPOLE, ARM])
def test_ppo_gradient_matches_finite_differences(kind, rng):
    from rhythmotion.nn import grad_check

    policy = Policy(5, kind, 6, seed=3)
    obs = rng.normal(size=(12, 5))
    actions, logp, _ = policy.act(obs, rng)
    logp = logp + rng.normal(scale=0.05, size=12)  # ratios near but not at 1, inside the clip band
    adv, ret = rng.normal(size=(2, 12))
    cfg = TrainConfig(clip=0.5)

    def f(theta):
        policy.store.set_flat(theta)
        policy.store.zero_grad()
        rep = ppo_loss(policy, obs, actions, logp, adv, ret, cfg)
        return rep["loss"], policy.store.flat_grad()

    assert grad_check(f, policy.store.flat()) <= 1e-4


@pytest.mark.parametrize("kind", [CARTPOLE, ARM])
def test_rollout_buffer_contract(rm, tone_music, other_music, kind):
    tracks = [tone_music, other_music]
    cache = MusicCache.build(rm, tracks)
    bufs = []
    for _ in range(2):
        policy = Policy(16 + (4 if kind == CARTPOLE else 6), kind, 16, seed=0)
        venv = VecDanceEnv(kind, tracks, 4, seed=3, cap=40, size=32)
        bufs.append(collect_rollouts(policy, venv, 96, reward_model_observer(cache),
                                     reward_model_rewarder(rm, cache), np.random.default_rng(5)))
    a, b = bufs
    assert len(a) == 96
    for name in ("obs", "actions", "logp", "rewards", "dones"):
        np.testing.assert_array_equal(getattr(a, name), getattr(b, name))
    recomputed = policy.log_prob(a.flat("obs"), a.flat("actions"))
    np.testing.assert_allclose(recomputed, a.flat("logp"), atol=1e-6)
    assert np.isfinite(a.rewards).all()
    assert set(np.unique(a.penalties)) <= {0.0, -1.0}
    # episodes end exactly at the cap or on a view exit
    for ret, length, exited in a.episodes:
        assert exited or length == 40


def test_train_dancer_keeps_reward_model_frozen_and_is_deterministic(rm, tone_music, other_music):
    before = rm.digest()
    p1, c1 = train_dancer(CARTPOLE, rm, [tone_music, other_music], TINY)
    p2, c2 = train_dancer(CARTPOLE, rm, [tone_music, other_music], TINY)
    assert rm.digest() == before
    assert p1.store.digest() == p2.store.digest()
    assert [r["mean_reward"] for r in c1.rows] == [r["mean_reward"] for r in c2.rows]
    assert len(c1.rows) == 2


def test_config_validation():
    with pytest.raises(RLError):
        TrainConfig(gamma=0.0).validate()
    with pytest.raises(RLError):
        TrainConfig(clip=0.7).validate()
    with pytest.raises(RLError):
        TrainConfig(batch_size=100, n_envs=16).validate()


@pytest.mark.parametrize("kind", [CARTPOLE, ARM])
def test_generate_dance_contract(rm, tone_music, kind, tmp_path):
    policy = Policy(16 + (4 if kind == CARTPOLE else 6), kind, 16, seed=4)
    a = generate_dance(policy, rm, tone_music, deterministic=True, size=32)
    b = generate_dance(policy, rm, tone_music, deterministic=True, size=32)
    n = tone_music.n_frames - 2 * 30 - 1
    assert a.trajectory.actions.shape[0] == n == len(a.trajectory)
    assert a.frames.shape[0] == n + 1
    np.testing.assert_array_equal(a.trajectory.q, b.trajectory.q)
    assert np.abs(a.trajectory.actions).max() <= 0.9
    assert set(np.unique(a.trajectory.penalties)) <= {0.0, -1.0}
    pen, _, _ = _penalty_done(kind, a.trajectory.q, np.zeros(n), np.full(n, n + 1))
    if kind == ARM:
        np.testing.assert_array_equal(pen, a.trajectory.penalties)
    if kind == CARTPOLE:
        assert (pen < 0).sum() == (a.trajectory.penalties < 0).sum()


def test_generate_dance_rejects_short_music(rm, tone_music):
    from rhythmotion.audio import MusicFeatureTrack

    short = MusicFeatureTrack(tone_music.features[:61], [], [], 120.0)
    with pytest.raises(RLError):
        generate_dance(Policy(20, CARTPOLE, 8), rm, short)


def test_policy_checkpoint_roundtrip(tmp_path, rng):
    p = Policy(9, ARM, 8, seed=5)
    p.save(tmp_path / "p.nnck", extra_field=1)
    back, header = Policy.load(tmp_path / "p.nnck")
    obs = rng.normal(size=(4, 9))
    a1 = p.act(obs, np.random.default_rng(0), deterministic=True)[0]
    a2 = back.act(obs, np.random.default_rng(0), deterministic=True)[0]
    np.testing.assert_allclose(a1, a2, atol=1e-5)
    assert header["kind"] == "policy" and back.kind == ARM


def test_return_scaler_tracks_discounted_return_std(rng):
    rewards = rng.normal(2.0, 1.0, size=(50, 3))
    dones = rng.random((50, 3)) < 0.1
    sc = ReturnScaler(3, 0.9)
    sc.update(rewards[:20], dones[:20])
    sc.update(rewards[20:], dones[20:])
    ret, seen = np.zeros(3), []
    for r, d in zip(rewards, dones):
        ret = 0.9 * ret + r
        seen.append(ret.copy())
        ret[d] = 0.0
    assert sc.std == pytest.approx(np.std(seen), rel=1e-8)
    assert ReturnScaler(2, 0.9).std == 1.0


def test_ppo_learns_contextual_bandit(rng):
    cfg = TrainConfig(batch_size=512, minibatch=64, lr=1e-3, total_steps=512, n_envs=1)
    policy = Policy(2, CARTPOLE, 32, seed=0)
    n = 512
    for _ in range(10):
        s = rng.choice([-1.0, 1.0], size=(n, 1))
        obs = np.concatenate([s, np.ones_like(s)], axis=1)
        a, logp, v = policy.act(obs, rng)
        r = (a == (s[:, 0] > 0)).astype(float)
        col = lambda x: np.asarray(x)[:, None]
        buf = RolloutBuffer(obs[:, None], col(a), col(logp), col(v), col(r), np.zeros((n, 1)), np.ones((n, 1), bool),
                            np.ones((n, 1)), col(r), np.zeros(1))
        ppo_update(policy, buf, cfg, rng, reward_scale=2.0)
    probe = np.array([[1.0, 1.0], [-1.0, 1.0]])
    np.testing.assert_array_equal(policy.act(probe, rng, deterministic=True)[0], [1, 0])
