import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from rhythmotion.env import (
    ACTION_LIMIT,
    ARM,
    CARTPOLE,
    X_VIEW,
    CartPoleParams,
    EnvError,
    EnvFault,
    EnvState,
    MusicCursor,
    Trajectory,
    VecDanceEnv,
    arm_below_base,
    cartpole_energy,
    kinematic_velocity,
    read_pgm,
    render,
    reset,
    step,
    step_force,
    write_pgm_sequence,
)
from rhythmotion.render import centroid


def test_reset_is_deterministic(tone_music):
    for kind in (CARTPOLE, ARM):
        a, b = reset(kind, 7, tone_music), reset(kind, 7, tone_music)
        np.testing.assert_array_equal(a.q, b.q)
        assert a.cursor == b.cursor


def test_cartpole_reset_at_rest(tone_music):
    s = reset(CARTPOLE, 3, tone_music)
    np.testing.assert_array_equal(s.q, [0, 0])
    np.testing.assert_array_equal(s.qd, [0, 0])
    assert 30 <= s.cursor.start


def test_arm_resets_never_below_base(tone_music):
    for seed in range(1000):
        assert not arm_below_base(reset(ARM, seed, tone_music).q)[0]


def test_short_music_rejected(tone_music):
    from rhythmotion.audio import MusicFeatureTrack

    short = MusicFeatureTrack(tone_music.features[:61], [], [], 120.0)
    with pytest.raises(EnvError):
        reset(CARTPOLE, 0, short, half_width=30)


def test_zero_force_keeps_cart_still(tone_music):
    s = reset(CARTPOLE, 0, tone_music)
    for _ in range(120):
        s = step_force(s, 0.0)
    assert s.q[0] == 0.0


def test_cart_pushed_out_of_view_terminates(tone_music):
    s = reset(CARTPOLE, 0, tone_music)
    for _ in range(1000):
        r = step(s, 1)
        if r.done:
            break
        assert r.penalty == 0.0
        s = r.state
    assert r.done and r.penalty == -1.0
    assert r.state.q[0] > X_VIEW
    assert r.center_factor == 0.0


def test_pole_falling_never_ends_episode(tone_music):
    s = reset(CARTPOLE, 0, tone_music)
    s = EnvState(CARTPOLE, [0.0, 0.3], [0.0, 0.0], 0, s.cursor, s.cap)
    widest = 0.0
    for i in range(200):
        r = step(s, i % 2)
        assert not r.done
        s = r.state
        widest = max(widest, abs(s.q[1]))
    assert widest > np.pi / 2


def test_arm_commanded_down_is_penalized(tone_music):
    s = EnvState(ARM, [0.5, 0.0, 0.0], [0, 0, 0], 0, MusicCursor("", 30, 30))
    seen = False
    for _ in range(300):
        r = step(s, [0.9, 0.9, 0.9])
        crossed = bool(arm_below_base(r.state.q)[0])
        assert r.penalty == (-1.0 if crossed else 0.0)
        if crossed:
            seen = True
            break
        s = r.state
    assert seen


@settings(max_examples=20, deadline=None)
@given(st.integers(0, 10**6))
def test_arm_velocity_and_penalty_invariants(seed):
    r_ = np.random.default_rng(seed)
    s = EnvState(ARM, r_.uniform(-1, 1, 3), [0, 0, 0], 0, MusicCursor("", 30, 30))
    for _ in range(40):
        r = step(s, r_.uniform(-3, 3, 3))
        assert np.abs(r.state.qd).max() <= ACTION_LIMIT
        assert r.penalty in (0.0, -1.0)
        s = r.state


def test_invalid_actions_and_states(tone_music):
    s = reset(CARTPOLE, 0, tone_music)
    with pytest.raises(EnvError):
        step(s, 2)
    with pytest.raises(EnvFault):
        EnvState(CARTPOLE, [np.nan, 0], [0, 0], 0, s.cursor)


def test_energy_drift_below_one_percent():
    p = CartPoleParams()
    from rhythmotion.env import cartpole_integrate

    q, qd = np.array([[0.0, 2.5]]), np.zeros((1, 2))
    e0 = cartpole_energy(q, qd, p)[0]
    for _ in range(600):
        q, qd = cartpole_integrate(q, qd, np.zeros(1), p)
    assert abs(cartpole_energy(q, qd, p)[0] - e0) / abs(e0) < 0.01


def test_render_is_deterministic_and_centered(tone_music):
    s = reset(CARTPOLE, 0, tone_music)
    a, b = render(s), render(s)
    np.testing.assert_array_equal(a, b)
    assert 0 <= a.min() and a.max() <= 1
    cx, _ = centroid(a)
    assert abs(cx - 24.0) <= 1.0


def test_render_shift_matches_projection(tone_music):
    s = reset(CARTPOLE, 0, tone_music)
    moved = EnvState(CARTPOLE, [1.0, 0.0], [0, 0], 0, s.cursor)
    shift = centroid(render(moved))[0] - centroid(render(s))[0]
    assert abs(shift - 1.0 * 48 / (2 * X_VIEW)) <= 1.0


def test_render_rejects_small_or_nonsquare(tone_music):
    s = reset(CARTPOLE, 0, tone_music)
    with pytest.raises(EnvError):
        render(s, (16, 16))
    with pytest.raises(EnvError):
        render(s, (48, 32))


def test_kinematic_velocity():
    np.testing.assert_array_equal(kinematic_velocity(np.zeros((5, 3))), 0.0)
    np.testing.assert_allclose(kinematic_velocity(np.full((4, 1), 0.5)), 0.5)
    np.testing.assert_allclose(kinematic_velocity(np.tile([0.3, 0.4], (4, 1))), 0.5)


def test_vec_env_matches_single_step(tone_music):
    venv = VecDanceEnv(ARM, [tone_music], 3, seed=1)
    q0, qd0 = venv.q.copy(), venv.qd.copy()
    act = np.array([[0.5, -0.2, 0.1]] * 3)
    prev, nxt, pen, done, center, frames = venv.step(act)
    s = EnvState(ARM, q0[0], qd0[0], 0, MusicCursor("", 30, 30))
    r = step(s, act[0])
    np.testing.assert_allclose(venv.q[0], r.state.q)
    np.testing.assert_allclose(nxt[0], r.frame)


def test_vec_env_respects_cap(tone_music):
    venv = VecDanceEnv(CARTPOLE, [tone_music], 2, seed=0, cap=50)
    lengths = []
    for t in range(200):
        *_, done, _, _ = venv.step(np.array([t % 2, (t + 1) % 2]))
        lengths.extend([t] * int(done.sum()))
    assert lengths and lengths[0] == 49


def test_trajectory_and_pgm_roundtrip(tmp_path, rng):
    tr = Trajectory(ARM, rng.normal(size=(5, 3)), rng.normal(size=(5, 3)), rng.normal(size=(5, 3)),
                    rng.normal(size=5), np.zeros(5), 4, {"track_id": "x", "start": 30})
    tr.save(tmp_path / "a.traj")
    back = Trajectory.load(tmp_path / "a.traj")
    np.testing.assert_allclose(back.q, tr.q, rtol=1e-6)
    assert back.music_ref == tr.music_ref and back.seed == 4
    frames = rng.random((2, 32, 32))
    paths = write_pgm_sequence(tmp_path / "f", frames)
    np.testing.assert_allclose(read_pgm(paths[1]), frames[1], atol=1 / 255)
