"""Comparison dancers: BPM-synchronised random arm control, and PPO trained on a
reward-model-free flow-matching reward against the synthetic reference."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .audio import MusicFeatureTrack
from .choreo import ReferenceChoreography, render_reference
from .env import ARM, CARTPOLE, KINDS, ArmParams, Trajectory, VecDanceEnv, _advance, initial_arm_q, state_dim
from .flow import estimate_flow, flow_l1_distance, resize_flow
from .rl import LearningCurve, Policy, RLError, TrainConfig, run_ppo

ACTION_BOUND = 0.9


class UnsupportedAgentError(RLError):
    pass


@dataclass(frozen=True)
class BpmControlConfig:
    tempo_bpm: float
    beat_frames: tuple[int, ...]
    low: float = -ACTION_BOUND
    high: float = ACTION_BOUND
    seed: int = 0

    def __post_init__(self):
        if self.tempo_bpm <= 0:
            raise ValueError("tempo must be positive")
        if not -ACTION_BOUND <= self.low < self.high <= ACTION_BOUND:
            raise ValueError("velocity-target range must lie within the action bounds")
        object.__setattr__(self, "beat_frames", tuple(int(b) for b in self.beat_frames))

    @classmethod
    def from_music(cls, music: MusicFeatureTrack, seed: int = 0) -> "BpmControlConfig":
        return cls(music.tempo_bpm, tuple(music.beats.tolist()), seed=seed)


def bpm_control_policy(config: BpmControlConfig, t: int, state=None, kind: str = ARM) -> np.ndarray:
    """Joint-velocity target held between quarter-note beats and redrawn at each one.

    The target for frame t depends only on the number of beats at or before t,
    so the controller is stateless and reproducible.
    """
    if kind == CARTPOLE or getattr(state, "kind", ARM) == CARTPOLE:
        raise UnsupportedAgentError("BPM-based control needs joint velocities; the cart-pole has none to set")
    k = int(np.searchsorted(config.beat_frames, t, side="right"))
    rng = np.random.default_rng([config.seed, k])
    return np.clip(rng.uniform(config.low, config.high, size=3), -ACTION_BOUND, ACTION_BOUND)


def run_bpm_control(music: MusicFeatureTrack, seed: int = 0, start: int = 0, n: int | None = None) -> Trajectory:
    """Arm trajectory under BPM control for frames start .. start + n - 1."""
    cfg = BpmControlConfig.from_music(music, seed)
    n = music.n_frames - start - 1 if n is None else n
    rng = np.random.default_rng(seed)
    p = ArmParams()
    q, qd = initial_arm_q(rng, p)[None], np.zeros((1, 3))
    qs, qds, acts = [], [], []
    for i in range(n):
        a = bpm_control_policy(cfg, start + i)
        q, qd = _advance(ARM, q, qd, a[None], None, p)
        qs.append(q[0].copy())
        qds.append(qd[0].copy())
        acts.append(a)
    zeros = np.zeros(n)
    return Trajectory(ARM, np.array(qs), np.array(qds), np.array(acts), zeros, zeros.copy(), seed,
                      {"track_id": str(music.meta.get("track_id", "")), "start": start}, {"baseline": "bpm"})


def velocity_change_onsets(qd: np.ndarray, tol: float = 1e-9) -> np.ndarray:
    """Rows where the velocity starts to change after being steady (row i differs
    from row i-1 while row i-1 equalled row i-2)."""
    qd = np.asarray(qd, dtype=np.float64)
    moving = np.r_[False, np.abs(np.diff(qd, axis=0)).max(axis=1) > tol]
    return np.flatnonzero(moving & ~np.r_[False, moving[:-1]])


def flow_matching_reward(agent_flow: np.ndarray, reference_flow: np.ndarray) -> float | np.ndarray:
    """Negative mean-L1 distance; the reference is resampled to the agent's size."""
    agent_flow = np.asarray(agent_flow, dtype=np.float64)
    reference_flow = np.asarray(reference_flow, dtype=np.float64)
    if reference_flow.shape[-2:] != agent_flow.shape[-2:]:
        if agent_flow.shape[-1] != agent_flow.shape[-2]:
            raise ValueError("agent flow must be square to resample the reference")
        reference_flow = resize_flow(reference_flow, agent_flow.shape[-1])
    if agent_flow.ndim == 4:
        if reference_flow.shape != agent_flow.shape:
            raise ValueError(f"flow shapes differ: {agent_flow.shape} vs {reference_flow.shape}")
        return -np.abs(agent_flow - reference_flow).mean(axis=(1, 2, 3))
    return -flow_l1_distance(agent_flow, reference_flow)


def raw_music_observer(tracks: list[MusicFeatureTrack]):
    def fn(venv: VecDanceEnv) -> np.ndarray:
        m = np.stack([tracks[k].features[f] for k, f in zip(venv.track, venv.frame)])
        return np.concatenate([m, venv.state_vectors()], axis=1)

    return fn


def flow_matching_rewarder(references: list[ReferenceChoreography], size: int):
    def fn(venv, prev, nxt, music_frames, penalty, center):
        agent = estimate_flow(prev, nxt)
        poses = [references[k].pose for k in venv.track]
        a = render_reference(np.stack([p[f] for p, f in zip(poses, music_frames)]), size)
        b = render_reference(np.stack([p[f + 1] for p, f in zip(poses, music_frames)]), size)
        r = flow_matching_reward(agent, estimate_flow(a, b))
        return r + penalty, r

    return fn


def train_dancer_no_rm(kind: str, tracks, config: TrainConfig = TrainConfig()) -> tuple[Policy, LearningCurve]:
    """PPO on [m_t ; s_t] with the flow-matching reward.

    ``tracks`` are dataset :class:`~rhythmotion.choreo.TrackData` entries that
    carry the reference choreography. Episodes never outlast the reference.
    """
    config.validate()
    if kind not in KINDS:
        raise RLError(f"unknown agent kind {kind!r}")
    refs = [td.choreo for td in tracks]
    if any(r is None for r in refs):
        raise RLError("every training track needs a reference choreography")
    music = [td.music for td in tracks]
    ref_len = min(len(r) for r in refs)
    policy = Policy(music[0].features.shape[1] + state_dim(kind), kind, config.hidden, config.seed, "raw_music")
    venv = VecDanceEnv(kind, music, config.n_envs, config.seed, half_width=0, cap=config.cap, size=config.size,
                       fixed_cap=ref_len - 1)
    curve = run_ppo(policy, venv, raw_music_observer(music), flow_matching_rewarder(refs, config.size), config)
    return policy, curve
