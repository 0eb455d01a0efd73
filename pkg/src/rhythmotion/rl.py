"""PPO with GAE for dancing agents driven by the frozen reward model.

Each step: encode the music window around the current frame, concatenate it
with the agent state, sample an action, advance and render the agent,
estimate the flow between the two frames, and score it against the music
projection with cosine similarity.
"""

from __future__ import annotations

import csv
import logging
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Callable

import numpy as np

from .audio import MusicFeatureTrack
from .env import (
    ARM,
    CARTPOLE,
    EPISODE_CAP,
    KINDS,
    RENDER_SIZE,
    X_VIEW,
    ArmParams,
    CartPoleParams,
    EnvState,
    Trajectory,
    VecDanceEnv,
    _advance,
    _penalty_done,
    action_dim,
    initial_arm_q,
    render_batch,
    state_dim,
)
from .flow import estimate_flow
from .nn import Dense, Gelu, NonFiniteError, ParamStore, adam_step, load_into, read_checkpoint, save_checkpoint
from .reward_model import RewardModel, cosine

log = logging.getLogger(__name__)

LOG_STD_RANGE = (-5.0, 2.0)


class RLError(ValueError):
    pass


@dataclass
class TrainConfig:
    gamma: float = 0.99
    lam: float = 0.95
    clip: float = 0.2
    epochs: int = 4
    batch_size: int = 2048  # environment steps per PPO iteration
    minibatch: int = 256
    lr: float = 1e-4
    total_steps: int = 200_000
    ent_coef: float = 0.005
    vf_coef: float = 0.5
    max_grad_norm: float = 0.5
    hidden: int = 64
    n_envs: int = 16
    cap: int = EPISODE_CAP
    size: int = RENDER_SIZE
    seed: int = 0

    def validate(self) -> None:
        if not (0 < self.gamma <= 1 and 0 < self.lam <= 1):
            raise RLError("gamma and lambda must lie in (0, 1]")
        if not 0 < self.clip <= 0.5:
            raise RLError("clip epsilon must lie in (0, 0.5]")
        if self.n_envs < 1 or self.batch_size < self.n_envs or self.batch_size % self.n_envs:
            raise RLError("batch_size must be a positive multiple of n_envs")
        if self.minibatch < 1 or self.epochs < 1 or self.total_steps < self.batch_size:
            raise RLError("minibatch, epochs and total_steps must be positive (total_steps >= batch_size)")
        if self.lr <= 0:
            raise RLError("learning rate must be positive")


# -- policy ----------------------------------------------------------------------------


class Policy:
    """Shared two-layer GELU trunk with a categorical or Gaussian head and a value head."""

    def __init__(self, obs_dim: int, kind: str, hidden: int = 64, seed: int = 0, obs_source: str = "reward_model"):
        if kind not in KINDS:
            raise RLError(f"unknown agent kind {kind!r}")
        self.obs_dim, self.kind, self.hidden, self.seed, self.obs_source = obs_dim, kind, hidden, seed, obs_source
        self.discrete = kind == CARTPOLE
        self.store = ParamStore()
        rng = np.random.default_rng(seed)
        self.fc1 = Dense(self.store, "trunk.fc1", obs_dim, hidden, rng)
        self.fc2 = Dense(self.store, "trunk.fc2", hidden, hidden, rng)
        self.gelu = Gelu()
        self.n_out = action_dim(kind)
        self.pi = Dense(self.store, "pi", hidden, self.n_out, rng, scale=0.01)
        self.vf = Dense(self.store, "vf", hidden, 1, rng)
        if not self.discrete:
            self.store.add("log_std", np.full(self.n_out, -0.5))

    def forward(self, obs: np.ndarray):
        obs = np.atleast_2d(np.asarray(obs, dtype=np.float64))
        if obs.shape[-1] != self.obs_dim:
            raise RLError(f"observation length {obs.shape[-1]} != {self.obs_dim}")
        h1, c1 = self.fc1.forward(obs)
        a1, g1 = self.gelu.forward(h1)
        h2, c2 = self.fc2.forward(a1)
        a2, g2 = self.gelu.forward(h2)
        out, cp = self.pi.forward(a2)
        v, cv = self.vf.forward(a2)
        return out, v[:, 0], (c1, g1, c2, g2, cp, cv)

    def backward(self, dout, dv, cache) -> None:
        c1, g1, c2, g2, cp, cv = cache
        da2 = self.pi.backward(dout, cp) + self.vf.backward(dv[:, None], cv)
        da1 = self.fc2.backward(self.gelu.backward(da2, g2), c2)
        self.fc1.backward(self.gelu.backward(da1, g1), c1)

    @property
    def log_std(self) -> np.ndarray:
        return np.clip(self.store["log_std"], *LOG_STD_RANGE)

    def log_prob_entropy(self, out: np.ndarray, actions: np.ndarray):
        """Per-sample log-probabilities and entropies for the head output ``out``."""
        if self.discrete:
            z = out - out.max(axis=1, keepdims=True)
            logp_all = z - np.log(np.exp(z).sum(axis=1, keepdims=True))
            a = np.asarray(actions, dtype=np.int64).reshape(-1)
            logp = logp_all[np.arange(a.size), a]
            ent = -(np.exp(logp_all) * logp_all).sum(axis=1)
            return logp, ent, logp_all
        ls = self.log_std
        a = np.asarray(actions, dtype=np.float64).reshape(out.shape)
        zsc = (a - out) / np.exp(ls)
        logp = (-0.5 * zsc**2 - ls - 0.5 * np.log(2 * np.pi)).sum(axis=1)
        ent = np.full(out.shape[0], float((ls + 0.5 * np.log(2 * np.pi * np.e)).sum()))
        return logp, ent, zsc

    def log_prob(self, obs, actions) -> np.ndarray:
        out, _, _ = self.forward(obs)
        return self.log_prob_entropy(out, actions)[0]

    def act(self, obs, rng: np.random.Generator, deterministic: bool = False):
        """(actions, log-probs, values) for a batch of observations."""
        out, v, _ = self.forward(obs)
        if self.discrete:
            if deterministic:
                a = np.argmax(out, axis=1)
            else:
                z = out - out.max(axis=1, keepdims=True)
                p = np.exp(z)
                p /= p.sum(axis=1, keepdims=True)
                u = rng.random(out.shape[0])
                a = np.minimum((u[:, None] > np.cumsum(p, axis=1)).sum(axis=1), self.n_out - 1)
        else:
            a = out.copy() if deterministic else out + np.exp(self.log_std) * rng.normal(size=out.shape)
        logp, _, _ = self.log_prob_entropy(out, a)
        return a, logp, v

    def save(self, path: str | Path, **extra) -> None:
        save_checkpoint(
            path,
            self.store,
            kind="policy",
            policy={
                "obs_dim": self.obs_dim,
                "agent_kind": self.kind,
                "hidden": self.hidden,
                "seed": self.seed,
                "obs_source": self.obs_source,
            },
            **extra,
        )

    @classmethod
    def load(cls, path: str | Path) -> tuple["Policy", dict]:
        header, tensors = read_checkpoint(path)
        if header.get("kind") != "policy":
            raise RLError(f"{path}: not a policy checkpoint")
        meta = header["policy"]
        pol = cls(meta["obs_dim"], meta["agent_kind"], meta["hidden"], meta["seed"], meta.get("obs_source", "reward_model"))
        load_into(pol.store, tensors)
        pol.store.step = int(header.get("step", 0))
        return pol, header


class RandomPolicy:
    """Uniform random actions; the lower reference point for evaluation."""

    def __init__(self, kind: str):
        self.kind = kind

    def act(self, obs, rng: np.random.Generator, deterministic: bool = False):
        n = np.atleast_2d(obs).shape[0]
        if self.kind == CARTPOLE:
            a = rng.integers(0, 2, size=n)
        else:
            a = rng.uniform(-0.9, 0.9, size=(n, 3))
        return a, np.zeros(n), np.zeros(n)


# -- observation and reward -------------------------------------------------------------


def observe(model: RewardModel, music: MusicFeatureTrack, t: int, state: EnvState) -> np.ndarray:
    """[h^m_t ; s_t] for a single state."""
    w = model.config.half_width
    if not w <= t < music.n_frames - w:
        raise RLError(f"frame {t} has no full music window (w={w}, T={music.n_frames})")
    return np.concatenate([model.encode_music(music.window(t, w)), state.vector])


def step_reward(raw_sim, penalty, center_factor):
    """Cosine reward scaled by the centring factor plus the penalty."""
    return np.asarray(raw_sim) * np.asarray(center_factor) + np.asarray(penalty)


@dataclass
class MusicCache:
    """Per-track h^m / z^m for every frame, computed once from the frozen model."""

    h: list[np.ndarray]
    z: list[np.ndarray]

    @classmethod
    def build(cls, model: RewardModel, tracks: list[MusicFeatureTrack]) -> "MusicCache":
        hs, zs = zip(*(model.music_embeddings(m) for m in tracks)) if tracks else ((), ())
        return cls(list(hs), list(zs))


# -- rollouts ------------------------------------------------------------------------------


@dataclass
class RolloutBuffer:
    obs: np.ndarray  # (T, N, obs_dim)
    actions: np.ndarray  # (T, N) or (T, N, 3)
    logp: np.ndarray
    values: np.ndarray
    rewards: np.ndarray
    penalties: np.ndarray
    dones: np.ndarray
    centers: np.ndarray
    sims: np.ndarray
    last_value: np.ndarray  # (N,) bootstrap value of the state after the last step
    episodes: list = field(default_factory=list)  # finished (return, length, exited)

    def __len__(self) -> int:
        return self.rewards.size

    def flat(self, name: str) -> np.ndarray:
        a = getattr(self, name)
        return a.reshape((-1,) + a.shape[2:])


ObserveFn = Callable[[VecDanceEnv], np.ndarray]
RewardFn = Callable[[VecDanceEnv, np.ndarray, np.ndarray, np.ndarray, np.ndarray, np.ndarray], tuple[np.ndarray, np.ndarray]]


def reward_model_observer(cache: MusicCache) -> ObserveFn:
    def fn(venv: VecDanceEnv) -> np.ndarray:
        hm = np.stack([cache.h[k][f] for k, f in zip(venv.track, venv.frame)])
        return np.concatenate([hm, venv.state_vectors()], axis=1)

    return fn


def reward_model_rewarder(model: RewardModel, cache: MusicCache) -> RewardFn:
    def fn(venv, prev, nxt, music_frames, penalty, center):
        z_o = model.flow_embedding(estimate_flow(prev, nxt))
        z_m = np.stack([cache.z[k][f] for k, f in zip(venv.track, music_frames)])
        sim = cosine(z_m, z_o)
        return step_reward(sim, penalty, center), sim

    return fn


class EpisodeTracker:
    def __init__(self, n: int):
        self.ret = np.zeros(n)
        self.length = np.zeros(n, dtype=np.int64)

    def update(self, rewards, dones, penalties) -> list:
        self.ret += rewards
        self.length += 1
        out = []
        for i in np.flatnonzero(dones):
            out.append((float(self.ret[i]), int(self.length[i]), bool(penalties[i] < 0)))
            self.ret[i] = 0.0
            self.length[i] = 0
        return out


def collect_rollouts(
    policy,
    venv: VecDanceEnv,
    n_steps: int,
    observe_fn: ObserveFn,
    reward_fn: RewardFn,
    rng: np.random.Generator,
    tracker: EpisodeTracker | None = None,
) -> RolloutBuffer:
    """Run ``n_steps`` transitions (split evenly over the vectorized episodes)."""
    if n_steps < 1 or n_steps % venv.n_envs:
        raise RLError(f"n_steps must be a positive multiple of {venv.n_envs}")
    t_len, n = n_steps // venv.n_envs, venv.n_envs
    tracker = tracker or EpisodeTracker(n)
    bufs = {k: [] for k in ("obs", "actions", "logp", "values", "rewards", "penalties", "dones", "centers", "sims")}
    episodes = []
    for _ in range(t_len):
        obs = observe_fn(venv)
        actions, logp, values = policy.act(obs, rng)
        prev, nxt, penalty, done, center, music_frames = venv.step(actions)
        r, sim = reward_fn(venv, prev, nxt, music_frames, penalty, center)
        if not np.isfinite(r).all():
            raise NonFiniteError("non-finite reward")
        episodes += tracker.update(r, done, penalty)
        for k, v in zip(bufs, (obs, actions, logp, values, r, penalty, done, center, sim)):
            bufs[k].append(np.asarray(v))
    _, _, last_value = policy.act(observe_fn(venv), np.random.default_rng(0), deterministic=True)
    arrays = {k: np.stack(v) for k, v in bufs.items()}
    arrays["dones"] = arrays["dones"].astype(bool)
    return RolloutBuffer(**arrays, last_value=last_value, episodes=episodes)


def compute_gae(rewards, values, dones, last_value, gamma: float, lam: float):
    """Generalized advantage estimates and returns for (T, N) arrays.

    ``dones[t]`` marks the end of an episode after step t; time-limit ends are
    treated as terminal.
    """
    rewards = np.asarray(rewards, dtype=np.float64)
    values = np.asarray(values, dtype=np.float64)
    if rewards.ndim == 1:
        rewards, values, dones = rewards[:, None], values[:, None], np.asarray(dones)[:, None]
        last_value = np.atleast_1d(last_value)
        adv, ret = compute_gae(rewards, values, dones, last_value, gamma, lam)
        return adv[:, 0], ret[:, 0]
    t_len = rewards.shape[0]
    adv = np.zeros_like(rewards)
    gae = np.zeros(rewards.shape[1])
    next_v = np.asarray(last_value, dtype=np.float64)
    for t in range(t_len - 1, -1, -1):
        live = 1.0 - np.asarray(dones[t], dtype=np.float64)
        delta = rewards[t] + gamma * next_v * live - values[t]
        gae = delta + gamma * lam * live * gae
        adv[t] = gae
        next_v = values[t]
    return adv, adv + values


def clipped_surrogate(ratio, adv, clip: float) -> np.ndarray:
    """Per-sample min(r A, clip(r, 1-eps, 1+eps) A)."""
    ratio = np.asarray(ratio, dtype=np.float64)
    adv = np.asarray(adv, dtype=np.float64)
    return np.minimum(ratio * adv, np.clip(ratio, 1 - clip, 1 + clip) * adv)


def ppo_loss(policy: Policy, obs, actions, old_logp, adv, returns, config: TrainConfig, backward: bool = True) -> dict:
    """Clipped-surrogate loss terms for one minibatch; accumulates gradients if asked."""
    out, v, cache = policy.forward(obs)
    logp, ent, aux = policy.log_prob_entropy(out, actions)
    ratio = np.exp(logp - old_logp)
    surr = clipped_surrogate(ratio, adv, config.clip)
    n = adv.size
    pl = -surr.mean()
    vl = np.mean((v - returns) ** 2)
    el = ent.mean()
    total = pl + config.vf_coef * vl - config.ent_coef * el
    if not np.isfinite(total):
        raise NonFiniteError(f"non-finite PPO loss (policy {pl}, value {vl}, entropy {el})")
    report = {
        "loss": float(total),
        "policy_loss": float(pl),
        "value_loss": float(vl),
        "entropy": float(el),
        "approx_kl": float(np.mean(old_logp - logp)),
        "clip_frac": float(np.mean(np.abs(ratio - 1) > config.clip)),
        "ratio_max_dev": float(np.max(np.abs(ratio - 1))),
    }
    if not backward:
        return report
    # d(-surr)/dlogp is -A r where the unclipped term is the active minimum, else 0
    active = ratio * adv <= np.clip(ratio, 1 - config.clip, 1 + config.clip) * adv
    g_logp = np.where(active, -adv * ratio, 0.0) / n
    dv = config.vf_coef * 2.0 * (v - returns) / n
    if policy.discrete:
        logp_all = aux
        p = np.exp(logp_all)
        onehot = np.zeros_like(p)
        onehot[np.arange(n), np.asarray(actions, dtype=np.int64)] = 1.0
        d_ent = -p * (logp_all + ent[:, None])
        dout = g_logp[:, None] * (onehot - p) - (config.ent_coef / n) * d_ent
    else:
        zsc = aux
        sd = np.exp(policy.log_std)
        dout = g_logp[:, None] * zsc / sd
        d_logstd = (g_logp[:, None] * (zsc**2 - 1)).sum(axis=0) - config.ent_coef
        inside = (policy.store["log_std"] > LOG_STD_RANGE[0]) & (policy.store["log_std"] < LOG_STD_RANGE[1])
        policy.store.accumulate("log_std", np.where(inside, d_logstd, 0.0))
    policy.backward(dout, dv, cache)
    return report


class ReturnScaler:
    """Running standard deviation of the discounted return, used to put rewards
    on a unit scale so the value loss cannot swamp the policy gradient."""

    def __init__(self, n_envs: int, gamma: float):
        self.gamma = gamma
        self.ret = np.zeros(n_envs)
        self.count, self.mean, self.m2 = 0, 0.0, 0.0

    def update(self, rewards: np.ndarray, dones: np.ndarray) -> None:
        for r, d in zip(rewards, dones):
            self.ret = self.gamma * self.ret + r
            for x in self.ret:
                # Welford's running variance
                self.count += 1
                delta = x - self.mean
                self.mean += delta / self.count
                self.m2 += delta * (x - self.mean)
            self.ret[d] = 0.0

    @property
    def std(self) -> float:
        return float(np.sqrt(self.m2 / self.count)) + 1e-8 if self.count > 1 else 1.0


def ppo_update(
    policy: Policy, buffer: RolloutBuffer, config: TrainConfig, rng: np.random.Generator, reward_scale: float = 1.0
) -> dict:
    if len(buffer) == 0:
        raise RLError("empty rollout buffer")
    rewards = buffer.rewards / reward_scale
    adv, ret = compute_gae(rewards, buffer.values, buffer.dones, buffer.last_value, config.gamma, config.lam)
    adv, ret = adv.reshape(-1), ret.reshape(-1)
    adv = (adv - adv.mean()) / (adv.std() + 1e-8)
    obs, actions, old_logp = buffer.flat("obs"), buffer.flat("actions"), buffer.flat("logp")
    reports = []
    for _ in range(config.epochs):
        order = rng.permutation(adv.size)
        for i in range(0, adv.size, config.minibatch):
            idx = order[i : i + config.minibatch]
            policy.store.zero_grad()
            reports.append(ppo_loss(policy, obs[idx], actions[idx], old_logp[idx], adv[idx], ret[idx], config))
            policy.store.clip_grad_norm(config.max_grad_norm)
            adam_step(policy.store, lr=config.lr)
            if not policy.discrete:
                np.clip(policy.store["log_std"], *LOG_STD_RANGE, out=policy.store["log_std"])
    return {k: float(np.mean([r[k] for r in reports])) for k in reports[0]}


# -- training loop -------------------------------------------------------------------------

CURVE_FIELDS = [
    "iteration",
    "steps",
    "mean_reward",
    "mean_sim",
    "mean_episode_reward",
    "mean_ep_len",
    "max_ep_len",
    "exit_frac",
    "policy_loss",
    "value_loss",
    "entropy",
]


@dataclass
class LearningCurve:
    rows: list[dict] = field(default_factory=list)

    def write_csv(self, path: str | Path) -> None:
        with open(path, "w", newline="") as fh:
            w = csv.DictWriter(fh, fieldnames=CURVE_FIELDS, lineterminator="\n")
            w.writeheader()
            for r in self.rows:
                w.writerow({k: (f"{r[k]:.6f}" if isinstance(r[k], float) else r[k]) for k in CURVE_FIELDS})


def run_ppo(
    policy: Policy,
    venv: VecDanceEnv,
    observe_fn: ObserveFn,
    reward_fn: RewardFn,
    config: TrainConfig,
    on_iteration: Callable[[dict], None] | None = None,
) -> LearningCurve:
    rng = np.random.default_rng(config.seed + 1)
    tracker = EpisodeTracker(venv.n_envs)
    scaler = ReturnScaler(venv.n_envs, config.gamma)
    curve = LearningCurve()
    steps = 0
    for it in range(1, config.total_steps // config.batch_size + 1):
        buf = collect_rollouts(policy, venv, config.batch_size, observe_fn, reward_fn, rng, tracker)
        scaler.update(buf.rewards, buf.dones)
        rep = ppo_update(policy, buf, config, rng, scaler.std)
        steps += len(buf)
        eps = buf.episodes
        row = {
            "iteration": it,
            "steps": steps,
            "mean_reward": float(buf.rewards.mean()),
            "mean_sim": float(buf.sims.mean()),
            "mean_episode_reward": float(np.mean([e[0] for e in eps])) if eps else float("nan"),
            "mean_ep_len": float(np.mean([e[1] for e in eps])) if eps else float("nan"),
            "max_ep_len": max(e[1] for e in eps) if eps else 0,
            "exit_frac": float(np.mean([e[2] for e in eps])) if eps else float("nan"),
            "policy_loss": rep["policy_loss"],
            "value_loss": rep["value_loss"],
            "entropy": rep["entropy"],
        }
        curve.rows.append(row)
        log.info(
            "iter %d steps %d reward %.4f sim %.4f ep_len %.1f exit %.2f",
            it, steps, row["mean_reward"], row["mean_sim"], row["mean_ep_len"], row["exit_frac"],
        )
        if on_iteration:
            on_iteration(row)
    return curve


def train_dancer(
    kind: str,
    model: RewardModel,
    tracks: list[MusicFeatureTrack],
    config: TrainConfig = TrainConfig(),
) -> tuple[Policy, LearningCurve]:
    """PPO against the frozen reward model; fails if the model changes."""
    config.validate()
    if kind not in KINDS:
        raise RLError(f"unknown agent kind {kind!r}")
    digest = model.digest()
    cache = MusicCache.build(model, tracks)
    policy = Policy(model.config.dim + state_dim(kind), kind, config.hidden, config.seed)
    venv = VecDanceEnv(kind, tracks, config.n_envs, config.seed, model.config.half_width, config.cap, config.size)
    curve = run_ppo(policy, venv, reward_model_observer(cache), reward_model_rewarder(model, cache), config)
    if model.digest() != digest:
        raise RLError("reward model parameters changed during training")
    return policy, curve


# -- generation ------------------------------------------------------------------------------


@dataclass
class Dance:
    trajectory: Trajectory
    frames: np.ndarray  # (n + 1, s, s), initial frame then one per action
    sims: np.ndarray


def rollout_track(
    policy,
    kind: str,
    music: MusicFeatureTrack,
    obs_music: np.ndarray,
    half_width: int,
    deterministic: bool,
    seed: int,
    size: int = RENDER_SIZE,
):
    """Drive the agent across the whole track (frames w .. T-w-2).

    A cart that leaves the view is put back at the centre at rest, so the
    action count is always T - 2w - 1; the exit is recorded as a penalty.
    """
    n = music.n_frames - 2 * half_width - 1
    if n < 1:
        raise RLError(f"track of {music.n_frames} frames is too short for w_a={half_width}")
    rng = np.random.default_rng(seed)
    cp, ap = CartPoleParams(), ArmParams()
    if kind == CARTPOLE:
        q, qd = np.zeros((1, 2)), np.zeros((1, 2))
    else:
        q, qd = initial_arm_q(rng, ap)[None], np.zeros((1, 3))
    qs, qds, acts, pens, centers = [q[0]], [], [], [], []
    for i in range(n):
        t = half_width + i
        obs = np.concatenate([obs_music[t], q[0], qd[0]])[None]
        a, _, _ = policy.act(obs, rng, deterministic)
        q, qd = _advance(kind, q, qd, a, cp, ap)
        pen, _, center = _penalty_done(kind, q, np.array([0]), np.array([n + 1]))
        acts.append(np.atleast_1d(np.clip(a[0], -0.9, 0.9)).astype(np.float64))
        pens.append(float(pen[0]))
        centers.append(float(center[0]))
        qs.append(q[0].copy())
        qds.append(qd[0].copy())
        if kind == CARTPOLE and abs(q[0, 0]) > X_VIEW:
            q, qd = np.zeros((1, 2)), np.zeros((1, 2))
    q_all = np.array(qs)
    frames = render_batch(kind, q_all, size)
    return q_all, np.array(qds), np.array(acts), np.array(pens), np.array(centers), frames


def _flow_sims(model: RewardModel, frames: np.ndarray, z_m: np.ndarray, chunk: int = 128) -> np.ndarray:
    sims = np.empty(frames.shape[0] - 1)
    for i in range(0, sims.size, chunk):
        j = min(i + chunk, sims.size)
        z_o = model.flow_embedding(estimate_flow(frames[i:j], frames[i + 1 : j + 1]))
        sims[i:j] = cosine(z_m[i:j], z_o)
    return sims


def generate_dance(
    policy,
    model: RewardModel,
    music: MusicFeatureTrack,
    deterministic: bool = True,
    seed: int = 0,
    size: int = RENDER_SIZE,
    cache: tuple[np.ndarray, np.ndarray] | None = None,
) -> Dance:
    """Dance over the whole track; returns the trajectory, frames and per-step cosine rewards."""
    w = model.config.half_width
    h, z = cache if cache is not None else model.music_embeddings(music)
    kind = policy.kind
    q, qd, acts, pens, centers, frames = rollout_track(policy, kind, music, h, w, deterministic, seed, size)
    n = acts.shape[0]
    sims = _flow_sims(model, frames, z[w : w + n])
    rewards = step_reward(sims, pens, centers)
    traj = Trajectory(
        kind,
        q[1:],
        qd,
        acts,
        rewards,
        pens,
        seed,
        {"track_id": str(music.meta.get("track_id", "")), "start": w, "n_frames": music.n_frames},
        {"deterministic": deterministic, "mean_sim": float(sims.mean())},
    )
    return Dance(traj, frames, sims)


def config_dict(config) -> dict:
    return asdict(config)
