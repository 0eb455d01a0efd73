"""Simulated non-humanoid dancers: a free-swinging cart-pole and a planar 3-link arm.

Physics is stepped at 60 Hz with semi-implicit Euler. Dynamics and rendering
are written over a leading batch axis so :class:`VecDanceEnv` can advance many
episodes at once; the single-state :func:`reset`/:func:`step` API is the same
code with a batch of one.
"""

from __future__ import annotations

from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np

from . import render as rz
from .audio import MusicFeatureTrack
from .containers import FormatError, read_container, write_container

CARTPOLE = "cartpole"
ARM = "arm"
KINDS = (CARTPOLE, ARM)

DT = 1.0 / 60.0
EPISODE_CAP = 1000
X_VIEW = 2.4
ACTION_LIMIT = 0.9
RENDER_SIZE = 48
BACKGROUND = 0.0


class EnvError(ValueError):
    pass


class EnvFault(FloatingPointError):
    """Non-finite state reached or supplied."""


@dataclass(frozen=True)
class CartPoleParams:
    gravity: float = 9.8
    mass_cart: float = 1.0
    mass_pole: float = 0.1
    half_length: float = 0.5
    force_mag: float = 10.0
    substeps: int = 8
    pole_damping: float = 0.0  # angular velocity decay rate, 1/s


@dataclass(frozen=True)
class ArmParams:
    lengths: tuple[float, float, float] = (0.45, 0.35, 0.25)
    max_accel: float = 20.0  # rad/s^2 rate limit on joint velocity changes


@dataclass(frozen=True)
class MusicCursor:
    track_id: str
    start: int
    frame: int


@dataclass(frozen=True)
class EnvState:
    kind: str
    q: np.ndarray
    qd: np.ndarray
    t: int
    cursor: MusicCursor
    cap: int = EPISODE_CAP

    def __post_init__(self):
        if self.kind not in KINDS:
            raise EnvError(f"unknown agent kind {self.kind!r}")
        q = np.asarray(self.q, dtype=np.float64)
        qd = np.asarray(self.qd, dtype=np.float64)
        if not (np.isfinite(q).all() and np.isfinite(qd).all()):
            raise EnvFault("non-finite state")
        object.__setattr__(self, "q", q)
        object.__setattr__(self, "qd", qd)

    @property
    def vector(self) -> np.ndarray:
        """Flattened (positions, velocities)."""
        return np.concatenate([self.q, self.qd])


@dataclass(frozen=True)
class StepResult:
    state: EnvState
    frame: np.ndarray
    penalty: float
    done: bool
    center_factor: float


def state_dim(kind: str) -> int:
    return 4 if kind == CARTPOLE else 6


def action_dim(kind: str) -> int:
    """Number of discrete actions for the cart-pole, vector length for the arm."""
    return 2 if kind == CARTPOLE else 3


def wrap_angle(a):
    """Map angles into (-pi, pi]."""
    return np.pi - np.mod(np.pi - np.asarray(a, dtype=np.float64), 2 * np.pi)


# -- dynamics (batched) ----------------------------------------------------------------


def cartpole_accel(x, th, xd, thd, force, p: CartPoleParams):
    total = p.mass_cart + p.mass_pole
    pml = p.mass_pole * p.half_length
    s, c = np.sin(th), np.cos(th)
    temp = (force + pml * thd**2 * s) / total
    thacc = (p.gravity * s - c * temp) / (p.half_length * (4.0 / 3.0 - p.mass_pole * c**2 / total))
    xacc = temp - pml * thacc * c / total
    return xacc, thacc - p.pole_damping * thd


def cartpole_integrate(q, qd, force, p: CartPoleParams):
    x, th = q[:, 0].copy(), q[:, 1].copy()
    xd, thd = qd[:, 0].copy(), qd[:, 1].copy()
    h = DT / p.substeps
    for _ in range(p.substeps):
        xacc, thacc = cartpole_accel(x, th, xd, thd, force, p)
        xd = xd + h * xacc
        thd = thd + h * thacc
        x = x + h * xd
        th = th + h * thd
    return np.stack([x, wrap_angle(th)], axis=1), np.stack([xd, thd], axis=1)


def cartpole_energy(q, qd, p: CartPoleParams = CartPoleParams()) -> np.ndarray:
    """Total mechanical energy of the frictionless cart-pole (uniform rod)."""
    q, qd = np.atleast_2d(q), np.atleast_2d(qd)
    th, xd, thd = q[:, 1], qd[:, 0], qd[:, 1]
    m, M, l = p.mass_pole, p.mass_cart, p.half_length
    kin = 0.5 * (M + m) * xd**2 + m * l * xd * thd * np.cos(th) + 0.5 * (4.0 / 3.0) * m * l**2 * thd**2
    return kin + m * p.gravity * l * np.cos(th)


def arm_integrate(q, qd, command, p: ArmParams):
    target = np.clip(command, -ACTION_LIMIT, ACTION_LIMIT)
    dv = np.clip(target - qd, -p.max_accel * DT, p.max_accel * DT)
    qd = np.clip(qd + dv, -ACTION_LIMIT, ACTION_LIMIT)
    return wrap_angle(q + DT * qd), qd


def arm_points(q, p: ArmParams = ArmParams()) -> np.ndarray:
    """World coordinates (x right, y up) of base, elbow joints and tip: (N, 4, 2)."""
    q = np.atleast_2d(q)
    phi = np.cumsum(q, axis=1)
    pts = np.zeros((q.shape[0], 4, 2))
    for k, length in enumerate(p.lengths):
        pts[:, k + 1, 0] = pts[:, k, 0] + length * np.sin(phi[:, k])
        pts[:, k + 1, 1] = pts[:, k, 1] + length * np.cos(phi[:, k])
    return pts


def arm_below_base(q, p: ArmParams = ArmParams()) -> np.ndarray:
    return np.any(arm_points(q, p)[:, 1:, 1] < 0.0, axis=1)


# -- rendering (batched) ------------------------------------------------------------------


def render_cartpole(q, size: int = RENDER_SIZE, p: CartPoleParams = CartPoleParams()) -> np.ndarray:
    q = np.atleast_2d(q)
    n = q.shape[0]
    scale = size / (2 * X_VIEW)
    track_y = 0.62 * size
    cx = size / 2.0 + q[:, 0] * scale
    pivot = np.stack([cx, np.full(n, track_y)], axis=1)
    tip = pivot + 2 * p.half_length * scale * np.stack([np.sin(q[:, 1]), -np.cos(q[:, 1])], axis=1)
    bg = np.full((n, size, size), BACKGROUND)
    track = rz.box(size, size, np.array([[size / 2.0, track_y + 0.2 * scale]]), (size, 0.25))
    layers = [
        (np.broadcast_to(track, bg.shape), 0.3),
        (rz.box(size, size, pivot, (0.25 * scale, 0.15 * scale)), 1.0),
        (rz.capsule(size, size, pivot, tip, max(1.0, 0.08 * scale)), 0.8),
    ]
    return rz.compose(bg, layers)


def render_arm(q, size: int = RENDER_SIZE, p: ArmParams = ArmParams()) -> np.ndarray:
    q = np.atleast_2d(q)
    n = q.shape[0]
    scale = 0.45 * size / sum(p.lengths)
    pts = arm_points(q, p)
    pix = np.empty_like(pts)
    pix[..., 0] = size / 2.0 + pts[..., 0] * scale
    pix[..., 1] = 0.85 * size - pts[..., 1] * scale
    bg = np.full((n, size, size), BACKGROUND)
    unit = size / 48.0
    layers = [(rz.box(size, size, pix[:, 0] + [0.0, 2.0 * unit], (3.0 * unit, 2.0 * unit)), 0.5)]
    for k, radius in enumerate((1.6, 1.3, 1.0)):
        layers.append((rz.capsule(size, size, pix[:, k], pix[:, k + 1], radius * unit), 0.9 - 0.1 * k))
    return rz.compose(bg, layers)


def render_batch(kind: str, q, size: int = RENDER_SIZE) -> np.ndarray:
    if size < 32:
        raise EnvError("render resolution must be at least 32x32")
    return render_cartpole(q, size) if kind == CARTPOLE else render_arm(q, size)


def render(state: EnvState, resolution: tuple[int, int] = (RENDER_SIZE, RENDER_SIZE)) -> np.ndarray:
    """Grayscale frame in [0, 1]; square canonical framing (w must equal h)."""
    w, h = resolution
    if w != h:
        raise EnvError("only square frames are supported")
    return render_batch(state.kind, state.q[None], w)[0]


# -- episode API ------------------------------------------------------------------------------


def initial_arm_q(rng: np.random.Generator, p: ArmParams = ArmParams()) -> np.ndarray:
    """Seeded joint angles with every link point at least 0.05 above the base."""
    while True:
        q = np.array([rng.uniform(-0.6, 0.6), rng.uniform(-0.9, 0.9), rng.uniform(-0.9, 0.9)])
        if arm_points(q, p)[0, 1:, 1].min() >= 0.05:
            return q


def music_start(rng: np.random.Generator, n_frames: int, half_width: int, cap: int) -> int:
    lo = half_width
    hi = n_frames - half_width - cap
    return int(rng.integers(lo, hi)) if hi > lo else lo


def reset(
    kind: str,
    seed: int,
    music: MusicFeatureTrack,
    half_width: int = 30,
    cap: int = EPISODE_CAP,
    track_id: str = "",
) -> EnvState:
    if kind not in KINDS:
        raise EnvError(f"unknown agent kind {kind!r}")
    if music.n_frames <= 2 * half_width + 1:
        raise EnvError(f"music track of {music.n_frames} frames is too short for w_a={half_width}")
    rng = np.random.default_rng(seed)
    if kind == CARTPOLE:
        q, qd = np.zeros(2), np.zeros(2)
    else:
        q, qd = initial_arm_q(rng), np.zeros(3)
    start = music_start(rng, music.n_frames, half_width, cap)
    usable = min(cap, music.n_frames - half_width - 1 - start)
    cid = track_id or str(music.meta.get("track_id", ""))
    return EnvState(kind, q, qd, 0, MusicCursor(cid, start, start), usable)


def _advance(kind, q, qd, action, cp: CartPoleParams, ap: ArmParams):
    if kind == CARTPOLE:
        force = np.where(np.asarray(action) == 1, cp.force_mag, -cp.force_mag).astype(np.float64)
        return cartpole_integrate(q, qd, force, cp)
    return arm_integrate(q, qd, np.asarray(action, dtype=np.float64), ap)


def _penalty_done(kind, q, t_next, cap):
    if kind == CARTPOLE:
        out = np.abs(q[:, 0]) > X_VIEW
        penalty = np.where(out, -1.0, 0.0)
        center = np.maximum(0.0, 1.0 - np.abs(q[:, 0]) / X_VIEW)
        done = out | (t_next >= cap)
    else:
        penalty = np.where(arm_below_base(q), -1.0, 0.0)
        center = np.ones(q.shape[0])
        done = t_next >= cap
    return penalty, done, center


def step(
    state: EnvState,
    action,
    resolution: int = RENDER_SIZE,
    cartpole: CartPoleParams = CartPoleParams(),
    arm: ArmParams = ArmParams(),
) -> StepResult:
    if state.kind == CARTPOLE:
        a = int(action)
        if a not in (0, 1):
            raise EnvError(f"cart-pole action must be 0 or 1, got {action!r}")
        act = np.array([a])
    else:
        act = np.clip(np.asarray(action, dtype=np.float64).reshape(1, 3), -ACTION_LIMIT, ACTION_LIMIT)
    q, qd = _advance(state.kind, state.q[None], state.qd[None], act, cartpole, arm)
    if not (np.isfinite(q).all() and np.isfinite(qd).all()):
        raise EnvFault("integration produced non-finite state")
    t = state.t + 1
    penalty, done, center = _penalty_done(state.kind, q, np.array([t]), state.cap)
    cursor = replace(state.cursor, frame=state.cursor.frame + 1)
    nxt = EnvState(state.kind, q[0], qd[0], t, cursor, state.cap)
    return StepResult(nxt, render(nxt, (resolution, resolution)), float(penalty[0]), bool(done[0]), float(center[0]))


def step_force(state: EnvState, force: float, p: CartPoleParams = CartPoleParams()) -> EnvState:
    """Cart-pole step under an arbitrary horizontal force (used for physics checks)."""
    q, qd = cartpole_integrate(state.q[None], state.qd[None], np.array([float(force)]), p)
    return EnvState(state.kind, q[0], qd[0], state.t + 1, replace(state.cursor, frame=state.cursor.frame + 1), state.cap)


def kinematic_velocity(history) -> np.ndarray:
    """Per-frame Euclidean norm of the generalized velocities.

    Accepts a sequence of :class:`EnvState` or a (T, d) velocity array.
    """
    if len(history) and isinstance(history[0], EnvState):
        arr = np.stack([s.qd for s in history])
    else:
        arr = np.atleast_2d(np.asarray(history, dtype=np.float64))
    return np.linalg.norm(arr, axis=1)


# -- vectorized environment -------------------------------------------------------------------


@dataclass
class VecDanceEnv:
    """N independent episodes advanced in lock-step.

    Episodes that finish are reset immediately (in index order, from the
    environment's own generator) so results are reproducible from ``seed``.
    """

    kind: str
    tracks: list[MusicFeatureTrack]
    n_envs: int
    seed: int
    half_width: int = 30
    cap: int = EPISODE_CAP
    size: int = RENDER_SIZE
    cartpole: CartPoleParams = field(default_factory=CartPoleParams)
    arm: ArmParams = field(default_factory=ArmParams)
    fixed_cap: int | None = None  # per-track caps override, e.g. reference lengths

    def __post_init__(self):
        if self.kind not in KINDS:
            raise EnvError(f"unknown agent kind {self.kind!r}")
        if not self.tracks:
            raise EnvError("at least one music track is required")
        self.rng = np.random.default_rng(self.seed)
        d = 2 if self.kind == CARTPOLE else 3
        self.q = np.zeros((self.n_envs, d))
        self.qd = np.zeros((self.n_envs, d))
        self.t = np.zeros(self.n_envs, dtype=np.int64)
        self.track = np.zeros(self.n_envs, dtype=np.int64)
        self.frame = np.zeros(self.n_envs, dtype=np.int64)
        self.ep_cap = np.zeros(self.n_envs, dtype=np.int64)
        for i in range(self.n_envs):
            self._reset_one(i)
        self.frames = self.render()

    def _reset_one(self, i: int) -> None:
        k = int(self.rng.integers(len(self.tracks)))
        music = self.tracks[k]
        cap = self.cap if self.fixed_cap is None else min(self.cap, self.fixed_cap)
        if self.kind == CARTPOLE:
            self.q[i], self.qd[i] = 0.0, 0.0
        else:
            self.q[i], self.qd[i] = initial_arm_q(self.rng, self.arm), 0.0
        start = music_start(self.rng, music.n_frames, self.half_width, cap)
        self.track[i] = k
        self.frame[i] = start
        self.t[i] = 0
        self.ep_cap[i] = max(1, min(cap, music.n_frames - self.half_width - 1 - start))

    def render(self) -> np.ndarray:
        return render_batch(self.kind, self.q, self.size)

    def state_vectors(self) -> np.ndarray:
        return np.concatenate([self.q, self.qd], axis=1)

    def step(self, actions):
        """Advance all episodes.

        Returns (prev_frames, next_frames, penalty, done, center, music_frames)
        where music_frames are the frame indices the step was taken at.
        Finished episodes are reset after the next frames are rendered.
        """
        if self.kind == CARTPOLE:
            act = np.asarray(actions, dtype=np.int64)
        else:
            act = np.clip(np.asarray(actions, dtype=np.float64), -ACTION_LIMIT, ACTION_LIMIT)
        music_frames = self.frame.copy()
        self.q, self.qd = _advance(self.kind, self.q, self.qd, act, self.cartpole, self.arm)
        if not (np.isfinite(self.q).all() and np.isfinite(self.qd).all()):
            raise EnvFault("integration produced non-finite state")
        self.t += 1
        self.frame += 1
        penalty, done, center = _penalty_done(self.kind, self.q, self.t, self.ep_cap)
        prev = self.frames
        nxt = self.render()
        self.frames = nxt
        if done.any():
            for i in np.flatnonzero(done):
                self._reset_one(int(i))
            self.frames = self.frames.copy()
            self.frames[done] = render_batch(self.kind, self.q[done], self.size)
        return prev, nxt, penalty, done, center, music_frames


# -- trajectory export --------------------------------------------------------------------------


@dataclass
class Trajectory:
    kind: str
    q: np.ndarray  # (T, d)
    qd: np.ndarray  # (T, d)
    actions: np.ndarray  # (T, a)
    rewards: np.ndarray  # (T,)
    penalties: np.ndarray  # (T,)
    seed: int = 0
    music_ref: dict = field(default_factory=dict)
    extra: dict = field(default_factory=dict)

    def __len__(self) -> int:
        return self.q.shape[0]

    def save(self, path: str | Path) -> None:
        act = np.atleast_2d(np.asarray(self.actions, dtype=np.float64))
        if act.shape[0] != len(self):
            act = act.reshape(len(self), -1)
        rows = np.column_stack([self.q, self.qd, act, self.rewards, self.penalties])
        header = {
            "agent_kind": self.kind,
            "seed": self.seed,
            "music_ref": self.music_ref,
            "dt": DT,
            "columns": {"q": self.q.shape[1], "qd": self.qd.shape[1], "action": act.shape[1]},
            "n_rows": len(self),
            "extra": self.extra,
        }
        write_container(path, b"TRJ1", header, rows)

    @classmethod
    def load(cls, path: str | Path) -> "Trajectory":
        header, payload = read_container(path, b"TRJ1")
        cols = header["columns"]
        width = cols["q"] + cols["qd"] + cols["action"] + 2
        n = int(header["n_rows"])
        if payload.size != n * width:
            raise FormatError(f"{path}: payload does not match {n} rows of width {width}")
        rows = payload.reshape(n, width).astype(np.float64)
        a, b, c = cols["q"], cols["q"] + cols["qd"], cols["q"] + cols["qd"] + cols["action"]
        return cls(
            header["agent_kind"],
            rows[:, :a],
            rows[:, a:b],
            rows[:, b:c],
            rows[:, c],
            rows[:, c + 1],
            int(header["seed"]),
            header.get("music_ref", {}),
            header.get("extra", {}),
        )


def write_pgm_sequence(out_dir: str | Path, frames: np.ndarray, prefix: str = "frame") -> list[Path]:
    """Binary 8-bit PGM per frame."""
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    paths = []
    for i, f in enumerate(frames):
        img = np.round(np.clip(f, 0, 1) * 255).astype(np.uint8)
        p = out_dir / f"{prefix}_{i:05d}.pgm"
        p.write_bytes(f"P5 {img.shape[1]} {img.shape[0]} 255\n".encode() + img.tobytes())
        paths.append(p)
    return paths


def read_pgm(path: str | Path) -> np.ndarray:
    raw = Path(path).read_bytes()
    head, _, body = raw.partition(b"\n")
    magic, w, h, _ = head.split()
    if magic != b"P5":
        raise FormatError(f"{path}: not a binary PGM")
    return np.frombuffer(body, dtype=np.uint8).reshape(int(h), int(w)) / 255.0

