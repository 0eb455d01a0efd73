"""Synthetic reference dancers whose motion follows the music by construction.

A five-segment stick figure (torso and two two-link arms) moves with joint
speed that falls to zero on every music beat and peaks between beats, scaled
by the local loudness. At each beat the movement direction is re-drawn from a
pitch-class dependent prototype, so both rhythm and harmony leave a trace in
the optical flow of the rendered figure.
"""

from __future__ import annotations

import hashlib
import json
import logging
from concurrent.futures import ProcessPoolExecutor
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np
from scipy.ndimage import maximum_filter1d, uniform_filter1d

from . import render as rz
from .audio import COLUMNS, FPS, AudioError, MusicFeatureTrack, decode_wav, extract_music_features
from .containers import SCHEMA_VERSION
from .env import DT, Trajectory
from .flow import estimate_flow, read_flows, write_flows

log = logging.getLogger(__name__)

N_JOINTS = 5  # torso, left shoulder, left elbow, right shoulder, right elbow
REFERENCE_SIZE = 64
PEAK_SPEED = 1.5  # rad/s at full loudness, mid-beat
REST = np.array([0.0, -1.9, -0.6, 1.9, 0.6])
DEFAULT_TEMPO = 120.0


class DatasetError(ValueError):
    pass


def _prototypes() -> np.ndarray:
    # one fixed movement direction per pitch class, shared by every dataset
    p = np.random.default_rng(12).normal(size=(12, N_JOINTS))
    return p / np.linalg.norm(p, axis=1, keepdims=True)


PROTOTYPES = _prototypes()


@dataclass
class ReferenceChoreography:
    pose: np.ndarray  # (T, 5) joint angles
    speed: np.ndarray  # (T,) joint-velocity norm, rad/s
    changes: np.ndarray  # frames where the movement direction is re-drawn
    track_id: str = ""
    seed: int = 0

    @property
    def velocity(self) -> np.ndarray:
        return np.diff(self.pose, axis=0, prepend=self.pose[:1]) / DT

    def __len__(self) -> int:
        return self.pose.shape[0]

    def to_trajectory(self) -> Trajectory:
        n = len(self)
        return Trajectory(
            "reference",
            self.pose,
            self.velocity,
            np.zeros((n, 0)),
            np.zeros(n),
            np.zeros(n),
            self.seed,
            {"track_id": self.track_id, "start": 0},
            {"changes": self.changes.tolist()},
        )

    @classmethod
    def from_trajectory(cls, traj: Trajectory) -> "ReferenceChoreography":
        speed = np.linalg.norm(traj.qd, axis=1)
        changes = np.array(traj.extra.get("changes", []), dtype=np.int64)
        return cls(traj.q, speed, changes, traj.music_ref.get("track_id", ""), traj.seed)


def _beat_grid(music: MusicFeatureTrack) -> np.ndarray:
    """Detected beats extended with virtual beats before the first and after
    the last one, so the whole track is covered by beat intervals."""
    t = music.n_frames
    beats = music.beats
    tempo = music.tempo_bpm if music.tempo_bpm and music.tempo_bpm > 0 else DEFAULT_TEMPO
    period = 60.0 * FPS / tempo
    if beats.size == 0:
        return np.round(np.arange(0, t + period, period)).astype(np.int64)
    head = np.round(np.arange(beats[0] - period, -period, -period)[::-1]).astype(np.int64)
    tail = np.round(np.arange(beats[-1] + period, t + period, period)).astype(np.int64)
    return np.unique(np.concatenate([head, beats, tail]))


def synth_choreography(music: MusicFeatureTrack, seed: int = 0, jitter: float = 0.05) -> ReferenceChoreography:
    rng = np.random.default_rng(seed)
    t = music.n_frames
    grid = _beat_grid(music)
    period = max(1, int(round(np.median(np.diff(grid))))) if grid.size > 1 else FPS // 2
    # loudness: local onset peak level, smoothed over a beat
    peak = maximum_filter1d(np.clip(music.envelope, 0.0, 1.0), period, mode="nearest")
    loud = uniform_filter1d(peak, period, mode="nearest")
    chroma = music.column("chroma")
    pose = np.empty((t, N_JOINTS))
    speed = np.zeros(t)
    cur = REST.copy()
    frames = np.arange(t)
    for a, b in zip(grid[:-1], grid[1:]):
        lo, hi = max(a, 0), min(b, t)
        if hi <= lo:
            continue
        pc = int(np.argmax(chroma[lo:hi].mean(axis=0))) if chroma[lo:hi].any() else 0
        d = PROTOTYPES[pc] + jitter * rng.normal(size=N_JOINTS)
        d /= np.linalg.norm(d)
        if np.dot(cur - REST, d) > 0:
            d = -d  # head back towards rest so the figure stays on screen
        phase = (frames[lo:hi] - a) / (b - a)
        sp = PEAK_SPEED * loud[lo:hi] * np.sin(np.pi * phase)
        speed[lo:hi] = sp
        steps = np.cumsum(sp[:, None] * d[None, :] * DT, axis=0)
        pose[lo:hi] = cur + np.vstack([np.zeros((1, N_JOINTS)), steps[:-1]])
        cur = cur + steps[-1]
    changes = grid[(grid >= 0) & (grid < t)]
    return ReferenceChoreography(pose, speed, changes, str(music.meta.get("track_id", "")), seed)


def figure_points(pose: np.ndarray, size: int = REFERENCE_SIZE) -> dict[str, np.ndarray]:
    """Pixel coordinates of the figure's joints for a batch of poses."""
    pose = np.atleast_2d(pose)
    u = size / 64.0
    n = pose.shape[0]
    hip = np.tile([size / 2.0, 46.0 * u], (n, 1))

    def ray(origin, angle, length):
        return origin + length * u * np.stack([np.sin(angle), -np.cos(angle)], axis=1)

    torso = pose[:, 0]
    neck = ray(hip, torso, 16.0)
    head = ray(hip, torso, 21.0)
    l_elbow = ray(neck, torso + pose[:, 1], 10.0)
    l_hand = ray(l_elbow, torso + pose[:, 1] + pose[:, 2], 9.0)
    r_elbow = ray(neck, torso + pose[:, 3], 10.0)
    r_hand = ray(r_elbow, torso + pose[:, 3] + pose[:, 4], 9.0)
    return {"hip": hip, "neck": neck, "head": head, "l_elbow": l_elbow, "l_hand": l_hand, "r_elbow": r_elbow, "r_hand": r_hand}


def render_reference(choreo: ReferenceChoreography | np.ndarray, size: int = REFERENCE_SIZE) -> np.ndarray:
    """(T, size, size) grayscale frames of the stick figure."""
    pose = choreo.pose if isinstance(choreo, ReferenceChoreography) else np.asarray(choreo)
    pts = figure_points(pose, size)
    u = size / 64.0
    n = pose.shape[0]
    feet_l = pts["hip"] + [-6.0 * u, 14.0 * u]
    feet_r = pts["hip"] + [6.0 * u, 14.0 * u]
    layers = [
        (rz.capsule(size, size, pts["hip"], feet_l, 1.5 * u), 0.6),
        (rz.capsule(size, size, pts["hip"], feet_r, 1.5 * u), 0.6),
        (rz.capsule(size, size, pts["hip"], pts["neck"], 2.5 * u), 0.9),
        (rz.disc(size, size, pts["head"], 4.0 * u), 1.0),
    ]
    for side, level in (("l", 0.8), ("r", 0.7)):
        layers.append((rz.capsule(size, size, pts["neck"], pts[f"{side}_elbow"], 1.6 * u), level))
        layers.append((rz.capsule(size, size, pts[f"{side}_elbow"], pts[f"{side}_hand"], 1.3 * u), level))
    return rz.compose(np.zeros((n, size, size)), layers)


def reference_flows(choreo: ReferenceChoreography, frames, size: int = REFERENCE_SIZE, chunk: int = 64) -> np.ndarray:
    """Flow from frame t to t+1 of the rendered reference, for each t in ``frames``."""
    frames = np.asarray(frames, dtype=np.int64)
    out = np.empty((frames.size, 2, size, size))
    for i in range(0, frames.size, chunk):
        f = frames[i : i + chunk]
        a = render_reference(choreo.pose[f], size)
        b = render_reference(choreo.pose[f + 1], size)
        out[i : i + chunk] = estimate_flow(a, b)
    return out


# -- dataset -------------------------------------------------------------------------------


@dataclass
class DatasetConfig:
    half_width: int = 30
    stride: int = 4
    val_fraction: float = 0.25
    seed: int = 0
    size: int = REFERENCE_SIZE


def sample_frames(n_frames: int, half_width: int, stride: int) -> np.ndarray:
    """Window centres t = w, w + stride, ...; floor((T - 2w - 1) / stride) of them."""
    count = max(0, (n_frames - 2 * half_width - 1) // stride)
    return half_width + stride * np.arange(count, dtype=np.int64)


def _track_seed(seed: int, track_id: str) -> int:
    return int.from_bytes(hashlib.sha256(f"{seed}:{track_id}".encode()).digest()[:4], "little")


def _build_track(args) -> dict:
    path, track_id, out_dir, cfg = args
    try:
        music = extract_music_features(decode_wav(path))
    except (AudioError, OSError, ValueError) as exc:
        return {"track_id": track_id, "source": str(path), "error": str(exc)}
    music.meta["track_id"] = track_id
    seed = _track_seed(cfg.seed, track_id)
    choreo = synth_choreography(music, seed)
    frames = sample_frames(music.n_frames, cfg.half_width, cfg.stride)
    if frames.size == 0:
        return {"track_id": track_id, "source": str(path), "error": "track too short for the window"}
    out_dir = Path(out_dir)
    music.save(out_dir / f"{track_id}.mft")
    choreo.to_trajectory().save(out_dir / f"{track_id}.traj")
    write_flows(out_dir / f"{track_id}.rfl", reference_flows(choreo, frames, cfg.size))
    return {
        "track_id": track_id,
        "source": Path(path).name,
        "n_frames": music.n_frames,
        "tempo_bpm": round(float(music.tempo_bpm), 4),
        "seed": seed,
        "frames": frames.tolist(),
    }


def build_dataset(audio_paths, out_dir: str | Path, config: DatasetConfig = DatasetConfig(), workers: int = 1) -> dict:
    """Features, choreography and flow shards for every track, plus manifest.json.

    Tracks that fail to decode are reported in the manifest; the build fails
    only if fewer than two tracks survive.
    """
    paths = sorted(Path(p) for p in audio_paths)
    if len(paths) < 2:
        raise DatasetError("need at least two audio files")
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    jobs = [(p, p.stem, out_dir, config) for p in paths]
    if workers > 1:
        with ProcessPoolExecutor(workers) as ex:
            results = list(ex.map(_build_track, jobs))
    else:
        results = [_build_track(j) for j in jobs]
    ok = [r for r in results if "error" not in r]
    failed = [r for r in results if "error" in r]
    for r in failed:
        log.warning("skipping %s: %s", r["source"], r["error"])
    if len(ok) < 2:
        raise DatasetError(f"only {len(ok)} usable tracks")
    ids = [r["track_id"] for r in ok]
    order = np.random.default_rng(config.seed).permutation(len(ids))
    n_val = min(len(ids) - 1, max(1, int(round(config.val_fraction * len(ids)))))
    val = sorted(ids[i] for i in order[:n_val])
    train = sorted(ids[i] for i in order[n_val:])
    manifest = {
        "schema_version": SCHEMA_VERSION,
        "config": asdict(config),
        "tracks": ok,
        "failures": [{"source": Path(r["source"]).name, "error": r["error"]} for r in failed],
        "splits": {"train": train, "val": val},
        "feature_columns": COLUMNS,
    }
    (out_dir / "manifest.json").write_text(json.dumps(manifest, indent=2, sort_keys=True) + "\n")
    return manifest


@dataclass
class TrackData:
    track_id: str
    music: MusicFeatureTrack
    frames: np.ndarray
    flows: np.ndarray  # (n, 2, s, s) flow at each sample frame
    choreo: ReferenceChoreography | None = None


@dataclass
class Dataset:
    root: Path
    manifest: dict
    tracks: dict[str, TrackData] = field(default_factory=dict)

    def split(self, name: str) -> list[TrackData]:
        return [self.tracks[t] for t in self.manifest["splits"][name]]

    @property
    def half_width(self) -> int:
        return int(self.manifest["config"]["half_width"])


def load_dataset(root: str | Path, with_flows: bool = True) -> Dataset:
    root = Path(root)
    mpath = root / "manifest.json"
    if not mpath.exists():
        raise DatasetError(f"{root}: no manifest.json")
    manifest = json.loads(mpath.read_text())
    if manifest.get("schema_version") != SCHEMA_VERSION:
        raise DatasetError(f"{root}: unsupported dataset schema {manifest.get('schema_version')!r}")
    ds = Dataset(root, manifest)
    for rec in manifest["tracks"]:
        tid = rec["track_id"]
        music = MusicFeatureTrack.load(root / f"{tid}.mft")
        frames = np.array(rec["frames"], dtype=np.int64)
        flows = read_flows(root / f"{tid}.rfl") if with_flows else np.zeros((0, 2, 0, 0))
        if with_flows and flows.shape[0] != frames.size:
            raise DatasetError(f"{tid}: {flows.shape[0]} flows for {frames.size} sample frames")
        choreo = ReferenceChoreography.from_trajectory(Trajectory.load(root / f"{tid}.traj"))
        ds.tracks[tid] = TrackData(tid, music, frames, flows, choreo)
    return ds
