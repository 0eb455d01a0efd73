"""Motion-music correlation: kinematic beats, BeatAlign and F1@note scores."""

from __future__ import annotations

import csv
import io
import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from scipy.ndimage import uniform_filter1d
from scipy.signal import peak_prominences

from .audio import MusicFeatureTrack
from .env import Trajectory, kinematic_velocity

NOTES = (16, 32, 64)
NOTE_NAMES = {16: "1/16", 32: "1/32", 64: "1/64"}
SIGMA = 3.0


class MetricsError(ValueError):
    pass


@dataclass(frozen=True)
class BeatTimeline:
    kinematic: np.ndarray
    music_beats: np.ndarray
    audio_peaks: np.ndarray
    tempo_bpm: float


def kinematic_beats(velocity, smooth_w: int = 5, prominence: float | None = None) -> np.ndarray:
    """Strict local minima of the moving-average-smoothed velocity series.

    Minima need a prominence of at least ``prominence`` (default 5% of the
    smoothed series' range).
    """
    v = np.asarray(velocity, dtype=np.float64)
    if v.size < 3:
        raise MetricsError("kinematic beats need at least 3 frames")
    if smooth_w > 1:
        v = uniform_filter1d(v, smooth_w, mode="nearest")
    span = float(v.max() - v.min())
    if span <= 0:
        return np.zeros(0, dtype=np.int64)
    thr = 0.05 * span if prominence is None else prominence
    idx = np.flatnonzero((v[1:-1] < v[:-2]) & (v[1:-1] < v[2:])) + 1
    if idx.size == 0:
        return idx.astype(np.int64)
    prom = peak_prominences(-v, idx)[0]
    return idx[prom >= thr].astype(np.int64)


def _nearest(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    """Distance from every element of a to its nearest element of b."""
    return np.abs(a[:, None] - b[None, :]).min(axis=1)


def beat_align(kinematic, reference, sigma: float = SIGMA) -> float:
    """Mean over kinematic beats of exp(-d^2 / (2 sigma^2)), d = distance to the
    nearest reference beat. Returns 0.0 when there are no kinematic beats."""
    bk = np.asarray(kinematic, dtype=np.float64)
    br = np.asarray(reference, dtype=np.float64)
    if br.size == 0:
        raise MetricsError("reference beat list is empty")
    if sigma <= 0:
        raise MetricsError("sigma must be positive")
    if bk.size == 0:
        return 0.0
    d = _nearest(bk, br)
    return float(np.mean(np.exp(-(d**2) / (2.0 * sigma**2))))


def note_threshold_frames(tempo_bpm: float, note: int) -> float:
    """Length of a 1/note note in 60 FPS frames (a quarter note is 3600/tempo)."""
    if tempo_bpm <= 0:
        raise MetricsError("tempo must be positive")
    if note not in NOTES:
        raise MetricsError(f"note must be one of {NOTES}")
    return (3600.0 / tempo_bpm) / (note / 4)


def f1_at_note(kinematic, reference, tempo_bpm: float, note: int) -> tuple[float, float, float]:
    """(precision, recall, F1) with nearest-distance matching and a strict threshold."""
    theta = note_threshold_frames(tempo_bpm, note)
    bk = np.asarray(kinematic, dtype=np.float64)
    br = np.asarray(reference, dtype=np.float64)
    if bk.size == 0 or br.size == 0:
        return 0.0, 0.0, 0.0
    precision = float(np.mean(_nearest(bk, br) < theta))
    recall = float(np.mean(_nearest(br, bk) < theta))
    f1 = 0.0 if precision + recall == 0 else 2 * precision * recall / (precision + recall)
    return precision, recall, f1


@dataclass
class CorrelationReport:
    beat_align: float
    peak_align: float
    f1: dict = field(default_factory=dict)  # (ref, note) -> (p, r, f1)
    counts: dict = field(default_factory=dict)
    flags: list = field(default_factory=list)

    def rows(self) -> list[dict]:
        out = []
        for ref, align in (("beat", self.beat_align), ("peak", self.peak_align)):
            row = {"reference": ref, "align": align}
            for note in NOTES:
                p, r, f = self.f1[(ref, note)]
                row[f"precision@{note}"] = p
                row[f"recall@{note}"] = r
                row[f"f1@{note}"] = f
            out.append(row)
        return out

    def to_json(self) -> str:
        return json.dumps(
            {"rows": self.rows(), "counts": self.counts, "flags": self.flags}, indent=2, sort_keys=True
        )

    def to_csv(self) -> str:
        rows = self.rows()
        buf = io.StringIO()
        w = csv.DictWriter(buf, fieldnames=list(rows[0]), lineterminator="\n")
        w.writeheader()
        w.writerows(rows)
        return buf.getvalue()

    def save(self, stem: str | Path) -> None:
        stem = Path(stem)
        stem.with_suffix(".json").write_text(self.to_json())
        stem.with_suffix(".csv").write_text(self.to_csv())

    def table(self) -> str:
        head = f"{'':6}" + "".join(f"{'F1@' + NOTE_NAMES[n]:>10}" for n in NOTES) + f"{'AlignScore':>12}"
        lines = [head]
        for ref, align in (("Beat", self.beat_align), ("Peak", self.peak_align)):
            cells = "".join(f"{self.f1[(ref.lower(), n)][2]:>10.3f}" for n in NOTES)
            lines.append(f"{ref:6}{cells}{align:>12.3f}")
        return "\n".join(lines)


def correlation_report(timeline: BeatTimeline, sigma: float = SIGMA) -> CorrelationReport:
    flags = []
    bk = timeline.kinematic
    if bk.size == 0:
        flags.append("no_kinematic_beats")
    aligns = {}
    for ref, arr in (("beat", timeline.music_beats), ("peak", timeline.audio_peaks)):
        if arr.size == 0:
            flags.append(f"no_{ref}s")
            aligns[ref] = 0.0
        else:
            aligns[ref] = beat_align(bk, arr, sigma)
    f1 = {}
    for ref, arr in (("beat", timeline.music_beats), ("peak", timeline.audio_peaks)):
        for note in NOTES:
            f1[(ref, note)] = f1_at_note(bk, arr, timeline.tempo_bpm, note)
    counts = {
        "kinematic_beats": int(bk.size),
        "music_beats": int(timeline.music_beats.size),
        "audio_peaks": int(timeline.audio_peaks.size),
    }
    return CorrelationReport(aligns["beat"], aligns["peak"], f1, counts, flags)


def evaluate_trajectory(
    traj: Trajectory,
    music: MusicFeatureTrack,
    smooth_w: int = 5,
    prominence: float | None = None,
    sigma: float = SIGMA,
) -> CorrelationReport:
    """Score a trajectory against the music it was generated for.

    Row i of the trajectory is aligned with music frame ``start + i`` where
    ``start`` comes from ``traj.music_ref`` (default 0).
    """
    start = int(traj.music_ref.get("start", 0))
    n = len(traj)
    if start < 0 or start + n > music.n_frames:
        raise MetricsError(
            f"trajectory of {n} frames starting at {start} does not fit a {music.n_frames}-frame track"
        )
    bk = kinematic_beats(kinematic_velocity(traj.qd), smooth_w, prominence)
    window = lambda b: b[(b >= start) & (b < start + n)] - start  # noqa: E731
    tl = BeatTimeline(bk, window(music.beats), window(music.peaks), music.tempo_bpm)
    return correlation_report(tl, sigma)
