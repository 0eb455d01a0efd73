"""Built-in click/tone synthesizer so the pipeline runs without external audio."""

from __future__ import annotations

from pathlib import Path

import numpy as np

from .audio import write_wav

SAMPLE_RATE = 24000

# major-scale degrees (semitones above the track root) a beat's tone can sit on
_SCALE = (0, 2, 4, 5, 7, 9, 11)


def sine(freq: float, duration: float, sample_rate: int = SAMPLE_RATE, amp: float = 0.5) -> np.ndarray:
    t = np.arange(int(round(duration * sample_rate))) / sample_rate
    return amp * np.sin(2 * np.pi * freq * t)


def _click(rng: np.random.Generator, sample_rate: int, length_s: float = 0.012) -> np.ndarray:
    n = int(length_s * sample_rate)
    decay = np.exp(-np.arange(n) / (0.25 * n))
    return rng.uniform(-1.0, 1.0, n) * decay


def click_track(
    tempo_bpm: float,
    duration: float,
    seed: int = 0,
    sample_rate: int = SAMPLE_RATE,
    amp: float = 0.8,
) -> tuple[np.ndarray, np.ndarray]:
    """Noise-burst clicks on every beat. Returns (samples, beat sample positions)."""
    rng = np.random.default_rng(seed)
    n = int(round(duration * sample_rate))
    out = np.zeros(n)
    period = 60.0 * sample_rate / tempo_bpm
    start = rng.uniform(0.1, 0.6) * period
    pos = np.round(np.arange(start, n, period)).astype(np.int64)
    click = _click(rng, sample_rate)
    for p in pos:
        seg = click[: n - p]
        out[p : p + seg.size] += amp * seg
    return np.clip(out, -1.0, 1.0), pos


def tone_track(
    tempo_bpm: float,
    duration: float,
    seed: int = 0,
    sample_rate: int = SAMPLE_RATE,
) -> tuple[np.ndarray, np.ndarray]:
    """A small synthetic song: kick clicks on beats, a decaying tone per beat
    on a randomly chosen scale degree per beat, and bar-level dynamics (some bars quiet).

    Returns (samples, beat sample positions).
    """
    rng = np.random.default_rng(seed)
    n = int(round(duration * sample_rate))
    out = np.zeros(n)
    period = 60.0 * sample_rate / tempo_bpm
    start = rng.uniform(0.1, 0.6) * period
    pos = np.round(np.arange(start, n, period)).astype(np.int64)
    root = 110.0 * 2 ** (rng.integers(0, 12) / 12.0)
    n_bars = len(pos) // 4 + 1
    degrees = rng.choice(_SCALE, size=len(pos))
    bar_gain = rng.choice([0.25, 0.5, 0.8, 1.0], size=n_bars)
    note_len = int(period)
    tt = np.arange(note_len) / sample_rate
    tone_env = np.exp(-tt * (3.0 + 4.0 * rng.random()))
    for i, p in enumerate(pos):
        bar = i // 4
        g = bar_gain[bar]
        accent = 1.0 if i % 4 == 0 else 0.7
        click = _click(rng, sample_rate)
        seg = click[: n - p]
        out[p : p + seg.size] += 0.6 * g * accent * seg
        f = root * 2 ** (degrees[i] / 12.0) * (2 if i % 2 else 1)
        note = 0.25 * g * tone_env * np.sin(2 * np.pi * f * tt)
        seg = note[: n - p]
        out[p : p + seg.size] += seg
    return np.clip(out, -1.0, 1.0), pos


def random_tempo(rng: np.random.Generator) -> float:
    return float(rng.uniform(80.0, 150.0))


def generate_corpus(out_dir, n_tracks: int, seed: int = 0, duration: float = 30.0) -> list:
    """Write ``n_tracks`` tone tracks with seeded random tempi as 16-bit WAVs."""
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    rng = np.random.default_rng(seed)
    paths = []
    for i in range(n_tracks):
        tempo = random_tempo(rng)
        samples, _ = tone_track(tempo, duration, seed=int(rng.integers(2**31)))
        path = out_dir / f"track_{i:02d}.wav"
        write_wav(path, samples, SAMPLE_RATE)
        paths.append(path)
    return paths
