import struct

import numpy as np
import pytest

from rhythmotion.audio import PcmSignal, extract_music_features
from rhythmotion.choreo import DatasetConfig, build_dataset, load_dataset
from rhythmotion.synth import SAMPLE_RATE, generate_corpus, tone_track


def wav_bytes(frames: bytes, channels: int = 1, rate: int = 8000, bits: int = 16, tag: int = 1) -> bytes:
    """Hand-assembled RIFF/WAVE file around raw sample bytes."""
    align = channels * bits // 8
    fmt = struct.pack("<HHIIHH", tag, channels, rate, rate * align, align, bits)
    body = b"WAVE" + b"fmt " + struct.pack("<I", len(fmt)) + fmt + b"data" + struct.pack("<I", len(frames)) + frames
    return b"RIFF" + struct.pack("<I", len(body)) + body


@pytest.fixture(scope="session")
def tone_music():
    """Feature track of a 12 s synthetic song at 120 BPM."""
    samples, _ = tone_track(120.0, 12.0, seed=3)
    music = extract_music_features(PcmSignal(samples, SAMPLE_RATE))
    music.meta["track_id"] = "tone"
    return music


@pytest.fixture(scope="session")
def other_music():
    samples, _ = tone_track(97.0, 12.0, seed=8)
    music = extract_music_features(PcmSignal(samples, SAMPLE_RATE))
    music.meta["track_id"] = "other"
    return music


@pytest.fixture(scope="session")
def small_dataset(tmp_path_factory):
    """Four 8 s tracks, built once per session."""
    root = tmp_path_factory.mktemp("dataset")
    paths = generate_corpus(root / "audio", 4, seed=5, duration=8.0)
    build_dataset(paths, root / "data", DatasetConfig(half_width=30, stride=2, val_fraction=0.25, seed=0))
    return load_dataset(root / "data")


@pytest.fixture
def rng():
    return np.random.default_rng(0)


_VERDICTS: list[str] = []


@pytest.fixture
def verdict():
    """Record one PASS/FAIL line per acceptance criterion; they are printed together at the end."""

    def record(number: int, ok: bool, detail: str) -> bool:
        line = f"{'PASS' if ok else 'FAIL'} criterion {number}: {detail}"
        _VERDICTS.append(line)
        print(line)
        return ok

    return record


def pytest_terminal_summary(terminalreporter):
    if _VERDICTS:
        terminalreporter.section("acceptance criteria")
        for line in sorted(_VERDICTS, key=lambda s: int(s.split()[2].rstrip(":"))):
            terminalreporter.write_line(line)
