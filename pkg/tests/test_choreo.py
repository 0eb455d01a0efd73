import json

import numpy as np
import pytest

from rhythmotion.audio import PcmSignal, extract_music_features
from rhythmotion.choreo import (
    PEAK_SPEED,
    DatasetConfig,
    DatasetError,
    ReferenceChoreography,
    build_dataset,
    reference_flows,
    render_reference,
    sample_frames,
    synth_choreography,
)
from rhythmotion.env import Trajectory
from rhythmotion.metrics import evaluate_trajectory
from rhythmotion.synth import SAMPLE_RATE, generate_corpus


@pytest.fixture(scope="module")
def silence():
    return extract_music_features(PcmSignal(np.zeros(SAMPLE_RATE * 5), SAMPLE_RATE))


def test_silence_is_nearly_still(silence):
    ch = synth_choreography(silence, seed=1)
    assert np.all(ch.speed < 0.05 * PEAK_SPEED)
    frames = render_reference(ch)
    assert frames.shape[0] == len(ch) == silence.n_frames
    assert np.abs(np.diff(frames, axis=0)).mean(axis=(1, 2)).max() < 1e-3


def test_speed_nonnegative_and_deterministic(tone_music):
    a, b = synth_choreography(tone_music, 4), synth_choreography(tone_music, 4)
    np.testing.assert_array_equal(a.pose, b.pose)
    assert a.speed.min() >= 0
    assert not np.array_equal(a.pose, synth_choreography(tone_music, 5).pose)


def test_direction_changes_at_every_beat(tone_music):
    ch = synth_choreography(tone_music, 0)
    v = ch.velocity
    for b in tone_music.beats:
        if b < 2 or b + 3 >= len(ch):
            continue
        assert ch.speed[b - 1 : b + 2].min() <= 1e-12
        before, after = v[b - 1], v[b + 2]
        if min(np.linalg.norm(before), np.linalg.norm(after)) < 1e-9:
            continue  # silent on one side: nothing to turn
        cos = before @ after / (np.linalg.norm(before) * np.linalg.norm(after))
        assert cos < 1 - 1e-6


def test_choreography_is_beat_synchronous(tone_music):
    rep = evaluate_trajectory(synth_choreography(tone_music, 0).to_trajectory(), tone_music)
    assert rep.beat_align >= 0.8


def test_trajectory_roundtrip(tmp_path, tone_music):
    ch = synth_choreography(tone_music, 2)
    ch.to_trajectory().save(tmp_path / "c.traj")
    back = ReferenceChoreography.from_trajectory(Trajectory.load(tmp_path / "c.traj"))
    np.testing.assert_allclose(back.pose, ch.pose, rtol=1e-6, atol=1e-6)
    np.testing.assert_array_equal(back.changes, ch.changes)


def test_render_is_deterministic(tone_music):
    pose = synth_choreography(tone_music, 0).pose[100:103]
    np.testing.assert_array_equal(render_reference(pose), render_reference(pose))


def test_sample_frames_count():
    for t, w, s in ((600, 30, 4), (61, 30, 1), (62, 30, 1), (1000, 20, 7)):
        f = sample_frames(t, w, s)
        assert f.size == (t - 2 * w - 1) // s
        if f.size:
            assert f[0] == w and f[-1] + w < t


def test_dataset_structure(small_dataset):
    ds = small_dataset
    m = ds.manifest
    train, val = set(m["splits"]["train"]), set(m["splits"]["val"])
    assert not train & val and len(train) == 3 and len(val) == 1
    w, stride = m["config"]["half_width"], m["config"]["stride"]
    total = sum(len(t["frames"]) for t in m["tracks"])
    assert total == sum((t["n_frames"] - 2 * w - 1) // stride for t in m["tracks"])
    td = ds.split("train")[0]
    k = len(td.frames) // 2
    expect = reference_flows(td.choreo, td.frames[k : k + 1])[0]
    np.testing.assert_allclose(td.flows[k], expect, atol=1e-5)
    assert td.music.window(int(td.frames[k]), w).shape[0] == 2 * w + 1


def test_dataset_build_is_reproducible_and_reports_failures(tmp_path):
    paths = generate_corpus(tmp_path / "audio", 2, seed=9, duration=5.0)
    bad = tmp_path / "audio" / "broken.wav"
    bad.write_bytes(b"RIFF....")
    cfg = DatasetConfig(stride=16)
    m1 = build_dataset(paths + [bad], tmp_path / "a", cfg)
    m2 = build_dataset(paths + [bad], tmp_path / "b", cfg)
    assert (tmp_path / "a" / "manifest.json").read_bytes() == (tmp_path / "b" / "manifest.json").read_bytes()
    for name in ("track_00.rfl", "track_00.mft", "track_01.traj"):
        assert (tmp_path / "a" / name).read_bytes() == (tmp_path / "b" / name).read_bytes()
    assert m1 == m2 and len(m1["failures"]) == 1
    assert json.loads((tmp_path / "a" / "manifest.json").read_text())["schema_version"] == 1
    with pytest.raises(DatasetError):
        build_dataset(paths[:1] + [bad], tmp_path / "c", cfg)
