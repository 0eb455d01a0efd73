import numpy as np
import pytest
from flowcases import interior_error, translated_square
from hypothesis import given, settings
from hypothesis import strategies as st

from rhythmotion.containers import FormatError
from rhythmotion.flow import (
    FlowError,
    crop_resize,
    crop_window,
    estimate_flow,
    flow_l1_distance,
    read_flows,
    resize_flow,
    write_flows,
)


def test_identical_frames_give_zero_flow(rng):
    img = rng.random((48, 48))
    assert np.abs(estimate_flow(img, img)).max() < 1e-6


@pytest.mark.parametrize("d", [(3, 0), (0, -2)])
def test_translated_square(d):
    prev, nxt, mask = translated_square(d)
    eu, ev = interior_error(estimate_flow(prev, nxt), mask, d)
    assert eu <= 0.5 and ev <= 0.5


def test_batched_matches_single(rng):
    a, b = rng.random((2, 3, 32, 32))
    batch = estimate_flow(a, b)
    assert batch.shape == (3, 2, 32, 32)
    np.testing.assert_allclose(batch[1], estimate_flow(a[1], b[1]), atol=1e-10)


def test_shape_mismatch():
    with pytest.raises(FlowError):
        estimate_flow(np.zeros((8, 8)), np.zeros((8, 9)))


def test_half_crop_doubled_scales_vectors():
    flow = np.ones((2, 48, 48))
    patch = crop_window(flow, (12, 12), 24, 48)
    np.testing.assert_allclose(patch.data, 2.0, atol=1e-5)


def test_identity_crop_unchanged(rng):
    flow = rng.normal(size=(2, 32, 32))
    np.testing.assert_allclose(crop_window(flow, (0, 0), 32, 32).data, flow, atol=1e-12)


def test_crop_resize_seeded():
    flow = np.random.default_rng(1).normal(size=(2, 64, 64))
    a = crop_resize(flow, np.random.default_rng(5))
    b = crop_resize(flow, np.random.default_rng(5))
    np.testing.assert_array_equal(a.data, b.data)
    assert a.origin == b.origin
    assert 0.7 * 64 - 1 <= a.crop[0] <= 64


@settings(max_examples=30, deadline=None)
@given(st.integers(20, 64), st.integers(8, 64), st.floats(-3, 3), st.floats(-3, 3))
def test_resample_constant_field_scales_exactly(n, out, u, v):
    flow = np.stack([np.full((n, n), u), np.full((n, n), v)])
    res = resize_flow(flow, out)
    np.testing.assert_allclose(res[0], u * out / n, atol=1e-5)
    np.testing.assert_allclose(res[1], v * out / n, atol=1e-5)


def test_crop_outside_field():
    with pytest.raises(FlowError):
        crop_window(np.zeros((2, 10, 10)), (5, 5), 8, 8)


def test_l1_examples(rng):
    a = np.zeros((2, 8, 8))
    a[0] = 1.0
    assert flow_l1_distance(a, np.zeros_like(a)) == 0.5
    b = rng.normal(size=a.shape)
    assert flow_l1_distance(b, b) == 0.0
    assert flow_l1_distance(a, b) == flow_l1_distance(b, a)


@settings(max_examples=30, deadline=None)
@given(st.integers(0, 10**6))
def test_l1_is_pseudometric(seed):
    r = np.random.default_rng(seed)
    a, b, c = r.normal(size=(3, 2, 6, 6))
    assert flow_l1_distance(a, b) >= 0
    assert flow_l1_distance(a, c) <= flow_l1_distance(a, b) + flow_l1_distance(b, c) + 1e-12


def test_rfl_roundtrip(tmp_path, rng):
    flows = rng.normal(size=(3, 2, 5, 7))
    write_flows(tmp_path / "f.rfl", flows)
    raw = (tmp_path / "f.rfl").read_bytes()
    assert raw[:4] == b"RFL1"
    np.testing.assert_allclose(read_flows(tmp_path / "f.rfl"), flows.astype(np.float32))
    (tmp_path / "bad.rfl").write_bytes(raw[:-4])
    with pytest.raises(FormatError):
        read_flows(tmp_path / "bad.rfl")
