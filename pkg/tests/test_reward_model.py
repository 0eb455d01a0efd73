import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from rhythmotion.nn import MLP, ParamStore, grad_check
from rhythmotion.reward_model import (
    RewardModel,
    RewardModelConfig,
    RewardModelError,
    TrainRewardConfig,
    compose_batches,
    context_window,
    cosine,
    full_view,
    info_nce,
    info_nce_grad,
    make_pairs,
    retrieval_accuracy,
    reward,
    stretch_windows,
    train_reward_model,
)
from rhythmotion.nn.checkpoint import read_checkpoint

SMALL = RewardModelConfig(dim=16, half_width=30, patch=32, channels=(8, 8, 16), seed=0)


@pytest.fixture(scope="module")
def model():
    return RewardModel(SMALL)


def test_music_encoder_determinism_and_shape(model, tone_music):
    w = tone_music.window(100, 30)
    h1, h2 = model.encode_music(w), model.encode_music(w.copy())
    np.testing.assert_array_equal(h1, h2)
    assert h1.shape == (16,)


def test_music_encoder_output_dim_independent_of_window():
    m = RewardModel(RewardModelConfig(dim=16, half_width=10, patch=32, channels=(8,)))
    assert m.encode_music(np.zeros((21, 35))).shape == (16,)


def test_permuting_context_rows_changes_embedding(model, tone_music):
    w = tone_music.window(100, 30).copy()
    perm = w.copy()
    perm[[0, 60]] = perm[[60, 0]]
    perm[[5, 40]] = perm[[40, 5]]
    assert np.linalg.norm(model.encode_music(w) - model.encode_music(perm)) > 0


def test_flow_encoder_contract(model, rng):
    h0 = model.encode_flow(np.zeros((2, 32, 32)))
    assert np.isfinite(h0).all() and h0.shape == (16,)
    p = rng.normal(size=(2, 32, 32))
    np.testing.assert_array_equal(model.encode_flow(p), model.encode_flow(p.copy()))
    with pytest.raises(RewardModelError):
        model.encode_flow(np.zeros((2, 20, 20)))


def test_projection_head_identity_construction():
    store = ParamStore()
    head = MLP(store, "h", 4, 8, 4, np.random.default_rng(0))
    # fc1 = [I; -I] splits x into relu-like halves, fc2 recombines: gelu(a) - gelu(-a) = a
    store["h.fc1.W"][...] = np.hstack([np.eye(4), -np.eye(4)])
    store["h.fc1.b"][...] = 0
    store["h.fc2.W"][...] = np.vstack([np.eye(4), -np.eye(4)])
    store["h.fc2.b"][...] = 0
    x = np.random.default_rng(1).normal(size=(3, 4))
    np.testing.assert_allclose(head.forward(x)[0], x, atol=1e-12)


def test_projection_head_gradient(rng):
    store = ParamStore()
    head = MLP(store, "h", 6, 6, 6, rng)
    x = rng.normal(size=(3, 6))
    R = rng.normal(size=(3, 6))

    def f(theta):
        store.set_flat(theta)
        store.zero_grad()
        y, c = head.forward(x)
        head.backward(R, c)
        return float((y * R).sum()), store.flat_grad()

    assert grad_check(f, store.flat()) <= 1e-4


def test_full_model_gradient_through_loss(tone_music, rng):
    m = RewardModel(RewardModelConfig(dim=8, half_width=3, patch=16, channels=(4, 4), seed=2))
    patches = rng.normal(size=(3, 2, 16, 16))
    windows = np.stack([tone_music.window(t, 3) for t in (50, 90, 130)])

    def f(theta):
        m.store.set_flat(theta)
        loss = m.loss_and_grads(patches, windows)
        return loss, m.store.flat_grad()

    assert grad_check(f, m.store.flat()) <= 1e-3


def test_info_nce_analytic_cases():
    z = np.eye(2)
    assert info_nce(z, z, 1.0) == pytest.approx(math.log(1 + math.exp(-1)), abs=1e-12)
    for b in (2, 8, 16):
        same = np.ones((b, 5))
        assert info_nce(same, same, 0.1) == pytest.approx(math.log(b), abs=1e-12)


@settings(max_examples=50, deadline=None)
@given(st.integers(0, 10**6), st.floats(0.01, 100.0))
def test_info_nce_nonnegative_and_scale_invariant(seed, c):
    r = np.random.default_rng(seed)
    a, b = r.normal(size=(2, 6, 5))
    base = info_nce(a, b, 0.1)
    assert base >= 0
    scaled = a.copy()
    scaled[2] *= c
    assert info_nce(scaled, b, 0.1) == pytest.approx(base, abs=1e-9)


def test_info_nce_gradient(rng):
    a, b = rng.normal(size=(2, 5, 4))

    def f(theta):
        loss, da, db = info_nce_grad(theta[:20].reshape(5, 4), theta[20:].reshape(5, 4), 0.3)
        return loss, np.concatenate([da.ravel(), db.ravel()])

    assert grad_check(f, np.concatenate([a.ravel(), b.ravel()])) <= 1e-5


def test_info_nce_errors():
    with pytest.raises(RewardModelError):
        info_nce(np.ones((1, 3)), np.ones((1, 3)), 0.1)
    with pytest.raises(RewardModelError):
        info_nce(np.ones((2, 3)), np.ones((2, 3)), 0.0)


def test_cosine_reward_cases(rng):
    z = rng.normal(size=8)
    assert reward(z, z) == pytest.approx(1.0)
    assert reward(z, -z) == pytest.approx(-1.0)
    assert reward(np.array([1.0, 0]), np.array([0, 2.0])) == 0.0
    assert reward(3.7 * z, z) == pytest.approx(1.0)
    assert cosine(np.zeros(3), np.ones(3)) == 0.0


def test_batches_respect_separation(small_dataset):
    pairs = make_pairs(small_dataset.split("train"), 30)
    for batch in compose_batches(pairs, 16, np.random.default_rng(0)):
        for i in batch:
            for j in batch:
                if i != j and pairs.track[i] == pairs.track[j]:
                    assert abs(pairs.frame[i] - pairs.frame[j]) >= 10


def test_loss_after_one_epoch_beats_chance(small_dataset):
    cfg = TrainRewardConfig(epochs=1, batch_size=16, eval_candidates=8, min_pairs=16)
    model, _ = train_reward_model(small_dataset.split("train"), small_dataset.split("val"), SMALL, cfg)
    pairs = make_pairs(small_dataset.split("train"), 30)
    flows = full_view(pairs.flows, SMALL.patch)
    batches = [b for b in compose_batches(pairs, 16, np.random.default_rng(1)) if b.size == 16]
    loss = np.mean([model.batch_loss(flows[b], pairs.windows[b]) for b in batches])
    assert loss < math.log(16)


def test_short_training_logs_and_roundtrips(tmp_path, small_dataset):
    cfg = TrainRewardConfig(epochs=2, batch_size=16, eval_candidates=8, min_pairs=16)
    model, log = train_reward_model(small_dataset.split("train"), small_dataset.split("val"), SMALL, cfg)
    assert len(log.rows) == 2
    assert log.best_epoch == 1 + int(np.argmin([r["val_loss"] for r in log.rows]))
    log.write_csv(tmp_path / "log.csv")
    assert (tmp_path / "log.csv").read_text().splitlines()[0] == "epoch,loss,val_loss,top1_retrieval"
    model.save(tmp_path / "rm.nnck")
    header, _ = read_checkpoint(tmp_path / "rm.nnck")
    section = header["reward_model"]
    assert section["tau"] == SMALL.tau and section["half_width"] == 30 and "flow_std" in section
    back = RewardModel.load(tmp_path / "rm.nnck")
    assert back.digest() == RewardModel.load(tmp_path / "rm.nnck").digest()
    val = make_pairs(small_dataset.split("val"), 30)
    a = retrieval_accuracy(model, val, 8)
    b = retrieval_accuracy(back, val, 8)
    assert a[0] == b[0] and a[1] == pytest.approx(b[1], abs=1e-4)


def test_training_is_deterministic(small_dataset):
    cfg = TrainRewardConfig(epochs=1, batch_size=16, eval_candidates=8, min_pairs=16)
    a, _ = train_reward_model(small_dataset.split("train"), small_dataset.split("val"), SMALL, cfg)
    b, _ = train_reward_model(small_dataset.split("train"), small_dataset.split("val"), SMALL, cfg)
    assert a.digest() == b.digest()


def test_inference_does_not_mutate_parameters(model, tone_music):
    before = model.digest()
    model.music_embeddings(tone_music)
    model.flow_embedding(np.ones((3, 2, 64, 64)))
    assert model.digest() == before


def test_context_window_matches_window_inside_track(tone_music):
    np.testing.assert_array_equal(context_window(tone_music, 100, 30), tone_music.window(100, 30))


def test_context_window_repeats_edges_without_events(tone_music):
    from rhythmotion.audio import COLUMNS

    win = context_window(tone_music, 2, 10)
    assert win.shape == (21, 35)
    np.testing.assert_array_equal(win[:8, 1:21], np.repeat(tone_music.features[:1, 1:21], 8, axis=0))
    assert not win[:8, COLUMNS["beats"][0]].any() and not win[:8, COLUMNS["peaks"][0]].any()


def test_stretch_factor_one_is_identity(tone_music, rng):
    ctx = np.stack([context_window(tone_music, t, 40) for t in (100, 200)])
    out = stretch_windows(ctx, 30, rng, 1.0, 1.0)
    np.testing.assert_allclose(out, ctx[:, 10:71])


def test_stretch_moves_events_and_interpolates(rng):
    from rhythmotion.audio import COLUMNS

    w, c = 10, 20
    ctx = np.zeros((1, 2 * c + 1, 35))
    ctx[0, :, 0] = np.arange(2 * c + 1)  # a ramp in a continuous column
    ctx[0, c + 6, COLUMNS["beats"][0]] = 1.0
    out = stretch_windows(ctx, w, rng, 1.5, 1.5)
    np.testing.assert_allclose(out[0, :, 0], c + 1.5 * np.arange(-w, w + 1))
    assert np.flatnonzero(out[0, :, COLUMNS["beats"][0]]).tolist() == [w + 4]


def test_stretch_needs_enough_context(rng):
    with pytest.raises(RewardModelError):
        stretch_windows(np.zeros((1, 41, 35)), 20, rng, 0.8, 1.25)


def test_training_with_tempo_stretch(small_dataset):
    cfg = TrainRewardConfig(epochs=1, batch_size=16, tempo_stretch=(0.8, 1.25))
    model, tlog = train_reward_model(small_dataset.split("train"), small_dataset.split("val"), SMALL, cfg)
    assert len(tlog.rows) == 1 and np.isfinite(tlog.rows[0]["loss"])
