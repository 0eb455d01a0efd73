"""Contrastive reward model linking optical flow to music.

Flow patches go through a small strided conv encoder, music windows through a
per-frame embedding plus one attention block (the centre row is kept); two
GELU projection heads map both into a shared space where a symmetric InfoNCE
loss aligns matching pairs. The reward is the cosine similarity of the two
projections.
"""

from __future__ import annotations

import csv
import logging
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from .audio import COLUMNS, FEATURE_DIM, MusicFeatureTrack
from .flow import PATCH, FlowPatch, crop_resize, resize_flow
from .nn import MLP, AttentionBlock, Conv2d, Dense, Gelu, NonFiniteError, ParamStore, adam_step
from .nn import load_into, read_checkpoint, save_checkpoint

log = logging.getLogger(__name__)

MIN_SEPARATION = 10


class RewardModelError(ValueError):
    pass


@dataclass
class RewardModelConfig:
    dim: int = 64  # d_h = d_z
    half_width: int = 30  # w_a
    tau: float = 0.1
    patch: int = PATCH
    channels: tuple[int, ...] = (16, 32, 32, 64)
    seed: int = 0

    def __post_init__(self):
        self.channels = tuple(int(c) for c in self.channels)
        if self.tau <= 0:
            raise RewardModelError("temperature must be positive")
        if self.half_width < 1:
            raise RewardModelError("window half-width must be at least 1")
        if self.dim < 2:
            raise RewardModelError("embedding dim must be at least 2")
        size = self.patch
        for _ in self.channels:
            size = (size - 3) // 2 + 1
        if size < 1:
            raise RewardModelError(f"patch {self.patch} is too small for {len(self.channels)} conv stages")


def l2_normalize(z: np.ndarray, eps: float = 1e-12) -> tuple[np.ndarray, np.ndarray]:
    n = np.linalg.norm(z, axis=-1, keepdims=True)
    return z / np.maximum(n, eps), n


def info_nce_grad(z_o: np.ndarray, z_m: np.ndarray, tau: float) -> tuple[float, np.ndarray, np.ndarray]:
    """Symmetric InfoNCE on L2-normalised rows and its gradients w.r.t. z_o, z_m.

    loss = (mean_i CE(row i of S, i) + mean_j CE(column j of S, j)) / 2,
    S = cos(z_o, z_m) / tau.
    """
    z_o = np.asarray(z_o, dtype=np.float64)
    z_m = np.asarray(z_m, dtype=np.float64)
    if z_o.shape != z_m.shape or z_o.ndim != 2:
        raise RewardModelError(f"embedding batches differ: {z_o.shape} vs {z_m.shape}")
    b = z_o.shape[0]
    if b < 2:
        raise RewardModelError("InfoNCE needs a batch of at least 2")
    if tau <= 0:
        raise RewardModelError("temperature must be positive")
    u_o, n_o = l2_normalize(z_o)
    u_m, n_m = l2_normalize(z_m)
    s = u_o @ u_m.T / tau
    lr = s - s.max(axis=1, keepdims=True)
    lr = lr - np.log(np.exp(lr).sum(axis=1, keepdims=True))
    lc = s - s.max(axis=0, keepdims=True)
    lc = lc - np.log(np.exp(lc).sum(axis=0, keepdims=True))
    diag = np.arange(b)
    loss = -0.5 * (lr[diag, diag].mean() + lc[diag, diag].mean())
    eye = np.eye(b)
    ds = ((np.exp(lr) - eye) + (np.exp(lc) - eye)) / (2.0 * b)
    du_o = ds @ u_m / tau
    du_m = ds.T @ u_o / tau
    dz_o = (du_o - u_o * (u_o * du_o).sum(axis=1, keepdims=True)) / np.maximum(n_o, 1e-12)
    dz_m = (du_m - u_m * (u_m * du_m).sum(axis=1, keepdims=True)) / np.maximum(n_m, 1e-12)
    return float(loss), dz_o, dz_m


def info_nce(z_o: np.ndarray, z_m: np.ndarray, tau: float) -> float:
    return info_nce_grad(z_o, z_m, tau)[0]


def cosine(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    """Row-wise cosine similarity; 0 where either vector has norm below 1e-12."""
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if a.shape[-1] != b.shape[-1]:
        raise RewardModelError("embedding dims differ")
    na = np.linalg.norm(a, axis=-1)
    nb = np.linalg.norm(b, axis=-1)
    ok = (na >= 1e-12) & (nb >= 1e-12)
    dot = (a * b).sum(axis=-1)
    return np.where(ok, dot / np.where(ok, na * nb, 1.0), 0.0)


def reward(z_m: np.ndarray, z_o: np.ndarray) -> float | np.ndarray:
    r = cosine(z_m, z_o)
    return float(r) if r.ndim == 0 else r


@dataclass
class EmbeddingPair:
    h_m: np.ndarray
    h_o: np.ndarray
    z_m: np.ndarray
    z_o: np.ndarray


class RewardModel:
    """Encoders E_o / E_m and heads f_o / f_m over one :class:`ParamStore`."""

    def __init__(self, config: RewardModelConfig = RewardModelConfig()):
        self.config = config
        self.store = ParamStore()
        rng = np.random.default_rng(config.seed)
        d = config.dim
        c_in = 2
        self.convs = []
        for i, c in enumerate(config.channels):
            self.convs.append(Conv2d(self.store, f"flow.conv{i}", c_in, c, 3, 2, rng))
            c_in = c
        self.gelu = Gelu()
        self.flow_out = Dense(self.store, "flow.out", c_in, d, rng)
        self.music_in = Dense(self.store, "music.embed", FEATURE_DIM, d, rng)
        self.block = AttentionBlock(self.store, "music.block", d, rng)
        self.head_o = MLP(self.store, "head.flow", d, d, d, rng)
        self.head_m = MLP(self.store, "head.music", d, d, d, rng)
        self.flow_mean = np.zeros(2)
        self.flow_std = np.ones(2)

    # -- encoders --------------------------------------------------------------

    def _flow_forward(self, patches: np.ndarray):
        if patches.shape[-2:] != (self.config.patch, self.config.patch) or patches.shape[-3] != 2:
            raise RewardModelError(f"flow patch must be 2x{self.config.patch}x{self.config.patch}, got {patches.shape[-3:]}")
        x = (patches - self.flow_mean[:, None, None]) / self.flow_std[:, None, None]
        caches = []
        for conv in self.convs:
            y, cc = conv.forward(x)
            x, cg = self.gelu.forward(y)
            caches.append((cc, cg))
        pooled = x.mean(axis=(2, 3))
        h, cd = self.flow_out.forward(pooled)
        return h, (caches, x.shape, cd)

    def _flow_backward(self, dh, cache):
        caches, shape, cd = cache
        dp = self.flow_out.backward(dh, cd)
        dx = np.broadcast_to(dp[:, :, None, None] / (shape[2] * shape[3]), shape)
        for conv, (cc, cg) in zip(reversed(self.convs), reversed(caches)):
            dx = conv.backward(self.gelu.backward(dx, cg), cc)

    def _music_forward(self, windows: np.ndarray):
        n = 2 * self.config.half_width + 1
        if windows.shape[-2:] != (n, FEATURE_DIM):
            raise RewardModelError(f"music window must be {n}x{FEATURE_DIM}, got {windows.shape[-2:]}")
        e, ce = self.music_in.forward(windows)
        o, cb = self.block.forward(e)
        return o[:, self.config.half_width], (ce, cb, o.shape)

    def _music_backward(self, dh, cache):
        ce, cb, shape = cache
        do = np.zeros(shape)
        do[:, self.config.half_width] = dh
        self.music_in.backward(self.block.backward(do, cb), ce)

    def encode_flow(self, patches) -> np.ndarray:
        """h^o for a (2, p, p) patch / FlowPatch or a (N, 2, p, p) batch."""
        data = patches.data if isinstance(patches, FlowPatch) else np.asarray(patches, dtype=np.float64)
        single = data.ndim == 3
        h, _ = self._flow_forward(data[None] if single else data)
        return h[0] if single else h

    def encode_music(self, windows) -> np.ndarray:
        w = np.asarray(windows, dtype=np.float64)
        single = w.ndim == 2
        h, _ = self._music_forward(w[None] if single else w)
        return h[0] if single else h

    def project(self, h: np.ndarray, which: str) -> np.ndarray:
        head = {"flow": self.head_o, "music": self.head_m}.get(which)
        if head is None:
            raise RewardModelError(f"unknown projection {which!r}")
        h = np.asarray(h, dtype=np.float64)
        if h.shape[-1] != self.config.dim:
            raise RewardModelError(f"expected a {self.config.dim}-dim representation")
        return head.forward(h)[0]

    def embed(self, patches, windows) -> EmbeddingPair:
        h_o = self.encode_flow(patches)
        h_m = self.encode_music(windows)
        return EmbeddingPair(h_m, h_o, self.project(h_m, "music"), self.project(h_o, "flow"))

    def flow_embedding(self, flows: np.ndarray) -> np.ndarray:
        """z^o for full flow fields of any square size (resized to the patch)."""
        flows = np.asarray(flows, dtype=np.float64)
        if flows.shape[-1] != self.config.patch:
            flows = resize_flow(flows, self.config.patch)
        return self.project(self.encode_flow(flows), "flow")

    def music_embeddings(self, music: MusicFeatureTrack, chunk: int = 128) -> tuple[np.ndarray, np.ndarray]:
        """(h^m, z^m) for every frame with a full window; rows outside are NaN."""
        w = self.config.half_width
        t = music.n_frames
        h = np.full((t, self.config.dim), np.nan)
        z = np.full((t, self.config.dim), np.nan)
        centres = np.arange(w, t - w)
        view = np.lib.stride_tricks.sliding_window_view(music.features, (2 * w + 1, FEATURE_DIM))[:, 0]
        for i in range(0, centres.size, chunk):
            c = centres[i : i + chunk]
            hm = self.encode_music(view[c - w])
            h[c] = hm
            z[c] = self.project(hm, "music")
        return h, z

    # -- training step -----------------------------------------------------------

    def loss_and_grads(self, patches: np.ndarray, windows: np.ndarray) -> float:
        """InfoNCE on a batch; gradients are accumulated into the store."""
        self.store.zero_grad()
        h_o, c_o = self._flow_forward(patches)
        h_m, c_m = self._music_forward(windows)
        z_o, c_ho = self.head_o.forward(h_o)
        z_m, c_hm = self.head_m.forward(h_m)
        loss, dz_o, dz_m = info_nce_grad(z_o, z_m, self.config.tau)
        if not np.isfinite(loss):
            raise NonFiniteError(f"non-finite InfoNCE loss ({loss})")
        self._flow_backward(self.head_o.backward(dz_o, c_ho), c_o)
        self._music_backward(self.head_m.backward(dz_m, c_hm), c_m)
        return loss

    def batch_loss(self, patches: np.ndarray, windows: np.ndarray) -> float:
        z_o = self.project(self.encode_flow(patches), "flow")
        z_m = self.project(self.encode_music(windows), "music")
        return info_nce(z_o, z_m, self.config.tau)

    # -- persistence ----------------------------------------------------------------

    def digest(self) -> str:
        return self.store.digest()

    def save(self, path: str | Path, **extra) -> None:
        cfg = asdict(self.config)
        cfg["channels"] = list(cfg["channels"])
        save_checkpoint(
            path,
            self.store,
            kind="reward_model",
            reward_model={
                "config": cfg,
                "tau": self.config.tau,
                "half_width": self.config.half_width,
                "dim": self.config.dim,
                "flow_mean": self.flow_mean.tolist(),
                "flow_std": self.flow_std.tolist(),
            },
            **extra,
        )

    @classmethod
    def load(cls, path: str | Path) -> "RewardModel":
        header, tensors = read_checkpoint(path)
        if header.get("kind") != "reward_model":
            raise RewardModelError(f"{path}: not a reward-model checkpoint")
        section = header["reward_model"]
        model = cls(RewardModelConfig(**section["config"]))
        load_into(model.store, tensors)
        model.store.step = int(header.get("step", 0))
        model.flow_mean = np.array(section["flow_mean"], dtype=np.float64)
        model.flow_std = np.array(section["flow_std"], dtype=np.float64)
        return model


# -- training ------------------------------------------------------------------------


@dataclass
class TrainRewardConfig:
    epochs: int = 30
    batch_size: int = 32
    lr: float = 1e-3
    eval_candidates: int = 16
    shuffle_pairs: bool = False  # control: destroy the flow/music correspondence
    min_pairs: int = 64
    max_grad_norm: float = 5.0
    weight_decay: float = 0.0  # decoupled, applied to matrices and kernels only
    tempo_stretch: tuple[float, float] | None = None  # music-window time-stretch range, e.g. (0.8, 1.25)
    seed: int = 0


@dataclass
class PairSet:
    """Flows at sample frames with their music window centres and provenance."""

    flows: np.ndarray  # (N, 2, s, s)
    windows: np.ndarray  # (N, 2w+1, 35)
    track: np.ndarray  # (N,) track index
    frame: np.ndarray  # (N,) window centre
    context: np.ndarray | None = None  # (N, 2W+1, 35) wider windows for tempo stretching

    def __len__(self) -> int:
        return self.flows.shape[0]

    def permuted_music(self, perm: np.ndarray) -> "PairSet":
        ctx = None if self.context is None else self.context[perm]
        return PairSet(self.flows, self.windows[perm], self.track, self.frame, ctx)


_EVENT_COLUMNS = [COLUMNS["peaks"][0], COLUMNS["beats"][0]]


def context_window(music: MusicFeatureTrack, t: int, half_width: int) -> np.ndarray:
    """Rows t-W .. t+W with edge rows repeated past the track ends (no events there)."""
    idx = np.arange(t - half_width, t + half_width + 1)
    out = music.features[np.clip(idx, 0, music.n_frames - 1)].copy()
    outside = (idx < 0) | (idx >= music.n_frames)
    out[np.ix_(outside, _EVENT_COLUMNS)] = 0.0
    return out


def make_pairs(tracks, half_width: int, context: int = 0) -> PairSet:
    """Pairs for every sample frame; ``context`` > half_width also keeps wider windows."""
    flows, windows, ctx, tix, frames = [], [], [], [], []
    for k, td in enumerate(tracks):
        for f, fl in zip(td.frames, td.flows):
            flows.append(fl)
            windows.append(td.music.window(int(f), half_width))
            if context > half_width:
                ctx.append(context_window(td.music, int(f), context))
            tix.append(k)
            frames.append(int(f))
    if not flows:
        raise RewardModelError("no training pairs")
    return PairSet(np.stack(flows), np.stack(windows), np.array(tix), np.array(frames),
                   np.stack(ctx) if ctx else None)


def stretch_windows(context: np.ndarray, half_width: int, rng: np.random.Generator, lo: float, hi: float) -> np.ndarray:
    """Time-stretch each context window about its centre by a log-uniform factor in
    [lo, hi] and cut the central 2w+1 rows. Continuous columns are linearly
    interpolated; peak/beat events move to the nearest stretched row."""
    n, width, _ = context.shape
    c = (width - 1) // 2
    if c < int(np.ceil(half_width * hi)):
        raise RewardModelError(f"context half-width {c} too small for stretch {hi} at w={half_width}")
    s = np.exp(rng.uniform(np.log(lo), np.log(hi), size=n))
    pos = c + s[:, None] * np.arange(-half_width, half_width + 1)[None, :]
    i0 = np.floor(pos).astype(np.int64)
    frac = (pos - i0)[..., None]
    i1 = np.minimum(i0 + 1, width - 1)
    rows = np.arange(n)[:, None]
    out = context[rows, i0] * (1.0 - frac) + context[rows, i1] * frac
    out[..., _EVENT_COLUMNS] = 0.0
    for col in _EVENT_COLUMNS:
        k, r = np.nonzero(context[..., col] > 0.5)
        tgt = np.rint((r - c) / s[k]).astype(np.int64) + half_width
        ok = (tgt >= 0) & (tgt <= 2 * half_width)
        out[k[ok], tgt[ok], col] = 1.0
    return out


def compose_batches(pairs: PairSet, batch_size: int, rng: np.random.Generator, min_sep: int = MIN_SEPARATION):
    """Shuffled batches in which no two pairs share a track within ``min_sep`` frames.

    Samples that do not fit are carried into later batches; a trailing batch
    smaller than 2 is dropped.
    """
    pending = list(rng.permutation(len(pairs)))
    batches = []
    while pending:
        batch, rest = [], []
        for i in pending:
            if len(batch) < batch_size and all(
                pairs.track[i] != pairs.track[j] or abs(pairs.frame[i] - pairs.frame[j]) >= min_sep for j in batch
            ):
                batch.append(i)
            else:
                rest.append(i)
        if len(batch) < 2:
            break
        batches.append(np.array(batch))
        pending = rest
    return batches


def full_view(flows: np.ndarray, patch: int) -> np.ndarray:
    """Deterministic evaluation view: the whole field resized to the patch."""
    return resize_flow(flows, patch) if flows.shape[-1] != patch else flows


def augment(flows: np.ndarray, rng: np.random.Generator, patch: int) -> np.ndarray:
    return np.stack([crop_resize(f, rng, patch).data for f in flows])


def retrieval_accuracy(model: RewardModel, pairs: PairSet, candidates: int, seed: int = 0) -> tuple[float, float]:
    """Top-1 flow-to-music retrieval among groups of ``candidates`` pairs and the
    mean InfoNCE over those groups."""
    rng = np.random.default_rng(seed)
    groups = [g for g in compose_batches(pairs, candidates, rng) if g.size == candidates]
    if not groups:
        raise RewardModelError(f"validation split has fewer than {candidates} separable pairs")
    z_o = model.flow_embedding(full_view(pairs.flows, model.config.patch))
    z_m = model.project(model.encode_music(pairs.windows), "music")
    hits, losses = [], []
    for g in groups:
        sim = l2_normalize(z_o[g])[0] @ l2_normalize(z_m[g])[0].T
        hits.append(np.argmax(sim, axis=1) == np.arange(g.size))
        losses.append(info_nce(z_o[g], z_m[g], model.config.tau))
    return float(np.mean(np.concatenate(hits))), float(np.mean(losses))


@dataclass
class TrainLog:
    rows: list[dict] = field(default_factory=list)
    best_epoch: int = -1

    def write_csv(self, path: str | Path) -> None:
        with open(path, "w", newline="") as fh:
            w = csv.DictWriter(fh, fieldnames=["epoch", "loss", "val_loss", "top1_retrieval"], lineterminator="\n")
            w.writeheader()
            for r in self.rows:
                w.writerow({k: (f"{v:.6f}" if isinstance(v, float) else v) for k, v in r.items()})


def flow_statistics(flows: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    mean = flows.mean(axis=(0, 2, 3))
    std = flows.std(axis=(0, 2, 3))
    return mean, np.where(std > 1e-8, std, 1.0)


def train_reward_model(
    train_tracks,
    val_tracks,
    model_config: RewardModelConfig = RewardModelConfig(),
    config: TrainRewardConfig = TrainRewardConfig(),
) -> tuple[RewardModel, TrainLog]:
    """Mini-batch Adam on InfoNCE; returns the best-by-validation-loss model."""
    w = model_config.half_width
    stretch = config.tempo_stretch
    context = int(np.ceil(w * stretch[1])) if stretch else 0
    train = make_pairs(train_tracks, w, context)
    val = make_pairs(val_tracks, w)
    if len(train) < config.min_pairs:
        raise RewardModelError(f"{len(train)} training pairs, need at least {config.min_pairs}")
    rng = np.random.default_rng(config.seed)
    if config.shuffle_pairs:
        train = train.permuted_music(rng.permutation(len(train)))
    model = RewardModel(model_config)
    model.flow_mean, model.flow_std = flow_statistics(full_view(train.flows, model_config.patch))
    decayed = [n for n in model.store.names() if model.store[n].ndim >= 2]
    best, best_loss = None, np.inf
    tlog = TrainLog()
    for epoch in range(1, config.epochs + 1):
        losses = []
        for idx in compose_batches(train, config.batch_size, rng):
            patches = augment(train.flows[idx], rng, model_config.patch)
            windows = stretch_windows(train.context[idx], w, rng, *stretch) if stretch else train.windows[idx]
            loss = model.loss_and_grads(patches, windows)
            model.store.clip_grad_norm(config.max_grad_norm)
            adam_step(model.store, lr=config.lr)
            if config.weight_decay > 0:
                for name in decayed:
                    model.store.params[name] *= 1.0 - config.lr * config.weight_decay
            losses.append(loss)
        top1, val_loss = retrieval_accuracy(model, val, config.eval_candidates, config.seed)
        row = {"epoch": epoch, "loss": float(np.mean(losses)), "val_loss": val_loss, "top1_retrieval": top1}
        tlog.rows.append(row)
        log.info("epoch %d loss %.4f val_loss %.4f top1 %.3f", epoch, row["loss"], val_loss, top1)
        if val_loss < best_loss:
            best_loss, best, tlog.best_epoch = val_loss, model.store.flat().copy(), epoch
    model.store.set_flat(best)
    return model, tlog
