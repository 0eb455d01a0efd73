"""Audio decoding and the 35-column per-frame music feature track at 60 FPS."""

from __future__ import annotations

import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import scipy.fft

from .containers import FormatError, read_container, write_container

FPS = 60
N_FFT = 1024
N_MELS = 40
N_MFCC = 20
N_CHROMA = 12
FEATURE_DIM = 35

# column layout of the feature matrix; frozen in the .mft header
COLUMNS = {
    "envelope": (0, 1),
    "mfcc": (1, 21),
    "chroma": (21, 33),
    "peaks": (33, 34),
    "beats": (34, 35),
}
SCHEMA_TAG = "env1|mfcc20|chroma12|peak1|beat1"

MIN_TEMPO = 60.0
MAX_TEMPO = 180.0


class AudioError(ValueError):
    pass


class WavFormatError(AudioError):
    """Unsupported codec or sample layout."""


class WavParseError(AudioError):
    """Malformed or truncated RIFF/WAVE data."""


@dataclass(frozen=True)
class PcmSignal:
    samples: np.ndarray
    sample_rate: int
    channels: int = 1

    def __post_init__(self):
        s = np.asarray(self.samples, dtype=np.float64)
        if s.ndim != 1 or s.size == 0:
            raise AudioError("signal must be a non-empty mono array")
        if not np.isfinite(s).all():
            raise AudioError("signal contains non-finite samples")
        if self.sample_rate < 8000:
            raise AudioError(f"sample rate {self.sample_rate} below 8000 Hz")
        object.__setattr__(self, "samples", np.clip(s, -1.0, 1.0))

    @property
    def duration(self) -> float:
        return self.samples.size / self.sample_rate

    @property
    def n_frames(self) -> int:
        return self.samples.size * FPS // self.sample_rate


# --------------------------------------------------------------------------
# WAV I/O

_PCM = 1
_FLOAT = 3
_EXTENSIBLE = 0xFFFE


def decode_wav(path: str | Path) -> PcmSignal:
    """Read a PCM WAV file (8/16/24-bit int or 32-bit float) as a mono signal.

    Stereo input is downmixed by averaging the two channels.
    """
    raw = Path(path).read_bytes()
    if len(raw) < 12 or raw[:4] != b"RIFF" or raw[8:12] != b"WAVE":
        raise WavParseError(f"{path}: not a RIFF/WAVE file")
    pos = 12
    fmt = None
    data = None
    while pos + 8 <= len(raw):
        cid = raw[pos : pos + 4]
        (size,) = struct.unpack("<I", raw[pos + 4 : pos + 8])
        body = raw[pos + 8 : pos + 8 + size]
        if len(body) < size:
            raise WavParseError(f"{path}: truncated {cid!r} chunk")
        if cid == b"fmt ":
            fmt = body
        elif cid == b"data":
            data = body
            break
        pos += 8 + size + (size & 1)
    if fmt is None or len(fmt) < 16:
        raise WavParseError(f"{path}: missing fmt chunk")
    if data is None:
        raise WavParseError(f"{path}: missing data chunk")
    tag, channels, rate, _, block_align, bits = struct.unpack("<HHIIHH", fmt[:16])
    if tag == _EXTENSIBLE and len(fmt) >= 26:
        (tag,) = struct.unpack("<H", fmt[24:26])
    if channels not in (1, 2):
        raise WavFormatError(f"{path}: {channels} channels unsupported")
    width = bits // 8
    if tag == _PCM and bits in (8, 16, 24):
        pass
    elif tag == _FLOAT and bits == 32:
        pass
    else:
        raise WavFormatError(f"{path}: codec tag {tag} with {bits} bits unsupported")
    if block_align != width * channels:
        raise WavParseError(f"{path}: inconsistent block alignment")
    n = len(data) // block_align
    if n == 0:
        raise WavParseError(f"{path}: empty data chunk")
    data = data[: n * block_align]
    if tag == _FLOAT:
        x = np.frombuffer(data, dtype="<f4").astype(np.float64)
    elif bits == 8:
        x = (np.frombuffer(data, dtype=np.uint8).astype(np.float64) - 128.0) / 128.0
    elif bits == 16:
        x = np.frombuffer(data, dtype="<i2").astype(np.float64) / 32768.0
    else:
        b = np.frombuffer(data, dtype=np.uint8).reshape(-1, 3).astype(np.int32)
        v = b[:, 0] | (b[:, 1] << 8) | (b[:, 2] << 16)
        v = np.where(v >= 1 << 23, v - (1 << 24), v)
        x = v.astype(np.float64) / float(1 << 23)
    x = x.reshape(n, channels).mean(axis=1)
    if not np.isfinite(x).all():
        raise WavParseError(f"{path}: non-finite float samples")
    return PcmSignal(np.clip(x, -1.0, 1.0), int(rate))


def write_wav(path: str | Path, samples: np.ndarray, sample_rate: int) -> None:
    """Write mono 16-bit PCM."""
    x = np.clip(np.asarray(samples, dtype=np.float64), -1.0, 1.0)
    pcm = np.round(x * 32767.0).astype("<i2").tobytes()
    fmt = struct.pack("<HHIIHH", _PCM, 1, sample_rate, sample_rate * 2, 2, 16)
    with open(path, "wb") as fh:
        fh.write(b"RIFF" + struct.pack("<I", 4 + 8 + len(fmt) + 8 + len(pcm)) + b"WAVE")
        fh.write(b"fmt " + struct.pack("<I", len(fmt)) + fmt)
        fh.write(b"data" + struct.pack("<I", len(pcm)) + pcm)


# --------------------------------------------------------------------------
# spectral front end


def frame_centers(n_samples: int, sample_rate: int) -> np.ndarray:
    """Sample-accurate frame centres: frame k sits at round(k * sr / 60)."""
    t = n_samples * FPS // sample_rate
    k = np.arange(t, dtype=np.int64)
    return (2 * k * sample_rate + FPS) // (2 * FPS)


def stft_magnitude(signal: PcmSignal) -> np.ndarray:
    """|STFT| with a 1024-point periodic Hann window, one column per 60 FPS frame."""
    x = signal.samples
    if x.size < N_FFT:
        raise AudioError(f"signal of {x.size} samples is shorter than one {N_FFT}-sample window")
    centers = frame_centers(x.size, signal.sample_rate)
    padded = np.concatenate([np.zeros(N_FFT // 2), x, np.zeros(N_FFT // 2)])
    idx = centers[:, None] + np.arange(N_FFT)[None, :]
    window = 0.5 - 0.5 * np.cos(2 * np.pi * np.arange(N_FFT) / N_FFT)
    return np.abs(np.fft.rfft(padded[idx] * window, axis=1))


def onset_envelope(signal: PcmSignal, normalize: bool = True) -> np.ndarray:
    """Half-wave rectified spectral flux of the log-magnitude STFT.

    The first frame is differenced against silence. With ``normalize`` the
    result is divided by its maximum when that maximum is positive.
    """
    logmag = np.log1p(100.0 * stft_magnitude(signal))
    prev = np.vstack([np.zeros((1, logmag.shape[1])), logmag[:-1]])
    flux = np.maximum(logmag - prev, 0.0).sum(axis=1)
    if normalize:
        peak = flux.max(initial=0.0)
        if peak > 0:
            flux = flux / peak
    return flux


def _hz_to_mel(f):
    return 2595.0 * np.log10(1.0 + np.asarray(f) / 700.0)


def _mel_to_hz(m):
    return 700.0 * (10.0 ** (np.asarray(m) / 2595.0) - 1.0)


def mel_filterbank(sample_rate: int, n_mels: int = N_MELS, n_fft: int = N_FFT) -> np.ndarray:
    """Triangular HTK-mel filters, shape (n_mels, n_fft // 2 + 1)."""
    freqs = np.fft.rfftfreq(n_fft, 1.0 / sample_rate)
    edges = _mel_to_hz(np.linspace(0.0, _hz_to_mel(sample_rate / 2.0), n_mels + 2))
    fb = np.zeros((n_mels, freqs.size))
    for i in range(n_mels):
        lo, mid, hi = edges[i : i + 3]
        up = (freqs - lo) / (mid - lo)
        down = (hi - freqs) / (hi - mid)
        fb[i] = np.maximum(0.0, np.minimum(up, down))
    return fb


def mfcc(signal: PcmSignal, normalize: bool = True) -> np.ndarray:
    """T x 20 MFCC matrix: 40-band log-mel, orthonormal DCT-II, coefficients 0-19.

    Each coefficient is z-normalized over the track when ``normalize`` is set;
    coefficients with zero variance become zero.
    """
    power = stft_magnitude(signal) ** 2
    mel = power @ mel_filterbank(signal.sample_rate).T
    logmel = np.log(mel + 1e-10)
    coeffs = scipy.fft.dct(logmel, type=2, norm="ortho", axis=1)[:, :N_MFCC]
    if normalize:
        mu = coeffs.mean(axis=0)
        sd = coeffs.std(axis=0)
        safe = sd > 1e-8 * np.maximum(1.0, np.abs(mu))
        coeffs = np.where(safe, (coeffs - mu) / np.where(safe, sd, 1.0), 0.0)
    return coeffs


def chroma(signal: PcmSignal, fmin: float = 55.0, fmax: float = 5000.0) -> np.ndarray:
    """T x 12 pitch-class energies (C=0 ... B=11), each row L2-normalized when nonzero."""
    power = stft_magnitude(signal) ** 2
    freqs = np.fft.rfftfreq(N_FFT, 1.0 / signal.sample_rate)
    keep = (freqs >= fmin) & (freqs <= min(fmax, signal.sample_rate / 2.0))
    midi = 69.0 + 12.0 * np.log2(freqs[keep] / 440.0)
    pc = np.mod(np.round(midi).astype(int), 12)
    fold = np.zeros((keep.sum(), N_CHROMA))
    fold[np.arange(pc.size), pc] = 1.0
    out = power[:, keep] @ fold
    norms = np.linalg.norm(out, axis=1, keepdims=True)
    floor = 1e-10 * N_FFT
    return np.where(norms > floor, out / np.maximum(norms, floor), 0.0)


# --------------------------------------------------------------------------
# rhythm


@dataclass(frozen=True)
class BeatEstimate:
    frames: np.ndarray
    tempo_bpm: float
    tempo_ok: bool


def _autocorr(x: np.ndarray, max_lag: int) -> np.ndarray:
    n = x.size
    spec = np.fft.rfft(x, 2 * n)
    ac = np.fft.irfft(spec * np.conj(spec))[: max_lag + 1]
    overlap = n - np.arange(max_lag + 1)
    return ac / np.maximum(overlap, 1)


def estimate_tempo(envelope: np.ndarray, frame_rate: int = FPS) -> float | None:
    """Tempo in BPM from the envelope autocorrelation over 60-180 BPM.

    A weak log-tempo prior centred on 120 BPM breaks ties between metrical
    levels; if half the chosen lag is almost as periodic, the faster level wins
    (a pulse train is periodic at every multiple of its period).
    """
    x = np.asarray(envelope, dtype=np.float64)
    if not np.any(x - x.mean()):
        return None
    # mild smoothing so periods between integer lags still correlate
    g = np.exp(-0.5 * (np.arange(-4, 5) / 1.5) ** 2)
    x = np.convolve(x, g / g.sum(), mode="same")
    x = x - x.mean()
    lo = int(np.floor(60.0 * frame_rate / MAX_TEMPO))
    hi = int(np.ceil(60.0 * frame_rate / MIN_TEMPO))
    ac = _autocorr(x, hi + 1)
    if ac[0] <= 0:
        return None
    lags = np.arange(lo, hi + 1)
    bpm = 60.0 * frame_rate / lags
    prior = np.exp(-0.5 * np.log2(bpm / 120.0) ** 2)
    score = np.maximum(ac[lags], 0.0) * prior
    if score.max() <= 0:
        return None
    best = int(lags[np.argmax(score)])
    half = best / 2.0
    if half >= lo:
        h = max({int(np.floor(half)), int(np.ceil(half))}, key=lambda k: ac[k])
        if ac[h] >= 0.8 * ac[best]:
            best = h
    # parabolic refinement of the peak lag
    lag = float(best)
    if 1 <= best < ac.size - 1:
        a, b, c = ac[best - 1], ac[best], ac[best + 1]
        denom = a - 2 * b + c
        if denom < 0:
            lag = best + 0.5 * (a - c) / denom
    return float(np.clip(60.0 * frame_rate / lag, MIN_TEMPO, MAX_TEMPO))


def _dp_beats(onset: np.ndarray, period: float, tightness: float = 100.0) -> np.ndarray:
    n = onset.size
    sd = onset.std()
    if sd <= 0:
        return np.zeros(0, dtype=np.int64)
    # smooth with a Gaussian of width period/32, as local evidence for a beat
    half = int(np.ceil(period))
    g = np.exp(-0.5 * (np.arange(-half, half + 1) * 32.0 / period) ** 2)
    local = np.convolve(onset / sd, g, mode="same")
    lo = int(np.round(period / 2.0))
    hi = int(np.round(2.0 * period))
    offsets = np.arange(lo, hi + 1)
    penalty = -tightness * np.log(offsets / period) ** 2
    cum = np.zeros(n)
    back = np.full(n, -1, dtype=np.int64)
    first_beat = True
    for i in range(n):
        prev = i - offsets
        ok = prev >= 0
        if ok.any():
            cand = cum[prev[ok]] + penalty[ok]
            j = int(np.argmax(cand))
            best = cand[j]
            if first_beat and local[i] < 0.01 * local.max():
                cum[i] = local[i]
            else:
                cum[i] = local[i] + best
                back[i] = prev[ok][j]
                first_beat = False
        else:
            cum[i] = local[i]
    # last beat: final local maximum of the cumulative score that is reasonably strong
    interior = np.flatnonzero((cum[1:-1] > cum[:-2]) & (cum[1:-1] >= cum[2:])) + 1
    if interior.size == 0:
        last = int(np.argmax(cum))
    else:
        strong = interior[cum[interior] >= 0.5 * np.median(cum[interior])]
        last = int(strong[-1]) if strong.size else int(interior[-1])
    beats = [last]
    while back[beats[-1]] >= 0:
        beats.append(int(back[beats[-1]]))
    beats = np.array(beats[::-1], dtype=np.int64)
    # snap each beat to the nearest raw-envelope maximum within two frames
    snapped = []
    for b in beats:
        a, z = max(0, b - 2), min(n, b + 3)
        snapped.append(a + int(np.argmax(onset[a:z])))
    beats = np.array(snapped, dtype=np.int64)
    # trim leading/trailing beats with no onset support
    thresh = 0.5 * np.sqrt(np.mean(local[beats] ** 2)) if beats.size else 0.0
    keep = np.flatnonzero(local[beats] >= thresh)
    if keep.size:
        beats = beats[keep[0] : keep[-1] + 1]
    return np.unique(beats)


def detect_beats(envelope: np.ndarray, frame_rate: int = FPS) -> BeatEstimate:
    """Beat frames and tempo for an onset envelope.

    Tempo is searched over 60-180 BPM; beats come from dynamic programming
    against that tempo. The reported tempo is refined by a least-squares fit
    of beat index against beat frame. An all-zero envelope gives no beats and
    ``tempo_ok=False``.
    """
    env = np.asarray(envelope, dtype=np.float64)
    if env.size < 4 * frame_rate:
        raise AudioError("beat tracking needs at least 4 s of envelope")
    tempo = estimate_tempo(env, frame_rate)
    if tempo is None:
        return BeatEstimate(np.zeros(0, dtype=np.int64), 120.0, False)
    beats = _dp_beats(env, 60.0 * frame_rate / tempo)
    if beats.size >= 4:
        slope = np.polyfit(np.arange(beats.size), beats.astype(float), 1)[0]
        fitted = 60.0 * frame_rate / slope if slope > 0 else tempo
        # the fit can only move within the metrical level that the ACF picked
        if abs(np.log2(fitted / tempo)) < 0.25:
            tempo = float(fitted)
    return BeatEstimate(beats, float(tempo), True)


def detect_peaks(envelope: np.ndarray, k: float = 1.0, min_gap: int = 6) -> np.ndarray:
    """Strict local maxima above mean + k*std, at least ``min_gap`` frames apart.

    Conflicts are resolved greedily in favour of the higher peak.
    """
    x = np.asarray(envelope, dtype=np.float64)
    if x.size < 3:
        return np.zeros(0, dtype=np.int64)
    thresh = x.mean() + k * x.std()
    cand = np.flatnonzero((x[1:-1] > x[:-2]) & (x[1:-1] > x[2:])) + 1
    cand = cand[x[cand] > thresh]
    order = cand[np.lexsort((cand, -x[cand]))]
    chosen: list[int] = []
    for c in order:
        if all(abs(int(c) - p) >= min_gap for p in chosen):
            chosen.append(int(c))
    return np.array(sorted(chosen), dtype=np.int64)


# --------------------------------------------------------------------------
# the 35-column track


@dataclass
class MusicFeatureTrack:
    features: np.ndarray
    beats: np.ndarray
    peaks: np.ndarray
    tempo_bpm: float
    tempo_ok: bool = True
    frame_rate: int = FPS
    meta: dict = field(default_factory=dict)

    def __post_init__(self):
        self.features = np.asarray(self.features, dtype=np.float64)
        self.beats = np.asarray(self.beats, dtype=np.int64)
        self.peaks = np.asarray(self.peaks, dtype=np.int64)
        if self.features.ndim != 2 or self.features.shape[1] != FEATURE_DIM:
            raise AudioError(f"feature matrix must be T x {FEATURE_DIM}")
        for name, arr in (("beats", self.beats), ("peaks", self.peaks)):
            if arr.size and (np.any(np.diff(arr) <= 0) or arr[0] < 0 or arr[-1] >= self.n_frames):
                raise AudioError(f"{name} must be strictly increasing frame indices")

    @property
    def n_frames(self) -> int:
        return self.features.shape[0]

    def column(self, name: str) -> np.ndarray:
        a, b = COLUMNS[name]
        return self.features[:, a:b]

    @property
    def envelope(self) -> np.ndarray:
        return self.features[:, 0]

    def window(self, t: int, half_width: int) -> np.ndarray:
        """Rows t-w .. t+w inclusive."""
        if t - half_width < 0 or t + half_width >= self.n_frames:
            raise IndexError(f"window around frame {t} (w={half_width}) leaves the track")
        return self.features[t - half_width : t + half_width + 1]

    def save(self, path: str | Path) -> None:
        header = {
            "T": self.n_frames,
            "frame_rate": self.frame_rate,
            "columns": SCHEMA_TAG,
            "column_ranges": COLUMNS,
            "tempo_bpm": self.tempo_bpm,
            "tempo_ok": self.tempo_ok,
            "beats": self.beats.tolist(),
            "peaks": self.peaks.tolist(),
            "meta": self.meta,
        }
        write_container(path, b"MFT1", header, self.features)

    @classmethod
    def load(cls, path: str | Path) -> "MusicFeatureTrack":
        header, payload = read_container(path, b"MFT1")
        if header.get("columns") != SCHEMA_TAG:
            raise FormatError(f"{path}: unknown column schema {header.get('columns')!r}")
        t = int(header["T"])
        if payload.size != t * FEATURE_DIM:
            raise FormatError(f"{path}: payload size does not match T={t}")
        return cls(
            payload.reshape(t, FEATURE_DIM).astype(np.float64),
            np.array(header["beats"], dtype=np.int64),
            np.array(header["peaks"], dtype=np.int64),
            float(header["tempo_bpm"]),
            bool(header["tempo_ok"]),
            int(header["frame_rate"]),
            header.get("meta", {}),
        )


def one_hot(frames: np.ndarray, n: int) -> np.ndarray:
    out = np.zeros(n)
    out[np.asarray(frames, dtype=np.int64)] = 1.0
    return out


def extract_music_features(signal: PcmSignal) -> MusicFeatureTrack:
    """Envelope | MFCC | chroma | peak one-hot | beat one-hot, one row per 60 FPS frame."""
    if signal.duration < 4.0:
        raise AudioError("feature extraction needs at least 4 s of audio")
    env = onset_envelope(signal)
    coeffs = mfcc(signal)
    chrom = chroma(signal)
    t = env.size
    est = detect_beats(env)
    peaks = detect_peaks(env)
    feats = np.column_stack([env, coeffs, chrom, one_hot(peaks, t), one_hot(est.frames, t)])
    return MusicFeatureTrack(feats, est.frames, peaks, est.tempo_bpm, est.tempo_ok)
