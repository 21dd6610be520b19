"""Raw sensor windows to C x H x W embedding maps.

Image frames become 3x224x224, stereo audio a 2x224x224 log-mel map, and
the 9-channel IMU window (accel / gyro / angle on X, Y, Z at 200 Hz) a
1x224x224 map through a learned per-step embedding.
"""

from __future__ import annotations

import csv
import hashlib
import json
import wave as wavio
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .nn import Module, param, xavier
from .tensor import ConfigurationError, DimensionError, Tensor, as_tensor, linear, matmul, reshape

MAP_SIZE = 224
WAVE_RATE = 200
WAVE_CHANNELS = 9
CLASSES = ("strong", "weak", "none")
LOG_FLOOR = 1e-10
VAR_FLOOR = 1e-8


class AlignmentError(ValueError):
    """Modalities inside a window are further apart than the skew tolerance."""


@dataclass
class RawWindow:
    image: np.ndarray          # (3, 224, 224), values in [0, 1]
    audio: np.ndarray          # (2, sample_rate)
    sample_rate: int
    wave: np.ndarray           # (9, 200)
    label: int
    timestamp: float           # window start, ms
    skew_ms: float = 0.0


@dataclass
class EmbeddingMaps:
    image_map: Tensor
    audio_map: Tensor
    wave_map: Tensor

    def __post_init__(self):
        want = {"image_map": (3, MAP_SIZE, MAP_SIZE), "audio_map": (2, MAP_SIZE, MAP_SIZE),
                "wave_map": (1, MAP_SIZE, MAP_SIZE)}
        for name, shape in want.items():
            t = getattr(self, name)
            if t.shape != shape:
                raise DimensionError(f"{name} has shape {t.shape}, expected {shape}")
            if not np.isfinite(t.data).all():
                raise ValueError(f"{name} contains non-finite values")


# -- pooling --------------------------------------------------------------------------

def _pool_matrix(n_in: int, n_out: int) -> np.ndarray:
    """Row i averages input cells [floor(i*n/out), ceil((i+1)*n/out))."""
    P = np.zeros((n_out, n_in))
    for i in range(n_out):
        lo = (i * n_in) // n_out
        hi = -((-(i + 1) * n_in) // n_out)
        P[i, lo:hi] = 1.0 / (hi - lo)
    return P


def adaptive_avg_pool(x, out_h: int, out_w: int) -> Tensor:
    """Adaptive average pooling over the trailing two axes of (..., H, W).

    Works for both shrinking and growing; differentiable.
    """
    if out_h < 1 or out_w < 1:
        raise ConfigurationError(f"adaptive_avg_pool output must be >= 1x1, got {out_h}x{out_w}")
    x = as_tensor(x)
    if x.ndim < 2:
        raise DimensionError(f"adaptive_avg_pool needs at least 2 axes, got {x.shape}")
    h, w = x.shape[-2:]
    if (h, w) == (out_h, out_w):
        return x
    out = x
    if h != out_h:
        out = matmul(_pool_matrix(h, out_h), out)
    if w != out_w:
        out = matmul(out, _pool_matrix(w, out_w).T)
    return out


# -- audio ------------------------------------------------------------------------------

def hz_to_mel(f):
    return 2595.0 * np.log10(1.0 + np.asarray(f, dtype=np.float64) / 700.0)


def mel_to_hz(m):
    return 700.0 * (10.0 ** (np.asarray(m, dtype=np.float64) / 2595.0) - 1.0)


def mel_centers_hz(sample_rate: int, n_mels: int) -> np.ndarray:
    """Centre frequency of each triangular filter (HTK mel scale, 0 .. Nyquist)."""
    pts = mel_to_hz(np.linspace(0.0, hz_to_mel(sample_rate / 2.0), n_mels + 2))
    return pts[1:-1]


def mel_filterbank(sample_rate: int, n_fft: int, n_mels: int) -> np.ndarray:
    """(n_mels, n_fft // 2 + 1) triangular filters, linear in Hz between mel points."""
    pts = mel_to_hz(np.linspace(0.0, hz_to_mel(sample_rate / 2.0), n_mels + 2))
    freqs = np.arange(n_fft // 2 + 1) * sample_rate / n_fft
    fb = np.zeros((n_mels, freqs.size))
    for k in range(n_mels):
        lo, c, hi = pts[k], pts[k + 1], pts[k + 2]
        rise = (freqs - lo) / (c - lo)
        fall = (hi - freqs) / (hi - c)
        fb[k] = np.maximum(0.0, np.minimum(rise, fall))
    return fb


def stft_magnitude(x: np.ndarray, n_fft: int, hop: int) -> np.ndarray:
    """|STFT| with a periodic Hann window, no centre padding: (n_fft//2+1, frames)."""
    if x.size < n_fft:
        raise ConfigurationError(f"signal has {x.size} samples, fewer than n_fft={n_fft}")
    win = 0.5 - 0.5 * np.cos(2.0 * np.pi * np.arange(n_fft) / n_fft)
    frames = np.lib.stride_tricks.sliding_window_view(x, n_fft)[::hop]
    return np.abs(np.fft.rfft(frames * win, axis=1)).T


def log_mel(x: np.ndarray, sample_rate: int, n_fft: int = 1024, hop: int = 256, n_mels: int = 128) -> np.ndarray:
    """log(mel power + 1e-10), shape (n_mels, frames)."""
    if sample_rate <= 0:
        raise ConfigurationError(f"sample_rate must be positive, got {sample_rate}")
    power = stft_magnitude(np.asarray(x, dtype=np.float64), n_fft, hop) ** 2
    return np.log(mel_filterbank(sample_rate, n_fft, n_mels) @ power + LOG_FLOOR)


def audio_to_melspec(pcm, sample_rate: int, n_fft: int = 1024, hop: int = 256, n_mels: int = 128,
                     size: int = MAP_SIZE) -> Tensor:
    """Stereo PCM (2, S) to a (2, size, size) log-mel embedding map."""
    pcm = np.asarray(pcm, dtype=np.float64)
    if pcm.ndim != 2 or pcm.shape[0] != 2:
        raise DimensionError(f"audio must be (2, S), got {pcm.shape}")
    if pcm.shape[1] < n_fft:
        raise ConfigurationError(f"audio has {pcm.shape[1]} samples, fewer than n_fft={n_fft}")
    spec = np.stack([log_mel(ch, sample_rate, n_fft, hop, n_mels) for ch in pcm])
    return adaptive_avg_pool(Tensor(spec), size, size)


# -- water wave ---------------------------------------------------------------------------

class WaveEmbedding(Module):
    """Learned 9 -> width projection applied to every time step."""

    def __init__(self, rng: np.random.Generator, width: int = MAP_SIZE, channels: int = WAVE_CHANNELS):
        self.weight = xavier(rng, (channels, width), channels, width)
        self.bias = param(np.zeros(width))

    def forward(self, z):
        return linear(z, self.weight, self.bias)


def standardize_wave(wave) -> np.ndarray:
    wave = np.asarray(wave, dtype=np.float64)
    mu = wave.mean(axis=-1, keepdims=True)
    var = wave.var(axis=-1, keepdims=True)
    centered = wave - mu
    # mean rounding would otherwise leave ~1e-16 residue on flat channels
    centered[np.ptp(wave, axis=-1) == 0] = 0.0
    return centered / np.sqrt(np.maximum(var, VAR_FLOOR))


def wave_to_map(wave, embedding: WaveEmbedding, size: int = MAP_SIZE) -> Tensor:
    """(9, 200) IMU window -> (1, size, size) map.

    Standardise each channel, embed each of the 200 steps to a row, then
    pool the (200, width) latent map to size x size.
    """
    wave = np.asarray(wave, dtype=np.float64)
    if wave.shape != (WAVE_CHANNELS, WAVE_RATE):
        raise DimensionError(f"wave window must be ({WAVE_CHANNELS}, {WAVE_RATE}), got {wave.shape}")
    latent = embedding(Tensor(standardize_wave(wave).T))
    pooled = adaptive_avg_pool(latent, size, size)
    return reshape(pooled, (1, size, size))


def image_to_map(image, size: int = MAP_SIZE) -> Tensor:
    image = np.asarray(image, dtype=np.float64)
    if image.ndim != 3 or image.shape[0] != 3:
        raise DimensionError(f"image must be (3, H, W), got {image.shape}")
    return adaptive_avg_pool(Tensor(image), size, size)


def to_embedding_maps(win: RawWindow, embedding: WaveEmbedding, **mel_kwargs) -> EmbeddingMaps:
    return EmbeddingMaps(
        image_to_map(win.image),
        audio_to_melspec(win.audio, win.sample_rate, **mel_kwargs),
        wave_to_map(win.wave, embedding),
    )


# -- windowing ----------------------------------------------------------------------------

@dataclass
class Recording:
    """One synchronised trimodal recording sharing a ms clock starting at 0."""

    frames: list[tuple[float, np.ndarray]]     # (timestamp_ms, (3, H, W) in [0, 1])
    audio: np.ndarray                           # (2, S_total)
    sample_rate: int
    wave: np.ndarray                            # (9, T_total) at 200 Hz
    labels: dict[int, int] = field(default_factory=dict)   # window_start_ms -> class id

    @property
    def duration(self) -> float:
        return min(self.audio.shape[1] / self.sample_rate, self.wave.shape[1] / WAVE_RATE)


def window_count(duration: float, width: float = 1.0, overlap: float = 0.5) -> int:
    if duration + 1e-9 < width:
        return 0
    step = width * (1.0 - overlap)
    return int(np.floor((duration - width) / step + 1e-9)) + 1


def window_stream(rec: Recording, width_s: float = 1.0, overlap: float = 0.5,
                  max_skew_ms: float = 1.0) -> list[RawWindow]:
    """Cut a recording into windows starting at 0, step, 2*step, ...

    Returns an empty list when the recording is shorter than one window.
    """
    if not 0.0 <= overlap < 1.0:
        raise ConfigurationError(f"overlap must lie in [0, 1), got {overlap}")
    n = window_count(rec.duration, width_s, overlap)
    step = width_s * (1.0 - overlap)
    s_len = int(round(width_s * rec.sample_rate))
    w_len = int(round(width_s * WAVE_RATE))
    stamps = np.array([ts for ts, _ in rec.frames]) if rec.frames else np.array([])
    out = []
    for i in range(n):
        t = i * step
        t_ms = t * 1000.0
        a0 = int(round(t * rec.sample_rate))
        w0 = int(round(t * WAVE_RATE))
        skew = max(abs(a0 / rec.sample_rate - t), abs(w0 / WAVE_RATE - t)) * 1000.0
        if stamps.size == 0:
            raise AlignmentError("recording has no image frames")
        j = int(np.argmin(np.abs(stamps - t_ms)))
        skew = max(skew, abs(stamps[j] - t_ms))
        if skew > max_skew_ms:
            raise AlignmentError(f"window {i} at {t_ms:.0f} ms: modality skew {skew:.3f} ms > {max_skew_ms} ms")
        key = int(round(t_ms))
        if key not in rec.labels:
            raise KeyError(f"no label for window starting at {key} ms")
        out.append(RawWindow(
            image=rec.frames[j][1], audio=rec.audio[:, a0:a0 + s_len], sample_rate=rec.sample_rate,
            wave=rec.wave[:, w0:w0 + w_len], label=int(rec.labels[key]), timestamp=t_ms, skew_ms=skew,
        ))
    return out


# -- recording directory I/O ---------------------------------------------------------------
#
# <dir>/frames/<timestamp_ms>.png   RGB frames
# <dir>/audio.wav                   stereo PCM16
# <dir>/wave.csv                    timestamp_ms + 9 reading columns
# <dir>/labels.csv                  window_start_ms, label

def load_recording(path: str | Path) -> Recording:
    from PIL import Image

    path = Path(path)
    frames = []
    for png in sorted((path / "frames").glob("*.png"), key=lambda p: float(p.stem)):
        img = np.asarray(Image.open(png).convert("RGB"), dtype=np.float64) / 255.0
        frames.append((float(png.stem), img.transpose(2, 0, 1)))
    with wavio.open(str(path / "audio.wav"), "rb") as wf:
        if wf.getsampwidth() != 2:
            raise ValueError("audio.wav must be PCM16")
        ch, sr = wf.getnchannels(), wf.getframerate()
        raw = np.frombuffer(wf.readframes(wf.getnframes()), dtype="<i2").astype(np.float64) / 32768.0
    audio = raw.reshape(-1, ch).T
    if ch == 1:
        audio = np.vstack([audio, audio])
    rows = _read_csv(path / "wave.csv")
    wave = np.array([[float(v) for v in r[1:1 + WAVE_CHANNELS]] for r in rows]).T
    labels = {}
    for r in _read_csv(path / "labels.csv"):
        lab = r[1].strip()
        labels[int(float(r[0]))] = CLASSES.index(lab) if lab in CLASSES else int(lab)
    return Recording(frames, audio, sr, wave, labels)


def _read_csv(p: Path) -> list[list[str]]:
    with open(p, newline="") as fh:
        rows = [r for r in csv.reader(fh) if r]
    if rows and not _is_number(rows[0][0]):
        rows = rows[1:]
    return rows


def _is_number(s: str) -> bool:
    try:
        float(s)
        return True
    except ValueError:
        return False


def config_hash(cfg: dict) -> str:
    return hashlib.sha256(json.dumps(cfg, sort_keys=True, default=str).encode()).hexdigest()[:16]


def write_windows(windows: list[RawWindow], out_dir: str | Path, seed: int, cfg: dict) -> dict:
    """Emit one record per window (image, audio, wave, label, timestamp) plus manifest."""
    from .records import write_records

    recs = ((w.image, w.audio, w.wave, np.float64(w.label), np.float64(w.timestamp)) for w in windows)
    return write_records(out_dir, ("image", "audio", "wave", "label", "timestamp"), recs,
                         [w.label for w in windows], len(CLASSES),
                         {"seed": seed, "config_hash": config_hash(cfg), "kind": "raw_windows"})
