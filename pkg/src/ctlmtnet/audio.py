"""WAV ingestion and 39-coefficient MFCC extraction.

Pipeline: pre-emphasis, framing (50 ms window, 12.5 ms hop, no centring),
Hann window, FFT power spectrum, Slaney-style mel filterbank, log with a floor,
orthonormal DCT-II, first 39 coefficients.
"""

from __future__ import annotations

import csv
import os
from dataclasses import dataclass, replace

import numpy as np
import scipy.fft
import scipy.io.wavfile

FRAME_LENGTH_S = 0.05
FRAME_SHIFT_S = 0.0125
N_MFCC = 39
N_MELS = 128
PRE_EMPHASIS = 0.97
LOG_FLOOR = 1e-10
MIN_SAMPLE_RATE = 8000


class IngestionError(ValueError):
    """A WAV file could not be turned into samples."""


class FrontendError(ValueError):
    """Audio is unsuitable for feature extraction."""


@dataclass(frozen=True)
class AudioClip:
    samples: np.ndarray
    sample_rate: int

    def __post_init__(self):
        if self.sample_rate <= 0:
            raise FrontendError(f"sample rate must be positive, got {self.sample_rate}")
        if not np.all(np.isfinite(self.samples)):
            raise FrontendError("audio samples contain NaN or Inf")

    @property
    def duration(self) -> float:
        return len(self.samples) / self.sample_rate


@dataclass(frozen=True)
class MfccConfig:
    n_mels: int = N_MELS
    n_fft: int | None = None  # next power of two >= frame length
    n_mfcc: int = N_MFCC
    layout: str = "static39"  # or "delta13": 13 static + delta + delta-delta
    pre_emphasis: float = PRE_EMPHASIS
    log_floor: float = LOG_FLOOR
    frame_length_s: float = FRAME_LENGTH_S
    frame_shift_s: float = FRAME_SHIFT_S
    normalize: bool = False  # per-utterance mean/variance over frames


@dataclass(frozen=True)
class MfccFeatures:
    matrix: np.ndarray  # (frames, 39)
    sample_rate: int
    frame_length_s: float = FRAME_LENGTH_S
    frame_shift_s: float = FRAME_SHIFT_S

    @property
    def frames(self) -> int:
        return self.matrix.shape[0]


def load_wav(path: str | os.PathLike) -> AudioClip:
    """Read 16-bit PCM or 32-bit float WAV; stereo is averaged to mono."""
    try:
        rate, data = scipy.io.wavfile.read(path)
    except FileNotFoundError:
        raise
    except Exception as exc:  # scipy signals every malformed file as ValueError/struct errors
        raise IngestionError(f"{path}: unreadable WAV ({exc})") from exc
    if data.dtype == np.int16:
        samples = data.astype(np.float64) / 32768.0
    elif data.dtype == np.float32:
        samples = data.astype(np.float64)
    else:
        raise IngestionError(f"{path}: unsupported sample format {data.dtype} (need int16 PCM or float32)")
    if samples.ndim == 2:
        samples = samples.mean(axis=1)
    if samples.size == 0:
        raise IngestionError(f"{path}: zero-length audio")
    return AudioClip(samples=samples, sample_rate=int(rate))


def write_wav(path: str | os.PathLike, clip: AudioClip, fmt: str = "int16") -> None:
    if fmt == "int16":
        data = np.clip(np.round(clip.samples * 32768.0), -32768, 32767).astype(np.int16)
    elif fmt == "float32":
        data = clip.samples.astype(np.float32)
    else:
        raise ValueError(f"unknown WAV format {fmt!r}")
    scipy.io.wavfile.write(path, clip.sample_rate, data)


def frame_geometry(sample_rate: int, config: MfccConfig = MfccConfig()) -> tuple[int, int, int]:
    """(frame_length, hop, n_fft) in samples."""
    frame_len = int(round(config.frame_length_s * sample_rate))
    hop = int(round(config.frame_shift_s * sample_rate))
    n_fft = config.n_fft or 1 << (frame_len - 1).bit_length()
    return frame_len, hop, n_fft


def num_frames(num_samples: int, frame_len: int, hop: int) -> int:
    return (num_samples - frame_len) // hop + 1


def hz_to_mel(hz):
    """Slaney scale: linear below 1 kHz, logarithmic above."""
    hz = np.asarray(hz, dtype=np.float64)
    f_sp = 200.0 / 3
    min_log_hz = 1000.0
    min_log_mel = min_log_hz / f_sp
    logstep = np.log(6.4) / 27.0
    return np.where(
        hz >= min_log_hz,
        min_log_mel + np.log(np.maximum(hz, min_log_hz) / min_log_hz) / logstep,
        hz / f_sp,
    )


def mel_to_hz(mel):
    mel = np.asarray(mel, dtype=np.float64)
    f_sp = 200.0 / 3
    min_log_hz = 1000.0
    min_log_mel = min_log_hz / f_sp
    logstep = np.log(6.4) / 27.0
    return np.where(mel >= min_log_mel, min_log_hz * np.exp(logstep * (mel - min_log_mel)), f_sp * mel)


def mel_filterbank(sample_rate: int, n_fft: int, n_mels: int = N_MELS) -> np.ndarray:
    """Triangular, area-normalised filters of shape ``(n_mels, n_fft // 2 + 1)``."""
    fft_freqs = np.linspace(0.0, sample_rate / 2.0, n_fft // 2 + 1)
    edges = mel_to_hz(np.linspace(hz_to_mel(0.0), hz_to_mel(sample_rate / 2.0), n_mels + 2))
    widths = np.diff(edges)
    ramps = edges[:, None] - fft_freqs[None, :]
    lower = -ramps[:-2] / widths[:-1, None]
    upper = ramps[2:] / widths[1:, None]
    weights = np.maximum(0.0, np.minimum(lower, upper))
    weights *= (2.0 / (edges[2:] - edges[:-2]))[:, None]
    return weights


def mel_centers(sample_rate: int, n_mels: int = N_MELS) -> np.ndarray:
    edges = mel_to_hz(np.linspace(hz_to_mel(0.0), hz_to_mel(sample_rate / 2.0), n_mels + 2))
    return edges[1:-1]


def frame_signal(clip: AudioClip, config: MfccConfig = MfccConfig()) -> np.ndarray:
    """Pre-emphasised, Hann-windowed frames of shape ``(frames, frame_length)``."""
    if clip.sample_rate < MIN_SAMPLE_RATE:
        raise FrontendError(f"sample rate {clip.sample_rate} Hz is below {MIN_SAMPLE_RATE} Hz")
    frame_len, hop, _ = frame_geometry(clip.sample_rate, config)
    x = np.asarray(clip.samples, dtype=np.float64)
    if x.size < frame_len:
        raise FrontendError(f"clip has {x.size} samples, shorter than one {frame_len}-sample frame")
    emphasized = np.append(x[:1], x[1:] - config.pre_emphasis * x[:-1])
    n = num_frames(x.size, frame_len, hop)
    frames = np.lib.stride_tricks.sliding_window_view(emphasized, frame_len)[::hop][:n]
    # periodic Hann, as used by the reference toolbox
    window = 0.5 - 0.5 * np.cos(2.0 * np.pi * np.arange(frame_len) / frame_len)
    return frames * window


def mel_energies(clip: AudioClip, config: MfccConfig = MfccConfig()) -> np.ndarray:
    """Mel filterbank energies ``(frames, n_mels)`` from the power spectrum."""
    frames = frame_signal(clip, config)
    _, _, n_fft = frame_geometry(clip.sample_rate, config)
    power = np.abs(np.fft.rfft(frames, n=n_fft, axis=1)) ** 2
    return power @ mel_filterbank(clip.sample_rate, n_fft, config.n_mels).T


def _deltas(feat: np.ndarray, width: int = 9) -> np.ndarray:
    """Savitzky-Golay style first derivative along frames with edge padding."""
    half = width // 2
    padded = np.pad(feat, ((half, half), (0, 0)), mode="edge")
    taps = np.arange(-half, half + 1, dtype=np.float64)
    taps /= (taps**2).sum()
    return np.stack(
        [padded[i : i + feat.shape[0]] for i in range(width)], axis=0
    ).transpose(1, 2, 0) @ taps


def compute_mfcc(clip: AudioClip, config: MfccConfig = MfccConfig()) -> MfccFeatures:
    logmel = np.log(np.maximum(mel_energies(clip, config), config.log_floor))
    if config.layout == "static39":
        mfcc = scipy.fft.dct(logmel, type=2, norm="ortho", axis=1)[:, : config.n_mfcc]
    elif config.layout == "delta13":
        static = scipy.fft.dct(logmel, type=2, norm="ortho", axis=1)[:, :13]
        d1 = _deltas(static)
        mfcc = np.concatenate([static, d1, _deltas(d1)], axis=1)
    else:
        raise FrontendError(f"unknown MFCC layout {config.layout!r}")
    if config.normalize:
        std = mfcc.std(axis=0)
        mfcc = (mfcc - mfcc.mean(axis=0)) / np.where(std > 0, std, 1.0)
    return MfccFeatures(
        matrix=mfcc,
        sample_rate=clip.sample_rate,
        frame_length_s=config.frame_length_s,
        frame_shift_s=config.frame_shift_s,
    )


def pad_or_truncate(features: MfccFeatures, target_frames: int) -> MfccFeatures:
    if target_frames < 1:
        raise ValueError(f"target_frames must be >= 1, got {target_frames}")
    m = features.matrix
    if m.shape[0] >= target_frames:
        out = m[:target_frames].copy()
    else:
        out = np.zeros((target_frames, m.shape[1]))
        out[: m.shape[0]] = m
    return replace(features, matrix=out)


def write_mfcc_csv(path: str | os.PathLike, features: MfccFeatures) -> None:
    """One row per frame, 17 significant digits so values round-trip exactly."""
    np.savetxt(path, features.matrix, fmt="%.17g", delimiter=",")


def read_mfcc_csv(path: str | os.PathLike, sample_rate: int = 16000) -> MfccFeatures:
    matrix = np.loadtxt(path, delimiter=",", ndmin=2, dtype=np.float64)
    return MfccFeatures(matrix=matrix, sample_rate=sample_rate)


def extract_directory(wav_dir: str | os.PathLike, out_dir: str | os.PathLike, config: MfccConfig = MfccConfig()):
    """Write ``<stem>.csv`` per WAV plus ``manifest.csv`` (path, frames, sample_rate)."""
    os.makedirs(out_dir, exist_ok=True)
    rows = []
    for name in sorted(os.listdir(wav_dir)):
        if not name.lower().endswith(".wav"):
            continue
        path = os.path.join(wav_dir, name)
        feats = compute_mfcc(load_wav(path), config)
        write_mfcc_csv(os.path.join(out_dir, os.path.splitext(name)[0] + ".csv"), feats)
        rows.append((path, feats.frames, feats.sample_rate))
    with open(os.path.join(out_dir, "manifest.csv"), "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["path", "frames", "sample_rate"])
        writer.writerows(rows)
    return rows
