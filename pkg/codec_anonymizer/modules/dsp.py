# modules/dsp.py
"""
Audio IO and deterministic feature extraction: 16-bit PCM WAV files, the
80-bin log-mel spectrogram (torch, differentiable) and a YIN F0 tracker
(numpy), all framed at the codec frame rate (hop = product of encoder strides).
"""

import math
from dataclasses import dataclass, field
from functools import lru_cache
from pathlib import Path
from typing import Optional

import librosa
import numpy as np
import soundfile as sf
import torch
from numpy.lib.stride_tricks import sliding_window_view

from modules.errors import (
    ConfigInvalidError,
    EmptyContourError,
    IoFailureError,
    NotWavError,
    TruncatedFileError,
    UnsupportedEncodingError,
)
from utils.config_utils import F0Config, MelConfig
from utils.log_utils import get_logger

logger = get_logger(__name__)

PCM_SCALE = 32768.0


# -------------------------
# Domain types
# -------------------------
@dataclass
class AudioBuffer:
    """Mono PCM samples in [-1, 1] plus sample rate. `name` is the source stem, if any."""

    samples: np.ndarray
    sample_rate: int
    name: str = ""

    def __post_init__(self):
        self.samples = np.asarray(self.samples, dtype=np.float64).reshape(-1)
        if self.sample_rate <= 0:
            raise ValueError(f"sample_rate must be positive, got {self.sample_rate}")
        if self.samples.size < 1:
            raise ValueError("AudioBuffer needs at least one sample")
        if not np.all(np.isfinite(self.samples)):
            raise ValueError("AudioBuffer samples must be finite")

    def __len__(self) -> int:
        return int(self.samples.size)

    @property
    def duration_s(self) -> float:
        return len(self) / float(self.sample_rate)

    def slice(self, start: int, length: int) -> "AudioBuffer":
        return AudioBuffer(self.samples[start:start + length].copy(), self.sample_rate, self.name)


@dataclass
class MelSpectrogram:
    frames: np.ndarray  # (T, 80) log mel energies
    hop_length: int
    sample_rate: int

    @property
    def num_frames(self) -> int:
        return int(self.frames.shape[0])


@dataclass
class F0Contour:
    hz: np.ndarray  # (T,), 0 where unvoiced
    voiced: np.ndarray = field(default=None)  # (T,) bool

    def __post_init__(self):
        self.hz = np.asarray(self.hz, dtype=np.float64).reshape(-1)
        if self.voiced is None:
            self.voiced = self.hz > 0
        self.voiced = np.asarray(self.voiced, dtype=bool).reshape(-1)
        if self.voiced.shape != self.hz.shape:
            raise ValueError("F0Contour hz and voiced must have the same length")
        self.hz = np.where(self.voiced, self.hz, 0.0)

    def __len__(self) -> int:
        return int(self.hz.size)


def num_frames_for(num_samples: int, hop_length: int) -> int:
    """Codec / mel frame count under center-padded framing."""
    return int(math.ceil(num_samples / hop_length))


# -------------------------
# WAV IO
# -------------------------
def load_wav(path: str | Path) -> AudioBuffer:
    """Read a RIFF/WAVE 16-bit PCM mono file; samples scaled by 1/32768."""
    path = Path(path)
    try:
        with open(path, "rb") as f:
            header = f.read(12)
        file_size = path.stat().st_size
    except OSError as e:
        raise IoFailureError(f"Cannot read {path}: {e}") from e

    if len(header) < 12 or header[:4] != b"RIFF" or header[8:12] != b"WAVE":
        raise NotWavError(f"{path} is not a RIFF/WAVE file")
    declared = int.from_bytes(header[4:8], "little") + 8
    if file_size < declared:
        raise TruncatedFileError(f"{path} declares {declared} bytes but holds {file_size}")

    try:
        info = sf.info(str(path))
    except RuntimeError as e:
        raise TruncatedFileError(f"{path} could not be parsed: {e}") from e
    if info.channels != 1 or info.subtype != "PCM_16":
        raise UnsupportedEncodingError(
            f"{path}: need 16-bit PCM mono, got {info.channels} channel(s) {info.subtype}"
        )

    data, sr = sf.read(str(path), dtype="int16", always_2d=False)
    if data.size == 0:
        raise TruncatedFileError(f"{path} holds no samples")
    return AudioBuffer(data.astype(np.float64) / PCM_SCALE, int(sr), name=path.stem)


def to_pcm16(samples: np.ndarray) -> np.ndarray:
    clipped = np.clip(np.asarray(samples, dtype=np.float64), -1.0, 1.0)
    return np.clip(np.round(clipped * PCM_SCALE), -32768, 32767).astype(np.int16)


def save_wav(buf: AudioBuffer, path: str | Path) -> None:
    """Write 16-bit PCM mono; values outside [-1, 1] are clipped."""
    path = Path(path)
    try:
        path.parent.mkdir(parents=True, exist_ok=True)
        sf.write(str(path), to_pcm16(buf.samples), buf.sample_rate, subtype="PCM_16", format="WAV")
    except (OSError, RuntimeError) as e:
        raise IoFailureError(f"Cannot write {path}: {e}") from e


# -------------------------
# Mel spectrogram
# -------------------------
@lru_cache(maxsize=8)
def _mel_basis(sample_rate: int, n_fft: int, n_mels: int, f_min: float, f_max: float) -> np.ndarray:
    return librosa.filters.mel(sr=sample_rate, n_fft=n_fft, n_mels=n_mels, fmin=f_min, fmax=f_max)


def mel_filterbank(cfg: MelConfig) -> np.ndarray:
    """(n_mels, n_fft // 2 + 1) slaney-normalized triangular filters."""
    return _mel_basis(cfg.sample_rate, cfg.n_fft, cfg.n_mels, float(cfg.f_min), cfg.upper_hz)


def mel_center_frequencies(cfg: MelConfig) -> np.ndarray:
    return librosa.mel_frequencies(n_mels=cfg.n_mels + 2, fmin=cfg.f_min, fmax=cfg.upper_hz)[1:-1]


def log_mel(waves: torch.Tensor, cfg: MelConfig) -> torch.Tensor:
    """
    Differentiable log-mel of a batch of waveforms.

    waves: (B, L) or (L,). Returns (B, T, n_mels) with T = ceil(L / hop);
    frame t is centred on sample t * hop (reflect padding).
    """
    squeeze = waves.dim() == 1
    if squeeze:
        waves = waves.unsqueeze(0)
    length = waves.shape[-1]
    pad_mode = "reflect" if length > cfg.n_fft // 2 else "constant"
    window = torch.hann_window(cfg.win_length, periodic=True, dtype=waves.dtype, device=waves.device)
    spec = torch.stft(
        waves, n_fft=cfg.n_fft, hop_length=cfg.hop_length, win_length=cfg.win_length,
        window=window, center=True, pad_mode=pad_mode, return_complex=True,
    )
    power = spec.real ** 2 + spec.imag ** 2  # (B, F, frames)
    basis = torch.as_tensor(mel_filterbank(cfg), dtype=waves.dtype, device=waves.device)
    mel = torch.matmul(basis, power).transpose(1, 2)  # (B, frames, n_mels)
    mel = mel[:, : num_frames_for(length, cfg.hop_length)]
    out = torch.log(torch.clamp(mel, min=cfg.floor))
    return out[0] if squeeze else out


def mel_spectrogram(buf: AudioBuffer, cfg: MelConfig) -> MelSpectrogram:
    cfg.check()
    if buf.sample_rate != cfg.sample_rate:
        raise ConfigInvalidError(f"audio at {buf.sample_rate} Hz, mel config expects {cfg.sample_rate} Hz")
    with torch.no_grad():
        frames = log_mel(torch.as_tensor(buf.samples, dtype=torch.float64), cfg).numpy()
    return MelSpectrogram(frames=frames, hop_length=cfg.hop_length, sample_rate=cfg.sample_rate)


# -------------------------
# YIN F0
# -------------------------
def _difference_function(frames: np.ndarray, win_length: int, tau_max: int) -> np.ndarray:
    """d(tau) = sum_j (x_j - x_{j+tau})^2 over j < win_length, for every frame row."""
    span = frames.shape[1]
    size = 1 << int(math.ceil(math.log2(span + win_length)))
    head = frames[:, :win_length]
    corr = np.fft.irfft(
        np.conj(np.fft.rfft(head, size, axis=1)) * np.fft.rfft(frames, size, axis=1), size, axis=1
    )[:, : tau_max + 1]
    sq_cumsum = np.concatenate([np.zeros((frames.shape[0], 1)), np.cumsum(frames ** 2, axis=1)], axis=1)
    taus = np.arange(tau_max + 1)
    energy_shifted = sq_cumsum[:, taus + win_length] - sq_cumsum[:, taus]
    energy_head = sq_cumsum[:, win_length:win_length + 1]
    return np.maximum(energy_head + energy_shifted - 2.0 * corr, 0.0)


def _cmnd(diff: np.ndarray) -> np.ndarray:
    """Cumulative-mean normalized difference; 1 wherever the running mean is zero."""
    out = np.ones_like(diff)
    cums = np.cumsum(diff[:, 1:], axis=1)
    taus = np.arange(1, diff.shape[1])
    with np.errstate(divide="ignore", invalid="ignore"):
        ratio = diff[:, 1:] * taus / cums
    out[:, 1:] = np.where(cums > 0, ratio, 1.0)
    return out


def extract_f0(buf: AudioBuffer, frame_hop: int, f_min: float = 50.0, f_max: float = 550.0,
               threshold: float = 0.15, win_length: int = 512) -> F0Contour:
    """
    YIN pitch track with one estimate per `frame_hop` samples (frame t centred on t * hop).

    Per frame: difference function, cumulative-mean normalization, first dip
    under the absolute threshold followed to its local minimum, parabolic
    interpolation. Frames with no dip under the threshold are unvoiced.
    """
    sr = buf.sample_rate
    if frame_hop < 1 or not (0.0 < f_min < f_max < sr / 2.0):
        raise ConfigInvalidError(f"extract_f0 needs hop >= 1 and 0 < f_min < f_max < sr/2, "
                                 f"got hop={frame_hop} range=[{f_min}, {f_max}]")
    tau_min = max(2, int(math.floor(sr / f_max)))
    tau_max = int(math.ceil(sr / f_min))
    span = win_length + tau_max + 1
    num_frames = num_frames_for(len(buf), frame_hop)

    x = buf.samples
    left = span // 2
    padded = np.pad(x, (left, span), mode="constant")
    starts = np.arange(num_frames) * frame_hop
    frames = sliding_window_view(padded, span)[starts]

    diff = _difference_function(frames, win_length, tau_max)
    cmnd = _cmnd(diff)
    energy = np.sum(frames[:, :win_length] ** 2, axis=1)

    hz = np.zeros(num_frames)
    voiced = np.zeros(num_frames, dtype=bool)
    for t in range(num_frames):
        if energy[t] <= 1e-10:
            continue
        curve = cmnd[t]
        below = np.nonzero(curve[tau_min:tau_max] < threshold)[0]
        if below.size == 0:
            continue
        tau = tau_min + int(below[0])
        while tau + 1 < tau_max and curve[tau + 1] < curve[tau]:
            tau += 1
        shift = 0.0
        if 1 <= tau < tau_max:
            a, b, c = curve[tau - 1], curve[tau], curve[tau + 1]
            denom = a - 2.0 * b + c
            if denom > 0:
                shift = float(np.clip(0.5 * (a - c) / denom, -0.5, 0.5))
        hz[t] = float(np.clip(sr / (tau + shift), f_min, f_max))
        voiced[t] = True
    return F0Contour(hz=hz, voiced=voiced)


def extract_f0_with(buf: AudioBuffer, hop_length: int, cfg: F0Config) -> F0Contour:
    return extract_f0(buf, hop_length, cfg.f_min, cfg.f_max, cfg.threshold, cfg.win_length)


def align_f0_to_frames(f0: F0Contour, target_frames: int) -> F0Contour:
    """Nearest-neighbour resampling: output i reads input floor((i + 0.5) * T_in / T_out)."""
    t_in = len(f0)
    if t_in == 0:
        raise EmptyContourError("cannot align an empty F0 contour")
    if target_frames == t_in:
        return F0Contour(hz=f0.hz.copy(), voiced=f0.voiced.copy())
    idx = np.floor((np.arange(target_frames) + 0.5) * t_in / target_frames).astype(int)
    idx = np.clip(idx, 0, t_in - 1)
    return F0Contour(hz=f0.hz[idx], voiced=f0.voiced[idx])


def white_noise(num_samples: int, sample_rate: int, seed: int, amplitude: float = 0.3,
                name: Optional[str] = "noise") -> AudioBuffer:
    rng = np.random.default_rng(seed)
    return AudioBuffer(np.clip(rng.normal(0.0, amplitude, num_samples), -1.0, 1.0), sample_rate, name or "")
