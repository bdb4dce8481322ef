# modules/teacher_tokenizer.py
"""
Linguistic teacher: frame features -> k-means -> discrete tokens at the codec
frame rate. The feature stream is pluggable; the default is 13 MFCCs plus
deltas with per-utterance mean normalization.
"""

from pathlib import Path
from typing import Iterable, Optional, Protocol

import librosa
import numpy as np
import torch

from modules.dsp import AudioBuffer, log_mel, num_frames_for
from modules.errors import DataMissingError, DimensionMismatchError, TeacherUntrainedError
from modules.residual_vq import kmeans_fit, nearest_rows
from utils.config_utils import MelConfig
from utils.log_utils import get_logger

logger = get_logger(__name__)


class FrameFeatureExtractor(Protocol):
    def __call__(self, buf: AudioBuffer) -> np.ndarray:  # (T, F)
        ...


class MfccExtractor:
    """13 MFCCs + first deltas on the codec frame grid, mean-normalized per utterance."""

    def __init__(self, mel_cfg: MelConfig, n_mfcc: int = 13):
        self.mel_cfg = mel_cfg
        self.n_mfcc = n_mfcc

    def __call__(self, buf: AudioBuffer) -> np.ndarray:
        with torch.no_grad():
            logmel = log_mel(torch.as_tensor(buf.samples, dtype=torch.float64), self.mel_cfg).numpy()
        mfcc = librosa.feature.mfcc(S=logmel.T, n_mfcc=self.n_mfcc)
        deltas = librosa.feature.delta(mfcc, order=1, mode="nearest")
        feats = np.concatenate([mfcc, deltas], axis=0).T
        return feats - feats.mean(axis=0, keepdims=True)


class FeatureDumpExtractor:
    """Reads precomputed frame features `<root>/<buf.name>.npy` (e.g. SSL hidden-state dumps)."""

    def __init__(self, root: str | Path):
        self.root = Path(root)

    def __call__(self, buf: AudioBuffer) -> np.ndarray:
        path = self.root / f"{buf.name}.npy"
        if not buf.name or not path.exists():
            raise DataMissingError(f"no feature dump for utterance '{buf.name}' under {self.root}")
        feats = np.load(path)
        if feats.ndim != 2:
            raise DimensionMismatchError(f"{path}: expected (T, F) features, got {feats.shape}")
        return feats.astype(np.float64)


def _align_rows(feats: np.ndarray, target_frames: int) -> np.ndarray:
    t_in = feats.shape[0]
    if t_in == target_frames:
        return feats
    idx = np.clip(np.floor((np.arange(target_frames) + 0.5) * t_in / target_frames).astype(int), 0, t_in - 1)
    return feats[idx]


class TeacherTokenizer:
    def __init__(self, feature_extractor: FrameFeatureExtractor, vocab_size: int, hop_length: int,
                 centroids: Optional[np.ndarray] = None):
        self.feature_extractor = feature_extractor
        self.vocab_size = vocab_size
        self.hop_length = hop_length
        self.centroids = None if centroids is None else np.asarray(centroids, dtype=np.float64)

    @property
    def is_trained(self) -> bool:
        return self.centroids is not None

    def features(self, buf: AudioBuffer) -> np.ndarray:
        feats = self.feature_extractor(buf)
        return _align_rows(feats, num_frames_for(len(buf), self.hop_length))

    def fit(self, buffers: Iterable[AudioBuffer], seed: int) -> float:
        """Cluster the pooled frame features of `buffers`; returns the k-means inertia."""
        stacked = np.concatenate([self.features(b) for b in buffers], axis=0)
        self.centroids, inertia = kmeans_fit(stacked, self.vocab_size, seed)
        logger.info(f"✅ Teacher k-means: {stacked.shape[0]} frames -> {self.vocab_size} tokens "
                    f"(inertia {inertia:.2f})")
        return inertia

    def tokenize(self, buf: AudioBuffer) -> np.ndarray:
        if not self.is_trained:
            raise TeacherUntrainedError("teacher tokenizer has no k-means centroids; call fit() first")
        feats = self.features(buf)
        if feats.shape[1] != self.centroids.shape[1]:
            raise DimensionMismatchError(
                f"teacher features have {feats.shape[1]} dims, centroids {self.centroids.shape[1]}"
            )
        return nearest_rows(feats, self.centroids)


def tokenize_teacher(buf: AudioBuffer, teacher: TeacherTokenizer) -> np.ndarray:
    return teacher.tokenize(buf)
