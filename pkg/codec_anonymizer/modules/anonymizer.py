# modules/anonymizer.py
"""
Speaker pool, pseudo-speaker generation and utterance anonymization.

The pseudo-speaker mixes the mean of M pool speakers with a random unit
vector:  normalize(alpha * s_bar + (1 - alpha) * s_hat).  Each utterance
draws from its own rng stream derived from (seed, utterance id).
"""

import hashlib
import struct
from dataclasses import dataclass
from pathlib import Path
from typing import List, Optional

import numpy as np
import torch
from tqdm import tqdm

from modules.codec import DisentangledCodec
from modules.corpus import Manifest, load_utterance
from modules.dsp import AudioBuffer
from modules.errors import (
    ConfigInvalidError,
    DimensionMismatchError,
    EmptyManifestError,
    IoFailureError,
    PoolFormatError,
    PoolTooSmallError,
)
from modules.residual_vq import QuantizationResult
from utils.config_utils import AnonConfig
from utils.log_utils import get_logger

logger = get_logger(__name__)

POOL_MAGIC = b"SPKP"
POOL_VERSION = 1
_POOL_HEADER = struct.Struct("<4sHII")  # magic, version, d, n


def _normalize(v: np.ndarray) -> np.ndarray:
    norm = np.linalg.norm(v)
    return v / norm if norm > 0 else v


# -------------------------
# Speaker pool
# -------------------------
@dataclass
class SpeakerPool:
    ids: List[str]
    embeddings: np.ndarray  # (n, d), unit rows
    source: str = ""

    def __post_init__(self):
        self.embeddings = np.asarray(self.embeddings, dtype=np.float64)
        if self.embeddings.ndim != 2 or self.embeddings.shape[0] != len(self.ids):
            raise DimensionMismatchError(
                f"pool has {len(self.ids)} ids but embeddings of shape {self.embeddings.shape}"
            )
        if len(self.ids) < 1:
            raise PoolTooSmallError("speaker pool needs at least one entry")

    def __len__(self) -> int:
        return len(self.ids)

    @property
    def dim(self) -> int:
        return int(self.embeddings.shape[1])


def save_pool(pool: SpeakerPool, path: str | Path) -> None:
    """Binary pool file: header (magic, version, d, n), source tag, ids, float32 rows."""
    chunks = [_POOL_HEADER.pack(POOL_MAGIC, POOL_VERSION, pool.dim, len(pool))]
    for text in [pool.source, *pool.ids]:
        raw = text.encode("utf-8")
        chunks.append(struct.pack("<H", len(raw)) + raw)
    chunks.append(pool.embeddings.astype("<f4").tobytes())
    try:
        Path(path).parent.mkdir(parents=True, exist_ok=True)
        Path(path).write_bytes(b"".join(chunks))
    except OSError as e:
        raise IoFailureError(f"Cannot write pool {path}: {e}") from e


def load_pool(path: str | Path) -> SpeakerPool:
    try:
        data = Path(path).read_bytes()
    except OSError as e:
        raise IoFailureError(f"Cannot read pool {path}: {e}") from e
    if len(data) < _POOL_HEADER.size:
        raise PoolFormatError(f"{path}: too short for a pool header")
    magic, version, dim, count = _POOL_HEADER.unpack_from(data, 0)
    if magic != POOL_MAGIC or version != POOL_VERSION:
        raise PoolFormatError(f"{path}: not a version-{POOL_VERSION} speaker pool")

    offset = _POOL_HEADER.size
    texts = []
    for _ in range(count + 1):
        if offset + 2 > len(data):
            raise PoolFormatError(f"{path}: truncated id table")
        (size,) = struct.unpack_from("<H", data, offset)
        offset += 2
        texts.append(data[offset:offset + size].decode("utf-8"))
        offset += size
    expected = count * dim * 4
    if len(data) - offset != expected:
        raise PoolFormatError(f"{path}: expected {expected} embedding bytes, found {len(data) - offset}")
    embeddings = np.frombuffer(data, dtype="<f4", offset=offset).reshape(count, dim)
    return SpeakerPool(ids=texts[1:], embeddings=embeddings.astype(np.float64), source=texts[0])


# -------------------------
# Embedding extraction
# -------------------------
def _model_dtype(codec: DisentangledCodec) -> torch.dtype:
    return next(codec.parameters()).dtype


@torch.no_grad()
def speaker_embedding(codec: DisentangledCodec, buf: AudioBuffer) -> np.ndarray:
    """Unit-norm speaker embedding of a whole utterance."""
    wave = torch.as_tensor(buf.samples, dtype=_model_dtype(codec)).unsqueeze(0)
    return codec.speaker_encode(codec.mel(wave))[0].double().cpu().numpy()


def build_pool(manifest: Manifest, codec: DisentangledCodec, progress: bool = False) -> SpeakerPool:
    """Per speaker: mean of the utterance embeddings, re-normalized."""
    if len(manifest) == 0:
        raise EmptyManifestError(f"cannot build a speaker pool from an empty manifest ({manifest.source})")
    codec.eval()
    ids, rows = [], []
    groups = manifest.by_speaker()
    for spk in tqdm(groups, desc="pool", disable=not progress):
        embeds = [speaker_embedding(codec, load_utterance(manifest, rec.utt_id)) for rec in groups[spk]]
        ids.append(spk)
        rows.append(_normalize(np.mean(embeds, axis=0)))
    logger.info(f"✅ Speaker pool: {len(ids)} speakers, d={rows[0].shape[0]}")
    return SpeakerPool(ids=ids, embeddings=np.stack(rows), source=manifest.source)


# -------------------------
# Pseudo-speaker
# -------------------------
@dataclass
class AnonSpec:
    alpha: float = 0.9
    num_selected: int = 20
    seed: int = 0
    gaussian_sigma: Optional[float] = None  # None -> 1/sqrt(d)
    selection: str = "random"  # or "farthest"
    passthrough: bool = False

    def __post_init__(self):
        if not (0.0 <= self.alpha <= 1.0):
            raise ValueError(f"alpha must lie in [0, 1], got {self.alpha}")
        if self.selection not in ("random", "farthest"):
            raise ValueError(f"unknown pool selection '{self.selection}'")

    @classmethod
    def from_config(cls, cfg: AnonConfig) -> "AnonSpec":
        return cls(alpha=cfg.alpha, num_selected=cfg.num_selected, seed=cfg.seed,
                   gaussian_sigma=cfg.gaussian_sigma, selection=cfg.selection, passthrough=cfg.passthrough)


@dataclass
class PseudoSpeakerDraw:
    selected: np.ndarray  # pool row indices
    mean: np.ndarray  # s_bar (normalized)
    random: np.ndarray  # s_hat (normalized)
    mix: np.ndarray  # alpha * s_bar + (1 - alpha) * s_hat, before normalization
    embedding: np.ndarray  # normalized mix


def utterance_rng(seed: int, utt_id: str) -> np.random.Generator:
    """Independent, reproducible stream per (global seed, utterance id)."""
    digest = hashlib.sha256(f"{seed}:{utt_id}".encode("utf-8")).digest()
    return np.random.default_rng(int.from_bytes(digest[:16], "little"))


def _candidates(pool: SpeakerPool, spec: AnonSpec, source: Optional[np.ndarray]) -> np.ndarray:
    n = len(pool)
    if spec.selection == "farthest" and source is not None:
        cos = pool.embeddings @ _normalize(np.asarray(source, dtype=np.float64))
        keep = min(n, 2 * spec.num_selected)
        return np.argsort(cos, kind="stable")[:keep]
    return np.arange(n)


def draw_pseudo_speaker(pool: SpeakerPool, spec: AnonSpec, utt_rng: np.random.Generator,
                        source: Optional[np.ndarray] = None) -> PseudoSpeakerDraw:
    """
    s_bar: normalized mean of M pool rows sampled without replacement
    (from the 2M farthest of `source` when selection is "farthest").
    s_hat: normalized isotropic Gaussian draw.
    """
    if spec.num_selected > len(pool):
        raise PoolTooSmallError(f"need {spec.num_selected} pool speakers, pool has {len(pool)}")
    candidates = _candidates(pool, spec, source)
    selected = np.sort(utt_rng.choice(candidates, size=spec.num_selected, replace=False))
    s_bar = _normalize(pool.embeddings[selected].mean(axis=0))

    sigma = spec.gaussian_sigma if spec.gaussian_sigma is not None else 1.0 / np.sqrt(pool.dim)
    s_hat = _normalize(utt_rng.normal(0.0, sigma, size=pool.dim))
    mix = spec.alpha * s_bar + (1.0 - spec.alpha) * s_hat
    return PseudoSpeakerDraw(selected=selected, mean=s_bar, random=s_hat, mix=mix, embedding=_normalize(mix))


def pseudo_speaker(pool: SpeakerPool, spec: AnonSpec, utt_rng: np.random.Generator,
                   source: Optional[np.ndarray] = None) -> np.ndarray:
    return draw_pseudo_speaker(pool, spec, utt_rng, source).embedding


# -------------------------
# Utterance pipeline
# -------------------------
@dataclass
class EncodedUtterance:
    speaker: torch.Tensor  # (1, d)
    quantization: QuantizationResult
    content: torch.Tensor  # (1, T, D)
    num_samples: int

    def layer_indices(self, layer: int) -> np.ndarray:
        return self.quantization.indices[layer, 0].cpu().numpy()


class Anonymizer:
    """Encodes once, swaps the speaker embedding after quantization, decodes."""

    def __init__(self, codec: DisentangledCodec, pool: Optional[SpeakerPool], spec: AnonSpec):
        if pool is not None and pool.dim != codec.cfg.speaker_dim:
            raise DimensionMismatchError(f"pool embeddings have d={pool.dim}, model uses {codec.cfg.speaker_dim}")
        self.codec = codec.eval()
        self.pool = pool
        self.spec = spec
        self.dtype = _model_dtype(codec)

    @torch.no_grad()
    def encode(self, buf: AudioBuffer) -> EncodedUtterance:
        if buf.sample_rate != self.codec.cfg.mel.sample_rate:
            raise ConfigInvalidError(f"audio at {buf.sample_rate} Hz, model expects {self.codec.cfg.mel.sample_rate} Hz")
        wave = torch.as_tensor(buf.samples, dtype=self.dtype).unsqueeze(0)
        out = self.codec(wave, decode=False)
        return EncodedUtterance(speaker=out.speaker, quantization=out.quantization,
                                content=out.content, num_samples=len(buf))

    @torch.no_grad()
    def anonymize(self, buf: AudioBuffer, utt_rng: Optional[np.random.Generator] = None,
                  keep_speaker: bool = False) -> AudioBuffer:
        if self.spec.passthrough:
            return AudioBuffer(buf.samples.copy(), buf.sample_rate, buf.name)
        enc = self.encode(buf)
        if keep_speaker:
            target = enc.speaker
        else:
            if self.pool is None:
                raise PoolTooSmallError("anonymization needs a speaker pool")
            rng = utt_rng if utt_rng is not None else utterance_rng(self.spec.seed, buf.name)
            source = enc.speaker[0].double().cpu().numpy()
            target = torch.as_tensor(pseudo_speaker(self.pool, self.spec, rng, source),
                                     dtype=self.dtype).unsqueeze(0)
        wave = self.codec.decode(enc.content, target)[0]
        return AudioBuffer(wave.double().cpu().numpy(), buf.sample_rate, buf.name)


def anonymize_utterance(buf: AudioBuffer, codec: DisentangledCodec, pool: SpeakerPool, spec: AnonSpec,
                        utt_rng: np.random.Generator, keep_speaker: bool = False) -> AudioBuffer:
    return Anonymizer(codec, pool, spec).anonymize(buf, utt_rng, keep_speaker=keep_speaker)
