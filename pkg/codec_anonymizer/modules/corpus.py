# modules/corpus.py
"""
Utterance manifests, two-segment sampling for the speaker loss, batching,
and a deterministic synthetic corpus (harmonic "speakers" with formant
filters, random-walk F0, random phone sequences) for desk-scale runs.
"""

import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Dict, List, MutableMapping, Optional, Sequence

import numpy as np
import torch

from modules.dsp import AudioBuffer, load_wav, num_frames_for, save_wav
from modules.errors import (
    DuplicateUtteranceIdError,
    ManifestParseError,
    MissingAudioError,
    UtteranceTooShortError,
)
from utils.log_utils import get_logger
from utils.records import load_jsonl, save_json, save_jsonl

logger = get_logger(__name__)

MANIFEST_FIELDS = ("id", "speaker", "path", "duration_s")


# -------------------------
# Manifest
# -------------------------
@dataclass(frozen=True)
class ManifestRecord:
    utt_id: str
    speaker: str
    path: Path
    duration_s: float

    def to_json(self, base_dir: Optional[Path] = None) -> dict:
        path = self.path
        if base_dir is not None:
            try:
                path = self.path.relative_to(base_dir)
            except ValueError:
                pass
        return {"id": self.utt_id, "speaker": self.speaker, "path": path.as_posix(),
                "duration_s": self.duration_s}


@dataclass
class Manifest:
    records: List[ManifestRecord] = field(default_factory=list)
    source: str = ""

    def __post_init__(self):
        self._by_id = {}
        for rec in self.records:
            if rec.utt_id in self._by_id:
                raise DuplicateUtteranceIdError(f"duplicate utterance id '{rec.utt_id}' in {self.source or 'manifest'}")
            self._by_id[rec.utt_id] = rec

    def __len__(self) -> int:
        return len(self.records)

    def __getitem__(self, utt_id: str) -> ManifestRecord:
        return self._by_id[utt_id]

    def __contains__(self, utt_id: str) -> bool:
        return utt_id in self._by_id

    @property
    def utterance_ids(self) -> List[str]:
        return [r.utt_id for r in self.records]

    @property
    def speakers(self) -> List[str]:
        """Sorted speaker label vocabulary."""
        return sorted({r.speaker for r in self.records})

    @property
    def speaker_index(self) -> Dict[str, int]:
        return {spk: i for i, spk in enumerate(self.speakers)}

    def by_speaker(self) -> Dict[str, List[ManifestRecord]]:
        groups: Dict[str, List[ManifestRecord]] = {spk: [] for spk in self.speakers}
        for rec in self.records:
            groups[rec.speaker].append(rec)
        return groups


def load_manifest(path: str | Path) -> Manifest:
    """JSON-lines manifest (id, speaker, path, duration_s); audio paths resolve against the file's directory."""
    path = Path(path)
    base = path.parent
    records = []
    for i, obj in enumerate(load_jsonl(path), start=1):
        missing = [k for k in MANIFEST_FIELDS if k not in obj]
        if missing:
            raise ManifestParseError(f"{path}: record {i} lacks field(s) {missing}")
        try:
            duration = float(obj["duration_s"])
        except (TypeError, ValueError) as e:
            raise ManifestParseError(f"{path}: record {i} has a non-numeric duration_s") from e
        audio = Path(obj["path"])
        if not audio.is_absolute():
            audio = (base / audio).resolve()
        if not audio.exists():
            raise MissingAudioError(f"{path}: audio for '{obj['id']}' not found at {audio}")
        records.append(ManifestRecord(str(obj["id"]), str(obj["speaker"]), audio, duration))
    manifest = Manifest(records, source=str(path))
    logger.info(f"✅ Manifest {path.name}: {len(manifest)} utterances, {len(manifest.speakers)} speakers")
    return manifest


def save_manifest(manifest: Manifest, path: str | Path) -> None:
    path = Path(path)
    base = path.parent.resolve()
    save_jsonl((r.to_json(base) for r in manifest.records), path)


# -------------------------
# Segment sampling and batching
# -------------------------
@dataclass
class SegmentPair:
    seg_a: AudioBuffer
    seg_b: AudioBuffer
    label: int
    utt_id: str
    offsets: tuple


AudioCache = MutableMapping[str, AudioBuffer]


def load_utterance(manifest: Manifest, utt_id: str, audio_cache: Optional[AudioCache] = None) -> AudioBuffer:
    if audio_cache is not None and utt_id in audio_cache:
        return audio_cache[utt_id]
    buf = load_wav(manifest[utt_id].path)
    buf.name = utt_id
    if audio_cache is not None:
        audio_cache[utt_id] = buf
    return buf


def sample_segment_pair(manifest: Manifest, utt_id: str, seg_len: int, rng: np.random.Generator,
                        audio_cache: Optional[AudioCache] = None) -> SegmentPair:
    """Two independent uniform crops of `seg_len` samples from one utterance (they may overlap)."""
    buf = load_utterance(manifest, utt_id, audio_cache)
    if len(buf) < seg_len:
        raise UtteranceTooShortError(f"utterance '{utt_id}' has {len(buf)} samples, segment needs {seg_len}")
    a, b = (int(o) for o in rng.integers(0, len(buf) - seg_len + 1, size=2))
    label = manifest.speaker_index[manifest[utt_id].speaker]
    return SegmentPair(buf.slice(a, seg_len), buf.slice(b, seg_len), label, utt_id, (a, b))


@dataclass
class Batch:
    pairs: List[SegmentPair]

    def __len__(self) -> int:
        return len(self.pairs)

    def waves_a(self, dtype=torch.float32) -> torch.Tensor:
        return torch.as_tensor(np.stack([p.seg_a.samples for p in self.pairs]), dtype=dtype)

    def waves_b(self, dtype=torch.float32) -> torch.Tensor:
        return torch.as_tensor(np.stack([p.seg_b.samples for p in self.pairs]), dtype=dtype)

    def labels(self) -> torch.Tensor:
        return torch.as_tensor([p.label for p in self.pairs], dtype=torch.long)


def make_batch(manifest: Manifest, seg_len: int, batch_size: int, rng: np.random.Generator,
               audio_cache: Optional[AudioCache] = None, utt_ids: Optional[Sequence[str]] = None) -> Batch:
    """Draw `batch_size` utterances (without replacement when possible) and one SegmentPair each."""
    ids = list(utt_ids) if utt_ids is not None else manifest.utterance_ids
    picks = rng.choice(len(ids), size=batch_size, replace=len(ids) < batch_size)
    return Batch([sample_segment_pair(manifest, ids[int(i)], seg_len, rng, audio_cache) for i in picks])


# -------------------------
# Synthetic corpus
# -------------------------
# vowel-like formant targets (F1, F2, F3) in Hz; phone 0 is a weak neutral segment
PHONE_FORMANTS = np.array([
    [500.0, 1500.0, 2500.0],
    [730.0, 1090.0, 2440.0],
    [270.0, 2290.0, 3010.0],
    [300.0, 870.0, 2240.0],
    [530.0, 1840.0, 2480.0],
    [660.0, 1720.0, 2410.0],
    [570.0, 840.0, 2410.0],
    [440.0, 1020.0, 2240.0],
])
WEAK_PHONE_LEVEL = 0.3
F0_RANGE = (80.0, 300.0)
MAX_HARMONIC_HZ = 7000.0


@dataclass
class SyntheticSpeaker:
    name: str
    base_f0: float
    tilt: float  # harmonic amplitude ~ h^-tilt
    formant_scale: float  # vocal-tract length factor
    bandwidths: np.ndarray


def _draw_speaker(name: str, rng: np.random.Generator) -> SyntheticSpeaker:
    return SyntheticSpeaker(
        name=name,
        base_f0=float(rng.uniform(95.0, 230.0)),
        tilt=float(rng.uniform(0.6, 1.4)),
        formant_scale=float(rng.uniform(0.85, 1.2)),
        bandwidths=rng.uniform(60.0, 160.0, size=3),
    )


def _smooth(x: np.ndarray, width: int) -> np.ndarray:
    kernel = np.ones(width) / width
    padded = np.pad(x, (width // 2, width - 1 - width // 2), mode="edge")
    return np.convolve(padded, kernel, mode="valid")


def _frame_to_samples(values: np.ndarray, hop: int, num_samples: int) -> np.ndarray:
    """Linear interpolation of per-frame values (frame t at sample t * hop)."""
    centers = np.arange(values.shape[-1]) * hop
    return np.interp(np.arange(num_samples), centers, values)


def _render_utterance(spk: SyntheticSpeaker, num_samples: int, sample_rate: int, hop: int,
                      rng: np.random.Generator):
    frames = num_frames_for(num_samples, hop)

    # F0: smoothed log-domain random walk around the speaker's base
    log_f0 = math.log(spk.base_f0) + rng.normal(0.0, 0.05) + np.cumsum(rng.normal(0.0, 0.015, frames))
    f0_frames = np.clip(np.exp(_smooth(log_f0, 5)), *F0_RANGE)

    # phone sequence: runs of 4-12 frames
    phones = np.empty(frames, dtype=np.int64)
    t = 0
    while t < frames:
        run = int(rng.integers(4, 13))
        phones[t:t + run] = int(rng.integers(0, len(PHONE_FORMANTS)))
        t += run
    formant_frames = np.stack([_smooth(PHONE_FORMANTS[phones, k] * spk.formant_scale, 3) for k in range(3)])
    level_frames = _smooth(np.where(phones == 0, WEAK_PHONE_LEVEL, 1.0), 5)

    f0 = _frame_to_samples(f0_frames, hop, num_samples)
    formants = np.stack([_frame_to_samples(fr, hop, num_samples) for fr in formant_frames])
    level = _frame_to_samples(level_frames, hop, num_samples)

    phase = 2.0 * np.pi * np.cumsum(f0) / sample_rate
    num_harmonics = int(MAX_HARMONIC_HZ // F0_RANGE[0])
    out = np.zeros(num_samples)
    for h in range(1, num_harmonics + 1):
        freq = h * f0
        active = freq < MAX_HARMONIC_HZ
        if not np.any(active):
            break
        gain = 0.05 + sum(1.0 / (1.0 + ((freq - formants[k]) / spk.bandwidths[k]) ** 2) for k in range(3))
        out += np.where(active, gain * h ** (-spk.tilt) * np.sin(h * phase), 0.0)
    out *= level
    out *= 0.5 / max(np.max(np.abs(out)), 1e-12)
    return out, f0_frames, phones


def make_synthetic_corpus(out_dir: str | Path, num_speakers: int, utts_per_speaker: int, seed: int,
                          sample_rate: int = 16000, duration_s: float = 2.0, hop_length: int = 320) -> Manifest:
    """
    Writes `wavs/<id>.wav`, a sidecar `wavs/<id>.json` (ground-truth F0 per
    frame, phone ids, frame hop, speaker) and `manifest.jsonl` under `out_dir`.
    Bit-identical for the same arguments.
    """
    out_dir = Path(out_dir)
    wav_dir = out_dir / "wavs"
    rng = np.random.default_rng(seed)
    num_samples = int(round(duration_s * sample_rate))
    speakers = [_draw_speaker(f"spk{i:02d}", rng) for i in range(num_speakers)]

    records = []
    for spk in speakers:
        for u in range(utts_per_speaker):
            utt_id = f"{spk.name}_utt{u:02d}"
            samples, f0_frames, phones = _render_utterance(spk, num_samples, sample_rate, hop_length, rng)
            wav_path = wav_dir / f"{utt_id}.wav"
            save_wav(AudioBuffer(samples, sample_rate, utt_id), wav_path)
            save_json({
                "f0_hz": [float(v) for v in f0_frames],
                "phones": [int(p) for p in phones],
                "frame_hop": hop_length,
                "sample_rate": sample_rate,
                "speaker": spk.name,
            }, wav_dir / f"{utt_id}.json")
            records.append(ManifestRecord(utt_id, spk.name, wav_path.resolve(), num_samples / sample_rate))

    manifest = Manifest(records, source=str(out_dir / "manifest.jsonl"))
    save_manifest(manifest, out_dir / "manifest.jsonl")
    logger.info(f"💾 Synthetic corpus: {num_speakers} speakers x {utts_per_speaker} utterances -> {out_dir}")
    return manifest
