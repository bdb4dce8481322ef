# modules/evaluation.py
"""
Privacy and utility measurement.

Privacy: EER of a lazy attacker that scores original enrollment utterances
against anonymized test utterances with the model's own speaker encoder.
Utility proxies: layer-1 token preservation (stands in for WER), F0
correlation (stands in for emotion recall) and log-mel distortion.
"""

from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Any, Dict, List, Mapping, Optional, Sequence, Tuple

import numpy as np
import torch
from tqdm import tqdm

from modules.anonymizer import Anonymizer, AnonSpec, SpeakerPool, speaker_embedding, utterance_rng
from modules.codec import DisentangledCodec
from modules.corpus import Manifest, load_utterance
from modules.dsp import AudioBuffer, extract_f0_with, align_f0_to_frames, log_mel
from modules.errors import (
    DegenerateTrialsError,
    InsufficientVoicedFramesError,
    IoFailureError,
    ManifestParseError,
    MissingEmbeddingError,
)
from utils.config_utils import F0Config, MelConfig
from utils.log_utils import get_logger
from utils.records import load_json, save_json

logger = get_logger(__name__)

Scored = List[Tuple[float, bool]]


# -------------------------
# Trials
# -------------------------
@dataclass(frozen=True)
class Trial:
    enroll: str
    test: str
    target: bool


@dataclass
class TrialList:
    trials: List[Trial]

    def __len__(self) -> int:
        return len(self.trials)

    def __iter__(self):
        return iter(self.trials)

    @property
    def num_target(self) -> int:
        return sum(t.target for t in self.trials)

    @property
    def num_nontarget(self) -> int:
        return len(self.trials) - self.num_target

    def utterance_ids(self) -> List[str]:
        seen = dict.fromkeys(u for t in self.trials for u in (t.enroll, t.test))
        return list(seen)

    def test_ids(self) -> List[str]:
        return list(dict.fromkeys(t.test for t in self.trials))


def build_trials(manifest: Manifest, num_trials: int, seed: int) -> TrialList:
    """
    Alternating target / non-target trials. Enrollment and test utterances
    always differ; targets need a speaker with two or more utterances.
    """
    groups = manifest.by_speaker()
    speakers = list(groups)
    if len(speakers) < 2:
        raise DegenerateTrialsError(f"trials need at least 2 speakers, manifest has {len(speakers)}")
    multi = [spk for spk in speakers if len(groups[spk]) >= 2]
    if not multi:
        raise DegenerateTrialsError("no speaker has two utterances, cannot form target trials")

    rng = np.random.default_rng(seed)
    trials = []
    for i in range(num_trials):
        if i % 2 == 0:
            spk = multi[int(rng.integers(len(multi)))]
            a, b = rng.choice(len(groups[spk]), size=2, replace=False)
            trials.append(Trial(groups[spk][int(a)].utt_id, groups[spk][int(b)].utt_id, True))
        else:
            s1, s2 = rng.choice(len(speakers), size=2, replace=False)
            u1 = groups[speakers[int(s1)]][int(rng.integers(len(groups[speakers[int(s1)]])))]
            u2 = groups[speakers[int(s2)]][int(rng.integers(len(groups[speakers[int(s2)]])))]
            trials.append(Trial(u1.utt_id, u2.utt_id, False))
    return TrialList(trials)


def save_trials(trials: TrialList, path: str | Path) -> None:
    lines = [f"{t.enroll} {t.test} {'target' if t.target else 'nontarget'}\n" for t in trials]
    try:
        Path(path).parent.mkdir(parents=True, exist_ok=True)
        Path(path).write_text("".join(lines), encoding="utf-8")
    except OSError as e:
        raise IoFailureError(f"Cannot write trials {path}: {e}") from e


def load_trials(path: str | Path) -> TrialList:
    try:
        text = Path(path).read_text(encoding="utf-8")
    except OSError as e:
        raise IoFailureError(f"Cannot read trials {path}: {e}") from e
    trials = []
    for lineno, line in enumerate(text.splitlines(), start=1):
        parts = line.split()
        if not parts:
            continue
        if len(parts) != 3 or parts[2] not in ("target", "nontarget"):
            raise ManifestParseError(f"{path}:{lineno}: expected 'enroll test target|nontarget', got '{line}'")
        trials.append(Trial(parts[0], parts[1], parts[2] == "target"))
    return TrialList(trials)


# -------------------------
# Scoring and EER
# -------------------------
def _cosine(a: np.ndarray, b: np.ndarray) -> float:
    denom = np.linalg.norm(a) * np.linalg.norm(b)
    return float(np.dot(a, b) / denom) if denom > 0 else 0.0


def score_trials(trials: TrialList, enroll_embeds: Mapping[str, np.ndarray],
                 test_embeds: Mapping[str, np.ndarray]) -> Scored:
    scored = []
    for t in trials:
        if t.enroll not in enroll_embeds:
            raise MissingEmbeddingError(f"no enrollment embedding for '{t.enroll}'")
        if t.test not in test_embeds:
            raise MissingEmbeddingError(f"no test embedding for '{t.test}'")
        scored.append((_cosine(enroll_embeds[t.enroll], test_embeds[t.test]), t.target))
    return scored


def compute_eer(scored: Sequence[Tuple[float, bool]]) -> Tuple[float, float]:
    """
    Equal error rate in percent, and its threshold.

    Operating points: accept when score >= theta, theta over the sorted
    distinct scores and +inf. The first point with FRR >= FAR (lowest
    threshold on ties) is joined linearly with the one before it and the
    crossing of FAR and FRR on that segment is reported.
    """
    scores = np.array([s for s, _ in scored], dtype=np.float64)
    labels = np.array([bool(t) for _, t in scored])
    n_tar, n_non = int(labels.sum()), int((~labels).sum())
    if n_tar == 0 or n_non == 0:
        raise DegenerateTrialsError(f"EER needs target and non-target trials, got {n_tar}/{n_non}")

    thresholds = np.append(np.unique(scores), np.inf)
    tar_sorted = np.sort(scores[labels])
    non_sorted = np.sort(scores[~labels])
    frr = np.searchsorted(tar_sorted, thresholds, side="left") / n_tar
    far = 1.0 - np.searchsorted(non_sorted, thresholds, side="left") / n_non

    gap = frr - far
    j = int(np.argmax(gap >= 0.0))
    d0, d1 = gap[j - 1], gap[j]
    t = -d0 / (d1 - d0)
    eer = far[j - 1] + t * (far[j] - far[j - 1])
    if np.isfinite(thresholds[j]):
        threshold = thresholds[j - 1] + t * (thresholds[j] - thresholds[j - 1])
    else:
        threshold = thresholds[j - 1]
    return float(100.0 * eer), float(threshold)


def fold_eer(raw_eer: float) -> Tuple[float, bool]:
    """
    Fold a raw EER into [0, 50]. Above 50 the scorer ranks non-targets over
    targets; an attacker flipping its decision gets 100 - raw. Returns
    (eer, reversed).
    """
    if raw_eer > 50.0:
        return 100.0 - raw_eer, True
    return raw_eer, False


# -------------------------
# Utility proxies
# -------------------------
@torch.no_grad()
def layer_tokens(codec: DisentangledCodec, buf: AudioBuffer, layer: int = 0) -> np.ndarray:
    codec.eval()
    wave = torch.as_tensor(buf.samples, dtype=next(codec.parameters()).dtype).unsqueeze(0)
    out = codec(wave, decode=False)
    return out.quantization.indices[layer, 0].cpu().numpy()


def _token_match(orig_tokens: np.ndarray, anon_tokens: np.ndarray) -> float:
    n = min(orig_tokens.shape[0], anon_tokens.shape[0])
    return float(np.mean(orig_tokens[:n] == anon_tokens[:n]))


def token_preservation(orig: AudioBuffer, anon: AudioBuffer, codec: DisentangledCodec) -> float:
    """Fraction of frames whose layer-1 index survives re-encoding (frame counts truncated to the shorter)."""
    return _token_match(layer_tokens(codec, orig), layer_tokens(codec, anon))


def token_chance_level(token_streams: Sequence[np.ndarray]) -> float:
    """Collision rate sum_k p_k^2 of the empirical layer-1 token distribution."""
    tokens = np.concatenate([np.asarray(t).reshape(-1) for t in token_streams])
    p = np.bincount(tokens) / tokens.size
    return float(np.sum(p ** 2))


def f0_correlation(orig: AudioBuffer, anon: AudioBuffer, hop_length: int = 320,
                   f0_cfg: Optional[F0Config] = None) -> float:
    """Pearson r of F0 over frames voiced in both contours; 0.0 when either is constant there."""
    f0_cfg = f0_cfg or F0Config()
    f_orig = extract_f0_with(orig, hop_length, f0_cfg)
    f_anon = align_f0_to_frames(extract_f0_with(anon, hop_length, f0_cfg), len(f_orig))
    both = f_orig.voiced & f_anon.voiced
    if int(both.sum()) < 2:
        raise InsufficientVoicedFramesError(f"only {int(both.sum())} commonly voiced frames")
    x = f_orig.hz[both] - f_orig.hz[both].mean()
    y = f_anon.hz[both] - f_anon.hz[both].mean()
    denom = np.sqrt(np.sum(x * x) * np.sum(y * y))
    if denom <= 0.0:
        return 0.0
    return float(np.clip(np.sum(x * y) / denom, -1.0, 1.0))


def mel_distortion(orig: AudioBuffer, anon: AudioBuffer, mel_cfg: MelConfig) -> float:
    """Mean absolute log-mel difference over the common frames."""
    with torch.no_grad():
        m1 = log_mel(torch.as_tensor(orig.samples, dtype=torch.float64), mel_cfg)
        m2 = log_mel(torch.as_tensor(anon.samples, dtype=torch.float64), mel_cfg)
    n = min(m1.shape[0], m2.shape[0])
    return float(torch.mean(torch.abs(m1[:n] - m2[:n])))


# -------------------------
# Report
# -------------------------
@dataclass
class MetricReport:
    eer: float  # percent, anonymized test side
    threshold: float
    baseline_eer: float  # percent, original test side, same trials
    baseline_threshold: float
    token_preservation: float  # proxy for intelligibility
    token_chance_level: float
    f0_correlation: float  # proxy for emotion preservation
    mel_distortion: float
    num_trials: int
    num_target: int
    num_nontarget: int
    num_utterances: int
    num_f0_skipped: int = 0
    alpha: float = 0.9
    passthrough: bool = False
    scores_reversed: bool = False  # raw EER was above 50, `eer` is 100 - raw
    baseline_scores_reversed: bool = False
    config: Dict[str, Any] = field(default_factory=dict)

    def __post_init__(self):
        for name in ("eer", "baseline_eer"):
            value = getattr(self, name)
            if not (0.0 <= value <= 50.0):
                raise ValueError(f"{name} must lie in [0, 50], got {value}")

    def to_json(self) -> Dict[str, Any]:
        return asdict(self)

    @classmethod
    def from_json(cls, data: Mapping[str, Any]) -> "MetricReport":
        return cls(**data)

    def save(self, path: str | Path) -> None:
        save_json(self.to_json(), path)

    @classmethod
    def load(cls, path: str | Path) -> "MetricReport":
        return cls.from_json(load_json(path))


@dataclass
class PrivacyEvaluation:
    report: MetricReport
    trials: TrialList
    scores: Scored  # anonymized arm
    baseline_scores: Scored


def evaluate_privacy(manifest: Manifest, codec: DisentangledCodec, pool: Optional[SpeakerPool], spec: AnonSpec,
                     trials: Optional[TrialList] = None, num_trials: int = 100, trial_seed: int = 0,
                     config_echo: Optional[Dict[str, Any]] = None, progress: bool = False) -> PrivacyEvaluation:
    """Lazy-attacker EER for the anonymized and original test sides, plus utility proxies on test utterances."""
    if trials is None:
        trials = build_trials(manifest, num_trials, trial_seed)
    codec.eval()
    cfg = codec.cfg
    anonymizer = Anonymizer(codec, pool, spec)

    orig_embeds: Dict[str, np.ndarray] = {}
    anon_embeds: Dict[str, np.ndarray] = {}
    test_ids = set(trials.test_ids())
    preservation, correlations, distortions, orig_streams = [], [], [], []
    skipped = 0
    for utt_id in tqdm(trials.utterance_ids(), desc="evaluate", disable=not progress):
        buf = load_utterance(manifest, utt_id)
        orig_embeds[utt_id] = speaker_embedding(codec, buf)
        if utt_id not in test_ids:
            continue
        anon = anonymizer.anonymize(buf, utterance_rng(spec.seed, utt_id))
        anon_embeds[utt_id] = speaker_embedding(codec, anon)

        orig_tokens = layer_tokens(codec, buf)
        orig_streams.append(orig_tokens)
        preservation.append(_token_match(orig_tokens, layer_tokens(codec, anon)))
        distortions.append(mel_distortion(buf, anon, cfg.mel))
        try:
            correlations.append(f0_correlation(buf, anon, cfg.hop_length, cfg.f0))
        except InsufficientVoicedFramesError:
            skipped += 1

    scores = score_trials(trials, orig_embeds, anon_embeds)
    baseline_scores = score_trials(trials, orig_embeds, orig_embeds)
    raw_eer, threshold = compute_eer(scores)
    raw_base, base_threshold = compute_eer(baseline_scores)
    eer, reversed_ = fold_eer(raw_eer)
    base_eer, base_reversed = fold_eer(raw_base)
    if reversed_ or base_reversed:
        logger.warning(f"⚠️ scores rank non-targets above targets (raw EER {raw_eer:.2f}% / original "
                       f"{raw_base:.2f}%); reporting the flipped attacker")
    if skipped:
        logger.warning(f"⚠️ {skipped} utterance(s) had too few voiced frames for F0 correlation")

    report = MetricReport(
        eer=eer,
        threshold=threshold,
        baseline_eer=base_eer,
        baseline_threshold=base_threshold,
        token_preservation=float(np.mean(preservation)),
        token_chance_level=token_chance_level(orig_streams),
        f0_correlation=float(np.mean(correlations)) if correlations else 0.0,
        mel_distortion=float(np.mean(distortions)),
        num_trials=len(trials),
        num_target=trials.num_target,
        num_nontarget=trials.num_nontarget,
        num_utterances=len(test_ids),
        num_f0_skipped=skipped,
        alpha=spec.alpha,
        passthrough=spec.passthrough,
        scores_reversed=reversed_,
        baseline_scores_reversed=base_reversed,
        config=dict(config_echo or {}),
    )
    logger.info(f"✅ EER {eer:.2f}% (original {base_eer:.2f}%), token preservation "
                f"{report.token_preservation:.3f} (chance {report.token_chance_level:.3f}), "
                f"F0 r {report.f0_correlation:.3f}")
    return PrivacyEvaluation(report=report, trials=trials, scores=scores, baseline_scores=baseline_scores)


def privacy_report(manifest: Manifest, codec: DisentangledCodec, pool: Optional[SpeakerPool], spec: AnonSpec,
                   **kwargs) -> MetricReport:
    return evaluate_privacy(manifest, codec, pool, spec, **kwargs).report


def save_scores(scored: Scored, path: str | Path) -> None:
    """`score target|nontarget` lines, enough to recompute the EER standalone."""
    lines = [f"{s!r} {'target' if t else 'nontarget'}\n" for s, t in scored]
    try:
        Path(path).parent.mkdir(parents=True, exist_ok=True)
        Path(path).write_text("".join(lines), encoding="utf-8")
    except OSError as e:
        raise IoFailureError(f"Cannot write scores {path}: {e}") from e


def load_scores(path: str | Path) -> Scored:
    scored = []
    for lineno, line in enumerate(Path(path).read_text(encoding="utf-8").splitlines(), start=1):
        parts = line.split()
        if not parts:
            continue
        if len(parts) != 2 or parts[1] not in ("target", "nontarget"):
            raise ManifestParseError(f"{path}:{lineno}: expected 'score target|nontarget'")
        scored.append((float(parts[0]), parts[1] == "target"))
    return scored
