# modules/losses.py
"""
Training objectives: speaker / linguistic / emotion distillation,
mel reconstruction, LSGAN adversarial + feature matching, commitment,
and the weighted total.

All functions take torch tensors and return 0-dim tensors. Batched inputs
average over the batch.
"""

import math
from dataclasses import asdict, dataclass
from typing import Dict, List, Mapping, Optional, Sequence, Tuple

import torch
import torch.nn.functional as F

from modules.dsp import log_mel
from modules.errors import (
    LabelOutOfRangeError,
    LengthMismatchError,
    NonFiniteTermError,
    ScaleMismatchError,
)
from modules.residual_vq import QuantizationResult
from utils.config_utils import LossWeights, MelConfig

GENERATOR_TERMS = ("rec", "adv", "feature_match", "com", "spk", "lin", "emo")


# -------------------------
# Distillation losses
# -------------------------
def spk_loss(s1: torch.Tensor, s2: torch.Tensor, labels: torch.Tensor, classifier) -> torch.Tensor:
    """CE(classifier(s1), I) + CE(classifier(s2), I) - cos(s1, s2)."""
    if s1.dim() == 1:
        s1, s2, labels = s1.unsqueeze(0), s2.unsqueeze(0), labels.reshape(1)
    logits1 = classifier(s1)
    logits2 = classifier(s2)
    num_classes = logits1.shape[-1]
    labels = labels.long()
    if labels.numel() and (int(labels.min()) < 0 or int(labels.max()) >= num_classes):
        raise LabelOutOfRangeError(f"speaker labels {labels.tolist()} outside [0, {num_classes})")
    ce = F.cross_entropy(logits1, labels) + F.cross_entropy(logits2, labels)
    return ce - F.cosine_similarity(s1, s2, dim=-1).mean()


def lin_loss(logits: torch.Tensor, teacher_tokens: torch.Tensor,
             mask: Optional[torch.Tensor] = None) -> torch.Tensor:
    """Mean frame-wise cross-entropy of the teacher token, over unmasked frames only."""
    if logits.shape[:-1] != teacher_tokens.shape:
        raise LengthMismatchError(
            f"logits frames {tuple(logits.shape[:-1])} vs teacher tokens {tuple(teacher_tokens.shape)}"
        )
    if mask is not None and mask.shape != teacher_tokens.shape:
        raise LengthMismatchError(f"mask {tuple(mask.shape)} vs teacher tokens {tuple(teacher_tokens.shape)}")
    ce = F.cross_entropy(logits.reshape(-1, logits.shape[-1]), teacher_tokens.reshape(-1).long(), reduction="none")
    if mask is None:
        return ce.mean()
    weights = mask.reshape(-1).to(ce.dtype)
    count = weights.sum()
    if count <= 0:
        return logits.sum() * 0.0
    return (ce * weights).sum() / count


def _emo_item(hz: torch.Tensor, voiced: torch.Tensor, proj: torch.Tensor) -> Optional[torch.Tensor]:
    if int(voiced.sum()) < 2:
        return None
    f = hz[voiced].to(proj.dtype)
    p = proj[voiced]
    f = f - f.mean()
    p = p - p.mean()
    denom = torch.sqrt(torch.clamp((f * f).sum() * (p * p).sum(), min=1e-16))
    return 1.0 - (f * p).sum() / denom


def emo_loss(f0_hz: torch.Tensor, voiced: torch.Tensor, proj: torch.Tensor) -> torch.Tensor:
    """
    1 - cos between the mean-centred F0 and the mean-centred projection,
    both restricted to voiced frames. In [0, 2]. Items with fewer than two
    voiced frames contribute 0.
    """
    if f0_hz.shape != proj.shape or voiced.shape != proj.shape:
        raise LengthMismatchError(
            f"F0 {tuple(f0_hz.shape)}, voiced {tuple(voiced.shape)} and projection {tuple(proj.shape)} differ"
        )
    if proj.dim() == 1:
        f0_hz, voiced, proj = f0_hz.unsqueeze(0), voiced.unsqueeze(0), proj.unsqueeze(0)
    voiced = voiced.bool()
    total = proj.sum() * 0.0
    for b in range(proj.shape[0]):
        item = _emo_item(f0_hz[b], voiced[b], proj[b])
        if item is not None:
            total = total + item
    return total / proj.shape[0]


# -------------------------
# Reconstruction
# -------------------------
def mel_rec_loss(mel: torch.Tensor, mel_hat: torch.Tensor) -> torch.Tensor:
    """Mean L1 + root-mean-square difference of two log-mel tensors."""
    if mel.shape != mel_hat.shape:
        raise LengthMismatchError(f"mel shapes differ: {tuple(mel.shape)} vs {tuple(mel_hat.shape)}")
    diff = mel_hat - mel
    mse = torch.mean(diff ** 2)
    rms = torch.sqrt(mse) if mse.item() > 0.0 else mse
    return torch.mean(torch.abs(diff)) + rms


def match_length(x_hat: torch.Tensor, length: int) -> torch.Tensor:
    """Trim or right-pad (zeros) the last axis to `length`."""
    current = x_hat.shape[-1]
    if current > length:
        return x_hat[..., :length]
    if current < length:
        return F.pad(x_hat, (0, length - current))
    return x_hat


def rec_loss(x: torch.Tensor, x_hat: torch.Tensor, mel_cfg: MelConfig) -> torch.Tensor:
    x_hat = match_length(x_hat, x.shape[-1])
    if x_hat.shape != x.shape:
        raise LengthMismatchError(f"waveforms differ after alignment: {tuple(x.shape)} vs {tuple(x_hat.shape)}")
    return mel_rec_loss(log_mel(x, mel_cfg), log_mel(x_hat, mel_cfg))


# -------------------------
# Adversarial
# -------------------------
def adv_losses(
    disc_real: Sequence[torch.Tensor],
    disc_fake_detached: Sequence[torch.Tensor],
    disc_fake_attached: Sequence[torch.Tensor],
    features_real: Sequence[Sequence[torch.Tensor]],
    features_fake: Sequence[Sequence[torch.Tensor]],
) -> Tuple[torch.Tensor, torch.Tensor, torch.Tensor]:
    """
    Least-squares GAN terms summed over scales.

    Returns (gen_adv, disc, feat_match). Feature matching is the L1 between
    real (detached) and fake feature maps, summed over scales and layers.
    """
    counts = {len(disc_real), len(disc_fake_detached), len(disc_fake_attached),
              len(features_real), len(features_fake)}
    if len(counts) != 1:
        raise ScaleMismatchError(
            f"scale counts differ: real={len(disc_real)} fake_detached={len(disc_fake_detached)} "
            f"fake_attached={len(disc_fake_attached)} feats_real={len(features_real)} "
            f"feats_fake={len(features_fake)}"
        )
    disc = sum(torch.mean((dr - 1.0) ** 2) + torch.mean(df ** 2)
               for dr, df in zip(disc_real, disc_fake_detached))
    gen_adv = sum(torch.mean((df - 1.0) ** 2) for df in disc_fake_attached)

    feat_terms: List[torch.Tensor] = []
    for fr_scale, ff_scale in zip(features_real, features_fake):
        if len(fr_scale) != len(ff_scale):
            raise ScaleMismatchError(f"feature layer counts differ: {len(fr_scale)} vs {len(ff_scale)}")
        for fr, ff in zip(fr_scale, ff_scale):
            feat_terms.append(torch.mean(torch.abs(fr.detach() - ff)))
    feat_match = sum(feat_terms) if feat_terms else gen_adv * 0.0
    return gen_adv, disc, feat_match


def commit_loss(result: QuantizationResult) -> torch.Tensor:
    """Sum over layers of mean ||x_i - sg(q_i)||^2 (codewords carry no gradient)."""
    return sum(result.commitment_terms)


# -------------------------
# Total
# -------------------------
@dataclass
class LossReport:
    rec: float
    adv: float
    feature_match: float
    com: float
    spk: float
    lin: float
    emo: float
    disc: float
    total: float

    @classmethod
    def from_terms(cls, terms: Mapping[str, torch.Tensor], disc: torch.Tensor,
                   total: torch.Tensor) -> "LossReport":
        return cls(**{name: float(terms[name]) for name in GENERATOR_TERMS},
                   disc=float(disc), total=float(total))

    def to_record(self, step: int, **extra) -> Dict[str, float]:
        record = {"step": int(step), **asdict(self)}
        record.update(extra)
        return record


def check_finite(terms: Mapping[str, torch.Tensor]) -> None:
    for name, value in terms.items():
        v = float(value)
        if not math.isfinite(v):
            raise NonFiniteTermError(name, v)


def total_loss(terms: Mapping[str, torch.Tensor], weights: LossWeights) -> torch.Tensor:
    """
    rec*w_rec + w_adv * (adv + feature_match_scale * fm) + com*w_com
    + spk*w_spk + lin*w_lin + emo*w_emo.

    `terms` holds the generator terms by name; a missing `feature_match`
    counts as 0.
    """
    check_finite(terms)
    fm = terms.get("feature_match", 0.0)
    return (
        weights.rec * terms["rec"]
        + weights.adv * (terms["adv"] + weights.feature_match * fm)
        + weights.com * terms["com"]
        + weights.spk * terms["spk"]
        + weights.lin * terms["lin"]
        + weights.emo * terms["emo"]
    )
