# modules/codec.py
"""
Disentangled neural codec: speech encoder, speaker encoder, speaker
subtraction, residual bottleneck, decoder and the three distillation heads.

Shapes: waveforms (B, L); frame sequences (B, T, D) with T = ceil(L / hop);
speaker embeddings (B, d), unit norm.
"""

import math
from dataclasses import dataclass
from typing import List, Optional

import torch
import torch.nn as nn
import torch.nn.functional as F

from modules.dsp import log_mel
from modules.errors import DimensionMismatchError, InputTooShortError
from modules.residual_vq import (
    QuantizationResult,
    ResidualBottleneck,
    straight_through,
    straight_through_layer,
)
from utils.config_utils import CodecConfig


# -------------------------
# Building blocks
# -------------------------
class ResidualUnit(nn.Module):
    """Two kernel-3 convolutions with ELU and a skip connection."""

    def __init__(self, channels: int):
        super().__init__()
        self.block = nn.Sequential(
            nn.ELU(),
            nn.Conv1d(channels, channels, kernel_size=3, padding=1),
            nn.ELU(),
            nn.Conv1d(channels, channels, kernel_size=3, padding=1),
        )

    def forward(self, x):
        return x + self.block(x)


class EncoderBlock(nn.Module):
    """Residual unit, then a strided conv that doubles the channels (exact L / stride output)."""

    def __init__(self, in_channels: int, stride: int):
        super().__init__()
        self.residual = ResidualUnit(in_channels)
        self.down = nn.Conv1d(in_channels, 2 * in_channels, kernel_size=2 * stride, stride=stride,
                              padding=math.ceil(stride / 2))

    def forward(self, x):
        return self.down(F.elu(self.residual(x)))


class DecoderBlock(nn.Module):
    """Transposed conv (exact L * stride output) that halves the channels, then a residual unit."""

    def __init__(self, in_channels: int, stride: int):
        super().__init__()
        self.up = nn.ConvTranspose1d(in_channels, in_channels // 2, kernel_size=2 * stride, stride=stride,
                                     padding=math.ceil(stride / 2), output_padding=stride % 2)
        self.residual = ResidualUnit(in_channels // 2)

    def forward(self, x):
        return self.residual(self.up(F.elu(x)))


class SequenceLSTM(nn.Module):
    """Multi-layer LSTM over (B, C, T) with a skip connection."""

    def __init__(self, channels: int, num_layers: int):
        super().__init__()
        self.lstm = nn.LSTM(channels, channels, num_layers=num_layers, batch_first=True)
        for name, param in self.lstm.named_parameters():
            if name.startswith("bias"):
                with torch.no_grad():
                    param.zero_()
                    param[channels:2 * channels] = 0.5  # forget gate; b_ih + b_hh = 1.0

    def forward(self, x):
        y, _ = self.lstm(x.transpose(1, 2))
        return x + y.transpose(1, 2)


def _init_weights(module: nn.Module) -> None:
    if isinstance(module, (nn.Conv1d, nn.ConvTranspose1d, nn.Linear)):
        fan_in = module.weight.shape[1] * (module.weight[0, 0].numel() if module.weight.dim() > 2 else 1)
        if isinstance(module, nn.ConvTranspose1d):
            fan_in = module.weight.shape[0] * module.weight.shape[2] // max(module.stride[0], 1)
        bound = 1.0 / math.sqrt(max(fan_in, 1))
        nn.init.uniform_(module.weight, -bound, bound)
        if module.bias is not None:
            nn.init.zeros_(module.bias)


# -------------------------
# Networks
# -------------------------
class SpeechEncoder(nn.Module):
    def __init__(self, cfg: CodecConfig):
        super().__init__()
        self.hop_length = cfg.hop_length
        ch = cfg.base_channels
        layers: List[nn.Module] = [nn.Conv1d(1, ch, kernel_size=7, padding=3)]
        for stride in cfg.strides:
            layers.append(EncoderBlock(ch, stride))
            ch *= 2
        self.convs = nn.Sequential(*layers)
        self.lstm = SequenceLSTM(ch, cfg.lstm_layers)
        self.proj = nn.Conv1d(ch, cfg.encoder_out_dim, kernel_size=7, padding=3)

    def forward(self, waves: torch.Tensor) -> torch.Tensor:
        length = waves.shape[-1]
        if length < self.hop_length:
            raise InputTooShortError(f"need at least {self.hop_length} samples, got {length}")
        frames = math.ceil(length / self.hop_length)
        x = F.pad(waves, (0, frames * self.hop_length - length)).unsqueeze(1)
        x = self.lstm(self.convs(x))
        return self.proj(F.elu(x)).transpose(1, 2)


class SpeakerEncoder(nn.Module):
    """Frame-level conv stack over log-mel, temporal mean pooling, L2 normalization."""

    def __init__(self, cfg: CodecConfig):
        super().__init__()
        n_mels, ch = cfg.mel.n_mels, cfg.speaker_channels
        self.norm = nn.LayerNorm(n_mels)
        self.convs = nn.Sequential(
            nn.Conv1d(n_mels, ch, kernel_size=3, padding=1),
            nn.ELU(),
            nn.Conv1d(ch, ch, kernel_size=3, padding=1),
            nn.ELU(),
            nn.Conv1d(ch, ch, kernel_size=3, padding=1),
            nn.ELU(),
        )
        self.out = nn.Linear(ch, cfg.speaker_dim)

    def forward(self, mel: torch.Tensor) -> torch.Tensor:
        h = self.convs(self.norm(mel).transpose(1, 2))
        return F.normalize(self.out(h.mean(dim=2)), dim=-1)


class Decoder(nn.Module):
    def __init__(self, cfg: CodecConfig):
        super().__init__()
        ch = cfg.base_channels * 2 ** len(cfg.strides)
        self.speaker_proj = nn.Linear(cfg.speaker_dim, cfg.encoder_out_dim)
        self.pre = nn.Conv1d(2 * cfg.encoder_out_dim, ch, kernel_size=7, padding=3)
        self.lstm = SequenceLSTM(ch, cfg.lstm_layers)
        blocks = []
        for stride in reversed(cfg.strides):
            blocks.append(DecoderBlock(ch, stride))
            ch //= 2
        self.blocks = nn.Sequential(*blocks)
        self.post = nn.Conv1d(ch, 1, kernel_size=7, padding=3)

    def forward(self, content: torch.Tensor, spk: torch.Tensor) -> torch.Tensor:
        cond = self.speaker_proj(spk).unsqueeze(1).expand(-1, content.shape[1], -1)
        x = torch.cat([content, cond], dim=-1).transpose(1, 2)
        x = self.blocks(self.lstm(self.pre(x)))
        return torch.tanh(self.post(F.elu(x))).squeeze(1)


@dataclass
class CodecOutput:
    frames: torch.Tensor  # speech-encoder output (B, T, D)
    speaker: torch.Tensor  # (B, d)
    speaker_free: torch.Tensor  # r1 = frames - P s
    quantization: QuantizationResult
    content: torch.Tensor  # straight-through cumulative codewords
    reconstruction: Optional[torch.Tensor]  # (B, T * hop)


class DisentangledCodec(nn.Module):
    """
    Container of every trainable generator-side network. The operations take
    and return tensors; `modules.anonymizer` wraps them for AudioBuffers.
    """

    def __init__(self, cfg: CodecConfig, num_speakers: int):
        super().__init__()
        cfg.check()
        self.cfg = cfg
        self.num_speakers = num_speakers
        self.speech_encoder = SpeechEncoder(cfg)
        self.speaker_encoder = SpeakerEncoder(cfg)
        self.speaker_subtract = nn.Linear(cfg.speaker_dim, cfg.encoder_out_dim, bias=False)
        self.bottleneck = ResidualBottleneck(
            cfg.num_quantizers, cfg.codebook_size, cfg.encoder_out_dim,
            decay=cfg.codebook_decay, dead_threshold=cfg.dead_code_threshold,
        )
        self.decoder = Decoder(cfg)
        self.speaker_classifier = nn.Linear(cfg.speaker_dim, max(num_speakers, 1))
        self.linguistic_head = nn.Linear(cfg.encoder_out_dim, cfg.teacher_vocab)
        self.emotion_proj = nn.Linear(cfg.encoder_out_dim, 1)
        self.apply(_init_weights)

    @property
    def hop_length(self) -> int:
        return self.cfg.hop_length

    # --- operations ---
    def speech_encode(self, waves: torch.Tensor) -> torch.Tensor:
        return self.speech_encoder(waves)

    def mel(self, waves: torch.Tensor) -> torch.Tensor:
        return log_mel(waves, self.cfg.mel)

    def speaker_encode(self, mel: torch.Tensor) -> torch.Tensor:
        return self.speaker_encoder(mel)

    def subtract_speaker(self, frames: torch.Tensor, spk: torch.Tensor) -> torch.Tensor:
        if spk.shape[-1] != self.cfg.speaker_dim:
            raise DimensionMismatchError(f"speaker embedding has {spk.shape[-1]} dims, model uses "
                                         f"{self.cfg.speaker_dim}")
        return frames - self.speaker_subtract(spk).unsqueeze(1)

    def decode(self, content: torch.Tensor, spk: torch.Tensor) -> torch.Tensor:
        if spk.shape[-1] != self.cfg.speaker_dim:
            raise DimensionMismatchError(f"speaker embedding has {spk.shape[-1]} dims, model uses "
                                         f"{self.cfg.speaker_dim}")
        return self.decoder(content, spk)

    def speaker_classify(self, spk: torch.Tensor) -> torch.Tensor:
        return self.speaker_classifier(spk)

    def linguistic_logits(self, q1: torch.Tensor) -> torch.Tensor:
        return self.linguistic_head(q1)

    def emotion_projection(self, q2: torch.Tensor) -> torch.Tensor:
        return self.emotion_proj(q2).squeeze(-1)

    def forward(self, waves: torch.Tensor, speaker: Optional[torch.Tensor] = None, decode: bool = True,
                generator: Optional[torch.Generator] = None) -> CodecOutput:
        """Full pass; `speaker` overrides the embedding used by the decoder (subtraction keeps the own one)."""
        frames = self.speech_encode(waves)
        own = self.speaker_encode(self.mel(waves))
        r1 = self.subtract_speaker(frames, own)
        result = self.bottleneck(r1, generator=generator)
        content = straight_through(r1, result)
        recon = self.decode(content, own if speaker is None else speaker) if decode else None
        return CodecOutput(frames=frames, speaker=own, speaker_free=r1, quantization=result,
                           content=content, reconstruction=recon)

    def distillation_inputs(self, result: QuantizationResult):
        """(linguistic logits over layer 1, emotion projection of layer 2), both straight-through."""
        q1 = straight_through_layer(result, 0)
        q2 = straight_through_layer(result, 1)
        return self.linguistic_logits(q1), self.emotion_projection(q2)
