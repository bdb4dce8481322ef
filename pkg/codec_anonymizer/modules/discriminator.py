# modules/discriminator.py
"""Multi-scale waveform discriminator (x1, x2, x4 average-pooled) with least-squares scores."""

from typing import List, Tuple

import torch
import torch.nn as nn
import torch.nn.functional as F

LEAKY_SLOPE = 0.1


def _groups(channels: int) -> int:
    return 4 if channels % 4 == 0 else 1


class ScaleDiscriminator(nn.Module):
    def __init__(self, channels: int):
        super().__init__()
        c = channels
        self.convs = nn.ModuleList([
            nn.Conv1d(1, c, kernel_size=15, stride=1, padding=7),
            nn.Conv1d(c, 2 * c, kernel_size=41, stride=4, padding=20, groups=_groups(c)),
            nn.Conv1d(2 * c, 4 * c, kernel_size=41, stride=4, padding=20, groups=_groups(c)),
            nn.Conv1d(4 * c, 4 * c, kernel_size=5, stride=1, padding=2),
        ])
        self.out = nn.Conv1d(4 * c, 1, kernel_size=3, stride=1, padding=1)

    def forward(self, x: torch.Tensor) -> Tuple[torch.Tensor, List[torch.Tensor]]:
        features = []
        for conv in self.convs:
            x = F.leaky_relu(conv(x), LEAKY_SLOPE)
            features.append(x)
        score = self.out(x)
        features.append(score)
        return score.flatten(1), features


class MultiScaleDiscriminator(nn.Module):
    def __init__(self, channels: int = 16, num_scales: int = 3):
        super().__init__()
        self.discriminators = nn.ModuleList(ScaleDiscriminator(channels) for _ in range(num_scales))

    @property
    def num_scales(self) -> int:
        return len(self.discriminators)

    def forward(self, waves: torch.Tensor) -> Tuple[List[torch.Tensor], List[List[torch.Tensor]]]:
        """waves (B, L) -> per-scale scores (B, L_s) and per-scale feature maps."""
        x = waves.unsqueeze(1)
        scores, features = [], []
        for i, disc in enumerate(self.discriminators):
            if i > 0:
                x = F.avg_pool1d(x, kernel_size=2, stride=2, ceil_mode=True)
            score, feats = disc(x)
            scores.append(score)
            features.append(feats)
        return scores, features
