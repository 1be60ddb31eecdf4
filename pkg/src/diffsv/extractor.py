"""ResNet speaker-embedding extractor and hierarchical input assembly."""

from __future__ import annotations

from dataclasses import dataclass
from typing import Optional, Sequence

import numpy as np
import torch
import torch.nn.functional as F
from torch import nn

from .errors import DiffSVError
from .features import MelFeature


@dataclass
class ExtractorConfig:
    in_channels: int = 3
    widths: Sequence[int] = (16, 32, 64, 128)
    blocks: Sequence[int] = (2, 2, 2, 2)
    width_mult: float = 1.0
    embedding_dim: int = 128
    n_mels: int = 80

    def stage_widths(self):
        return [max(1, int(round(w * self.width_mult))) for w in self.widths]


@dataclass
class SpeakerEmbedding:
    v: np.ndarray
    normalized: bool = False

    def normalize(self) -> "SpeakerEmbedding":
        return SpeakerEmbedding(self.v / np.linalg.norm(self.v), normalized=True)


def assemble_hierarchical(x, x_hat, z0):
    """Stack ``(x, x_hat, z0)`` on the channel axis with ``z0`` cut from the graph.

    Accepts ``[B, 1, L, F]`` tensors (returns ``[B, 3, L, F]``) or
    ``[L, F, 1, B]`` :class:`MelFeature` objects (returns ``[L, F, 3, B]``).
    """
    if isinstance(x, MelFeature):
        if not (x.shape == x_hat.shape == z0.shape) or x.shape[2] != 1:
            raise DiffSVError(f"shapes {x.shape}, {x_hat.shape}, {z0.shape}", code="shape-mismatch")
        return MelFeature(np.concatenate([x.data, x_hat.data, z0.data], axis=2), x.frame_hop_sec)
    if not (x.shape == x_hat.shape == z0.shape) or x.shape[1] != 1:
        raise DiffSVError(
            f"shapes {tuple(x.shape)}, {tuple(x_hat.shape)}, {tuple(z0.shape)}", code="shape-mismatch"
        )
    return torch.cat([x, x_hat, z0.detach()], dim=1)


class BasicBlock(nn.Module):
    def __init__(self, cin, cout, stride=(1, 1)):
        super().__init__()
        self.conv1 = nn.Conv2d(cin, cout, 3, stride=stride, padding=1, bias=False)
        self.bn1 = nn.BatchNorm2d(cout)
        self.conv2 = nn.Conv2d(cout, cout, 3, padding=1, bias=False)
        self.bn2 = nn.BatchNorm2d(cout)
        self.shortcut = nn.Identity()
        if stride != (1, 1) or cin != cout:
            self.shortcut = nn.Sequential(
                nn.Conv2d(cin, cout, 1, stride=stride, bias=False), nn.BatchNorm2d(cout)
            )

    def forward(self, x):
        out = F.relu(self.bn1(self.conv1(x)))
        out = self.bn2(self.conv2(out))
        return F.relu(out + self.shortcut(x))


class ResNetExtractor(nn.Module):
    """``[B, C, L, F]`` features -> ``[B, embedding_dim]`` embeddings.

    Stage 1 halves F only; stages 2-4 halve both L and F.  Mean and standard
    deviation over the remaining frames are concatenated and projected.
    """

    def __init__(self, cfg: Optional[ExtractorConfig] = None):
        super().__init__()
        cfg = cfg or ExtractorConfig()
        if cfg.embedding_dim < 8:
            raise ValueError("embedding_dim must be at least 8")
        self.cfg = cfg
        widths = cfg.stage_widths()
        self.stem = nn.Sequential(
            nn.Conv2d(cfg.in_channels, widths[0], 3, padding=1, bias=False),
            nn.BatchNorm2d(widths[0]),
            nn.ReLU(),
        )
        stages = []
        cin = widths[0]
        freq = cfg.n_mels
        for i, (w, n) in enumerate(zip(widths, cfg.blocks)):
            stride = (1, 2) if i == 0 else (2, 2)
            layers = [BasicBlock(cin, w, stride)] + [BasicBlock(w, w) for _ in range(n - 1)]
            stages.append(nn.Sequential(*layers))
            cin = w
            freq = (freq + 1) // 2
        self.stages = nn.Sequential(*stages)
        self.time_factor = 2 ** (len(widths) - 1)
        pooled = 2 * cin * freq
        self.head = nn.Sequential(nn.Linear(pooled, cfg.embedding_dim), nn.BatchNorm1d(cfg.embedding_dim))

    def min_frames(self) -> int:
        return 2 * self.time_factor

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        if x.shape[1] != self.cfg.in_channels:
            raise DiffSVError(
                f"extractor expects {self.cfg.in_channels} channels, got {x.shape[1]}", code="shape-mismatch"
            )
        short = self.min_frames() - x.shape[2]
        if short > 0:
            x = F.pad(x, (0, 0, 0, short), mode="replicate")
        h = self.stages(self.stem(x))  # [B, C, L', F']
        b, c, length, freq = h.shape
        h = h.permute(0, 1, 3, 2).reshape(b, c * freq, length)
        mean = h.mean(dim=-1)
        std = torch.sqrt(h.var(dim=-1, unbiased=False).clamp(min=1e-5))
        emb = self.head(torch.cat([mean, std], dim=-1))
        if not torch.isfinite(emb).all():
            raise DiffSVError("embedding contains NaN or Inf", code="non-finite-activation")
        return emb


def extract_embedding(x_tilde: MelFeature, model: ResNetExtractor, training: bool = False):
    """Embed each batch item of ``x_tilde``; returns one :class:`SpeakerEmbedding` per item."""
    was_training = model.training
    model.train(training)
    dtype = next(model.parameters()).dtype
    try:
        with torch.set_grad_enabled(training):
            v = model(x_tilde.to_tensor(dtype))
    finally:
        model.train(was_training)
    return [SpeakerEmbedding(row) for row in v.detach().cpu().numpy()]
