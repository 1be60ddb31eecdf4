"""Transformer front-end mapping noisy log-mel features to enhanced ones."""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Optional

import torch
from torch import nn

from .errors import DiffSVError, FeatureError
from .features import MelFeature


@dataclass
class EnhancerConfig:
    n_mels: int = 80
    hidden: int = 256
    num_blocks: int = 4
    num_heads: int = 4
    ff_width: int = 320
    dropout: float = 0.1
    activation: str = "gelu"


def mish(x):
    return x * torch.tanh(nn.functional.softplus(x))


def sinusoidal_positions(length: int, dim: int, dtype=torch.float32, device=None) -> torch.Tensor:
    pos = torch.arange(length, dtype=dtype, device=device)[:, None]
    div = torch.exp(torch.arange(0, dim, 2, dtype=dtype, device=device) * (-math.log(10000.0) / dim))
    pe = torch.zeros(length, dim, dtype=dtype, device=device)
    pe[:, 0::2] = torch.sin(pos * div)
    pe[:, 1::2] = torch.cos(pos * div[: dim // 2])
    return pe


class Enhancer(nn.Module):
    """Per-frame linear block (F -> H -> F, Mish, dropout) then pre-norm
    self-attention blocks over time, with a residual path from the input.

    Input and output are ``[B, 1, L, F]``.
    """

    def __init__(self, cfg: Optional[EnhancerConfig] = None):
        super().__init__()
        cfg = cfg or EnhancerConfig()
        if cfg.num_blocks < 1:
            raise ValueError("enhancer needs at least one transformer block")
        self.cfg = cfg
        self.linear_block = nn.Sequential(
            nn.Linear(cfg.n_mels, cfg.hidden),
            nn.Mish(),
            nn.Dropout(cfg.dropout),
            nn.Linear(cfg.hidden, cfg.n_mels),
        )
        self.blocks = nn.ModuleList(
            nn.TransformerEncoderLayer(
                d_model=cfg.n_mels,
                nhead=cfg.num_heads,
                dim_feedforward=cfg.ff_width,
                dropout=cfg.dropout,
                activation=cfg.activation,
                batch_first=True,
                norm_first=True,
            )
            for _ in range(cfg.num_blocks)
        )
        self.norm = nn.LayerNorm(cfg.n_mels)
        self.out = nn.Linear(cfg.n_mels, cfg.n_mels)

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        if not torch.isfinite(x).all():
            raise FeatureError("enhancer input contains NaN or Inf", code="non-finite-feature")
        b, c, length, freq = x.shape
        if c != 1:
            raise DiffSVError(f"enhancer expects one channel, got {c}", code="shape-mismatch")
        h = x[:, 0]
        h = self.linear_block(h) + sinusoidal_positions(length, freq, h.dtype, h.device)
        for block in self.blocks:
            h = block(h)
        return x + self.out(self.norm(h))[:, None]


def enhance(x: MelFeature, model: Enhancer, training: bool = False) -> MelFeature:
    """Run the enhancer on a ``[L, F, 1, B]`` feature."""
    if not torch.isfinite(torch.as_tensor(x.data)).all():
        raise FeatureError("enhancer input contains NaN or Inf", code="non-finite-feature")
    was_training = model.training
    model.train(training)
    dtype = next(model.parameters()).dtype
    try:
        with torch.set_grad_enabled(training):
            out = model(x.to_tensor(dtype))
    finally:
        model.train(was_training)
    return MelFeature.from_tensor(out, x.frame_hop_sec)


def enhancement_loss(x_hat: torch.Tensor, y: torch.Tensor) -> torch.Tensor:
    """Squared L2 distance summed over every non-batch axis, averaged over the batch."""
    if isinstance(x_hat, MelFeature):
        x_hat = x_hat.to_tensor(torch.float64)
    if isinstance(y, MelFeature):
        y = y.to_tensor(torch.float64)
    if x_hat.shape != y.shape:
        raise DiffSVError(f"x_hat {tuple(x_hat.shape)} vs y {tuple(y.shape)}", code="shape-mismatch")
    return (y - x_hat).pow(2).reshape(x_hat.shape[0], -1).sum(dim=1).mean()
