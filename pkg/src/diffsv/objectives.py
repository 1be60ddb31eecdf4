"""Speaker classification loss (additive angular margin softmax) and the joint sum."""

from __future__ import annotations

import math

import torch
import torch.nn.functional as F
from torch import nn

from .errors import DiffSVError, NonFiniteLoss

COS_CLAMP = 1e-7


class AamHead(nn.Module):
    """Class-weight matrix ``W`` ``[num_speakers, embedding_dim]`` with scale ``s`` and margin ``m``."""

    def __init__(self, num_speakers: int, embedding_dim: int, s: float = 30.0, m: float = 0.3):
        super().__init__()
        if num_speakers < 2:
            raise DiffSVError("AAM softmax needs at least two speakers", code="degenerate-corpus")
        if s <= 0:
            raise ValueError(f"scale must be positive, got {s}")
        if not 0.0 <= m < math.pi / 2:
            raise ValueError(f"margin must lie in [0, pi/2), got {m}")
        self.s = s
        self.m = m
        self.weight = nn.Parameter(torch.empty(num_speakers, embedding_dim))
        nn.init.xavier_normal_(self.weight, gain=1)

    def forward(self, v, labels):
        return aam_softmax_loss(v, labels, self.weight, self.s, self.m)

    def logits(self, v, labels):
        return aam_logits(v, labels, self.weight, self.s, self.m)


def aam_logits(v: torch.Tensor, labels: torch.Tensor, weight: torch.Tensor, s: float, m: float):
    """Scaled cosine logits with the target angle widened by ``m``.

    When ``theta + m`` would pass ``pi`` the target logit falls back to
    ``cos(theta) - m * sin(m)``.
    """
    num_speakers = weight.shape[0]
    if num_speakers < 2:
        raise DiffSVError("AAM softmax needs at least two speakers", code="degenerate-corpus")
    labels = torch.as_tensor(labels, dtype=torch.long, device=v.device)
    if labels.numel() and (labels.min() < 0 or labels.max() >= num_speakers):
        raise DiffSVError(f"labels must lie in [0, {num_speakers})", code="label-out-of-range")
    cosine = F.linear(F.normalize(v, dim=-1), F.normalize(weight, dim=-1))
    cosine = cosine.clamp(-1.0 + COS_CLAMP, 1.0 - COS_CLAMP)
    target_cos = cosine.gather(1, labels[:, None])
    theta = torch.acos(target_cos)
    widened = torch.where(theta + m <= math.pi, torch.cos(theta + m), target_cos - m * math.sin(m))
    logits = cosine.scatter(1, labels[:, None], widened)
    return s * logits


def aam_softmax_loss(v, labels, weight, s: float = 30.0, m: float = 0.3):
    logits = aam_logits(v, labels, weight, s, m)
    return F.cross_entropy(logits, torch.as_tensor(labels, dtype=torch.long, device=v.device))


def total_loss(l_enh=None, l_dif=None, l_spk=None):
    """Unweighted sum of the supplied components; ``None`` marks an ablated term."""
    total = 0.0
    for name, value in (("enh", l_enh), ("dif", l_dif), ("spk", l_spk)):
        if value is None:
            continue
        if not bool(torch.isfinite(torch.as_tensor(value)).all()):
            raise NonFiniteLoss(name, float(torch.as_tensor(value).detach().reshape(-1)[0]))
        total = total + value
    return total
