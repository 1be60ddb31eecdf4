"""Mean-shifted score-based denoiser.

Forward process (Ornstein-Uhlenbeck toward the enhanced feature ``x_hat``)::

    dz = 0.5 * (x_hat - z) * beta(t) dt + sqrt(beta(t)) dW

whose transition kernel is Gaussian with mean
``x_hat + (z0 - x_hat) * exp(-I(t) / 2)`` and variance ``1 - exp(-I(t))``,
``I(t)`` being the integral of ``beta`` over ``[0, t]``.  Sampling runs the
probability-flow ODE ``dz = 0.5 * (x_hat - z - score) * beta(t) dt`` backward
with explicit Euler steps.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Callable, Optional, Union

import torch
import torch.nn.functional as F
from torch import nn

from .errors import DiffSVError, SamplerDiverged

TimeLike = Union[float, torch.Tensor]
ScoreFn = Callable[[torch.Tensor, torch.Tensor, torch.Tensor], torch.Tensor]


@dataclass(frozen=True)
class NoiseSchedule:
    beta0: float = 0.05
    beta1: float = 20.0
    T: float = 1.0
    form: str = "linear"

    def __post_init__(self):
        if self.form != "linear":
            raise ValueError(f"unsupported schedule form {self.form!r}")
        if not (0.0 < self.beta0 <= self.beta1):
            raise ValueError(f"need 0 < beta0 <= beta1, got {self.beta0}, {self.beta1}")
        if self.T <= 0:
            raise ValueError(f"T must be positive, got {self.T}")

    def terminal_integral(self) -> float:
        return integral(self.T, self)

    def check_terminal(self, minimum: float = 9.0) -> None:
        """Terminal law must be close to N(x_hat, I): the integral of beta reaches ``minimum``."""
        if self.terminal_integral() < minimum:
            raise ValueError(
                f"integral of beta over [0, T] is {self.terminal_integral():.3f} < {minimum}; "
                "terminal distribution would not approach N(x_hat, I)"
            )


def _check_time(t: TimeLike, sched: NoiseSchedule) -> None:
    if isinstance(t, torch.Tensor):
        bad = bool(((t < 0) | (t > sched.T)).any())
    else:
        bad = not (0.0 <= t <= sched.T)
    if bad:
        raise DiffSVError(f"t must lie in [0, {sched.T}]", code="time-out-of-range")


def beta(t: TimeLike, sched: NoiseSchedule) -> TimeLike:
    _check_time(t, sched)
    return sched.beta0 + (sched.beta1 - sched.beta0) * t / sched.T


def integral(t: TimeLike, sched: NoiseSchedule) -> TimeLike:
    """Closed-form integral of ``beta`` over ``[0, t]``."""
    _check_time(t, sched)
    return sched.beta0 * t + 0.5 * (sched.beta1 - sched.beta0) * t * t / sched.T


def sigma(t: TimeLike, sched: NoiseSchedule) -> TimeLike:
    """Kernel standard deviation ``sqrt(1 - exp(-I(t)))``."""
    i = integral(t, sched)
    if isinstance(i, torch.Tensor):
        return torch.sqrt(-torch.expm1(-i))
    return math.sqrt(-math.expm1(-i))


def _expand(t: TimeLike, like: torch.Tensor) -> TimeLike:
    """Broadcast a per-item time vector ``[B]`` against ``like`` ``[B, ...]``."""
    if isinstance(t, torch.Tensor) and t.ndim == 1 and like.ndim > 1:
        return t.to(like.dtype).reshape(-1, *([1] * (like.ndim - 1)))
    return t


def kernel_moments(z0: torch.Tensor, x_hat: torch.Tensor, t: TimeLike, sched: NoiseSchedule):
    if z0.shape != x_hat.shape:
        raise DiffSVError(f"z0 {tuple(z0.shape)} vs x_hat {tuple(x_hat.shape)}", code="shape-mismatch")
    i = integral(t, sched)
    decay = torch.exp(-0.5 * i) if isinstance(i, torch.Tensor) else math.exp(-0.5 * i)
    d = _expand(decay, z0)
    mean = z0 * d + x_hat * (1 - d)  # exactly z0 at t = 0
    return mean, sigma(t, sched)


def sample_forward(z0, x_hat, t: TimeLike, eps: torch.Tensor, sched: NoiseSchedule) -> torch.Tensor:
    if eps.shape != z0.shape:
        raise DiffSVError(f"eps {tuple(eps.shape)} vs z0 {tuple(z0.shape)}", code="shape-mismatch")
    mean, std = kernel_moments(z0, x_hat, t, sched)
    return mean + _expand(std, z0) * eps


def score_matching_loss(
    estimator: ScoreFn,
    z0: torch.Tensor,
    x_hat: torch.Tensor,
    sched: NoiseSchedule,
    generator: Optional[torch.Generator] = None,
    t_min: float = 1e-4,
    t: Optional[torch.Tensor] = None,
    eps: Optional[torch.Tensor] = None,
    weighting: str = "none",
) -> torch.Tensor:
    """Denoising score matching toward the conditional score ``-eps / sigma_t``.

    ``t`` and ``eps`` are drawn per batch item from ``generator`` unless given.
    Squared errors are summed over every non-batch axis and averaged over the
    batch.  ``weighting="sigma2"`` scales each item by ``sigma_t ** 2``.
    """
    if t_min <= 0:
        raise DiffSVError("t_min must be positive (sigma_t vanishes at t = 0)", code="invalid-t-min")
    b = z0.shape[0]
    if t is None:
        u = torch.rand(b, generator=generator, dtype=z0.dtype, device=z0.device)
        t = t_min + (sched.T - t_min) * u
    if eps is None:
        eps = torch.randn(z0.shape, generator=generator, dtype=z0.dtype, device=z0.device)
    z_t = sample_forward(z0, x_hat, t, eps, sched)
    std = _expand(sigma(t, sched), z0)
    target = -eps / std
    err = (estimator(z_t, t, x_hat) - target).pow(2).reshape(b, -1).sum(dim=1)
    if weighting == "sigma2":
        err = err * std.reshape(-1) ** 2
    elif weighting != "none":
        raise ValueError(f"unknown weighting {weighting!r}")
    return err.mean()


def ode_denoise(
    x_hat: torch.Tensor,
    estimator: ScoreFn,
    steps: int,
    sched: NoiseSchedule,
    init: str = "mean",
    seed: Optional[int] = None,
    t_min: float = 1e-4,
) -> torch.Tensor:
    """Integrate the probability-flow ODE from ``T`` down to ``t_min`` with Euler steps.

    ``init="mean"`` starts at ``x_hat`` and draws no random numbers;
    ``init="seeded-gaussian"`` starts at ``x_hat + sigma_T * eps`` with ``eps``
    drawn from a generator seeded by ``seed``.
    """
    if steps < 1:
        raise ValueError("steps must be >= 1")
    if init == "mean":
        z = x_hat.clone()
    elif init == "seeded-gaussian":
        if seed is None:
            raise ValueError("seeded-gaussian init needs a seed")
        gen = torch.Generator(device=x_hat.device).manual_seed(int(seed))
        noise = torch.randn(x_hat.shape, generator=gen, dtype=x_hat.dtype, device=x_hat.device)
        z = x_hat + sigma(sched.T, sched) * noise
    else:
        raise ValueError(f"unknown init {init!r}")

    h = (sched.T - t_min) / steps
    for i in range(steps):
        t = sched.T - i * h
        tt = torch.full((x_hat.shape[0],), t, dtype=x_hat.dtype, device=x_hat.device)
        drift = 0.5 * beta(t, sched) * (x_hat - z - estimator(z, tt, x_hat))
        z = z - h * drift
        if not torch.isfinite(z).all():
            raise SamplerDiverged(i)
    return z


# ---------------------------------------------------------------------------
# U-Net score estimator


@dataclass
class ScoreNetConfig:
    base_width: int = 32
    dim_mults: tuple = (1, 2, 4)
    time_dim: int = 128
    groups: int = 8
    time_scale: float = 1000.0


class SinusoidalTimeEmbedding(nn.Module):
    def __init__(self, dim, scale=1000.0):
        super().__init__()
        self.dim = dim
        self.scale = scale

    def forward(self, t):
        half = self.dim // 2
        freqs = torch.exp(-math.log(10000.0) * torch.arange(half, dtype=t.dtype, device=t.device) / (half - 1))
        args = self.scale * t[:, None] * freqs[None, :]
        return torch.cat([args.sin(), args.cos()], dim=-1)


def _norm(channels, groups):
    return nn.GroupNorm(math.gcd(channels, groups), channels)


class ResBlock(nn.Module):
    def __init__(self, cin, cout, time_dim, groups):
        super().__init__()
        self.block1 = nn.Sequential(nn.Conv2d(cin, cout, 3, padding=1), _norm(cout, groups), nn.Mish())
        self.time = nn.Sequential(nn.Mish(), nn.Linear(time_dim, cout))
        self.block2 = nn.Sequential(nn.Conv2d(cout, cout, 3, padding=1), _norm(cout, groups), nn.Mish())
        self.skip = nn.Conv2d(cin, cout, 1) if cin != cout else nn.Identity()

    def forward(self, x, temb):
        h = self.block1(x) + self.time(temb)[:, :, None, None]
        return self.block2(h) + self.skip(x)


class ScoreUNet(nn.Module):
    """U-Net ``s(z_t, t, x_hat)`` over ``[B, 1, L, F]`` features.

    ``x_hat`` is concatenated with ``z_t`` on the channel axis; the time
    embedding is added inside every residual block.
    """

    def __init__(self, cfg: Optional[ScoreNetConfig] = None):
        super().__init__()
        cfg = cfg or ScoreNetConfig()
        self.cfg = cfg
        dims = [2] + [cfg.base_width * m for m in cfg.dim_mults]
        in_out = list(zip(dims[:-1], dims[1:]))
        self.factor = 2 ** (len(in_out) - 1)
        td, g = cfg.time_dim, cfg.groups

        self.time_mlp = nn.Sequential(
            SinusoidalTimeEmbedding(td, cfg.time_scale),
            nn.Linear(td, td * 2),
            nn.Mish(),
            nn.Linear(td * 2, td),
        )
        self.downs = nn.ModuleList()
        for i, (cin, cout) in enumerate(in_out):
            last = i == len(in_out) - 1
            self.downs.append(nn.ModuleList([
                ResBlock(cin, cout, td, g),
                ResBlock(cout, cout, td, g),
                nn.Conv2d(cout, cout, 3, stride=2, padding=1) if not last else nn.Identity(),
            ]))
        mid = dims[-1]
        self.mid1 = ResBlock(mid, mid, td, g)
        self.mid2 = ResBlock(mid, mid, td, g)
        self.ups = nn.ModuleList()
        for cin, cout in reversed(in_out[1:]):
            self.ups.append(nn.ModuleList([
                ResBlock(cout * 2, cin, td, g),
                ResBlock(cin, cin, td, g),
                nn.ConvTranspose2d(cin, cin, 4, stride=2, padding=1),
            ]))
        base = cfg.base_width
        self.final = nn.Sequential(nn.Conv2d(base, base, 3, padding=1), _norm(base, g), nn.Mish(),
                                   nn.Conv2d(base, 1, 1))

    def forward(self, z_t: torch.Tensor, t: TimeLike, x_hat: torch.Tensor) -> torch.Tensor:
        if z_t.shape != x_hat.shape:
            raise DiffSVError(f"z_t {tuple(z_t.shape)} vs x_hat {tuple(x_hat.shape)}", code="shape-mismatch")
        b, _, length, freq = z_t.shape
        if not isinstance(t, torch.Tensor):
            t = torch.tensor(float(t), dtype=z_t.dtype, device=z_t.device)
        t = t.to(z_t.dtype).reshape(-1).expand(b)
        pad_l = (-length) % self.factor
        pad_f = (-freq) % self.factor
        x = torch.cat([z_t, x_hat], dim=1)
        if pad_l or pad_f:
            x = F.pad(x, (0, pad_f, 0, pad_l), mode="replicate")

        temb = self.time_mlp(t)
        skips = []
        for res1, res2, down in self.downs:
            x = res2(res1(x, temb), temb)
            skips.append(x)
            x = down(x)
        x = self.mid2(self.mid1(x, temb), temb)
        for res1, res2, up in self.ups:
            x = up(res2(res1(torch.cat([x, skips.pop()], dim=1), temb), temb))
        return self.final(x)[:, :, :length, :freq]


def score_unet_forward(estimator: ScoreUNet, z_t, t, x_hat):
    return estimator(z_t, t, x_hat)
