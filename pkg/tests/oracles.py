"""Reference computations written independently of the package code.

Everything here is plain loops or textbook formulas so that agreement with the
vectorised implementations is meaningful.
"""

import math

import numpy as np


# -- features -----------------------------------------------------------------


def mel_centers_hz(n_mels, f_min, f_max):
    """Centre frequencies of an HTK mel filterbank, straight from the formula."""
    to_mel = lambda f: 2595.0 * math.log10(1.0 + f / 700.0)
    lo, hi = to_mel(f_min), to_mel(f_max)
    pts = [lo + (hi - lo) * k / (n_mels + 1) for k in range(n_mels + 2)]
    return [700.0 * (10 ** (m / 2595.0) - 1.0) for m in pts[1:-1]]


def snr_alpha_search(speech, noise, snr_db, lo=1e-6, hi=1e6, iters=200):
    """Bisection (in log space) for the noise gain hitting ``snr_db``."""
    ps = float(np.mean(np.square(speech)))
    pn = float(np.mean(np.square(noise)))
    for _ in range(iters):
        mid = math.sqrt(lo * hi)
        snr = 10 * math.log10(ps / (mid * mid * pn))
        if snr > snr_db:
            lo = mid
        else:
            hi = mid
    return math.sqrt(lo * hi)


# -- losses -------------------------------------------------------------------


def enhancement_loss_loop(x_hat, y):
    """x_hat, y: nested arrays [B, C, L, F]."""
    b = len(x_hat)
    total = 0.0
    for i in range(b):
        acc = 0.0
        for c in range(len(x_hat[i])):
            for l in range(len(x_hat[i][c])):
                for f in range(len(x_hat[i][c][l])):
                    d = float(y[i][c][l][f]) - float(x_hat[i][c][l][f])
                    acc += d * d
        total += acc
    return total / b


def mish_scalar(x):
    import mpmath

    mpmath.mp.dps = 40
    x = mpmath.mpf(x)
    return float(x * mpmath.tanh(mpmath.log1p(mpmath.e ** x)))


def aam_loss_loop(v, w, labels, s, m):
    """Scalar AAM-softmax over rows of ``v`` and class rows of ``w``."""
    total = 0.0
    for vi, ci in zip(v, labels):
        nv = math.sqrt(sum(a * a for a in vi))
        logits = []
        for j, wj in enumerate(w):
            nw = math.sqrt(sum(a * a for a in wj))
            cos = sum(a * b for a, b in zip(vi, wj)) / (nv * nw)
            cos = min(max(cos, -1 + 1e-7), 1 - 1e-7)
            if j == ci:
                theta = math.acos(cos)
                cos = math.cos(theta + m) if theta + m <= math.pi else cos - m * math.sin(m)
            logits.append(s * cos)
        top = max(logits)
        lse = top + math.log(sum(math.exp(z - top) for z in logits))
        total += lse - logits[ci]
    return total / len(v)


# -- diffusion ----------------------------------------------------------------


def beta_lin(t, b0, b1, T=1.0):
    return b0 + (b1 - b0) * t / T


def euler_maruyama(z0, x_hat, t_end, b0, b1, paths, dt, rng, T=1.0):
    """Simulate dz = 0.5 (x_hat - z) beta dt + sqrt(beta) dW from z0."""
    z = np.full(paths, float(z0))
    n = int(round(t_end / dt))
    for k in range(n):
        b = beta_lin(k * dt, b0, b1, T)
        z = z + 0.5 * (x_hat - z) * b * dt + math.sqrt(b * dt) * rng.standard_normal(paths)
    return z


def gaussian_flow(mu0, s0, x_hat, b0, b1, T=1.0):
    """Marginal mean/var of the forward process started from N(mu0, s0^2) and its score."""

    def I(t):
        return b0 * t + 0.5 * (b1 - b0) * t * t / T

    def mean(t):
        return x_hat + (mu0 - x_hat) * math.exp(-I(t) / 2)

    def var(t):
        return s0 * s0 * math.exp(-I(t)) + 1 - math.exp(-I(t))

    def score(z, t):
        return -(z - mean(t)) / var(t)

    return mean, var, score


def rk4_flow(z_T, x_hat, score, b0, b1, T, t_end, steps):
    """High-order reference for dz/dt = 0.5 beta (x_hat - z - score(z, t)), integrated T -> t_end."""
    f = lambda z, t: 0.5 * beta_lin(t, b0, b1, T) * (x_hat - z - score(z, t))
    h = (t_end - T) / steps
    z, t = float(z_T), T
    for _ in range(steps):
        k1 = f(z, t)
        k2 = f(z + 0.5 * h * k1, t + 0.5 * h)
        k3 = f(z + 0.5 * h * k2, t + 0.5 * h)
        k4 = f(z + h * k3, t + h)
        z += h / 6 * (k1 + 2 * k2 + 2 * k3 + k4)
        t += h
    return z


def simpson(f, a, b, n=2000):
    n += n % 2
    h = (b - a) / n
    acc = f(a) + f(b)
    for k in range(1, n):
        acc += (4 if k % 2 else 2) * f(a + k * h)
    return acc * h / 3


# -- metrics ------------------------------------------------------------------


def _operating_points(scores, labels):
    pts = []
    for th in sorted(set(scores)) + [math.inf]:
        miss = sum(1 for s, l in zip(scores, labels) if l == 1 and s < th)
        fa = sum(1 for s, l in zip(scores, labels) if l == 0 and s >= th)
        pts.append((miss / labels.count(1), fa / labels.count(0)))
    return pts


def eer_enumerate(scores, labels):
    """EER by enumerating every threshold and interpolating at the sign change."""
    scores, labels = [float(s) for s in scores], [int(l) for l in labels]
    pts = _operating_points(scores, labels)
    prev = None
    for pm, pf in pts:
        d = pm - pf
        if d >= 0:
            if d == 0 or prev is None:
                return pm
            pm0, pf0 = prev
            d0 = pm0 - pf0
            w = d0 / (d0 - d)
            return pm0 + w * (pm - pm0)
        prev = (pm, pf)
    raise AssertionError("unreachable: the last point always has p_miss = 1")


def min_dcf_enumerate(scores, labels, p_target, c_miss=1.0, c_fa=1.0):
    scores, labels = [float(s) for s in scores], [int(l) for l in labels]
    best = math.inf
    for pm, pf in _operating_points(scores, labels):
        best = min(best, c_miss * pm * p_target + c_fa * pf * (1 - p_target))
    return best / min(c_miss * p_target, c_fa * (1 - p_target))


# -- numerics -----------------------------------------------------------------


def fd_gradient_check(loss_fn, params, h=1e-6):
    """Worst norm-relative error between autograd and central differences.

    ``loss_fn()`` must be deterministic; ``params`` are float64 leaf tensors.
    Returns ``{name: rel_error}``.
    """
    import torch

    for p in params.values():
        p.grad = None
    loss_fn().backward()
    out = {}
    for name, p in params.items():
        analytic = (p.grad if p.grad is not None else torch.zeros_like(p)).detach().clone().reshape(-1)
        numeric = torch.zeros_like(analytic)
        flat = p.data.reshape(-1)
        with torch.no_grad():
            for k in range(flat.numel()):
                old = float(flat[k])
                flat[k] = old + h
                up = float(loss_fn().detach())
                flat[k] = old - h
                down = float(loss_fn().detach())
                flat[k] = old
                numeric[k] = (up - down) / (2 * h)
        denom = max(float(numeric.norm()), float(analytic.norm()))
        # structurally zero gradients (e.g. a bias feeding a normaliser) agree trivially
        out[name] = 0.0 if denom < 1e-8 else float((analytic - numeric).norm()) / denom
    return out
