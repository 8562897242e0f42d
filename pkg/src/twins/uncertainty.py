"""Aleatoric uncertainty from iteration-to-iteration fluctuations.

Residuals are modelled as zero-mean Laplace with per-pixel scale sigma; the
head maps squared pairwise differences of the iterative fields to log-sigma.
"""

import math
import warnings

import torch
import torch.nn as nn

from .errors import ConfigError, EmptyMaskWarning


def pairwise_fluctuations(fields):
    """Concatenate (X_i - X_j)^2 for all i < j; K fields of (B, 2, H, W) -> (B, K(K-1), H, W)."""
    k = len(fields)
    if k < 2:
        raise ConfigError(f"uncertainty needs at least 2 iterations, got {k}")
    return torch.cat([(fields[i] - fields[j]).pow(2) for i in range(k) for j in range(i + 1, k)], dim=1)


INPUT_FLOOR = 1e-6


class UncertaintyHead(nn.Module):
    """Three-layer pixel-wise MLP over pairwise fluctuations -> sigma = exp(clamped log-sigma).

    With ``log_inputs`` the MLP sees log(psi + 1e-6) instead of psi. Late
    iterates differ by ~1e-2 px, so raw squares sit near 1e-4 and the first
    layer cannot resolve them; the log spreads them over a usable range.
    """

    def __init__(self, iters, width=32, logsig_clamp=6.0, log_inputs=True):
        super().__init__()
        if iters < 2:
            raise ConfigError(f"uncertainty needs at least 2 iterations, got {iters}")
        self.iters = iters
        self.logsig_clamp = logsig_clamp
        self.log_inputs = log_inputs
        in_ch = iters * (iters - 1)
        self.mlp = nn.Sequential(
            nn.Conv2d(in_ch, width, 1),
            nn.GELU(),
            nn.Conv2d(width, width, 1),
            nn.GELU(),
            nn.Conv2d(width, 1, 1),
        )

    def forward(self, fields):
        if len(fields) != self.iters:
            raise ConfigError(f"head built for K={self.iters}, got {len(fields)} fields")
        x = pairwise_fluctuations(fields)
        if self.log_inputs:
            x = torch.log(x + INPUT_FLOOR)
        raw = self.mlp(x)[:, 0]
        return torch.exp(raw.clamp(-self.logsig_clamp, self.logsig_clamp))


def _valid_bool(valid, like):
    if valid is None:
        return torch.ones(like.shape, dtype=torch.bool, device=like.device)
    return valid > 0.5


def laplace_nll(pred, gt, sigma, valid=None):
    """Mean over valid pixels of log(2 sigma) + |pred - gt|_1 / sigma.

    pred, gt: (B, 2, H, W); sigma: (B, H, W). Invalid pixels never enter the
    computation, so their gt values cannot affect the result.
    """
    mask = _valid_bool(valid, sigma)
    if not mask.any():
        warnings.warn("laplace_nll over an empty mask; returning 0", EmptyMaskWarning, stacklevel=2)
        return sigma.sum() * 0.0
    residual = (pred.permute(0, 2, 3, 1)[mask] - gt.permute(0, 2, 3, 1)[mask]).abs().sum(-1)
    s = sigma[mask]
    return (torch.log(2 * s) + residual / s).mean()


def log_bin_centers(bins, clamp=6.0, dtype=torch.float32, device=None):
    width = 2 * clamp / bins
    return -clamp + width * (torch.arange(bins, dtype=dtype, device=device) + 0.5)


def soft_histogram(values, bins=32, clamp=6.0, hard=False):
    """Normalised histogram of positive values over log-spaced bins in [e^-clamp, e^clamp].

    Soft assignment uses a Gaussian kernel in log space with bandwidth equal to
    the bin width; ``hard=True`` assigns each value to its nearest bin centre.
    """
    centers = log_bin_centers(bins, clamp, values.dtype, values.device)
    logv = torch.log(values.clamp(math.exp(-clamp), math.exp(clamp)))
    dist = logv[:, None] - centers[None]
    if hard:
        w = torch.zeros_like(dist)
        w.scatter_(1, dist.abs().argmin(1, keepdim=True), 1.0)
    else:
        width = 2 * clamp / bins
        w = torch.softmax(-0.5 * (dist / width) ** 2, dim=1)
    return w.mean(0)


def kl_divergence(p, q, eps=1e-8):
    p = (p + eps) / (p + eps).sum()
    q = (q + eps) / (q + eps).sum()
    return (p * (torch.log(p) - torch.log(q))).sum()


def kl_alignment(sigma, residuals, valid=None, bins=32, clamp=6.0, hard=False, eps=1e-8):
    """KL(hist(residuals) || hist(sigma)) over valid pixels; residuals carry no gradient."""
    mask = _valid_bool(valid, sigma)
    if not mask.any():
        warnings.warn("kl_alignment over an empty mask; returning 0", EmptyMaskWarning, stacklevel=2)
        return sigma.sum() * 0.0
    hs = soft_histogram(sigma[mask], bins, clamp, hard)
    hr = soft_histogram(residuals[mask].detach(), bins, clamp, hard)
    return kl_divergence(hr, hs, eps)


def l1_residual(pred, gt):
    return (pred - gt).abs().sum(1)
