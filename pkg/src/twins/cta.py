"""Cross-task adapter: feeds GRU hidden states back into the parsing stream.

Two chained linear-attention stages per level. Contextual features query the
aligned hidden states to get geometric features G; G then queries the
contextual features to produce the fused features.
"""

import torch
import torch.nn as nn
import torch.nn.functional as F

from .errors import ConfigError, ContractError

CTA_MODES = ("linear", "identity", "add")


def elu_feature_map(x):
    """ELU(x) + 1, written as exp(x) on the negative side to avoid cancellation."""
    return torch.where(x > 0, x + 1, torch.exp(torch.clamp(x, max=0)))


def linear_attention_core(q, k, v, eps=1e-6):
    """Kernelised attention with phi = ELU + 1.

    q: (B, heads, N, d), k: (B, heads, M, d), v: (B, heads, M, dv).
    Returns (output, denominator) with output (B, heads, N, dv) and
    denominator (B, heads, N).
    """
    q = elu_feature_map(q)
    k = elu_feature_map(k)
    kv = torch.einsum("bhmd,bhme->bhde", k, v)
    num = torch.einsum("bhnd,bhde->bhne", q, kv)
    den = torch.einsum("bhnd,bhd->bhn", q, k.sum(dim=2)) + eps
    return num / den[..., None], den


class RMSNorm2d(nn.Module):
    def __init__(self, channels, eps=1e-6):
        super().__init__()
        self.weight = nn.Parameter(torch.ones(channels))
        self.eps = eps

    def forward(self, x):
        rms = torch.sqrt(x.pow(2).mean(1, keepdim=True) + self.eps)
        return x / rms * self.weight[:, None, None]


class LinearAttention(nn.Module):
    """MLP(RMSNorm(linear-attention(Q from query_src, K/V from kv_src))) + query_src."""

    def __init__(self, channels, heads=1, eps=1e-6, expansion=2, residual=True):
        super().__init__()
        if channels % heads:
            raise ConfigError(f"cta.heads={heads} must divide channels {channels}")
        self.heads = heads
        self.eps = eps
        self.residual = residual
        self.q = nn.Conv2d(channels, channels, 1)
        self.k = nn.Conv2d(channels, channels, 1)
        self.v = nn.Conv2d(channels, channels, 1)
        self.norm = RMSNorm2d(channels)
        self.mlp = nn.Sequential(
            nn.Conv2d(channels, expansion * channels, 1),
            nn.GELU(),
            nn.Conv2d(expansion * channels, channels, 1),
        )

    def _split(self, x):
        b, c, h, w = x.shape
        return x.reshape(b, self.heads, c // self.heads, h * w).transpose(2, 3)

    def attend(self, query_src, kv_src):
        """Raw attention output (B, C, H, W) before RMSNorm/MLP/residual."""
        if query_src.shape[:2] != kv_src.shape[:2]:
            raise ContractError(f"query {tuple(query_src.shape)} and kv {tuple(kv_src.shape)} differ in B or C")
        b, c, h, w = query_src.shape
        out, _ = linear_attention_core(
            self._split(self.q(query_src)), self._split(self.k(kv_src)), self._split(self.v(kv_src)), self.eps
        )
        return out.transpose(2, 3).reshape(b, c, h, w)

    def forward(self, query_src, kv_src, residual=None):
        out = self.mlp(self.norm(self.attend(query_src, kv_src)))
        if residual is None and self.residual:
            residual = query_src
        return out if residual is None else out + residual


class HiddenAligner(nn.Module):
    """Bilinear resize to each contextual stage, then 1x1 projection to C_i."""

    def __init__(self, hidden_width, channels):
        super().__init__()
        self.proj = nn.ModuleList(nn.Conv2d(hidden_width, c, 1) for c in channels[:3])

    def forward(self, hidden_levels, shapes):
        out = []
        for proj, h, shape in zip(self.proj, hidden_levels, shapes):
            if tuple(h.shape[-2:]) != tuple(shape):
                h = F.interpolate(h, size=tuple(shape), mode="bilinear", align_corners=False)
            out.append(proj(h))
        return out


class CrossTaskAdapter(nn.Module):
    """Fuses aligned hidden states into contextual stages 1-3; stage 4 passes through.

    ``mode``: "linear" (two-stage linear attention), "identity" (bypass) or
    "add" (element-wise addition baseline). ``residual_source`` selects what
    the second stage adds back: its own query ("query", i.e. G_i) or the
    contextual feature ("context").
    """

    def __init__(self, channels, hidden_width, heads=1, eps=1e-6, mode="linear", residual_source="query"):
        super().__init__()
        if mode not in CTA_MODES:
            raise ConfigError(f"cta mode must be one of {CTA_MODES}, got {mode!r}")
        if residual_source not in ("query", "context"):
            raise ConfigError(f"residual_source must be 'query' or 'context', got {residual_source!r}")
        self.mode = mode
        self.residual_source = residual_source
        self.align = HiddenAligner(hidden_width, channels)
        self.project = nn.ModuleList(LinearAttention(c, heads, eps) for c in channels[:3])
        self.fuse = nn.ModuleList(LinearAttention(c, heads, eps) for c in channels[:3])

    def forward(self, stages, hidden_levels):
        if self.mode == "identity":
            return list(stages)
        if len(stages) != 4 or len(hidden_levels) != 3:
            raise ContractError(f"expected 4 contextual stages and 3 hidden levels, got {len(stages)}/{len(hidden_levels)}")
        aligned = self.align(hidden_levels, [s.shape[-2:] for s in stages[:3]])
        fused = []
        for i in range(3):
            ctx = stages[i]
            if self.mode == "add":
                fused.append(ctx + aligned[i])
                continue
            g = self.project[i](ctx, aligned[i])
            res = g if self.residual_source == "query" else ctx
            fused.append(self.fuse[i](g, ctx, residual=res))
        fused.append(stages[3])
        return fused
