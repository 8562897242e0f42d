"""Simplified query-based mask decoder for semantic segmentation."""

from dataclasses import dataclass

import torch
import torch.nn as nn
import torch.nn.functional as F

from .errors import ConfigError, DataError


@dataclass
class SegmentationOutput:
    per_pixel_logits: torch.Tensor  # (B, num_classes, H, W)
    per_query_masks: torch.Tensor  # (B, Nq, H, W), sigmoid probabilities
    per_query_classes: torch.Tensor  # (B, Nq, num_classes + 1), logits; last slot = no-object
    mask_logits: torch.Tensor  # (B, Nq, H, W), pre-sigmoid


def semantic_aggregate(class_logits, masks):
    """Probability-weighted mask sum: sum_q softmax(class)_qc * mask_q (no-object slot dropped)."""
    probs = class_logits.softmax(-1)[..., :-1]
    return torch.einsum("bqc,bqhw->bchw", probs, masks)


class PixelDecoder(nn.Module):
    """Top-down FPN over the four stages; returns per-level maps (coarse to fine) and the 1/4 embedding."""

    def __init__(self, channels, dim):
        super().__init__()
        self.lateral = nn.ModuleList(nn.Conv2d(c, dim, 1) for c in channels)
        self.output = nn.ModuleList(nn.Conv2d(dim, dim, 3, padding=1) for _ in channels)
        self.embed = nn.Conv2d(dim, dim, 1)

    def forward(self, stages):
        x = self.lateral[3](stages[3])
        outs = [self.output[3](x)]
        for i in (2, 1, 0):
            x = self.lateral[i](stages[i]) + F.interpolate(x, size=stages[i].shape[-2:], mode="nearest")
            outs.append(F.gelu(self.output[i](x)))
        return outs, self.embed(outs[-1])


class QueryLayer(nn.Module):
    def __init__(self, dim, heads):
        super().__init__()
        self.cross = nn.MultiheadAttention(dim, heads, batch_first=True)
        self.norm1 = nn.LayerNorm(dim)
        self.self_attn = nn.MultiheadAttention(dim, heads, batch_first=True)
        self.norm2 = nn.LayerNorm(dim)
        self.ffn = nn.Sequential(nn.Linear(dim, 2 * dim), nn.GELU(), nn.Linear(2 * dim, dim))
        self.norm3 = nn.LayerNorm(dim)

    def forward(self, q, memory):
        q = self.norm1(q + self.cross(q, memory, memory, need_weights=False)[0])
        q = self.norm2(q + self.self_attn(q, q, q, need_weights=False)[0])
        return self.norm3(q + self.ffn(q))


class MaskDecoder(nn.Module):
    def __init__(self, channels, num_classes, num_queries=None, dim=128, heads=4):
        super().__init__()
        num_queries = num_queries or 2 * num_classes
        if num_queries < num_classes:
            raise ConfigError(f"decoder.num_queries={num_queries} must be >= num_classes={num_classes}")
        if dim % heads:
            raise ConfigError(f"decoder.dim={dim} must be divisible by {heads} heads")
        self.num_classes = num_classes
        self.num_queries = num_queries
        self.pixel = PixelDecoder(channels, dim)
        self.queries = nn.Parameter(torch.randn(num_queries, dim) * 0.02)
        self.level_embed = nn.Parameter(torch.zeros(3, dim))
        self.layers = nn.ModuleList(QueryLayer(dim, heads) for _ in range(3))
        self.class_head = nn.Linear(dim, num_classes + 1)
        self.mask_head = nn.Sequential(nn.Linear(dim, dim), nn.GELU(), nn.Linear(dim, dim))

    def forward(self, fused_stages, image_size):
        levels, pixel_embed = self.pixel(fused_stages)
        b = pixel_embed.shape[0]
        q = self.queries.unsqueeze(0).expand(b, -1, -1)
        # levels[1:] are 1/16, 1/8, 1/4: successively finer memories
        for i, layer in enumerate(self.layers):
            mem = levels[i + 1].flatten(2).transpose(1, 2) + self.level_embed[i]
            q = layer(q, mem)
        class_logits = self.class_head(q)
        mask_logits = torch.einsum("bqd,bdhw->bqhw", self.mask_head(q), pixel_embed)
        mask_logits = F.interpolate(mask_logits, size=tuple(image_size), mode="bilinear", align_corners=False)
        masks = mask_logits.sigmoid()
        return SegmentationOutput(semantic_aggregate(class_logits, masks), masks, class_logits, mask_logits)


def greedy_class_matching(class_logits, mask_logits, gt_masks, present):
    """Greedily pair each present class with its cheapest unused query.

    class_logits (Nq, C+1), mask_logits (Nq, h, w), gt_masks (C, h, w) float.
    Returns a list of (query, class) pairs.
    """
    probs = class_logits.softmax(-1)
    pm = mask_logits.flatten(1)
    gm = gt_masks.flatten(1)
    # mean binary cross-entropy between every query mask and every class mask
    pos = F.softplus(-pm) @ gm.T
    neg = F.softplus(pm) @ (1 - gm).T
    bce = (pos + neg) / pm.shape[1]
    cost = bce - probs[:, :-1]
    pairs = []
    classes = list(present)
    used = torch.zeros(cost.shape[0], dtype=torch.bool)
    cost = cost[:, classes].clone()
    for _ in range(len(classes)):
        cost[used] = float("inf")
        flat = int(torch.argmin(cost))
        qi, ci = divmod(flat, cost.shape[1])
        pairs.append((qi, classes[ci]))
        used[qi] = True
        cost[:, ci] = float("inf")
    return pairs


def seg_loss(out: SegmentationOutput, gt, num_classes=None, no_object_weight=0.1):
    """Pixel cross-entropy on the aggregated logits plus matched per-query mask/class losses."""
    num_classes = num_classes or out.per_pixel_logits.shape[1]
    if gt.min() < 0 or gt.max() >= num_classes:
        raise DataError(f"ground-truth classes outside [0, {num_classes})")
    ce = F.cross_entropy(out.per_pixel_logits, gt)

    b, nq = out.mask_logits.shape[:2]
    cls_weight = torch.ones(num_classes + 1, device=gt.device, dtype=out.per_query_classes.dtype)
    cls_weight[-1] = no_object_weight
    mask_terms, cls_terms = [], []
    for i in range(b):
        onehot = F.one_hot(gt[i], num_classes).permute(2, 0, 1).to(out.mask_logits.dtype)
        present = torch.nonzero(onehot.flatten(1).sum(1) > 0).flatten().tolist()
        with torch.no_grad():
            pairs = greedy_class_matching(out.per_query_classes[i], out.mask_logits[i], onehot, present)
        target_cls = torch.full((nq,), num_classes, dtype=torch.long, device=gt.device)
        for qi, ci in pairs:
            target_cls[qi] = ci
        cls_terms.append(F.cross_entropy(out.per_query_classes[i], target_cls, weight=cls_weight))
        if pairs:
            qs = torch.tensor([p[0] for p in pairs], device=gt.device)
            cs = torch.tensor([p[1] for p in pairs], device=gt.device)
            mask_terms.append(F.binary_cross_entropy_with_logits(out.mask_logits[i, qs], onehot[cs]))
    aux = torch.stack(cls_terms).mean()
    if mask_terms:
        aux = aux + torch.stack(mask_terms).mean()
    return ce + aux, {"seg_ce": ce.detach(), "seg_aux": aux.detach()}
