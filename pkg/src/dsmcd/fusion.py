"""Cross-modal fusion: paired cross-attention between DSM and image features."""
from __future__ import annotations

import torch
import torch.nn.functional as F
from torch import nn

from .backbone import Attention, init_weights
from .errors import ConfigError


def group_norm(ch):
    groups = 8 if ch % 8 == 0 else 1
    return nn.GroupNorm(groups, ch)


class ConvUnit(nn.Sequential):
    """3x3 conv + GroupNorm + ReLU."""

    def __init__(self, in_ch, out_ch):
        super().__init__(nn.Conv2d(in_ch, out_ch, 3, padding=1), group_norm(out_ch), nn.ReLU())


def cross_attention(query_feats, kv_feats, attn: Attention):
    """Attend from ``query_feats`` to ``kv_feats``; both are ``(B, C, h, w)`` maps."""
    if query_feats.shape != kv_feats.shape:
        raise ConfigError(f"cross-attention inputs differ: {tuple(query_feats.shape)} vs {tuple(kv_feats.shape)}")
    B, C, h, w = query_feats.shape
    q = query_feats.flatten(2).transpose(1, 2)
    kv = kv_feats.flatten(2).transpose(1, 2)
    out = attn(q, (h, w), context=kv)
    return out.transpose(1, 2).reshape(B, C, h, w)


class CFM(nn.Module):
    """Fuse one pyramid level.

    ``a`` attends from DSM to image features and ``b`` from image to DSM
    features; ``concat(a, b)`` goes through a two-layer token MLP and a conv
    unit.  The previous (next-finer) fused level, when given, is projected with
    a 1x1 conv, average-pooled to this level's grid and added.
    """

    def __init__(self, dim, num_heads=1, sr_ratio=1, prev_dim=None):
        super().__init__()
        self.attn_h = Attention(dim, num_heads, sr_ratio)
        self.attn_i = Attention(dim, num_heads, sr_ratio)
        self.mlp = nn.Sequential(nn.Linear(2 * dim, dim), nn.GELU(), nn.Linear(dim, dim))
        self.conv = ConvUnit(dim, dim)
        self.prev_proj = nn.Conv2d(prev_dim, dim, 1) if prev_dim else None
        self.apply(init_weights)

    def attend(self, x_h, x_i):
        return cross_attention(x_h, x_i, self.attn_h), cross_attention(x_i, x_h, self.attn_i)

    def forward(self, x_h, x_i, f_prev=None):
        if x_h.shape != x_i.shape:
            raise ConfigError(f"misaligned modal features {tuple(x_h.shape)} vs {tuple(x_i.shape)}")
        a, b = self.attend(x_h, x_i)
        B, C, h, w = a.shape
        tokens = torch.cat([a, b], dim=1).flatten(2).transpose(1, 2)
        merged = self.mlp(tokens).transpose(1, 2).reshape(B, C, h, w)
        merged = self.conv(merged)
        if f_prev is None:
            return merged
        if self.prev_proj is None:
            raise ConfigError("this fusion level was built without a residual input")
        res = self.prev_proj(f_prev)
        if res.shape[-2:] != (h, w):
            res = F.adaptive_avg_pool2d(res, (h, w))
        return merged + res


class FusionPyramid(nn.Module):
    def __init__(self, embed_dims, num_heads, sr_ratios):
        super().__init__()
        self.levels = nn.ModuleList(
            CFM(d, nh, sr, prev_dim=embed_dims[i - 1] if i else None)
            for i, (d, nh, sr) in enumerate(zip(embed_dims, num_heads, sr_ratios))
        )

    def forward(self, feats_h, feats_i):
        fused = []
        prev = None
        for cfm, x_h, x_i in zip(self.levels, feats_h, feats_i):
            prev = cfm(x_h, x_i, prev)
            fused.append(prev)
        return fused
