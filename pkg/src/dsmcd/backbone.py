"""Four-stage pyramid Transformer encoder with sequence-reduction attention.

Each stage is an overlapped patch embedding (strided conv + LayerNorm)
followed by pre-norm Transformer blocks.  Keys and values are computed from a
spatially reduced copy of the token grid (``sr_ratio`` x ``sr_ratio`` strided
projection + LayerNorm), which cuts attention cost by ``sr_ratio**2``.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, asdict

import torch
import torch.nn.functional as F
from torch import nn

from .errors import ConfigError


@dataclass(frozen=True)
class BackboneConfig:
    embed_dims: tuple = (32, 64, 160, 256)
    depths: tuple = (2, 2, 2, 2)
    num_heads: tuple = (1, 2, 5, 8)
    sr_ratios: tuple = (8, 4, 2, 1)
    patch_strides: tuple = (4, 2, 2, 2)
    mlp_ratio: float = 4.0

    def __post_init__(self):
        for name in ("embed_dims", "depths", "num_heads", "sr_ratios", "patch_strides"):
            if len(getattr(self, name)) != 4:
                raise ConfigError(f"{name} needs 4 entries")
        for d, h in zip(self.embed_dims, self.num_heads):
            if d % h:
                raise ConfigError(f"embed dim {d} not divisible by {h} heads")
        if any(r < 1 for r in self.sr_ratios):
            raise ConfigError("sr_ratios must be >= 1")

    @property
    def total_stride(self):
        return math.prod(self.patch_strides)

    @classmethod
    def tiny(cls):
        return cls(embed_dims=(8, 16, 32, 64), depths=(1, 1, 1, 1), num_heads=(1, 1, 2, 4))

    def to_dict(self):
        return asdict(self)

    @classmethod
    def from_dict(cls, d):
        return cls(**{k: tuple(v) if isinstance(v, list) else v for k, v in d.items()})


def init_weights(module):
    if isinstance(module, nn.Linear):
        nn.init.trunc_normal_(module.weight, std=0.02)
        if module.bias is not None:
            nn.init.zeros_(module.bias)
    elif isinstance(module, (nn.LayerNorm, nn.GroupNorm)):
        nn.init.ones_(module.weight)
        nn.init.zeros_(module.bias)
    elif isinstance(module, nn.Conv2d):
        fan_out = module.kernel_size[0] * module.kernel_size[1] * module.out_channels // module.groups
        nn.init.normal_(module.weight, 0.0, math.sqrt(2.0 / fan_out))
        if module.bias is not None:
            nn.init.zeros_(module.bias)


class Attention(nn.Module):
    """Multi-head scaled dot-product attention with key/value sequence reduction.

    ``forward(x, hw)`` is self-attention.  Passing ``context`` (a second token
    sequence on the same grid) turns it into cross-attention where queries come
    from ``x`` and keys/values from ``context``.
    """

    def __init__(self, dim, num_heads=1, sr_ratio=1, qkv_bias=True):
        super().__init__()
        if dim % num_heads:
            raise ConfigError(f"dim {dim} not divisible by {num_heads} heads")
        self.dim = dim
        self.num_heads = num_heads
        self.scale = (dim // num_heads) ** -0.5
        self.q = nn.Linear(dim, dim, bias=qkv_bias)
        self.k = nn.Linear(dim, dim, bias=qkv_bias)
        self.v = nn.Linear(dim, dim, bias=qkv_bias)
        self.sr_ratio = sr_ratio
        if sr_ratio > 1:
            self.sr = nn.Conv2d(dim, dim, kernel_size=sr_ratio, stride=sr_ratio)
            self.sr_norm = nn.LayerNorm(dim)

    def reduce(self, x, hw):
        if self.sr_ratio == 1:
            return x
        h, w = hw
        B, N, C = x.shape
        if h % self.sr_ratio or w % self.sr_ratio:
            raise ConfigError(f"grid {h}x{w} not divisible by sr_ratio {self.sr_ratio}")
        grid = x.transpose(1, 2).reshape(B, C, h, w)
        return self.sr_norm(self.sr(grid).flatten(2).transpose(1, 2))

    def attention_weights(self, x, hw, context=None):
        q, k, _ = self._qkv(x, hw, context)
        return torch.softmax(q @ k.transpose(-2, -1) * self.scale, dim=-1)

    def _qkv(self, x, hw, context):
        B, N, C = x.shape
        h, w = hw
        if N != h * w:
            raise ConfigError(f"sequence length {N} does not match grid {h}x{w}")
        src = x if context is None else context
        if src.shape != x.shape:
            raise ConfigError(f"query {tuple(x.shape)} and key/value {tuple(src.shape)} shapes differ")
        kv = self.reduce(src, hw)
        nh, dh = self.num_heads, C // self.num_heads
        q = self.q(x).reshape(B, N, nh, dh).transpose(1, 2)
        k = self.k(kv).reshape(B, -1, nh, dh).transpose(1, 2)
        v = self.v(kv).reshape(B, -1, nh, dh).transpose(1, 2)
        return q, k, v

    def forward(self, x, hw, context=None):
        q, k, v = self._qkv(x, hw, context)
        attn = torch.softmax(q @ k.transpose(-2, -1) * self.scale, dim=-1)
        out = attn @ v
        B, _, N, _ = out.shape
        return out.transpose(1, 2).reshape(B, N, self.dim)


def self_attention(x, hw, attn: Attention):
    return attn(x, hw)


class MixFFN(nn.Module):
    """Token MLP with a depthwise 3x3 conv between the two projections."""

    def __init__(self, dim, hidden):
        super().__init__()
        self.fc1 = nn.Linear(dim, hidden)
        self.dw = nn.Conv2d(hidden, hidden, 3, padding=1, groups=hidden)
        self.fc2 = nn.Linear(hidden, dim)

    def forward(self, x, hw):
        B, N, _ = x.shape
        x = self.fc1(x)
        x = self.dw(x.transpose(1, 2).reshape(B, -1, *hw)).flatten(2).transpose(1, 2)
        return self.fc2(F.gelu(x))


class Block(nn.Module):
    def __init__(self, dim, num_heads, sr_ratio, mlp_ratio):
        super().__init__()
        self.norm1 = nn.LayerNorm(dim)
        self.attn = Attention(dim, num_heads, sr_ratio)
        self.norm2 = nn.LayerNorm(dim)
        self.mlp = MixFFN(dim, int(dim * mlp_ratio))

    def forward(self, x, hw):
        x = x + self.attn(self.norm1(x), hw)
        return x + self.mlp(self.norm2(x), hw)


class PatchEmbed(nn.Module):
    def __init__(self, in_ch, dim, stride):
        super().__init__()
        kernel = 7 if stride == 4 else 3
        self.proj = nn.Conv2d(in_ch, dim, kernel, stride=stride, padding=kernel // 2)
        self.norm = nn.LayerNorm(dim)

    def forward(self, x):
        x = self.proj(x)
        hw = x.shape[-2:]
        return self.norm(x.flatten(2).transpose(1, 2)), tuple(hw)


class PyramidEncoder(nn.Module):
    """One modality branch: raster ``(B, in_ch, H, W)`` -> four feature maps."""

    def __init__(self, in_ch, config: BackboneConfig = BackboneConfig()):
        super().__init__()
        self.in_ch = in_ch
        self.config = config
        cfg = config
        self.embeds = nn.ModuleList()
        self.stages = nn.ModuleList()
        self.norms = nn.ModuleList()
        prev = in_ch
        for i in range(4):
            dim = cfg.embed_dims[i]
            self.embeds.append(PatchEmbed(prev, dim, cfg.patch_strides[i]))
            self.stages.append(
                nn.ModuleList(
                    Block(dim, cfg.num_heads[i], cfg.sr_ratios[i], cfg.mlp_ratio) for _ in range(cfg.depths[i])
                )
            )
            self.norms.append(nn.LayerNorm(dim))
            prev = dim
        self.apply(init_weights)

    def forward(self, x):
        H, W = x.shape[-2:]
        s = self.config.total_stride
        if H % s or W % s:
            raise ConfigError(f"input {H}x{W} not divisible by total stride {s}")
        if x.shape[1] != self.in_ch:
            raise ConfigError(f"expected {self.in_ch} input channels, got {x.shape[1]}")
        feats = []
        for embed, blocks, norm in zip(self.embeds, self.stages, self.norms):
            x, hw = embed(x)
            for blk in blocks:
                x = blk(x, hw)
            x = norm(x)
            x = x.transpose(1, 2).reshape(x.shape[0], -1, *hw)
            feats.append(x)
        return feats


def forward_branch(x, branch: PyramidEncoder):
    return branch(x)


class _Lift3(nn.Module):
    """Feeds a 1-channel raster to a shared 3-channel encoder."""

    def __init__(self, encoder):
        super().__init__()
        self.encoder = encoder

    def forward(self, x):
        if x.shape[1] == 1:
            x = x.expand(-1, 3, -1, -1)
        return self.encoder(x)


def build_dual_backbone(config: BackboneConfig = BackboneConfig(), share_weights=False):
    """Return ``(dsm_branch, image_branch)`` encoders.

    With ``share_weights`` both are the same 3-channel encoder and the DSM
    branch replicates its single channel.
    """
    if share_weights:
        enc = PyramidEncoder(3, config)
        return _Lift3(enc), enc
    return PyramidEncoder(1, config), PyramidEncoder(3, config)
