"""MLP decoder, the three prediction heads and the assembled change detector."""
from __future__ import annotations

from dataclasses import dataclass, asdict, field

import torch
import torch.nn.functional as F
from torch import nn

from .backbone import BackboneConfig, build_dual_backbone, init_weights
from .errors import ConfigError
from .fusion import FusionPyramid, group_norm

DEFAULT_TEMPERATURE = 0.5
SWEEP_TEMPERATURES = (0.05, 0.1, 0.5, 1.0)


def soft_threshold(x, t=DEFAULT_TEMPERATURE):
    """Differentiable surrogate of the sign function: ``2 * sigmoid(x / t) - 1``.

    Evaluated as ``tanh(x / (2t))``, the same function, which keeps the
    result exactly odd in floating point.
    """
    if not t > 0:
        raise ConfigError(f"temperature must be positive, got {t}")
    if not torch.is_tensor(x):
        x = torch.as_tensor(x, dtype=torch.float64)
    return torch.tanh(x / (2.0 * t))


def hard_threshold(x):
    x = torch.as_tensor(x)
    return torch.sign(x)


def pseudo_probabilities(s):
    """Map a scalar in (-1, 1) to (unchanged, positive, negative) probabilities."""
    return torch.stack([1.0 - s.abs(), F.relu(s), F.relu(-s)], dim=1)


class ResBlock(nn.Module):
    def __init__(self, ch):
        super().__init__()
        self.conv1 = nn.Conv2d(ch, ch, 3, padding=1)
        self.norm1 = group_norm(ch)
        self.conv2 = nn.Conv2d(ch, ch, 3, padding=1)
        self.norm2 = group_norm(ch)

    def forward(self, x):
        y = F.relu(self.norm1(self.conv1(x)))
        return F.relu(x + self.norm2(self.conv2(y)))


def upsample(x, size):
    return F.interpolate(x, size=size, mode="bilinear", align_corners=False)


class MLPDecoder(nn.Module):
    """Project each fused level to ``decode_dim``, upsample to stride 4, sum, refine."""

    def __init__(self, in_dims, decode_dim):
        super().__init__()
        self.proj = nn.ModuleList(nn.Conv2d(d, decode_dim, 1) for d in in_dims)
        self.refine = ResBlock(decode_dim)

    def forward(self, fused):
        if len(fused) != len(self.proj):
            raise ConfigError(f"decoder expects {len(self.proj)} levels, got {len(fused)}")
        size = fused[0].shape[-2:]
        out = 0
        for proj, f in zip(self.proj, fused):
            y = proj(f)
            if y.shape[-2:] != size:
                y = upsample(y, size)
            out = out + y
        return self.refine(out)


class Head(nn.Module):
    """1x1 reduce, bilinear x4, residual conv block, final 3x3 conv."""

    def __init__(self, decode_dim, hidden, out_ch, scale=4):
        super().__init__()
        self.scale = scale
        self.reduce = nn.Conv2d(decode_dim, hidden, 1)
        self.block = ResBlock(hidden)
        self.out = nn.Conv2d(hidden, out_ch, 3, padding=1)

    def init_output(self, std=1e-3):
        # near-zero outputs at init keep tanh/soft-threshold heads out of saturation
        nn.init.normal_(self.out.weight, 0.0, std)
        nn.init.zeros_(self.out.bias)

    def forward(self, x):
        h, w = x.shape[-2:]
        x = upsample(self.reduce(x), (h * self.scale, w * self.scale))
        return self.out(self.block(x))


def semantic_head(decode_feat, head: Head):
    return head(decode_feat)


def height_head(decode_feat, head: Head):
    return torch.tanh(head(decode_feat))


def pseudo_head(decode_feat, head: Head, t=DEFAULT_TEMPERATURE):
    s = soft_threshold(head(decode_feat), t)
    return s, pseudo_probabilities(s[:, 0])


@dataclass(frozen=True)
class ModelConfig:
    backbone: BackboneConfig = field(default_factory=BackboneConfig)
    decode_dim: int = 64
    head_hidden: int = 16
    temperature: float = DEFAULT_TEMPERATURE
    semantic: bool = True
    height: bool = True
    pseudo: bool = True
    share_weights: bool = False

    def __post_init__(self):
        if self.decode_dim <= 0 or self.head_hidden <= 0:
            raise ConfigError("decode_dim and head_hidden must be positive")
        if not self.temperature > 0:
            raise ConfigError(f"temperature must be positive, got {self.temperature}")
        if not (self.semantic or self.height or self.pseudo):
            raise ConfigError("at least one task head must be enabled")

    def to_dict(self):
        d = asdict(self)
        d["backbone"] = self.backbone.to_dict()
        return d

    @classmethod
    def from_dict(cls, d):
        d = dict(d)
        if "backbone" in d and isinstance(d["backbone"], dict):
            d["backbone"] = BackboneConfig.from_dict(d["backbone"])
        return cls(**d)


@dataclass
class ModelOutputs:
    sem_logits: torch.Tensor | None = None  # (B, 3, H, W)
    height_norm: torch.Tensor | None = None  # (B, 1, H, W)
    pseudo_probs: torch.Tensor | None = None  # (B, 3, H, W)
    pseudo_scalar: torch.Tensor | None = None  # (B, 1, H, W)


class ChangeDetector(nn.Module):
    def __init__(self, config: ModelConfig = ModelConfig()):
        super().__init__()
        self.config = config
        bb = config.backbone
        self.dsm_branch, self.image_branch = build_dual_backbone(bb, config.share_weights)
        self.fusion = FusionPyramid(bb.embed_dims, bb.num_heads, bb.sr_ratios)
        self.decoder = MLPDecoder(bb.embed_dims, config.decode_dim)
        scale = bb.patch_strides[0]
        make = lambda out: Head(config.decode_dim, config.head_hidden, out, scale)  # noqa: E731
        self.sem_head = make(3) if config.semantic else None
        self.height_head = make(1) if config.height else None
        self.pseudo_head = make(1) if config.pseudo else None
        for m in (self.decoder, self.sem_head, self.height_head, self.pseudo_head):
            if m is not None:
                m.apply(init_weights)
                if isinstance(m, Head):
                    m.init_output()

    def encode(self, dsm, image):
        if dsm.shape[-2:] != image.shape[-2:]:
            raise ConfigError(f"DSM {tuple(dsm.shape)} and image {tuple(image.shape)} sizes differ")
        return self.fusion(self.dsm_branch(dsm), self.image_branch(image))

    def forward(self, dsm, image) -> ModelOutputs:
        feat = self.decoder(self.encode(dsm, image))
        out = ModelOutputs()
        if self.sem_head is not None:
            out.sem_logits = semantic_head(feat, self.sem_head)
        if self.height_head is not None:
            out.height_norm = height_head(feat, self.height_head)
        if self.pseudo_head is not None:
            out.pseudo_scalar, out.pseudo_probs = pseudo_head(feat, self.pseudo_head, self.config.temperature)
        return out
