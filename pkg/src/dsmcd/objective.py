"""Training losses and the overlap-consistency functional."""
from __future__ import annotations

from dataclasses import dataclass, asdict

import torch
import torch.nn.functional as F

from .errors import ConfigError, NumericalError

PROB_FLOOR = 1e-7

# pseudo channel order (unchanged, positive, negative) rearranged to the
# semantic order (background, demolished, newly-built)
PSEUDO_TO_SEMANTIC_ORDER = (0, 2, 1)


@dataclass(frozen=True)
class LossWeights:
    pseudo: float = 0.2
    height: float = 0.2
    semantic: float = 0.6

    def __post_init__(self):
        ws = (self.pseudo, self.height, self.semantic)
        if any(w < 0 for w in ws) or not any(w > 0 for w in ws):
            raise ConfigError(f"loss weights must be non-negative with one positive, got {ws}")

    def to_dict(self):
        return asdict(self)


@dataclass(frozen=True)
class ClassWeights:
    background: float = 0.05
    demolished: float = 0.95
    newly_built: float = 0.95

    def __post_init__(self):
        ws = self.as_tuple()
        if any(w < 0 for w in ws) or not any(w > 0 for w in ws):
            raise ConfigError(f"class weights must be non-negative and not all zero, got {ws}")

    def as_tuple(self):
        return (self.background, self.demolished, self.newly_built)

    def to_dict(self):
        return asdict(self)


def weighted_ce(inputs, labels, weights: ClassWeights = ClassWeights(), from_logits=True):
    """Pixel-mean of ``w[label] * -log p[label]``.

    ``inputs`` is ``(B, 3, H, W)``: raw logits when ``from_logits`` (log-softmax,
    no floor) else per-pixel probabilities floored at 1e-7 before the log.
    """
    labels = labels.long()
    if labels.numel() and (labels.min() < 0 or labels.max() > 2):
        raise ConfigError("labels must be in {0, 1, 2}")
    if from_logits:
        logp = F.log_softmax(inputs, dim=1)
    else:
        logp = inputs.clamp(PROB_FLOOR, 1.0).log()
    picked = logp.gather(1, labels.unsqueeze(1)).squeeze(1)
    w = torch.as_tensor(weights.as_tuple(), dtype=inputs.dtype, device=inputs.device)[labels]
    return (-w * picked).mean()


def mse_height(pred_norm, gt_norm):
    if pred_norm.shape != gt_norm.shape:
        raise ConfigError(f"shape mismatch {tuple(pred_norm.shape)} vs {tuple(gt_norm.shape)}")
    return ((pred_norm - gt_norm) ** 2).mean()


def consistency(pred_psc, pred_sc, gt_overlap):
    """Mean L1 distance between paired class distributions over overlap pixels.

    ``pred_psc`` is pseudo-change probabilities (unchanged, positive, negative),
    ``pred_sc`` semantic probabilities (background, demolished, newly-built),
    ``gt_overlap`` a boolean ``(B, H, W)`` mask.  Returns 0 for an empty mask.
    """
    paired = pred_psc[:, list(PSEUDO_TO_SEMANTIC_ORDER)]
    dist = (paired - pred_sc).abs().sum(dim=1)
    mask = gt_overlap.to(dist.dtype)
    n = mask.sum()
    if n == 0:
        return (dist * mask).sum()
    return (dist * mask).sum() / n


def total_loss(l_pseudo=None, l_height=None, l_semantic=None, weights: LossWeights = LossWeights(),
               l_consistency=None, mu=0.0):
    """Fixed-weight multitask sum; ``None`` components contribute nothing."""
    total = 0.0
    for name, value, w in (
        ("pseudo", l_pseudo, weights.pseudo),
        ("height", l_height, weights.height),
        ("semantic", l_semantic, weights.semantic),
        ("consistency", l_consistency, mu),
    ):
        if value is None:
            continue
        v = torch.as_tensor(value).detach()
        if not torch.isfinite(v).all():
            raise NumericalError(f"non-finite {name} loss: {float(v)}")
        if w:
            total = total + w * value
    return total
