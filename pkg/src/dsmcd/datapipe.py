"""Sample containers, label derivations, normalization and batching.

Rasters are numpy arrays. Single-channel grids are ``(H, W)``; imagery is
channel-first ``(3, H, W)``.  Class codes:

* semantic change: 0 background, 1 demolished, 2 newly-built
* pseudo change:   0 unchanged, 1 positive, 2 negative
"""
from __future__ import annotations

import warnings
from dataclasses import dataclass, field
from typing import Iterator, Sequence

import numpy as np

from .errors import ConfigError

BACKGROUND, DEMOLISHED, NEWLY_BUILT = 0, 1, 2
UNCHANGED, POSITIVE, NEGATIVE = 0, 1, 2

# semantic class -> pseudo class carrying the same change direction
SEMANTIC_TO_PSEUDO = {DEMOLISHED: NEGATIVE, NEWLY_BUILT: POSITIVE}


@dataclass(frozen=True)
class HeightScale:
    min_m: float
    max_m: float

    def __post_init__(self):
        if not self.min_m <= self.max_m:
            raise ConfigError(f"HeightScale requires min_m <= max_m, got {self.min_m} > {self.max_m}")

    def to_dict(self):
        return {"min_m": float(self.min_m), "max_m": float(self.max_m)}

    @classmethod
    def from_dict(cls, d):
        return cls(float(d["min_m"]), float(d["max_m"]))


@dataclass
class SamplePair:
    """One model input plus its ground-truth bundle."""

    id: str
    dsm_pre: np.ndarray  # (H, W) float32 meters
    image_post: np.ndarray  # (3, H, W) float32 in [0, 1]
    gt_semantic: np.ndarray  # (H, W) uint8
    gt_height: np.ndarray  # (H, W) float32 meters
    gt_pseudo: np.ndarray  # (H, W) uint8
    overlap_mask: np.ndarray  # (H, W) bool
    relevance: np.ndarray | None = None  # (H, W) int8 in {-1, +1}

    @property
    def shape(self):
        return self.dsm_pre.shape

    def has_change(self):
        return bool(np.any(self.gt_semantic != BACKGROUND))


def make_sample(id, dsm_pre, image_post, gt_semantic, gt_height, relevance=None) -> SamplePair:
    """Build a :class:`SamplePair`, deriving pseudo labels and the overlap mask."""
    dsm_pre = np.asarray(dsm_pre, dtype=np.float32)
    image_post = np.asarray(image_post, dtype=np.float32)
    gt_semantic = np.asarray(gt_semantic, dtype=np.uint8)
    gt_height = np.asarray(gt_height, dtype=np.float32)
    shape = dsm_pre.shape
    if image_post.shape != (3,) + shape or gt_semantic.shape != shape or gt_height.shape != shape:
        raise ConfigError(
            f"sample {id!r}: raster shapes disagree "
            f"(dsm {shape}, image {image_post.shape}, semantic {gt_semantic.shape}, height {gt_height.shape})"
        )
    pseudo = derive_pseudo_gt(gt_height)
    mask, _ = overlap_mask(gt_semantic, pseudo)
    if relevance is not None:
        relevance = np.asarray(relevance, dtype=np.int8)
    return SamplePair(id, dsm_pre, image_post, gt_semantic, gt_height, pseudo, mask, relevance)


def derive_pseudo_gt(gt_height) -> np.ndarray:
    """Hard sign thresholding of height change into pseudo-change classes."""
    h = np.asarray(gt_height)
    if np.isnan(h).any():
        raise ValueError("height map contains NaN")
    out = np.full(h.shape, UNCHANGED, dtype=np.uint8)
    out[h > 0] = POSITIVE
    out[h < 0] = NEGATIVE
    return out


def overlap_mask(gt_semantic, gt_pseudo):
    """Sign-coherent intersection of semantic and pseudo change supports.

    Returns ``(mask, rate)`` where ``rate = |mask| / |semantic != 0 or pseudo != 0|``.
    The rate is NaN when neither map contains change.
    """
    sem = np.asarray(gt_semantic)
    pse = np.asarray(gt_pseudo)
    if sem.shape != pse.shape:
        raise ConfigError(f"shape mismatch {sem.shape} vs {pse.shape}")
    mask = np.zeros(sem.shape, dtype=bool)
    for s_cls, p_cls in SEMANTIC_TO_PSEUDO.items():
        mask |= (sem == s_cls) & (pse == p_cls)
    union = int(np.count_nonzero((sem != 0) | (pse != 0)))
    rate = float(np.count_nonzero(mask)) / union if union else float("nan")
    return mask, rate


def normalize_height(h_meters, scale: HeightScale):
    """Affine map of ``[min_m, max_m]`` onto ``[-1, 1]``; out-of-range values clamp."""
    span = _span(scale)
    v = 2.0 * (np.asarray(h_meters, dtype=np.float64) - scale.min_m) / span - 1.0
    return np.clip(v, -1.0, 1.0)


def denormalize_height(v, scale: HeightScale):
    span = _span(scale)
    return scale.min_m + (np.asarray(v, dtype=np.float64) + 1.0) * 0.5 * span


def _span(scale):
    span = scale.max_m - scale.min_m
    if span <= 0:
        raise ConfigError(f"degenerate height scale {scale}")
    return span


def compute_normalization_stats(train_tiles: Sequence[SamplePair], coverage=0.995) -> HeightScale:
    """Symmetric-quantile interval of training height change covering ``coverage`` of pixels."""
    if not train_tiles:
        raise ConfigError("cannot compute normalization stats from an empty tile list")
    if not 0 < coverage <= 1:
        raise ConfigError(f"coverage must be in (0, 1], got {coverage}")
    values = np.concatenate([np.asarray(t.gt_height, dtype=np.float64).ravel() for t in train_tiles])
    tail = (1.0 - coverage) / 2.0
    lo, hi = np.quantile(values, [tail, 1.0 - tail])
    return HeightScale(float(lo), float(hi))


@dataclass(frozen=True)
class InputStats:
    dsm_mean: float
    dsm_std: float
    image_mean: tuple[float, float, float]
    image_std: tuple[float, float, float]

    def to_dict(self):
        return {
            "dsm_mean": self.dsm_mean,
            "dsm_std": self.dsm_std,
            "image_mean": list(self.image_mean),
            "image_std": list(self.image_std),
        }

    @classmethod
    def from_dict(cls, d):
        return cls(
            float(d["dsm_mean"]),
            float(d["dsm_std"]),
            tuple(float(x) for x in d["image_mean"]),
            tuple(float(x) for x in d["image_std"]),
        )


def compute_input_stats(train_tiles: Sequence[SamplePair]) -> InputStats:
    if not train_tiles:
        raise ConfigError("cannot compute input stats from an empty tile list")
    dsm = np.concatenate([t.dsm_pre.astype(np.float64).ravel() for t in train_tiles])
    img = np.concatenate([t.image_post.astype(np.float64).reshape(3, -1) for t in train_tiles], axis=1)
    return InputStats(
        float(dsm.mean()),
        float(dsm.std()),
        tuple(float(x) for x in img.mean(axis=1)),
        tuple(float(x) for x in img.std(axis=1)),
    )


def normalize_inputs(dsm_pre, image_post, input_stats: InputStats):
    """Standardize the DSM and each image channel with training-split statistics.

    ``image_post`` may be ``uint8`` in ``[0, 255]`` or float already scaled to ``[0, 1]``.
    Channels whose training std is zero are only mean-shifted.
    """
    dsm = np.asarray(dsm_pre, dtype=np.float64) - input_stats.dsm_mean
    if input_stats.dsm_std > 0:
        dsm = dsm / input_stats.dsm_std
    else:
        warnings.warn("DSM training std is zero; skipping scaling", RuntimeWarning, stacklevel=2)

    img = np.asarray(image_post)
    img = img.astype(np.float64) / 255.0 if img.dtype == np.uint8 else img.astype(np.float64)
    out = np.empty_like(img)
    for c in range(img.shape[0]):
        out[c] = img[c] - input_stats.image_mean[c]
        if input_stats.image_std[c] > 0:
            out[c] /= input_stats.image_std[c]
        else:
            warnings.warn(f"image channel {c} training std is zero; skipping scaling", RuntimeWarning, stacklevel=2)
    return dsm.astype(np.float32), out.astype(np.float32)


@dataclass
class Batch:
    ids: list
    dsm: np.ndarray  # (B, 1, H, W)
    image: np.ndarray  # (B, 3, H, W)
    semantic: np.ndarray  # (B, H, W) int64
    height_m: np.ndarray  # (B, H, W) float32 meters
    height_norm: np.ndarray | None  # (B, H, W) float32 in [-1, 1]
    pseudo: np.ndarray  # (B, H, W) int64
    overlap: np.ndarray  # (B, H, W) bool
    extras: dict = field(default_factory=dict)

    def __len__(self):
        return len(self.ids)


def make_batches(
    samples: Sequence[SamplePair],
    batch_size: int,
    shuffle_seed: int | None = None,
    *,
    height_scale: HeightScale | None = None,
    input_stats: InputStats | None = None,
) -> Iterator[Batch]:
    """Yield batches in dataset order, or in a seeded permutation.

    The final partial batch is kept.  When ``input_stats`` is given inputs are
    standardized; when ``height_scale`` is given normalized height targets are
    attached.
    """
    if batch_size < 1:
        raise ConfigError(f"batch_size must be >= 1, got {batch_size}")
    if not samples:
        raise ConfigError("cannot batch an empty dataset")
    order = np.arange(len(samples))
    if shuffle_seed is not None:
        order = np.random.default_rng(shuffle_seed).permutation(len(samples))
    for start in range(0, len(order), batch_size):
        chunk = [samples[i] for i in order[start : start + batch_size]]
        yield _collate(chunk, height_scale, input_stats)


def _collate(chunk, height_scale, input_stats):
    dsms, imgs = [], []
    for s in chunk:
        if input_stats is not None:
            d, im = normalize_inputs(s.dsm_pre, s.image_post, input_stats)
        else:
            d, im = s.dsm_pre, s.image_post
        dsms.append(d[None])
        imgs.append(im)
    height_m = np.stack([s.gt_height for s in chunk]).astype(np.float32)
    height_norm = None
    if height_scale is not None:
        height_norm = normalize_height(height_m, height_scale).astype(np.float32)
    return Batch(
        ids=[s.id for s in chunk],
        dsm=np.stack(dsms).astype(np.float32),
        image=np.stack(imgs).astype(np.float32),
        semantic=np.stack([s.gt_semantic for s in chunk]).astype(np.int64),
        height_m=height_m,
        height_norm=height_norm,
        pseudo=np.stack([s.gt_pseudo for s in chunk]).astype(np.int64),
        overlap=np.stack([s.overlap_mask for s in chunk]).astype(bool),
    )
