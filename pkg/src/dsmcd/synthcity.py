"""Toy-city scene generator and change-label construction.

Scenes are flat ground at elevation 0 with axis-aligned rectangular buildings
of constant rooftop height.  Four building kinds are placed:

* stable      -- present in both periods with the same height
* demolished  -- present only in the pre period
* new         -- present only in the post period
* rebuilt     -- two overlapping footprints, one per period, different heights

Labels follow the product rule on ``dh * relevance`` together with the
period footprints (see :func:`generate_change_map`).
"""
from __future__ import annotations

from dataclasses import dataclass, field, asdict

import numpy as np
from scipy import ndimage

from .datapipe import BACKGROUND, DEMOLISHED, NEWLY_BUILT, SamplePair, make_sample
from .errors import ConfigError

MAX_FOOTPRINT_FRACTION = 0.8
_GAP = 2  # minimum free pixels between reserved building boxes
_MAX_TRIES = 2000

GROUND_ALBEDO = (0.52, 0.55, 0.45)


@dataclass(frozen=True)
class SceneConfig:
    width: int = 128
    height: int = 128
    num_buildings_pre: int = 4  # unchanged buildings present in both periods
    num_new: int = 3
    num_demolished: int = 2
    num_rebuilt: int = 1
    height_range: tuple = (4.0, 30.0)
    building_size: tuple = (12, 28)  # footprint side length range, pixels
    occlusion_rate: float = 0.0
    noise_sigma: float = 0.05
    seed: int = 0

    def __post_init__(self):
        if self.width <= 0 or self.height <= 0:
            raise ConfigError("scene width and height must be positive")
        counts = (self.num_buildings_pre, self.num_new, self.num_demolished, self.num_rebuilt)
        if any(c < 0 for c in counts):
            raise ConfigError("building counts must be non-negative")
        if not 0.0 <= self.occlusion_rate <= 1.0:
            raise ConfigError("occlusion_rate must lie in [0, 1]")
        lo, hi = self.height_range
        if not 0 < lo <= hi:
            raise ConfigError(f"invalid height_range {self.height_range}")
        if self.noise_sigma < 0:
            raise ConfigError("noise_sigma must be non-negative")
        if lo <= 6 * self.noise_sigma:
            raise ConfigError("height_range minimum must exceed 6 * noise_sigma to stay above the noise threshold")
        smin, smax = self.building_size
        if not 4 <= smin <= smax:
            raise ConfigError(f"invalid building_size {self.building_size}")

    @property
    def noise_threshold(self):
        return 3.0 * self.noise_sigma

    def to_dict(self):
        return asdict(self)

    @classmethod
    def from_dict(cls, d):
        d = dict(d)
        for key in ("height_range", "building_size"):
            if key in d:
                d[key] = tuple(d[key])
        return cls(**d)


@dataclass
class Footprint:
    kind: str  # stable | demolished | new | rebuilt
    pre_box: tuple | None  # (y0, x0, y1, x1), half-open
    post_box: tuple | None
    pre_height: float | None
    post_height: float | None
    occluded: bool = False


@dataclass
class Scene:
    dsm_pre: np.ndarray
    dsm_post: np.ndarray
    image_post: np.ndarray  # (3, H, W) uint8
    buildings_pre: np.ndarray
    buildings_post: np.ndarray
    relevance_mask: np.ndarray  # int8 in {-1, +1}
    config: SceneConfig
    footprints: list = field(default_factory=list)


@dataclass
class ChangeLabels:
    semantic: np.ndarray  # uint8 {0, 1, 2}
    height_change: np.ndarray  # float32 meters, zero outside labeled change
    raw_delta_h: np.ndarray  # float32 meters, unmasked


def _worst_case_area(cfg):
    side = cfg.building_size[1] + _GAP
    n = cfg.num_buildings_pre + cfg.num_new + cfg.num_demolished + cfg.num_rebuilt
    return n * side * side


def _place_box(rng, occupied, h, w, W, H):
    for _ in range(_MAX_TRIES):
        y0 = int(rng.integers(0, H - h + 1))
        x0 = int(rng.integers(0, W - w + 1))
        ys = slice(max(y0 - _GAP, 0), min(y0 + h + _GAP, H))
        xs = slice(max(x0 - _GAP, 0), min(x0 + w + _GAP, W))
        if not occupied[ys, xs].any():
            occupied[y0 : y0 + h, x0 : x0 + w] = True
            return (y0, x0, y0 + h, x0 + w)
    raise ConfigError("could not place all buildings; lower the counts or building_size")


def _split_rebuilt(rng, box):
    """Two overlapping sub-boxes of ``box`` sharing a band along one axis."""
    y0, x0, y1, x1 = box
    horizontal = bool(rng.integers(0, 2))
    lo, hi = (x0, x1) if horizontal else (y0, y1)
    n = hi - lo
    # old covers [lo, lo+a), new covers [lo+b, hi), with 1 <= b < a <= n-1
    a = int(rng.integers(n // 2 + 1, n))
    b = int(rng.integers(1, n // 2))
    if horizontal:
        old, new = (y0, x0, y1, x0 + a), (y0, x0 + b, y1, x1)
    else:
        old, new = (y0, x0, y0 + a, x1), (y0 + b, x0, y1, x1)
    if bool(rng.integers(0, 2)):
        old, new = new, old
    return old, new


def _truncated_noise(rng, shape, sigma):
    # |noise| < 1.5 sigma keeps per-pixel noise differences below the 3-sigma threshold
    if sigma == 0:
        return np.zeros(shape, dtype=np.float32)
    n = rng.normal(0.0, sigma, size=shape)
    return np.clip(n, -1.49 * sigma, 1.49 * sigma).astype(np.float32)


def hillshade(dsm, azimuth_deg=315.0, altitude_deg=45.0, cellsize=1.0):
    """Shaded-relief intensity in [0, 1] of an elevation grid."""
    dzdy, dzdx = np.gradient(np.asarray(dsm, dtype=np.float64), cellsize)
    zenith = np.radians(90.0 - altitude_deg)
    azimuth = np.radians((360.0 - azimuth_deg + 90.0) % 360.0)
    slope = np.arctan(np.hypot(dzdx, dzdy))
    aspect = np.arctan2(dzdy, -dzdx)
    shade = np.cos(zenith) * np.cos(slope) + np.sin(zenith) * np.sin(slope) * np.cos(azimuth - aspect)
    return np.clip(shade, 0.0, 1.0)


def _render_image(rng, dsm_post, post_boxes, H, W):
    shade = hillshade(dsm_post)
    shade = shade / max(np.cos(np.radians(45.0)), 1e-6)  # flat ground -> 1.0
    albedo = np.empty((3, H, W))
    for c in range(3):
        albedo[c] = GROUND_ALBEDO[c]
    for y0, x0, y1, x1 in post_boxes:
        albedo[:, y0:y1, x0:x1] = rng.uniform(0.2, 0.95, size=3)[:, None, None]
    texture = rng.normal(0.0, 0.03, size=(3, H, W))
    img = np.clip(albedo * shade[None] * 0.9 + texture, 0.0, 1.0)
    return np.rint(img * 255.0).astype(np.uint8)


def generate_scene(config: SceneConfig) -> Scene:
    """Procedurally generate a bi-temporal toy-city scene; deterministic in ``config.seed``."""
    cfg = config
    H, W = cfg.height, cfg.width
    if _worst_case_area(cfg) > MAX_FOOTPRINT_FRACTION * H * W:
        raise ConfigError(
            f"building footprints may cover more than {MAX_FOOTPRINT_FRACTION:.0%} of the scene"
        )
    rng = np.random.default_rng(cfg.seed)
    occupied = np.zeros((H, W), dtype=bool)
    smin, smax = cfg.building_size
    hmin, hmax = cfg.height_range

    def side():
        return int(rng.integers(smin, smax + 1))

    def height():
        return float(rng.uniform(hmin, hmax))

    footprints = []
    for kind, n in (
        ("rebuilt", cfg.num_rebuilt),
        ("stable", cfg.num_buildings_pre),
        ("demolished", cfg.num_demolished),
        ("new", cfg.num_new),
    ):
        for _ in range(n):
            box = _place_box(rng, occupied, side(), side(), W, H)
            if kind == "stable":
                h = height()
                footprints.append(Footprint(kind, box, box, h, h))
            elif kind == "demolished":
                footprints.append(Footprint(kind, box, None, height(), None))
            elif kind == "new":
                footprints.append(Footprint(kind, None, box, None, height()))
            else:
                old, new = _split_rebuilt(rng, box)
                h_old = height()
                min_gap = max(2.0, 6.0 * cfg.noise_sigma)
                while True:
                    h_new = height()
                    if abs(h_new - h_old) >= min_gap or hmax - hmin < min_gap:
                        break
                if abs(h_new - h_old) < min_gap:
                    h_new = h_old + min_gap
                footprints.append(Footprint(kind, old, new, h_old, h_new))

    # whole-building relevance flips; rebuilt pairs are exempt because a flip
    # there would label positive-dh pixels as demolished
    eligible = [i for i, f in enumerate(footprints) if f.kind in ("new", "demolished")]
    n_flip = int(round(cfg.occlusion_rate * len(eligible)))
    if n_flip:
        for i in rng.choice(eligible, size=n_flip, replace=False):
            footprints[int(i)].occluded = True

    dsm_pre = _truncated_noise(rng, (H, W), cfg.noise_sigma)
    dsm_post = _truncated_noise(rng, (H, W), cfg.noise_sigma)
    b_pre = np.zeros((H, W), dtype=bool)
    b_post = np.zeros((H, W), dtype=bool)
    relevance = np.ones((H, W), dtype=np.int8)
    for f in footprints:
        if f.pre_box is not None:
            y0, x0, y1, x1 = f.pre_box
            dsm_pre[y0:y1, x0:x1] += np.float32(f.pre_height)
            b_pre[y0:y1, x0:x1] = True
            if f.occluded:
                relevance[y0:y1, x0:x1] = -1
        if f.post_box is not None:
            y0, x0, y1, x1 = f.post_box
            dsm_post[y0:y1, x0:x1] += np.float32(f.post_height)
            b_post[y0:y1, x0:x1] = True
            if f.occluded:
                relevance[y0:y1, x0:x1] = -1

    post_boxes = [f.post_box for f in footprints if f.post_box is not None]
    image = _render_image(rng, dsm_post, post_boxes, H, W)
    return Scene(dsm_pre, dsm_post, image, b_pre, b_post, relevance, cfg, footprints)


def compute_height_change(dsm_pre, dsm_post) -> np.ndarray:
    """Per-pixel ``post - pre`` in meters."""
    pre = np.asarray(dsm_pre)
    post = np.asarray(dsm_post)
    if pre.shape != post.shape:
        raise ConfigError(f"DSM shape mismatch {pre.shape} vs {post.shape}")
    return (post.astype(np.float32) - pre.astype(np.float32)).astype(np.float32)


def generate_change_map(delta_h, relevance, buildings_pre, buildings_post, noise_threshold=0.0) -> ChangeLabels:
    """Label demolished / newly-built pixels from height change and period footprints.

    A pixel is demolished when ``dh * M < 0`` and it lies on a pre-period
    building, newly-built when ``dh * M > 0`` on a post-period building, and
    background otherwise.  ``|dh| < noise_threshold`` counts as ``dh = 0``.
    """
    dh = np.asarray(delta_h, dtype=np.float32)
    rel = np.asarray(relevance)
    bpre = np.asarray(buildings_pre, dtype=bool)
    bpost = np.asarray(buildings_post, dtype=bool)
    if not (dh.shape == rel.shape == bpre.shape == bpost.shape):
        raise ConfigError("generate_change_map: raster shapes disagree")
    if not np.isin(rel, (-1, 1)).all():
        raise ConfigError("relevance mask must only contain -1 and +1")

    effective = np.where(np.abs(dh) < noise_threshold, np.float32(0.0), dh)
    signed = effective * rel.astype(np.float32)
    semantic = np.full(dh.shape, BACKGROUND, dtype=np.uint8)
    semantic[(signed < 0) & bpre] = DEMOLISHED
    semantic[(signed > 0) & bpost] = NEWLY_BUILT
    height_change = np.where(semantic != BACKGROUND, dh, np.float32(0.0)).astype(np.float32)
    return ChangeLabels(semantic, height_change, dh.copy())


def label_scene(scene: Scene) -> ChangeLabels:
    dh = compute_height_change(scene.dsm_pre, scene.dsm_post)
    return generate_change_map(
        dh, scene.relevance_mask, scene.buildings_pre, scene.buildings_post, scene.config.noise_threshold
    )


def split_tiles(scene: Scene, labels: ChangeLabels, tile_size: int, keep_empty=True, prefix="") -> list[SamplePair]:
    """Cut a labeled scene into non-overlapping square tiles (row-major order)."""
    H, W = scene.dsm_pre.shape
    if tile_size <= 0 or H % tile_size or W % tile_size:
        raise ConfigError(f"tile_size {tile_size} does not divide scene size {H}x{W}")
    image = scene.image_post.astype(np.float32) / np.float32(255.0)
    tiles = []
    for r in range(H // tile_size):
        for c in range(W // tile_size):
            ys = slice(r * tile_size, (r + 1) * tile_size)
            xs = slice(c * tile_size, (c + 1) * tile_size)
            sem = labels.semantic[ys, xs]
            if not keep_empty and not np.any(sem != BACKGROUND):
                continue
            tiles.append(
                make_sample(
                    f"{prefix}r{r}c{c}",
                    scene.dsm_pre[ys, xs].copy(),
                    image[:, ys, xs].copy(),
                    sem.copy(),
                    labels.height_change[ys, xs].copy(),
                    scene.relevance_mask[ys, xs].copy(),
                )
            )
    return tiles


def _cumulative_table(values, edges):
    if values.size == 0:
        return [0.0] * (len(edges) - 1)
    counts, _ = np.histogram(values, bins=edges)
    return (np.cumsum(counts) / values.size).tolist()


def dataset_stats(tiles, num_bins=20) -> dict:
    """Changed-object/pixel statistics over labeled tiles.

    Objects are 4-connected components of each change class, counted per tile.
    The cumulative height table uses absolute height change in meters.
    """
    n_obj = {"newly_built": 0, "demolished": 0}
    n_pix = {"newly_built": 0, "demolished": 0}
    total = 0
    with_change = 0
    heights = {"newly_built": [], "demolished": []}
    for t in tiles:
        sem = np.asarray(t.gt_semantic)
        hgt = np.asarray(t.gt_height)
        total += sem.size
        if np.any(sem != BACKGROUND):
            with_change += 1
        for name, cls in (("newly_built", NEWLY_BUILT), ("demolished", DEMOLISHED)):
            m = sem == cls
            n_obj[name] += int(ndimage.label(m)[1])
            n_pix[name] += int(m.sum())
            heights[name].append(np.abs(hgt[m]).astype(np.float64))
    changed = n_pix["newly_built"] + n_pix["demolished"]
    all_h = {k: (np.concatenate(v) if v else np.zeros(0)) for k, v in heights.items()}
    hmax = max([float(v.max()) for v in all_h.values() if v.size] + [1.0])
    edges = np.linspace(0.0, hmax, num_bins + 1)
    return {
        "num_tiles": len(tiles),
        "changed_objects": n_obj,
        "changed_pixels": {**n_pix, "total": changed},
        "total_pixels": total,
        "changed_proportion": changed / total if total else 0.0,
        "tiles_with_change_fraction": with_change / len(tiles) if tiles else 0.0,
        "cumulative_height": {
            "bin_upper_edges_m": edges[1:].tolist(),
            "newly_built": _cumulative_table(all_h["newly_built"], edges),
            "demolished": _cumulative_table(all_h["demolished"], edges),
        },
    }
