"""Semantic and height change metrics with mergeable dataset-level accumulators.

Semantic scores cover the two change classes only (background excluded) and
are reported as percentages.  Height scores are in meters, computed on
denormalized maps; the ``c``-prefixed ones use ground-truth changed pixels.
"""
from __future__ import annotations

import csv
import json
import math
from dataclasses import dataclass, asdict, field

import numpy as np

from .errors import ConfigError

CHANGE_CLASSES = (1, 2)  # demolished, newly-built
ZNCC_EPS = 1e-6
REL_MIN_HEIGHT = 0.1  # meters; smaller reference heights are excluded from cRel


# -- semantic ---------------------------------------------------------------

class Confusion:
    """3x3 confusion counts, rows = ground truth, columns = prediction."""

    def __init__(self, counts=None):
        self.counts = np.zeros((3, 3), dtype=np.int64) if counts is None else np.asarray(counts, dtype=np.int64)

    def update(self, pred, gt):
        pred = np.asarray(pred).ravel().astype(np.int64)
        gt = np.asarray(gt).ravel().astype(np.int64)
        if pred.shape != gt.shape:
            raise ConfigError("prediction and ground truth sizes differ")
        if pred.size and (min(pred.min(), gt.min()) < 0 or max(pred.max(), gt.max()) > 2):
            raise ConfigError("class maps must be in {0, 1, 2}")
        self.counts += np.bincount(gt * 3 + pred, minlength=9).reshape(3, 3)
        return self

    def __add__(self, other):
        return Confusion(self.counts + other.counts)

    @property
    def total(self):
        return int(self.counts.sum())

    def iou(self, cls):
        """IoU of one class as a fraction; NaN if absent from both maps."""
        tp = self.counts[cls, cls]
        union = self.counts[cls, :].sum() + self.counts[:, cls].sum() - tp
        return float(tp / union) if union else float("nan")


def _nanmean(values):
    vals = [v for v in values if not math.isnan(v)]
    return sum(vals) / len(vals) if vals else float("nan")


def iou_scores(confusion: Confusion):
    if confusion.total == 0:
        raise ConfigError("empty evaluation set")
    iou_d, iou_n = (100.0 * confusion.iou(c) for c in CHANGE_CLASSES)
    return iou_d, iou_n, _nanmean([iou_d, iou_n])


def confusion_and_iou(pred_classes, gt_classes):
    """Return ``(iou_d, iou_n, miou)`` in percent for one pair of class maps."""
    return iou_scores(Confusion().update(pred_classes, gt_classes))


def f1_from_iou(ious_percent):
    """Macro F1 (percent) from per-class IoUs (percent), via Dice = 2 IoU / (1 + IoU)."""
    dice = [2 * (i / 100) / (1 + i / 100) for i in ious_percent if not math.isnan(i)]
    return 100.0 * sum(dice) / len(dice) if dice else float("nan")


def f1_from_confusion(confusion: Confusion):
    return f1_from_iou([100.0 * confusion.iou(c) for c in CHANGE_CLASSES])


# -- height -----------------------------------------------------------------

@dataclass
class _Moments:
    """Count, means, centered second moments and co-moment; merged with Chan's update."""

    n: int = 0
    mean_r: float = 0.0
    mean_e: float = 0.0
    m2_r: float = 0.0
    m2_e: float = 0.0
    c_re: float = 0.0

    @classmethod
    def of(cls, r, e):
        n = r.size
        if n == 0:
            return cls()
        mr, me = r.mean(), e.mean()
        dr, de = r - mr, e - me
        return cls(n, float(mr), float(me), float(dr @ dr), float(de @ de), float(dr @ de))

    def __add__(self, o):
        if o.n == 0:
            return _Moments(**asdict(self))
        if self.n == 0:
            return _Moments(**asdict(o))
        n = self.n + o.n
        dr = o.mean_r - self.mean_r
        de = o.mean_e - self.mean_e
        f = self.n * o.n / n
        return _Moments(
            n,
            self.mean_r + dr * o.n / n,
            self.mean_e + de * o.n / n,
            self.m2_r + o.m2_r + dr * dr * f,
            self.m2_e + o.m2_e + de * de * f,
            self.c_re + o.c_re + dr * de * f,
        )


@dataclass
class HeightAccumulator:
    n: int = 0
    sse: float = 0.0
    sae: float = 0.0
    c_sse: float = 0.0
    rel_n: int = 0
    rel_sum: float = 0.0
    moments: _Moments = field(default_factory=_Moments)

    def update(self, pred_m, gt_m, change_mask):
        pred = np.asarray(pred_m, dtype=np.float64).ravel()
        gt = np.asarray(gt_m, dtype=np.float64).ravel()
        mask = np.asarray(change_mask, dtype=bool).ravel()
        if not (pred.shape == gt.shape == mask.shape):
            raise ConfigError("height metric inputs differ in size")
        err = gt - pred
        self.n += err.size
        self.sse += float(err @ err)
        self.sae += float(np.abs(err).sum())
        ce = err[mask]
        self.c_sse += float(ce @ ce)
        gr = gt[mask]
        ok = np.abs(gr) >= REL_MIN_HEIGHT
        self.rel_n += int(ok.sum())
        self.rel_sum += float((np.abs(ce[ok]) / np.abs(gr[ok])).sum())
        self.moments = self.moments + _Moments.of(gr, pred[mask])
        return self

    def __add__(self, o):
        return HeightAccumulator(
            self.n + o.n, self.sse + o.sse, self.sae + o.sae, self.c_sse + o.c_sse,
            self.rel_n + o.rel_n, self.rel_sum + o.rel_sum, self.moments + o.moments,
        )

    def result(self):
        """``(rmse, mae, crmse, crel, czncc)``; undefined entries are ``None``."""
        if self.n == 0:
            raise ConfigError("empty evaluation set")
        rmse = math.sqrt(self.sse / self.n)
        mae = self.sae / self.n
        m = self.moments
        if m.n == 0:
            return rmse, mae, None, None, None
        crmse = math.sqrt(self.c_sse / m.n)
        crel = self.rel_sum / self.rel_n if self.rel_n else None
        sd_r = math.sqrt(m.m2_r / m.n) + ZNCC_EPS
        sd_e = math.sqrt(m.m2_e / m.n) + ZNCC_EPS
        czncc = (m.c_re / m.n) / (sd_r * sd_e)
        return rmse, mae, crmse, crel, czncc


def height_metrics(pred_m, gt_m, change_mask):
    return HeightAccumulator().update(pred_m, gt_m, change_mask).result()


# -- reports ----------------------------------------------------------------

SEMANTIC_FIELDS = ("iou_d", "iou_n", "miou", "f1")
HEIGHT_FIELDS = ("rmse", "mae", "crmse", "crel", "czncc")


@dataclass
class MetricReport:
    iou_d: float | None = None
    iou_n: float | None = None
    miou: float | None = None
    f1: float | None = None
    rmse: float | None = None
    mae: float | None = None
    crmse: float | None = None
    crel: float | None = None
    czncc: float | None = None
    mparams: float | None = None

    @classmethod
    def from_accumulators(cls, confusion=None, heights=None, mparams=None):
        rep = cls(mparams=mparams)
        if confusion is not None:
            rep.iou_d, rep.iou_n, rep.miou = (_none_if_nan(v) for v in iou_scores(confusion))
            rep.f1 = _none_if_nan(f1_from_confusion(confusion))
        if heights is not None:
            rep.rmse, rep.mae, rep.crmse, rep.crel, rep.czncc = heights.result()
        return rep

    def to_dict(self):
        return asdict(self)

    def to_json(self, path=None):
        text = json.dumps(self.to_dict(), indent=2)
        if path is not None:
            with open(path, "w") as fh:
                fh.write(text + "\n")
        return text

    @classmethod
    def from_dict(cls, d):
        return cls(**{k: d.get(k) for k in cls.__dataclass_fields__})


def _none_if_nan(v):
    return None if v is None or (isinstance(v, float) and math.isnan(v)) else v


def count_parameters(model):
    return sum(p.numel() for p in model.parameters() if p.requires_grad)


def count_params(model):
    """Learnable parameters in millions."""
    return count_parameters(model) / 1e6


def height_histogram(pred_m, gt_m, bins=50, value_range=None):
    """Frequency tables of predicted and reference heights on shared bin edges."""
    if bins < 1:
        raise ConfigError("bins must be >= 1")
    pred = np.asarray(pred_m, dtype=np.float64).ravel()
    gt = np.asarray(gt_m, dtype=np.float64).ravel()
    if value_range is None:
        both = np.concatenate([pred, gt])
        lo, hi = (float(both.min()), float(both.max())) if both.size else (0.0, 1.0)
        if lo == hi:
            lo, hi = lo - 0.5, hi + 0.5
        value_range = (lo, hi)
    edges = np.linspace(value_range[0], value_range[1], bins + 1)
    # out-of-range values land in the end bins so totals equal the pixel count
    p = np.histogram(np.clip(pred, edges[0], edges[-1]), bins=edges)[0]
    g = np.histogram(np.clip(gt, edges[0], edges[-1]), bins=edges)[0]
    return {"edges": edges.tolist(), "pred": p.tolist(), "gt": g.tolist()}


def write_histogram_csv(path, hist):
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["bin_lo", "bin_hi", "pred_count", "gt_count"])
        edges = hist["edges"]
        for i, (p, g) in enumerate(zip(hist["pred"], hist["gt"])):
            w.writerow([repr(float(edges[i])), repr(float(edges[i + 1])), p, g])


def read_histogram_csv(path):
    edges, pred, gt = [], [], []
    with open(path, newline="") as fh:
        for row in csv.DictReader(fh):
            if not edges:
                edges.append(float(row["bin_lo"]))
            edges.append(float(row["bin_hi"]))
            pred.append(int(row["pred_count"]))
            gt.append(int(row["gt_count"]))
    return {"edges": edges, "pred": pred, "gt": gt}
