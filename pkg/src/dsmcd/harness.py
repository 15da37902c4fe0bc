"""Experiment orchestration: dataset generation, training, evaluation, ablation, temperature sweep."""
from __future__ import annotations

import json
import logging
import math
import random
from dataclasses import dataclass, field, asdict, replace
from pathlib import Path
from typing import Protocol

import numpy as np
import torch

from . import storage
from .datapipe import (
    BACKGROUND, HeightScale, compute_input_stats, compute_normalization_stats, denormalize_height, make_batches,
)
from .decoder import SWEEP_TEMPERATURES, ChangeDetector, ModelConfig
from .errors import ConfigError, NumericalError
from .metrics import (
    HEIGHT_FIELDS, SEMANTIC_FIELDS, Confusion, HeightAccumulator, MetricReport, count_params, height_histogram,
    write_histogram_csv,
)
from .objective import ClassWeights, LossWeights, consistency, mse_height, total_loss, weighted_ce
from .synthcity import SceneConfig, dataset_stats, generate_scene, label_scene, split_tiles

log = logging.getLogger(__name__)

DEFAULT_SPLITS = (0.68, 0.08, 0.24)
NORMALIZATION_COVERAGE = 0.995
MISSING = "−"  # cell marker for metrics a run does not produce


# -- configuration ----------------------------------------------------------

@dataclass(frozen=True)
class DatasetConfig:
    num_scenes: int = 20
    tile_size: int = 128
    splits: tuple = DEFAULT_SPLITS  # train, val, test fractions
    keep_empty: bool = True
    scene: SceneConfig = field(default_factory=SceneConfig)

    def __post_init__(self):
        if self.num_scenes < 1:
            raise ConfigError("num_scenes must be >= 1")
        if len(self.splits) != 3 or any(f < 0 for f in self.splits) or abs(sum(self.splits) - 1) > 1e-9:
            raise ConfigError(f"splits must be three non-negative fractions summing to 1, got {self.splits}")

    def to_dict(self):
        d = asdict(self)
        d["scene"] = self.scene.to_dict()
        d["splits"] = list(self.splits)
        return d

    @classmethod
    def from_dict(cls, d):
        d = dict(d)
        if "scene" in d:
            d["scene"] = SceneConfig.from_dict(d["scene"])
        if "splits" in d:
            d["splits"] = tuple(d["splits"])
        return cls(**d)


def split_counts(n, fractions=DEFAULT_SPLITS):
    """Scene counts per split: train floored, validation rounded half-up, test takes the rest."""
    n_train = math.floor(n * fractions[0])
    n_val = min(math.floor(n * fractions[1] + 0.5), n - n_train)
    return n_train, n_val, n - n_train - n_val


@dataclass(frozen=True)
class RunConfig:
    model: ModelConfig = field(default_factory=ModelConfig)
    loss_weights: LossWeights = field(default_factory=LossWeights)
    class_weights: ClassWeights = field(default_factory=ClassWeights)
    consistency_weight: float = 0.0  # mu; > 0 adds the overlap-consistency term to the loss
    optimizer: str = "adamw"
    lr: float = 1e-4
    weight_decay: float = 0.0
    grad_clip: float | None = 1.0  # max global gradient norm
    schedule: str = "cosine"
    warmup_steps: int = 0  # linear ramp before the schedule
    epochs: int = 50
    batch_size: int = 8
    accum_steps: int = 1
    max_steps: int | None = None
    max_train_samples: int | None = None
    seed: int = 0
    deterministic: bool = True
    checkpoint_every: int = 0  # epochs; 0 -> final only
    eval_split: str = "test"
    hist_bins: int = 50

    def __post_init__(self):
        if self.epochs < 1 or self.batch_size < 1 or self.accum_steps < 1:
            raise ConfigError("epochs, batch_size and accum_steps must be >= 1")
        if self.lr <= 0:
            raise ConfigError("lr must be positive")
        if self.optimizer not in ("adamw", "adam", "sgd"):
            raise ConfigError(f"unknown optimizer {self.optimizer!r}")
        if self.schedule not in ("cosine", "constant"):
            raise ConfigError(f"unknown schedule {self.schedule!r}")
        if self.warmup_steps < 0:
            raise ConfigError("warmup_steps must be non-negative")
        if self.consistency_weight < 0:
            raise ConfigError("consistency_weight must be non-negative")
        if self.consistency_weight > 0 and not (self.model.semantic and self.model.pseudo):
            raise ConfigError("the consistency term needs both semantic and pseudo heads")
        self.effective_loss_weights  # validates that some task remains

    @property
    def task_gates(self):
        m = self.model
        return {"semantic": m.semantic, "height": m.height, "pseudo": m.pseudo}

    @property
    def effective_loss_weights(self) -> LossWeights:
        g = self.task_gates
        lw = self.loss_weights
        try:
            return LossWeights(
                pseudo=lw.pseudo if g["pseudo"] else 0.0,
                height=lw.height if g["height"] else 0.0,
                semantic=lw.semantic if g["semantic"] else 0.0,
            )
        except ConfigError as exc:
            raise ConfigError(f"no enabled task has a positive loss weight: {exc}") from None

    def with_gates(self, semantic, height, pseudo):
        return replace(self, model=replace(self.model, semantic=semantic, height=height, pseudo=pseudo))

    def to_dict(self):
        d = asdict(self)
        d["model"] = self.model.to_dict()
        return d

    @classmethod
    def from_dict(cls, d):
        d = dict(d)
        if "model" in d:
            d["model"] = ModelConfig.from_dict(d["model"])
        if "loss_weights" in d:
            d["loss_weights"] = LossWeights(**d["loss_weights"])
        if "class_weights" in d:
            d["class_weights"] = ClassWeights(**d["class_weights"])
        return cls(**d)


@dataclass(frozen=True)
class Config:
    dataset: DatasetConfig = field(default_factory=DatasetConfig)
    run: RunConfig = field(default_factory=RunConfig)
    paths: dict = field(default_factory=dict)

    def with_seed(self, seed):
        return Config(
            replace(self.dataset, scene=replace(self.dataset.scene, seed=seed)),
            replace(self.run, seed=seed),
            dict(self.paths),
        )

    def to_dict(self):
        return {"dataset": self.dataset.to_dict(), "run": self.run.to_dict(), "paths": dict(self.paths)}


def smoke_config(steps=500, seed=1) -> Config:
    """Four training tiles from the default scene setup, trained to overfit in ``steps`` steps."""
    dataset = DatasetConfig(num_scenes=4, splits=(1.0, 0.0, 0.0), scene=SceneConfig(seed=seed))
    run = RunConfig(lr=2e-3, warmup_steps=30, epochs=steps, batch_size=4, max_steps=steps, eval_split="train")
    return Config(dataset, run)


def load_config(path=None, data=None) -> Config:
    """Parse a JSON config document with optional ``dataset``, ``run`` and ``paths`` sections."""
    if data is None:
        if path is None:
            return Config()
        try:
            data = storage.read_json(path)
        except (OSError, json.JSONDecodeError) as exc:
            raise ConfigError(f"cannot read config {path}: {exc}") from None
    unknown = set(data) - {"dataset", "run", "paths"}
    if unknown:
        raise ConfigError(f"unknown config sections: {sorted(unknown)}")
    try:
        return Config(
            DatasetConfig.from_dict(data.get("dataset", {})),
            RunConfig.from_dict(data.get("run", {})),
            dict(data.get("paths", {})),
        )
    except TypeError as exc:
        raise ConfigError(f"invalid config: {exc}") from None


# -- generate ---------------------------------------------------------------

def scene_seeds(seed, n):
    return [int(s.generate_state(1)[0]) for s in np.random.SeedSequence(seed).spawn(n)]


def cmd_generate(config: DatasetConfig, out) -> dict:
    """Write train/val/test splits, manifests and stats documents under ``out``."""
    out = storage.check_output_dir(out, "dataset.json")
    counts = split_counts(config.num_scenes, config.splits)
    seeds = scene_seeds(config.scene.seed, config.num_scenes)
    names = [name for name, c in zip(storage.SPLITS, counts) for _ in range(c)]
    tiles = {name: [] for name in storage.SPLITS}
    for i, (name, s) in enumerate(zip(names, seeds)):
        scene = generate_scene(replace(config.scene, seed=s))
        labels = label_scene(scene)
        tiles[name] += split_tiles(scene, labels, config.tile_size, config.keep_empty, prefix=f"s{i:04d}_")
    if not tiles["train"]:
        raise ConfigError("training split is empty; increase num_scenes")

    scale = compute_normalization_stats(tiles["train"], NORMALIZATION_COVERAGE)
    input_stats = compute_input_stats(tiles["train"])
    summary = {"config": config.to_dict(), "scene_counts": dict(zip(storage.SPLITS, counts))}
    for name in storage.SPLITS:
        split_dir = out / name
        split_dir.mkdir(exist_ok=True)
        for t in tiles[name]:
            storage.write_sample(split_dir, t)
        (out / f"{name}.txt").write_text("".join(f"{t.id}\n" for t in tiles[name]))
        stats = dataset_stats(tiles[name])
        pix = np.zeros(3, dtype=np.int64)
        for t in tiles[name]:
            pix += np.bincount(t.gt_semantic.ravel(), minlength=3)
        storage.write_json(split_dir / "stats.json", {
            "height_scale": scale.to_dict(),
            "coverage": NORMALIZATION_COVERAGE,
            "input_stats": input_stats.to_dict(),
            "class_pixel_counts": {"background": int(pix[0]), "demolished": int(pix[1]), "newly_built": int(pix[2])},
            "num_tiles": len(tiles[name]),
            "dataset_stats": stats,
        })
        summary[f"{name}_tiles"] = len(tiles[name])
    storage.write_json(out / "dataset.json", summary)
    return summary


# -- training ---------------------------------------------------------------

def seed_everything(seed, deterministic=True):
    random.seed(seed)
    np.random.seed(seed % 2**32)
    torch.manual_seed(seed)
    torch.use_deterministic_algorithms(deterministic)


def to_tensors(batch):
    t = {
        "dsm": torch.from_numpy(batch.dsm),
        "image": torch.from_numpy(batch.image),
        "semantic": torch.from_numpy(batch.semantic),
        "pseudo": torch.from_numpy(batch.pseudo),
        "overlap": torch.from_numpy(batch.overlap),
    }
    if batch.height_norm is not None:
        t["height_norm"] = torch.from_numpy(batch.height_norm)
    return t


def compute_losses(outputs, tb, run: RunConfig):
    """Loss components, their weighted total and the consistency diagnostic."""
    comps = {}
    lw = run.effective_loss_weights
    # zero-weight components are neither optimized nor logged
    if outputs.sem_logits is not None and lw.semantic:
        comps["semantic"] = weighted_ce(outputs.sem_logits, tb["semantic"], run.class_weights, from_logits=True)
    if outputs.height_norm is not None and lw.height:
        comps["height"] = mse_height(outputs.height_norm[:, 0], tb["height_norm"])
    if outputs.pseudo_probs is not None and lw.pseudo:
        comps["pseudo"] = weighted_ce(outputs.pseudo_probs, tb["pseudo"], run.class_weights, from_logits=False)
    diag = None
    if outputs.sem_logits is not None and outputs.pseudo_probs is not None:
        diag = consistency(outputs.pseudo_probs, torch.softmax(outputs.sem_logits, dim=1), tb["overlap"])
    mu = run.consistency_weight
    total = total_loss(
        comps.get("pseudo"), comps.get("height"), comps.get("semantic"), lw,
        l_consistency=diag if mu > 0 else None, mu=mu,
    )
    return total, comps, diag


def _optimizer(run, params):
    if run.optimizer == "sgd":
        return torch.optim.SGD(params, lr=run.lr, momentum=0.9, weight_decay=run.weight_decay)
    cls = torch.optim.AdamW if run.optimizer == "adamw" else torch.optim.Adam
    return cls(params, lr=run.lr, weight_decay=run.weight_decay)


@dataclass
class TrainResult:
    model: ChangeDetector
    log: list
    out: Path | None
    steps: int


def lr_factor(run: RunConfig, step, total_steps):
    """Multiplier on ``run.lr`` at ``step``: linear warmup, then cosine or constant."""
    w = run.warmup_steps
    if step < w:
        return (step + 1) / w
    if run.schedule == "constant":
        return 1.0
    span = max(total_steps - w, 1)
    return 0.5 * (1.0 + math.cos(math.pi * min(step - w, span) / span))


def train(run: RunConfig, data_root, out=None, samples=None) -> TrainResult:
    """Train a detector on the ``train`` split of ``data_root``.

    Writes ``train_log.jsonl`` and a checkpoint under ``out`` when given.  On a
    non-finite loss a ``nan_snapshot.json`` is written and
    :class:`NumericalError` propagates.
    """
    seed_everything(run.seed, run.deterministic)
    if samples is None:
        samples = storage.read_split(data_root, "train")
    if run.max_train_samples is not None:
        samples = samples[: run.max_train_samples]
    if not samples:
        raise ConfigError("no training samples")
    scale = storage.training_scale(data_root)
    input_stats = storage.training_input_stats(data_root)
    model = ChangeDetector(run.model)
    model.train()
    opt = _optimizer(run, model.parameters())
    batches_per_epoch = math.ceil(len(samples) / run.batch_size)
    steps_per_epoch = math.ceil(batches_per_epoch / run.accum_steps)
    total_steps = run.epochs * steps_per_epoch
    if run.max_steps is not None:
        total_steps = min(total_steps, run.max_steps)
    sched = torch.optim.lr_scheduler.LambdaLR(opt, lambda i: lr_factor(run, i, total_steps))

    if out is not None:
        out = Path(out)
        out.mkdir(parents=True, exist_ok=True)
        storage.write_json(out / "run_config.json", run.to_dict())
        log_fh = open(out / "train_log.jsonl", "w")
    else:
        log_fh = None
    records = []
    step = 0
    try:
        for epoch in range(run.epochs):
            if step >= total_steps:
                break
            acc = 0
            sums = {}
            opt.zero_grad()
            batches = list(make_batches(samples, run.batch_size, shuffle_seed=run.seed * 100003 + epoch,
                                        height_scale=scale, input_stats=input_stats))
            for bi, batch in enumerate(batches):
                tb = to_tensors(batch)
                outputs = model(tb["dsm"], tb["image"])
                try:
                    total, comps, diag = compute_losses(outputs, tb, run)
                except NumericalError:
                    if out is not None:
                        storage.write_json(out / "nan_snapshot.json", {
                            "step": step, "epoch": epoch, "batch_ids": batch.ids,
                            "lr": opt.param_groups[0]["lr"],
                        })
                    raise
                (total / run.accum_steps).backward()
                for k, v in (("loss", total), *((f"loss_{k}", v) for k, v in comps.items()),
                             ("consistency", diag)):
                    if v is not None:
                        sums[k] = sums.get(k, 0.0) + v.item() / run.accum_steps
                acc += 1
                if acc == run.accum_steps or bi == len(batches) - 1:
                    rec = {"step": step, "epoch": epoch, "lr": opt.param_groups[0]["lr"], **sums}
                    if run.grad_clip:
                        torch.nn.utils.clip_grad_norm_(model.parameters(), run.grad_clip)
                    opt.step()
                    opt.zero_grad()
                    sched.step()
                    records.append(rec)
                    if log_fh is not None:
                        log_fh.write(json.dumps(rec) + "\n")
                    acc, sums = 0, {}
                    step += 1
                    if step >= total_steps:
                        break
            if out is not None and run.checkpoint_every and (epoch + 1) % run.checkpoint_every == 0:
                storage.save_checkpoint(out / f"checkpoint_epoch{epoch + 1:04d}", model, _meta(run, data_root, step))
    finally:
        if log_fh is not None:
            log_fh.close()
    model.eval()
    if out is not None:
        storage.save_checkpoint(out / "checkpoint", model, _meta(run, data_root, step))
    return TrainResult(model, records, out, step)


def _meta(run, data_root, step):
    return {"run": run.to_dict(), "data": str(data_root), "steps": step}


# -- evaluation -------------------------------------------------------------

@dataclass
class Prediction:
    semantic: np.ndarray | None  # (B, H, W) classes
    height_m: np.ndarray | None  # (B, H, W) meters


class ModelAdapter(Protocol):
    """Anything that maps a :class:`~dsmcd.datapipe.Batch` to class and height maps.

    External baselines plug into evaluation and the ablation table through this.
    """

    def predict(self, batch) -> Prediction: ...


class DetectorAdapter:
    def __init__(self, model: ChangeDetector, scale: HeightScale):
        self.model = model
        self.scale = scale

    @torch.no_grad()
    def predict(self, batch):
        self.model.eval()
        out = self.model(torch.from_numpy(batch.dsm), torch.from_numpy(batch.image))
        sem = out.sem_logits.argmax(1).numpy() if out.sem_logits is not None else None
        h = None
        if out.height_norm is not None:
            h = denormalize_height(out.height_norm[:, 0].double().numpy(), self.scale)
        return Prediction(sem, h)


class GroundTruthAdapter:
    """Returns the reference maps themselves; the identity oracle for evaluation."""

    def predict(self, batch):
        return Prediction(batch.semantic.copy(), batch.height_m.astype(np.float64))


@dataclass
class EvalResult:
    report: MetricReport
    histogram: dict | None
    confusion: Confusion | None
    heights: HeightAccumulator | None


def evaluate(adapter: ModelAdapter, samples, data_root, batch_size=8, hist_bins=50, mparams=None) -> EvalResult:
    if not samples:
        raise ConfigError("empty evaluation set")
    scale = storage.training_scale(data_root)
    input_stats = storage.training_input_stats(data_root)
    conf = heights = None
    preds, gts = [], []
    for batch in make_batches(samples, batch_size, height_scale=scale, input_stats=input_stats):
        p = adapter.predict(batch)
        if p.semantic is not None:
            conf = (conf or Confusion()).update(p.semantic, batch.semantic)
        if p.height_m is not None:
            heights = (heights or HeightAccumulator()).update(p.height_m, batch.height_m, batch.semantic != BACKGROUND)
            preds.append(np.asarray(p.height_m).ravel())
            gts.append(batch.height_m.ravel())
    report = MetricReport.from_accumulators(conf, heights, mparams)
    hist = None
    if preds:
        hist = height_histogram(np.concatenate(preds), np.concatenate(gts), hist_bins, (scale.min_m, scale.max_m))
    return EvalResult(report, hist, conf, heights)


def write_eval(result: EvalResult, out):
    out = Path(out)
    out.mkdir(parents=True, exist_ok=True)
    result.report.to_json(out / "metrics.json")
    if result.histogram is not None:
        write_histogram_csv(out / "height_hist.csv", result.histogram)
    if result.confusion is not None:
        storage.write_json(out / "confusion.json", {"counts": result.confusion.counts.tolist()})


def cmd_train(run: RunConfig, data_root, out) -> TrainResult:
    return train(run, data_root, out)


def cmd_eval(checkpoint, data_root, split, out, batch_size=8, hist_bins=50) -> EvalResult:
    model, _ = storage.load_checkpoint(checkpoint)
    samples = storage.read_split(data_root, split)
    result = evaluate(DetectorAdapter(model, storage.training_scale(data_root)), samples, data_root,
                      batch_size, hist_bins, mparams=count_params(model))
    write_eval(result, out)
    return result


def train_and_eval(run: RunConfig, data_root, out, split=None):
    split = split or run.eval_split
    res = train(run, data_root, Path(out) / "train")
    samples = storage.read_split(data_root, split)
    ev = evaluate(DetectorAdapter(res.model, storage.training_scale(data_root)), samples, data_root,
                  run.batch_size, run.hist_bins, mparams=count_params(res.model))
    write_eval(ev, Path(out) / f"eval_{split}")
    return res, ev


# -- ablation ---------------------------------------------------------------

# (+2d semantic, +3d height, +MC pseudo)
ABLATION_ROWS = (
    (True, False, False),
    (False, True, False),
    (True, True, False),
    (False, True, True),
    (True, True, True),
)
ABLATION_COLUMNS = ("+2d", "+3d", "+MC") + SEMANTIC_FIELDS + HEIGHT_FIELDS


def _cell(v):
    return MISSING if v is None else f"{v:.4f}"


def ablation_row(gates, report: MetricReport):
    sem, hgt, pse = gates
    row = {"+2d": "x" if sem else "", "+3d": "x" if hgt else "", "+MC": "x" if pse else ""}
    for f in SEMANTIC_FIELDS:
        row[f] = _cell(getattr(report, f)) if sem else MISSING
    for f in HEIGHT_FIELDS:
        row[f] = _cell(getattr(report, f)) if hgt else MISSING
    return row


def _write_table(path, rows):
    import csv

    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.DictWriter(fh, fieldnames=ABLATION_COLUMNS)
        w.writeheader()
        w.writerows(rows)


def cmd_ablate(base: RunConfig, data_root, out, split=None):
    """Train and evaluate the five task-gate combinations; writes ``ablation.csv``."""
    out = Path(out)
    out.mkdir(parents=True, exist_ok=True)
    rows = []
    for gates in ABLATION_ROWS:
        name = "run_" + "_".join(k for k, on in zip(("2d", "3d", "mc"), gates) if on)
        try:
            _, ev = train_and_eval(base.with_gates(*gates), data_root, out / name, split)
        except Exception:
            _write_table(out / "ablation_partial.csv", rows)
            raise
        rows.append(ablation_row(gates, ev.report))
    _write_table(out / "ablation.csv", rows)
    storage.write_json(out / "ablation.json", {"columns": list(ABLATION_COLUMNS), "rows": rows})
    return rows


# -- temperature sweep ------------------------------------------------------

def near_zero_mass(hist):
    """Fraction of predictions in the bin containing 0 m."""
    edges = np.asarray(hist["edges"])
    pred = np.asarray(hist["pred"], dtype=np.float64)
    idx = int(np.clip(np.searchsorted(edges, 0.0, side="right") - 1, 0, len(pred) - 1))
    return float(pred[idx] / pred.sum()) if pred.sum() else 0.0


def cmd_sweep_t(base: RunConfig, data_root, out, t_values=SWEEP_TEMPERATURES, split=None):
    """Train/evaluate once per temperature; one histogram CSV per value plus ``index.json``."""
    t_values = [float(t) for t in t_values]
    if not t_values or any(not t > 0 for t in t_values):
        raise ConfigError(f"temperatures must be positive, got {t_values}")
    out = Path(out)
    out.mkdir(parents=True, exist_ok=True)
    index = []
    for t in t_values:
        run = replace(base, model=replace(base.model, temperature=t, height=True, pseudo=True))
        _, ev = train_and_eval(run, data_root, out / f"run_t{t:g}", split)
        fname = f"hist_t{t:g}.csv"
        write_histogram_csv(out / fname, ev.histogram)
        index.append({"t": t, "histogram": fname, "near_zero_mass": near_zero_mass(ev.histogram),
                      "metrics": ev.report.to_dict()})
    storage.write_json(out / "index.json", {"runs": index})
    return index
