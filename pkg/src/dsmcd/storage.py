"""Dataset directory layout and checkpoint files.

Dataset root::

    dataset.json             generation config
    train.txt val.txt test.txt   sample ids, one per line
    <split>/stats.json       class pixel counts, training HeightScale, input stats
    <split>/<id>/dsm_pre.npy        float32 (H, W)
    <split>/<id>/image_post.npy     uint8 (3, H, W)
    <split>/<id>/sem_change.npy     uint8 (H, W) in {0, 1, 2}
    <split>/<id>/height_change.npy  float32 (H, W)
    <split>/<id>/relevance.npy      uint8 (H, W), 0 -> -1 and 1 -> +1

Checkpoint directory: ``model.npz`` (flat map of named parameter arrays) and
``config.json`` (model config plus training metadata).
"""
from __future__ import annotations

import json
import os
from pathlib import Path

import numpy as np
import torch

from .datapipe import HeightScale, InputStats, SamplePair, make_sample
from .errors import ConfigError

SPLITS = ("train", "val", "test")


def write_json(path, obj):
    with open(path, "w") as fh:
        json.dump(obj, fh, indent=2, sort_keys=True)
        fh.write("\n")


def read_json(path):
    with open(path) as fh:
        return json.load(fh)


def write_sample(split_dir, sample: SamplePair):
    d = Path(split_dir) / sample.id
    d.mkdir(parents=True, exist_ok=True)
    np.save(d / "dsm_pre.npy", sample.dsm_pre.astype(np.float32))
    np.save(d / "image_post.npy", np.rint(sample.image_post * 255.0).astype(np.uint8))
    np.save(d / "sem_change.npy", sample.gt_semantic.astype(np.uint8))
    np.save(d / "height_change.npy", sample.gt_height.astype(np.float32))
    rel = sample.relevance if sample.relevance is not None else np.ones(sample.shape, dtype=np.int8)
    np.save(d / "relevance.npy", (rel > 0).astype(np.uint8))


def read_sample(split_dir, sample_id) -> SamplePair:
    d = Path(split_dir) / sample_id
    if not d.is_dir():
        raise ConfigError(f"missing sample directory {d}")
    image = np.load(d / "image_post.npy").astype(np.float32) / np.float32(255.0)
    rel = np.where(np.load(d / "relevance.npy") > 0, 1, -1).astype(np.int8)
    return make_sample(
        sample_id,
        np.load(d / "dsm_pre.npy"),
        image,
        np.load(d / "sem_change.npy"),
        np.load(d / "height_change.npy"),
        rel,
    )


def read_manifest(root, split):
    path = Path(root) / f"{split}.txt"
    if not path.exists():
        raise ConfigError(f"missing split manifest {path}")
    return [line.strip() for line in path.read_text().splitlines() if line.strip()]


def read_split(root, split) -> list[SamplePair]:
    return [read_sample(Path(root) / split, i) for i in read_manifest(root, split)]


def read_stats(root, split="train"):
    path = Path(root) / split / "stats.json"
    if not path.exists():
        raise ConfigError(f"missing stats document {path}")
    return read_json(path)


def training_scale(root) -> HeightScale:
    stats = read_stats(root, "train")
    if "height_scale" not in stats:
        raise ConfigError("training stats document has no height_scale")
    return HeightScale.from_dict(stats["height_scale"])


def training_input_stats(root) -> InputStats:
    return InputStats.from_dict(read_stats(root, "train")["input_stats"])


def check_output_dir(out, marker):
    """Refuse to write into an existing path that is not a previous output of the same kind."""
    out = Path(out)
    if out.exists():
        if not out.is_dir():
            raise ConfigError(f"output path {out} exists and is not a directory")
        if any(out.iterdir()) and not (out / marker).exists():
            raise ConfigError(f"output directory {out} is not empty and has no {marker}")
    out.mkdir(parents=True, exist_ok=True)
    return out


def save_checkpoint(out_dir, model, meta):
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    arrays = {k: v.detach().cpu().numpy() for k, v in model.state_dict().items()}
    tmp = out_dir / "model.tmp.npz"
    np.savez(tmp, **arrays)
    os.replace(tmp, out_dir / "model.npz")
    write_json(out_dir / "config.json", {"model": model.config.to_dict(), **meta})


def load_checkpoint(ckpt_dir):
    from .decoder import ChangeDetector, ModelConfig

    ckpt_dir = Path(ckpt_dir)
    if not (ckpt_dir / "model.npz").exists():
        raise ConfigError(f"no checkpoint in {ckpt_dir}")
    meta = read_json(ckpt_dir / "config.json")
    model = ChangeDetector(ModelConfig.from_dict(meta["model"]))
    with np.load(ckpt_dir / "model.npz") as data:
        state = {k: torch.from_numpy(data[k]) for k in data.files}
    model.load_state_dict(state)
    model.eval()
    return model, meta
