"""Small dataset and model settings shared by the harness-level tests."""
from dataclasses import replace

from dsmcd.backbone import BackboneConfig
from dsmcd.decoder import ModelConfig
from dsmcd.harness import DatasetConfig, RunConfig
from dsmcd.synthcity import SceneConfig

SMALL_SCENE = SceneConfig(width=64, height=64, num_buildings_pre=1, num_new=1, num_demolished=1,
                          num_rebuilt=1, building_size=(8, 14), seed=3)
TINY_MODEL = ModelConfig(backbone=BackboneConfig.tiny(), decode_dim=16, head_hidden=8)


def small_dataset(num_scenes=4, splits=(0.5, 0.25, 0.25), seed=3):
    return DatasetConfig(num_scenes=num_scenes, tile_size=32, splits=splits,
                         scene=replace(SMALL_SCENE, seed=seed))


def tiny_run(**kw):
    base = dict(model=TINY_MODEL, lr=1e-3, epochs=2, batch_size=4, seed=0)
    base.update(kw)
    return RunConfig(**base)
