import numpy as np
import pytest

from dsmcd.datapipe import make_sample
from dsmcd.errors import ConfigError
from dsmcd.synthcity import (
    SceneConfig, compute_height_change, dataset_stats, generate_change_map, generate_scene, label_scene,
    split_tiles,
)

from oracles import change_map_oracle, components


def scene_and_labels(**kw):
    s = generate_scene(SceneConfig(**kw))
    return s, label_scene(s)


def test_generate_scene_is_deterministic():
    a = generate_scene(SceneConfig(seed=7))
    b = generate_scene(SceneConfig(seed=7))
    for name in ("dsm_pre", "dsm_post", "image_post", "buildings_pre", "buildings_post", "relevance_mask"):
        np.testing.assert_array_equal(getattr(a, name), getattr(b, name))


def test_different_seeds_differ():
    a = generate_scene(SceneConfig(seed=1))
    b = generate_scene(SceneConfig(seed=2))
    assert not np.array_equal(a.dsm_post, b.dsm_post)


def test_scene_shapes_and_ranges():
    s = generate_scene(SceneConfig(width=96, height=64, num_buildings_pre=2, num_new=1, num_demolished=1, seed=3))
    assert s.dsm_pre.shape == s.dsm_post.shape == s.buildings_pre.shape == (64, 96)
    assert s.image_post.shape == (3, 64, 96) and s.image_post.dtype == np.uint8
    assert set(np.unique(s.relevance_mask)) <= {-1, 1}
    # image correlates with the DSM without equalling it
    assert np.corrcoef(s.image_post.mean(0).ravel(), s.dsm_post.ravel())[0, 1] != pytest.approx(1.0)


def test_no_change_config_only_noise():
    cfg = dict(num_new=0, num_demolished=0, num_rebuilt=0, seed=5, noise_sigma=0.1)
    s, labels = scene_and_labels(**cfg)
    dh = compute_height_change(s.dsm_pre, s.dsm_post)
    assert np.abs(dh).max() < 3 * 0.1
    assert not labels.semantic.any()
    assert not labels.height_change.any()


@pytest.mark.parametrize("seed", [0, 1, 2])
def test_new_buildings_are_separate_components(seed):
    sigma = 0.05
    s = generate_scene(SceneConfig(num_new=3, num_demolished=0, num_rebuilt=0, num_buildings_pre=4,
                                   noise_sigma=sigma, seed=seed))
    dh = compute_height_change(s.dsm_pre, s.dsm_post)
    assert components(dh > 3 * sigma) == 3


def test_rejects_overfull_scene():
    with pytest.raises(ConfigError):
        generate_scene(SceneConfig(width=32, height=32, num_buildings_pre=4, building_size=(12, 20)))


@pytest.mark.parametrize("kw", [
    dict(width=0), dict(num_new=-1), dict(occlusion_rate=1.5), dict(height_range=(0.0, 5.0)),
])
def test_invalid_scene_config(kw):
    with pytest.raises(ConfigError):
        SceneConfig(**kw)


def test_height_change_identical_is_zero():
    x = np.random.default_rng(0).normal(size=(8, 8)).astype(np.float32)
    assert not compute_height_change(x, x).any()


def test_height_change_single_pixel():
    pre = np.zeros((4, 4), np.float32)
    post = pre.copy()
    post[1, 2] = 10
    dh = compute_height_change(pre, post)
    assert dh[1, 2] == 10 and np.count_nonzero(dh) == 1


def test_height_change_matches_loop():
    rng = np.random.default_rng(1)
    pre = rng.normal(size=(8, 8)).astype(np.float32)
    post = rng.normal(size=(8, 8)).astype(np.float32)
    dh = compute_height_change(pre, post)
    for i in range(8):
        for j in range(8):
            assert dh[i, j] == np.float32(post[i, j] - pre[i, j])


def test_height_change_shape_mismatch():
    with pytest.raises(ConfigError):
        compute_height_change(np.zeros((4, 4)), np.zeros((4, 5)))


def _pixel(dh, m, pre, post):
    lab = generate_change_map(np.array([[dh]], np.float32), np.array([[m]]), np.array([[pre]]), np.array([[post]]))
    return int(lab.semantic[0, 0]), float(lab.height_change[0, 0])


@pytest.mark.parametrize("dh,m,pre,post,expected", [
    (5.0, 1, 0, 1, 2),     # positive change on a late-period building
    (-4.0, 1, 1, 0, 1),    # negative change on an early-period building
    (5.0, -1, 0, 1, 0),    # product negative but no early-period building
    (3.0, 1, 1, 1, 2),     # rebuilt 6 m -> 9 m
    (-3.0, 1, 1, 1, 1),    # rebuilt 9 m -> 6 m
    (-4.0, -1, 0, 1, 2),   # flipped relevance turns a negative signal into newly-built
    (0.0, 1, 1, 1, 0),
])
def test_change_map_rule(dh, m, pre, post, expected):
    sem, hc = _pixel(dh, m, pre, post)
    assert sem == expected
    assert hc == (dh if expected else 0.0)


def test_change_map_noise_threshold():
    lab = generate_change_map(np.array([[0.1, 0.4]], np.float32), np.ones((1, 2)), np.ones((1, 2), bool),
                              np.ones((1, 2), bool), noise_threshold=0.3)
    assert lab.semantic.tolist() == [[0, 2]]


def test_change_map_errors():
    z = np.zeros((2, 2))
    with pytest.raises(ConfigError):
        generate_change_map(z, np.zeros((2, 2)), z, z)
    with pytest.raises(ConfigError):
        generate_change_map(z, np.ones((2, 3)), z, z)


@pytest.mark.parametrize("seed", range(5))
def test_change_map_matches_oracle_on_scene(seed):
    s = generate_scene(SceneConfig(seed=seed, occlusion_rate=0.5, num_rebuilt=2, num_buildings_pre=3))
    dh = compute_height_change(s.dsm_pre, s.dsm_post)
    lab = label_scene(s)
    sem, hc = change_map_oracle(dh, s.relevance_mask, s.buildings_pre, s.buildings_post, s.config.noise_threshold)
    np.testing.assert_array_equal(lab.semantic, sem)
    np.testing.assert_array_equal(lab.height_change, hc)
    np.testing.assert_array_equal(lab.raw_delta_h, dh)


@pytest.mark.parametrize("seed", range(8))
def test_label_sign_coherence(seed):
    _, lab = scene_and_labels(seed=seed, occlusion_rate=0.6, num_rebuilt=2, num_buildings_pre=3)
    assert set(np.unique(lab.semantic)) <= {0, 1, 2}
    assert not lab.height_change[lab.semantic == 0].any()
    assert (lab.height_change[lab.semantic == 1] < 0).all()
    assert (lab.height_change[lab.semantic == 2] > 0).all()


def test_occlusion_creates_label_inconsistency():
    s, lab = scene_and_labels(seed=11, occlusion_rate=1.0)
    thresholded = np.where(np.abs(lab.raw_delta_h) < s.config.noise_threshold, 0, lab.raw_delta_h)
    assert not np.array_equal(lab.semantic != 0, np.sign(thresholded) != 0)
    s0, lab0 = scene_and_labels(seed=11, occlusion_rate=0.0)
    assert (lab0.semantic != 0).sum() > (lab.semantic != 0).sum()


def test_split_tiles_grid():
    s, lab = scene_and_labels(width=64, height=64, num_buildings_pre=1, num_new=1, num_demolished=1,
                              num_rebuilt=0, building_size=(8, 12), seed=2)
    tiles = split_tiles(s, lab, 32)
    assert len(tiles) == 4
    assert [t.id for t in tiles] == ["r0c0", "r0c1", "r1c0", "r1c1"]
    np.testing.assert_array_equal(tiles[3].dsm_pre, s.dsm_pre[32:, 32:])


def test_split_tiles_identity():
    s, lab = scene_and_labels(seed=4)
    (t,) = split_tiles(s, lab, 128)
    np.testing.assert_array_equal(t.dsm_pre, s.dsm_pre)
    np.testing.assert_array_equal(t.gt_semantic, lab.semantic)
    np.testing.assert_array_equal(np.rint(t.image_post * 255).astype(np.uint8), s.image_post)


def test_split_tiles_keep_empty_false():
    s, lab = scene_and_labels(width=64, height=64, seed=0, num_new=0, num_demolished=0, num_rebuilt=0,
                              num_buildings_pre=0)
    lab.semantic[40:50, 40:50] = 2
    lab.height_change[40:50, 40:50] = 5.0
    expected = sum(
        bool(lab.semantic[r:r + 32, c:c + 32].any()) for r in (0, 32) for c in (0, 32)
    )
    assert expected == 1
    assert len(split_tiles(s, lab, 32, keep_empty=False)) == expected
    assert len(split_tiles(s, lab, 32, keep_empty=True)) == 4


def test_split_tiles_non_divisible():
    s, lab = scene_and_labels(seed=0)
    with pytest.raises(ConfigError):
        split_tiles(s, lab, 50)


def _tile(sem, h):
    shape = sem.shape
    return make_sample("t", np.zeros(shape), np.zeros((3,) + shape), sem, h)


def test_dataset_stats_object_counts():
    s, lab = scene_and_labels(num_new=3, num_demolished=2, num_rebuilt=0, seed=9)
    (t,) = split_tiles(s, lab, 128)
    st = dataset_stats([t])
    assert (st["changed_objects"]["newly_built"], st["changed_objects"]["demolished"]) == (
        components(lab.semantic == 2), components(lab.semantic == 1))
    assert st["changed_objects"]["newly_built"] == 3
    assert st["changed_objects"]["demolished"] == 2


def test_dataset_stats_no_change():
    st = dataset_stats([_tile(np.zeros((8, 8), np.uint8), np.zeros((8, 8)))])
    assert st["changed_proportion"] == 0.0
    assert st["tiles_with_change_fraction"] == 0.0


def test_dataset_stats_proportion():
    sem = np.zeros((10, 100), np.uint8)
    h = np.zeros((10, 100), np.float32)
    sem[0, :10] = 1
    h[0, :10] = -3.0
    st = dataset_stats([_tile(sem, h)])
    assert st["changed_proportion"] == pytest.approx(0.01)
    assert st["changed_objects"]["demolished"] == 1
    assert st["cumulative_height"]["demolished"][-1] == pytest.approx(1.0)


def test_dataset_stats_empty():
    st = dataset_stats([])
    assert st["num_tiles"] == 0 and st["changed_proportion"] == 0.0
