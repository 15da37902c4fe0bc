import warnings

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st
from hypothesis.extra.numpy import arrays

from dsmcd.datapipe import (
    HeightScale, InputStats, compute_input_stats, compute_normalization_stats, denormalize_height,
    derive_pseudo_gt, make_batches, make_sample, normalize_height, normalize_inputs, overlap_mask,
)
from dsmcd.errors import ConfigError

from oracles import sorted_quantile

REFERENCE_SCALE = HeightScale(-27.29, 87.26)


def test_pseudo_all_zero():
    assert not derive_pseudo_gt(np.zeros((3, 3))).any()


def test_pseudo_signs():
    assert derive_pseudo_gt(np.array([-2.5, 0.0, 7.1])).tolist() == [2, 0, 1]


def test_pseudo_matches_sign_loop():
    h = np.random.default_rng(0).normal(size=(16, 16))
    h[::3, ::3] = 0
    got = derive_pseudo_gt(h)
    for v, g in zip(h.ravel(), got.ravel()):
        assert g == (1 if v > 0 else 2 if v < 0 else 0)


def test_pseudo_rejects_nan():
    with pytest.raises(ValueError):
        derive_pseudo_gt(np.array([0.0, np.nan]))


def test_overlap_identical_supports():
    sem = np.array([[0, 1, 2]])
    mask, rate = overlap_mask(sem, np.array([[0, 2, 1]]))
    assert mask.tolist() == [[False, True, True]] and rate == 1.0


def test_overlap_disjoint():
    mask, rate = overlap_mask(np.array([[1, 0]]), np.array([[0, 2]]))
    assert not mask.any() and rate == 0.0


def test_overlap_half():
    # semantic change on pixels 0,1; pseudo change on pixels 1,2 -> one shared of three
    mask, rate = overlap_mask(np.array([2, 2, 0]), np.array([0, 1, 1]))
    assert mask.tolist() == [False, True, False]
    assert rate == pytest.approx(1 / 3)


def test_overlap_requires_sign_agreement():
    mask, rate = overlap_mask(np.array([1, 2]), np.array([1, 2]))
    assert not mask.any() and rate == 0.0


def test_overlap_empty_union_is_nan():
    _, rate = overlap_mask(np.zeros(4, int), np.zeros(4, int))
    assert np.isnan(rate)


@settings(max_examples=60, deadline=None)
@given(arrays(np.int64, (6, 6), elements=st.integers(0, 2)), arrays(np.int64, (6, 6), elements=st.integers(0, 2)))
def test_overlap_subset_and_symmetry(sem, pse):
    mask, rate = overlap_mask(sem, pse)
    assert not (mask & (sem == 0)).any() and not (mask & (pse == 0)).any()
    # swapping roles under the sign pairing (demolished<->negative, newly-built<->positive)
    swap = np.array([0, 2, 1])
    mask2, rate2 = overlap_mask(swap[pse], swap[sem])
    np.testing.assert_array_equal(mask, mask2)
    assert (np.isnan(rate) and np.isnan(rate2)) or rate == rate2


def test_normalize_endpoints():
    s = HeightScale(-10.0, 30.0)
    np.testing.assert_allclose(normalize_height([-10.0, 30.0, 10.0], s), [-1, 1, 0])


def test_denormalize_midpoint():
    assert denormalize_height(0.0, REFERENCE_SCALE) == pytest.approx(29.985, abs=1e-9)


def test_normalize_clamps():
    np.testing.assert_array_equal(normalize_height([-100.0, 500.0], REFERENCE_SCALE), [-1.0, 1.0])


def test_round_trip():
    h = np.random.default_rng(1).uniform(REFERENCE_SCALE.min_m, REFERENCE_SCALE.max_m, 1000)
    back = denormalize_height(normalize_height(h, REFERENCE_SCALE), REFERENCE_SCALE)
    assert np.abs(back - h).max() < 1e-5


@given(st.floats(-1e3, 1e3), st.floats(1e-2, 1e3), st.floats(0, 1))
def test_round_trip_property(lo, span, frac):
    s = HeightScale(lo, lo + span)
    h = lo + frac * span
    assert float(denormalize_height(normalize_height(h, s), s)) == pytest.approx(h, abs=1e-5 * max(1, span))


def test_degenerate_scale():
    with pytest.raises(ConfigError):
        normalize_height(1.0, HeightScale(2.0, 2.0))
    with pytest.raises(ConfigError):
        HeightScale(3.0, 1.0)


def _sample(i, h, sem=None, dsm=None, img=None):
    h = np.asarray(h, np.float32)
    sem = np.zeros(h.shape, np.uint8) if sem is None else sem
    dsm = np.zeros(h.shape) if dsm is None else dsm
    img = np.zeros((3,) + h.shape) if img is None else img
    return make_sample(f"t{i}", dsm, img, sem, h)


def test_normalization_stats_match_sorted_quantile():
    rng = np.random.default_rng(2)
    tiles = [_sample(i, rng.normal(0, 5, (8, 8))) for i in range(3)]
    s = compute_normalization_stats(tiles, 0.995)
    vals = np.concatenate([t.gt_height.ravel() for t in tiles])
    assert s.min_m == pytest.approx(sorted_quantile(vals, 0.0025), abs=1e-9)
    assert s.max_m == pytest.approx(sorted_quantile(vals, 0.9975), abs=1e-9)
    inside = np.mean((vals >= s.min_m) & (vals <= s.max_m))
    assert inside >= 0.995 - 2 / vals.size


def test_normalization_stats_errors():
    with pytest.raises(ConfigError):
        compute_normalization_stats([])
    with pytest.raises(ConfigError):
        compute_normalization_stats([_sample(0, np.zeros((2, 2)))], coverage=0.0)


def test_normalize_inputs_example():
    stats = InputStats(0.0, 1.0, (0.5, 0.5, 0.5), (0.25, 0.25, 0.25))
    img = np.full((3, 2, 2), 255, np.uint8)
    _, out = normalize_inputs(np.zeros((2, 2)), img, stats)
    np.testing.assert_allclose(out, 2.0)


def test_normalize_inputs_constant_dsm_at_mean():
    stats = InputStats(12.5, 3.0, (0, 0, 0), (1, 1, 1))
    dsm, _ = normalize_inputs(np.full((4, 4), 12.5), np.zeros((3, 4, 4)), stats)
    assert not dsm.any()


def test_normalize_inputs_zero_std_warns():
    stats = InputStats(1.0, 0.0, (0.2, 0.2, 0.2), (0.0, 1.0, 1.0))
    with pytest.warns(RuntimeWarning):
        dsm, img = normalize_inputs(np.full((2, 2), 3.0), np.full((3, 2, 2), 0.7), stats)
    np.testing.assert_allclose(dsm, 2.0)
    np.testing.assert_allclose(img[0], 0.5)


def test_input_stats_from_training_tiles():
    rng = np.random.default_rng(3)
    tiles = [_sample(i, np.zeros((4, 4)), dsm=rng.normal(5, 2, (4, 4)), img=rng.uniform(size=(3, 4, 4)))
             for i in range(2)]
    st_ = compute_input_stats(tiles)
    dsm = np.concatenate([t.dsm_pre.ravel() for t in tiles])
    assert st_.dsm_mean == pytest.approx(dsm.astype(np.float64).mean())
    with warnings.catch_warnings():
        warnings.simplefilter("error")
        d, _ = normalize_inputs(tiles[0].dsm_pre, tiles[0].image_post, st_)
    assert np.isfinite(d).all()
    assert InputStats.from_dict(st_.to_dict()) == st_


def test_make_sample_derivations():
    sem = np.array([[0, 2], [1, 0]], np.uint8)
    h = np.array([[0.0, 3.0], [-2.0, 0.0]])
    s = _sample(0, h, sem)
    assert s.gt_pseudo.tolist() == [[0, 1], [2, 0]]
    assert s.overlap_mask.tolist() == [[False, True], [True, False]]
    assert s.has_change()


def test_make_sample_shape_mismatch():
    with pytest.raises(ConfigError):
        make_sample("x", np.zeros((2, 2)), np.zeros((3, 2, 3)), np.zeros((2, 2)), np.zeros((2, 2)))


def _samples(n):
    return [_sample(i, np.full((4, 4), i, np.float32)) for i in range(n)]


def test_batches_sizes_and_order():
    batches = list(make_batches(_samples(10), 4))
    assert [len(b) for b in batches] == [4, 4, 2]
    assert sum((b.ids for b in batches), []) == [f"t{i}" for i in range(10)]
    b = batches[0]
    assert b.dsm.shape == (4, 1, 4, 4) and b.image.shape == (4, 3, 4, 4)
    assert b.semantic.dtype == np.int64 and b.overlap.dtype == bool
    assert b.height_norm is None


def test_batches_seeded_shuffle():
    a = [b.ids for b in make_batches(_samples(10), 3, shuffle_seed=5)]
    b = [b.ids for b in make_batches(_samples(10), 3, shuffle_seed=5)]
    assert a == b
    assert sorted(sum(a, [])) == sorted(f"t{i}" for i in range(10))
    assert sum(a, []) != [f"t{i}" for i in range(10)]


def test_batches_attach_normalized_height():
    (b,) = make_batches(_samples(2), 2, height_scale=HeightScale(0.0, 2.0))
    np.testing.assert_allclose(b.height_norm[1], 0.0)
    np.testing.assert_allclose(b.height_norm[0], -1.0)


def test_batches_errors():
    with pytest.raises(ConfigError):
        next(make_batches([], 2))
    with pytest.raises(ConfigError):
        next(make_batches(_samples(2), 0))
