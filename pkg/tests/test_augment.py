import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from scipy import stats

from tsdistill.augment import crop_resize, jitter, make_views, mask_count_choices, sample_masks
from tsdistill.autograd import resize_array
from tsdistill.config import AugmentConfig
from tsdistill.rng import stream

CFG = AugmentConfig()


def test_view_shapes_and_counts():
    x = np.random.default_rng(0).standard_normal((3, 512)).astype(np.float32)
    views = make_views(x, np.random.default_rng(1), CFG)
    assert views.global_views.shape == (3, 2, 512)
    assert views.local_views.shape == (3, 8, 256)
    assert views.masks.shape == (3, 2, 32) and views.masks.dtype == bool
    for b in range(3):
        assert sum(info.jittered for info in views.global_meta[b]) == 1
        for info in views.global_meta[b]:
            assert 0.4 <= info.fraction <= 1.0
        for info in views.local_meta[b]:
            assert 0.1 <= info.fraction <= 0.4


def test_constant_series_without_jitter_stays_constant():
    cfg = AugmentConfig(jitter_global=False, local_jitter_prob=0.0)
    views = make_views(np.full((2, 128), 4.5, np.float32), np.random.default_rng(0), cfg)
    np.testing.assert_array_equal(views.global_views, 4.5)
    np.testing.assert_array_equal(views.local_views, 4.5)


def test_constant_series_jitter_is_identity():
    # std of a constant series is 0, so jitter adds nothing
    views = make_views(np.full((2, 128), -1.0, np.float32), np.random.default_rng(0), CFG)
    np.testing.assert_array_equal(views.global_views, -1.0)


def test_full_crop_is_identity():
    cfg = AugmentConfig(global_scale=(1.0, 1.0), jitter_global=False)
    x = np.random.default_rng(2).standard_normal((2, 512)).astype(np.float32)
    views = make_views(x, np.random.default_rng(3), cfg)
    np.testing.assert_array_equal(views.global_views[:, 0], x)
    np.testing.assert_array_equal(views.global_views[:, 1], x)


def test_unjittered_views_are_exact_resized_slices():
    x = np.random.default_rng(4).standard_normal((2, 300)).astype(np.float32)
    views = make_views(x, np.random.default_rng(5), CFG)
    checked = 0
    for b in range(2):
        pairs = list(zip(views.global_views[b], views.global_meta[b])) + list(zip(views.local_views[b], views.local_meta[b]))
        for view, info in pairs:
            if info.jittered:
                continue
            expected = resize_array(x[b, info.start:info.start + info.length], len(view))
            np.testing.assert_array_equal(view, expected)
            assert info.length == min(300, max(2, int(np.ceil(info.fraction * 300))))
            checked += 1
    assert checked > 0


def test_views_reproducible_from_seed():
    x = np.random.default_rng(6).standard_normal((4, 256)).astype(np.float32)
    a = make_views(x, stream(0, "views", 7), CFG)
    b = make_views(x, stream(0, "views", 7), CFG)
    np.testing.assert_array_equal(a.global_views, b.global_views)
    np.testing.assert_array_equal(a.local_views, b.local_views)
    np.testing.assert_array_equal(a.masks, b.masks)


def test_short_series_rejected():
    with pytest.raises(ValueError):
        make_views(np.zeros((1, 16), np.float32), np.random.default_rng(0), CFG)
    with pytest.raises(ValueError):
        crop_resize(np.arange(10.0), 3, 1, 8)


def test_jitter_examples():
    x = np.random.default_rng(0).standard_normal(100)
    np.testing.assert_array_equal(jitter(x, 0.0, np.random.default_rng(0)), x)
    noise = jitter(np.zeros(10_000), 1.0, np.random.default_rng(1))
    assert abs(noise.std() - 1.0) < 0.03
    with pytest.raises(ValueError):
        jitter(x, -1.0, np.random.default_rng(0))


def test_global_fraction_is_uniform():
    x = np.random.default_rng(0).standard_normal((5000, 32)).astype(np.float32)
    cfg = AugmentConfig(n_local=0, global_len=32)
    views = make_views(x, np.random.default_rng(9), cfg)
    fractions = [info.fraction for row in views.global_meta for info in row]
    assert len(fractions) == 10_000
    assert stats.kstest(fractions, stats.uniform(loc=0.4, scale=0.6).cdf).pvalue > 0.01


def test_mask_count_grid_spans_three_to_twenty_two():
    counts = mask_count_choices(32, (0.1, 0.7))
    assert counts.min() == 3 and counts.max() == 22
    assert len(counts) == 32


@pytest.mark.parametrize("mode", ["linspace", "uniform"])
def test_mask_statistics(mode):
    cfg = AugmentConfig(mask_ratio_mode=mode)
    masks = sample_masks(5000, 2, np.random.default_rng(10), cfg)
    pop = masks.sum(axis=-1).ravel()
    selected = pop > 0
    assert abs(selected.mean() - 0.5) < 0.015
    assert pop[selected].min() >= 3 and pop[selected].max() <= 22
    assert np.all(pop[~selected] == 0)


@settings(max_examples=50, deadline=None)
@given(st.integers(0, 2**31))
def test_mask_positions_distinct_and_in_range(seed):
    masks = sample_masks(4, 2, np.random.default_rng(seed), CFG)
    pop = masks.sum(axis=-1)
    assert np.all((pop == 0) | ((pop >= 3) & (pop <= 22)))


def test_unknown_mask_mode_rejected():
    with pytest.raises(ValueError, match="mask_ratio_mode"):
        sample_masks(10, 2, np.random.default_rng(0), AugmentConfig(mask_prob=1.0, mask_ratio_mode="beta"))
