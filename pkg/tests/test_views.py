import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from univit.tokenizer import CT3D, XRAY2D, Volume
from univit.views import (
    GLOBAL, LOCAL, ViewConfig, center_view, crop_fractions, downsize_long_side, normalize_ct, normalize_xray,
    sample_views,
)


def test_normalize_xray_range():
    v = normalize_xray(Volume(np.array([[[[0.0, 5.0, 10.0]]]], np.float32), XRAY2D))
    np.testing.assert_allclose(v.data.ravel(), [-1.0, 0.0, 1.0])


def test_normalize_xray_constant():
    v = normalize_xray(Volume(np.full((1, 1, 3, 3), 7.0, np.float32), XRAY2D))
    assert not v.data.any()


def test_normalize_ct_window():
    hu = np.array([-2000.0, -1000.0, 250.0, 1500.0, 3000.0], np.float32).reshape(1, 1, 1, 5)
    v = normalize_ct(Volume(hu, CT3D))
    np.testing.assert_allclose(v.data.ravel(), [-1.0, -1.0, 0.0, 1.0, 1.0], atol=1e-6)


def test_normalize_rejects_nan():
    with pytest.raises(ValueError):
        Volume(np.array([[[[np.nan]]]], np.float32), XRAY2D)


def test_downsize_long_side():
    v = downsize_long_side(Volume(np.zeros((1, 1, 448, 224), np.float32), XRAY2D), 224)
    assert v.shape == (1, 1, 224, 112)
    v3 = downsize_long_side(Volume(np.zeros((1, 224, 224, 112), np.float32), CT3D), 112)
    assert v3.shape == (1, 112, 112, 56)


def test_downsize_rejects_too_small():
    with pytest.raises(ValueError):
        downsize_long_side(Volume(np.zeros((1, 1, 448, 20), np.float32), XRAY2D), 224)


def test_view_set_structure_2d():
    v = Volume(np.random.default_rng(0).random((1, 1, 224, 224)).astype(np.float32), XRAY2D)
    vs = sample_views(v, ViewConfig(), 0, 5, 0)
    assert vs.roles == [GLOBAL] * 2 + [LOCAL] * 8
    for view in vs.views:
        assert view.shape[1] == 1
        assert view.shape[2] % 14 == 0 and view.shape[3] % 14 == 0
        assert view.shape[2] >= 14


def test_views_3d_patch_multiples():
    v = Volume(np.zeros((1, 112, 112, 112), np.float32), CT3D)
    for view in sample_views(v, ViewConfig(), 3).views:
        assert all(n % 14 == 0 and n >= 14 for n in view.shape[1:])


def test_view_sampling_deterministic():
    v = Volume(np.random.default_rng(0).random((1, 1, 224, 224)).astype(np.float32), XRAY2D)
    a = sample_views(v, ViewConfig(), 1, 2, 3)
    b = sample_views(v, ViewConfig(), 1, 2, 3)
    c = sample_views(v, ViewConfig(), 1, 2, 4)
    assert all(np.array_equal(x.data, y.data) for x, y in zip(a.views, b.views))
    assert not all(x.shape == y.shape and np.array_equal(x.data, y.data) for x, y in zip(a.views, c.views))


def test_smallest_possible_input_gives_single_patch_views():
    v = Volume(np.ones((1, 1, 14, 14), np.float32), XRAY2D)
    vs = sample_views(v, ViewConfig(), 0)
    assert all(view.shape == (1, 1, 14, 14) for view in vs.views)


def test_too_small_input_rejected():
    with pytest.raises(ValueError):
        sample_views(Volume(np.ones((1, 1, 10, 30), np.float32), XRAY2D), ViewConfig(), 0)


def test_center_view():
    v = Volume(np.arange(30 * 30, dtype=np.float32).reshape(1, 1, 30, 30), XRAY2D)
    c = center_view(v, 14)
    assert c.shape == (1, 1, 28, 28)
    np.testing.assert_array_equal(c.data, v.data[:, :, 1:29, 1:29])


@pytest.mark.parametrize("dims", [(224, 224), (112, 112, 112)])
@pytest.mark.parametrize("scale", [(0.3, 1.0), (0.05, 0.3)])
def test_crop_scale_monte_carlo(dims, scale):
    # pre-snap fractions are U(scale): mean within 3 standard errors
    pre, post = crop_fractions(dims, scale, 14, 4000, seed=0)
    lo, hi = scale
    assert pre.min() >= lo and pre.max() <= hi
    se = (hi - lo) / np.sqrt(12 * len(pre))
    assert abs(pre.mean() - (lo + hi) / 2) < 3 * se
    # snapping only ever shrinks the crop (or grows it to one patch)
    assert (post <= hi + 1e-9).all()


@settings(max_examples=40, deadline=None)
@given(st.integers(14, 80), st.integers(14, 80), st.integers(0, 1000))
def test_views_fit_inside_input(h, w, seed):
    v = Volume(np.zeros((1, 1, h, w), np.float32), XRAY2D)
    for view in sample_views(v, ViewConfig(), seed).views:
        assert 14 <= view.shape[2] <= h and 14 <= view.shape[3] <= w
        assert view.shape[2] % 14 == 0 and view.shape[3] % 14 == 0


def test_config_rejects_bad_scale():
    with pytest.raises(ValueError):
        ViewConfig(global_scale=(0.3, 0.9))
    with pytest.raises(ValueError):
        ViewConfig(local_scale=(0.5, 0.2))
