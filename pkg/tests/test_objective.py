import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from univit import substrate as sb
from univit.objective import (
    ObjectiveConfig, ep_statistic, ep_statistic_quadrature, prediction_loss, random_directions, sigreg_loss,
    total_loss,
)
from univit.substrate import ShapeError, Tensor, grad_check


def test_prediction_loss_identical_views_zero():
    e = np.tile(np.arange(4, dtype=np.float32), (10, 1))
    assert float(prediction_loss(Tensor(e), 2).data) == 0.0


def test_prediction_loss_hand_value():
    # globals at +-1 along one axis -> centroid 0; a local at (2, 0)
    e = np.array([[1.0, 0.0], [-1.0, 0.0], [2.0, 0.0]], dtype=np.float32)
    assert float(prediction_loss(Tensor(e), 2).data) == pytest.approx((1 + 1 + 4) / 3)


def test_prediction_loss_batch_mean():
    rng = np.random.default_rng(0)
    e = rng.standard_normal((3, 5, 4))
    per = [float(prediction_loss(Tensor(e[i]), 2).data) for i in range(3)]
    assert float(prediction_loss(Tensor(e), 2).data) == pytest.approx(np.mean(per))


def test_prediction_loss_centroid_receives_gradient():
    # with no stop-gradient, moving a global view changes every view's residual
    e = np.random.default_rng(0).standard_normal((4, 3))
    rep = grad_check(lambda x: prediction_loss(x, 2), e, step=1e-6, rtol=1e-6)
    assert rep.passed, str(rep)


def test_prediction_loss_needs_global():
    with pytest.raises(ValueError):
        prediction_loss(Tensor(np.zeros((3, 2))), 0)


def test_ep_anchor_values():
    assert float(ep_statistic(np.array([0.0])).data) == pytest.approx(0.16314, abs=1e-5)
    assert float(ep_statistic(np.array([0.0, 0.0])).data) == pytest.approx(0.32627, abs=1e-5)


def test_ep_anchor_closed_form():
    # N=1, x=0: 1 - sqrt(2) + 1/sqrt(3)
    assert float(ep_statistic(np.array([0.0])).data) == pytest.approx(1 - math.sqrt(2) + 1 / math.sqrt(3), abs=1e-12)


def test_ep_nonnegative_and_quadrature_anchor():
    assert ep_statistic_quadrature([0.0]) == pytest.approx(0.16314, abs=1e-5)


@settings(max_examples=60, deadline=None)
@given(st.integers(1, 40), st.floats(0.2, 3.0), st.floats(-2, 2), st.integers(0, 2**31 - 1))
def test_ep_matches_quadrature(n, scale, shift, seed):
    x = np.random.default_rng(seed).normal(shift, scale, n)
    closed = float(ep_statistic(x).data)
    assert closed >= -1e-12
    assert closed == pytest.approx(ep_statistic_quadrature(x), abs=1e-3)


def test_ep_far_sample_is_large():
    assert float(ep_statistic(np.full(50, 10.0)).data) > float(ep_statistic(np.random.default_rng(0).standard_normal(50)).data)


def test_ep_columns_independent():
    rng = np.random.default_rng(1)
    x = rng.standard_normal((20, 3))
    t = ep_statistic(x).data
    for j in range(3):
        assert t[j] == pytest.approx(float(ep_statistic(x[:, j]).data))


def test_ep_gradient():
    x = np.random.default_rng(2).standard_normal((9, 2))
    rep = grad_check(lambda a: sb.sum_reduce(ep_statistic(a)), x, step=1e-6, rtol=1e-6)
    assert rep.passed, str(rep)


def test_ep_rejects_nan():
    with pytest.raises(ValueError):
        ep_statistic(np.array([0.0, np.nan]))


def test_random_directions_unit_and_deterministic():
    a = random_directions(16, 64, (3, 7))
    assert a.shape == (16, 64)
    np.testing.assert_allclose(np.linalg.norm(a, axis=0), 1.0, atol=1e-12)
    np.testing.assert_array_equal(a, random_directions(16, 64, (3, 7)))
    assert not np.array_equal(a, random_directions(16, 64, (3, 8)))


def test_sigreg_small_for_gaussian_large_for_collapse():
    rng = np.random.default_rng(0)
    gauss = float(sigreg_loss(Tensor(rng.standard_normal((256, 8))), 64, 0).data)
    collapsed = float(sigreg_loss(Tensor(np.ones((256, 8))), 64, 0).data)
    assert gauss < 0.02
    assert collapsed > 10 * gauss


def test_sigreg_shape_check():
    with pytest.raises(ShapeError):
        sigreg_loss(Tensor(np.zeros((1, 4))), 4, 0)


def test_total_loss_mix():
    assert total_loss(2.0, 10.0, 0.025) == pytest.approx(0.975 * 2.0 + 0.025 * 10.0)
    assert total_loss(2.0, 10.0, 0.0) == 2.0
    t = total_loss(Tensor(np.float64(2.0)), Tensor(np.float64(10.0)), 0.5)
    assert float(t.data) == pytest.approx(6.0)


def test_config_validation():
    with pytest.raises(ValueError):
        ObjectiveConfig(lam=1.5)
    assert ObjectiveConfig().lam == 0.025
    assert ObjectiveConfig().n_directions == 64
