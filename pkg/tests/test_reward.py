import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from bisirl.reward import (
    FeatureMap,
    RewardError,
    RewardModel,
    as_reward_table,
    in_ball,
    load_feature_map,
    project_ball,
    reward_grad,
    reward_hess,
    reward_value,
    save_feature_map,
)

finite = st.floats(-10, 10, allow_nan=False)


@pytest.fixture
def linear(rng):
    return RewardModel.linear(rng.normal(size=(3, 2, 2, 4)))


def test_zero_theta_gives_zero_reward(linear):
    assert not linear.table(np.zeros(4)).any()


def test_tabular_one_hot():
    model = RewardModel.tabular(2, 2, 3)
    theta = np.zeros(model.dim)
    theta[np.ravel_multi_index((1, 0, 2), model.shape)] = 1.0
    table = model.table(theta)
    assert table[1, 0, 2] == 1.0 and table.sum() == 1.0


def test_linear_hand_inner_product():
    model = RewardModel.linear(np.ones((1, 1, 1, 2)))
    assert reward_value(model, [0.6, 0.8], 0, 0, 0) == pytest.approx(1.4)


def test_grad_is_feature_vector(linear):
    np.testing.assert_array_equal(reward_grad(linear, np.zeros(4), 2, 1, 0), linear.feature_map.values[2, 1, 0])


def test_tabular_grad_is_one_hot():
    model = RewardModel.tabular(2, 2, 2)
    g = reward_grad(model, np.zeros(8), 1, 1, 0)
    assert g[np.ravel_multi_index((1, 1, 0), (2, 2, 2))] == 1.0 and g.sum() == 1.0


@pytest.mark.parametrize("kind", ["linear", "tabular"])
def test_grad_matches_finite_difference(kind, rng):
    model = RewardModel.linear(rng.normal(size=(2, 2, 2, 3))) if kind == "linear" else RewardModel.tabular(2, 2, 2)
    theta = rng.normal(size=model.dim)
    eps = 1e-6
    for s, al, ae in np.ndindex(model.shape):
        fd = np.array([
            (reward_value(model, theta + eps * e, s, al, ae) - reward_value(model, theta - eps * e, s, al, ae)) / (2 * eps)
            for e in np.eye(model.dim)
        ])
        np.testing.assert_allclose(fd, reward_grad(model, theta, s, al, ae), atol=1e-8)


@pytest.mark.parametrize("kind", ["linear", "tabular"])
def test_hessian_is_zero(kind, rng):
    model = RewardModel.linear(rng.normal(size=(2, 2, 2, 3))) if kind == "linear" else RewardModel.tabular(2, 2, 2)
    theta = rng.normal(size=model.dim)
    hess = reward_hess(model, theta, 1, 0, 1)
    assert hess.shape == (model.dim, model.dim) and not hess.any()
    eps = 1e-6
    fd = np.array([
        (reward_grad(model, theta + eps * e, 1, 0, 1) - reward_grad(model, theta - eps * e, 1, 0, 1)) / (2 * eps)
        for e in np.eye(model.dim)
    ])
    np.testing.assert_allclose(fd, 0.0, atol=1e-8)


def test_index_and_shape_errors(linear):
    with pytest.raises(RewardError, match="out of range"):
        reward_value(linear, np.zeros(4), 3, 0, 0)
    with pytest.raises(RewardError, match="theta has shape"):
        linear.table(np.zeros(3))


def test_tables_match_table(linear, rng):
    thetas = rng.normal(size=(5, 4))
    np.testing.assert_allclose(linear.tables(thetas), np.stack([linear.table(t) for t in thetas]))


def test_projection_examples():
    np.testing.assert_array_equal(project_ball([0.3, 0.4]), [0.3, 0.4])
    np.testing.assert_allclose(project_ball([3.0, 4.0]), [0.6, 0.8])
    np.testing.assert_array_equal(project_ball([0.0, 0.0]), [0.0, 0.0])


def test_projection_rejects_nan():
    with pytest.raises(RewardError):
        project_ball([np.nan, 1.0])


@settings(max_examples=200)
@given(arrays(float, st.integers(1, 6), elements=finite))
def test_projection_is_idempotent_and_in_ball(theta):
    once = project_ball(theta)
    assert in_ball(once)
    np.testing.assert_array_equal(project_ball(once), once)


def test_as_reward_table_accepts_pairs(linear, rng):
    theta = rng.normal(size=4)
    np.testing.assert_array_equal(as_reward_table((linear, theta)), linear.table(theta))
    with pytest.raises(RewardError, match="expected"):
        as_reward_table(np.zeros((2, 2, 2)), (3, 2, 2))


def test_feature_map_round_trip(tmp_path, linear):
    path = tmp_path / "phi.json"
    save_feature_map(linear.feature_map, path)
    np.testing.assert_array_equal(load_feature_map(path).values, linear.feature_map.values)


def test_feature_map_dim_mismatch():
    with pytest.raises(RewardError, match="declared dim"):
        FeatureMap.from_dict({"dim": 3, "values": np.zeros((1, 1, 1, 2)).tolist()})
