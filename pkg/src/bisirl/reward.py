"""Linear and tabular reward models over the unit parameter ball."""

from __future__ import annotations

import json
from dataclasses import dataclass
from pathlib import Path

import numpy as np

BALL_ATOL = 1e-12


class RewardError(ValueError):
    pass


@dataclass(frozen=True)
class FeatureMap:
    """Feature vectors ``values[s, a_l, a_e]`` of length ``dim``."""

    values: np.ndarray

    def __post_init__(self):
        values = np.array(self.values, dtype=float)
        if values.ndim != 4 or values.shape[-1] < 1:
            raise RewardError(f"feature values must have shape (S, A_l, A_e, dim), got {values.shape}")
        if not np.all(np.isfinite(values)):
            raise RewardError("feature values must be finite")
        values.setflags(write=False)
        object.__setattr__(self, "values", values)

    @property
    def dim(self) -> int:
        return self.values.shape[-1]

    def to_dict(self) -> dict:
        return {"dim": self.dim, "values": self.values.tolist()}

    @classmethod
    def from_dict(cls, doc: dict) -> "FeatureMap":
        if set(doc) != {"dim", "values"}:
            raise RewardError(f"feature map document needs exactly 'dim' and 'values', got {sorted(doc)}")
        fm = cls(np.asarray(doc["values"], dtype=float))
        if fm.dim != doc["dim"]:
            raise RewardError(f"declared dim {doc['dim']} but vectors have length {fm.dim}")
        return fm


@dataclass(frozen=True)
class RewardModel:
    """``r_theta(s, a) = <theta, phi(s, a)>``.

    The tabular kind stores no features: theta has one entry per
    (s, a_l, a_e) triple and phi is the matching one-hot vector.
    """

    kind: str
    shape: tuple[int, int, int]
    feature_map: FeatureMap | None = None

    def __post_init__(self):
        object.__setattr__(self, "shape", tuple(int(n) for n in self.shape))
        if self.kind == "linear":
            if self.feature_map is None:
                raise RewardError("linear reward model needs a feature map")
            if self.feature_map.values.shape[:3] != self.shape:
                raise RewardError(
                    f"feature map covers {self.feature_map.values.shape[:3]}, model shape is {self.shape}"
                )
        elif self.kind == "tabular":
            if self.feature_map is not None:
                raise RewardError("tabular reward model takes no feature map")
        else:
            raise RewardError(f"unknown reward model kind {self.kind!r}")

    @classmethod
    def linear(cls, features) -> "RewardModel":
        fm = features if isinstance(features, FeatureMap) else FeatureMap(features)
        return cls("linear", fm.values.shape[:3], fm)

    @classmethod
    def tabular(cls, n_states: int, n_actions_learner: int, n_actions_expert: int) -> "RewardModel":
        return cls("tabular", (n_states, n_actions_learner, n_actions_expert))

    @property
    def dim(self) -> int:
        if self.kind == "tabular":
            return int(np.prod(self.shape))
        return self.feature_map.dim

    def features(self) -> np.ndarray:
        """Dense feature tensor of shape (S, A_l, A_e, dim)."""
        if self.kind == "tabular":
            return np.eye(self.dim).reshape(*self.shape, self.dim)
        return self.feature_map.values

    def table(self, theta) -> np.ndarray:
        """Reward for every (s, a_l, a_e) at once."""
        theta = self._check_theta(theta)
        if self.kind == "tabular":
            return theta.reshape(self.shape).copy()
        return self.feature_map.values @ theta

    def tables(self, thetas) -> np.ndarray:
        """Reward tables for a stack of parameter vectors, shape (B, S, A_l, A_e)."""
        thetas = np.asarray(thetas, dtype=float)
        if thetas.ndim != 2 or thetas.shape[1] != self.dim:
            raise RewardError(f"thetas has shape {thetas.shape}, model expects (B, {self.dim})")
        if self.kind == "tabular":
            return thetas.reshape(-1, *self.shape).copy()
        return np.moveaxis(self.feature_map.values @ thetas.T, -1, 0)

    def _check_theta(self, theta) -> np.ndarray:
        theta = np.asarray(theta, dtype=float)
        if theta.shape != (self.dim,):
            raise RewardError(f"theta has shape {theta.shape}, model expects ({self.dim},)")
        return theta

    def _check_index(self, s, a_l, a_e) -> None:
        for name, i, n in zip(("state", "learner action", "expert action"), (s, a_l, a_e), self.shape):
            if not 0 <= i < n:
                raise RewardError(f"{name} index {i} out of range [0, {n})")


def reward_value(model: RewardModel, theta, s: int, a_l: int, a_e: int) -> float:
    model._check_index(s, a_l, a_e)
    theta = model._check_theta(theta)
    return float(reward_grad(model, theta, s, a_l, a_e) @ theta)


def reward_grad(model: RewardModel, theta, s: int, a_l: int, a_e: int) -> np.ndarray:
    """Gradient of the reward in theta, which for linear forms is phi(s, a)."""
    model._check_index(s, a_l, a_e)
    model._check_theta(theta)
    if model.kind == "tabular":
        g = np.zeros(model.dim)
        g[np.ravel_multi_index((s, a_l, a_e), model.shape)] = 1.0
        return g
    return model.feature_map.values[s, a_l, a_e].copy()


def reward_hess(model: RewardModel, theta, s: int, a_l: int, a_e: int) -> np.ndarray:
    model._check_index(s, a_l, a_e)
    model._check_theta(theta)
    return np.zeros((model.dim, model.dim))


def project_ball(theta) -> np.ndarray:
    """Euclidean projection onto the closed unit ball."""
    theta = np.asarray(theta, dtype=float)
    if not np.all(np.isfinite(theta)):
        raise RewardError("cannot project a non-finite parameter vector")
    norm = np.linalg.norm(theta)
    # the tolerance makes projection exactly idempotent despite rounding
    if norm <= 1.0 + BALL_ATOL:
        return theta.copy()
    return theta / norm


def in_ball(theta) -> bool:
    return bool(np.linalg.norm(theta) <= 1.0 + BALL_ATOL)


def as_reward_table(reward, shape: tuple[int, int, int] | None = None) -> np.ndarray:
    """Accept either a reward table or a ``(model, theta)`` pair."""
    if isinstance(reward, tuple) and len(reward) == 2 and isinstance(reward[0], RewardModel):
        table = reward[0].table(reward[1])
    else:
        table = np.asarray(reward, dtype=float)
    if shape is not None and table.shape != tuple(shape):
        raise RewardError(f"reward table has shape {table.shape}, expected {tuple(shape)}")
    return table


def load_feature_map(path) -> FeatureMap:
    with open(path) as fh:
        return FeatureMap.from_dict(json.load(fh))


def save_feature_map(fm: FeatureMap, path) -> None:
    Path(path).write_text(json.dumps(fm.to_dict()))
