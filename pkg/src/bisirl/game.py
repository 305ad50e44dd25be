"""Finite two-agent Markov games, trajectories and rollout sampling.

States and actions are dense integer indices. A game stores its transition
model as a dense tensor ``transition[s, a_l, a_e, s']``. Policies are
time-indexed tables ``table[h, s, a_l, a_e]``.
"""

from __future__ import annotations

import json
from dataclasses import dataclass
from pathlib import Path

import numpy as np

PROB_ATOL = 1e-12
POLICY_ATOL = 1e-10


class GameError(ValueError):
    """Raised when a game, policy or demo set violates its invariants."""


@dataclass(frozen=True)
class MarkovGame:
    """Finite-horizon two-agent Markov game.

    Attributes:
        transition: array of shape (S, A_l, A_e, S); each ``transition[s, a_l, a_e]``
            is a distribution over next states.
        horizon: number of steps H in every episode.
        discount: discount factor in (0, 1].
        initial_dist: distribution over the state at step 0.
    """

    transition: np.ndarray
    horizon: int
    discount: float
    initial_dist: np.ndarray

    def __post_init__(self):
        object.__setattr__(self, "transition", _frozen(self.transition))
        object.__setattr__(self, "initial_dist", _frozen(self.initial_dist))
        object.__setattr__(self, "horizon", int(self.horizon))
        object.__setattr__(self, "discount", float(self.discount))

    @property
    def n_states(self) -> int:
        return self.transition.shape[0]

    @property
    def n_actions_learner(self) -> int:
        return self.transition.shape[1]

    @property
    def n_actions_expert(self) -> int:
        return self.transition.shape[2]

    @property
    def joint_shape(self) -> tuple[int, int, int]:
        return self.transition.shape[:3]

    def with_horizon(self, horizon: int) -> "MarkovGame":
        return MarkovGame(self.transition, horizon, self.discount, self.initial_dist)

    def to_dict(self) -> dict:
        return {
            "n_states": self.n_states,
            "n_actions_learner": self.n_actions_learner,
            "n_actions_expert": self.n_actions_expert,
            "horizon": self.horizon,
            "discount": self.discount,
            "initial_dist": self.initial_dist.tolist(),
            "transition": self.transition.tolist(),
        }

    @classmethod
    def from_dict(cls, doc: dict) -> "MarkovGame":
        """Build a game from its JSON document and validate it."""
        required = {
            "n_states", "n_actions_learner", "n_actions_expert",
            "horizon", "discount", "initial_dist", "transition",
        }
        missing = required - set(doc)
        if missing:
            raise GameError(f"game document missing fields: {sorted(missing)}")
        unknown = set(doc) - required
        if unknown:
            raise GameError(f"game document has unknown fields: {sorted(unknown)}")
        try:
            transition = np.asarray(doc["transition"], dtype=float)
            initial = np.asarray(doc["initial_dist"], dtype=float)
        except ValueError as exc:
            raise GameError(f"ragged or non-numeric arrays: {exc}") from None
        expected = (doc["n_states"], doc["n_actions_learner"], doc["n_actions_expert"], doc["n_states"])
        if transition.shape != tuple(expected):
            raise GameError(f"transition has shape {transition.shape}, expected {tuple(expected)}")
        if initial.shape != (doc["n_states"],):
            raise GameError(f"initial_dist has shape {initial.shape}, expected ({doc['n_states']},)")
        game = cls(transition, doc["horizon"], doc["discount"], initial)
        validate_game(game)
        return game


def _frozen(array) -> np.ndarray:
    out = np.array(array, dtype=float)
    out.setflags(write=False)
    return out


def validate_game(game: MarkovGame) -> None:
    """Check every game invariant; raise GameError naming the first violation."""
    if game.transition.ndim != 4 or game.transition.shape[0] != game.transition.shape[3]:
        raise GameError(f"transition must have shape (S, A_l, A_e, S), got {game.transition.shape}")
    if min(game.transition.shape) < 1:
        raise GameError("game needs at least one state and one action per agent")
    if game.horizon < 1:
        raise GameError(f"horizon must be >= 1, got {game.horizon}")
    if not 0.0 < game.discount <= 1.0:
        raise GameError(f"discount must lie in (0, 1], got {game.discount}")
    if not np.all(np.isfinite(game.transition)):
        raise GameError("transition has non-finite entries")
    neg = np.argwhere(game.transition < 0)
    if neg.size:
        s, al, ae, s2 = neg[0]
        raise GameError(
            f"negative probability {game.transition[s, al, ae, s2]} in transition row "
            f"(s={s}, a_l={al}, a_e={ae})"
        )
    sums = game.transition.sum(axis=-1)
    bad = np.argwhere(np.abs(sums - 1.0) > PROB_ATOL)
    if bad.size:
        s, al, ae = bad[0]
        raise GameError(
            f"transition row (s={s}, a_l={al}, a_e={ae}) sums to {sums[s, al, ae]:.12g}, not 1"
        )
    init = game.initial_dist
    if init.shape != (game.n_states,):
        raise GameError(f"initial_dist has shape {init.shape}, expected ({game.n_states},)")
    if np.any(init < 0):
        i = int(np.argmax(init < 0))
        raise GameError(f"negative probability {init[i]} in initial_dist at state {i}")
    if abs(init.sum() - 1.0) > PROB_ATOL:
        raise GameError(f"initial_dist sums to {init.sum():.12g}, not 1")


def load_game(path) -> MarkovGame:
    with open(path) as fh:
        return MarkovGame.from_dict(json.load(fh))


def save_game(game: MarkovGame, path) -> None:
    Path(path).write_text(json.dumps(game.to_dict()))


@dataclass(frozen=True)
class JointPolicy:
    """Time-indexed joint policy ``table[h, s, a_l, a_e]``."""

    table: np.ndarray

    def __post_init__(self):
        table = _frozen(self.table)
        if table.ndim != 4:
            raise GameError(f"policy table must be 4-d (H, S, A_l, A_e), got shape {table.shape}")
        if np.any(table < 0):
            raise GameError("policy has negative entries")
        sums = table.sum(axis=(2, 3))
        if np.max(np.abs(sums - 1.0)) > POLICY_ATOL:
            h, s = np.unravel_index(np.argmax(np.abs(sums - 1.0)), sums.shape)
            raise GameError(f"policy at (h={h}, s={s}) sums to {sums[h, s]:.12g}")
        object.__setattr__(self, "table", table)

    @property
    def horizon(self) -> int:
        return self.table.shape[0]

    def learner_marginal(self) -> np.ndarray:
        """Distribution over learner actions per (h, s), shape (H, S, A_l)."""
        return self.table.sum(axis=3)

    def expert_marginal(self) -> np.ndarray:
        """Distribution over expert actions per (h, s), shape (H, S, A_e)."""
        return self.table.sum(axis=2)

    @classmethod
    def product(cls, learner: np.ndarray, expert: np.ndarray) -> "JointPolicy":
        """Joint policy in which both agents act independently given the state."""
        return cls(learner[..., :, None] * expert[..., None, :])

    @classmethod
    def uniform(cls, game: MarkovGame) -> "JointPolicy":
        shape = (game.horizon, *game.joint_shape)
        return cls(np.full(shape, 1.0 / (shape[2] * shape[3])))


def check_policy_shape(game: MarkovGame, policy: JointPolicy) -> None:
    expected = (game.horizon, *game.joint_shape)
    if policy.table.shape != expected:
        raise GameError(f"policy shape {policy.table.shape} does not match game {expected}")


@dataclass(frozen=True)
class Trajectory:
    """One episode: ``states[h]``, ``learner_actions[h]``, ``expert_actions[h]``."""

    states: np.ndarray
    learner_actions: np.ndarray
    expert_actions: np.ndarray

    def __len__(self):
        return len(self.states)

    @property
    def steps(self) -> list[tuple[int, int, int]]:
        return list(zip(self.states.tolist(), self.learner_actions.tolist(), self.expert_actions.tolist()))


@dataclass(frozen=True)
class DemoSet:
    """A batch of d equal-length trajectories stored as (d, H) integer arrays."""

    states: np.ndarray
    learner_actions: np.ndarray
    expert_actions: np.ndarray

    def __post_init__(self):
        arrays = [np.array(a, dtype=np.int64) for a in (self.states, self.learner_actions, self.expert_actions)]
        if not arrays[0].ndim == 2 or any(a.shape != arrays[0].shape for a in arrays):
            raise GameError("demo arrays must share one (d, H) shape")
        for name, a in zip(("states", "learner_actions", "expert_actions"), arrays):
            a.setflags(write=False)
            object.__setattr__(self, name, a)

    @property
    def d(self) -> int:
        return self.states.shape[0]

    @property
    def horizon(self) -> int:
        return self.states.shape[1]

    def __len__(self):
        return self.d

    @property
    def trajectories(self) -> list[Trajectory]:
        return [
            Trajectory(self.states[i], self.learner_actions[i], self.expert_actions[i])
            for i in range(self.d)
        ]

    @classmethod
    def from_trajectories(cls, trajectories, horizon: int | None = None) -> "DemoSet":
        trajectories = list(trajectories)
        if not trajectories:
            h = horizon or 0
            empty = np.zeros((0, h), dtype=np.int64)
            return cls(empty, empty, empty)
        lengths = {len(t) for t in trajectories}
        if len(lengths) != 1:
            raise GameError(f"trajectories have differing lengths {sorted(lengths)}")
        return cls(
            np.stack([t.states for t in trajectories]),
            np.stack([t.learner_actions for t in trajectories]),
            np.stack([t.expert_actions for t in trajectories]),
        )

    def check_against(self, game: MarkovGame) -> None:
        if self.d and self.horizon != game.horizon:
            raise GameError(f"demo horizon {self.horizon} differs from game horizon {game.horizon}")
        for name, a, n in (
            ("state", self.states, game.n_states),
            ("learner action", self.learner_actions, game.n_actions_learner),
            ("expert action", self.expert_actions, game.n_actions_expert),
        ):
            if a.size and (a.min() < 0 or a.max() >= n):
                raise GameError(f"{name} index out of range [0, {n})")


def _categorical(probs: np.ndarray, rng: np.random.Generator) -> np.ndarray:
    """Draw one index per row of ``probs`` (shape (n, k)) by inverse CDF."""
    cdf = np.cumsum(probs, axis=-1)
    u = rng.random(probs.shape[0]) * cdf[:, -1]
    idx = (cdf <= u[:, None]).sum(axis=-1)
    return np.minimum(idx, probs.shape[-1] - 1)


def sample_trajectories(game: MarkovGame, policy: JointPolicy, n: int, rng: np.random.Generator) -> DemoSet:
    """Roll out ``n`` independent episodes of a joint policy, vectorized over episodes."""
    check_policy_shape(game, policy)
    H = game.horizon
    n_al, n_ae = game.n_actions_learner, game.n_actions_expert
    states = np.zeros((n, H), dtype=np.int64)
    al = np.zeros((n, H), dtype=np.int64)
    ae = np.zeros((n, H), dtype=np.int64)
    if n == 0:
        return DemoSet(states, al, ae)
    s = _categorical(np.broadcast_to(game.initial_dist, (n, game.n_states)), rng)
    for h in range(H):
        states[:, h] = s
        joint = _categorical(policy.table[h, s].reshape(n, n_al * n_ae), rng)
        al[:, h], ae[:, h] = np.divmod(joint, n_ae)
        if h + 1 < H:
            s = _categorical(game.transition[s, al[:, h], ae[:, h]], rng)
    return DemoSet(states, al, ae)


def sample_trajectory(game: MarkovGame, policy: JointPolicy, rng: np.random.Generator) -> Trajectory:
    """Roll out one episode; joint actions are drawn from the policy at (h, s_h)."""
    return sample_trajectories(game, policy, 1, rng).trajectories[0]


def _check_marginal(marginal: np.ndarray, shape: tuple, who: str) -> None:
    if marginal.shape != shape:
        raise GameError(f"{who} marginal has shape {marginal.shape}, expected {shape}")
    if np.any(marginal < 0) or np.max(np.abs(marginal.sum(axis=-1) - 1.0)) > POLICY_ATOL:
        raise GameError(f"{who} marginal is not normalized per (h, s)")


def sample_interaction(
    game: MarkovGame,
    learner_marginal: np.ndarray,
    expert_policy: np.ndarray,
    d: int,
    rng: np.random.Generator,
) -> DemoSet:
    """Collect ``d`` trajectories with learner and expert acting independently.

    Args:
        game: the shared environment.
        learner_marginal: shape (H, S, A_l), the learner's executed policy.
        expert_policy: shape (H, S, A_e), the live expert's policy.
        d: number of trajectories.
        rng: random stream; the only source of randomness.
    """
    H, S = game.horizon, game.n_states
    _check_marginal(np.asarray(learner_marginal), (H, S, game.n_actions_learner), "learner")
    _check_marginal(np.asarray(expert_policy), (H, S, game.n_actions_expert), "expert")
    states = np.zeros((d, H), dtype=np.int64)
    al = np.zeros((d, H), dtype=np.int64)
    ae = np.zeros((d, H), dtype=np.int64)
    if d == 0:
        return DemoSet(states, al, ae)
    s = _categorical(np.broadcast_to(game.initial_dist, (d, S)), rng)
    for h in range(H):
        states[:, h] = s
        al[:, h] = _categorical(learner_marginal[h, s], rng)
        ae[:, h] = _categorical(expert_policy[h, s], rng)
        if h + 1 < H:
            s = _categorical(game.transition[s, al[:, h], ae[:, h]], rng)
    return DemoSet(states, al, ae)
