"""Environment constructors: attack-graph security game, grid game, random games."""

from __future__ import annotations

import json
from dataclasses import dataclass
from typing import NamedTuple

import numpy as np

from .game import GameError, MarkovGame, validate_game
from .reward import RewardModel

MAX_NODES = 10
MOVES = ((0, 0), (0, -1), (0, 1), (-1, 0), (1, 0))  # stay, up, down, left, right as (dx, dy)


class Environment(NamedTuple):
    """A game with ground-truth reward tables and the reward models to fit.

    ``theta_l_true`` / ``theta_e_true`` are set when the true reward is
    exactly representable by the corresponding model.
    """

    game: MarkovGame
    r_l: np.ndarray
    r_e: np.ndarray
    model_l: RewardModel
    model_e: RewardModel
    theta_l_true: np.ndarray | None = None
    theta_e_true: np.ndarray | None = None


def _check_doc_keys(doc: dict, required: set, optional: set, what: str) -> None:
    keys = set(doc)
    missing, unknown = required - keys, keys - required - optional
    if missing or unknown:
        raise GameError(f"{what}: missing keys {sorted(missing)}, unknown keys {sorted(unknown)}")


# ---------------------------------------------------------------- security game


@dataclass(frozen=True)
class AttackGraph:
    n_nodes: int
    edges: tuple[tuple[int, int], ...]
    success_prob: tuple[float, ...]
    attacker_cost: tuple[float, ...]
    defender_cost: tuple[float, ...]
    compromise_reward: tuple[float, ...]
    entry_nodes: tuple[int, ...] = (0,)

    def __post_init__(self):
        for name in ("edges", "success_prob", "attacker_cost", "defender_cost", "compromise_reward", "entry_nodes"):
            value = getattr(self, name)
            if name == "edges":
                value = tuple(tuple(int(i) for i in e) for e in value)
            object.__setattr__(self, name, tuple(value))
        n = self.n_nodes
        if not 1 <= n <= MAX_NODES:
            raise GameError(f"n_nodes must be in [1, {MAX_NODES}] so that 2^n states stay tabular, got {n}")
        n_edges = len(self.edges)
        for name in ("success_prob", "attacker_cost", "defender_cost"):
            if len(getattr(self, name)) != n_edges:
                raise GameError(f"{name} has {len(getattr(self, name))} entries for {n_edges} edges")
        if len(self.compromise_reward) != n:
            raise GameError(f"compromise_reward has {len(self.compromise_reward)} entries for {n} nodes")
        for i, j in self.edges:
            if not (0 <= i < n and 0 <= j < n) or i == j:
                raise GameError(f"edge ({i}, {j}) is not a valid edge between distinct nodes")
        if any(not 0.0 <= q <= 1.0 for q in self.success_prob):
            raise GameError("success probabilities must lie in [0, 1]")
        if not self.entry_nodes or any(not 0 <= i < n for i in self.entry_nodes):
            raise GameError(f"entry nodes {self.entry_nodes} invalid")

    @property
    def n_edges(self) -> int:
        return len(self.edges)

    def to_dict(self) -> dict:
        return {
            "n_nodes": self.n_nodes,
            "edges": [list(e) for e in self.edges],
            "success_prob": list(self.success_prob),
            "attacker_cost": list(self.attacker_cost),
            "defender_cost": list(self.defender_cost),
            "compromise_reward": list(self.compromise_reward),
            "entry_nodes": list(self.entry_nodes),
        }

    @classmethod
    def from_dict(cls, doc: dict) -> "AttackGraph":
        fields = {"n_nodes", "edges", "success_prob", "attacker_cost", "defender_cost", "compromise_reward"}
        _check_doc_keys(doc, fields, {"entry_nodes"}, "attack graph")
        return cls(**doc)


def default_attack_graph() -> AttackGraph:
    """Four machines, five exploits; node 3 is the high-value target."""
    return AttackGraph(
        n_nodes=4,
        edges=((0, 1), (0, 2), (1, 2), (1, 3), (2, 3)),
        success_prob=(0.8, 0.6, 0.7, 0.5, 0.6),
        attacker_cost=(0.1, 0.1, 0.15, 0.2, 0.2),
        defender_cost=(0.1, 0.1, 0.1, 0.15, 0.15),
        compromise_reward=(0.0, 0.3, 0.3, 1.0),
        entry_nodes=(0,),
    )


def build_security_game(graph: AttackGraph, horizon: int = 5, discount: float = 0.95, features: str = "linear"):
    """Defender (learner) blocks one edge or does nothing; attacker (expert) attacks one edge or does nothing.

    An attack on edge (i, j) succeeds with the edge's probability when node i
    is compromised, node j is clean and the defender does not block the edge.
    The attacker earns the expected compromise value minus its attack cost,
    the defender loses that value and pays its blocking cost.

    Linear features split each reward into per-node compromise terms and a
    cost term, scaled so that the true weight vector has unit norm.
    """
    n, n_edges = graph.n_nodes, graph.n_edges
    S, A = 2**n, n_edges + 1
    transition = np.zeros((S, A, A, S))
    gain = np.zeros((S, A, A, n))  # expected compromise value, split by target node
    att_cost = np.zeros((S, A, A))
    def_cost = np.zeros((S, A, A))
    for s in range(S):
        for b in range(A):
            for a in range(A):
                transition[s, b, a, s] = 1.0
                if b < n_edges:
                    def_cost[s, b, a] = graph.defender_cost[b]
                if a == n_edges:
                    continue
                att_cost[s, b, a] = graph.attacker_cost[a]
                i, j = graph.edges[a]
                if b == a or not (s >> i) & 1 or (s >> j) & 1:
                    continue
                q = graph.success_prob[a]
                transition[s, b, a, s] = 1.0 - q
                transition[s, b, a, s | (1 << j)] += q
                gain[s, b, a, j] = q * graph.compromise_reward[j]
    start = 0
    for i in graph.entry_nodes:
        start |= 1 << i
    initial = np.zeros(S)
    initial[start] = 1.0
    game = MarkovGame(transition, horizon, discount, initial)
    validate_game(game)
    total_gain = gain.sum(axis=-1)
    r_e = total_gain - att_cost
    r_l = -total_gain - def_cost
    if features == "tabular":
        return Environment(game, r_l, r_e, RewardModel.tabular(S, A, A), RewardModel.tabular(S, A, A))
    if features != "linear":
        raise GameError(f"unknown feature kind {features!r}")
    scale = np.sqrt(n + 1)
    phi_e = scale * np.concatenate([gain, -att_cost[..., None]], axis=-1)
    phi_l = scale * np.concatenate([-gain, -def_cost[..., None]], axis=-1)
    truth = np.full(n + 1, 1.0 / scale)
    return Environment(game, r_l, r_e, RewardModel.linear(phi_l), RewardModel.linear(phi_e), truth, truth.copy())


# ---------------------------------------------------------------- grid game


@dataclass(frozen=True)
class GridSpec:
    """Grid deception game layout; cells are ``(x, y)`` pairs.

    ``target`` indexes the landmark the learner wants the expert away from;
    ``expert_target`` indexes the landmark the expert believes it should reach.
    """

    width: int
    height: int
    learner_start: tuple[int, int]
    expert_start: tuple[int, int]
    landmarks: tuple[tuple[int, int], ...]
    target: int = 0
    expert_target: int | None = None
    step_costs: tuple[float, float] = (0.0, 0.0)

    def __post_init__(self):
        object.__setattr__(self, "learner_start", tuple(self.learner_start))
        object.__setattr__(self, "expert_start", tuple(self.expert_start))
        object.__setattr__(self, "landmarks", tuple(tuple(c) for c in self.landmarks))
        object.__setattr__(self, "step_costs", tuple(self.step_costs))
        if self.width < 1 or self.height < 1:
            raise GameError(f"grid must be at least 1x1, got {self.width}x{self.height}")
        for cell in (self.learner_start, self.expert_start, *self.landmarks):
            if not self.contains(cell):
                raise GameError(f"cell {cell} outside the {self.width}x{self.height} grid")
        if not self.landmarks:
            raise GameError("grid needs at least one landmark")
        if len(set(self.landmarks)) != len(self.landmarks):
            raise GameError("landmarks must be distinct")
        for idx in (self.target, self.believed_target):
            if not 0 <= idx < len(self.landmarks):
                raise GameError(f"landmark index {idx} out of range")

    @property
    def believed_target(self) -> int:
        return self.target if self.expert_target is None else self.expert_target

    def contains(self, cell) -> bool:
        x, y = cell
        return 0 <= x < self.width and 0 <= y < self.height

    @property
    def n_cells(self) -> int:
        return self.width * self.height

    def cell(self, index: int) -> tuple[int, int]:
        return index % self.width, index // self.width

    def index(self, cell) -> int:
        return cell[1] * self.width + cell[0]

    def move(self, index: int, action: int) -> int:
        x, y = self.cell(index)
        dx, dy = MOVES[action]
        nxt = (x + dx, y + dy)
        return self.index(nxt) if self.contains(nxt) else index

    @classmethod
    def from_dict(cls, doc: dict) -> "GridSpec":
        _check_doc_keys(
            doc,
            {"width", "height", "learner_start", "expert_start", "landmarks"},
            {"target", "expert_target", "step_costs"},
            "grid spec",
        )
        return cls(**doc)

    def to_dict(self) -> dict:
        return {
            "width": self.width,
            "height": self.height,
            "learner_start": list(self.learner_start),
            "expert_start": list(self.expert_start),
            "landmarks": [list(c) for c in self.landmarks],
            "target": self.target,
            "expert_target": self.expert_target,
            "step_costs": list(self.step_costs),
        }


def manhattan(a, b) -> int:
    return abs(a[0] - b[0]) + abs(a[1] - b[1])


def build_grid_game(spec: GridSpec, horizon: int = 6, discount: float = 0.95, features: str = "tabular"):
    """Joint state ``learner_cell * n_cells + expert_cell``; five moves per agent.

    Learner reward ``-dist(learner, target) + dist(expert, target)`` and expert
    reward ``-dist(expert, believed target)``, each minus its step cost when
    moving. Transitions are deterministic; walls turn moves into stays.
    """
    nc = spec.n_cells
    S, A = nc * nc, len(MOVES)
    target = spec.landmarks[spec.target]
    believed = spec.landmarks[spec.believed_target]
    transition = np.zeros((S, A, A, S))
    phi_l = np.zeros((S, A, A, 3))
    phi_e = np.zeros((S, A, A, 2))
    moving = (np.arange(A) != 0).astype(float)
    for lc in range(nc):
        for ec in range(nc):
            s = lc * nc + ec
            l_cell, e_cell = spec.cell(lc), spec.cell(ec)
            phi_l[s, :, :, 0] = -manhattan(l_cell, target)
            phi_l[s, :, :, 1] = manhattan(e_cell, target)
            phi_l[s, :, :, 2] = -moving[:, None]
            phi_e[s, :, :, 0] = -manhattan(e_cell, believed)
            phi_e[s, :, :, 1] = -moving[None, :]
            for al in range(A):
                for ae in range(A):
                    transition[s, al, ae, spec.move(lc, al) * nc + spec.move(ec, ae)] = 1.0
    initial = np.zeros(S)
    initial[spec.index(spec.learner_start) * nc + spec.index(spec.expert_start)] = 1.0
    game = MarkovGame(transition, horizon, discount, initial)
    validate_game(game)
    w_l = np.array([1.0, 1.0, spec.step_costs[0]])
    w_e = np.array([1.0, spec.step_costs[1]])
    r_l, r_e = phi_l @ w_l, phi_e @ w_e
    if features == "tabular":
        return Environment(game, r_l, r_e, RewardModel.tabular(S, A, A), RewardModel.tabular(S, A, A))
    if features != "linear":
        raise GameError(f"unknown feature kind {features!r}")
    return Environment(game, r_l, r_e, RewardModel.linear(phi_l), RewardModel.linear(phi_e), w_l, w_e)


# ---------------------------------------------------------------- small games


def random_game(n_states: int, n_al: int, n_ae: int, horizon: int, discount: float, rng) -> MarkovGame:
    """Transition rows and the initial distribution drawn from a flat Dirichlet."""
    if min(n_states, n_al, n_ae, horizon) < 1:
        raise GameError("sizes and horizon must be >= 1")
    transition = rng.dirichlet(np.ones(n_states), size=(n_states, n_al, n_ae))
    initial = rng.dirichlet(np.ones(n_states))
    # Dirichlet rows are normalized up to rounding; renormalize to keep sums exact to 1e-15
    transition /= transition.sum(axis=-1, keepdims=True)
    initial /= initial.sum()
    game = MarkovGame(transition, horizon, discount, initial)
    validate_game(game)
    return game


def random_environment(n_states, n_al, n_ae, horizon, discount, rng, dim_l=3, dim_e=3, features="linear"):
    """Random game with random features and ground-truth parameters inside the unit ball."""
    game = random_game(n_states, n_al, n_ae, horizon, discount, rng)
    shape = game.joint_shape
    if features == "tabular":
        model_l = RewardModel.tabular(*shape)
        model_e = RewardModel.tabular(*shape)
    else:
        model_l = RewardModel.linear(rng.normal(size=(*shape, dim_l)))
        model_e = RewardModel.linear(rng.normal(size=(*shape, dim_e)))
    theta_l = rng.normal(size=model_l.dim)
    theta_e = rng.normal(size=model_e.dim)
    theta_l *= rng.uniform(0.3, 1.0) / np.linalg.norm(theta_l)
    theta_e *= rng.uniform(0.3, 1.0) / np.linalg.norm(theta_e)
    return Environment(game, model_l.table(theta_l), model_e.table(theta_e), model_l, model_e, theta_l, theta_e)


def benchmark_game(features: str = "linear", horizon: int = 5, discount: float = 0.9) -> Environment:
    """Two-state game with two actions per agent and an interior learner optimum.

    Learner action 1 moves the game to state 1 with probability 0.8 (0.2 for
    action 0), plus 0.1 when both agents match. The learner is paid for
    action 1 in state 0, penalized for it in state 1 and likes state 1, so
    the best learner parameter trades these off inside the unit ball. The
    expert likes matching and state 1 and dislikes its own action 1.

    Linear learner features are ``[a_l == 1, a_e == 1]``; linear expert
    features ``[a_l == a_e, s == 1, a_e == 1]`` represent the expert's true
    reward exactly.
    """
    transition = np.zeros((2, 2, 2, 2))
    for al in range(2):
        for ae in range(2):
            up = (0.8 if al == 1 else 0.2) + (0.1 if al == ae else 0.0)
            transition[:, al, ae] = [1.0 - up, up]
    game = MarkovGame(transition, horizon, discount, np.array([1.0, 0.0]))
    s, al, ae = (x.astype(float) for x in np.meshgrid(np.arange(2), np.arange(2), np.arange(2), indexing="ij"))
    r_l = (1 - s) * al - 1.5 * s * al + 0.5 * s
    phi_l = np.stack([al, ae], axis=-1)
    phi_e = np.stack([(al == ae).astype(float), s, ae], axis=-1)
    theta_e = np.array([0.6, 0.6, -0.4])
    r_e = phi_e @ theta_e
    if features == "tabular":
        return Environment(game, r_l, r_e, RewardModel.tabular(2, 2, 2), RewardModel.tabular(2, 2, 2))
    if features != "linear":
        raise GameError(f"unknown feature kind {features!r}")
    return Environment(game, r_l, r_e, RewardModel.linear(phi_l), RewardModel.linear(phi_e), None, theta_e)


def load_attack_graph(path) -> AttackGraph:
    with open(path) as fh:
        return AttackGraph.from_dict(json.load(fh))


def load_grid_spec(path) -> GridSpec:
    with open(path) as fh:
        return GridSpec.from_dict(json.load(fh))
