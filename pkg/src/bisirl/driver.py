"""The bi-level double loop, the live expert, and the two baselines."""

from __future__ import annotations

import math
import time
from dataclasses import dataclass, field

import numpy as np

from .game import JointPolicy, MarkovGame, sample_interaction, sample_trajectories
from .hypergrad import UPPER_OBJECTIVES, BilevelProblem, SpsaConfig, estimate_hypergradient
from .lower import LowerConfig, LowerProblem, inner_loop
from .reward import RewardModel, as_reward_table, project_ball
from .soft import policy_return, solve_soft

RESPONSE_MODES = ("joint_soft", "best_response_soft")


class DriverError(RuntimeError):
    pass


def schedules(k: int, K: int, p0: float = 1.0, alpha0: float = 0.5) -> tuple[float, float, int]:
    """Perturbation radius, upper step size and inner step count at outer iteration ``k``."""
    if not 0 <= k < K:
        raise ValueError(f"iteration {k} outside [0, {K})")
    p = p0 / (k + 1)
    alpha = alpha0 / math.sqrt(K)
    t = math.ceil((k + 1) ** 0.25 / 2)
    return p, alpha, t


@dataclass(frozen=True)
class DriverConfig:
    K: int = 100
    d: int = 20
    lower: LowerConfig = field(default_factory=LowerConfig)
    n_avg: int = 64
    p0: float = 1.0
    alpha0: float = 0.5
    upper_objective: str = "true_rl"
    seed: int = 0
    theta_l0: tuple | None = None
    theta_e0: tuple | None = None

    def __post_init__(self):
        if self.K < 1:
            raise ValueError(f"K must be >= 1, got {self.K}")
        if self.d < 1:
            raise ValueError(f"d must be >= 1, got {self.d}")
        if not (self.p0 > 0 and self.alpha0 >= 0 and self.n_avg >= 1):
            raise ValueError("p0 must be positive, alpha0 non-negative and n_avg >= 1")
        if self.upper_objective not in UPPER_OBJECTIVES:
            raise ValueError(f"upper_objective must be one of {UPPER_OBJECTIVES}")

    def schedule(self, k: int) -> tuple[float, float, int]:
        return schedules(k, self.K, self.p0, self.alpha0)


@dataclass(frozen=True)
class ExpertOracle:
    """The live expert.

    ``joint_soft`` plays the expert marginal of the soft joint policy for the
    true rewards of both agents (``true_reward_l`` defaults to zero).
    ``best_response_soft`` softly best-responds, under its own reward only,
    to the learner's executed marginal.
    """

    true_reward_e: object
    response_mode: str = "joint_soft"
    true_reward_l: object = None

    def __post_init__(self):
        if self.response_mode not in RESPONSE_MODES:
            raise ValueError(f"response_mode must be one of {RESPONSE_MODES}, got {self.response_mode!r}")
        # freeze private copies so the ground truth cannot drift during a run
        for name in ("true_reward_e", "true_reward_l"):
            value = getattr(self, name)
            if value is not None:
                table = np.array(as_reward_table(value), dtype=float)
                table.setflags(write=False)
                object.__setattr__(self, name, table)


def expert_policy(oracle: ExpertOracle, game: MarkovGame, learner_marginal=None) -> np.ndarray:
    """Expert action distribution per (h, s), shape (H, S, A_e)."""
    r_e = as_reward_table(oracle.true_reward_e, game.joint_shape)
    if oracle.response_mode == "joint_soft":
        r_l = np.zeros(game.joint_shape) if oracle.true_reward_l is None else oracle.true_reward_l
        return solve_soft(game, r_l, r_e).policy.expert_marginal()
    H, S = game.horizon, game.n_states
    pi_l = np.asarray(learner_marginal, dtype=float)
    if pi_l.shape != (H, S, game.n_actions_learner):
        raise DriverError(f"learner marginal has shape {pi_l.shape}, expected {(H, S, game.n_actions_learner)}")
    out = np.empty((H, S, game.n_actions_expert))
    v_next = np.zeros(S)
    for h in range(H - 1, -1, -1):
        # induced single-agent MDP: average over the learner's action at (h, s)
        q = np.einsum("sx,sxy->sy", pi_l[h], r_e + game.discount * (game.transition @ v_next))
        peak = q.max(axis=1, keepdims=True)
        v = peak[:, 0] + np.log(np.exp(q - peak).sum(axis=1))
        out[h] = np.exp(q - v[:, None])
        out[h] /= out[h].sum(axis=1, keepdims=True)
        v_next = v
    return out


def interaction_policy(learner_marginal: np.ndarray, expert: np.ndarray) -> JointPolicy:
    return JointPolicy.product(learner_marginal, expert)


@dataclass(frozen=True)
class RunRecord:
    """Diagnostics of outer iteration ``k``, taken after its inner loop.

    ``expert_gap`` compares the true expert return of the modeled joint
    policy with that of the actual interaction (modeled learner marginal
    against the live expert). ``learner_return`` is the learner's true
    return in that interaction. ``ms`` holds wall-clock milliseconds per
    phase: ``sample``, ``inner``, ``hypergrad`` and ``eval``.
    """

    k: int
    theta_l: np.ndarray
    theta_e: np.ndarray
    f: float
    grad_norm: float
    lower_loss: float
    expert_gap: float
    learner_return: float
    p: float
    alpha: float
    t_k: int
    ms: dict


@dataclass(frozen=True)
class RunResult:
    records: list
    theta_l: np.ndarray
    theta_e: np.ndarray
    policy: JointPolicy
    learner_return: float
    expert_return: float


def _returns(game, r_l, r_e, oracle, policy: JointPolicy) -> tuple[float, float, float]:
    """(J_e of the modeled policy, J_e and J_l of the interaction policy)."""
    marginal = policy.learner_marginal()
    live = interaction_policy(marginal, expert_policy(oracle, game, marginal))
    return policy_return(game, policy, r_e), policy_return(game, live, r_e), policy_return(game, live, r_l)


def run_bisirl(
    game: MarkovGame,
    r_l_true,
    oracle: ExpertOracle,
    model_l: RewardModel,
    model_e: RewardModel,
    config: DriverConfig,
    on_record=None,
) -> RunResult:
    """Alternate demo collection, inner ML-IRL steps and a projected hypergradient step.

    Args:
        game: the Markov game.
        r_l_true: the learner's true reward table, used by the ``true_rl``
            upper objective and by the diagnostics.
        oracle: the live expert.
        model_l, model_e: reward models for theta_l and theta_e.
        config: schedules, sizes and seed.
        on_record: optional callback receiving each RunRecord as it is made.
    """
    r_l_true = as_reward_table(r_l_true, game.joint_shape)
    r_e_true = as_reward_table(oracle.true_reward_e, game.joint_shape)
    demo_seq, inner_seq, spsa_seq = np.random.SeedSequence(config.seed).spawn(3)
    demo_rng, inner_rng, spsa_rng = (np.random.default_rng(s) for s in (demo_seq, inner_seq, spsa_seq))
    theta_l = project_ball(np.zeros(model_l.dim) if config.theta_l0 is None else config.theta_l0)
    theta_e = project_ball(np.zeros(model_e.dim) if config.theta_e0 is None else config.theta_e0)
    static_expert = expert_policy(oracle, game) if oracle.response_mode == "joint_soft" else None
    records = []
    for k in range(config.K):
        try:
            p, alpha, t_k = config.schedule(k)
            ms = {}
            tic = time.perf_counter()
            marginal = solve_soft(game, (model_l, theta_l), (model_e, theta_e)).policy.learner_marginal()
            expert = static_expert if static_expert is not None else expert_policy(oracle, game, marginal)
            demos = sample_interaction(game, marginal, expert, config.d, demo_rng)
            ms["sample"] = 1e3 * (time.perf_counter() - tic)

            tic = time.perf_counter()
            lower = LowerProblem(game, model_l, model_e, demos, config.lower.lam)
            state = inner_loop(lower, theta_l, theta_e, config.lower, t_k, inner_rng)
            theta_e = state.theta_e
            ms["inner"] = 1e3 * (time.perf_counter() - tic)

            tic = time.perf_counter()
            problem = BilevelProblem(lower, r_l_true, config.upper_objective)
            est = estimate_hypergradient(problem, theta_l, theta_e, SpsaConfig(p=p, n_avg=config.n_avg), spsa_rng)
            ms["hypergrad"] = 1e3 * (time.perf_counter() - tic)

            tic = time.perf_counter()
            policy = lower.solve(theta_l, theta_e).policy
            model_je, live_je, live_jl = _returns(game, r_l_true, r_e_true, oracle, policy)
            f_value = problem.f(theta_l, theta_e)
            loss_value = lower.loss(theta_l, theta_e)
            ms["eval"] = 1e3 * (time.perf_counter() - tic)
            record = RunRecord(
                k=k,
                theta_l=theta_l.copy(),
                theta_e=theta_e.copy(),
                f=f_value,
                grad_norm=float(np.linalg.norm(est.assembled)),
                lower_loss=loss_value,
                expert_gap=abs(model_je - live_je),
                learner_return=live_jl,
                p=p,
                alpha=alpha,
                t_k=t_k,
                ms=ms,
            )
            theta_l = project_ball(theta_l - alpha * est.assembled)
        except Exception as err:
            raise DriverError(f"outer iteration {k} failed: {err}") from err
        records.append(record)
        if on_record is not None:
            on_record(record)
    policy = solve_soft(game, (model_l, theta_l), (model_e, theta_e)).policy
    _, live_je, live_jl = _returns(game, r_l_true, r_e_true, oracle, policy)
    return RunResult(records, theta_l, theta_e, policy, live_jl, live_je)


def run_marl_baseline(game: MarkovGame, r_l_true, r_e_true) -> tuple[JointPolicy, float, float]:
    """Joint soft policy for both true rewards, with exact returns."""
    policy = solve_soft(game, r_l_true, r_e_true).policy
    return policy, policy_return(game, policy, r_l_true), policy_return(game, policy, r_e_true)


@dataclass(frozen=True)
class MlirlResult:
    theta_e: np.ndarray
    policy: JointPolicy
    learner_return: float
    expert_return: float
    loss_history: list


def mlirl_demos(game: MarkovGame, r_l_init, r_e_true, d: int, rng) -> object:
    """Demos from the joint soft policy of the learner's initial reward and the true expert reward."""
    return sample_trajectories(game, solve_soft(game, r_l_init, r_e_true).policy, d, rng)


def run_mlirl_baseline(
    game: MarkovGame,
    r_l_true,
    theta_l_init,
    oracle: ExpertOracle,
    demos,
    model_l: RewardModel,
    model_e: RewardModel,
    lower_config: LowerConfig,
    n_steps: int,
    theta_e0=None,
) -> MlirlResult:
    """Fit theta_e to fixed demos with theta_l frozen at its initial value.

    Returns are the true ones in the interaction where the learner plays
    the fitted model's marginal against the live expert.
    """
    theta_l_init = np.asarray(theta_l_init, dtype=float)
    theta_e = project_ball(np.zeros(model_e.dim) if theta_e0 is None else theta_e0)
    history = []
    lower = LowerProblem(game, model_l, model_e, demos, lower_config.lam)
    if n_steps > 0:
        state = inner_loop(lower, theta_l_init, theta_e, lower_config, n_steps)
        theta_e, history = state.theta_e, state.loss_history
    policy = lower.solve(theta_l_init, theta_e).policy
    r_e_true = as_reward_table(oracle.true_reward_e, game.joint_shape)
    _, live_je, live_jl = _returns(game, as_reward_table(r_l_true, game.joint_shape), r_e_true, oracle, policy)
    return MlirlResult(theta_e, policy, live_jl, live_je, history)
