"""Upper-level objective, SPSA derivative estimates and hypergradient assembly.

The upper objective is ``f(tl, te) = -J(pi_{tl, te})`` (minimized), where the
return uses either the learner's true reward or its modeled reward ``r_tl``.
The hypergradient through the lower argmin is

    grad f = grad_l f - D_le L [D_ee L]^{-1} grad_e f

with every ingredient estimated by simultaneous perturbations, or computed
exactly by :func:`analytical_derivatives` for validation.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .lower import LowerProblem
from .reward import as_reward_table
from .game import check_policy_shape
from .soft import backward_expectation, occupancy

UPPER_OBJECTIVES = ("true_rl", "estimated_rtheta_l")
EIGH_MAX_DIM = 64


class HessianError(ArithmeticError):
    pass


@dataclass(frozen=True)
class SpsaConfig:
    p: float = 1.0
    n_avg: int = 64
    perturbation_law: str = "rademacher"

    def __post_init__(self):
        if not self.p > 0:
            raise ValueError(f"perturbation radius must be positive, got {self.p}")
        if self.n_avg < 1:
            raise ValueError(f"n_avg must be >= 1, got {self.n_avg}")
        if self.perturbation_law != "rademacher":
            raise ValueError(f"unsupported perturbation law {self.perturbation_law!r}")


@dataclass(frozen=True)
class HypergradEstimate:
    grad_l_f: np.ndarray
    grad_e_f: np.ndarray
    jac_le: np.ndarray
    hess_ee: np.ndarray
    cg_solution: np.ndarray
    assembled: np.ndarray


@dataclass(frozen=True)
class BilevelProblem:
    """A lower-level problem plus the learner's upper objective.

    Attributes:
        lower: the lower-level instance (game, models, demos, lam).
        r_l_true: ground-truth learner reward table, used by ``true_rl``.
        upper_objective: ``true_rl`` or ``estimated_rtheta_l``.
    """

    lower: LowerProblem
    r_l_true: np.ndarray
    upper_objective: str = "true_rl"

    def __post_init__(self):
        if self.upper_objective not in UPPER_OBJECTIVES:
            raise ValueError(f"upper_objective must be one of {UPPER_OBJECTIVES}, got {self.upper_objective!r}")
        table = as_reward_table(self.r_l_true, self.lower.game.joint_shape)
        object.__setattr__(self, "r_l_true", table)

    @property
    def game(self):
        return self.lower.game

    def upper_reward(self, theta_l) -> np.ndarray:
        if self.upper_objective == "true_rl":
            return self.r_l_true
        return self.lower.model_l.table(theta_l)

    def batch_f(self, theta_l, theta_e) -> np.ndarray:
        """``f`` for stacks of parameters; either argument may be a single vector."""
        visits = self.lower.batch_visits(theta_l, theta_e)
        if self.upper_objective == "true_rl":
            reward = self.r_l_true[None]
        else:
            reward = self.lower.model_l.tables(np.atleast_2d(np.asarray(theta_l, dtype=float)))
        return -np.sum(visits * reward, axis=(1, 2, 3))

    def f(self, theta_l, theta_e) -> float:
        occ = occupancy(self.game, self.lower.solve(theta_l, theta_e).policy)
        return -float(np.sum(occ.rho.sum(axis=0) * self.upper_reward(theta_l)))


def rademacher(rng: np.random.Generator, n: int, dim: int) -> np.ndarray:
    return rng.choice(np.array([-1.0, 1.0]), size=(n, dim))


def _perturbed_differences(fn, theta0, config: SpsaConfig, rng, batched: bool):
    """Draw all perturbations and return ``(deltas, fn(theta0 + p delta) - fn(theta0 - p delta))``.

    A ``batched`` function maps a (B, dim) stack to B outputs in one call.
    """
    theta0 = np.asarray(theta0, dtype=float)
    deltas = rademacher(rng, config.n_avg, theta0.size)
    points = np.concatenate([theta0 + config.p * deltas, theta0 - config.p * deltas])
    if batched:
        values = np.asarray(fn(points), dtype=float)
    else:
        values = np.array([fn(x) for x in points], dtype=float)
    return deltas, values[: config.n_avg] - values[config.n_avg :]


def spsa_grad(objective, theta0, config: SpsaConfig, rng: np.random.Generator, batched: bool = False) -> np.ndarray:
    """Two-sided simultaneous-perturbation gradient estimate, averaged over ``n_avg`` draws."""
    deltas, diff = _perturbed_differences(objective, theta0, config, rng, batched)
    return np.mean(diff[:, None] / (2.0 * config.p * deltas), axis=0)


def _spsa_matrix(grad_fn, theta0, config: SpsaConfig, rng, batched: bool) -> np.ndarray:
    deltas, diff = _perturbed_differences(grad_fn, theta0, config, rng, batched)
    # entry [i, j] = diff_i / (2 p delta_j), averaged over draws
    return np.einsum("bi,bj->ij", diff, 1.0 / deltas) / (2.0 * config.p * config.n_avg)


def spsa_hess(grad_fn, theta0, config: SpsaConfig, rng: np.random.Generator, batched: bool = False) -> np.ndarray:
    """Simultaneous-perturbation Hessian from gradient differences, symmetrized.

    Row ``i`` of each draw is ``diff / (2 p delta_i)``.
    """
    m = _spsa_matrix(grad_fn, theta0, config, rng, batched).T
    return 0.5 * (m + m.T)


def spsa_jacobian(grad_fn, theta0, config: SpsaConfig, rng: np.random.Generator, batched: bool = False) -> np.ndarray:
    """Cross derivative ``d grad_fn / d theta``: shape (len(grad_fn(theta0)), len(theta0)), not symmetrized."""
    return _spsa_matrix(grad_fn, theta0, config, rng, batched)


def damp_hessian(hess: np.ndarray, floor: float) -> np.ndarray:
    """Raise the spectrum of a symmetric matrix to at least ``floor``.

    Small matrices get an exact eigenvalue clip; larger ones a uniform
    diagonal shift sized by the Gershgorin lower bound.
    """
    hess = 0.5 * (hess + hess.T)
    m = hess.shape[0]
    if m <= EIGH_MAX_DIM:
        w, v = np.linalg.eigh(hess)
        if w.min() >= floor:
            return hess
        out = (v * np.maximum(w, floor)) @ v.T
        return 0.5 * (out + out.T)
    radius = np.abs(hess).sum(axis=1) - np.abs(np.diag(hess))
    lower = float(np.min(np.diag(hess) - radius))
    if lower >= floor:
        return hess
    return hess + (floor - lower) * np.eye(m)


def cg_solve(hess: np.ndarray, rhs: np.ndarray, tol: float = 1e-10, max_iter: int | None = None) -> np.ndarray:
    """Conjugate gradients for ``hess @ x = rhs`` with a relative residual stop."""
    rhs = np.asarray(rhs, dtype=float)
    m = rhs.size
    max_iter = m if max_iter is None else max_iter
    x = np.zeros(m)
    r = rhs.copy()
    b_norm = np.linalg.norm(rhs)
    if b_norm == 0.0:
        return x
    d = r.copy()
    rr = r @ r
    for _ in range(max_iter):
        if math.sqrt(rr) <= tol * b_norm:
            break
        hd = hess @ d
        curv = d @ hd
        if curv <= 0:
            raise HessianError("hessian not positive definite")
        step = rr / curv
        x += step * d
        r -= step * hd
        rr_new = r @ r
        d = r + (rr_new / rr) * d
        rr = rr_new
    return x


def estimate_hypergradient(
    problem: BilevelProblem,
    theta_l,
    theta_e,
    config: SpsaConfig,
    rng: np.random.Generator,
    cg_tol: float = 1e-10,
) -> HypergradEstimate:
    theta_l = np.asarray(theta_l, dtype=float)
    theta_e = np.asarray(theta_e, dtype=float)
    lower = problem.lower
    grad_l_f = spsa_grad(lambda t: problem.batch_f(t, theta_e), theta_l, config, rng, batched=True)
    grad_e_f = spsa_grad(lambda t: problem.batch_f(theta_l, t), theta_e, config, rng, batched=True)
    hess = spsa_hess(lambda t: lower.batch_grads(theta_l, t)[1], theta_e, config, rng, batched=True)
    jac = spsa_jacobian(lambda t: lower.batch_grads(theta_l, t)[0], theta_e, config, rng, batched=True)
    hess = damp_hessian(hess, 0.5 * lower.lam)
    w = cg_solve(hess, grad_e_f, tol=cg_tol)
    return HypergradEstimate(grad_l_f, grad_e_f, jac, hess, w, grad_l_f - jac @ w)


def lookahead_expectation(game, policy, per_step):
    """Same tables as :func:`bisirl.soft.backward_expectation`, built one step at a time.

    Each step's conditional expectation is evaluated from scratch over the
    remaining horizon, so the cost grows quadratically with the horizon.
    """
    check_policy_shape(game, policy)
    per_step = np.asarray(per_step, dtype=float)
    H, S = game.horizon, game.n_states
    flat = per_step.reshape(*game.joint_shape, -1)
    by_action = np.empty((H, *flat.shape))
    by_state = np.empty((H, S, flat.shape[-1]))
    for h in range(H):
        nxt = np.zeros((S, flat.shape[-1]))
        for t in range(H - 1, h - 1, -1):
            step = flat + game.discount * (game.transition @ nxt)
            nxt = np.einsum("sxy,sxyk->sk", policy.table[t], step)
        by_action[h], by_state[h] = step, nxt
    extra = per_step.shape[3:]
    return by_action.reshape(H, *game.joint_shape, *extra), by_state.reshape(H, S, *extra)


def analytical_derivatives(problem: BilevelProblem, theta_l, theta_e, method: str = "lookahead") -> dict:
    """Exact first and second derivatives of the upper and lower objectives.

    Returns a dict with ``grad_l_f``, ``grad_e_f``, ``grad_l_L``, ``grad_e_L``,
    ``hess_ee`` (m x m) and ``jac_le`` (n x m).
    """
    if method == "lookahead":
        tables = lookahead_expectation
    elif method == "backward":
        tables = backward_expectation
    else:
        raise ValueError(f"unknown method {method!r}")
    lower = problem.lower
    game = problem.game
    theta_l = np.asarray(theta_l, dtype=float)
    theta_e = np.asarray(theta_e, dtype=float)
    policy = lower.solve(theta_l, theta_e).policy
    rho = occupancy(game, policy).rho
    phi_l, phi_e = lower.model_l.features(), lower.model_e.features()
    n = phi_l.shape[-1]
    reward = problem.upper_reward(theta_l)
    # one pass over the stacked per-step quantities [phi_l, phi_e, r]
    stacked = np.concatenate([phi_l, phi_e, reward[..., None]], axis=-1)
    by_action, by_state = tables(game, policy, stacked)
    centered = by_action - by_state[:, :, None, None, :]
    score_l, score_e = centered[..., :n], centered[..., n:-1]
    ret = by_action[..., -1]

    weighted = rho * ret
    grad_l_f = -np.einsum("hsxy,hsxyk->k", weighted, score_l)
    grad_e_f = -np.einsum("hsxy,hsxyk->k", weighted, score_e)
    visits = rho.sum(axis=0)
    mu_l = np.tensordot(visits, phi_l, axes=3)
    mu_e = np.tensordot(visits, phi_e, axes=3)
    if problem.upper_objective == "estimated_rtheta_l":
        grad_l_f = grad_l_f - mu_l
    hess_ee = np.einsum("hsxy,hsxyi,hsxyj->ij", rho, score_e, score_e) + lower.lam * np.eye(score_e.shape[-1])
    jac_le = np.einsum("hsxy,hsxyi,hsxyj->ij", rho, score_l, score_e)
    return {
        "grad_l_f": grad_l_f,
        "grad_e_f": grad_e_f,
        "grad_l_L": mu_l - lower.mu_hat_l,
        "grad_e_L": mu_e - lower.mu_hat_e + lower.lam * theta_e,
        "hess_ee": 0.5 * (hess_ee + hess_ee.T),
        "jac_le": jac_le,
    }


def analytical_hypergradient(problem: BilevelProblem, theta_l, theta_e, method: str = "lookahead") -> np.ndarray:
    parts = analytical_derivatives(problem, theta_l, theta_e, method)
    try:
        chol = np.linalg.cholesky(parts["hess_ee"])
    except np.linalg.LinAlgError as err:
        raise HessianError("hessian not positive definite") from err
    w = np.linalg.solve(chol.T, np.linalg.solve(chol, parts["grad_e_f"]))
    return parts["grad_l_f"] - parts["jac_le"] @ w
