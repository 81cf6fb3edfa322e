"""Exact enumeration-based policy evaluation and conservative fixed points.

These solvers are the ground-truth engine: they iterate the penalized Bellman
recursions on a tabular model to sup-norm residual <= 1e-10, far below every
tolerance asserted elsewhere.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Optional, Tuple

import numpy as np

from .core import Dataset, EnvId, EnvSpec, FactoredPolicy
from .divergence import LambdaWeights, SupportError
from .envs import MMDPModel, all_joint_actions, decode_joint

DEFAULT_TOL = 1e-10
DEFAULT_MAX_ITER = 100_000
MAX_TABLE_CELLS = 50_000_000


class ConvergenceError(RuntimeError):
    def __init__(self, iterations: int, residual: float):
        self.iterations = iterations
        self.residual = residual
        super().__init__(
            f"no fixed point after {iterations} iterations (residual {residual:.3e})"
        )


@dataclass(frozen=True)
class SolveReport:
    iterations: int
    residual: float
    converged: bool
    residual_history: Optional[tuple] = None


@dataclass(frozen=True)
class JointQTable:
    values: np.ndarray  # (n_states, n_joint_actions)


def _policy_dense(model: MMDPModel, policy: FactoredPolicy) -> np.ndarray:
    dense = policy.dense(model.n_states)
    if dense.shape != (model.n_agents, model.n_states, model.n_actions):
        raise ValueError("policy dimensions do not match the model")
    return dense


def joint_policy_matrix(per_agent: np.ndarray) -> np.ndarray:
    """(S, A_joint) product policy from per-agent (n, S, A) probabilities."""
    n, n_states, n_actions = per_agent.shape
    digits = all_joint_actions(n, n_actions)  # (A_joint, n)
    joint = np.ones((n_states, digits.shape[0]))
    for i in range(n):
        joint *= per_agent[i][:, digits[:, i]]
    return joint


def _support_checked_ratios(pi_d: np.ndarray, beta_d: np.ndarray) -> np.ndarray:
    """Per-agent pi/beta tables with the 0/0 := 0 convention, (n, S, A)."""
    bad = (pi_d > 0) & (beta_d <= 0)
    if np.any(bad):
        agent, state, action = np.argwhere(bad)[0]
        raise SupportError(agent=int(agent), action=int(action), state=int(state))
    safe_beta = np.where(beta_d > 0, beta_d, 1.0)
    return np.where(pi_d > 0, pi_d / safe_beta, 0.0)


def _iterate(model: MMDPModel, joint_pi: np.ndarray, base: np.ndarray,
             tol: float, max_iter: int, track_history: bool) -> Tuple[np.ndarray, np.ndarray, SolveReport]:
    """Fixed point of Q = base + gamma * E[V(s')], V = E_pi[Q]."""
    q = np.zeros_like(base)
    history = [] if track_history else None
    residual = np.inf
    for it in range(1, max_iter + 1):
        v = (joint_pi * q).sum(axis=1)
        q_new = base + model.gamma * model.expected_next_values(v)
        residual = float(np.max(np.abs(q_new - q)))
        q = q_new
        if history is not None:
            history.append(residual)
        if residual <= tol:
            report = SolveReport(it, residual, True,
                                 tuple(history) if history is not None else None)
            v_final = (joint_pi * q).sum(axis=1)
            return q, v_final, report
    raise ConvergenceError(max_iter, residual)


def exact_policy_eval(model: MMDPModel, pi: FactoredPolicy, tol: float = DEFAULT_TOL,
                      max_iter: int = DEFAULT_MAX_ITER, track_history: bool = False):
    """Unpenalized policy evaluation: the true-value oracle."""
    joint_pi = joint_policy_matrix(_policy_dense(model, pi))
    q, v, report = _iterate(model, joint_pi, model.rewards.copy(), tol, max_iter, track_history)
    return JointQTable(q), v, report


def cfcql_fixed_point(model: MMDPModel, pi: FactoredPolicy, beta: FactoredPolicy,
                      lam: LambdaWeights, alpha: float, tol: float = DEFAULT_TOL,
                      max_iter: int = DEFAULT_MAX_ITER, track_history: bool = False):
    """Penalized evaluation with the per-agent counterfactual ratio penalty.

    Each sweep applies Q <- T_pi Q - alpha * (sum_i lambda_i pi_i/beta_i - 1).
    """
    if alpha < 0:
        raise ValueError("alpha must be >= 0")
    pi_d = _policy_dense(model, pi)
    beta_d = _policy_dense(model, beta)
    ratios = _support_checked_ratios(pi_d, beta_d)
    digits = all_joint_actions(model.n_agents, model.n_actions)
    lam_dense = lam.dense(model.n_states)  # (S, n)
    penalty = -np.ones((model.n_states, model.n_joint_actions))
    for i in range(model.n_agents):
        penalty += lam_dense[:, i:i + 1] * ratios[i][:, digits[:, i]]
    joint_pi = joint_policy_matrix(pi_d)
    base = model.rewards - alpha * penalty
    q, v, report = _iterate(model, joint_pi, base, tol, max_iter, track_history)
    return JointQTable(q), v, report


def macql_fixed_point(model: MMDPModel, pi: FactoredPolicy, beta: FactoredPolicy,
                      alpha: float, tol: float = DEFAULT_TOL,
                      max_iter: int = DEFAULT_MAX_ITER, track_history: bool = False):
    """Penalized evaluation with the joint-ratio penalty pi(a|s)/beta(a|s) - 1."""
    if alpha < 0:
        raise ValueError("alpha must be >= 0")
    pi_d = _policy_dense(model, pi)
    beta_d = _policy_dense(model, beta)
    ratios = _support_checked_ratios(pi_d, beta_d)
    digits = all_joint_actions(model.n_agents, model.n_actions)
    joint_ratio = np.ones((model.n_states, model.n_joint_actions))
    for i in range(model.n_agents):
        joint_ratio *= ratios[i][:, digits[:, i]]
    joint_pi = joint_policy_matrix(pi_d)
    base = model.rewards - alpha * (joint_ratio - 1.0)
    q, v, report = _iterate(model, joint_pi, base, tol, max_iter, track_history)
    return JointQTable(q), v, report


def value_iteration(model: MMDPModel, tol: float = DEFAULT_TOL,
                    max_iter: int = DEFAULT_MAX_ITER):
    """Optimal-value oracle: Q <- r + gamma * E[max_a' Q(s', a')]."""
    q = np.zeros_like(model.rewards)
    residual = np.inf
    for it in range(1, max_iter + 1):
        v = q.max(axis=1)
        q_new = model.rewards + model.gamma * model.expected_next_values(v)
        residual = float(np.max(np.abs(q_new - q)))
        q = q_new
        if residual <= tol:
            return JointQTable(q), q.max(axis=1), SolveReport(it, residual, True)
    raise ConvergenceError(max_iter, residual)


def greedy_policy_from_q(model: MMDPModel, q: JointQTable) -> FactoredPolicy:
    """One-hot factored policy from the joint argmax of a JointQTable."""
    best_joint = np.argmax(q.values, axis=1)
    actions = decode_joint(best_joint, model.n_agents, model.n_actions)
    table = {}
    for s in range(model.n_states):
        row = np.zeros((model.n_agents, model.n_actions))
        row[np.arange(model.n_agents), actions[s]] = 1.0
        table[s] = row
    return FactoredPolicy(model.n_agents, model.n_actions, table)


def empirical_model(dataset: Dataset, spec: EnvSpec,
                    n_states: Optional[int] = None) -> MMDPModel:
    """Maximum-likelihood tabular model from dataset counts.

    Unseen (state, joint action) pairs become zero-reward self-loops and are
    flagged through ``unseen_mask``.
    """
    if spec.state_kind != "discrete":
        raise ValueError("empirical_model needs discrete (tabular) states")
    if n_states is None:
        if spec.env_id == EnvId.TOY_MMDP:
            n_states = spec.n_actions**spec.n_agents
        else:
            raise ValueError("n_states must be given for this environment")
    n_joint = spec.n_actions**spec.n_agents
    if n_states * n_joint > MAX_TABLE_CELLS:
        raise ValueError(f"table of {n_states} x {n_joint} cells exceeds capacity")

    weights = spec.n_actions ** np.arange(spec.n_agents, dtype=np.int64)
    next_counts: dict = {}
    reward_sum = np.zeros((n_states, n_joint))
    visit = np.zeros((n_states, n_joint), dtype=np.int64)
    for t in dataset.transitions:
        a = int(np.asarray(t.joint_action, dtype=np.int64) @ weights)
        s, s2 = int(t.state), int(t.next_state)
        visit[s, a] += 1
        reward_sum[s, a] += t.reward
        key = (s, a)
        row = next_counts.setdefault(key, {})
        row[s2] = row.get(s2, 0) + 1

    k_max = max((len(r) for r in next_counts.values()), default=1)
    next_states = np.tile(np.arange(n_states, dtype=np.int64)[:, None, None], (1, n_joint, k_max))
    next_probs = np.zeros((n_states, n_joint, k_max))
    next_probs[:, :, 0] = 1.0  # self-loop default
    for (s, a), row in next_counts.items():
        items = sorted(row.items())
        total = sum(c for _, c in items)
        for k, (s2, c) in enumerate(items):
            next_states[s, a, k] = s2
            next_probs[s, a, k] = c / total
        for k in range(len(items), k_max):
            next_probs[s, a, k] = 0.0
            next_states[s, a, k] = items[0][0]

    seen = visit > 0
    rewards = np.where(seen, reward_sum / np.maximum(visit, 1), 0.0)

    starts = np.zeros(n_states)
    for a, _ in dataset.trajectory_slices():
        starts[int(dataset.transitions[a].state)] += 1.0
    if starts.sum() > 0:
        starts /= starts.sum()
    else:
        starts[:] = 1.0 / n_states

    return MMDPModel(
        n_states=n_states,
        n_agents=spec.n_agents,
        n_actions=spec.n_actions,
        gamma=spec.gamma,
        r_max=spec.r_max,
        next_states=next_states,
        next_probs=next_probs,
        rewards=rewards,
        initial_distribution=starts,
        unseen_mask=~seen,
    )
