"""Expression-building MDP: states, transitions and the terminal R² reward."""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable

import numpy as np

from . import expr
from .errors import AllRestartsFailed, DegenerateTarget, EpisodeFinished

REWARD_RESTARTS = 5


def r_squared(y, y_hat) -> float:
    """Coefficient of determination; may be negative."""
    y = np.asarray(y, dtype=float).reshape(-1)
    y_hat = np.asarray(y_hat, dtype=float).reshape(-1)
    if y.shape != y_hat.shape:
        raise ValueError(f"length mismatch: {y.size} vs {y_hat.size}")
    if y.size < 2:
        raise DegenerateTarget("need at least two points")
    ss_tot = float(np.sum((y - y.mean()) ** 2))
    if not ss_tot > 0:
        raise DegenerateTarget("target has zero variance")
    ss_res = float(np.sum((y - y_hat) ** 2))
    if not np.isfinite(ss_res):
        return float("-inf")
    return 1.0 - ss_res / ss_tot


def check_points(points) -> np.ndarray:
    p = np.asarray(points, dtype=float)
    if p.ndim != 2 or p.shape[1] != 3:
        raise DegenerateTarget(f"points must have shape (n, 3), got {p.shape}")
    if p.shape[0] < 2 or not np.all(np.isfinite(p)):
        raise DegenerateTarget("need at least two finite points")
    if not np.var(p[:, 2]) > 0:
        raise DegenerateTarget("target has zero variance")
    return p


@dataclass(frozen=True)
class EnvState:
    points: np.ndarray = field(repr=False)
    tree: expr.ExprTree
    max_len: int = expr.DEFAULT_MAX_LEN

    @property
    def step(self) -> int:
        return self.tree.length

    @property
    def matrix(self) -> expr.TreeMatrix:
        return expr.encode_matrix(self.tree, self.max_len)

    @property
    def terminal(self) -> bool:
        return self.tree.complete


@dataclass(frozen=True)
class Transition:
    state: EnvState
    action: int
    next_state: EnvState
    reward: float
    done: bool
    truncated: bool = False


def reset(points, max_len: int = expr.DEFAULT_MAX_LEN) -> EnvState:
    """Initial state: the empty tree together with the observed points."""
    return EnvState(check_points(points), expr.empty_tree(), max_len)


def terminal_reward(tree: expr.ExprTree, points, restarts: int = REWARD_RESTARTS, cache: dict | None = None) -> float:
    """max(0, R²) of ``tree`` after constant fitting; 0 if fitting fails."""
    key = tree.actions
    if cache is not None and key in cache:
        return cache[key]
    from .infer import fit_constants  # infer depends on this module

    try:
        r2 = fit_constants(tree, points, restarts=restarts).r2
    except AllRestartsFailed:
        r2 = 0.0
    reward = float(min(1.0, max(0.0, r2)))
    if cache is not None:
        cache[key] = reward
    return reward


def step(state: EnvState, action: int, restarts: int = REWARD_RESTARTS, cache: dict | None = None) -> Transition:
    if state.terminal:
        raise EpisodeFinished("the expression is already complete")
    nxt = EnvState(state.points, expr.apply_action(state.tree, action), state.max_len)
    if nxt.terminal:
        reward = terminal_reward(nxt.tree, state.points, restarts, cache)
        return Transition(state, int(action), nxt, reward, True)
    return Transition(state, int(action), nxt, 0.0, False)


def rollout(points, policy: Callable[[EnvState], int], max_len: int = expr.DEFAULT_MAX_LEN, **kw) -> list[Transition]:
    """Run ``policy`` from the empty tree; a tree still open at ``max_len`` earns 0."""
    state = reset(points, max_len)
    traj: list[Transition] = []
    while True:
        tr = step(state, policy(state), **kw)
        if not tr.done and tr.next_state.step >= max_len:
            tr = Transition(tr.state, tr.action, tr.next_state, 0.0, True, truncated=True)
        traj.append(tr)
        if tr.done:
            return traj
        state = tr.next_state


def episode_return(traj: list[Transition]) -> float:
    return float(sum(t.reward for t in traj))
