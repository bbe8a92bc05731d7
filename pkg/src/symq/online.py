"""Per-instance online refinement by risk-seeking REINFORCE.

Trajectories are sampled from softmax(Q / temperature).  Every decision
they contain goes into a replay buffer tagged with the trajectory's reward
R_tau, and one policy-gradient step weights each decision by
R_tau - beta * R_star, ignoring those at or below zero.
"""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field

import numpy as np

from . import expr
from .env import REWARD_RESTARTS, check_points
from .errors import AllRestartsFailed, ConfigError, EmptyBuffer
from .infer import FitResult, fit_constants, log_softmax
from .model import DecisionBatch, QModel, clip_grads
from .train import cross_entropy


@dataclass
class OnlineConfig:
    budget: int = 50
    beta: float = 0.7
    learning_rate: float = 0.01
    capacity: int = 512
    seed: int = 0
    # a freshly overfit model is too peaked for plain softmax sampling to explore
    temperature: float = 3.0
    grad_clip: float = 1.0
    restarts: int = REWARD_RESTARTS
    max_len: int | None = None

    def validate(self) -> "OnlineConfig":
        if self.budget < 1:
            raise ConfigError("budget must be >= 1")
        if not 0.0 <= self.beta <= 1.0:
            raise ConfigError("beta must lie in [0, 1]")
        if self.capacity < 1 or self.learning_rate <= 0 or self.temperature <= 0:
            raise ConfigError("capacity, learning_rate and temperature must be positive")
        return self


@dataclass
class Entry:
    prefix: tuple[int, ...]
    action: int
    r_tau: float
    seq: int  # insertion order, used to evict the oldest among equals


@dataclass
class MemoryBuffer:
    capacity: int = 512
    entries: list[Entry] = field(default_factory=list)
    r_star: float = 0.0
    _seq: int = 0

    def push(self, actions, r_tau: float) -> None:
        """Add every decision of one trajectory and update R*."""
        actions = tuple(actions)
        for t, a in enumerate(actions):
            self.entries.append(Entry(actions[:t], a, float(r_tau), self._seq))
            self._seq += 1
        self.r_star = max(self.r_star, float(r_tau))
        if len(self.entries) > self.capacity:
            # evict the lowest rewards first, oldest first among ties
            self.entries.sort(key=lambda e: (e.r_tau, e.seq))
            del self.entries[: len(self.entries) - self.capacity]
            self.entries.sort(key=lambda e: e.seq)

    def __len__(self) -> int:
        return len(self.entries)


class RewardCache:
    """Fitted R² per skeleton, so repeated samples are fitted once."""

    def __init__(self, points, restarts: int = REWARD_RESTARTS, seed: int = 0):
        self.points = points
        self.restarts = restarts
        self.seed = seed
        self.fits: dict[tuple[int, ...], FitResult | None] = {}

    def fit(self, actions) -> FitResult | None:
        key = tuple(actions)
        if key not in self.fits:
            try:
                self.fits[key] = fit_constants(expr.from_actions(key), self.points, self.restarts, self.seed)
            except AllRestartsFailed:
                self.fits[key] = None
        return self.fits[key]

    def reward(self, actions) -> float:
        tree = expr.from_actions(actions)
        if not tree.complete:
            return 0.0
        res = self.fit(actions)
        return 0.0 if res is None else float(min(1.0, max(0.0, res.r2)))


def sample_trajectory(
    model: QModel,
    points,
    rng: np.random.Generator,
    temperature: float = 1.0,
    max_len: int | None = None,
    cache: RewardCache | None = None,
):
    """Sample actions from softmax(Q / temperature) until complete or max_len.

    Returns ``(actions, R_tau)``; an unfinished tree earns 0.
    """
    points = check_points(points)
    max_len = min(max_len or model.dims.max_len, model.dims.max_len)
    cache = cache or RewardCache(points)
    zp = model.encode_points(points)
    actions: list[int] = []
    slots = 1
    while slots and len(actions) < max_len:
        q = model.q_for_prefixes(zp, [actions])[0]
        p = np.exp(log_softmax(q / temperature))
        a = int(rng.choice(expr.N_ACTIONS, p=p / p.sum()))
        actions.append(a)
        slots += expr.OPS[a].arity - 1
    return actions, cache.reward(actions)


def reinforce_weights(buffer: MemoryBuffer, beta: float) -> np.ndarray:
    w = np.array([e.r_tau for e in buffer.entries]) - beta * buffer.r_star
    return np.where(w > 0, w, 0.0)


def reinforce_gradient(model: QModel, buffer: MemoryBuffer, points, beta: float):
    """Loss and gradients of -mean(w * log softmax(Q)[a]) over the buffer."""
    if not len(buffer):
        raise EmptyBuffer("nothing to learn from")
    batch = DecisionBatch(
        [np.asarray(points, dtype=float)],
        np.zeros(len(buffer), dtype=np.int64),
        [e.prefix for e in buffer.entries],
        targets=np.array([e.action for e in buffer.entries], dtype=np.int64),
        weights=reinforce_weights(buffer, beta),
    )

    def loss_fn(q, zp):
        loss, dq = cross_entropy(q, batch.targets, batch.weights)
        return loss, dq, None

    return model.backward(batch, loss_fn)


def reinforce_update(model: QModel, buffer: MemoryBuffer, points, cfg: OnlineConfig) -> QModel:
    """One clipped gradient step, in place; a no-op when every weight is zero."""
    if not len(buffer):
        raise EmptyBuffer("nothing to learn from")
    if not reinforce_weights(buffer, cfg.beta).any():
        return model
    _, grads = reinforce_gradient(model, buffer, points, cfg.beta)
    clip_grads(grads, cfg.grad_clip)
    for k, g in grads.items():
        model.params[k] -= cfg.learning_rate * g
    return model


@dataclass
class OnlineResult:
    model: QModel
    best: FitResult | None
    history: list[dict]

    @property
    def r_star(self) -> float:
        return self.history[-1]["R_star"] if self.history else 0.0


def explore(model: QModel, points, cfg: OnlineConfig, history_path=None) -> OnlineResult:
    """Refine a copy of ``model`` on one instance for ``cfg.budget`` samples."""
    cfg.validate()
    points = check_points(points)
    model = model.copy()
    rng = np.random.default_rng(cfg.seed)
    cache = RewardCache(points, cfg.restarts, cfg.seed)
    buffer = MemoryBuffer(cfg.capacity)
    best_actions, best_r = None, -1.0
    history = []
    for it in range(1, cfg.budget + 1):
        actions, r_tau = sample_trajectory(model, points, rng, cfg.temperature, cfg.max_len, cache)
        if r_tau > best_r:
            best_actions, best_r = actions, r_tau
        buffer.push(actions, r_tau)
        reinforce_update(model, buffer, points, cfg)
        best = _best_fit(cache, best_actions)
        history.append(
            {
                "iter": it,
                "R_tau": r_tau,
                "R_star": buffer.r_star,
                "best_skeleton": None if best is None else best.skeleton,
            }
        )
    if history_path:
        with open(history_path, "w", encoding="utf-8") as fh:
            for row in history:
                fh.write(json.dumps(row) + "\n")
    return OnlineResult(model, _best_fit(cache, best_actions), history)


def _best_fit(cache: RewardCache, actions) -> FitResult | None:
    return cache.fit(actions) if expr.from_actions(actions).complete else None


def config_dict(cfg: OnlineConfig) -> dict:
    return asdict(cfg)
