"""Decoding and constant fitting.

``beam_search`` proposes skeletons from a Q-model, ``fit_constants`` tunes
their ``c`` slots with a small BFGS implementation, and ``predict`` chains
the two and ranks the fitted expressions by R².
"""

from __future__ import annotations

import json
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np

from . import expr
from .env import check_points, r_squared
from .errors import AllRestartsFailed

INVALID_PENALTY = 1e10
CONST_BOUND = 1e6
FD_STEP = 1e-6
MAX_ITER = 200
GRAD_TOL = 1e-8
STEP_TOL = 1e-12
ARMIJO_C = 1e-4
# a restart this close to a perfect fit cannot be improved on meaningfully
EXACT_FIT = 1e-14


@dataclass
class BFGSResult:
    x: np.ndarray
    fun: float
    iterations: int
    history: list[float]


def _fd_gradient(fb, x, h):
    k = x.size
    pts = np.repeat(x[None, :], 2 * k, axis=0)
    idx = np.arange(k)
    pts[idx, idx] += h
    pts[k + idx, idx] -= h
    vals = fb(pts)
    return (vals[:k] - vals[k:]) / (2 * h)


def bfgs(
    f: Callable[[np.ndarray], np.ndarray],
    x0,
    *,
    batched: bool = True,
    max_iter: int = MAX_ITER,
    gtol: float = GRAD_TOL,
    xtol: float = STEP_TOL,
    h: float = FD_STEP,
    bound: float = CONST_BOUND,
) -> BFGSResult:
    """Minimise ``f`` by BFGS with backtracking Armijo steps.

    With ``batched=True`` ``f`` maps an (m, k) array of points to m values,
    which lets the central-difference gradient cost a single call.
    """
    fb = f if batched else (lambda X: np.array([f(row) for row in X]))
    x = np.clip(np.asarray(x0, dtype=float).copy(), -bound, bound)
    k = x.size
    fx = float(fb(x[None, :])[0])
    history = [fx]
    if k == 0:
        return BFGSResult(x, fx, 0, history)
    g = _fd_gradient(fb, x, h)
    H = np.eye(k)
    it = 0
    for it in range(1, max_iter + 1):
        if not np.all(np.isfinite(g)) or np.linalg.norm(g) < gtol:
            break
        p = -H @ g
        slope = float(g @ p)
        if not slope < 0:
            H = np.eye(k)
            p = -g
            slope = float(g @ p)
        t = 1.0
        accepted = False
        while t * np.linalg.norm(p) >= xtol:
            xn = np.clip(x + t * p, -bound, bound)
            fn = float(fb(xn[None, :])[0])
            if np.isfinite(fn) and fn <= fx + ARMIJO_C * t * slope:
                accepted = True
                break
            t *= 0.5
        if not accepted:
            break
        s = xn - x
        gn = _fd_gradient(fb, xn, h)
        yv = gn - g
        x, fx, g = xn, fn, gn
        history.append(fx)
        if np.linalg.norm(s) < xtol:
            break
        sy = float(s @ yv)
        if sy > 1e-12 * max(1.0, float(np.linalg.norm(s) * np.linalg.norm(yv))):
            rho = 1.0 / sy
            V = np.eye(k) - rho * np.outer(s, yv)
            H = V @ H @ V.T + rho * np.outer(s, s)
    return BFGSResult(x, fx, it, history)


@dataclass
class FitResult:
    skeleton: str
    constants: np.ndarray
    r2: float
    y_hat: np.ndarray = field(repr=False)
    actions: tuple[int, ...] = ()
    logp: float | None = None
    canonical: str | None = None
    histories: list[list[float]] = field(default_factory=list, repr=False)

    @property
    def tree(self) -> expr.ExprTree:
        return expr.from_actions(self.actions)

    @property
    def expression(self) -> str:
        return expr.to_expression_string(self.tree, self.constants)

    def to_dict(self, rank: int | None = None) -> dict:
        d = {
            "skeleton": self.skeleton,
            "canonical": self.canonical or expr.canonicalize(self.tree),
            "constants": [float(c) for c in self.constants],
            "r2": float(self.r2),
            "logp": None if self.logp is None else float(self.logp),
        }
        if rank is not None:
            d = {"rank": rank, **d}
        return d


def _objective(fn, points):
    x1, x2, y = points[:, 0], points[:, 1], points[:, 2]
    n = y.size
    var = float(np.var(y))

    def f(C):
        m = C.shape[0]
        consts = C.T[:, :, None]
        with np.errstate(all="ignore"):
            yh = fn(consts, np.broadcast_to(x1, (m, n)), np.broadcast_to(x2, (m, n)))
            err = (np.broadcast_to(yh, (m, n)) - y) ** 2 / var
        # mean squared error in units of Var(y); invalid points cost a flat penalty
        return np.where(np.isnan(err), INVALID_PENALTY, err).mean(axis=1)

    return f


def fit_constants(skeleton: expr.ExprTree, points, restarts: int = 20, seed: int = 0) -> FitResult:
    """Fit the ``c`` slots of ``skeleton`` to ``points`` by multi-start BFGS."""
    points = check_points(points)
    fn, k = expr.compile_tree(skeleton)
    y = points[:, 2]
    skel = expr.to_skeleton_string(skeleton)

    def predict(c):
        with np.errstate(all="ignore"):
            return np.broadcast_to(fn(np.asarray(c, dtype=float), points[:, 0], points[:, 1]), y.shape).copy()

    if k == 0:
        y_hat = predict(np.zeros(0))
        if np.isnan(y_hat).any():
            raise AllRestartsFailed(f"{skel} is invalid on some points")
        return FitResult(skel, np.zeros(0), r_squared(y, y_hat), y_hat, skeleton.actions)

    f = _objective(fn, points)
    rng = np.random.default_rng(seed)
    best = None
    histories = []
    for r in range(max(1, restarts)):
        x0 = np.ones(k) if r == 0 else rng.standard_normal(k)
        res = bfgs(f, x0)
        histories.append(res.history)
        if np.isnan(predict(res.x)).any():
            continue
        if best is None or res.fun < best.fun:
            best = res
        if best.fun < EXACT_FIT:
            break
    if best is None:
        raise AllRestartsFailed(f"every restart left {skel} invalid on some points")
    y_hat = predict(best.x)
    return FitResult(skel, best.x, r_squared(y, y_hat), y_hat, skeleton.actions, histories=histories)


# ---------------------------------------------------------------------------
# Decoding


@dataclass(frozen=True)
class Candidate:
    actions: tuple[int, ...]
    logp: float
    complete: bool

    def key(self):
        return (-self.logp, self.actions)


def log_softmax(q: np.ndarray) -> np.ndarray:
    m = q.max(axis=-1, keepdims=True)
    z = q - m
    return z - np.log(np.exp(z).sum(axis=-1, keepdims=True))


def sequence_logp(model, points, actions: Sequence[int]) -> float:
    """Log-probability of ``actions`` under softmax(Q), one prefix at a time."""
    zp = model.encode_points(points)
    total = 0.0
    for t, a in enumerate(actions):
        total += float(log_softmax(model.q_for_prefixes(zp, [actions[:t]])[0])[a])
    return total


def beam_search(model, points, beam: int = 128, max_len: int | None = None) -> list[Candidate]:
    """Up to ``beam`` complete candidates, best log-probability first.

    The live buffer holds ``2 * beam`` partial sequences.  Expansions that
    cannot be completed within ``max_len`` actions are dropped.  The search
    ends once the output buffer is full and no live sequence can still beat
    its worst entry, or when nothing is left alive.
    """
    if beam < 1:
        raise ValueError("beam must be >= 1")
    max_len = min(max_len or model.dims.max_len, model.dims.max_len)
    zp = model.encode_points(points)
    arity = expr.ARITY
    live = [((), 0.0, 1)]  # actions, logp, open slots
    out: list[Candidate] = []
    while live:
        lsm = log_softmax(model.q_for_prefixes(zp, [c[0] for c in live]))
        expansions = []
        for (acts, lp, slots), row in zip(live, lsm):
            n_open = slots - 1 + arity
            feasible = len(acts) + 1 + n_open <= max_len
            for a in np.flatnonzero(feasible):
                expansions.append(((acts + (int(a),)), lp + float(row[a]), int(n_open[a])))
        expansions.sort(key=lambda e: (-e[1], e[0]))
        done = [Candidate(a, lp, True) for a, lp, s in expansions if s == 0]
        out = sorted(out + done, key=Candidate.key)[:beam]
        live = [e for e in expansions if e[2] > 0][: 2 * beam]
        if len(out) == beam and (not live or live[0][1] <= out[-1].logp):
            break
    return out


def feasible_mask(lengths: np.ndarray, slots: np.ndarray, max_len: int) -> np.ndarray:
    """(R, 30) boolean mask of actions that still allow completion within max_len."""
    n_open = slots[:, None] - 1 + expr.ARITY[None, :]
    return lengths[:, None] + 1 + n_open <= max_len


def greedy_decode(model, point_sets: Sequence[np.ndarray], max_len: int | None = None) -> list[list[int]]:
    """Argmax decoding for many point clouds at once."""
    max_len = min(max_len or model.dims.max_len, model.dims.max_len)
    from .model import prefix_matrix

    n = len(point_sets)
    zp, _ = model._encode_sets(point_sets)
    seqs: list[list[int]] = [[] for _ in range(n)]
    slots = np.ones(n, dtype=np.int64)
    active = np.arange(n)
    while active.size:
        zt, _ = model._tree_forward(prefix_matrix([seqs[i] for i in active], model.dims.max_len))
        q, _ = model._head_forward(zp[active], zt)
        lengths = np.array([len(seqs[i]) for i in active])
        q = np.where(feasible_mask(lengths, slots[active], max_len), q, -np.inf)
        choice = q.argmax(axis=1)
        for i, a in zip(active, choice):
            seqs[i].append(int(a))
        slots[active] += expr.ARITY[choice] - 1
        active = active[slots[active] > 0]
    return seqs


def _fit_task(args):
    actions, points, restarts, seed = args
    try:
        return fit_constants(expr.from_actions(actions), points, restarts, seed)
    except AllRestartsFailed:
        return None


def rank_key(res: FitResult):
    # R² values that agree to 9 decimals are treated as ties and settled by logp
    return (-round(float(res.r2), 9), -(res.logp or 0.0), res.actions)


def predict(
    model,
    points,
    beam: int = 128,
    max_len: int | None = None,
    restarts: int = 20,
    seed: int = 0,
    jobs: int = 1,
) -> list[FitResult]:
    """Beam search, fit each distinct skeleton once, rank by R² (best first)."""
    points = check_points(points)
    cands = beam_search(model, points, beam, max_len)
    unique: dict[str, Candidate] = {}
    for c in cands:
        unique.setdefault(expr.canonicalize(expr.from_actions(c.actions)), c)
    tasks = [(c.actions, points, restarts, seed) for c in unique.values()]
    if jobs > 1 and len(tasks) > 1:
        with ProcessPoolExecutor(max_workers=jobs) as pool:
            fits = list(pool.map(_fit_task, tasks, chunksize=max(1, len(tasks) // (4 * jobs))))
    else:
        fits = [_fit_task(t) for t in tasks]
    results = []
    for (canon, cand), fit in zip(unique.items(), fits):
        if fit is None:
            continue
        fit.logp = cand.logp
        fit.canonical = canon
        results.append(fit)
    results.sort(key=rank_key)
    return results


def write_predictions(path, results: Sequence[FitResult]) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        for i, res in enumerate(results, 1):
            fh.write(json.dumps(res.to_dict(rank=i)) + "\n")
