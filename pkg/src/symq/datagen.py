"""Training corpus generation: random skeletons, constants and point clouds."""

from __future__ import annotations

import json
import logging
import os
from dataclasses import asdict, dataclass, replace
from typing import Iterable, Iterator, Sequence

import numpy as np

from . import expr
from .errors import BudgetExceeded, ConfigError, CorpusError, DomainTooSmall, SymQError

log = logging.getLogger(__name__)

# Source operators of the generator and their unnormalised weights.
OPERATOR_WEIGHTS: dict[str, int] = {
    "add": 10,
    "mul": 10,
    "sub": 5,
    "div": 5,
    "sqrt": 4,
    "exp": 4,
    "ln": 4,
    "sin": 4,
    "cos": 4,
    "tan": 4,
    "pow2": 4,
    "pow3": 4,
    "pow4": 2,
    "pow5": 1,
}
SOURCE_OPS = tuple(OPERATOR_WEIGHTS)
_WEIGHTS = np.array([OPERATOR_WEIGHTS[k] for k in SOURCE_OPS], dtype=float)
_PROBS = _WEIGHTS / _WEIGHTS.sum()
SOURCE_ARITY = {k: 2 if k in ("add", "mul", "sub", "div") else 1 for k in SOURCE_OPS}
_UNARY_TARGET = {
    "sqrt": expr.SQRT,
    "exp": expr.EXP,
    "ln": expr.LOG,
    "sin": expr.SIN,
    "cos": expr.COS,
    "tan": expr.TAN,
}
# Net growth in action count when one open slot becomes the source operator
# with fresh open slots for its operands (sub compiles to +(a, *(-1, b)),
# powN to **(a, N)).
_GROWTH = {name: 1 for name in OPERATOR_WEIGHTS}
_GROWTH.update(add=2, mul=2, div=2, sub=4, pow2=2, pow3=2, pow4=2, pow5=2)
_MAX_GROWTH = max(_GROWTH.values())

LEAF_CHOICES = (expr.X1, expr.X2, expr.CONST)
MAX_CONSTANTS = 5
RETRIES = 100


@dataclass
class GenConfig:
    n_skeletons: int = 100
    constants_per_skeleton: int = 50
    points_per_expression: int = 100
    x_range: tuple[float, float] = (-10.0, 10.0)
    const_range: tuple[float, float] = (-5.0, 5.0)
    max_ops: int = 24
    max_depth: int = 8
    leaf_prob: float = 0.45
    seed: int = 0

    def validate(self) -> "GenConfig":
        for name in ("n_skeletons", "constants_per_skeleton", "points_per_expression", "max_ops"):
            if int(getattr(self, name)) <= 0:
                raise ConfigError(f"{name} must be positive")
        for name in ("x_range", "const_range"):
            lo, hi = getattr(self, name)
            if not lo < hi:
                raise ConfigError(f"{name} must be a non-degenerate interval, got {(lo, hi)}")
        lo, hi = self.const_range
        if hi <= 0.1 and lo >= -0.1:
            raise ConfigError("const_range lies inside the excluded band (-0.1, 0.1)")
        if not 0.0 < self.leaf_prob <= 1.0:
            raise ConfigError("leaf_prob must be in (0, 1]")
        return self


@dataclass
class CorpusRecord:
    skeleton: str
    constants: list[float]
    points: np.ndarray  # (n, 3) columns x1, x2, y
    demo_actions: list[int]

    def to_json(self) -> str:
        return json.dumps(
            {
                "skeleton": self.skeleton,
                "constants": [float(c) for c in self.constants],
                "points": [[float(v) for v in row] for row in self.points],
                "demo_actions": [int(a) for a in self.demo_actions],
            },
            separators=(",", ":"),
        )

    @classmethod
    def from_json(cls, line: str) -> "CorpusRecord":
        d = json.loads(line)
        pts = np.asarray(d["points"], dtype=float)
        if pts.ndim != 2 or pts.shape[1] != 3:
            raise ValueError("points must be an array of [x1, x2, y] triples")
        return cls(
            skeleton=str(d["skeleton"]),
            constants=[float(c) for c in d["constants"]],
            points=pts,
            demo_actions=[int(a) for a in d["demo_actions"]],
        )

    @property
    def tree(self) -> expr.ExprTree:
        return expr.from_actions(self.demo_actions)


# ---------------------------------------------------------------------------
# Skeletons


def _sample_structure(rng: np.random.Generator, cfg: GenConfig) -> list:
    """Nested (source_op, children) structure; leaves are the string 'leaf'."""
    budget = [cfg.max_ops - 1]  # the root slot already costs one action

    def grow(depth):
        # Force a leaf when even the costliest operator might not fit, so the
        # choice of operator among internal nodes never depends on the budget.
        # The root is internal whenever the budget allows.
        if depth >= cfg.max_depth or budget[0] < _MAX_GROWTH:
            return "leaf"
        if depth > 0 and rng.random() < cfg.leaf_prob:
            return "leaf"
        name = SOURCE_OPS[rng.choice(len(SOURCE_OPS), p=_PROBS)]
        budget[0] -= _GROWTH[name]
        return (name, [grow(depth + 1) for _ in range(SOURCE_ARITY[name])])

    return grow(0)


def _count_leaves(node) -> int:
    if node == "leaf":
        return 1
    return sum(_count_leaves(ch) for ch in node[1])


def _emit(node, leaves: Iterator[int], out: list[int]):
    if node == "leaf":
        out.append(next(leaves))
        return
    name, children = node
    if name == "add":
        out.append(expr.ADD)
    elif name == "mul":
        out.append(expr.MUL)
    elif name == "div":
        out.append(expr.DIV)
    elif name == "sub":
        out.append(expr.ADD)
        _emit(children[0], leaves, out)
        out.extend([expr.MUL, expr.literal_id(-1)])
        _emit(children[1], leaves, out)
        return
    elif name.startswith("pow"):
        out.append(expr.POW)
        _emit(children[0], leaves, out)
        out.append(expr.literal_id(int(name[3:])))
        return
    else:
        out.append(_UNARY_TARGET[name])
    for ch in children:
        _emit(ch, leaves, out)


def source_ops(structure) -> list[str]:
    """Source operators of a sampled structure in pre-order."""
    if structure == "leaf":
        return []
    name, children = structure
    out = [name]
    for ch in children:
        out.extend(source_ops(ch))
    return out


def sample_structure_and_skeleton(rng: np.random.Generator, cfg: GenConfig):
    if cfg.max_ops < 1:
        raise BudgetExceeded("max_ops must allow at least one action")
    structure = _sample_structure(rng, cfg)
    n_leaves = _count_leaves(structure)
    for _ in range(RETRIES):
        leaves = [LEAF_CHOICES[i] for i in rng.integers(0, 3, size=n_leaves)]
        if not any(a in (expr.X1, expr.X2) for a in leaves):
            continue
        if sum(a == expr.CONST for a in leaves) > MAX_CONSTANTS:
            continue
        actions: list[int] = []
        _emit(structure, iter(leaves), actions)
        if len(actions) > cfg.max_ops:
            continue
        return structure, expr.from_actions(actions)
    raise BudgetExceeded(f"no valid skeleton within max_ops={cfg.max_ops} after {RETRIES} retries")


def sample_skeleton(rng: np.random.Generator, cfg: GenConfig) -> expr.ExprTree:
    """Random complete skeleton with at least one variable and <= 5 constants."""
    return sample_structure_and_skeleton(rng, cfg)[1]


# ---------------------------------------------------------------------------
# Constants and points


def instantiate_constants(skeleton: expr.ExprTree, rng: np.random.Generator, cfg: GenConfig) -> np.ndarray:
    """One value per ``c`` slot, uniform on ``const_range`` minus (-0.1, 0.1)."""
    k = expr.n_constants(skeleton)
    lo, hi = cfg.const_range
    out = np.empty(k)
    filled = 0
    while filled < k:
        draw = rng.uniform(lo, hi, size=k - filled)
        draw = draw[np.abs(draw) >= 0.1]
        out[filled : filled + draw.size] = draw
        filled += draw.size
    return out


def sample_points(tree: expr.ExprTree, constants, n: int, rng: np.random.Generator, cfg: GenConfig) -> np.ndarray:
    """``n`` valid (x1, x2, y) rows, x uniform on ``x_range`` with rejection."""
    fn, _ = expr.compile_tree(tree)
    constants = np.asarray(constants, dtype=float)
    lo, hi = cfg.x_range
    budget = 50 * n
    rejected = 0
    chunks = []
    have = 0
    while have < n:
        m = max(2 * (n - have), 16)
        x = rng.uniform(lo, hi, size=(m, 2))
        with np.errstate(all="ignore"):
            y = np.broadcast_to(fn(constants, x[:, 0], x[:, 1]), (m,))
        ok = ~np.isnan(y)
        # only count rejections among draws we would actually have consumed
        take = np.flatnonzero(ok)[: n - have]
        used = (take[-1] + 1) if take.size == n - have else m
        rejected += int((~ok[:used]).sum())
        if rejected > budget:
            raise DomainTooSmall(f"more than {budget} invalid draws while sampling {n} points")
        chunks.append(np.column_stack([x[take], y[take]]))
        have += take.size
    return np.concatenate(chunks)[:n]


# ---------------------------------------------------------------------------
# Corpus


def _record_rng(seed: int, index: int, attempt: int) -> np.random.Generator:
    return np.random.default_rng([int(seed) & 0xFFFFFFFFFFFFFFFF, index, attempt])


def generate_skeleton_records(cfg: GenConfig, index: int, seen: set[str]) -> list[CorpusRecord]:
    """All records for skeleton ``index``; resamples until a fresh skeleton works."""
    for attempt in range(RETRIES):
        rng = _record_rng(cfg.seed, index, attempt)
        tree = sample_skeleton(rng, cfg)
        key = expr.canonicalize(tree)
        if key in seen:
            continue
        try:
            records = _instantiate(tree, rng, cfg)
        except DomainTooSmall:
            continue
        seen.add(key)
        return records
    raise BudgetExceeded(f"could not produce a usable new skeleton for index {index}")


def _instantiate(tree, rng, cfg) -> list[CorpusRecord]:
    skeleton = expr.to_skeleton_string(tree)
    records = []
    for _ in range(cfg.constants_per_skeleton):
        for _try in range(10):
            consts = instantiate_constants(tree, rng, cfg)
            try:
                pts = sample_points(tree, consts, cfg.points_per_expression, rng, cfg)
            except DomainTooSmall:
                continue
            if np.var(pts[:, 2]) > 1e-12 * max(1.0, float(np.mean(pts[:, 2] ** 2))):
                break
        else:
            raise DomainTooSmall("no usable constant instantiation")
        records.append(CorpusRecord(skeleton, consts.tolist(), pts, list(tree.actions)))
    return records


def iter_corpus(cfg: GenConfig) -> Iterator[CorpusRecord]:
    cfg.validate()
    seen: set[str] = set()
    for i in range(cfg.n_skeletons):
        yield from generate_skeleton_records(cfg, i, seen)


def build_corpus(cfg: GenConfig, path) -> int:
    """Write ``n_skeletons * constants_per_skeleton`` records; returns the count."""
    n = 0
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        for rec in iter_corpus(cfg):
            try:
                fh.write(rec.to_json() + "\n")
            except OSError as e:
                raise CorpusError(f"write failed for record {n}: {e}") from e
            n += 1
    log.info("wrote %d records to %s", n, path)
    return n


def read_corpus(path) -> list[CorpusRecord]:
    if not os.path.exists(path):
        raise CorpusError(f"corpus file not found: {path}")
    out = []
    with open(path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, 1):
            if not line.strip():
                continue
            try:
                out.append(CorpusRecord.from_json(line))
            except (ValueError, KeyError, TypeError) as e:
                raise CorpusError(f"malformed record: {e}", line=lineno) from e
    return out


def validate_record(rec: CorpusRecord) -> None:
    """Raise :class:`CorpusError` unless replay and finiteness invariants hold."""
    try:
        tree = expr.from_actions(rec.demo_actions)
        parsed = expr.parse_skeleton(rec.skeleton)
    except SymQError as e:
        raise CorpusError(f"bad skeleton or actions: {e}") from e
    if not tree.complete or tree != parsed:
        raise CorpusError("demo_actions do not replay to the skeleton")
    y = expr.evaluate_many(tree, rec.constants, rec.points[:, 0], rec.points[:, 1])
    if not np.all(np.isfinite(rec.points)) or np.isnan(y).any():
        raise CorpusError("non-finite point values")
    if not np.allclose(y, rec.points[:, 2], rtol=1e-9, atol=1e-12):
        raise CorpusError("stored y does not match the expression")


def validate_corpus(records: Iterable[CorpusRecord]) -> int:
    n = 0
    for i, rec in enumerate(records):
        try:
            validate_record(rec)
        except CorpusError as e:
            raise CorpusError(f"record {i}: {e}") from e
        n += 1
    return n


def config_dict(cfg: GenConfig) -> dict:
    return asdict(cfg)


def reinstantiate(trees: Sequence[expr.ExprTree], per_skeleton: int, cfg: GenConfig, seed: int) -> list[CorpusRecord]:
    """Fresh constants and points for known skeletons (an SSDNC-style set)."""
    out = []
    for i, tree in enumerate(trees):
        rng = np.random.default_rng([int(seed), i])
        out.extend(_instantiate(tree, rng, replace(cfg, constants_per_skeleton=per_skeleton)))
    return out
