"""Action vocabulary and incrementally built expression trees.

A tree is grown one action at a time: each action replaces the leftmost
(pre-order) placeholder with an operator, variable, constant slot ``c`` or
integer literal, appending one new placeholder per operand.  Because the
expansion order is fixed, the action sequence of a complete tree is exactly
its pre-order traversal.
"""

from __future__ import annotations

import math
import re
from dataclasses import dataclass, field
from functools import lru_cache
from typing import Callable, Sequence

import numpy as np

from .errors import (
    CompleteTree,
    ConstantCountMismatch,
    IncompleteTree,
    ParseError,
    TooLong,
    UnknownOp,
)

N_ACTIONS = 30
DEFAULT_MAX_LEN = 32

# Numeric guards shared by evaluation and fitting.
MAX_ABS_VALUE = 1e12
MIN_ABS_DENOMINATOR = 1e-12


@dataclass(frozen=True)
class OpCode:
    id: int
    token: str
    arity: int
    kind: str  # variable | constant-placeholder | integer-literal | unary | binary

    @property
    def is_leaf(self) -> bool:
        return self.arity == 0


def _build_ops() -> tuple[OpCode, ...]:
    table = [
        ("x_1", 0, "variable"),
        ("x_2", 0, "variable"),
        ("c", 0, "constant-placeholder"),
        ("abs", 1, "unary"),
        ("+", 2, "binary"),
        ("*", 2, "binary"),
        ("/", 2, "binary"),
        ("sqrt", 1, "unary"),
        ("exp", 1, "unary"),
        ("log", 1, "unary"),
        ("**", 2, "binary"),
        ("sin", 1, "unary"),
        ("cos", 1, "unary"),
        ("tan", 1, "unary"),
        ("asin", 1, "unary"),
        ("acos", 1, "unary"),
        ("atan", 1, "unary"),
        ("sinh", 1, "unary"),
        ("cosh", 1, "unary"),
        ("tanh", 1, "unary"),
        ("coth", 1, "unary"),
    ]
    table += [(str(v), 0, "integer-literal") for v in range(-3, 6)]
    return tuple(OpCode(i, tok, ar, kind) for i, (tok, ar, kind) in enumerate(table))


OPS: tuple[OpCode, ...] = _build_ops()
assert len(OPS) == N_ACTIONS

X1, X2, CONST = 0, 1, 2
ABS, ADD, MUL, DIV, SQRT, EXP, LOG, POW = 3, 4, 5, 6, 7, 8, 9, 10
SIN, COS, TAN, ASIN, ACOS, ATAN, SINH, COSH, TANH, COTH = range(11, 21)
LITERAL_MIN, LITERAL_MAX = -3, 5

TOKEN_TO_ID = {op.token: op.id for op in OPS}
UNARY_NAMES = {op.token: op.id for op in OPS if op.kind == "unary"}
ARITY = np.array([op.arity for op in OPS], dtype=np.int64)


def literal_id(value: int) -> int:
    if not LITERAL_MIN <= value <= LITERAL_MAX:
        raise ValueError(f"literal {value} outside {LITERAL_MIN}..{LITERAL_MAX}")
    return 21 + value - LITERAL_MIN


def literal_value(op_id: int) -> int:
    return op_id - 21 + LITERAL_MIN


def is_literal(op_id: int) -> bool:
    return 21 <= op_id <= 29


def check_op(op_id) -> int:
    if isinstance(op_id, OpCode):
        op_id = op_id.id
    if isinstance(op_id, (bool, np.bool_)) or not isinstance(op_id, (int, np.integer)):
        raise UnknownOp(f"action {op_id!r} is not an integer id")
    if not 0 <= op_id < N_ACTIONS:
        raise UnknownOp(f"action id {op_id} outside 0..{N_ACTIONS - 1}")
    return int(op_id)


# ---------------------------------------------------------------------------
# Trees


@dataclass(frozen=True)
class Node:
    op: int | None  # None marks a placeholder
    children: tuple[int, ...] = ()


PLACEHOLDER = Node(None)


@dataclass(frozen=True, eq=False)
class ExprTree:
    """Arena of nodes plus the ordered list of open placeholders.

    Instances are immutable; :func:`apply_action` returns a new tree.
    Equality is structural (same pre-order of ops, same open slots).
    """

    nodes: tuple[Node, ...] = (PLACEHOLDER,)
    root: int = 0
    frontier: tuple[int, ...] = (0,)
    actions: tuple[int, ...] = field(default=())

    @property
    def length(self) -> int:
        return len(self.actions)

    @property
    def complete(self) -> bool:
        return not self.frontier

    def __eq__(self, other):
        if not isinstance(other, ExprTree):
            return NotImplemented
        return self.actions == other.actions

    def __hash__(self):
        return hash(self.actions)

    def __repr__(self):
        if self.complete:
            return f"ExprTree({to_skeleton_string(self)!r})"
        return f"ExprTree(actions={list(self.actions)}, open={len(self.frontier)})"


def empty_tree() -> ExprTree:
    return ExprTree()


def apply_action(tree: ExprTree, op) -> ExprTree:
    op = check_op(op)
    if not tree.frontier:
        raise CompleteTree("no open placeholder left to expand")
    target = tree.frontier[0]
    arity = OPS[op].arity
    nodes = list(tree.nodes)
    start = len(nodes)
    children = tuple(range(start, start + arity))
    nodes.extend([PLACEHOLDER] * arity)
    nodes[target] = Node(op, children)
    return ExprTree(
        nodes=tuple(nodes),
        root=tree.root,
        frontier=children + tree.frontier[1:],
        actions=tree.actions + (op,),
    )


def from_actions(actions: Sequence[int]) -> ExprTree:
    tree = empty_tree()
    for a in actions:
        tree = apply_action(tree, a)
    return tree


def is_complete(tree: ExprTree) -> bool:
    return not tree.frontier


def to_preorder(tree: ExprTree) -> list[int]:
    """Pre-order op ids of the expanded nodes (placeholders skipped)."""
    out = []
    stack = [tree.root]
    while stack:
        node = tree.nodes[stack.pop()]
        if node.op is None:
            continue
        out.append(node.op)
        stack.extend(reversed(node.children))
    return out


def open_slots_after(actions: Sequence[int]) -> int:
    """Number of open placeholders after replaying ``actions``."""
    return 1 + int(sum(OPS[a].arity - 1 for a in actions))


def n_constants(tree: ExprTree) -> int:
    return sum(1 for a in tree.actions if a == CONST)


def variables_used(tree: ExprTree) -> set[int]:
    return {a for a in tree.actions if a in (X1, X2)}


# ---------------------------------------------------------------------------
# One-hot encoding


@dataclass(frozen=True)
class TreeMatrix:
    rows: np.ndarray  # (max_len, N_ACTIONS)
    length: int


def encode_actions(actions: Sequence[int], max_len: int) -> np.ndarray:
    if len(actions) > max_len:
        raise TooLong(f"{len(actions)} actions exceed max_len={max_len}")
    m = np.zeros((max_len, N_ACTIONS))
    if len(actions):
        m[np.arange(len(actions)), np.asarray(actions, dtype=np.int64)] = 1.0
    return m


def encode_matrix(tree: ExprTree, max_len: int = DEFAULT_MAX_LEN) -> TreeMatrix:
    return TreeMatrix(encode_actions(tree.actions, max_len), tree.length)


# ---------------------------------------------------------------------------
# Evaluation

_UNARY_FUNCS: dict[int, Callable[[np.ndarray], np.ndarray]] = {
    ABS: np.abs,
    SQRT: np.sqrt,
    EXP: np.exp,
    LOG: np.log,
    SIN: np.sin,
    COS: np.cos,
    TAN: np.tan,
    ASIN: np.arcsin,
    ACOS: np.arccos,
    ATAN: np.arctan,
    SINH: np.sinh,
    COSH: np.cosh,
    TANH: np.tanh,
}


def _guard(v: np.ndarray) -> np.ndarray:
    bad = ~np.isfinite(v) | (np.abs(v) > MAX_ABS_VALUE)
    if bad.any():
        v = np.where(bad, np.nan, v)
    return v


def _domain_ok(op: int, a: np.ndarray) -> np.ndarray | None:
    if op == LOG:
        return a > 0
    if op == SQRT:
        return a >= 0
    if op in (ASIN, ACOS):
        return np.abs(a) <= 1
    return None


def _compile_node(nodes, idx, const_slots):
    node = nodes[idx]
    op = node.op
    if op == X1:
        return lambda c, x1, x2: x1
    if op == X2:
        return lambda c, x1, x2: x2
    if op == CONST:
        k = const_slots[idx]
        return lambda c, x1, x2: np.full(x1.shape, c[k], dtype=float)
    if is_literal(op):
        val = float(literal_value(op))
        return lambda c, x1, x2: np.full(x1.shape, val)

    subs = [_compile_node(nodes, ch, const_slots) for ch in node.children]
    if op == COTH:
        (f,) = subs

        def coth(c, x1, x2):
            a = f(c, x1, x2)
            s = np.sinh(a)
            ok = np.abs(s) >= MIN_ABS_DENOMINATOR
            return _guard(np.where(ok, np.cosh(a) / np.where(ok, s, 1.0), np.nan))

        return coth
    if op in _UNARY_FUNCS:
        (f,) = subs
        fn = _UNARY_FUNCS[op]

        def unary(c, x1, x2):
            a = f(c, x1, x2)
            ok = _domain_ok(op, a)
            if ok is not None:
                a = np.where(ok, a, np.nan)
            return _guard(fn(a))

        return unary

    f, g = subs
    if op == ADD:
        return lambda c, x1, x2: _guard(f(c, x1, x2) + g(c, x1, x2))
    if op == MUL:
        return lambda c, x1, x2: _guard(f(c, x1, x2) * g(c, x1, x2))
    if op == DIV:

        def div(c, x1, x2):
            a, b = f(c, x1, x2), g(c, x1, x2)
            ok = np.abs(b) >= MIN_ABS_DENOMINATOR
            return _guard(np.where(ok, a / np.where(ok, b, 1.0), np.nan))

        return div
    if op == POW:

        def power(c, x1, x2):
            a, b = f(c, x1, x2), g(c, x1, x2)
            out = np.power(a, b)
            # numpy returns 1 for nan**0 and 1**nan; invalid operands must stay invalid
            return _guard(np.where(np.isnan(a) | np.isnan(b), np.nan, out))

        return power
    raise UnknownOp(f"cannot evaluate op {op}")  # pragma: no cover


@lru_cache(maxsize=4096)
def _compiled(actions: tuple[int, ...]):
    tree = from_actions(actions)
    const_slots = {}
    stack = [tree.root]
    while stack:
        i = stack.pop()
        node = tree.nodes[i]
        if node.op == CONST:
            const_slots[i] = len(const_slots)
        stack.extend(reversed(node.children))
    return _compile_node(tree.nodes, tree.root, const_slots), len(const_slots)


def compile_tree(tree: ExprTree):
    """Return ``(fn, n_const)`` where ``fn(constants, x1, x2)`` is vectorised.

    Entries that are out of domain, non-finite or beyond the magnitude guard
    come back as NaN.
    """
    if not tree.complete:
        raise IncompleteTree("cannot evaluate a tree with open placeholders")
    return _compiled(tree.actions)


def evaluate_many(tree: ExprTree, constants, x1, x2) -> np.ndarray:
    fn, k = compile_tree(tree)
    constants = np.asarray(constants, dtype=float).reshape(-1)
    if constants.size != k:
        raise ConstantCountMismatch(f"tree has {k} constant slots, got {constants.size} values")
    x1 = np.asarray(x1, dtype=float)
    x2 = np.asarray(x2, dtype=float)
    with np.errstate(all="ignore"):
        out = fn(constants, x1, x2)
    return np.asarray(out, dtype=float)


def evaluate(tree: ExprTree, constants, point) -> float | None:
    """Value at a single ``(x1, x2)`` point, or ``None`` when invalid."""
    x1, x2 = point
    v = float(evaluate_many(tree, constants, np.array([x1]), np.array([x2]))[0])
    return None if math.isnan(v) else v


# ---------------------------------------------------------------------------
# Printing


def _fmt_number(v: float) -> str:
    s = repr(float(v))
    return f"({s})" if v < 0 else s


def _render(tree: ExprTree, constants=None) -> str:
    it = iter(constants) if constants is not None else None

    def rec(i):
        node = tree.nodes[i]
        op = node.op
        if op is None:
            return "?"
        tok = OPS[op].token
        if op == CONST:
            return tok if it is None else _fmt_number(next(it))
        if is_literal(op):
            return f"({tok})" if literal_value(op) < 0 else tok
        if OPS[op].arity == 0:
            return tok
        if OPS[op].arity == 1:
            return f"{tok}({rec(node.children[0])})"
        a, b = node.children
        return f"({rec(a)}{tok}{rec(b)})"

    return rec(tree.root)


def to_skeleton_string(tree: ExprTree) -> str:
    """Fully parenthesised infix form; open slots render as ``?``."""
    return _render(tree)


def to_expression_string(tree: ExprTree, constants) -> str:
    """Like :func:`to_skeleton_string` with constant values substituted."""
    if len(constants) != n_constants(tree):
        raise ConstantCountMismatch(
            f"tree has {n_constants(tree)} constant slots, got {len(constants)} values"
        )
    return _render(tree, list(constants))


# ---------------------------------------------------------------------------
# Parsing

_TOKEN_RE = re.compile(
    r"\s*(?:(?P<num>\d+(?:\.\d*)?(?:[eE][+-]?\d+)?|\.\d+(?:[eE][+-]?\d+)?)"
    r"|(?P<name>[A-Za-z_][A-Za-z0-9_]*)"
    r"|(?P<op>\*\*|[-+*/()]))"
)


def _tokenize(s: str):
    pos = 0
    out = []
    s = s.rstrip()
    while pos < len(s):
        m = _TOKEN_RE.match(s, pos)
        if m is None or m.end() == pos:
            bad = pos + len(s[pos:]) - len(s[pos:].lstrip())
            raise ParseError(f"unexpected character {s[bad]!r}", bad)
        kind = m.lastgroup
        start = m.start(kind)
        out.append((kind, m.group(kind), start))
        pos = m.end()
    out.append(("end", "", len(s)))
    return out


# AST: ("op", id, [children]) | ("num", value, is_integer)


class _Parser:
    def __init__(self, text: str, strict: bool):
        self.tokens = _tokenize(text)
        self.i = 0
        self.strict = strict

    def peek(self):
        return self.tokens[self.i]

    def take(self):
        tok = self.tokens[self.i]
        self.i += 1
        return tok

    def expect(self, value):
        kind, val, pos = self.take()
        if val != value:
            raise ParseError(f"expected {value!r}, found {val or 'end of input'!r}", pos)

    def parse(self):
        node = self.expr()
        kind, val, pos = self.peek()
        if kind != "end":
            raise ParseError(f"unexpected token {val!r}", pos)
        return node

    def expr(self):
        left = self.term()
        while self.peek()[1] in ("+", "-"):
            _, sym, _ = self.take()
            right = self.term()
            if sym == "-":
                right = _negate(right)
            left = ("op", ADD, [left, right])
        return left

    def term(self):
        left = self.unary()
        while self.peek()[1] in ("*", "/"):
            _, sym, _ = self.take()
            right = self.unary()
            left = ("op", MUL if sym == "*" else DIV, [left, right])
        return left

    def unary(self):
        if self.peek()[1] == "-":
            self.take()
            return _negate(self.unary())
        if self.peek()[1] == "+":
            self.take()
            return self.unary()
        return self.power()

    def power(self):
        base = self.atom()
        if self.peek()[1] == "**":
            self.take()
            return ("op", POW, [base, self.unary()])
        return base

    def atom(self):
        kind, val, pos = self.take()
        if kind == "num":
            is_int = re.fullmatch(r"\d+", val) is not None
            return ("num", int(val) if is_int else float(val), is_int, pos)
        if kind == "name":
            if val in ("x_1", "x_2", "c"):
                return ("op", TOKEN_TO_ID[val], [])
            if val == "pi":
                if self.strict:
                    raise ParseError("numeric constant 'pi' is not allowed in a skeleton", pos)
                return ("num", math.pi, False, pos)
            if val in UNARY_NAMES:
                self.expect("(")
                arg = self.expr()
                self.expect(")")
                return ("op", UNARY_NAMES[val], [arg])
            raise ParseError(f"unknown name {val!r}", pos)
        if val == "(":
            inner = self.expr()
            self.expect(")")
            return inner
        raise ParseError(f"unexpected token {val or 'end of input'!r}", pos)


def _negate(node):
    if node[0] == "num":
        _, v, is_int, pos = node
        return ("num", -v, is_int, pos)
    return ("op", MUL, [("num", -1, True, None), node])


def _flatten(node, strict: bool, actions: list, values: list):
    if node[0] == "num":
        _, v, is_int, pos = node
        if is_int and LITERAL_MIN <= v <= LITERAL_MAX:
            actions.append(literal_id(int(v)))
            return
        if strict:
            raise ParseError(
                f"number {v!r} is not an integer literal in {LITERAL_MIN}..{LITERAL_MAX}", pos
            )
        actions.append(CONST)
        values.append(float(v))
        return
    _, op, children = node
    actions.append(op)
    if op == CONST:
        values.append(None)
    for ch in children:
        _flatten(ch, strict, actions, values)


def parse_skeleton(s: str) -> ExprTree:
    """Parse the skeleton grammar (x_1, x_2, c, literals -3..5, 14 functions)."""
    ast = _Parser(s, strict=True).parse()
    actions: list[int] = []
    _flatten(ast, True, actions, [])
    return from_actions(actions)


def parse_expression(s: str) -> tuple[ExprTree, list[float | None]]:
    """Parse an expression that may contain numeric constants and ``pi``.

    Numbers that are not integer literals in -3..5 become ``c`` slots; their
    values are returned in pre-order (``None`` for slots written as ``c``).
    """
    ast = _Parser(s, strict=False).parse()
    actions: list[int] = []
    values: list[float | None] = []
    _flatten(ast, False, actions, values)
    return from_actions(actions), values


# ---------------------------------------------------------------------------
# Canonical form


def canonicalize(tree: ExprTree) -> str:
    """Deterministic string identifying a skeleton up to simple algebra.

    Variable-free subtrees collapse to ``C``; ``+`` and ``*`` are flattened
    and their operands sorted; ``a/b`` is read as ``a*b**-1``.  Integer
    literal exponents of ``**`` are kept.
    """
    if not tree.complete:
        raise IncompleteTree("cannot canonicalize an incomplete tree")
    nodes = tree.nodes

    def rec(i) -> tuple[str, bool]:
        node = nodes[i]
        op = node.op
        if op in (X1, X2):
            return OPS[op].token, True
        if OPS[op].arity == 0:
            return "C", False
        if OPS[op].arity == 1:
            s, var = rec(node.children[0])
            return (f"{OPS[op].token}({s})", True) if var else ("C", False)
        a, b = node.children
        if op == POW:
            return power(a, b)
        if op == ADD:
            return nary("+", collect(i, ADD))
        return nary("*", collect(i, MUL))

    def power(a, b):
        sa, va = rec(a)
        if not va:
            sb, vb = rec(b)
            return ("C", False) if not vb else (f"(C**{sb})", True)
        op_b = nodes[b].op
        if is_literal(op_b):
            return f"({sa}**{literal_value(op_b)})", True
        sb, vb = rec(b)
        return f"({sa}**{sb})", True

    def collect(i, kind):
        """Operand strings of a flattened + or * chain rooted at node i."""
        node = nodes[i]
        op = node.op
        if kind == ADD and op == ADD or kind == MUL and op == MUL:
            return collect(node.children[0], kind) + collect(node.children[1], kind)
        if kind == MUL and op == DIV:
            num, den = node.children
            sd, vd = rec(den)
            inv = (f"({sd}**-1)", True) if vd else ("C", False)
            return collect(num, kind) + [inv]
        return [rec(i)]

    def nary(sym, parts):
        with_var = sorted(s for s, v in parts if v)
        if not with_var:
            return "C", False
        if len(with_var) < len(parts):
            with_var = sorted(with_var + ["C"])
        if len(with_var) == 1:
            return with_var[0], True
        return "(" + sym.join(with_var) + ")", True

    return rec(tree.root)[0]
