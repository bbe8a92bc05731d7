import hashlib
from collections import Counter

import numpy as np
import pytest
from scipy import stats

from symq import datagen, expr
from symq.errors import ConfigError, CorpusError, DomainTooSmall

MINUS_ONE = expr.literal_id(-1)


def decompile_source_ops(tree):
    """Recover generator operators from a compiled skeleton tree."""
    counts = Counter()
    nodes = tree.nodes

    def rec(i, skip_mul=False):
        node = nodes[i]
        op = node.op
        if op == expr.ADD:
            a, b = node.children
            right = nodes[b]
            if right.op == expr.MUL and nodes[right.children[0]].op == MINUS_ONE:
                counts["sub"] += 1
                rec(a)
                rec(right.children[1])
                return
            counts["add"] += 1
        elif op == expr.MUL:
            counts["mul"] += 1
        elif op == expr.DIV:
            counts["div"] += 1
        elif op == expr.POW:
            base, exponent = node.children
            counts[f"pow{expr.literal_value(nodes[exponent].op)}"] += 1
            rec(base)
            return
        elif op == expr.LOG:
            counts["ln"] += 1
        elif expr.OPS[op].arity == 1:
            counts[expr.OPS[op].token] += 1
        for ch in node.children:
            rec(ch)

    rec(tree.root)
    return counts


def test_weights_table():
    w = datagen.OPERATOR_WEIGHTS
    assert sum(w.values()) == 65
    assert w["add"] / 65 == pytest.approx(10 / 65)
    assert datagen.SOURCE_OPS == (
        "add", "mul", "sub", "div", "sqrt", "exp", "ln", "sin", "cos", "tan",
        "pow2", "pow3", "pow4", "pow5",
    )


def test_operator_frequencies_chi2():
    cfg = datagen.GenConfig()
    rng = np.random.default_rng(2024)
    counts = Counter()
    for _ in range(10_000):
        counts += decompile_source_ops(datagen.sample_skeleton(rng, cfg))
    observed = np.array([counts[k] for k in datagen.SOURCE_OPS], dtype=float)
    weights = np.array([datagen.OPERATOR_WEIGHTS[k] for k in datagen.SOURCE_OPS], dtype=float)
    expected = observed.sum() * weights / weights.sum()
    p = stats.chisquare(observed, expected).pvalue
    assert p > 0.01, (p, dict(counts))


def test_decompiler_agrees_with_structure():
    cfg = datagen.GenConfig()
    rng = np.random.default_rng(5)
    for _ in range(300):
        structure, tree = datagen.sample_structure_and_skeleton(rng, cfg)
        assert decompile_source_ops(tree) == Counter(datagen.source_ops(structure))


def test_skeleton_invariants():
    cfg = datagen.GenConfig(max_ops=16)
    rng = np.random.default_rng(0)
    for _ in range(500):
        t = datagen.sample_skeleton(rng, cfg)
        assert t.complete
        assert t.length <= 16
        assert expr.variables_used(t)
        assert expr.n_constants(t) <= 5


def test_max_ops_one_is_variable_leaf():
    cfg = datagen.GenConfig(max_ops=1)
    rng = np.random.default_rng(0)
    for _ in range(50):
        t = datagen.sample_skeleton(rng, cfg)
        assert t.length == 1 and t.actions[0] in (expr.X1, expr.X2)


class TestConstants:
    def test_no_slots(self, rng):
        t = expr.parse_skeleton("x_1+x_2")
        assert datagen.instantiate_constants(t, rng, datagen.GenConfig()).size == 0

    def test_band_excluded(self, rng):
        t = expr.parse_skeleton("c*x_1")
        cfg = datagen.GenConfig()
        draws = np.concatenate([datagen.instantiate_constants(t, rng, cfg) for _ in range(100_000)])
        assert draws.size == 100_000
        assert np.all(np.abs(draws) >= 0.1)
        assert draws.min() >= -5 and draws.max() <= 5

    def test_instantiations_share_skeleton(self, rng):
        t = expr.parse_skeleton("c*x_1")
        cfg = datagen.GenConfig()
        values = {float(datagen.instantiate_constants(t, rng, cfg)[0]) for _ in range(50)}
        assert len(values) == 50
        assert len({expr.canonicalize(t)}) == 1


class TestPoints:
    def test_identity(self, rng):
        pts = datagen.sample_points(expr.parse_skeleton("x_1"), [], 100, rng, datagen.GenConfig())
        assert pts.shape == (100, 3)
        np.testing.assert_array_equal(pts[:, 2], pts[:, 0])

    def test_log_rejects_negative(self, rng):
        pts = datagen.sample_points(expr.parse_skeleton("log(x_1)"), [], 200, rng, datagen.GenConfig())
        assert np.all(pts[:, 0] > 0)
        assert np.all(np.isfinite(pts))

    def test_everywhere_invalid(self, rng):
        with pytest.raises(DomainTooSmall):
            datagen.sample_points(expr.parse_skeleton("1/(x_1-x_1)"), [], 10, rng, datagen.GenConfig())


class TestCorpus:
    def test_cardinality_and_determinism(self, tmp_path):
        cfg = datagen.GenConfig(n_skeletons=2, constants_per_skeleton=3, points_per_expression=10, seed=11)
        a, b = tmp_path / "a.ndj", tmp_path / "b.ndj"
        assert datagen.build_corpus(cfg, a) == 6
        datagen.build_corpus(cfg, b)
        assert hashlib.sha256(a.read_bytes()).digest() == hashlib.sha256(b.read_bytes()).digest()
        assert len(a.read_text().splitlines()) == 6

    def test_records_validate(self, tmp_path):
        cfg = datagen.GenConfig(n_skeletons=30, constants_per_skeleton=4, points_per_expression=20, seed=3)
        path = tmp_path / "c.ndj"
        datagen.build_corpus(cfg, path)
        records = datagen.read_corpus(path)
        assert datagen.validate_corpus(records) == 120
        for rec in records:
            assert expr.from_actions(rec.demo_actions) == expr.parse_skeleton(rec.skeleton)
        skeletons = {expr.canonicalize(expr.parse_skeleton(r.skeleton)) for r in records}
        assert len(skeletons) == 30

    def test_bad_line_reports_number(self, tmp_path):
        cfg = datagen.GenConfig(n_skeletons=1, constants_per_skeleton=2, points_per_expression=5)
        path = tmp_path / "c.ndj"
        datagen.build_corpus(cfg, path)
        lines = path.read_text().splitlines()
        path.write_text(lines[0] + "\n{not json\n")
        with pytest.raises(CorpusError) as exc:
            datagen.read_corpus(path)
        assert exc.value.line == 2

    def test_validator_catches_tampering(self, tmp_path):
        cfg = datagen.GenConfig(n_skeletons=1, constants_per_skeleton=1, points_per_expression=5)
        rec = next(datagen.iter_corpus(cfg))
        rec.points[0, 2] += 1.0
        with pytest.raises(CorpusError):
            datagen.validate_record(rec)

    @pytest.mark.parametrize(
        "kwargs",
        [dict(n_skeletons=0), dict(x_range=(1.0, 1.0)), dict(const_range=(3.0, -3.0)), dict(points_per_expression=-1)],
    )
    def test_config_validation(self, kwargs):
        with pytest.raises(ConfigError):
            datagen.GenConfig(**kwargs).validate()
