import numpy as np
import pytest

from symq import expr, model, online, train
from symq.errors import ConfigError, EmptyBuffer


@pytest.fixture
def points(rng):
    x = rng.uniform(-2, 2, size=(40, 2))
    return np.column_stack([x, np.sin(x[:, 0] + x[:, 1])])


@pytest.fixture
def flat_model():
    m = model.QModel(model.TINY, seed=0)
    m.params["qh.wo"][:] = 0
    m.params["qh.bo"][:] = 0
    return m


def test_defaults():
    cfg = online.OnlineConfig()
    assert (cfg.budget, cfg.beta, cfg.capacity) == (50, 0.7, 512)


@pytest.mark.parametrize("kw", [dict(budget=0), dict(beta=1.5), dict(temperature=0)])
def test_config_validation(kw):
    with pytest.raises(ConfigError):
        online.OnlineConfig(**kw).validate()


def test_uniform_first_action(flat_model, points):
    rng = np.random.default_rng(0)
    counts = np.zeros(30)
    for _ in range(3000):
        zp = flat_model.encode_points(points)
        q = flat_model.q_for_prefixes(zp, [[]])[0]
        p = np.exp(q - q.max())
        counts[rng.choice(30, p=p / p.sum())] += 1
    # with equal Q every action has probability 1/30 (binomial 4-sigma band)
    sd = np.sqrt(3000 * (1 / 30) * (29 / 30))
    assert np.all(np.abs(counts - 100) < 4 * sd)


def test_sampler_first_action_uniform(flat_model, points):
    cache = online.RewardCache(points)
    firsts = np.zeros(30)
    rng = np.random.default_rng(1)
    for _ in range(1500):
        acts, _ = online.sample_trajectory(flat_model, points, rng, temperature=1.0, max_len=8, cache=cache)
        firsts[acts[0]] += 1
    sd = np.sqrt(1500 * (1 / 30) * (29 / 30))
    assert np.all(np.abs(firsts - 50) < 4 * sd)


def test_sample_deterministic(points):
    m = model.QModel(model.TINY, seed=4)
    a = online.sample_trajectory(m, points, np.random.default_rng(7))
    b = online.sample_trajectory(m, points, np.random.default_rng(7))
    assert a == b


def test_truncated_sample_scores_zero(flat_model, points):
    m = flat_model.copy()
    m.params["qh.bo"][expr.ADD] = 100.0
    acts, r = online.sample_trajectory(m, points, np.random.default_rng(0), temperature=1.0, max_len=5)
    assert len(acts) == 5 and r == 0.0


def test_overfit_model_prefers_demo(points):
    from symq.datagen import CorpusRecord

    demo = list(expr.parse_skeleton("sin(x_1+x_2)").actions)
    rec = CorpusRecord("s", [], points, demo)
    m = model.QModel(model.TINY, seed=0)
    batch = train.decision_batch([rec])
    for _ in range(150):
        _, g = m.backward(batch, train.make_loss_fn(batch, alpha=0.0))
        model.clip_grads(g, 1.0)
        for k in g:
            m.params[k] -= 0.1 * g[k]
    rng = np.random.default_rng(0)
    hits = sum(online.sample_trajectory(m, points, rng, temperature=1.0)[0] == demo for _ in range(1000))
    assert hits / 1000 > 30.0 ** -len(demo)
    assert hits > 100


class TestBuffer:
    def test_push_and_r_star(self):
        buf = online.MemoryBuffer(capacity=100)
        buf.push([4, 0, 1], 0.3)
        buf.push([0], 0.8)
        buf.push([1], 0.1)
        assert len(buf) == 5 and buf.r_star == 0.8
        assert buf.entries[1].prefix == (4,) and buf.entries[1].action == 0

    def test_eviction_lowest_then_oldest(self):
        buf = online.MemoryBuffer(capacity=3)
        buf.push([0], 0.5)
        buf.push([1], 0.2)
        buf.push([0], 0.2)
        buf.push([1], 0.9)
        rewards = [(e.action, e.r_tau) for e in buf.entries]
        assert rewards == [(0, 0.5), (0, 0.2), (1, 0.9)]
        assert buf.r_star == 0.9


class TestReinforce:
    def test_empty(self, flat_model, points):
        with pytest.raises(EmptyBuffer):
            online.reinforce_update(flat_model, online.MemoryBuffer(), points, online.OnlineConfig())

    def test_threshold_gives_no_change(self, points):
        m = model.QModel(model.TINY, seed=2)
        before = {k: v.copy() for k, v in m.params.items()}
        buf = online.MemoryBuffer()
        buf.push([5, 0, 2], 0.6)
        online.reinforce_update(m, buf, points, online.OnlineConfig(beta=1.0))
        for k in before:
            np.testing.assert_array_equal(m.params[k], before[k])

    def test_filtered_entries_contribute_nothing(self, points):
        m = model.QModel(model.TINY, seed=2)
        good = online.MemoryBuffer()
        good.push([4, 0, 1], 1.0)
        mixed = online.MemoryBuffer()
        mixed.push([4, 0, 1], 1.0)
        mixed.push([11, 1], 0.2)  # below 0.7 * R*
        _, g_good = online.reinforce_gradient(m, good, points, 0.7)
        _, g_mixed = online.reinforce_gradient(m, mixed, points, 0.7)
        # the mean runs over all entries, so only the scale differs
        for k in g_good:
            np.testing.assert_allclose(g_mixed[k] * len(mixed), g_good[k] * len(good), atol=1e-12)

    def test_offline_special_case(self, points):
        from symq.datagen import CorpusRecord

        m = model.QModel(model.TINY, seed=3)
        acts = list(expr.parse_skeleton("sin(x_1+x_2)").actions)
        buf = online.MemoryBuffer()
        buf.push(acts, 1.0)
        _, g_rl = online.reinforce_gradient(m, buf, points, beta=0.0)
        batch = train.decision_batch([CorpusRecord("s", [], points, acts)])
        _, g_off = m.backward(batch, train.make_loss_fn(batch, alpha=0.0))
        for k in g_rl:
            np.testing.assert_allclose(g_rl[k], g_off[k], atol=1e-12)

    def test_best_logp_does_not_drop(self, points):
        from symq.infer import sequence_logp

        m = model.QModel(model.TINY, seed=5)
        buf = online.MemoryBuffer()
        best = [11, 4, 0, 1]
        buf.push(best, 0.9)
        buf.push([0], 0.1)
        before = sequence_logp(m, points, best)
        online.reinforce_update(m, buf, points, online.OnlineConfig(learning_rate=1e-3))
        assert sequence_logp(m, points, best) >= before


def test_explore_history(points, tmp_path):
    m = model.QModel(model.TINY, seed=6)
    path = tmp_path / "h.ndj"
    res = online.explore(m, points, online.OnlineConfig(budget=12, seed=1), history_path=path)
    rs = [h["R_star"] for h in res.history]
    assert len(rs) == 12
    assert all(b >= a for a, b in zip(rs, rs[1:]))
    assert rs[-1] == max(h["R_tau"] for h in res.history)
    if res.best is not None:
        assert min(1.0, max(0.0, res.best.r2)) == pytest.approx(rs[-1])
    assert len(path.read_text().splitlines()) == 12
    # the caller's model is left untouched
    assert all(np.array_equal(m.params[k], model.QModel(model.TINY, seed=6).params[k]) for k in m.names)


def test_explore_budget_one(points):
    res = online.explore(model.QModel(model.TINY, seed=6), points, online.OnlineConfig(budget=1))
    assert len(res.history) == 1
