import numpy as np
import pytest

from symq import expr, model, train
from symq.errors import CorruptCheckpoint, NonFiniteInput, VersionMismatch


def tiny_batch(rng, n_sets=4, n_points=7):
    sets = [rng.uniform(-3, 3, size=(n_points, 3)) for _ in range(n_sets)]
    prefixes = [[], [4], [4, 0], [11, 5], [0], [5, 2]]
    rec = np.array([i % n_sets for i in range(len(prefixes))])
    targets = rng.integers(0, 30, size=len(prefixes))
    labels = ["a", "a", "b", "b"][:n_sets]
    return model.DecisionBatch(sets, rec, prefixes, targets=targets, labels=labels)


def loss_fn_for(batch, alpha=0.2):
    return train.make_loss_fn(batch, alpha=alpha, tau=0.07)


def test_shapes(rng):
    m = model.QModel(model.TINY)
    pts = rng.normal(size=(10, 3))
    zp = m.encode_points(pts)
    assert zp.shape == (16,)
    zt = m.encode_tree(expr.encode_matrix(expr.from_actions([4, 0]), 32))
    assert zt.shape == (16,)
    assert m.q_values(zp, zt).shape == (30,)


def test_full_scale_preset():
    d = model.FULL_SCALE
    assert (d.hidden, d.fusion, d.layers) == (512, 4096, 4)


def test_permutation_invariance(rng):
    m = model.QModel(model.TINY, seed=3)
    pts = rng.normal(size=(100, 3)) * 5
    ref = m.encode_points(pts)
    for _ in range(20):
        np.testing.assert_array_equal(m.encode_points(rng.permutation(pts)), ref)


def test_duplicate_point_pooling(rng):
    m = model.QModel(model.TINY, seed=3)
    p = rng.normal(size=(1, 3))
    ref = m.encode_points(p)
    for k in (2, 5, 17):
        np.testing.assert_allclose(m.encode_points(np.repeat(p, k, axis=0)), ref, rtol=1e-12, atol=1e-14)


def test_non_finite_points():
    m = model.QModel(model.TINY)
    with pytest.raises(NonFiniteInput):
        m.encode_points(np.array([[1.0, np.nan, 2.0]]))
    with pytest.raises(NonFiniteInput):
        m.encode_points(np.zeros((0, 3)))


def test_tree_encoder():
    m = model.QModel(model.TINY, seed=1)
    enc = lambda acts: m.encode_tree(expr.encode_matrix(expr.from_actions(acts), 32))
    start = enc([])
    assert np.all(np.isfinite(start))
    assert not np.allclose(enc([4, 0]), enc([0]))
    np.testing.assert_array_equal(enc([4, 0]), enc([4, 0]))
    # order matters: same multiset of actions, different positions
    a = m.encode_tree(expr.encode_actions([5, 0, 1], 32))
    b = m.encode_tree(expr.encode_actions([5, 1, 0], 32))
    assert not np.allclose(a, b)


def test_zero_head_gives_equal_q(rng):
    m = model.QModel(model.TINY, seed=2)
    m.params["qh.wo"][:] = 0
    m.params["qh.bo"][:] = 0
    q = m.q_values(m.encode_points(rng.normal(size=(5, 3))), m.encode_tree(np.zeros((32, 30))))
    assert np.all(q == q[0])


def test_gradient_check(rng):
    m = model.QModel(model.TINY, seed=7)
    batch = tiny_batch(rng)
    loss_fn = loss_fn_for(batch)
    _, grads = m.backward(batch, loss_fn)

    def loss_at():
        q, zp = m.forward(batch)
        return loss_fn(q, zp)[0]

    h = 1e-4
    names = m.names
    for _ in range(50):
        name = names[rng.integers(len(names))]
        arr = m.params[name]
        idx = tuple(rng.integers(s) for s in arr.shape)
        old = arr[idx]
        arr[idx] = old + h
        up = loss_at()
        arr[idx] = old - h
        down = loss_at()
        arr[idx] = old
        fd = (up - down) / (2 * h)
        assert abs(grads[name][idx] - fd) / (abs(fd) + 1e-6) < 1e-3, (name, idx, grads[name][idx], fd)


def test_identical_records_mean_reduction(rng):
    m = model.QModel(model.TINY, seed=4)
    pts = rng.normal(size=(6, 3))
    one = model.DecisionBatch([pts], np.array([0]), [[4, 0]], targets=np.array([1]))
    many = model.DecisionBatch([pts] * 3, np.array([0, 1, 2]), [[4, 0]] * 3, targets=np.array([1, 1, 1]))
    l1, _ = m.backward(one, train.make_loss_fn(one, alpha=0.0))
    l3, _ = m.backward(many, train.make_loss_fn(many, alpha=0.0))
    assert l1 == pytest.approx(l3, rel=1e-12)


def test_unused_parameter_has_zero_grad(rng):
    m = model.QModel(model.TINY, seed=4)
    batch = model.DecisionBatch([rng.normal(size=(6, 3))], np.array([0]), [[4, 0]], targets=np.array([1]))
    _, grads = m.backward(batch, train.make_loss_fn(batch, alpha=0.0))
    # tree-encoder rows for positions beyond the prefix never see input
    w = grads["te.w1"].reshape(32, 30, -1)
    assert not w[2:].any()
    assert w[0, 4].any() and w[1, 0].any()


def test_forward_determinism(rng):
    batch = tiny_batch(rng)
    a = model.QModel(model.TINY, seed=9).forward(batch)[0]
    b = model.QModel(model.TINY, seed=9).forward(batch)[0]
    np.testing.assert_array_equal(a, b)


class TestCheckpoint:
    def test_round_trip(self, tmp_path):
        m = model.QModel(model.TINY, seed=5)
        m.step = 42
        path = tmp_path / "m.bin"
        m.save(path)
        back = model.load(path)
        assert back.dims == m.dims and back.step == 42
        for k in m.names:
            np.testing.assert_array_equal(back.params[k], m.params[k])

    def test_extra_arrays(self, tmp_path):
        m = model.QModel(model.TINY)
        path = tmp_path / "m.bin"
        model.save(m, path, {"opt.v.qh.bo": np.arange(30.0)})
        _, extra = model.load(path, with_extra=True)
        np.testing.assert_array_equal(extra["opt.v.qh.bo"], np.arange(30.0))

    def test_truncated(self, tmp_path):
        path = tmp_path / "m.bin"
        model.QModel(model.TINY).save(path)
        path.write_bytes(path.read_bytes()[:-100])
        with pytest.raises(CorruptCheckpoint):
            model.load(path)

    def test_flipped_byte(self, tmp_path):
        path = tmp_path / "m.bin"
        model.QModel(model.TINY).save(path)
        raw = bytearray(path.read_bytes())
        raw[200] ^= 0xFF
        path.write_bytes(bytes(raw))
        with pytest.raises(CorruptCheckpoint):
            model.load(path)

    def test_version_zero(self, tmp_path):
        path = tmp_path / "m.bin"
        model.save(model.QModel(model.TINY), path, version=0)
        with pytest.raises(VersionMismatch):
            model.load(path)

    def test_not_a_checkpoint(self, tmp_path):
        path = tmp_path / "m.bin"
        path.write_bytes(b"hello")
        with pytest.raises(CorruptCheckpoint):
            model.load(path)
