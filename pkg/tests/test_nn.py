import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from bonekin.errors import BatchTooSmallError, FormatError, NonFiniteGradientError, ShapeError
from bonekin.gradsuite import KERNEL_CASES, LINEAR_KERNELS, kernel_check
from bonekin.nn import kernels as K
from bonekin.nn.gradcheck import grad_check
from bonekin.nn.graph import Graph, stop_gradient
from bonekin.nn.params import ParameterStore, adam_step, load_checkpoint, save_checkpoint


def _store(**arrays):
    st_ = ParameterStore()
    for k, v in arrays.items():
        st_.add(k, v)
    return st_


def test_affine_examples():
    g = Graph()
    x = g.constant([[1.0, 2.0]])
    assert K.affine(x, g.constant(np.eye(2)), g.constant(np.zeros(2))).value.tolist() == [[1.0, 2.0]]
    out = K.affine(x, g.constant([[1.0, 1.0]]), g.constant([0.5]))
    assert out.value.tolist() == [[3.5]]
    with pytest.raises(ShapeError):
        K.affine(x, g.constant(np.ones((2, 3))))


def test_temporal_conv_examples():
    g = Graph()
    out = K.temporal_conv(g.constant([[[1.0, 2.0, 3.0]]]), g.constant([[[1.0, 0.0, -1.0]]]), g.constant([0.0]), 3)
    assert out.value.tolist() == [[[-2.0]]]
    x = np.arange(7.0)[None, None]
    out = K.temporal_conv(g.constant(x), g.constant([[[0.0, 1.0, 0.0]]]), None, 1)
    np.testing.assert_array_equal(out.value[0, 0], x[0, 0, 1:-1])
    with pytest.raises(ShapeError):
        K.temporal_conv(g.constant(np.ones((1, 1, 2))), g.constant(np.ones((1, 1, 3))), None, 3)


def test_batch_norm_examples():
    rng = np.random.default_rng(0)
    x = rng.standard_normal((64, 3))
    x = (x - x.mean(0)) / x.std(0)
    g = Graph()
    rm, rv = np.zeros(3), np.ones(3)
    out = K.batch_norm(g.constant(x), g.constant(np.ones(3)), g.constant(np.zeros(3)), rm, rv, True)
    np.testing.assert_allclose(out.value, x, atol=1e-4)
    np.testing.assert_allclose(rm, 0.1 * x.mean(0))
    m, v = np.array([1.0, -2, 0.5]), np.array([4.0, 0.25, 1])
    gam, bet = np.array([2.0, 1, 3]), np.array([0.0, 1, -1])
    out = K.batch_norm(g.constant(x), g.constant(gam), g.constant(bet), m.copy(), v.copy(), False)
    np.testing.assert_allclose(out.value, (x - m) / np.sqrt(v + 1e-5) * gam + bet, rtol=1e-12)
    with pytest.raises(BatchTooSmallError):
        K.batch_norm(g.constant(x[:1]), g.constant(gam), g.constant(bet), m.copy(), v.copy(), True)


def test_pointwise_examples():
    g = Graph()
    assert K.relu(g.constant([-1.0, 0.0, 2.0])).value.tolist() == [0, 0, 2]
    x = g.constant(np.ones((4, 5)))
    assert K.dropout(x, 0.5, False, None) is x
    a = K.dropout(x, 0.5, True, np.random.default_rng(7)).value
    b = K.dropout(x, 0.5, True, np.random.default_rng(7)).value
    np.testing.assert_array_equal(a, b)
    assert set(np.unique(a)) <= {0.0, 2.0}
    with pytest.raises(ValueError):
        K.dropout(x, 1.0, True, np.random.default_rng(0))


def test_attention_examples():
    g = Graph()
    w = K.attention_softmax(g.constant(np.full((4, 3), 2.5)), 10.0, axis=0).value
    np.testing.assert_allclose(w, 0.25)
    w = K.attention_softmax(g.constant(np.random.default_rng(1).standard_normal((5, 3))), 0.0, axis=0).value
    np.testing.assert_array_equal(w, np.full((5, 3), 0.2))
    z = np.array([[0.3, -1.0], [0.1, 0.4]])
    gamma = 3.0
    w = K.attention_softmax(g.constant(z), gamma, axis=0).value
    delta = z[0] - z[1]
    sig = 1.0 / (1.0 + np.exp(-gamma * delta))
    np.testing.assert_allclose(w[0], sig, rtol=1e-14)
    np.testing.assert_allclose(w[1], 1 - sig, rtol=1e-14)


@settings(max_examples=50, deadline=None)
@given(st.integers(0, 2 ** 32 - 1), st.floats(0.0, 50.0))
def test_attention_properties(seed, gamma):
    rng = np.random.default_rng(seed)
    z = rng.standard_normal((7, 4)) * 3
    g = Graph()
    w = K.attention_softmax(g.constant(z), gamma, axis=0).value
    assert np.abs(w.sum(axis=0) - 1).max() < 1e-12
    assert np.all(w > 0) or gamma > 20  # large gamma may underflow
    shifted = K.attention_softmax(g.constant(z + rng.standard_normal(4) * 10), gamma, axis=0).value
    np.testing.assert_allclose(shifted, w, atol=1e-12)


def test_adam_examples():
    s = _store(x=[1.0])
    s["x"].grad[:] = 3.0
    adam_step(s, 0.01)
    assert s["x"].values[0] == pytest.approx(0.99, abs=1e-6)
    assert s.step_count == 1 and s["x"].grad[0] == 0
    s2 = _store(x=[1.0])
    adam_step(s2, 0.01)
    assert s2["x"].values[0] == 1.0 and s2.step_count == 1


def test_adam_quadratic_bowl():
    s = _store(x=[1.0])
    for _ in range(500):
        s["x"].grad[:] = 2 * s["x"].values
        adam_step(s, 0.05)
    assert abs(s["x"].values[0]) < 1e-2


def test_adam_rejects_nonfinite():
    s = _store(x=[1.0])
    s["x"].grad[:] = np.nan
    with pytest.raises(NonFiniteGradientError):
        adam_step(s, 0.1)
    assert s["x"].values[0] == 1.0 and s.step_count == 0


def test_adam_skips_frozen_entries():
    s = _store(x=[1.0])
    s.add("rm", [5.0], trainable=False)
    s["x"].grad[:] = 1.0
    adam_step(s, 0.1)
    assert s["rm"].values[0] == 5.0


@pytest.mark.parametrize("name", KERNEL_CASES)
def test_kernel_gradients(name):
    res = kernel_check(name)
    assert res.ok, str(res.report)
    if name in LINEAR_KERNELS:
        assert res.tol == 1e-6


def test_grad_check_affine_only():
    rng = np.random.default_rng(2)
    s = _store(x=rng.standard_normal((3, 4)), W=rng.standard_normal((2, 4)), b=rng.standard_normal(2))
    rep = grad_check(lambda g: K.sum_all(K.affine(g.param("x"), g.param("W"), g.param("b"))), s)
    assert rep.worst < 1e-7


def test_stop_gradient_blocks_and_skips():
    rng = np.random.default_rng(3)
    s = _store(a=rng.standard_normal(4), b=rng.standard_normal(4))

    def loss(g):
        return K.square_sum(K.add(stop_gradient(g.param("a")), g.param("b")))

    g = Graph(s)
    g.backward(loss(g))
    assert np.all(s["a"].grad == 0) and np.any(s["b"].grad != 0)
    s.zero_grad()
    rep = grad_check(loss, s)
    assert rep.skipped == ["a"] and rep.worst < 1e-6
    assert len(Graph(s).stop_edges()) == 0


def test_checkpoint_roundtrip(tmp_path):
    rng = np.random.default_rng(4)
    s = _store(a=rng.standard_normal((2, 3)), b=rng.standard_normal(5))
    s.add("rm", rng.standard_normal(5), trainable=False)
    s["a"].grad[:] = 1.0
    adam_step(s, 0.1)
    save_checkpoint(s, tmp_path, "abc")
    t, manifest = load_checkpoint(tmp_path)
    assert manifest["version"] == "bonekin-ckpt-1" and manifest["config_hash"] == "abc"
    assert t.step_count == 1 and list(t) == list(s)
    for n in s:
        for attr in ("values", "m", "v"):
            np.testing.assert_array_equal(getattr(t[n], attr), getattr(s[n], attr))
        assert t[n].trainable == s[n].trainable
    raw = (tmp_path / "params.bin").read_bytes()
    (tmp_path / "params.bin").write_bytes(raw[:-8])
    with pytest.raises(FormatError):
        load_checkpoint(tmp_path)


def test_forward_backward_adam_deterministic():
    def run():
        rng = np.random.default_rng(9)
        s = _store(W=rng.standard_normal((3, 4)), b=np.zeros(3))
        x = rng.standard_normal((6, 4))
        for i in range(5):
            g = Graph(s)
            h = K.dropout(K.affine(g.constant(x), g.param("W"), g.param("b")), 0.3, True, np.random.default_rng(i))
            g.backward(K.square_sum(h))
            adam_step(s, 0.01)
        return s["W"].values.tobytes()
    assert run() == run()


def test_weight_init_variance():
    s = ParameterStore()
    w = s.add_weight("W", (400, 500), 500, np.random.default_rng(0)).values
    assert abs(w.mean()) < 0.005
    assert w.var() == pytest.approx(2.0 / 500, rel=0.02)


def test_released_graph_is_freed_without_cyclic_gc():
    import gc
    import weakref

    from bonekin.nn import graph as G

    gc.disable()
    try:
        g = G.Graph()
        x = g.constant(np.ones(3))
        y = K.relu(x)
        ref = weakref.ref(g)
        g.release()
        del g, x, y
        assert ref() is None
    finally:
        gc.enable()
