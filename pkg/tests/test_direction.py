import numpy as np
import pytest

from bonekin.direction import (DirectionNetConfig, direction_forward, direction_loss, fuse_visibility,
                               init_direction_params, window_indices)
from bonekin.errors import ConfigError, ShapeError
from bonekin.nn.graph import Graph
from bonekin.nn.params import ParameterStore

J = 17


def _net(seed=0, **kw):
    cfg = DirectionNetConfig(**{"d": 27, "channels": 8, "dropout": 0.0, **kw})
    store = ParameterStore()
    init_direction_params(store, cfg, J, np.random.default_rng(seed))
    return cfg, store


def _inputs(B, d, seed=1):
    rng = np.random.default_rng(seed)
    return rng.standard_normal((B, d, 2 * J)), rng.uniform(0, 1, (B, d, J))


def test_config_validation():
    assert DirectionNetConfig(d=27).m == 3
    with pytest.raises(ConfigError):
        DirectionNetConfig(d=10).validate()
    with pytest.raises(ConfigError):
        DirectionNetConfig(d=9, num_subnets=3).validate()
    with pytest.raises(ConfigError):
        DirectionNetConfig(d=9, num_subnets=0).validate()


def _set_vis_conv(store, name, beta):
    store[f"{name}.in_vis.K"].values[:] = 0.0
    store[f"{name}.in_vis.b"].values[:] = 0.0
    store[f"{name}.in_vis.beta"].values[:] = beta


@pytest.mark.parametrize("beta,check", [(1.0, "equal"), (-1.0, "zero")])
def test_fuse_visibility_gating(beta, check):
    cfg, store = _net(d=9)
    _set_vis_conv(store, "dir.s0", beta)
    kp, vis = _inputs(3, 9)
    g = Graph(store)
    out = fuse_visibility(g, "dir.s0", g.constant(kp.transpose(0, 2, 1)), g.constant(vis.transpose(0, 2, 1)),
                          3, train=False).value
    o = cfg.channels
    assert out.shape == (3, 2 * o, 3)
    if check == "equal":
        np.testing.assert_array_equal(out[:, :o], out[:, o:])
    else:
        assert np.all(out[:, :o] == 0)


def test_fuse_visibility_shape_arithmetic():
    cfg, store = _net(d=9, channels=8)
    kp, vis = _inputs(1, 9)
    g = Graph(store)
    out = fuse_visibility(g, "dir.s0", g.constant(kp.transpose(0, 2, 1)), g.constant(vis.transpose(0, 2, 1)),
                          3, train=False)
    assert out.value.shape[1:] == (16, 3)
    with pytest.raises(ShapeError):
        fuse_visibility(g, "dir.s0", g.constant(kp.transpose(0, 2, 1)), g.constant(vis[:, :6].transpose(0, 2, 1)),
                        3, train=False)


def test_temporal_schedule_d27():
    cfg, store = _net(num_subnets=2)
    kp, vis = _inputs(2, 27)
    pred = direction_forward(Graph(store), cfg, kp, vis, train=True, rng=np.random.default_rng(0))
    assert len(pred.per_subnet) == 2
    assert sorted(pred.activations[0]) == [1, 3, 9]
    assert sorted(pred.activations[1]) == [1, 3, 9]
    # the duplicated lower prediction enters the upper sub-network at length d/s
    assert pred.activations[1][9].value.shape == (2, 8, 9)
    assert pred.final.value.shape == (2, 3 * (J - 1))
    blocks = {n.split(".")[2] for n in store.names("dir.s0.") if n.split(".")[2].startswith("b")}
    assert len(blocks) == 2  # plus the input layer: 3 conv stages 27 -> 9 -> 3 -> 1
    upper = {n.split(".")[2] for n in store.names("dir.s1.") if n.split(".")[2].startswith("b")}
    assert len(upper) == 2  # 9 -> 3 -> 1


def test_single_subnet_is_plain_backbone():
    cfg, store = _net(num_subnets=1)
    kp, vis = _inputs(2, 27)
    pred = direction_forward(Graph(store), cfg, kp, vis, train=False)
    assert len(pred.per_subnet) == 1 and pred.final is pred.per_subnet[0]
    assert not store.names("dir.s1.")


def _np_conv(x, Kw, b, s):
    B, C, T = x.shape
    Co, _, w = Kw.shape
    out = np.stack([np.einsum("bcw,ocw->bo", x[:, :, t:t + w], Kw) for t in range(0, T - w + 1, s)], axis=2)
    return out + b[None, :, None]


def test_upper_depends_only_on_lower_prediction_after_surgery():
    cfg, store = _net(num_subnets=2)
    o, s = cfg.channels, cfg.s
    for i in range(2):
        store[f"dir.s1.b{i}.K"].values[:, :o] = 0.0  # skip half of the concatenated input
    kp, vis = _inputs(3, 27)
    pred = direction_forward(Graph(store), cfg, kp, vis, train=False)
    # independent oracle: rebuild the upper sub-network from the lower prediction alone
    P = lambda n: store[n].values
    h = pred.per_subnet[0].value @ P("dir.s1.lift.W").T + P("dir.s1.lift.b")
    h = np.repeat(h[:, :, None], 9, axis=2)
    for i in range(2):
        n = f"dir.s1.b{i}"
        x = np.concatenate([np.zeros_like(h), h], axis=1)
        c = _np_conv(x, P(f"{n}.K"), P(f"{n}.b"), s)
        c = (c - P(f"{n}.rm")[None, :, None]) / np.sqrt(P(f"{n}.rv")[None, :, None] + 1e-5)
        c = np.maximum(c * P(f"{n}.gamma")[None, :, None] + P(f"{n}.beta")[None, :, None], 0)
        h = c + h[:, :, s // 2::s]
    expected = h[:, :, 0] @ P("dir.s1.head.W").T + P("dir.s1.head.b")
    np.testing.assert_allclose(pred.final.value, expected, rtol=1e-10, atol=1e-12)


def test_visibility_ignored_without_fusion():
    cfg, store = _net(visibility_fusion=False)
    kp, vis = _inputs(2, 27)
    a = direction_forward(Graph(store), cfg, kp, vis, train=False).final.value
    b = direction_forward(Graph(store), cfg, kp, 1 - vis, train=False).final.value
    c = direction_forward(Graph(store), cfg, kp, None, train=False).final.value
    np.testing.assert_array_equal(a, b)
    np.testing.assert_array_equal(a, c)


def test_fusion_needs_visibility():
    cfg, store = _net()
    kp, _ = _inputs(2, 27)
    with pytest.raises(ShapeError):
        direction_forward(Graph(store), cfg, kp, None, train=False)


def test_direction_loss_examples():
    cfg, store = _net(num_subnets=2)
    kp, vis = _inputs(1, 27)
    g = Graph(store)
    pred = direction_forward(g, cfg, kp, vis, train=False)
    gt = pred.final.value.copy()
    losses = direction_loss(type(pred)([pred.final, pred.final]), gt)
    assert [float(x.value) for x in losses] == [0.0, 0.0]
    gt2 = gt.copy()
    gt2[0, 0] += 1.0
    assert float(direction_loss(type(pred)([pred.final]), gt2)[0].value) == pytest.approx(1.0)
    with pytest.raises(ShapeError):
        direction_loss(pred, gt[:, :3])


def test_subnet_losses_reach_only_own_params():
    cfg, store = _net(num_subnets=2)
    kp, vis = _inputs(4, 27)
    for k in range(2):
        g = Graph(store)
        pred = direction_forward(g, cfg, kp, vis, train=True, rng=np.random.default_rng(0))
        loss = direction_loss(pred, np.zeros_like(pred.final.value))[k]
        store.zero_grad()
        g.backward(loss)
        reached = {n.split(".")[1] for n in g.reached_params()}
        assert reached == {f"s{k}"}
    store.zero_grad()


def test_window_indices():
    np.testing.assert_array_equal(window_indices(10, 0, 3, False), [0, 0, 1])
    np.testing.assert_array_equal(window_indices(10, 9, 3, False), [8, 9, 9])
    np.testing.assert_array_equal(window_indices(10, 1, 3, True), [0, 0, 1])
    assert window_indices(100, 50, 27, True).max() == 50
