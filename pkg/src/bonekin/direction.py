"""Bone-direction branch: a stack of strided temporal conv sub-networks.

Sub-network ``k`` (0-based) sees a temporal length of ``d / s**k``.  The
bottom one reads the keypoint window; every upper one reads the previous
sub-network's prediction duplicated along time, plus, at every block, the
previous sub-network's activation of the same temporal length (long skip
connection).  All edges between sub-networks pass through a gradient stop,
so each sub-network is trained only by its own losses.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .errors import ConfigError, ShapeError
from .nn import kernels as K
from .nn.graph import Graph, Node, stop_gradient
from .nn.params import ParameterStore


HEAD_GAIN = 0.1  # output layers start small so first predictions sit near zero


@dataclass
class DirectionNetConfig:
    d: int = 27
    s: int = 3
    channels: int = 128
    num_subnets: int = 2
    visibility_fusion: bool = True
    causal: bool = False
    dropout: float = 0.25
    out_dim: int | None = None  # default 3 * (j - 1)

    @property
    def m(self) -> int:
        m, n = 0, self.d
        while n > 1 and n % self.s == 0:
            n //= self.s
            m += 1
        return m

    def validate(self) -> None:
        if self.s < 2:
            raise ConfigError(f"stride s must be at least 2, got {self.s}")
        if self.d < self.s or self.s ** self.m != self.d:
            raise ConfigError(f"d={self.d} is not a power of s={self.s}")
        if not 1 <= self.num_subnets <= self.m:
            raise ConfigError(f"num_subnets={self.num_subnets} must lie in [1, {self.m}] for d={self.d}")
        if self.channels < 1:
            raise ConfigError("channels must be positive")


@dataclass
class DirectionPrediction:
    per_subnet: list[Node]
    # activations[k][length] -> node of shape (B, o, length)
    activations: list[dict[int, Node]] = field(default_factory=list)

    @property
    def final(self) -> Node:
        return self.per_subnet[-1]


def _add_conv(store, name, c_in, c_out, w, rng):
    store.add_weight(f"{name}.K", (c_out, c_in, w), c_in * w, rng)
    store.add(f"{name}.b", np.zeros(c_out))
    _add_bn(store, name, c_out)


def _add_bn(store, name, c):
    store.add(f"{name}.gamma", np.ones(c))
    store.add(f"{name}.beta", np.zeros(c))
    store.add(f"{name}.rm", np.zeros(c), trainable=False)
    store.add(f"{name}.rv", np.ones(c), trainable=False)


def _add_affine(store, name, n_in, n_out, rng, bias=True, gain=1.0):
    store.add_weight(f"{name}.W", (n_out, n_in), n_in, rng, gain)
    if bias:
        store.add(f"{name}.b", np.zeros(n_out))


def init_direction_params(store: ParameterStore, cfg: DirectionNetConfig, num_joints: int,
                          rng: np.random.Generator, prefix: str = "dir") -> None:
    cfg.validate()
    o, s = cfg.channels, cfg.s
    out_dim = cfg.out_dim or 3 * (num_joints - 1)
    for k in range(cfg.num_subnets):
        p = f"{prefix}.s{k}"
        if k == 0:
            if cfg.visibility_fusion:
                _add_conv(store, f"{p}.in_kp", 2 * num_joints, o, s, rng)
                _add_conv(store, f"{p}.in_vis", num_joints, o, s, rng)
                c_in = 2 * o
            else:
                _add_conv(store, f"{p}.in", 2 * num_joints, o, s, rng)
                c_in = o
            n_blocks = cfg.m - 1
        else:
            _add_affine(store, f"{p}.lift", out_dim, o, rng)
            c_in = 2 * o
            n_blocks = cfg.m - k
        for i in range(n_blocks):
            _add_conv(store, f"{p}.b{i}", c_in, o, s, rng)
            c_in = 2 * o if k > 0 else o
        _add_affine(store, f"{p}.head", o, out_dim, rng, gain=HEAD_GAIN)


def conv_bn_relu(g: Graph, name: str, x: Node, stride: int, train: bool) -> Node:
    st = g.store
    h = K.temporal_conv(x, g.param(f"{name}.K"), g.param(f"{name}.b"), stride)
    h = K.batch_norm(h, g.param(f"{name}.gamma"), g.param(f"{name}.beta"),
                     st[f"{name}.rm"].values, st[f"{name}.rv"].values, train)
    return K.relu(h)


def fuse_visibility(g: Graph, name: str, kp: Node, vis: Node, stride: int, train: bool) -> Node:
    """``[C(kp) * C(vis); C(kp)]`` concatenated on channels, each C = conv + BN + ReLU."""
    if kp.value.shape[0] != vis.value.shape[0] or kp.value.shape[2] != vis.value.shape[2]:
        raise ShapeError(f"keypoint window {kp.value.shape} and visibility window {vis.value.shape} misaligned")
    hk = conv_bn_relu(g, f"{name}.in_kp", kp, stride, train)
    hv = conv_bn_relu(g, f"{name}.in_vis", vis, stride, train)
    return K.concat([K.mul(hk, hv), hk], axis=1)


def _residual_block(g, name, x, cfg, train, rng):
    o, s = cfg.channels, cfg.s
    h = conv_bn_relu(g, name, x, s, train)
    h = K.dropout(h, cfg.dropout, train, rng)
    # shortcut: centre of each stride window, own (last o) channels
    c = x.value.shape[1]
    short = K.take(x, slice(c - o, c), axis=1) if c != o else x
    short = K.take(short, slice(s // 2, None, s), axis=2)
    return K.add(h, short)


def direction_forward(g: Graph, cfg: DirectionNetConfig, keypoints: np.ndarray, visibility: np.ndarray | None,
                      train: bool, rng: np.random.Generator | None = None, prefix: str = "dir") -> DirectionPrediction:
    """Forward the stack on windows ``keypoints (B, d, 2j)`` and ``visibility (B, d, j)``."""
    cfg.validate()
    keypoints = np.asarray(keypoints, dtype=np.float64)
    if keypoints.ndim != 3 or keypoints.shape[1] != cfg.d:
        raise ShapeError(f"expected keypoint windows (B, {cfg.d}, 2j), got {keypoints.shape}")
    o, s = cfg.channels, cfg.s
    x = g.constant(keypoints.transpose(0, 2, 1))
    preds, acts = [], []
    for k in range(cfg.num_subnets):
        p = f"{prefix}.s{k}"
        own: dict[int, Node] = {}
        if k == 0:
            if cfg.visibility_fusion:
                if visibility is None:
                    raise ShapeError("visibility fusion enabled but no visibility window given")
                v = g.constant(np.asarray(visibility, dtype=np.float64).transpose(0, 2, 1))
                h = fuse_visibility(g, p, x, v, s, train)
            else:
                h = conv_bn_relu(g, f"{p}.in", x, s, train)
            h = K.dropout(h, cfg.dropout, train, rng)
            n_blocks = cfg.m - 1
        else:
            length = cfg.d // s ** k
            lifted = K.affine(stop_gradient(preds[-1]), g.param(f"{p}.lift.W"), g.param(f"{p}.lift.b"))
            h = K.repeat_time(lifted, length)
            n_blocks = cfg.m - k
        own[h.value.shape[2]] = h
        for i in range(n_blocks):
            if k > 0:
                skip = stop_gradient(acts[-1][h.value.shape[2]])
                c = skip.value.shape[1]
                if c != o:
                    # fused input layer: keep the keypoint half
                    skip = K.take(skip, slice(c - o, c), axis=1)
                h = K.concat([skip, h], axis=1)
            h = _residual_block(g, f"{p}.b{i}", h, cfg, train, rng)
            own[h.value.shape[2]] = h
        flat = K.reshape(h, (h.value.shape[0], o))
        preds.append(K.affine(flat, g.param(f"{p}.head.W"), g.param(f"{p}.head.b")))
        acts.append(own)
    return DirectionPrediction(preds, acts)


def direction_loss(pred: DirectionPrediction, gt_directions: np.ndarray) -> list[Node]:
    """Squared L2 distance per sub-network, averaged over the batch."""
    out = []
    for node in pred.per_subnet:
        gt = np.asarray(gt_directions, dtype=np.float64)
        if gt.shape != node.value.shape:
            raise ShapeError(f"direction target {gt.shape} vs prediction {node.value.shape}")
        diff = K.sub(node, node.graph.constant(gt))
        out.append(K.scale(K.square_sum(diff), 1.0 / gt.shape[0]))
    return out


def window_indices(T: int, t: int, d: int, causal: bool) -> np.ndarray:
    """Frame indices of the direction window for frame ``t``; edges replicate the boundary frame."""
    if causal:
        idx = np.arange(t - d + 1, t + 1)
    else:
        idx = np.arange(t - d // 2, t - d // 2 + d)
    return np.clip(idx, 0, T - 1)
