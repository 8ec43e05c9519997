"""Bone-length branch: per-frame residual MLP, bone-length attention and frame sampling."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .direction import HEAD_GAIN
from .errors import ShapeError
from .nn import kernels as K
from .nn.graph import Graph, Node, stop_gradient
from .nn.params import ParameterStore
from .skeleton import (
    MIN_BONE_LENGTH,
    PoseSequence,
    SkeletonTopology,
    derived_lengths,
    normalize_pixels,
    project_pixels,
    rescale_pose,
)

STRATEGIES = ("random", "causal-random", "firstframe", "consecutive")


@dataclass
class LengthNetConfig:
    l: int = 50
    residual_blocks: int = 2
    channels: int = 128
    gamma: float = 10.0
    strategy: str = "random"
    M: int = 50
    dropout: float = 0.25
    attention: bool = True

    def validate(self):
        from .errors import ConfigError

        if self.l < 1:
            raise ConfigError("l must be at least 1")
        if self.gamma < 0:
            raise ConfigError("gamma must be non-negative")
        if self.strategy not in STRATEGIES:
            raise ConfigError(f"unknown strategy {self.strategy!r}")


@dataclass
class LengthPrediction:
    joints: Node  # (B, l, j, 3)
    lengths: np.ndarray  # (B, l, j-1), derived from joints, clamped
    degenerate: np.ndarray  # (B, l, j-1) bool
    attention: Node | None  # (B, l, j-1)
    fused: Node  # (B, j-1)


def sample_frames(T: int, t: int, strategy: str, l: int, M: int, rng: np.random.Generator) -> np.ndarray:
    """Frame indices feeding the length branch when predicting frame ``t``."""
    if T < 1:
        raise ValueError("video has no frames")
    if not 0 <= t < T:
        raise IndexError(f"frame {t} outside video of {T} frames")
    if strategy == "random":
        return rng.integers(0, T, size=l)
    if strategy == "causal-random":
        return rng.integers(0, t + 1, size=l)
    n = min(M, t + 1)
    if strategy == "firstframe":
        return np.arange(n)
    if strategy == "consecutive":
        return np.arange(t + 1 - n, t + 1)
    raise ValueError(f"unknown strategy {strategy!r}")


def pad_indices(idx: np.ndarray, l: int) -> np.ndarray:
    """Cycle a short index list up to ``l`` entries so batch items share a shape."""
    return np.resize(idx, l) if len(idx) != l else idx


def init_length_params(store: ParameterStore, cfg: LengthNetConfig, num_joints: int,
                       rng: np.random.Generator, prefix: str = "len") -> None:
    o = cfg.channels
    _affine_bn(store, f"{prefix}.in", 2 * num_joints, o, rng)
    for i in range(cfg.residual_blocks):
        _affine_bn(store, f"{prefix}.b{i}", o, o, rng)
    store.add_weight(f"{prefix}.head.W", (3 * num_joints, o), o, rng, HEAD_GAIN)
    store.add(f"{prefix}.head.b", np.zeros(3 * num_joints))
    if cfg.attention:
        # zero start: uniform attention, i.e. the plain average
        store.add(f"{prefix}.att.W", np.zeros((num_joints - 1, 3 * num_joints)))


def _affine_bn(store, name, n_in, n_out, rng):
    store.add_weight(f"{name}.W", (n_out, n_in), n_in, rng)
    store.add(f"{name}.b", np.zeros(n_out))
    store.add(f"{name}.gamma", np.ones(n_out))
    store.add(f"{name}.beta", np.zeros(n_out))
    store.add(f"{name}.rm", np.zeros(n_out), trainable=False)
    store.add(f"{name}.rv", np.ones(n_out), trainable=False)


def _fc_bn_relu(g, name, x, train, update_stats):
    st = g.store
    h = K.affine(x, g.param(f"{name}.W"), g.param(f"{name}.b"))
    h = K.batch_norm(h, g.param(f"{name}.gamma"), g.param(f"{name}.beta"),
                     st[f"{name}.rm"].values, st[f"{name}.rv"].values, train, update_stats=update_stats)
    return K.relu(h)


def frame_joints(g: Graph, cfg: LengthNetConfig, keypoints: np.ndarray, num_joints: int, root: int,
                 train: bool, rng=None, prefix: str = "len", update_stats: bool = True) -> Node:
    """Per-frame residual MLP: keypoints (N, 2j) -> root-relative joints (N, j, 3)."""
    x = g.constant(keypoints)
    h = _fc_bn_relu(g, f"{prefix}.in", x, train, update_stats)
    h = K.dropout(h, cfg.dropout, train, rng)
    for i in range(cfg.residual_blocks):
        r = _fc_bn_relu(g, f"{prefix}.b{i}", h, train, update_stats)
        r = K.dropout(r, cfg.dropout, train, rng)
        h = K.add(h, r)
    out = K.affine(h, g.param(f"{prefix}.head.W"), g.param(f"{prefix}.head.b"))
    out = K.reshape(out, (-1, num_joints, 3))
    mask = np.ones((1, num_joints, 1))
    mask[0, root] = 0.0
    return K.mul_const(out, mask)


def attention_fuse(g: Graph, cfg: LengthNetConfig, joints: Node, lengths: np.ndarray,
                   prefix: str = "len") -> tuple[Node | None, Node]:
    """Fuse per-frame lengths ``(B, l, j-1)`` with attention driven by the (stopped) joints."""
    B, l, nb = lengths.shape
    if not cfg.attention:
        return None, g.constant(lengths.mean(axis=1))
    flat = K.reshape(stop_gradient(joints), (B * l, -1))
    logits = K.reshape(K.affine(flat, g.param(f"{prefix}.att.W")), (B, l, nb))
    att = K.attention_softmax(logits, cfg.gamma, axis=1)
    if cfg.gamma == 0:
        # uniform weights; the plain mean avoids rounding in the weighted sum
        return att, g.constant(lengths.mean(axis=1))
    fused = K.sum_all(K.mul_const(att, lengths), axis=1)
    return att, fused


def length_forward(g: Graph, cfg: LengthNetConfig, topo: SkeletonTopology, keypoints: np.ndarray,
                   train: bool, rng=None, prefix: str = "len", update_stats: bool = True) -> LengthPrediction:
    """``keypoints`` has shape (B, l, 2j); every frame is processed independently."""
    keypoints = np.asarray(keypoints, dtype=np.float64)
    j = topo.num_joints
    if keypoints.ndim != 3 or keypoints.shape[2] != 2 * j:
        raise ShapeError(f"expected (B, l, {2 * j}) keypoints, got {keypoints.shape}")
    B, l, _ = keypoints.shape
    joints = frame_joints(g, cfg, keypoints.reshape(B * l, 2 * j), j, topo.root_index, train, rng,
                          prefix, update_stats)
    joints = K.reshape(joints, (B, l, j, 3))
    lengths, degenerate = derived_lengths(joints.value, topo, floor=MIN_BONE_LENGTH)
    att, fused = attention_fuse(g, cfg, joints, lengths, prefix)
    return LengthPrediction(joints, lengths, degenerate, att, fused)


def length_losses(pred: LengthPrediction, gt_poses: np.ndarray, gt_lengths: np.ndarray,
                  chosen: np.ndarray) -> tuple[Node, Node | None]:
    """(L_J, L_L).

    ``chosen[b]`` indexes the single sampled frame whose joints are supervised;
    ``gt_poses[b]`` is that frame's ground truth.  L_J only reaches the MLP
    (lengths/attention inputs are stopped) and L_L only reaches the attention
    matrix (its inputs are stopped).
    """
    g = pred.joints.graph
    picked = K.gather_rows(pred.joints, np.asarray(chosen))
    gt_poses = np.asarray(gt_poses, dtype=np.float64)
    if gt_poses.shape != picked.value.shape:
        raise ShapeError(f"pose target {gt_poses.shape} vs prediction {picked.value.shape}")
    L_J = K.mean_all(K.norm(K.sub(picked, g.constant(gt_poses)), axis=-1))
    L_L = None
    if pred.attention is not None:
        L_L = bone_length_loss(pred.fused, gt_lengths)
    return L_J, L_L


def bone_length_loss(fused: Node, gt_lengths: np.ndarray) -> Node:
    gt_lengths = np.asarray(gt_lengths, dtype=np.float64)
    if gt_lengths.shape != fused.value.shape:
        raise ShapeError(f"length target {gt_lengths.shape} vs prediction {fused.value.shape}")
    diff = K.sub(fused, fused.graph.constant(gt_lengths))
    return K.scale(K.square_sum(diff), 1.0 / gt_lengths.shape[0])


def augmentation_factors(topo: SkeletonTopology, rng: np.random.Generator, low=0.8, high=1.2) -> np.ndarray:
    f = rng.uniform(low, high, size=topo.num_bones)
    for a, b in topo.symmetric_bone_pairs():
        f[b] = f[a]
    return f


def augment_video(video: PoseSequence, topo: SkeletonTopology, rng: np.random.Generator,
                  factor_range=(0.8, 1.2), factors: np.ndarray | None = None) -> PoseSequence:
    """Same motion with a new group of bone lengths and clean reprojected keypoints."""
    if video.camera is None or video.root_world is None:
        raise ValueError("augmentation needs the camera and root trajectory")
    if factors is None:
        factors = augmentation_factors(topo, rng, *factor_range)
    base, _ = derived_lengths(video.poses3d, topo)
    new_lengths = base.mean(axis=0) * factors
    poses = rescale_pose(video.poses3d, new_lengths, topo)
    cam = video.camera
    pix = project_pixels(cam, poses, video.root_world)
    kp = normalize_pixels(pix, cam.width, cam.height)
    return PoseSequence(
        actor_id=video.actor_id + "-aug",
        poses3d=poses,
        root_world=video.root_world.copy(),
        keypoints2d=kp,
        visibility=None if video.visibility is None else video.visibility.copy(),
        camera=cam,
        video_id=video.video_id + "-aug",
    )
