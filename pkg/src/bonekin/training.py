"""Loss assembly, training loop, inference and evaluation.

Networks work in metres (poses divided by 1000); everything crossing the
public surface (predictions, metrics, datasets) is in millimetres.

Gradient routing is enforced structurally with gradient stops, so a single
backward pass of the weighted total loss sends

* each sub-network's direction loss to that sub-network only,
* the single-frame MPJPE loss to the per-frame MLP only,
* the bone-length loss to the attention matrix only,
* the joint shift loss to the direction branch (and the regression heads).
"""

from __future__ import annotations

import hashlib
import json
import logging
import os
from concurrent.futures import ThreadPoolExecutor
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path

import numpy as np

from . import metrics
from .direction import HEAD_GAIN, DirectionNetConfig, direction_forward, direction_loss, init_direction_params, window_indices
from .errors import ConfigError, EmptyDatasetError, NonFiniteLossError, ShapeError
from .length import (
    LengthNetConfig,
    augment_video,
    bone_length_loss,
    init_length_params,
    length_forward,
    length_losses,
    pad_indices,
    sample_frames,
)
from .nn import kernels as K
from .nn.graph import Graph, Node
from .nn.params import ParameterStore, adam_step, load_checkpoint, save_checkpoint
from .skeleton import (
    BoneRepresentation,
    PoseSequence,
    SkeletonTopology,
    build_topology,
    compose,
    decompose,
    shift_array,
    to_world_frame,
)

log = logging.getLogger(__name__)

MM_PER_UNIT = 1000.0  # network unit is the metre


@dataclass
class TrainConfig:
    seed: int = 0
    lambda_D: float = 0.02
    lambda_L: float = 0.05
    lambda_J: float = 1.0
    lambda_JS: float = 0.1
    gamma: float = 10.0
    l: int = 50
    M: int = 50
    batch_size: int = 64
    length_batch_size: int = 16  # items per step whose l sampled frames go through the length branch
    aug_batch_size: int = 8  # augmented items per step (bone-length loss only)
    d: int = 27
    s: int = 3
    num_subnets: int = 2
    channels: int = 128
    length_blocks: int = -1  # -1: match the bottom direction sub-network (m - 1)
    dropout: float = 0.25
    lr: float = 1e-3
    lr_decay: float = 0.95
    epochs: int = 10
    iters_per_epoch: int = 0  # 0: one pass over the training frames
    composition: str = "analytic"
    strategy: str = "random"
    causal: bool = False
    vis_fusion: bool = True
    augment: bool = True
    attention: bool = True
    model: str = "anatomy"
    aug_low: float = 0.8
    aug_high: float = 1.2
    val_actors: int = 2

    def validate(self) -> None:
        if min(self.lambda_D, self.lambda_L, self.lambda_J, self.lambda_JS) < 0:
            raise ConfigError("loss weights must be non-negative")
        if self.batch_size < 2:
            raise ConfigError("batch_size must be at least 2 (batch norm)")
        if not 1 <= self.length_batch_size <= self.batch_size or self.aug_batch_size < 1:
            raise ConfigError("length_batch_size must lie in [1, batch_size]; aug_batch_size must be positive")
        if self.composition not in ("analytic", "heads"):
            raise ConfigError(f"unknown composition mode {self.composition!r}")
        if self.model not in ("anatomy", "baseline"):
            raise ConfigError(f"unknown model {self.model!r}")
        self.direction_config(17).validate()
        self.length_config().validate()

    def direction_config(self, num_joints: int) -> DirectionNetConfig:
        return DirectionNetConfig(
            d=self.d, s=self.s, channels=self.channels, num_subnets=self.num_subnets,
            visibility_fusion=self.vis_fusion, causal=self.causal, dropout=self.dropout,
            out_dim=3 * num_joints if self.model == "baseline" else None,
        )

    def length_config(self) -> LengthNetConfig:
        blocks = self.length_blocks
        if blocks < 0:
            blocks = DirectionNetConfig(d=self.d, s=self.s).m - 1
        return LengthNetConfig(
            l=self.l, residual_blocks=blocks, channels=self.channels, gamma=self.gamma,
            strategy=self.strategy, M=self.M, dropout=self.dropout, attention=self.attention,
        )

    @property
    def train_strategy(self) -> str:
        # training samples across the admissible pool; only the local-window ablation trains locally
        if self.strategy == "consecutive":
            return "consecutive"
        if self.causal or self.strategy == "causal-random":
            return "causal-random"
        return "random"

    def to_dict(self) -> dict:
        return asdict(self)

    def hash(self) -> str:
        return hashlib.sha256(json.dumps(self.to_dict(), sort_keys=True).encode()).hexdigest()[:16]

    @classmethod
    def from_dict(cls, d: dict) -> "TrainConfig":
        known = {f.name for f in fields(cls)}
        unknown = set(d) - known
        if unknown:
            raise ConfigError(f"unknown training config key(s): {sorted(unknown)}")
        return cls(**d)


# ------------------------------------------------------------------ models

@dataclass
class Models:
    store: ParameterStore
    config: TrainConfig
    topo: SkeletonTopology

    @property
    def dcfg(self) -> DirectionNetConfig:
        return self.config.direction_config(self.topo.num_joints)

    @property
    def lcfg(self) -> LengthNetConfig:
        return self.config.length_config()


def build_models(cfg: TrainConfig, topo: SkeletonTopology) -> Models:
    cfg.validate()
    store = ParameterStore()
    j = topo.num_joints
    # one init stream per branch, so toggling one branch leaves the others' starting weights alone
    init_direction_params(store, cfg.direction_config(j), j, np.random.default_rng([cfg.seed, 1, 0]))
    if cfg.model == "anatomy":
        init_length_params(store, cfg.length_config(), j, np.random.default_rng([cfg.seed, 1, 1]))
        if cfg.composition == "heads":
            rng = np.random.default_rng([cfg.seed, 1, 2])
            n_in = 4 * topo.num_bones
            for name, n_out in (("joint", 3 * j), ("shift", 3 * len(topo.nonadjacent_pairs))):
                store.add_weight(f"head.{name}.W", (n_out, n_in), n_in, rng, HEAD_GAIN)
                store.add(f"head.{name}.b", np.zeros(n_out))
    return Models(store, cfg, topo)


PARAM_GROUPS = {
    "direction": "dir.",
    "length_mlp": "len.",  # minus the attention matrix, see param_group
    "attention": "len.att.",
    "heads": "head.",
}


def param_group(store: ParameterStore, group: str) -> list[str]:
    """Trainable entry names of a routing group ("direction", "dir.s0", "length_mlp", ...)."""
    names = store.names(trainable_only=True)
    if group == "length_mlp":
        return [n for n in names if n.startswith("len.") and not n.startswith("len.att.")]
    prefix = PARAM_GROUPS.get(group, group if group.endswith(".") else group + ".")
    return [n for n in names if n.startswith(prefix)]


def loss_routes(models: "Models") -> dict[str, list[str]]:
    """Loss term -> parameter-name prefixes its gradient may reach.

    Only the per-sub-network pieces and the single-route terms are listed;
    "D" and "JS" aggregate pieces routed to different sub-networks.
    """
    cfg = models.config
    last = cfg.num_subnets - 1
    if cfg.model == "baseline":
        return {f"J.s{k}": [f"dir.s{k}."] for k in range(cfg.num_subnets)}
    routes = {f"D.s{k}": [f"dir.s{k}."] for k in range(cfg.num_subnets)}
    routes["J"] = ["len.in.", "len.b", "len.head."]
    if cfg.attention:
        routes["L"] = ["len.att."]
    if cfg.composition == "analytic":
        routes.update({f"JS.s{k}": [f"dir.s{k}."] for k in range(cfg.num_subnets)})
    else:
        routes["JS"] = [f"dir.s{last}.", "head.shift."]
        routes["H"] = [f"dir.s{last}.", "head.joint."]
    return routes


# ------------------------------------------------------------------ losses

def _root_mask(topo):
    mask = np.ones((1, topo.num_joints, 1))
    mask[0, topo.root_index] = 0.0
    return mask


def mpjpe_node(pred: Node, gt: np.ndarray) -> Node:
    """Mean Euclidean joint error over (B, j, 3)."""
    return K.mean_all(K.norm(K.sub(pred, pred.graph.constant(gt)), axis=-1))


def joint_shift_loss(pred_lengths: np.ndarray, pred_directions: Node, gt_shifts: np.ndarray,
                     topo: SkeletonTopology) -> Node:
    """Analytic joint shift loss: sum over non-adjacent pairs of the Euclidean shift error.

    Predicted lengths enter as constants, so no gradient reaches the length
    branch; directions are normalized before composition.  Averaged over the batch.
    """
    g = pred_directions.graph
    B = pred_directions.value.shape[0]
    nb = topo.num_bones
    pred_lengths = np.asarray(pred_lengths, dtype=np.float64).reshape(B, nb)
    gt_shifts = np.asarray(gt_shifts, dtype=np.float64)
    P = np.array(topo.nonadjacent_pairs)
    if gt_shifts.shape != (B, len(P), 3):
        raise ShapeError(f"shift target {gt_shifts.shape} vs expected {(B, len(P), 3)}")
    dirs = K.normalize(K.reshape(pred_directions, (B, nb, 3)))
    joints = K.matmul_const(K.mul_const(dirs, pred_lengths[..., None]), topo.path_matrix)
    shifts = K.sub(K.take(joints, P[:, 1], axis=1), K.take(joints, P[:, 0], axis=1))
    err = K.norm(K.sub(shifts, g.constant(gt_shifts)), axis=-1)
    return K.scale(K.sum_all(err), 1.0 / B)


def head_losses(pred_lengths: np.ndarray, pred_directions: Node, gt_shifts: np.ndarray,
                gt_poses: np.ndarray, topo: SkeletonTopology) -> tuple[Node, Node]:
    """Learned-head variant: regress shifts and joints from [lengths; directions]."""
    g = pred_directions.graph
    B = pred_directions.value.shape[0]
    x = K.concat([g.constant(pred_lengths), pred_directions], axis=1)
    shifts = K.affine(x, g.param("head.shift.W"), g.param("head.shift.b"))
    shifts = K.reshape(shifts, gt_shifts.shape)
    L_JS = K.scale(K.sum_all(K.norm(K.sub(shifts, g.constant(gt_shifts)), axis=-1)), 1.0 / B)
    joints = K.affine(x, g.param("head.joint.W"), g.param("head.joint.b"))
    joints = K.mul_const(K.reshape(joints, (B, topo.num_joints, 3)), _root_mask(topo))
    return L_JS, mpjpe_node(joints, gt_poses)


LOSS_TERMS = ("D", "L", "J", "JS")


def total_loss(terms: dict[str, Node | None], cfg: TrainConfig) -> Node:
    """Weighted sum of the four loss terms; absent terms contribute nothing."""
    weights = {"D": cfg.lambda_D, "L": cfg.lambda_L, "J": cfg.lambda_J, "JS": cfg.lambda_JS}
    parts = [(weights[k], terms[k]) for k in LOSS_TERMS if terms.get(k) is not None]
    parts += [(weights["J"], n) for k, n in terms.items() if k == "H" and n is not None]
    out = K.add_scalars(parts)
    if not np.isfinite(out.value):
        raise NonFiniteLossError(f"total loss is {float(out.value)}")
    return out


# ------------------------------------------------------------------ data prep

@dataclass
class VideoArrays:
    """Network-ready views of one video (metres, camera axes)."""
    keypoints: np.ndarray  # (T, 2j)
    visibility: np.ndarray  # (T, j)
    poses: np.ndarray  # (T, j, 3)
    directions: np.ndarray  # (T, 3(j-1))
    lengths: np.ndarray  # (j-1,) mean over frames
    shifts: np.ndarray  # (T, |P|, 3)

    @property
    def frames(self) -> int:
        return self.keypoints.shape[0]


def video_arrays(video: PoseSequence, topo: SkeletonTopology) -> VideoArrays:
    if video.keypoints2d is None:
        raise ShapeError(f"video {video.video_id or video.actor_id} has no 2D keypoints")
    T, j = video.frames, topo.num_joints
    vis = video.visibility if video.visibility is not None else np.ones((T, j))
    poses = video.camera_poses() / MM_PER_UNIT
    rep = decompose(poses, topo)
    return VideoArrays(
        keypoints=video.keypoints2d.reshape(T, 2 * j),
        visibility=vis,
        poses=poses,
        directions=rep.directions.reshape(T, -1),
        lengths=rep.lengths.mean(axis=0),
        shifts=shift_array(poses, topo),
    )


class FrameSampler:
    """Uniform (video, frame) draws over a list of videos."""

    def __init__(self, arrays: list[VideoArrays]):
        if not arrays:
            raise EmptyDatasetError("no training videos")
        self.arrays = arrays
        self.offsets = np.cumsum([0] + [a.frames for a in arrays])

    def draw(self, rng, n):
        flat = rng.integers(self.offsets[-1], size=n)
        vid = np.searchsorted(self.offsets, flat, side="right") - 1
        return vid, flat - self.offsets[vid]


def _length_batch(arrays, vids, ts, strategy, l, M, rng):
    idx = np.stack([
        pad_indices(sample_frames(arrays[v].frames, int(t), strategy, l, M, rng), l)
        for v, t in zip(vids, ts)
    ])
    kp = np.stack([arrays[v].keypoints[i] for v, i in zip(vids, idx)])
    return idx, kp


def _direction_batch(arrays, vids, ts, d, causal):
    win = [window_indices(arrays[v].frames, int(t), d, causal) for v, t in zip(vids, ts)]
    kp = np.stack([arrays[v].keypoints[w] for v, w in zip(vids, win)])
    vis = np.stack([arrays[v].visibility[w] for v, w in zip(vids, win)])
    return kp, vis


# ------------------------------------------------------------------ training

@dataclass
class TrainState:
    models: Models
    epoch: int = 0
    rng: np.random.Generator = field(default_factory=np.random.default_rng)
    best_val_mpjpe: float | None = None
    history: list[dict] = field(default_factory=list)

    @property
    def store(self) -> ParameterStore:
        return self.models.store


@dataclass
class Batch:
    """Everything one optimizer step consumes (network inputs in metres, camera axes)."""
    kp_win: np.ndarray  # (B, d, 2j)
    vis_win: np.ndarray  # (B, d, j)
    gt_pose: np.ndarray  # (B, j, 3)
    gt_dirs: np.ndarray  # (B, 3(j-1))
    gt_shift: np.ndarray  # (B, |P|, 3)
    kp_len: np.ndarray | None = None  # (B, l, 2j)
    chosen: np.ndarray | None = None  # (B,)
    chosen_pose: np.ndarray | None = None  # (B, j, 3)
    gt_len: np.ndarray | None = None  # (B, j-1)
    kp_aug: np.ndarray | None = None  # (B, l, 2j)
    aug_len: np.ndarray | None = None  # (B, j-1)


def make_batch(models: Models, src: FrameSampler, aug_src: FrameSampler | None,
               rng: np.random.Generator, aug_rng: np.random.Generator | None = None) -> Batch:
    """Direction items for the whole batch; the length branch sees the first ``length_batch_size``."""
    cfg = models.config
    arrays = src.arrays
    B = cfg.batch_size
    vids, ts = src.draw(rng, B)
    kp_win, vis_win = _direction_batch(arrays, vids, ts, cfg.d, cfg.causal)
    batch = Batch(
        kp_win, vis_win,
        gt_pose=np.stack([arrays[v].poses[t] for v, t in zip(vids, ts)]),
        gt_dirs=np.stack([arrays[v].directions[t] for v, t in zip(vids, ts)]),
        gt_shift=np.stack([arrays[v].shifts[t] for v, t in zip(vids, ts)]),
    )
    if cfg.model == "baseline":
        return batch
    Lb = cfg.length_batch_size
    vids, ts = vids[:Lb], ts[:Lb]
    idx, batch.kp_len = _length_batch(arrays, vids, ts, cfg.train_strategy, cfg.l, cfg.M, rng)
    batch.chosen = rng.integers(cfg.l, size=Lb)
    batch.chosen_pose = np.stack([arrays[v].poses[idx[b, batch.chosen[b]]] for b, v in enumerate(vids)])
    batch.gt_len = np.stack([arrays[v].lengths for v in vids])
    if aug_src is not None and cfg.attention:
        aug_rng = aug_rng or rng
        avids, ats = aug_src.draw(aug_rng, cfg.aug_batch_size)
        _, batch.kp_aug = _length_batch(aug_src.arrays, avids, ats, cfg.train_strategy, cfg.l, cfg.M, aug_rng)
        batch.aug_len = np.stack([aug_src.arrays[v].lengths for v in avids])
    return batch


def loss_terms(g: Graph, models: Models, batch: Batch, train: bool = True,
               rng: np.random.Generator | None = None,
               aug_rng: np.random.Generator | None = None) -> dict[str, Node]:
    """Build every loss term on ``g``.

    Keys: "D", "L", "J", "JS" and, with learned heads, "H" (joint-head MPJPE,
    weighted like "J").  The baseline model only has "J".  Per-sub-network
    pieces are also returned as "D.s0", "JS.s1", ... (see ``loss_routes``).
    """
    cfg, topo = models.config, models.topo
    B = batch.kp_win.shape[0]
    pred = direction_forward(g, models.dcfg, batch.kp_win, batch.vis_win, train, rng)
    terms: dict[str, Node] = {}
    if cfg.model == "baseline":
        mask = _root_mask(topo)
        losses = [
            mpjpe_node(K.mul_const(K.reshape(p, (B, topo.num_joints, 3)), mask), batch.gt_pose)
            for p in pred.per_subnet
        ]
        terms.update({f"J.s{k}": n for k, n in enumerate(losses)})
        terms["J"] = K.add_scalars([(1.0, n) for n in losses])
        return terms
    losses = direction_loss(pred, batch.gt_dirs)
    terms.update({f"D.s{k}": n for k, n in enumerate(losses)})
    terms["D"] = K.add_scalars([(1.0, n) for n in losses])
    lp = length_forward(g, models.lcfg, topo, batch.kp_len, train, rng)
    L_J, L_L = length_losses(lp, batch.chosen_pose, batch.gt_len, batch.chosen)
    terms["J"] = L_J
    if L_L is not None:
        if batch.kp_aug is not None:
            # augmented skeletons only reach the attention matrix; BN statistics stay those of real data
            lp_aug = length_forward(g, models.lcfg, topo, batch.kp_aug, train, aug_rng or rng,
                                    update_stats=False)
            L_L = K.add_scalars([(0.5, L_L), (0.5, bone_length_loss(lp_aug.fused, batch.aug_len))])
        terms["L"] = L_L
    # shift supervision needs fused lengths, which exist for the length sub-batch only
    fused = lp.fused.value
    Lb = fused.shape[0]
    rows = slice(0, Lb)
    if cfg.composition == "analytic":
        js = [joint_shift_loss(fused, K.take(p, rows, axis=0), batch.gt_shift[rows], topo) for p in pred.per_subnet]
        terms.update({f"JS.s{k}": n for k, n in enumerate(js)})
        terms["JS"] = K.add_scalars([(1.0, n) for n in js])
    else:
        terms["JS"], terms["H"] = head_losses(fused, K.take(pred.final, rows, axis=0), batch.gt_shift[rows],
                                              batch.gt_pose[rows], topo)
    return terms


def train_step(models: Models, batch_src: FrameSampler, aug_src: FrameSampler | None,
               rng: np.random.Generator, lr: float, aug_rng: np.random.Generator | None = None) -> dict[str, float]:
    """One optimizer step; returns the value of every loss term."""
    batch = make_batch(models, batch_src, aug_src, rng, aug_rng)
    g = Graph(models.store)
    terms = loss_terms(g, models, batch, True, rng, aug_rng)
    total = total_loss(terms, models.config)
    g.backward(total)
    adam_step(models.store, lr)
    out = {k: float(v.value) for k, v in terms.items() if "." not in k}
    out["total"] = float(total.value)
    g.release()
    return out


def train(train_videos: list[PoseSequence], val_videos: list[PoseSequence] | None, cfg: TrainConfig,
          topo: SkeletonTopology, state: TrainState | None = None, log_path=None,
          checkpoint_dir=None) -> TrainState:
    """Train (or resume) for ``cfg.epochs`` epochs; logs one JSON line per epoch."""
    if not train_videos:
        raise EmptyDatasetError("training set is empty")
    if state is None:
        state = TrainState(build_models(cfg, topo), rng=np.random.default_rng([cfg.seed, 2]))
    models = state.models
    arrays = [video_arrays(v, topo) for v in train_videos]
    sampler = FrameSampler(arrays)
    iters = cfg.iters_per_epoch or max(1, sampler.offsets[-1] // cfg.batch_size)
    use_aug = cfg.model == "anatomy" and cfg.augment and cfg.attention
    log_fh = None
    if log_path:
        Path(log_path).parent.mkdir(parents=True, exist_ok=True)
        log_fh = open(log_path, "a")
    try:
        while state.epoch < cfg.epochs:
            # per-epoch streams: augmentation draws never shift the main batch stream
            key = int(state.rng.integers(2 ** 63))
            rng, aug_rng = np.random.default_rng([key, 0]), np.random.default_rng([key, 1])
            lr = cfg.lr * cfg.lr_decay ** state.epoch
            aug_src = None
            if use_aug:
                aug_src = FrameSampler([video_arrays(augment_video(v, topo, aug_rng, (cfg.aug_low, cfg.aug_high)), topo)
                                        for v in train_videos])
            sums: dict[str, float] = {}
            for _ in range(iters):
                for k, v in train_step(models, sampler, aug_src, rng, lr, aug_rng).items():
                    sums[k] = sums.get(k, 0.0) + v
            state.epoch += 1
            entry = {"epoch": state.epoch, "lr": lr, "iterations": iters}
            entry.update({f"loss_{k}": v / iters for k, v in sums.items()})
            if val_videos:
                report = evaluate(models, val_videos)
                entry["val"] = report.to_dict()
                if state.best_val_mpjpe is None or report.mpjpe_mm < state.best_val_mpjpe:
                    state.best_val_mpjpe = report.mpjpe_mm
            state.history.append(entry)
            log.info("epoch %d: %s", state.epoch, {k: v for k, v in entry.items() if k != "val"})
            if log_fh:
                log_fh.write(json.dumps(entry) + "\n")
                log_fh.flush()
            if checkpoint_dir:
                save_train_state(state, checkpoint_dir)
    finally:
        if log_fh:
            log_fh.close()
    return state


def save_train_state(state: TrainState, directory) -> Path:
    directory = Path(directory)
    m = state.models
    save_checkpoint(m.store, directory, m.config.hash())
    payload = {
        "config": m.config.to_dict(),
        "topology": m.topo.to_dict(),
        "epoch": state.epoch,
        "rng_state": state.rng.bit_generator.state,
        "best_val_mpjpe": state.best_val_mpjpe,
        "history": state.history,
    }
    (directory / "state.json").write_text(json.dumps(payload, indent=1, sort_keys=True))
    return directory


def load_train_state(directory) -> TrainState:
    directory = Path(directory)
    store, manifest = load_checkpoint(directory)
    payload = json.loads((directory / "state.json").read_text())
    cfg = TrainConfig.from_dict(payload["config"])
    if manifest.get("config_hash") != cfg.hash():
        raise ConfigError("checkpoint config hash does not match its stored config")
    t = payload["topology"]
    topo = build_topology(t["parent"], t["names"], t["root"])
    rng = np.random.default_rng()
    rng.bit_generator.state = payload["rng_state"]
    return TrainState(Models(store, cfg, topo), payload["epoch"], rng, payload["best_val_mpjpe"], payload["history"])


# ------------------------------------------------------------------ inference

def _frame_rng(seed: int, video_index: int, t: int) -> np.random.Generator:
    return np.random.default_rng([seed, 3, video_index, t])


def _compose_mm(models: Models, fused_m: np.ndarray, dirs: np.ndarray) -> np.ndarray:
    topo = models.topo
    B = dirs.shape[0]
    if models.config.composition == "heads":
        st = models.store
        x = np.concatenate([fused_m, dirs], axis=1)
        joints = (x @ st["head.joint.W"].values.T + st["head.joint.b"].values).reshape(B, topo.num_joints, 3)
        joints = joints * _root_mask(topo)
        return joints * MM_PER_UNIT
    d = dirs.reshape(B, topo.num_bones, 3)
    return compose(BoneRepresentation(fused_m * MM_PER_UNIT, d), topo)


def _direction_eval(models: Models, kp_win: np.ndarray, vis_win: np.ndarray, chunk: int = 2048) -> np.ndarray:
    outs = []
    for i in range(0, kp_win.shape[0], chunk):
        g = Graph(models.store)
        pred = direction_forward(g, models.dcfg, kp_win[i:i + chunk], vis_win[i:i + chunk], False)
        outs.append(pred.final.value)
        g.release()
    return np.concatenate(outs)


def _length_eval(models: Models, keypoints: np.ndarray):
    """Eval-mode per-frame MLP on (N, 2j): joints (N, j, 3), lengths (N, j-1), attention logits (N, j-1)."""
    from .length import frame_joints
    from .skeleton import derived_lengths

    topo = models.topo
    g = Graph(models.store)
    joints = frame_joints(g, models.lcfg, keypoints, topo.num_joints, topo.root_index, False).value
    g.release()
    lengths, _ = derived_lengths(joints, topo)
    if models.lcfg.attention:
        logits = joints.reshape(len(joints), -1) @ models.store["len.att.W"].values.T
    else:
        logits = np.zeros_like(lengths)
    return joints, lengths, logits


def fuse_lengths(logits: np.ndarray, lengths: np.ndarray, gamma: float) -> np.ndarray:
    """Attention-weighted combination over the leading (frame) axis."""
    if gamma == 0:
        return lengths.mean(axis=0)
    z = gamma * logits
    z = z - z.max(axis=0, keepdims=True)
    w = np.exp(z)
    w /= w.sum(axis=0, keepdims=True)
    return (w * lengths).sum(axis=0)


def predict_video(models: Models, video: PoseSequence, video_index: int = 0, strategy: str | None = None) -> np.ndarray:
    """Predicted root-relative poses (T, j, 3) in mm, camera axes, for every frame."""
    cfg, topo = models.config, models.topo
    strategy = strategy or cfg.strategy
    arr = video_arrays(video, topo)
    T = arr.frames
    win = np.stack([window_indices(T, t, cfg.d, cfg.causal) for t in range(T)])
    dirs = _direction_eval(models, arr.keypoints[win], arr.visibility[win])
    if cfg.model == "baseline":
        joints = dirs.reshape(T, topo.num_joints, 3) * _root_mask(topo)
        return joints * MM_PER_UNIT
    _, lengths, logits = _length_eval(models, arr.keypoints)
    fused = np.empty((T, topo.num_bones))
    for t in range(T):
        idx = sample_frames(T, t, strategy, cfg.l, cfg.M, _frame_rng(cfg.seed, video_index, t))
        fused[t] = fuse_lengths(logits[idx], lengths[idx], cfg.gamma)
    return _compose_mm(models, fused, dirs)


class FramePredictor:
    """Streaming per-frame inference; reruns the length branch unless its input set is unchanged."""

    def __init__(self, models: Models, video: PoseSequence, video_index: int = 0, strategy: str | None = None):
        self.models = models
        self.arr = video_arrays(video, models.topo)
        self.video_index = video_index
        self.strategy = strategy or models.config.strategy
        self._cache_key = None
        self._cache = None
        self.length_runs = 0

    def fused_lengths(self, t: int) -> np.ndarray:
        cfg = self.models.config
        idx = sample_frames(self.arr.frames, t, self.strategy, cfg.l, cfg.M, _frame_rng(cfg.seed, self.video_index, t))
        key = (len(idx), int(idx[0]), int(idx[-1])) if self.strategy == "firstframe" else None
        if key is not None and key == self._cache_key:
            return self._cache
        _, lengths, logits = _length_eval(self.models, self.arr.keypoints[idx])
        self.length_runs += 1
        fused = fuse_lengths(logits, lengths, cfg.gamma)
        self._cache_key, self._cache = key, fused
        return fused

    def predict(self, t: int) -> np.ndarray:
        cfg = self.models.config
        T = self.arr.frames
        if not 0 <= t < T:
            raise IndexError(f"frame {t} outside video of {T} frames")
        w = window_indices(T, t, cfg.d, cfg.causal)
        dirs = _direction_eval(self.models, self.arr.keypoints[w][None], self.arr.visibility[w][None])
        if cfg.model == "baseline":
            return dirs.reshape(self.models.topo.num_joints, 3) * _root_mask(self.models.topo)[0] * MM_PER_UNIT
        return _compose_mm(self.models, self.fused_lengths(t)[None], dirs)[0]


def predict_frame(models: Models, video: PoseSequence, t: int, video_index: int = 0,
                  strategy: str | None = None) -> np.ndarray:
    return FramePredictor(models, video, video_index, strategy).predict(t)


def _threads() -> int:
    try:
        return max(1, int(os.environ.get("BONEKIN_THREADS", "1")))
    except ValueError:
        return 1


def predict_all(models: Models, videos: list[PoseSequence], strategy: str | None = None) -> list[np.ndarray]:
    jobs = list(enumerate(videos))
    with ThreadPoolExecutor(max_workers=_threads()) as pool:
        return list(pool.map(lambda iv: predict_video(models, iv[1], iv[0], strategy), jobs))


def evaluate(models: Models, videos: list[PoseSequence], strategy: str | None = None) -> metrics.MetricReport:
    """Protocol 1/2, MPJVE, PCK150 and AUC over every frame of every video (camera axes, mm)."""
    if not videos:
        raise EmptyDatasetError("no videos to evaluate")
    preds = predict_all(models, videos, strategy)
    return metrics.evaluate_sequences(preds, [v.camera_poses() for v in videos])


def predictions_to_videos(videos: list[PoseSequence], preds: list[np.ndarray]) -> list[PoseSequence]:
    """Wrap camera-axes predictions as pose-only sequences in the dataset's world axes."""
    out = []
    for v, p in zip(videos, preds):
        world = to_world_frame(p, v.camera) if v.camera is not None else p
        out.append(PoseSequence(v.actor_id, world, camera=v.camera, video_id=v.video_id))
    return out
