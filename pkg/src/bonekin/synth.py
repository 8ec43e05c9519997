"""Synthetic motion capture: constant-length skeletons, smooth motion, noisy 2D with visibility."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .errors import BehindCameraError
from .skeleton import (
    BoneRepresentation,
    CameraModel,
    PoseSequence,
    SkeletonTopology,
    base_bone_lengths,
    compose,
    default_topology,
    look_at_camera,
    normalize_pixels,
    project_pixels,
)

# rest directions in the body frame (x: actor's left, y: forward, z: up), keyed by child joint
_REST = {
    "RHip": (-1.0, 0.0, -0.15), "LHip": (1.0, 0.0, -0.15),
    "RKnee": (0.0, 0.05, -1.0), "LKnee": (0.0, 0.05, -1.0),
    "RAnkle": (0.0, -0.05, -1.0), "LAnkle": (0.0, -0.05, -1.0),
    "Spine": (0.0, 0.05, 1.0), "Thorax": (0.0, 0.0, 1.0),
    "Neck": (0.0, 0.15, 1.0), "Head": (0.0, 0.3, 1.0),
    "LShoulder": (1.0, -0.1, -0.1), "RShoulder": (-1.0, -0.1, -0.1),
    "LElbow": (0.15, 0.0, -1.0), "RElbow": (-0.15, 0.0, -1.0),
    "LWrist": (0.1, 0.2, -1.0), "RWrist": (-0.1, 0.2, -1.0),
}
_REST_MPI = {"Head": (0.0, 0.15, 1.0), "RHip": (-0.3, 0.0, -1.0), "LHip": (0.3, 0.0, -1.0)}

# (pitch, roll) swing amplitude in radians, keyed by child joint
_AMPLITUDE = {
    "Hip": (0.08, 0.05), "Knee": (0.6, 0.25), "Ankle": (0.5, 0.1),
    "Spine": (0.15, 0.1), "Thorax": (0.15, 0.1), "Neck": (0.25, 0.15), "Head": (0.3, 0.2),
    "Shoulder": (0.08, 0.08), "Elbow": (0.7, 0.35), "Wrist": (0.6, 0.3),
}


@dataclass
class GeneratorConfig:
    topology: str = "h36m17"
    actors: int = 6
    videos_per_actor: int = 4
    video_length: int = 800
    length_jitter: float = 0.1
    sinusoids: tuple[int, int] = (2, 4)
    frequency_band: tuple[float, float] = (0.003, 0.015)  # cycles per frame
    noise_sigma: float = 0.005  # normalized image units
    p_occ: float = 0.1
    cameras: int = 4
    camera_distance: float = 5000.0
    camera_height: float = 1600.0
    focal: float = 1000.0
    image_size: tuple[int, int] = (1000, 1000)
    seed: int = 0

    def validate(self):
        from .errors import ConfigError

        if self.video_length < 1 or self.actors < 1 or self.videos_per_actor < 1:
            raise ConfigError("actors, videos_per_actor and video_length must be positive")
        if not 0.0 <= self.p_occ <= 1.0:
            raise ConfigError("p_occ must lie in [0, 1]")
        if self.noise_sigma < 0:
            raise ConfigError("noise_sigma must be non-negative")


def _topology(cfg: GeneratorConfig) -> SkeletonTopology:
    return default_topology(cfg.topology)


def generate_actor(cfg: GeneratorConfig, rng: np.random.Generator, topo: SkeletonTopology | None = None) -> np.ndarray:
    """Bone lengths of one actor: base table times (1 + u), u ~ U[-jitter, jitter], mirrored bones equal."""
    topo = topo or _topology(cfg)
    base = base_bone_lengths(topo, cfg.topology)
    u = rng.uniform(-cfg.length_jitter, cfg.length_jitter, size=topo.num_bones)
    for a, b in topo.symmetric_bone_pairs():
        u[b] = u[a]
    return base * (1.0 + u)


def camera_pool(cfg: GeneratorConfig) -> list[CameraModel]:
    rng = np.random.default_rng([cfg.seed, 7919])
    cams = []
    for k in range(cfg.cameras):
        az = 2 * np.pi * (k + 0.5) / cfg.cameras + rng.uniform(-0.2, 0.2)
        eye = (cfg.camera_distance * np.cos(az), cfg.camera_distance * np.sin(az), cfg.camera_height)
        w, h = cfg.image_size
        cams.append(look_at_camera(eye, (0.0, 0.0, 900.0), cfg.focal, w, h))
    return cams


def _smooth_series(rng, T, amplitude, cfg):
    n = rng.integers(cfg.sinusoids[0], cfg.sinusoids[1] + 1)
    t = np.arange(T)
    out = np.zeros(T)
    weights = rng.uniform(0.5, 1.0, size=n)
    weights /= weights.sum()
    for w in weights:
        f = rng.uniform(*cfg.frequency_band)
        out += amplitude * w * np.sin(2 * np.pi * f * t + rng.uniform(0, 2 * np.pi))
    return out


def _rot_x(a):
    c, s = np.cos(a), np.sin(a)
    R = np.zeros(a.shape + (3, 3))
    R[..., 0, 0] = 1
    R[..., 1, 1], R[..., 1, 2], R[..., 2, 1], R[..., 2, 2] = c, -s, s, c
    return R


def _rot_y(a):
    c, s = np.cos(a), np.sin(a)
    R = np.zeros(a.shape + (3, 3))
    R[..., 1, 1] = 1
    R[..., 0, 0], R[..., 0, 2], R[..., 2, 0], R[..., 2, 2] = c, s, -s, c
    return R


def _rot_z(a):
    c, s = np.cos(a), np.sin(a)
    R = np.zeros(a.shape + (3, 3))
    R[..., 2, 2] = 1
    R[..., 0, 0], R[..., 0, 1], R[..., 1, 0], R[..., 1, 1] = c, -s, s, c
    return R


def _amplitude(name):
    for key, amp in _AMPLITUDE.items():
        if name.endswith(key):
            return amp
    return (0.2, 0.1)


def synth_directions(topo: SkeletonTopology, cfg: GeneratorConfig, T: int, rng: np.random.Generator) -> np.ndarray:
    """(T, j-1, 3) unit bone directions in world axes."""
    rest_table = dict(_REST)
    if cfg.topology == "mpi14":
        rest_table.update(_REST_MPI)
    dirs = np.empty((T, topo.num_bones, 3))
    for b, (_, c) in enumerate(topo.bones):
        name = topo.joint_names[c]
        rest = np.asarray(rest_table.get(name, (0.0, 0.0, 1.0)))
        rest = rest / np.linalg.norm(rest)
        amp_pitch, amp_roll = _amplitude(name)
        pitch = _smooth_series(rng, T, amp_pitch, cfg)
        roll = _smooth_series(rng, T, amp_roll, cfg)
        dirs[:, b] = np.einsum("tij,tjk,k->ti", _rot_y(roll), _rot_x(pitch), rest)
    yaw = rng.uniform(0, 2 * np.pi) + _smooth_series(rng, T, 0.6, cfg)
    dirs = np.einsum("tij,tbj->tbi", _rot_z(yaw), dirs)
    return dirs / np.linalg.norm(dirs, axis=-1, keepdims=True)


def _root_trajectory(rng, T, cfg):
    slow = GeneratorConfig(sinusoids=(2, 2), frequency_band=(0.001, 0.005))
    x = _smooth_series(rng, T, 400.0, slow)
    y = _smooth_series(rng, T, 400.0, slow)
    z = 950.0 + _smooth_series(rng, T, 20.0, slow)
    return np.stack([x, y, z], axis=-1)


def generate_video(lengths: np.ndarray, cfg: GeneratorConfig, rng: np.random.Generator,
                   actor_id: str = "A00", video_id: str = "", topo: SkeletonTopology | None = None,
                   cameras: list[CameraModel] | None = None) -> PoseSequence:
    topo = topo or _topology(cfg)
    cameras = cameras or camera_pool(cfg)
    T = cfg.video_length
    for _ in range(100):
        dirs = synth_directions(topo, cfg, T, rng)
        poses = compose(BoneRepresentation(np.broadcast_to(lengths, (T, topo.num_bones)), dirs), topo)
        root = _root_trajectory(rng, T, cfg)
        cam = cameras[int(rng.integers(len(cameras)))]
        try:
            clean = normalize_pixels(project_pixels(cam, poses, root), cam.width, cam.height)
        except BehindCameraError:
            continue
        break
    else:
        raise BehindCameraError("could not place the actor in front of any camera")
    occluded = rng.random((T, topo.num_joints)) < cfg.p_occ
    sigma = np.where(occluded, 5.0 * cfg.noise_sigma, cfg.noise_sigma)
    keypoints = clean + rng.standard_normal(clean.shape) * sigma[..., None]
    visibility = np.where(occluded, rng.uniform(0.0, 0.3, occluded.shape), rng.uniform(0.7, 1.0, occluded.shape))
    return PoseSequence(actor_id, poses, root, keypoints, visibility, cam, video_id)


def generate_dataset(cfg: GeneratorConfig) -> list[PoseSequence]:
    """Every video draws from its own stream keyed by (seed, actor, video)."""
    cfg.validate()
    topo = _topology(cfg)
    cams = camera_pool(cfg)
    videos = []
    for a in range(cfg.actors):
        lengths = generate_actor(cfg, np.random.default_rng([cfg.seed, a]), topo)
        for v in range(cfg.videos_per_actor):
            rng = np.random.default_rng([cfg.seed, a, v + 1])
            videos.append(generate_video(lengths, cfg, rng, f"A{a:02d}", f"A{a:02d}_V{v:02d}", topo, cams))
    return videos


def split_by_actor(videos: list[PoseSequence], val_actors: int) -> tuple[list[PoseSequence], list[PoseSequence]]:
    """Last ``val_actors`` actors (in first-seen order) go to validation."""
    actors = list(dict.fromkeys(v.actor_id for v in videos))
    held = set(actors[len(actors) - val_actors:]) if val_actors > 0 else set()
    return [v for v in videos if v.actor_id not in held], [v for v in videos if v.actor_id in held]
