"""JSON-lines dataset format ``bonekin-data-1``: one video per line.

Arrays are nested number lists.  Python's float repr round-trips doubles
exactly, so ``read_dataset(write_dataset(x))`` is bitwise equal to ``x``.
The JSON Schema lives in ``schemas/bonekin-data-1.schema.json``.
"""

from __future__ import annotations

import json
from importlib import resources
from pathlib import Path

import numpy as np

from .errors import FormatError, TopologyMismatchError
from .skeleton import CameraModel, PoseSequence, SkeletonTopology, build_topology

FORMAT = "bonekin-data-1"


def schema() -> dict:
    text = resources.files("bonekin").joinpath("schemas", f"{FORMAT}.schema.json").read_text()
    return json.loads(text)


def video_to_record(video: PoseSequence, topo: SkeletonTopology) -> dict:
    rec = {
        "format": FORMAT,
        "actor_id": video.actor_id,
        "video_id": video.video_id,
        "frames": video.frames,
        "topology": topo.to_dict(),
        "topology_hash": topo.topology_hash(),
        "poses3d": video.poses3d.tolist(),
    }
    if video.camera is not None:
        rec["camera"] = video.camera.to_dict()
        rec["image_size"] = [video.camera.width, video.camera.height]
    for name in ("root_world", "keypoints2d", "visibility"):
        arr = getattr(video, name)
        if arr is not None:
            rec[name] = arr.tolist()
    return rec


def write_dataset(videos, path, topo: SkeletonTopology) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w") as fh:
        for v in videos:
            fh.write(json.dumps(video_to_record(v, topo), separators=(",", ":")))
            fh.write("\n")
    return path


def _array(rec, key, shape, line, required=False):
    if key not in rec:
        if required:
            raise FormatError(f"missing field {key!r}", line)
        return None
    try:
        arr = np.array(rec[key], dtype=np.float64)
    except (TypeError, ValueError) as exc:
        raise FormatError(f"field {key!r} is not a numeric array: {exc}", line) from exc
    if arr.shape != shape:
        raise FormatError(f"field {key!r} has shape {arr.shape}, expected {shape}", line)
    return arr


def record_to_video(rec: dict, line: int | None = None, expected: SkeletonTopology | None = None):
    if not isinstance(rec, dict) or rec.get("format") != FORMAT:
        raise FormatError(f"not a {FORMAT} record", line)
    try:
        t = rec["topology"]
        topo = build_topology(t["parent"], t["names"], t["root"])
        T = int(rec["frames"])
        actor = str(rec["actor_id"])
    except (KeyError, TypeError, ValueError) as exc:
        raise FormatError(f"bad metadata: {exc}", line) from exc
    if rec.get("topology_hash") != topo.topology_hash():
        raise FormatError("topology_hash does not match the embedded topology", line)
    if expected is not None and topo.topology_hash() != expected.topology_hash():
        raise TopologyMismatchError(
            f"line {line}: topology {topo.topology_hash()} differs from expected {expected.topology_hash()}"
        )
    j = topo.num_joints
    camera = None
    if "camera" in rec:
        try:
            camera = CameraModel.from_dict(rec["camera"])
        except (TypeError, ValueError) as exc:
            raise FormatError(f"bad camera: {exc}", line) from exc
    try:
        video = PoseSequence(
            actor_id=actor,
            poses3d=_array(rec, "poses3d", (T, j, 3), line, required=True),
            root_world=_array(rec, "root_world", (T, 3), line),
            keypoints2d=_array(rec, "keypoints2d", (T, j, 2), line),
            visibility=_array(rec, "visibility", (T, j), line),
            camera=camera,
            video_id=str(rec.get("video_id", "")),
        )
    except ValueError as exc:
        if isinstance(exc, FormatError):
            raise
        raise FormatError(str(exc), line) from exc
    return video, topo


def read_dataset(path, topo: SkeletonTopology | None = None) -> tuple[list[PoseSequence], SkeletonTopology]:
    """Load every video; all lines must share one topology (and match ``topo`` if given)."""
    videos = []
    seen = topo
    with open(path) as fh:
        for n, raw in enumerate(fh, start=1):
            if not raw.strip():
                continue
            try:
                rec = json.loads(raw)
            except json.JSONDecodeError as exc:
                raise FormatError(f"malformed JSON: {exc.msg}", n) from exc
            video, vtopo = record_to_video(rec, n, seen)
            seen = seen or vtopo
            videos.append(video)
    if seen is None:
        raise FormatError(f"{path} contains no videos")
    return videos, seen
