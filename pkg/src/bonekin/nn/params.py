"""Parameter store, Adam and the binary checkpoint format."""

from __future__ import annotations

import json
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from ..errors import FormatError, NonFiniteGradientError

CHECKPOINT_VERSION = "bonekin-ckpt-1"


@dataclass
class Entry:
    values: np.ndarray
    grad: np.ndarray
    m: np.ndarray
    v: np.ndarray
    trainable: bool = True

    @property
    def shape(self):
        return self.values.shape


class ParameterStore:
    """Named float64 arrays with paired gradient and Adam moment buffers.

    Non-trainable entries (batch-norm running statistics) live here too so a
    checkpoint captures the whole model; Adam never touches them.
    """

    def __init__(self):
        self.entries: dict[str, Entry] = {}
        self.step_count = 0

    def __getitem__(self, name: str) -> Entry:
        return self.entries[name]

    def __contains__(self, name: str) -> bool:
        return name in self.entries

    def __iter__(self):
        return iter(self.entries)

    def names(self, prefix: str = "", trainable_only: bool = False) -> list[str]:
        return [
            n for n, e in self.entries.items()
            if n.startswith(prefix) and (e.trainable or not trainable_only)
        ]

    def add(self, name: str, values, trainable: bool = True) -> Entry:
        if name in self.entries:
            raise KeyError(f"duplicate parameter {name!r}")
        values = np.array(values, dtype=np.float64)
        z = np.zeros_like(values)
        entry = Entry(values, z.copy(), z.copy(), z.copy(), trainable)
        self.entries[name] = entry
        return entry

    def add_weight(self, name: str, shape, fan_in: int, rng: np.random.Generator, gain: float = 1.0) -> Entry:
        # zero-mean uniform with variance 2 / fan_in, times gain
        a = gain * np.sqrt(6.0 / fan_in)
        return self.add(name, rng.uniform(-a, a, size=shape))

    def zero_grad(self) -> None:
        for e in self.entries.values():
            e.grad[...] = 0.0

    def snapshot(self, prefix: str = "") -> dict[str, np.ndarray]:
        return {n: self.entries[n].values.copy() for n in self.names(prefix)}

    def num_parameters(self, prefix: str = "") -> int:
        return int(sum(self.entries[n].values.size for n in self.names(prefix, trainable_only=True)))


def adam_step(store: ParameterStore, lr: float, beta1: float = 0.9, beta2: float = 0.999,
              eps: float = 1e-8, names=None) -> None:
    """One bias-corrected Adam update on every trainable entry, then zero the gradients."""
    names = store.names(trainable_only=True) if names is None else list(names)
    for n in names:
        if not np.all(np.isfinite(store[n].grad)):
            raise NonFiniteGradientError(f"non-finite gradient in {n!r}")
    t = store.step_count + 1
    bc1 = 1.0 - beta1 ** t
    bc2 = 1.0 - beta2 ** t
    for n in names:
        e = store[n]
        g = e.grad
        e.m *= beta1
        e.m += (1.0 - beta1) * g
        e.v *= beta2
        e.v += (1.0 - beta2) * (g * g)
        e.values -= lr * (e.m / bc1) / (np.sqrt(e.v / bc2) + eps)
    store.step_count = t
    store.zero_grad()


def save_checkpoint(store: ParameterStore, directory, config_hash: str = "", extra: dict | None = None) -> Path:
    """Write ``manifest.json`` plus ``params.bin`` (little-endian float64 blobs in manifest order).

    Each entry contributes three consecutive blobs: values, Adam m, Adam v.
    """
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    manifest = {
        "version": CHECKPOINT_VERSION,
        "step_count": store.step_count,
        "config_hash": config_hash,
        "entries": [
            {"name": n, "shape": list(e.shape), "trainable": e.trainable}
            for n, e in store.entries.items()
        ],
    }
    if extra:
        manifest["extra"] = extra
    with open(directory / "params.bin", "wb") as fh:
        for e in store.entries.values():
            for arr in (e.values, e.m, e.v):
                fh.write(np.ascontiguousarray(arr, dtype="<f8").tobytes())
    (directory / "manifest.json").write_text(json.dumps(manifest, indent=1, sort_keys=True))
    return directory


def load_checkpoint(directory) -> tuple[ParameterStore, dict]:
    directory = Path(directory)
    try:
        manifest = json.loads((directory / "manifest.json").read_text())
    except (OSError, json.JSONDecodeError) as exc:
        raise FormatError(f"cannot read checkpoint manifest in {directory}: {exc}") from exc
    if manifest.get("version") != CHECKPOINT_VERSION:
        raise FormatError(f"unsupported checkpoint version {manifest.get('version')!r}")
    raw = (directory / "params.bin").read_bytes()
    store = ParameterStore()
    offset = 0
    for item in manifest["entries"]:
        shape = tuple(item["shape"])
        size = int(np.prod(shape)) if shape else 1
        arrays = []
        for _ in range(3):
            nbytes = size * 8
            if offset + nbytes > len(raw):
                raise FormatError(f"checkpoint blob truncated at entry {item['name']!r}")
            arrays.append(np.frombuffer(raw, dtype="<f8", count=size, offset=offset).reshape(shape).astype(np.float64))
            offset += nbytes
        entry = store.add(item["name"], arrays[0], trainable=item["trainable"])
        entry.m[...] = arrays[1]
        entry.v[...] = arrays[2]
    if offset != len(raw):
        raise FormatError("checkpoint blob has trailing bytes")
    store.step_count = int(manifest["step_count"])
    return store, manifest
