"""Central finite-difference verification of analytic gradients."""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable

import numpy as np

from .graph import Graph, Node
from .params import ParameterStore


@dataclass
class GradCheckReport:
    worst: float
    errors: dict[str, float] = field(default_factory=dict)
    # entries behind a gradient stop: analytic gradient is exactly zero, not checked
    skipped: list[str] = field(default_factory=list)

    def __str__(self):
        lines = [f"{name:40s} {err:.3e}" for name, err in sorted(self.errors.items())]
        lines += [f"{name:40s} skipped (blocked)" for name in self.skipped]
        lines.append(f"worst relative error: {self.worst:.3e}")
        return "\n".join(lines)


def relative_error(a: np.ndarray, b: np.ndarray, floor: float = 0.0) -> float:
    """``|a - b| / max(|a| + |b|, floor)``; the floor keeps structurally zero gradients from scoring 1."""
    denom = max(np.linalg.norm(a) + np.linalg.norm(b), floor)
    if denom == 0.0:
        return 0.0
    return float(np.linalg.norm(a - b) / denom)


def grad_check(
    loss_fn: Callable[[Graph], Node],
    store: ParameterStore,
    eps: float = 1e-5,
    names=None,
    max_per_entry: int | None = None,
    rng: np.random.Generator | None = None,
    floor_scale: float = 1e-5,
) -> GradCheckReport:
    """Compare backprop gradients with central differences for every trainable entry.

    ``loss_fn`` must build the same deterministic graph on every call
    (dropout off or seeded inside the function).  Errors use a denominator
    floor of ``floor_scale * max(1, |loss|)``: e.g. a bias feeding batch norm
    has an exactly zero gradient, and there both sides are pure rounding noise.
    """
    names = store.names(trainable_only=True) if names is None else list(names)
    rng = rng or np.random.default_rng(0)
    store.zero_grad()
    graph = Graph(store)
    loss = loss_fn(graph)
    graph.backward(loss)
    floor = floor_scale * max(1.0, abs(float(loss.value)))
    reached = graph.reached_params()
    analytic = {n: store[n].grad.copy() for n in names}
    store.zero_grad()

    report = GradCheckReport(worst=0.0)
    for name in names:
        if name not in reached:
            if np.any(analytic[name] != 0.0):
                raise AssertionError(f"{name} is unreachable but has nonzero gradient")
            report.skipped.append(name)
            continue
        values = store[name].values
        flat = values.reshape(-1)
        idx = np.arange(flat.size)
        if max_per_entry is not None and flat.size > max_per_entry:
            idx = np.sort(rng.choice(flat.size, size=max_per_entry, replace=False))
        numeric = np.empty(idx.size)
        for i, k in enumerate(idx):
            orig = flat[k]
            flat[k] = orig + eps
            lp = float(loss_fn(Graph(store)).value)
            flat[k] = orig - eps
            lm = float(loss_fn(Graph(store)).value)
            flat[k] = orig
            numeric[i] = (lp - lm) / (2 * eps)
        err = relative_error(analytic[name].reshape(-1)[idx], numeric, floor)
        report.errors[name] = err
        report.worst = max(report.worst, err)
    return report
