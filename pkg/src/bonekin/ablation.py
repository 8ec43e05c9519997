"""Multi-seed toggle matrix: train a reference model and one variant per toggle, report median deltas.

A delta is ``variant MPJPE - reference MPJPE`` on held-out actors, so a
positive median means the feature the variant removes was helping.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field, replace

import numpy as np

from .synth import GeneratorConfig, generate_dataset, split_by_actor
from .skeleton import default_topology
from .training import TrainConfig, evaluate, train

log = logging.getLogger(__name__)

# variant name -> TrainConfig overrides relative to the reference
VARIANTS = {
    "consecutive": {"strategy": "consecutive"},
    "baseline": {"model": "baseline"},
    "no-augment": {"augment": False},
    "no-vis-fusion": {"vis_fusion": False},
    "no-attention": {"attention": False},
    "single-subnet": {"num_subnets": 1},
}

TOGGLES = {
    "sampling": "consecutive",
    "decomposition": "baseline",
    "augmentation": "no-augment",
    "visibility": "no-vis-fusion",
    "attention": "no-attention",
    "propagation": "single-subnet",
}


@dataclass
class AblationResult:
    toggles: list[str]
    seeds: list[int]
    # arm name -> list of validation MPJPE (mm), one per seed
    mpjpe: dict[str, list[float]] = field(default_factory=dict)

    def deltas(self, toggle: str) -> list[float]:
        arm = TOGGLES[toggle]
        return [v - r for v, r in zip(self.mpjpe[arm], self.mpjpe["reference"])]

    def median_delta(self, toggle: str) -> float:
        return float(np.median(self.deltas(toggle)))

    def table(self) -> str:
        rows = [f"{'toggle':14s} {'variant':14s} {'ref mm':>9s} {'variant mm':>11s} {'median delta':>13s}"]
        ref = float(np.median(self.mpjpe["reference"]))
        for t in self.toggles:
            arm = TOGGLES[t]
            rows.append(f"{t:14s} {arm:14s} {ref:9.2f} {float(np.median(self.mpjpe[arm])):11.2f} "
                        f"{self.median_delta(t):+13.2f}")
        return "\n".join(rows)

    def to_dict(self) -> dict:
        return {
            "seeds": self.seeds,
            "mpjpe_mm": self.mpjpe,
            "median_delta_mm": {t: self.median_delta(t) for t in self.toggles},
        }


def run_ablation(toggles, seeds, gen_cfg: GeneratorConfig, train_cfg: TrainConfig) -> AblationResult:
    """Each seed regenerates the dataset and retrains every arm from that seed."""
    unknown = [t for t in toggles if t not in TOGGLES]
    if unknown:
        raise KeyError(f"unknown toggle(s) {unknown}; choose from {sorted(TOGGLES)}")
    result = AblationResult(list(toggles), list(seeds))
    arms = {"reference": {}}
    arms.update({TOGGLES[t]: VARIANTS[TOGGLES[t]] for t in toggles})
    topo = default_topology(gen_cfg.topology)
    for seed in seeds:
        videos = generate_dataset(replace(gen_cfg, seed=seed))
        train_set, val_set = split_by_actor(videos, train_cfg.val_actors)
        for name, over in arms.items():
            cfg = replace(train_cfg, seed=seed, **over)
            state = train(train_set, None, cfg, topo)
            err = evaluate(state.models, val_set).mpjpe_mm
            log.info("seed %d arm %s: %.2f mm", seed, name, err)
            result.mpjpe.setdefault(name, []).append(err)
    return result
