import numpy as np
import pytest

from bonekin.skeleton import default_topology
from bonekin.synth import GeneratorConfig, generate_dataset
from bonekin.training import TrainConfig


def random_pose(topo, rng, scale=200.0):
    """Root-relative pose with well-separated joints."""
    from bonekin.skeleton import BoneRepresentation, compose

    lengths = rng.uniform(50.0, 400.0, topo.num_bones)
    dirs = rng.standard_normal((topo.num_bones, 3))
    dirs /= np.linalg.norm(dirs, axis=-1, keepdims=True)
    return compose(BoneRepresentation(lengths, dirs), topo)


@pytest.fixture(scope="session")
def topo():
    return default_topology()


@pytest.fixture(scope="session")
def small_videos():
    cfg = GeneratorConfig(actors=3, videos_per_actor=1, video_length=60, seed=3)
    return generate_dataset(cfg)


def tiny_train_config(**kw):
    base = dict(d=9, channels=8, num_subnets=2, l=5, M=5, batch_size=8, length_batch_size=4,
                aug_batch_size=2, epochs=1, iters_per_epoch=2, dropout=0.1, val_actors=1)
    base.update(kw)
    return TrainConfig(**base)


ACCEPTANCE_LINES: list[str] = []


def record(number, name, ok, detail=""):
    line = f"[criterion {number}] {'PASS' if ok else 'FAIL'} {name}" + (f": {detail}" if detail else "")
    ACCEPTANCE_LINES.append(line)
    print(line)
    return ok


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in ACCEPTANCE_LINES:
            terminalreporter.write_line(line)
