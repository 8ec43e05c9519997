"""Finite-difference suite: every kernel on random inputs, then both branches at tiny sizes.

Network checks run one loss term at a time against the parameters on that
term's route.  A central difference of a term with respect to a parameter
behind a gradient stop would see the blocked path, so those parameters are
instead required to get an analytic gradient of exactly zero.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .nn import kernels as K
from .nn.gradcheck import GradCheckReport, grad_check
from .nn.graph import Graph, Node
from .nn.params import ParameterStore

LINEAR_TOL = 1e-6
DEFAULT_TOL = 1e-4
LINEAR_KERNELS = {"affine", "temporal_conv", "temporal_conv_s1"}


@dataclass
class SuiteResult:
    name: str
    report: GradCheckReport
    tol: float

    @property
    def ok(self) -> bool:
        return self.report.worst < self.tol


def _kernel_case(name, rng):
    """(store, build(graph) -> output node) for one kernel."""
    st = ParameterStore()

    def add(n, shape, scale=1.0):
        st.add(n, rng.standard_normal(shape) * scale)

    if name == "affine":
        add("x", (4, 5)); add("W", (3, 5)); add("b", (3,))
        return st, lambda g: K.affine(g.param("x"), g.param("W"), g.param("b"))
    if name == "temporal_conv":
        add("x", (2, 3, 9)); add("K", (4, 3, 3)); add("b", (4,))
        return st, lambda g: K.temporal_conv(g.param("x"), g.param("K"), g.param("b"), 3)
    if name == "temporal_conv_s1":
        add("x", (2, 3, 7)); add("K", (4, 3, 3)); add("b", (4,))
        return st, lambda g: K.temporal_conv(g.param("x"), g.param("K"), g.param("b"), 1)
    if name in ("batch_norm_train", "batch_norm_eval", "batch_norm_2d"):
        shape = (5, 3) if name == "batch_norm_2d" else (3, 3, 4)
        add("x", shape); add("gamma", (3,)); add("beta", (3,))
        rm, rv = rng.standard_normal(3), rng.uniform(0.5, 2.0, 3)
        train = name != "batch_norm_eval"
        return st, lambda g: K.batch_norm(g.param("x"), g.param("gamma"), g.param("beta"),
                                          rm.copy(), rv.copy(), train)
    if name == "relu":
        x = rng.standard_normal((4, 6))
        st.add("x", np.where(np.abs(x) < 0.05, 0.5, x))  # keep away from the kink
        return st, lambda g: K.relu(g.param("x"))
    if name == "dropout":
        add("x", (4, 6))
        return st, lambda g: K.dropout(g.param("x"), 0.5, True, np.random.default_rng(11))
    if name == "attention_softmax":
        add("z", (2, 5, 4))
        return st, lambda g: K.attention_softmax(g.param("z"), 3.0, axis=1)
    if name == "norm":
        add("x", (4, 3))
        return st, lambda g: K.norm(g.param("x"), axis=-1)
    if name == "normalize":
        add("x", (4, 3))
        return st, lambda g: K.normalize(g.param("x"), axis=-1)
    if name == "elementwise":
        add("a", (3, 4)); add("b", (3, 4))
        def build(g):
            a, b = g.param("a"), g.param("b")
            return K.scale(K.add(K.mul(a, b), K.sub(a, b)), 0.7)
        return st, build
    if name == "structure":
        add("a", (2, 3, 4)); add("b", (2, 2, 4))
        def build(g):
            c = K.concat([g.param("a"), g.param("b")], axis=1)
            c = K.take(c, np.array([0, 2, 2, 4]), axis=1)
            c = K.transpose(K.reshape(c, (2, 4, 2, 2)), (0, 2, 1, 3))
            return K.gather_rows(K.reshape(c, (2, 2, 8)), np.array([1, 0]))
        return st, build
    if name == "repeat_time":
        add("x", (3, 4))
        return st, lambda g: K.repeat_time(g.param("x"), 5)
    if name == "const_products":
        add("x", (2, 4, 3))
        M = rng.standard_normal((5, 4))
        c = rng.standard_normal((1, 4, 1))
        return st, lambda g: K.matmul_const(K.mul_const(g.param("x"), c), M)
    if name == "reductions":
        add("x", (3, 4))
        def build(g):
            x = g.param("x")
            return K.add_scalars([(0.3, K.square_sum(x)), (1.7, K.mean_all(x)),
                                  (0.5, K.sum_all(K.square_sum(x, axis=1)))])
        return st, build
    raise KeyError(name)


KERNEL_CASES = (
    "affine", "temporal_conv", "temporal_conv_s1", "batch_norm_train", "batch_norm_eval", "batch_norm_2d",
    "relu", "dropout", "attention_softmax", "norm", "normalize", "elementwise", "structure",
    "repeat_time", "const_products", "reductions",
)


def kernel_check(name: str, seed: int = 0) -> SuiteResult:
    rng = np.random.default_rng([seed, len(name)])
    store, build = _kernel_case(name, rng)
    probe = {}

    def loss_fn(g: Graph) -> Node:
        out = build(g)
        if out.value.ndim == 0:
            return out
        if "R" not in probe:
            probe["R"] = np.random.default_rng(seed).standard_normal(out.value.shape)
        return K.sum_all(K.mul_const(out, probe["R"]))

    report = grad_check(loss_fn, store)
    return SuiteResult(name, report, LINEAR_TOL if name in LINEAR_KERNELS else DEFAULT_TOL)


def tiny_models(composition: str = "analytic", model: str = "anatomy", seed: int = 0):
    """Small model, a fixed batch and the synthetic video it came from."""
    from .skeleton import default_topology
    from .synth import GeneratorConfig, generate_dataset
    from .training import FrameSampler, TrainConfig, build_models, make_batch, video_arrays
    from .length import augment_video

    topo = default_topology()
    cfg = TrainConfig(seed=seed, d=9, channels=4, num_subnets=2, l=3, M=3, batch_size=4, length_batch_size=3, aug_batch_size=2, dropout=0.0,
                      composition=composition, model=model)
    models = build_models(cfg, topo)
    # move the attention matrix off its zero start so softmax gradients are generic
    if "len.att.W" in models.store:
        models.store["len.att.W"].values[:] = np.random.default_rng(seed).standard_normal(
            models.store["len.att.W"].shape) * 0.5
    videos = generate_dataset(GeneratorConfig(actors=1, videos_per_actor=1, video_length=30, seed=seed))
    rng = np.random.default_rng([seed, 5])
    src = FrameSampler([video_arrays(v, topo) for v in videos])
    aug = FrameSampler([video_arrays(augment_video(v, topo, rng), topo) for v in videos])
    batch = make_batch(models, src, aug, rng)
    return models, batch


def route_checks(composition: str = "analytic", model: str = "anatomy", seed: int = 0,
                 max_per_entry: int | None = 12) -> list[SuiteResult]:
    from .training import loss_routes, loss_terms

    models, batch = tiny_models(composition, model, seed)
    store = models.store
    out = []
    for term, prefixes in loss_routes(models).items():
        names = [n for n in store.names(trainable_only=True) if any(n.startswith(p) for p in prefixes)]

        def loss_fn(g, term=term):
            return loss_terms(g, models, batch, train=True)[term]

        report = grad_check(loss_fn, store, names=names, max_per_entry=max_per_entry,
                            rng=np.random.default_rng(seed))
        out.append(SuiteResult(f"{model}/{composition}/{term}", report, DEFAULT_TOL))
    return out


def run_suite(seed: int = 0, max_per_entry: int | None = 12) -> list[SuiteResult]:
    results = [kernel_check(n, seed) for n in KERNEL_CASES]
    results += route_checks("analytic", "anatomy", seed, max_per_entry)
    results += route_checks("heads", "anatomy", seed, max_per_entry)
    results += route_checks("analytic", "baseline", seed, max_per_entry)
    return results
