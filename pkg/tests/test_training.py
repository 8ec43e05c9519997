import numpy as np
import pytest

from bonekin import training as T
from bonekin.errors import EmptyDatasetError, NonFiniteLossError
from bonekin.nn import kernels as K
from bonekin.nn.graph import Graph
from bonekin.skeleton import build_topology
from bonekin.synth import split_by_actor

from conftest import tiny_train_config

CHAIN = build_topology([-1, 0, 1], ["Pelvis", "Spine", "Head"], 0)


def test_joint_shift_loss_examples():
    g = Graph()
    dirs = g.constant(np.array([[0.0, 1, 0, 0, 1, 0]]))
    lengths = np.array([[100.0, 100.0]])
    assert float(T.joint_shift_loss(lengths, dirs, np.array([[[0, 200.0, 0]]]), CHAIN).value) == 0.0
    loss = T.joint_shift_loss(lengths, dirs, np.array([[[0, 199.0, 0]]]), CHAIN)
    assert float(loss.value) == pytest.approx(1.0)
    # directions are normalized before composition
    loss = T.joint_shift_loss(lengths, g.constant(np.array([[0.0, 3, 0, 0, 0.5, 0]])),
                              np.array([[[0, 200.0, 0]]]), CHAIN)
    assert float(loss.value) == pytest.approx(0.0, abs=1e-12)


def _const_terms(values):
    g = Graph()
    return {k: g.constant(v) for k, v in values.items()}


def test_total_loss_values():
    cfg = T.TrainConfig()
    assert float(T.total_loss(_const_terms(dict(D=1.0, L=1.0, J=1.0, JS=1.0)), cfg).value) == pytest.approx(1.17)
    assert float(T.total_loss(_const_terms(dict(D=0.0, L=0.0, J=0.0, JS=0.0)), cfg).value) == 0.0
    with pytest.raises(NonFiniteLossError):
        T.total_loss(_const_terms(dict(D=np.inf, J=0.0)), cfg)


@pytest.fixture(scope="module")
def tiny(small_videos, topo):
    cfg = tiny_train_config()
    models = T.build_models(cfg, topo)
    src = T.FrameSampler([T.video_arrays(v, topo) for v in small_videos])
    return models, src


def _grads(models, batch, cfg, seed=0):
    models.store.zero_grad()
    g = Graph(models.store)
    terms = T.loss_terms(g, T.Models(models.store, cfg, models.topo), batch, True, np.random.default_rng(seed))
    total = T.total_loss(terms, cfg)
    g.backward(total)
    out = {n: models.store[n].grad.copy() for n in models.store.names(trainable_only=True)}
    models.store.zero_grad()
    return float(total.value), out


def _with_frozen_bn(models, fn):
    """Run ``fn`` and restore running statistics, so repeated forwards see identical state."""
    snap = {n: models.store[n].values.copy() for n in models.store.names() if n.endswith((".rm", ".rv"))}
    try:
        return fn()
    finally:
        for n, v in snap.items():
            models.store[n].values[:] = v


def test_lambda_linearity(tiny):
    models, src = tiny
    cfg = models.config
    batch = T.make_batch(models, src, None, np.random.default_rng(1))
    from dataclasses import replace
    doubled = replace(cfg, lambda_D=2 * cfg.lambda_D, lambda_L=2 * cfg.lambda_L,
                      lambda_J=2 * cfg.lambda_J, lambda_JS=2 * cfg.lambda_JS)
    t1, g1 = _with_frozen_bn(models, lambda: _grads(models, batch, cfg))
    t2, g2 = _with_frozen_bn(models, lambda: _grads(models, batch, doubled))
    assert t2 == pytest.approx(2 * t1, rel=1e-12)
    for n in g1:
        np.testing.assert_allclose(g2[n], 2 * g1[n], rtol=1e-10, atol=1e-300)


def test_zero_lambda_js_direction_grad_equals_d_only(tiny):
    models, src = tiny
    cfg = models.config
    from dataclasses import replace
    batch = T.make_batch(models, src, None, np.random.default_rng(2))
    no_js = replace(cfg, lambda_JS=0.0)
    d_only = replace(cfg, lambda_JS=0.0, lambda_J=0.0, lambda_L=0.0)
    _, a = _with_frozen_bn(models, lambda: _grads(models, batch, no_js))
    _, b = _with_frozen_bn(models, lambda: _grads(models, batch, d_only))
    for n in T.param_group(models.store, "direction"):
        np.testing.assert_array_equal(a[n], b[n])


def test_loss_routes_table(topo):
    m = T.build_models(tiny_train_config(), topo)
    r = T.loss_routes(m)
    assert set(r) == {"D.s0", "D.s1", "J", "L", "JS.s0", "JS.s1"}
    m = T.build_models(tiny_train_config(composition="heads"), topo)
    r = T.loss_routes(m)
    assert r["JS"] == ["dir.s1.", "head.shift."] and r["H"] == ["dir.s1.", "head.joint."]
    m = T.build_models(tiny_train_config(model="baseline"), topo)
    assert set(T.loss_routes(m)) == {"J.s0", "J.s1"}
    assert not m.store.names("len.")


@pytest.mark.parametrize("kw", [{}, {"composition": "heads"}])
def test_every_term_reaches_exactly_its_route(tiny, topo, kw):
    _, src = tiny
    models = T.build_models(tiny_train_config(**kw), topo)
    batch = T.make_batch(models, src, None, np.random.default_rng(3))
    routes = T.loss_routes(models)
    for term, prefixes in routes.items():
        g = Graph(models.store)
        terms = T.loss_terms(g, models, batch, True, np.random.default_rng(0))
        g.backward(terms[term])
        reached = g.reached_params()
        models.store.zero_grad()
        assert reached, term
        assert all(any(n.startswith(p) for p in prefixes) for n in reached), (term, reached)


def _oracle(monkeypatch, video, topo):
    arr = T.video_arrays(video, topo)

    def fake_dirs(models, kp_win, vis_win, chunk=2048):
        # the centre of each window identifies the frame in a non-causal model
        centre = kp_win[:, kp_win.shape[1] // 2]
        idx = [int(np.flatnonzero((arr.keypoints == row).all(axis=1))[0]) for row in centre]
        return arr.directions[idx]

    def fake_len(models, keypoints):
        n = len(keypoints)
        lengths = np.tile(arr.lengths, (n, 1))
        return None, lengths, np.random.default_rng(n).standard_normal(lengths.shape)

    monkeypatch.setattr(T, "_direction_eval", fake_dirs)
    monkeypatch.setattr(T, "_length_eval", fake_len)


def test_oracle_parameters_reproduce_ground_truth(monkeypatch, small_videos, topo):
    v = small_videos[0]
    models = T.build_models(tiny_train_config(), topo)
    _oracle(monkeypatch, v, topo)
    pred = T.predict_video(models, v)
    assert np.abs(pred - v.camera_poses()).max() < 1e-9
    assert np.abs(T.predict_frame(models, v, 17) - v.camera_poses()[17]).max() < 1e-9


@pytest.fixture(scope="module")
def trained(small_videos, topo):
    train_set, _ = split_by_actor(small_videos, 1)
    return T.train(train_set, None, tiny_train_config(), topo)


@pytest.mark.parametrize("strategy", ["random", "causal-random", "firstframe", "consecutive"])
def test_predict_frame_matches_predict_video(trained, small_videos, strategy):
    v = small_videos[2]
    full = T.predict_video(trained.models, v, video_index=4, strategy=strategy)
    fp = T.FramePredictor(trained.models, v, video_index=4, strategy=strategy)
    for t in (0, 3, 30, v.frames - 1):
        np.testing.assert_allclose(fp.predict(t), full[t], rtol=0, atol=1e-9)


def test_predictions_root_relative(trained, small_videos, topo):
    pred = T.predict_video(trained.models, small_videos[2])
    assert np.all(pred[:, topo.root_index] == 0)
    assert np.all(np.isfinite(pred))


def test_causal_ignores_future(small_videos, topo):
    train_set, _ = split_by_actor(small_videos, 1)
    state = T.train(train_set, None, tiny_train_config(causal=True, strategy="causal-random"), topo)
    v = small_videos[2]
    t = 25
    from dataclasses import replace
    noisy = replace(v, keypoints2d=v.keypoints2d.copy(), visibility=v.visibility.copy())
    rng = np.random.default_rng(0)
    noisy.keypoints2d[t + 1:] += rng.standard_normal(noisy.keypoints2d[t + 1:].shape)
    noisy.visibility[t + 1:] = rng.uniform(0, 1, noisy.visibility[t + 1:].shape)
    a = T.predict_frame(state.models, v, t)
    b = T.predict_frame(state.models, noisy, t)
    assert a.tobytes() == b.tobytes()
    full_a = T.predict_video(state.models, v)[: t + 1]
    full_b = T.predict_video(state.models, noisy)[: t + 1]
    assert full_a.tobytes() == full_b.tobytes()


def test_firstframe_caches_lengths(trained, small_videos):
    v = small_videos[2]
    M = trained.models.config.M
    fp = T.FramePredictor(trained.models, v, strategy="firstframe")
    at_M = fp.fused_lengths(M)
    runs = fp.length_runs
    for t in range(M + 1, v.frames):
        assert fp.fused_lengths(t).tobytes() == at_M.tobytes()
    assert fp.length_runs == runs
    early = [fp.fused_lengths(t) for t in range(M)]
    assert fp.length_runs > runs and len(early) == M


def test_train_determinism_and_resume(tmp_path, small_videos, topo):
    train_set, val_set = split_by_actor(small_videos, 1)
    cfg = tiny_train_config(epochs=2)
    a = T.train(train_set, val_set, cfg, topo, checkpoint_dir=tmp_path / "a", log_path=tmp_path / "a.jsonl")
    b = T.train(train_set, val_set, cfg, topo, checkpoint_dir=tmp_path / "b")
    assert (tmp_path / "a" / "params.bin").read_bytes() == (tmp_path / "b" / "params.bin").read_bytes()
    # one epoch, save, reload, one more epoch
    from dataclasses import replace
    half = T.train(train_set, val_set, replace(cfg, epochs=1), topo)
    T.save_train_state(half, tmp_path / "half")
    state = T.load_train_state(tmp_path / "half")
    state.models.config = cfg
    resumed = T.train(train_set, val_set, cfg, topo, state=state)
    for n in a.store:
        assert resumed.store[n].values.tobytes() == a.store[n].values.tobytes(), n
    log = [l for l in (tmp_path / "a.jsonl").read_text().splitlines() if l]
    assert len(log) == 2
    import json
    entry = json.loads(log[0])
    assert {"loss_D", "loss_L", "loss_J", "loss_JS", "val"} <= set(entry)


def test_checkpoint_roundtrip_metrics(tmp_path, trained, small_videos):
    T.save_train_state(trained, tmp_path)
    loaded = T.load_train_state(tmp_path)
    a = T.evaluate(trained.models, small_videos[2:]).to_dict(include_frames=True)
    b = T.evaluate(loaded.models, small_videos[2:]).to_dict(include_frames=True)
    assert a == b


def test_evaluate_single_frame_video(trained, small_videos):
    from dataclasses import replace
    v = small_videos[2]
    one = replace(v, poses3d=v.poses3d[:1], root_world=v.root_world[:1], keypoints2d=v.keypoints2d[:1],
                  visibility=v.visibility[:1])
    r = T.evaluate(trained.models, [one])
    assert r.mpjve_mm is None and np.isfinite(r.mpjpe_mm) and r.frames == 1


def test_empty_datasets(topo):
    with pytest.raises(EmptyDatasetError):
        T.train([], None, tiny_train_config(), topo)


@pytest.mark.parametrize("kw", [{"composition": "heads"}, {"model": "baseline"}, {"attention": False},
                                {"vis_fusion": False, "augment": False}])
def test_variants_train_and_predict(small_videos, topo, kw):
    train_set, val_set = split_by_actor(small_videos, 1)
    state = T.train(train_set, None, tiny_train_config(**kw), topo)
    r = T.evaluate(state.models, val_set)
    assert np.isfinite(r.mpjpe_mm) and r.p_mpjpe_mm <= r.mpjpe_mm + 1e-9


def test_predictions_to_world_axes(trained, small_videos):
    v = small_videos[2]
    pred = T.predict_video(trained.models, v)
    (w,) = T.predictions_to_videos([v], [pred])
    np.testing.assert_allclose(w.camera_poses(), pred, atol=1e-9)
    assert w.keypoints2d is None


def test_threads_env(monkeypatch, trained, small_videos):
    one = T.predict_all(trained.models, small_videos)
    monkeypatch.setenv("BONEKIN_THREADS", "3")
    three = T.predict_all(trained.models, small_videos)
    assert all(a.tobytes() == b.tobytes() for a, b in zip(one, three))
