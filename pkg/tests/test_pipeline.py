"""Tests for augmentation, training orchestration, the marginal
segmentation loop, and evaluation metrics."""

import os

import numpy as np
import pytest
from scipy import stats

import apertureseg.agent as agent
import apertureseg.pipeline as P
from apertureseg.aperture import ApertureConfig
from apertureseg.mesh import (hausdorff, icosphere, point_to_surface,
                              subdivide, vertex_normals)
from apertureseg.ssm import fit_ssm
from apertureseg.volume import PhantomSpec, Volume, generate_phantom


def tiny_phantom(seed=0, family="ellipsoid", semi=(20.0, 17.0, 14.0)):
    spec = PhantomSpec(family=family, semi_axes=semi, softness=2.0,
                       noise=0.01, seed=seed, shape=(32, 32, 32),
                       spacing=(3.0, 3.0, 3.0), mesh_level=2)
    return generate_phantom(spec)


def tiny_model(n=3):
    meshes = []
    for k in range(n):
        _, truth = tiny_phantom(seed=k, semi=(20.0 + k, 17.0, 14.0 + 2 * k))
        meshes.append(truth)
    return meshes, fit_ssm(meshes)


GLOBAL_CFG = ApertureConfig(alpha=0.0, beta=60.0, n_depth=8, n_ring=0,
                            two_sided=True)
LOCAL_CFG = ApertureConfig(alpha=0.0, beta=10.0, n_depth=4, n_ring=0)


def tiny_agents(seed=0, zero=False):
    g = agent.init_network(GLOBAL_CFG.state_width, 3, beta=60.0,
                           seed=seed, encoder=(8, 12), decoder=(10, 8),
                           global_hidden=(6,))
    l = agent.init_network(LOCAL_CFG.state_width, 1, beta=10.0,
                           seed=seed + 1, encoder=(8, 12), decoder=(10, 8),
                           global_hidden=(6,))
    if zero:
        for net in (g, l):
            for k in net.params:
                net.params[k][:] = 0.0
    return P.AgentPair(g, l)


def seg_cfg(**kw):
    kw.setdefault("levels", 1)
    kw.setdefault("global_aperture", GLOBAL_CFG)
    kw.setdefault("local_aperture", LOCAL_CFG)
    return P.SegmentConfig(**kw)


# ---------------------------------------------------------------------------
# augmentation

def test_augment_zero_ranges_is_identity():
    meshes, model = tiny_model()
    truth = meshes[0]
    p = P.AugmentParams(asm_range=0.0, translation_range=0.0,
                        rotation_range=0.0, log_scale_range=0.0,
                        jitter=0.0, samples=1)
    aug = P.augment(truth, model, p, seed=5)
    assert np.allclose(aug.estimate.vertices, truth.vertices, atol=1e-12)
    assert np.max(np.abs(aug.action.values)) < 1e-9
    assert np.max(np.abs(aug.local_action.values)) < 1e-9
    assert np.linalg.norm(aug.global_label.translation) < 1e-9
    assert np.linalg.norm(aug.global_label.rotation) < 1e-7
    assert np.max(np.abs(aug.global_label.log_scale)) < 1e-9


def test_augment_deterministic():
    meshes, model = tiny_model()
    p = P.AugmentParams(asm_range=1.5, translation_range=8.0,
                        rotation_range=0.2, log_scale_range=0.1,
                        jitter=0.5, samples=1)
    a = P.augment(meshes[1], model, p, seed=42)
    b = P.augment(meshes[1], model, p, seed=42)
    assert np.array_equal(a.estimate.vertices, b.estimate.vertices)
    assert np.array_equal(a.action.values, b.action.values)
    assert np.array_equal(a.local_action.values, b.local_action.values)
    c = P.augment(meshes[1], model, p, seed=43)
    assert not np.allclose(a.estimate.vertices, c.estimate.vertices)


def test_augment_displacement_scale():
    # translation only: mean vertex displacement should sit near the
    # expected norm of a uniform per-axis draw
    meshes, model = tiny_model()
    p = P.AugmentParams(asm_range=0.0, translation_range=10.0,
                        rotation_range=0.0, log_scale_range=0.0,
                        jitter=0.0, samples=1)
    disp = []
    for k in range(200):
        aug = P.augment(meshes[0], model, p, seed=k)
        disp.append(np.mean(np.linalg.norm(
            aug.estimate.vertices - meshes[0].vertices, axis=1)))
    mean = np.mean(disp)
    assert 5.0 <= mean <= 20.0


def test_augment_labels_point_back_to_truth():
    # the data term targets the truth surface, so judge labels by how far
    # the displaced vertices remain from that surface
    meshes, model = tiny_model()
    truth = meshes[0]
    p = P.AugmentParams(asm_range=1.0, translation_range=10.0,
                        rotation_range=0.2, log_scale_range=0.1,
                        jitter=0.3, samples=1)
    aug = P.augment(truth, model, p, seed=3)
    h0 = hausdorff(aug.estimate.vertices, truth.vertices)
    h_corr = hausdorff(aug.corrected.vertices, truth.vertices)
    assert h_corr < h0

    d_est, _ = point_to_surface(aug.estimate.vertices, truth)
    deformed = aug.estimate.vertices + aug.action.values
    d_def, _ = point_to_surface(deformed, truth)
    assert d_def.max() < 0.4 * d_est.max()

    normals = vertex_normals(aug.corrected)
    pulled = aug.corrected.vertices + aug.local_action.displacements(normals)
    d_corr, _ = point_to_surface(aug.corrected.vertices, truth)
    d_loc, _ = point_to_surface(pulled, truth)
    assert d_loc.max() < 0.3 * d_corr.max()


def test_augment_topology_mismatch_raises():
    meshes, model = tiny_model()
    other = icosphere(1, radius=20.0)
    p = P.AugmentParams(samples=1)
    with pytest.raises(ValueError):
        P.augment(other, model, p, seed=0)


# ---------------------------------------------------------------------------
# random initialization

def test_random_init_zero_ranges_gives_mean_shape():
    _, model = tiny_model()
    proto = P.InitProtocol(max_translation=0.0, mode_count=2,
                           coeff_range=0.0, trials=1)
    mesh = P.random_init(model, proto, seed=0)
    assert np.allclose(mesh.vertices, model.mean, atol=1e-12)


def test_random_init_translation_within_bounds():
    _, model = tiny_model()
    proto = P.InitProtocol(max_translation=30.0, mode_count=0,
                           coeff_range=0.0, trials=1)
    for seed in range(50):
        mesh = P.random_init(model, proto, seed=seed)
        t = mesh.vertices - model.mean
        assert np.allclose(t, t[0], atol=1e-12)  # pure translation
        assert np.all(np.abs(t[0]) <= 30.0)
    a = P.random_init(model, proto, seed=7)
    b = P.random_init(model, proto, seed=7)
    assert np.array_equal(a.vertices, b.vertices)


def test_init_draw_distribution_uniform():
    proto = P.InitProtocol(max_translation=50.0, mode_count=2,
                           coeff_range=2.0, trials=1)
    rng = np.random.Generator(np.random.PCG64(0))
    coeffs = []
    trans = []
    for _ in range(1000):
        c, t = P.init_draws(proto, rng)
        coeffs.append(c)
        trans.append(t)
    c = np.concatenate(coeffs)
    t = np.concatenate(trans)
    p_c = stats.kstest(c / 4.0 + 0.5, "uniform").pvalue
    p_t = stats.kstest(t / 100.0 + 0.5, "uniform").pvalue
    assert p_c > 0.01
    assert p_t > 0.01


def test_random_init_needs_enough_modes():
    _, model = tiny_model()  # 3 meshes -> 2 modes
    proto = P.InitProtocol(mode_count=5)
    with pytest.raises(ValueError):
        P.random_init(model, proto, seed=0)


# ---------------------------------------------------------------------------
# batching

def test_batch_windows_cover_exactly():
    wins = P._batch_windows(2562, 642)
    assert wins == [(0, 642), (642, 1284), (1284, 1926), (1920, 2562)]
    assert all(b - a == 642 for a, b in wins)
    covered = np.zeros(2562, dtype=bool)
    for a, b in wins:
        covered[a:b] = True
    assert covered.all()
    assert P._batch_windows(100, 642) == [(0, 100)]
    assert P._batch_windows(642, 642) == [(0, 642)]
    assert P._batch_windows(1284, 642) == [(0, 642), (642, 1284)]


def test_predict_local_first_window_wins():
    net = agent.init_network(6, 1, beta=3.0, seed=9, encoder=(5, 6),
                             decoder=(5, 4), global_hidden=(3,))
    rng = np.random.Generator(np.random.PCG64(4))
    s = rng.normal(size=(10, 6))
    out = P._predict_local(net, s, base_n=4)
    assert out.shape == (10, 1)
    # windows: [0:4], [4:8], [6:10]; rows 6..7 belong to the second window
    w2, _ = agent.forward(net, s[4:8])
    w3, _ = agent.forward(net, s[6:10])
    assert np.array_equal(out[4:8], w2)
    assert np.array_equal(out[8:10], w3[2:])
    assert np.isfinite(out).all()


# ---------------------------------------------------------------------------
# segment configuration and loop

def test_segment_config_broadcasts_and_validates():
    cfg = seg_cfg(levels=3)
    assert len(cfg.local_aperture) == 3
    assert all(c == LOCAL_CFG for c in cfg.local_aperture)
    cfg2 = P.SegmentConfig(levels=2, global_aperture=GLOBAL_CFG,
                           local_aperture=(LOCAL_CFG, GLOBAL_CFG))
    assert cfg2.local_aperture == (LOCAL_CFG, GLOBAL_CFG)
    with pytest.raises(ValueError):
        P.SegmentConfig(levels=0)
    with pytest.raises(ValueError):
        P.SegmentConfig(levels=3, local_aperture=(LOCAL_CFG, LOCAL_CFG))
    with pytest.raises(ValueError):
        P.SegmentConfig(eps_stop=-1.0)


def test_segment_zero_agents_is_identity():
    vol, truth = tiny_phantom()
    agents = tiny_agents(zero=True)
    init = icosphere(2, radius=15.0)
    final, trace = P.segment(vol, init, agents, seg_cfg())
    assert np.array_equal(final.vertices, init.vertices)
    assert np.array_equal(final.faces, init.faces)
    # zero action converges instantly: one iteration per stage
    stages = [t["stage"] for t in trace]
    assert stages == ["translation", "affine", "nonrigid"]
    assert all(t["mean_action_mm"] == 0.0 for t in trace)


def test_segment_eps_inf_caps_one_iteration_per_stage():
    vol, _ = tiny_phantom()
    agents = tiny_agents(seed=3)
    init = icosphere(2, radius=15.0)
    cfg = seg_cfg(levels=2, eps_stop=np.inf)
    final, trace = P.segment(vol, init, agents, cfg)
    stages = [(t["stage"], t["level"]) for t in trace]
    assert stages == [("translation", 0), ("affine", 0),
                      ("nonrigid", 0), ("nonrigid", 1)]
    for t in trace:
        if t["stage"] == "nonrigid":
            assert t["mean_action_mm"] <= 10.0  # local clamp end to end
        assert t["seconds"] >= 0.0
    assert final.n_vertices == subdivide(init).n_vertices


def test_segment_iteration_caps():
    vol, _ = tiny_phantom()
    agents = tiny_agents(seed=5)
    init = icosphere(2, radius=15.0)
    cfg = seg_cfg(translation_iters=2, affine_iters=3, nonrigid_iters=2,
                  eps_stop=0.0)
    _, trace = P.segment(vol, init, agents, cfg)
    counts = {}
    for t in trace:
        counts[t["stage"]] = counts.get(t["stage"], 0) + 1
    assert counts == {"translation": 2, "affine": 3, "nonrigid": 2}


def test_segment_rejects_bad_init():
    vol, _ = tiny_phantom()
    agents = tiny_agents(zero=True)
    bad = icosphere(2, radius=15.0)
    bad = bad.with_vertices(bad.vertices.copy())
    bad.vertices[0, 0] = np.nan
    with pytest.raises(ValueError):
        P.segment(vol, bad, agents, seg_cfg())


def test_segment_nonfinite_guard():
    vol, _ = tiny_phantom()
    agents = tiny_agents(zero=True)
    # zero weights except an absurd log-scale bias: the affine stage
    # overflows exp() and must fail loudly instead of emitting NaN
    agents.global_net.params["glob_out_b"][6:] = 800.0
    init = icosphere(2, radius=15.0)
    with np.errstate(over="ignore", invalid="ignore"), \
            pytest.raises(RuntimeError):
        P.segment(vol, init, agents, seg_cfg(affine_iters=2))


# ---------------------------------------------------------------------------
# evaluation

def eval_volume():
    n = 48
    origin = -(n - 1) * 2.0 / 2.0
    return Volume(np.zeros((n, n, n), dtype=np.float32), (2.0, 2.0, 2.0),
                  (origin, origin, origin))


def test_evaluate_identical_meshes():
    vol = eval_volume()
    mesh = icosphere(3, radius=30.0)
    m = P.evaluate(mesh, mesh.copy(), vol)
    assert m["dice"] == 1.0
    assert m["hausdorff_mm"] == 0.0


def test_evaluate_concentric_spheres_analytic_dice():
    # radius ratio q: dice = 2 q^3 / (1 + q^3)
    vol = eval_volume()
    outer = icosphere(3, radius=30.0)
    inner = icosphere(3, radius=27.0)
    m = P.evaluate(inner, outer, vol)
    expect = 2.0 * 0.9 ** 3 / (1.0 + 0.9 ** 3)
    assert abs(m["dice"] - expect) < 0.01
    assert abs(m["hausdorff_mm"] - 3.0) < 1e-9


def test_evaluate_disjoint_meshes():
    vol = eval_volume()
    a = icosphere(2, radius=8.0, center=(-20.0, 0.0, 0.0))
    b = icosphere(2, radius=8.0, center=(20.0, 0.0, 0.0))
    m = P.evaluate(a, b, vol)
    assert m["dice"] == 0.0
    assert m["hausdorff_mm"] > 30.0


# ---------------------------------------------------------------------------
# training

def train_fixture(levels=1, steps=12, samples=6):
    pairs = [tiny_phantom(seed=k, semi=(20.0 + k, 17.0, 14.0 + k))
             for k in range(2)]
    p = P.AugmentParams(asm_range=1.0, translation_range=10.0,
                        rotation_range=0.1, log_scale_range=0.05,
                        jitter=0.5, samples=samples)
    t_cfg = agent.TrainConfig(learning_rate=1e-3, batch_size=4,
                              steps=steps, seed=0)
    s_cfg = seg_cfg(levels=levels)
    return pairs, p, t_cfg, s_cfg


def test_train_smoke(tmp_path):
    pairs, p, t_cfg, s_cfg = train_fixture()
    agents, model, log = P.train(pairs, p, t_cfg, s_cfg, seed=1,
                                 out_dir=str(tmp_path))
    assert agents.global_net.out_dim == 3
    assert agents.local_net.out_dim == 1
    assert agents.local_net.d_in == LOCAL_CFG.state_width
    assert model.n_modes == 1
    rows = log["loss_log"]
    assert len(rows) == 2 * t_cfg.steps
    assert {r["agent"] for r in rows} == {"global", "local"}
    assert all(np.isfinite(r["loss"]) for r in rows)
    v = log["validation"]
    assert v["reward_final"] <= 0.0 and v["reward_initial"] <= 0.0
    for name in ("global.agent.json", "global.agent.raw",
                 "local.agent.json", "local.agent.raw", "loss_log.csv",
                 "validation.json"):
        assert os.path.exists(tmp_path / name)


def test_train_deterministic_loss_log():
    pairs, p, t_cfg, s_cfg = train_fixture(steps=6, samples=4)
    _, _, log_a = P.train(pairs, p, t_cfg, s_cfg, seed=2)
    _, _, log_b = P.train(pairs, p, t_cfg, s_cfg, seed=2)
    assert log_a["loss_log"] == log_b["loss_log"]
    assert log_a["validation"] == log_b["validation"]


def test_train_multiresolution_batches():
    pairs, p, t_cfg, s_cfg = train_fixture(levels=2, steps=4, samples=4)
    agents, _, log = P.train(pairs, p, t_cfg, s_cfg, seed=3)
    assert all(np.isfinite(r["loss"]) for r in log["loss_log"])


def test_local_sample_fine_batch_size():
    vol, truth = tiny_phantom()
    fine = subdivide(truth)
    rng = np.random.Generator(np.random.PCG64(0))
    sample = P._local_sample_fine(fine, vol, truth, LOCAL_CFG,
                                  base_n=truth.n_vertices, window_rng=rng)
    assert sample.state.shape == (truth.n_vertices,
                                  LOCAL_CFG.state_width)
    assert sample.action.values.shape == (truth.n_vertices,)
    assert sample.vertices.shape == (truth.n_vertices, 3)
    assert sample.normals.shape == (truth.n_vertices, 3)
    assert sample.estimate is None


def test_train_rejects_single_pair():
    vol, truth = tiny_phantom()
    p = P.AugmentParams(samples=2)
    t_cfg = agent.TrainConfig(steps=1)
    with pytest.raises(ValueError):
        P.train([(vol, truth)], p, t_cfg, seg_cfg())


# ---------------------------------------------------------------------------
# benchmark sweep

def test_benchmark_rows_and_determinism(tmp_path):
    vol, truth = tiny_phantom(seed=9)
    meshes, model = tiny_model()
    agents = tiny_agents(seed=11)
    proto = P.InitProtocol(max_translation=5.0, mode_count=1,
                           coeff_range=1.0, trials=2)
    cfg = seg_cfg(translation_iters=1, affine_iters=1, nonrigid_iters=2)
    runs = []
    for _ in range(2):
        rows, summary = P.benchmark([("organ-a", vol, truth)], agents,
                                    model, proto, cfg, seed=5)
        runs.append((rows, summary))
    assert runs[0] == runs[1]
    rows, summary = runs[0]
    assert len(rows) == 2
    assert all(r["seconds"] == 0.0 for r in rows)
    assert summary["trials"] == 2
    assert 0.0 <= summary["dice_mean"] <= 1.0
    path = tmp_path / "bench.csv"
    P.write_bench_csv(rows, path)
    lines = open(path).read().splitlines()
    assert lines[0] == "trial,organ,dice,hausdorff_mm,seconds"
    assert len(lines) == 3


def test_benchmark_wall_timing_fills_seconds():
    vol, truth = tiny_phantom(seed=9)
    _, model = tiny_model()
    agents = tiny_agents(zero=True)
    proto = P.InitProtocol(max_translation=0.0, mode_count=0,
                           coeff_range=0.0, trials=1)
    cfg = seg_cfg(translation_iters=1, affine_iters=1, nonrigid_iters=1)
    rows, summary = P.benchmark([("a", vol, truth)], agents, model,
                                proto, cfg, seed=0, timing="wall")
    assert rows[0]["seconds"] > 0.0
    assert "seconds_mean" in summary
    with pytest.raises(ValueError):
        P.benchmark([("a", vol, truth)], agents, model, proto, cfg,
                    timing="cpu")
