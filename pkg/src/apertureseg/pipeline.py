"""Training-data augmentation, training orchestration, the marginal
multi-resolution segmentation loop, and evaluation metrics.

Inference runs stages in a fixed marginal order: translation only, then the
full similarity transform, then per-vertex non-rigid refinement, optionally
continued on subdivided copies of the mesh. A finer mesh is fed to the
local network in contiguous batches of the base vertex count; where the
batch windows overlap, the first prediction wins.
"""

import csv
import json
import os
import time
from dataclasses import dataclass, field, replace

import numpy as np

from . import agent
from .aperture import ApertureConfig, assemble_state, sample_aperture
from .mesh import Mesh, hausdorff, subdivide, vertex_normals
from .oracle import (ActionField, GlobalTransform, fit_global, ideal_action,
                     reward)
from .ssm import fit_ssm, sample_shape
from .volume import dice, voxelize_mesh


# ---------------------------------------------------------------------------
# configuration types

@dataclass
class AugmentParams:
    """Ranges for the training-estimate generator. Shape coefficients are
    uniform in sigma units over every mode; the similarity transform draws
    per-axis translation, an axis-angle rotation, and per-axis log scale;
    jitter is iid Gaussian per vertex coordinate."""
    asm_range: float = 2.0
    translation_range: float = 80.0   # mm, per axis
    rotation_range: float = 0.3       # radians
    log_scale_range: float = 0.15
    jitter: float = 1.0               # mm, stddev
    samples: int = 200

    def __post_init__(self):
        if (self.asm_range < 0 or self.translation_range < 0
                or self.rotation_range < 0 or self.log_scale_range < 0
                or self.jitter < 0 or self.samples < 1):
            raise ValueError("invalid augmentation parameters")


@dataclass
class InitProtocol:
    """Random initialization sweep for evaluation runs."""
    max_translation: float = 80.0   # mm, per axis
    mode_count: int = 5
    coeff_range: float = 2.0        # sigma units
    trials: int = 10

    def __post_init__(self):
        if self.trials < 1:
            raise ValueError("trials must be >= 1")
        if (self.max_translation < 0 or self.mode_count < 0
                or self.coeff_range < 0):
            raise ValueError("invalid init protocol")


def _default_global_aperture():
    # deep two-sided ray so an estimate dropped 80 mm off target still
    # sees the object from either side of its surface
    return ApertureConfig(alpha=0.0, beta=160.0, n_depth=32, n_ring=0,
                          two_sided=True)


def _default_local_aperture():
    return ApertureConfig(alpha=0.0, beta=20.0, n_depth=8, n_ring=0)


@dataclass
class SegmentConfig:
    """Marginal inference schedule. levels = 1 keeps the initial mesh
    resolution; each extra level subdivides once and reruns the non-rigid
    stage there. An iteration cap of 0 skips that stage entirely."""
    levels: int = 2
    translation_iters: int = 5
    affine_iters: int = 5
    nonrigid_iters: int = 10
    eps_stop: float = 0.05          # mm, mean |action| convergence
    global_aperture: ApertureConfig = field(
        default_factory=_default_global_aperture)
    local_aperture: object = field(default_factory=_default_local_aperture)

    def __post_init__(self):
        if self.levels < 1:
            raise ValueError("levels must be >= 1")
        if min(self.translation_iters, self.affine_iters,
               self.nonrigid_iters) < 0:
            raise ValueError("iteration caps must be >= 0")
        if self.eps_stop < 0:
            raise ValueError("eps_stop must be nonnegative")
        if isinstance(self.local_aperture, ApertureConfig):
            self.local_aperture = (self.local_aperture,) * self.levels
        else:
            self.local_aperture = tuple(self.local_aperture)
        if len(self.local_aperture) != self.levels:
            raise ValueError(f"{len(self.local_aperture)} local aperture "
                             f"configs for {self.levels} levels")


@dataclass
class AgentPair:
    """The two trained networks segment() consumes."""
    global_net: agent.AgentNetwork
    local_net: agent.AgentNetwork


# ---------------------------------------------------------------------------
# augmentation

@dataclass
class AugmentedSample:
    """One training estimate with its supervision.

    action is the smoothed ideal displacement field on the raw estimate
    (general mode, wide clamp) and global_label its best similarity fit.
    corrected is the estimate after applying global_label; local_action is
    the residual ideal field on it in normal mode at the local clamp.
    """
    estimate: Mesh
    action: ActionField
    global_label: GlobalTransform
    corrected: Mesh
    local_action: ActionField


def _random_transform(p, rng):
    t = rng.uniform(-p.translation_range, p.translation_range, size=3)
    axis = rng.normal(size=3)
    nrm = np.linalg.norm(axis)
    axis = axis / nrm if nrm > 0 else np.array([1.0, 0.0, 0.0])
    angle = rng.uniform(-p.rotation_range, p.rotation_range)
    ls = rng.uniform(-p.log_scale_range, p.log_scale_range, size=3)
    return GlobalTransform(t, axis * angle, ls)


def augment(truth, model, p, seed, label_beta=160.0, local_beta=20.0,
            lam=1.0, refreezes=2):
    """Draw one deformed training estimate and its labels.

    estimate = jitter(transform(shape_deform(truth))); labels are ideal
    actions back toward the unchanged truth. Deterministic per seed. The
    transform family (rotation + per-axis scale about the centroid) is
    invertible by construction, so no degenerate draws can occur.
    """
    if model.mean.shape != truth.vertices.shape:
        raise ValueError("truth does not match the shape model topology")
    rng = np.random.Generator(np.random.PCG64(seed))

    v = truth.vertices.copy()
    if model.n_modes and p.asm_range > 0:
        coeffs = rng.uniform(-p.asm_range, p.asm_range, size=model.n_modes)
        for j in range(model.n_modes):
            v = v + coeffs[j] * model.sigmas[j] * model.modes[j]
    g = _random_transform(p, rng)
    v = g.apply(v, v.mean(axis=0))
    if p.jitter > 0:
        v = v + rng.normal(0.0, p.jitter, size=v.shape)
    estimate = truth.with_vertices(v)

    cfg_gen = ApertureConfig(alpha=0.35, beta=label_beta, n_depth=1,
                             n_ring=0)
    action = ideal_action(estimate, truth, lam, cfg_gen,
                          refreezes=refreezes)
    global_label = fit_global(action, estimate)
    corrected = estimate.with_vertices(
        global_label.apply(estimate.vertices,
                           estimate.vertices.mean(axis=0)))
    cfg_loc = ApertureConfig(alpha=0.0, beta=local_beta, n_depth=1,
                             n_ring=0)
    local_action = ideal_action(corrected, truth, lam, cfg_loc,
                                refreezes=refreezes)
    return AugmentedSample(estimate, action, global_label, corrected,
                           local_action)


def init_draws(proto, rng):
    """Raw random draws behind random_init: (mode coeffs, translation)."""
    coeffs = rng.uniform(-proto.coeff_range, proto.coeff_range,
                         size=proto.mode_count)
    t = rng.uniform(-proto.max_translation, proto.max_translation, size=3)
    return coeffs, t


def random_init(model, proto, seed):
    """Random evaluation start: mean shape, first modes, translation."""
    if model.n_modes < proto.mode_count:
        raise ValueError(f"model has {model.n_modes} modes, protocol "
                         f"wants {proto.mode_count}")
    rng = np.random.Generator(np.random.PCG64(seed))
    coeffs, t = init_draws(proto, rng)
    mesh = sample_shape(model, coeffs)
    return mesh.with_vertices(mesh.vertices + t)


# ---------------------------------------------------------------------------
# training

def _mesh_state(mesh, vol, cfg):
    feats = sample_aperture(vol, mesh, cfg)
    return assemble_state(mesh, feats)


def _batch_windows(n, base):
    """Contiguous index windows of exactly `base` rows covering 0..n."""
    if n <= base:
        return [(0, n)]
    starts = list(range(0, n - base + 1, base))
    if starts[-1] + base < n:
        starts.append(n - base)
    return [(s, s + base) for s in starts]


def _global_sample(aug, vol, truth, cfg):
    s, norm = _mesh_state(aug.estimate, vol, cfg)
    target = agent.encode_global(aug.global_label, norm.radius)
    return agent.TrainingSample(s, aug.action, truth.vertices,
                                aug.estimate, trs_target=target)


def _local_sample(aug, vol, truth, cfg):
    s, _ = _mesh_state(aug.corrected, vol, cfg)
    return agent.TrainingSample(s, aug.local_action, truth.vertices,
                                aug.corrected)


def _local_sample_fine(fine, vol, truth, cfg, base_n, window_rng,
                       lam=1.0, refreezes=1):
    """One sub-sampled batch from a subdivided corrected estimate."""
    label = ideal_action(fine, truth, lam,
                         ApertureConfig(alpha=0.0, beta=cfg.beta,
                                        n_depth=1, n_ring=0),
                         refreezes=refreezes)
    s, _ = _mesh_state(fine, vol, cfg)
    windows = _batch_windows(fine.n_vertices, base_n)
    a, b = windows[window_rng.integers(len(windows))]
    normals = vertex_normals(fine)
    return agent.TrainingSample(s[a:b], ActionField("normal",
                                                    label.values[a:b]),
                                truth.vertices, None,
                                vertices=fine.vertices[a:b],
                                normals=normals[a:b])


def _reward_of(net, sample):
    """Validation reward of the network's prediction on one sample."""
    local, _ = agent.forward(net, sample.state)
    values = local[:, 0] if net.out_dim == 1 else local
    pred = ActionField(net.mode, values)
    if sample.normals is not None:
        disp = pred.displacements(sample.normals)
        deformed = sample.vertices + disp
    else:
        normals = (vertex_normals(sample.estimate) if net.out_dim == 1
                   else None)
        deformed = sample.estimate.vertices + pred.displacements(normals)
    return reward(sample.action, pred, deformed, sample.truth_vertices,
                  lambda_h=0.01)


def _train_one(net, make_sample, n_samples, val_idx, cfg, label, log):
    """Adam loop over lazily built samples; appends to the loss log."""
    rng = np.random.Generator(np.random.PCG64(cfg.seed))
    train_idx = np.array([i for i in range(n_samples) if i not in val_idx])
    opt = agent.AdamState(net)
    for step in range(cfg.steps):
        picks = rng.choice(train_idx, size=min(cfg.batch_size,
                                               len(train_idx)),
                           replace=False)
        batch = [make_sample(int(i)) for i in picks]
        _, loss = agent.train_step(net, batch, opt, cfg)
        log.append({"agent": label, "step": step, "loss": loss})
    return net


def train(pairs, p, t_cfg, s_cfg, seed=0, out_dir=None, val_fraction=0.1,
          model=None, progress=None):
    """Train the global and local networks on (Volume, truth Mesh) pairs.

    Returns (AgentPair, ShapeModel, log dict). Augmented estimates are
    drawn per pair, labels come from the ideal-action solver, and states
    are rebuilt lazily so memory stays in the geometry, not the features.
    A fraction of the augmentations is held out to report validation
    reward before and after training. When the segmentation schedule has
    more than one level, a share of local batches comes from subdivided
    estimates sub-sampled to the base vertex count.
    """
    if len(pairs) < 2:
        raise ValueError("need at least 2 (volume, truth) pairs")
    truths = [m for _, m in pairs]
    if model is None:
        model = fit_ssm(truths)

    def say(msg):
        if progress:
            progress(msg)

    g_cfg = s_cfg.global_aperture
    l_cfg = s_cfg.local_aperture[0]
    base_n = truths[0].n_vertices

    say(f"augmenting {len(pairs)} x {p.samples} estimates")
    augs = []
    for i, (vol, truth) in enumerate(pairs):
        for k in range(p.samples):
            augs.append((i, augment(truth, model, p,
                                    seed=seed * 1000003 + i * 10007 + k)))
    n = len(augs)
    val_count = max(1, int(round(val_fraction * n)))
    order = np.random.Generator(np.random.PCG64(seed)).permutation(n)
    val_idx = set(int(i) for i in order[:val_count])

    fine_rng = np.random.Generator(np.random.PCG64(seed + 1))
    fine_share = 4  # every 4th local draw trains on a subdivided batch

    def global_sample(i):
        vol_i, aug = augs[i]
        return _global_sample(aug, pairs[vol_i][0], truths[vol_i], g_cfg)

    def local_sample(i):
        vol_i, aug = augs[i]
        if s_cfg.levels > 1 and i % fine_share == 0:
            fine = subdivide(aug.corrected)
            return _local_sample_fine(fine, pairs[vol_i][0],
                                      truths[vol_i], l_cfg, base_n,
                                      fine_rng)
        return _local_sample(aug, pairs[vol_i][0], truths[vol_i], l_cfg)

    log = []
    d_global = g_cfg.state_width
    d_local = l_cfg.state_width
    global_net = agent.init_network(d_global, 3, beta=160.0, seed=seed + 2)
    local_net = agent.init_network(d_local, 1, beta=l_cfg.beta,
                                   seed=seed + 3)
    cfg_global = replace(t_cfg, w_action=0.0, lambda_h=0.0)
    cfg_local = replace(t_cfg, w_trs=(0.0, 0.0, 0.0))

    val_local = [local_sample(i) for i in sorted(val_idx)]
    r0 = float(np.mean([_reward_of(local_net, sm) for sm in val_local]))

    say(f"training global agent, {t_cfg.steps} steps, d_in={d_global}")
    _train_one(global_net, global_sample, n, val_idx, cfg_global,
               "global", log)
    say(f"training local agent, {t_cfg.steps} steps, d_in={d_local}")
    _train_one(local_net, local_sample, n, val_idx, cfg_local,
               "local", log)

    r1 = float(np.mean([_reward_of(local_net, sm) for sm in val_local]))
    val_global = [global_sample(i) for i in sorted(val_idx)]
    gl = float(np.mean([agent.loss_and_grad(
        global_net, sm.state, sm.action, sm.truth_vertices, sm.estimate,
        cfg_global, trs_target=sm.trs_target)[0] for sm in val_global]))
    validation = {"reward_initial": r0, "reward_final": r1,
                  "global_loss_final": gl}
    say(f"validation reward {r0:.3f} -> {r1:.3f}")

    result = AgentPair(global_net, local_net)
    if out_dir is not None:
        os.makedirs(out_dir, exist_ok=True)
        agent.save_agent(global_net, os.path.join(out_dir, "global"))
        agent.save_agent(local_net, os.path.join(out_dir, "local"))
        with open(os.path.join(out_dir, "loss_log.csv"), "w",
                  newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["agent", "step", "loss"])
            for row in log:
                w.writerow([row["agent"], row["step"],
                            f"{row['loss']:.9f}"])
        with open(os.path.join(out_dir, "validation.json"), "w") as fh:
            json.dump(validation, fh, indent=1, sort_keys=True)
            fh.write("\n")
    return result, model, {"loss_log": log, "validation": validation}


# ---------------------------------------------------------------------------
# segmentation

def _predict_local(net, s, base_n):
    """Local predictions for all rows, batched to the base vertex count."""
    n = s.shape[0]
    windows = _batch_windows(n, base_n)
    out = np.full((n, net.out_dim), np.nan)
    filled = np.zeros(n, dtype=bool)
    for a, b in windows:
        local, _ = agent.forward(net, s[a:b])
        new = ~filled[a:b]
        out[a:b][new] = local[new]
        filled[a:b] = True
    return out


def segment(vol, init, agents, cfg):
    """Marginal multi-resolution segmentation of one volume.

    Stages run in fixed order: translation only, full similarity, then
    non-rigid refinement per pyramid level, subdividing between levels.
    Each iteration rebuilds features on the current mesh (normals track
    the deforming surface). A stage ends at its iteration cap or when the
    mean per-vertex action magnitude falls below eps_stop.

    Returns (final mesh, trace); the trace records one entry per
    iteration with the stage, level, mean action (mm), and seconds.
    """
    if init.n_vertices < 3:
        raise ValueError("initial mesh is degenerate")
    if not np.isfinite(init.vertices).all():
        raise ValueError("initial mesh has non-finite vertices")
    if agents.local_net.out_dim not in (1, 3):
        raise ValueError("local network output dimension")
    mesh = init.copy()
    base_n = init.n_vertices
    trace = []

    def moved(mesh, new_vertices, stage):
        if not np.isfinite(new_vertices).all():
            raise RuntimeError(f"non-finite vertices in {stage} stage")
        return mesh.with_vertices(new_vertices)

    def record(stage, level, it, mag, t0):
        trace.append({"stage": stage, "level": level, "iteration": it,
                      "mean_action_mm": float(mag),
                      "seconds": time.perf_counter() - t0})

    for it in range(cfg.translation_iters):
        t0 = time.perf_counter()
        s, norm = _mesh_state(mesh, vol, cfg.global_aperture)
        _, g9 = agent.forward(agents.global_net, s)
        g = agent.decode_global(g9, norm.radius)
        mesh = moved(mesh, mesh.vertices + g.translation, "translation")
        mag = np.linalg.norm(g.translation)
        record("translation", 0, it, mag, t0)
        if mag < cfg.eps_stop:
            break

    for it in range(cfg.affine_iters):
        t0 = time.perf_counter()
        s, norm = _mesh_state(mesh, vol, cfg.global_aperture)
        _, g9 = agent.forward(agents.global_net, s)
        g = agent.decode_global(g9, norm.radius)
        new_v = g.apply(mesh.vertices, mesh.vertices.mean(axis=0))
        mag = np.mean(np.linalg.norm(new_v - mesh.vertices, axis=1))
        mesh = moved(mesh, new_v, "affine")
        record("affine", 0, it, mag, t0)
        if mag < cfg.eps_stop:
            break

    mode = agents.local_net.mode
    for level in range(cfg.levels):
        if level > 0:
            mesh = subdivide(mesh)
        for it in range(cfg.nonrigid_iters):
            t0 = time.perf_counter()
            s, _ = _mesh_state(mesh, vol, cfg.local_aperture[level])
            local = _predict_local(agents.local_net, s, base_n)
            values = local[:, 0] if mode == "normal" else local
            field = ActionField(mode, values)
            disp = field.displacements(vertex_normals(mesh))
            mag = np.mean(np.linalg.norm(disp, axis=1))
            mesh = moved(mesh, mesh.vertices + disp, "nonrigid")
            record("nonrigid", level, it, mag, t0)
            if mag < cfg.eps_stop:
                break

    return mesh, trace


# ---------------------------------------------------------------------------
# evaluation

def evaluate(pred, truth, vol):
    """Dice over voxelized masks plus vertex-set Hausdorff distance (mm)."""
    shape = vol.data.shape
    mask_p = voxelize_mesh(pred, shape, vol.spacing, vol.origin)
    mask_t = voxelize_mesh(truth, shape, vol.spacing, vol.origin)
    return {"dice": dice(mask_p, mask_t),
            "hausdorff_mm": hausdorff(pred.vertices, truth.vertices)}


def benchmark(eval_set, agents, model, proto, s_cfg, seed=0, timing="zero",
              progress=None):
    """InitProtocol sweep over held-out (name, Volume, truth) triples.

    Returns (rows, summary). Rows carry per-trial dice, hausdorff, and a
    seconds column that is 0.0 unless timing="wall": wall-clock entries
    would break the byte-identical-output determinism contract, so real
    timing is opt-in (it is always reported through `progress`).
    """
    if timing not in ("zero", "wall"):
        raise ValueError("timing must be 'zero' or 'wall'")
    rows = []
    for pi, (name, vol, truth) in enumerate(eval_set):
        for trial in range(proto.trials):
            init = random_init(model, proto,
                               seed=seed * 1000003 + pi * 10007 + trial)
            t0 = time.perf_counter()
            final, _ = segment(vol, init, agents, s_cfg)
            elapsed = time.perf_counter() - t0
            metrics = evaluate(final, truth, vol)
            if progress:
                progress(f"{name} trial {trial}: dice "
                         f"{metrics['dice']:.4f} hausdorff "
                         f"{metrics['hausdorff_mm']:.2f} mm "
                         f"({elapsed:.2f} s)")
            rows.append({"trial": trial, "organ": name,
                         "dice": metrics["dice"],
                         "hausdorff_mm": metrics["hausdorff_mm"],
                         "seconds": elapsed if timing == "wall" else 0.0})
    d = np.array([r["dice"] for r in rows])
    h = np.array([r["hausdorff_mm"] for r in rows])
    summary = {"trials": len(rows),
               "dice_mean": float(d.mean()), "dice_std": float(d.std()),
               "hausdorff_mean_mm": float(h.mean()),
               "hausdorff_std_mm": float(h.std())}
    if timing == "wall":
        s = np.array([r["seconds"] for r in rows])
        summary["seconds_mean"] = float(s.mean())
        summary["seconds_std"] = float(s.std())
    return rows, summary


def write_bench_csv(rows, path):
    """Fixed-format CSV so identical results are identical bytes."""
    with open(path, "w", newline="") as fh:
        fh.write("trial,organ,dice,hausdorff_mm,seconds\n")
        for r in rows:
            fh.write(f"{r['trial']},{r['organ']},{r['dice']:.6f},"
                     f"{r['hausdorff_mm']:.6f},{r['seconds']:.3f}\n")
