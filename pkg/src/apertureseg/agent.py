"""Action-prediction network: shared per-vertex MLP encoder, pooled global
feature, multi-level feature aggregation, a per-vertex action head and a
global similarity head. Forward, reverse-mode gradients, and the
adaptive-moment optimizer are implemented here directly on numpy arrays.

The global head's translation slot is expressed in state-normalized units
(multiples of the estimate's bounding-sphere radius) so that the whole
output is invariant to a world rescale; decode_global converts back to mm.
"""

import json
import os
from dataclasses import dataclass
from typing import Optional

import numpy as np

from .mesh import hausdorff_witness, vertex_normals
from .oracle import ActionField, GlobalTransform, fit_global

_CHECKPOINT_VERSION = 1


@dataclass
class AgentNetwork:
    """Parameter container plus the architecture it was built for."""
    d_in: int
    out_dim: int            # 1 (normal mode) or 3 (general mode)
    beta: float             # local-head clamp scale, mm
    pool: str               # "max" | "mean"
    encoder: tuple          # per-vertex layer widths
    decoder: tuple          # aggregation layer widths
    global_hidden: tuple    # dense widths after the second pooling
    params: dict            # name -> float64 array

    @property
    def mode(self):
        return "normal" if self.out_dim == 1 else "general"


def _he(rng, fan_in, shape):
    return rng.normal(0.0, np.sqrt(2.0 / fan_in), size=shape)


def init_network(d_in, out_dim, beta, seed, encoder=(64, 128, 256),
                 decoder=(256, 128, 64), global_hidden=(64,), pool="max"):
    """Fresh network with He-scaled weights, zero biases."""
    if out_dim not in (1, 3):
        raise ValueError("out_dim must be 1 or 3")
    if pool not in ("max", "mean"):
        raise ValueError("pool must be 'max' or 'mean'")
    if beta <= 0:
        raise ValueError("beta must be positive")
    encoder = tuple(int(w) for w in encoder)
    decoder = tuple(int(w) for w in decoder)
    global_hidden = tuple(int(w) for w in global_hidden)
    if not encoder or not decoder:
        raise ValueError("encoder and decoder need at least one layer")
    rng = np.random.Generator(np.random.PCG64(seed))
    p = {}
    w_in = d_in
    for i, w in enumerate(encoder):
        p[f"enc{i}_w"] = _he(rng, w_in, (w_in, w))
        p[f"enc{i}_b"] = np.zeros(w)
        w_in = w
    concat_w = sum(encoder) + encoder[-1]  # all levels + pooled global
    w_in = concat_w
    for i, w in enumerate(decoder):
        p[f"dec{i}_w"] = _he(rng, w_in, (w_in, w))
        p[f"dec{i}_b"] = np.zeros(w)
        w_in = w
    p["local_w"] = _he(rng, w_in, (w_in, out_dim))
    p["local_b"] = np.zeros(out_dim)
    gw = decoder[-1]
    for i, w in enumerate(global_hidden):
        p[f"glob{i}_w"] = _he(rng, gw, (gw, w))
        p[f"glob{i}_b"] = np.zeros(w)
        gw = w
    p["glob_out_w"] = _he(rng, gw, (gw, 9))
    p["glob_out_b"] = np.zeros(9)
    return AgentNetwork(int(d_in), int(out_dim), float(beta), pool,
                        encoder, decoder, global_hidden, p)


# ---------------------------------------------------------------------------
# forward / backward

def _pool_fwd(h, pool):
    if pool == "max":
        idx = np.argmax(h, axis=0)  # ties -> lowest index
        return h[idx, np.arange(h.shape[1])], idx
    return h.mean(axis=0), None


def _pool_bwd(grad, idx, n, pool):
    if pool == "max":
        out = np.zeros((n, grad.shape[0]))
        out[idx, np.arange(grad.shape[0])] = grad
        return out
    return np.tile(grad / n, (n, 1))


def _forward(net, s):
    s = np.asarray(s, dtype=np.float64)
    if s.ndim != 2 or s.shape[1] != net.d_in:
        raise ValueError(f"state width {s.shape} does not match network "
                         f"input {net.d_in}")
    p = net.params
    cache = {"s": s}
    h = s
    levels = []
    for i in range(len(net.encoder)):
        z = h @ p[f"enc{i}_w"] + p[f"enc{i}_b"]
        h = np.maximum(z, 0.0)
        cache[f"enc{i}_z"] = z
        cache[f"enc{i}_h"] = h
        levels.append(h)
    g, gidx = _pool_fwd(h, net.pool)
    cache["g_idx"] = gidx
    n = s.shape[0]
    concat = np.concatenate(levels + [np.tile(g, (n, 1))], axis=1)
    cache["concat"] = concat
    h = concat
    for i in range(len(net.decoder)):
        z = h @ p[f"dec{i}_w"] + p[f"dec{i}_b"]
        h = np.maximum(z, 0.0)
        cache[f"dec{i}_z"] = z
        cache[f"dec{i}_h"] = h
    local_raw = h @ p["local_w"] + p["local_b"]
    local = net.beta * np.tanh(local_raw)
    cache["local_raw"] = local_raw
    gg, ggidx = _pool_fwd(h, net.pool)
    cache["gg"] = gg
    cache["gg_idx"] = ggidx
    hh = gg
    for i in range(len(net.global_hidden)):
        z = hh @ p[f"glob{i}_w"] + p[f"glob{i}_b"]
        hh = np.maximum(z, 0.0)
        cache[f"glob{i}_z"] = z
        cache[f"glob{i}_h"] = hh
    global9 = hh @ p["glob_out_w"] + p["glob_out_b"]
    return local, global9, cache


def forward(net, s):
    """Predict the per-vertex action and the raw global 9-vector.

    Local output is clamped to (-beta, beta) by beta*tanh. The global
    vector is (translation in radius units, axis-angle rotation, per-axis
    log scale); decode_global turns it into a world-space transform.
    """
    local, global9, _ = _forward(net, s)
    return local, global9


def decode_global(global9, radius):
    """Raw global head output -> GlobalTransform in world units.

    Rotation is re-wrapped to the principal axis-angle (angle < pi).
    """
    v = np.asarray(global9, dtype=np.float64).reshape(9)
    w = v[3:6]
    theta = np.linalg.norm(w)
    if theta >= np.pi:
        princ = np.mod(theta + np.pi, 2.0 * np.pi) - np.pi
        w = w * (princ / theta)
    return GlobalTransform(v[:3] * float(radius), w, v[6:9].copy())


def encode_global(g, radius):
    """GlobalTransform -> 9-vector in the head's normalized units."""
    return np.concatenate([g.translation / float(radius), g.rotation,
                           g.log_scale])


def _backward(net, cache, d_local, d_global9):
    p = net.params
    grads = {}
    s = cache["s"]
    n = s.shape[0]

    # global head
    d = np.asarray(d_global9, dtype=np.float64)
    last_h = cache[f"glob{len(net.global_hidden) - 1}_h"] \
        if net.global_hidden else cache["gg"]
    grads["glob_out_w"] = np.outer(last_h, d)
    grads["glob_out_b"] = d.copy()
    d = d @ p["glob_out_w"].T
    for i in range(len(net.global_hidden) - 1, -1, -1):
        d = d * (cache[f"glob{i}_z"] > 0)
        prev = cache[f"glob{i - 1}_h"] if i > 0 else cache["gg"]
        grads[f"glob{i}_w"] = np.outer(prev, d)
        grads[f"glob{i}_b"] = d.copy()
        d = d @ p[f"glob{i}_w"].T
    d_dec = _pool_bwd(d, cache["gg_idx"], n, net.pool)

    # local head
    dl = np.asarray(d_local, dtype=np.float64)
    t = np.tanh(cache["local_raw"])
    d_raw = dl * net.beta * (1.0 - t * t)
    last_dec = cache[f"dec{len(net.decoder) - 1}_h"]
    grads["local_w"] = last_dec.T @ d_raw
    grads["local_b"] = d_raw.sum(axis=0)
    d_dec = d_dec + d_raw @ p["local_w"].T

    # decoder stack
    for i in range(len(net.decoder) - 1, -1, -1):
        d_dec = d_dec * (cache[f"dec{i}_z"] > 0)
        prev = cache[f"dec{i - 1}_h"] if i > 0 else cache["concat"]
        grads[f"dec{i}_w"] = prev.T @ d_dec
        grads[f"dec{i}_b"] = d_dec.sum(axis=0)
        d_dec = d_dec @ p[f"dec{i}_w"].T

    # split the concatenation
    widths = list(net.encoder)
    d_levels = []
    off = 0
    for w in widths:
        d_levels.append(d_dec[:, off:off + w].copy())
        off += w
    d_g = d_dec[:, off:].sum(axis=0)
    d_levels[-1] += _pool_bwd(d_g, cache["g_idx"], n, net.pool)

    # encoder stack
    d_h = d_levels[-1]
    for i in range(len(net.encoder) - 1, -1, -1):
        d_z = d_h * (cache[f"enc{i}_z"] > 0)
        prev = cache[f"enc{i - 1}_h"] if i > 0 else s
        grads[f"enc{i}_w"] = prev.T @ d_z
        grads[f"enc{i}_b"] = d_z.sum(axis=0)
        d_h = d_z @ p[f"enc{i}_w"].T
        if i > 0:
            d_h = d_h + d_levels[i - 1]
    return grads


# ---------------------------------------------------------------------------
# loss

@dataclass
class TrainConfig:
    """Optimization hyperparameters and loss weights."""
    learning_rate: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    batch_size: int = 8
    steps: int = 1500
    seed: int = 0
    clip_norm: float = 5.0
    w_action: float = 1.0
    lambda_h: float = 0.01
    w_trs: tuple = (1.0, 1.0, 1.0)

    def __post_init__(self):
        if (self.learning_rate < 0 or not 0 <= self.beta1 < 1
                or not 0 <= self.beta2 < 1 or self.eps <= 0
                or self.batch_size < 1 or self.steps < 1
                or self.clip_norm <= 0 or self.w_action < 0
                or self.lambda_h < 0 or min(self.w_trs) < 0):
            raise ValueError("invalid training configuration")


def loss_and_grad(net, s, a_star, truth_vertices, estimate, cfg,
                  trs_target=None, vertices=None, normals=None):
    """Full training loss and parameter gradients for one state.

    loss = w_action * ||A* - A~||^2 / N
         + lambda_h * hausdorff(deformed estimate, truth vertices)
         + sum_k w_trs[k] * ||global_pred_k - global_label_k||^2
    The Hausdorff term backpropagates through its max-distance vertex pair;
    the global label is the similarity fit of A* unless supplied. vertices
    and normals default to the estimate's; batches sub-sampled from a finer
    mesh pass the sliced arrays instead (the slice has no face structure).
    """
    if a_star.mode != net.mode:
        raise ValueError(f"action mode {a_star.mode!r} does not match "
                         f"network mode {net.mode!r}")
    local, global9, cache = _forward(net, s)
    n = local.shape[0]
    if a_star.n != n:
        raise ValueError("A* length does not match state")
    a_vals = a_star.values if net.out_dim == 3 else a_star.values[:, None]

    def checked(term):
        if not np.isfinite(term):
            raise FloatingPointError("non-finite training loss")
        return term

    d_local = np.zeros_like(local)
    loss = 0.0
    if cfg.w_action > 0:
        diff = local - a_vals
        loss += checked(cfg.w_action * float((diff * diff).sum()) / n)
        d_local += cfg.w_action * 2.0 * diff / n

    if cfg.lambda_h > 0:
        if vertices is None:
            vertices = estimate.vertices
        if normals is None and net.out_dim == 1:
            normals = vertex_normals(estimate)
        if len(vertices) != n:
            raise ValueError("vertex count does not match state")
        disp = local if net.out_dim == 3 else local[:, 0:1] * normals
        deformed = vertices + disp
        h, ia, ib = hausdorff_witness(deformed, truth_vertices)
        loss += checked(cfg.lambda_h * h)
        if h > 0:
            g = cfg.lambda_h * (deformed[ia] - truth_vertices[ib]) / h
            if net.out_dim == 3:
                d_local[ia] += g
            else:
                d_local[ia, 0] += g @ normals[ia]

    d_global = np.zeros(9)
    if max(cfg.w_trs) > 0:
        if trs_target is None:
            trs_target = encode_global(fit_global(a_star, estimate),
                                       estimate.bounding_radius())
        w = np.repeat(np.asarray(cfg.w_trs, dtype=np.float64), 3)
        gdiff = global9 - trs_target
        loss += checked(float((w * gdiff * gdiff).sum()))
        d_global = 2.0 * w * gdiff

    grads = _backward(net, cache, d_local, d_global)
    return loss, grads


# ---------------------------------------------------------------------------
# optimizer

class AdamState:
    """First/second moment accumulators plus the step counter."""

    def __init__(self, net):
        self.m = {k: np.zeros_like(v) for k, v in net.params.items()}
        self.v = {k: np.zeros_like(v) for k, v in net.params.items()}
        self.t = 0


@dataclass
class TrainingSample:
    """One supervised state for train_step. vertices/normals override the
    estimate's arrays for sub-sampled batches of a finer mesh."""
    state: np.ndarray
    action: ActionField
    truth_vertices: np.ndarray
    estimate: object  # Mesh, or None for a pure batch slice
    trs_target: Optional[np.ndarray] = None
    vertices: Optional[np.ndarray] = None
    normals: Optional[np.ndarray] = None


def train_step(net, batch, opt, cfg):
    """One clipped adaptive-moment update on a batch mean. Returns
    (net, mean loss); net and opt are updated in place."""
    if not batch:
        raise ValueError("empty batch")
    total = 0.0
    acc = {k: np.zeros_like(v) for k, v in net.params.items()}
    for sample in batch:
        loss, grads = loss_and_grad(net, sample.state, sample.action,
                                    sample.truth_vertices, sample.estimate,
                                    cfg, trs_target=sample.trs_target,
                                    vertices=sample.vertices,
                                    normals=sample.normals)
        total += loss
        for k in acc:
            acc[k] += grads[k]
    scale = 1.0 / len(batch)
    for k in acc:
        acc[k] *= scale

    norm = np.sqrt(sum(float((g * g).sum()) for g in acc.values()))
    if not np.isfinite(norm):
        raise FloatingPointError("non-finite gradient")
    if norm > cfg.clip_norm:
        clip = cfg.clip_norm / norm
        for k in acc:
            acc[k] *= clip

    opt.t += 1
    b1t = 1.0 - cfg.beta1 ** opt.t
    b2t = 1.0 - cfg.beta2 ** opt.t
    for k, g in acc.items():
        opt.m[k] = cfg.beta1 * opt.m[k] + (1.0 - cfg.beta1) * g
        opt.v[k] = cfg.beta2 * opt.v[k] + (1.0 - cfg.beta2) * (g * g)
        step = cfg.learning_rate * (opt.m[k] / b1t) \
            / (np.sqrt(opt.v[k] / b2t) + cfg.eps)
        net.params[k] -= step
        if not np.isfinite(net.params[k]).all():
            raise FloatingPointError(f"non-finite parameter {k}")
    return net, total / len(batch)


# ---------------------------------------------------------------------------
# checkpoints: JSON descriptor + raw little-endian float64 blob

def _ckpt_paths(path):
    s = os.fspath(path)
    for suffix in (".agent.json", ".agent.raw", ".agent"):
        if s.endswith(suffix):
            s = s[: -len(suffix)]
            break
    return s + ".agent.json", s + ".agent.raw"


def save_agent(net, path):
    jpath, rpath = _ckpt_paths(path)
    names = sorted(net.params)
    meta = {
        "format": "agent-checkpoint",
        "version": _CHECKPOINT_VERSION,
        "d_in": net.d_in,
        "out_dim": net.out_dim,
        "beta": net.beta,
        "pool": net.pool,
        "encoder": list(net.encoder),
        "decoder": list(net.decoder),
        "global_hidden": list(net.global_hidden),
        "params": [{"name": k, "shape": list(net.params[k].shape)}
                   for k in names],
    }
    with open(jpath, "w") as fh:
        json.dump(meta, fh)
        fh.write("\n")
    blob = np.concatenate([net.params[k].ravel() for k in names])
    with open(rpath, "wb") as fh:
        fh.write(blob.astype("<f8").tobytes())
    return jpath, rpath


def load_agent(path):
    jpath, rpath = _ckpt_paths(path)
    with open(jpath) as fh:
        meta = json.load(fh)
    if meta.get("format") != "agent-checkpoint" \
            or meta.get("version") != _CHECKPOINT_VERSION:
        raise ValueError(f"{jpath}: not a version-{_CHECKPOINT_VERSION} "
                         "agent checkpoint")
    raw = np.fromfile(rpath, dtype="<f8")
    params = {}
    off = 0
    for entry in meta["params"]:
        shape = tuple(entry["shape"])
        size = int(np.prod(shape))
        if off + size > raw.size:
            raise ValueError(f"{rpath}: parameter blob truncated")
        params[entry["name"]] = raw[off:off + size].reshape(shape).copy()
        off += size
    if off != raw.size:
        raise ValueError(f"{rpath}: {raw.size - off} trailing values")
    return AgentNetwork(int(meta["d_in"]), int(meta["out_dim"]),
                        float(meta["beta"]), meta["pool"],
                        tuple(meta["encoder"]), tuple(meta["decoder"]),
                        tuple(meta["global_hidden"]), params)
