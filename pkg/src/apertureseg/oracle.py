"""Training-signal definitions: the ideal action field (closest-point data
term with damped-Laplacian smoothing), the neighborhood smoothness penalty,
the reward, and the Q-value under the zero-future simplification.
"""

import csv
from dataclasses import dataclass
from typing import Optional

import numpy as np
from scipy import sparse
from scipy.sparse.linalg import splu

from .mesh import edges, hausdorff, vertex_degrees, vertex_normals
from .ssm import procrustes_align


@dataclass
class GlobalTransform:
    """Similarity action: per-axis scale, then rotation, then translation,
    applied about a pivot point (the estimate centroid by convention)."""
    translation: np.ndarray  # (3,) mm
    rotation: np.ndarray     # (3,) axis-angle, radians, angle < pi
    log_scale: np.ndarray    # (3,) natural log of per-axis scale

    @staticmethod
    def identity():
        return GlobalTransform(np.zeros(3), np.zeros(3), np.zeros(3))

    @staticmethod
    def from_vector(vec):
        v = np.asarray(vec, dtype=np.float64).reshape(9)
        return GlobalTransform(v[:3].copy(), v[3:6].copy(), v[6:9].copy())

    def as_vector(self):
        return np.concatenate([self.translation, self.rotation,
                               self.log_scale])

    def rotation_matrix(self):
        return _axis_angle_to_matrix(self.rotation)

    def apply(self, points, pivot):
        p = np.asarray(points, dtype=np.float64)
        pivot = np.asarray(pivot, dtype=np.float64)
        scaled = (p - pivot) * np.exp(self.log_scale)
        return pivot + self.translation + scaled @ self.rotation_matrix().T


def _axis_angle_to_matrix(w):
    w = np.asarray(w, dtype=np.float64)
    theta = np.linalg.norm(w)
    if theta < 1e-12:
        # first-order: I + skew(w)
        return np.eye(3) + _skew(w)
    axis = w / theta
    k = _skew(axis)
    return np.eye(3) + np.sin(theta) * k + (1.0 - np.cos(theta)) * (k @ k)


def _skew(v):
    return np.array([[0.0, -v[2], v[1]],
                     [v[2], 0.0, -v[0]],
                     [-v[1], v[0], 0.0]])


def _matrix_to_axis_angle(r):
    """Inverse Rodrigues; returns a vector with norm in [0, pi]."""
    tr = np.clip((np.trace(r) - 1.0) / 2.0, -1.0, 1.0)
    theta = np.arccos(tr)
    skew_vec = 0.5 * np.array([r[2, 1] - r[1, 2],
                               r[0, 2] - r[2, 0],
                               r[1, 0] - r[0, 1]])
    if theta < 1e-7:
        return skew_vec  # ~ theta * axis
    if np.pi - theta < 1e-6:
        # near half-turn: the skew part vanishes, recover the axis from
        # the symmetric part
        b = (r + np.eye(3)) / 2.0
        axis = np.sqrt(np.clip(np.diag(b), 0.0, None))
        pivot = int(np.argmax(axis))
        axis = b[:, pivot] / (axis[pivot] + 1e-300)
        axis /= np.linalg.norm(axis)
        return axis * theta
    return skew_vec / np.sin(theta) * theta


@dataclass
class ActionField:
    """Per-vertex deformation: translation triples in general mode, or a
    signed magnitude along the vertex normal in normal mode. May carry the
    similarity action a global head should have predicted."""
    mode: str                   # "general" | "normal"
    values: np.ndarray          # (N, 3) or (N,), mm
    global_transform: Optional[GlobalTransform] = None

    def __post_init__(self):
        if self.mode not in ("general", "normal"):
            raise ValueError(f"unknown action mode {self.mode!r}")
        self.values = np.asarray(self.values, dtype=np.float64)
        if self.mode == "general" and (self.values.ndim != 2
                                       or self.values.shape[1] != 3):
            raise ValueError("general mode needs (N, 3) values")
        if self.mode == "normal" and self.values.ndim != 1:
            raise ValueError("normal mode needs (N,) values")

    @property
    def n(self):
        return len(self.values)

    def displacements(self, normals=None):
        """(N, 3) world displacements; normal mode needs the normals."""
        if self.mode == "general":
            return self.values
        if normals is None:
            raise ValueError("normal-mode displacements need normals")
        return self.values[:, None] * normals


def apply_action(mesh, field, normals=None):
    """Deform a mesh by a per-vertex action field."""
    if field.n != mesh.n_vertices:
        raise ValueError("field length does not match mesh")
    if field.mode == "normal" and normals is None:
        normals = vertex_normals(mesh)
    return mesh.with_vertices(mesh.vertices
                              + field.displacements(normals))


# ---------------------------------------------------------------------------
# smoothness penalty and its Laplacian

def smoothness_penalty(field, mesh):
    """sum_i sum_{j in nbr(i)} ||a_i - a_j||^2 / |nbr(i)| over the 1-ring
    graph. Nonnegative; zero exactly for constant fields."""
    if field.n != mesh.n_vertices:
        raise ValueError("field length does not match mesh")
    a = field.values if field.values.ndim == 2 else field.values[:, None]
    e = edges(mesh)
    deg = vertex_degrees(mesh).astype(np.float64)
    w = 1.0 / deg[e[:, 0]] + 1.0 / deg[e[:, 1]]
    d = a[e[:, 0]] - a[e[:, 1]]
    return float((w * (d * d).sum(axis=1)).sum())


def _penalty_laplacian(mesh):
    """Sparse L with a^T L a = smoothness_penalty(a) per coordinate."""
    e = edges(mesh)
    deg = vertex_degrees(mesh).astype(np.float64)
    w = 1.0 / deg[e[:, 0]] + 1.0 / deg[e[:, 1]]
    n = mesh.n_vertices
    i = np.concatenate([e[:, 0], e[:, 1], e[:, 0], e[:, 1]])
    j = np.concatenate([e[:, 1], e[:, 0], e[:, 0], e[:, 1]])
    vals = np.concatenate([-w, -w, w, w])
    return sparse.csc_matrix((vals, (i, j)), shape=(n, n))


# ---------------------------------------------------------------------------
# ideal action

def ideal_action(estimate, truth, lam, cfg, refreezes=0):
    """Energy-minimizing action moving the estimate toward the truth surface.

    Data term: displacement to the closest point on truth's surface (exact,
    any topology). The closest points are frozen, giving a quadratic energy
    whose minimizer solves (I + lam L) a = a_closest with L the smoothness
    Laplacian; `refreezes` extra rounds recompute closest points at the
    displaced positions and re-solve. In normal mode (cfg.alpha = 0) the
    data term is projected onto the vertex normals before smoothing. The
    final field is clamped to the aperture depth: |a_i| <= beta.
    """
    if lam < 0:
        raise ValueError("lambda must be nonnegative")
    v = estimate.vertices
    surf = truth.surface_index()
    mode = cfg.mode

    solve = None
    if lam > 0:
        n = estimate.n_vertices
        lap = sparse.identity(n, format="csc") \
            + lam * _penalty_laplacian(estimate)
        solve = splu(lap).solve

    if mode == "normal":
        normals = vertex_normals(estimate)
        s = np.zeros(len(v))
        for _ in range(refreezes + 1):
            _, closest = surf.query(v + s[:, None] * normals)
            b = ((closest - v) * normals).sum(axis=1)
            s = solve(b) if solve is not None else b
        values = np.clip(s, -cfg.beta, cfg.beta)
    else:
        a = np.zeros_like(v)
        for _ in range(refreezes + 1):
            _, closest = surf.query(v + a)
            b = closest - v
            a = solve(b) if solve is not None else b
        norms = np.linalg.norm(a, axis=1)
        scale = np.where(norms > cfg.beta, cfg.beta / np.where(norms == 0,
                                                               1.0, norms),
                         1.0)
        values = a * scale[:, None]
    return ActionField(mode, values)


def fit_global(field, estimate):
    """Similarity transform best explaining a displacement field.

    Least-squares Procrustes fit of estimate -> estimate + displacements,
    re-expressed about the estimate centroid; the isotropic scale fills all
    three log-scale slots. Used as the global-head training label.
    """
    if field.mode == "normal":
        disp = field.values[:, None] * vertex_normals(estimate)
    else:
        disp = field.values
    v = estimate.vertices
    sim = procrustes_align(v, v + disp)
    pivot = v.mean(axis=0)
    translation = sim.apply(pivot) - pivot
    rotation = _matrix_to_axis_angle(sim.rotation)
    log_scale = np.full(3, np.log(sim.scale))
    return GlobalTransform(translation, rotation, log_scale)


# ---------------------------------------------------------------------------
# reward and Q-value

def reward(a_star, a_tilde, deformed_vertices, truth_vertices, lambda_h):
    """r = -||A* - A~||_F^2 - lambda_h * hausdorff(deformed, truth). <= 0."""
    if a_star.mode != a_tilde.mode:
        raise ValueError("action fields have different modes")
    if a_star.n != a_tilde.n:
        raise ValueError("action fields have different lengths")
    diff = a_star.values - a_tilde.values
    r = -float((diff * diff).sum())
    if lambda_h != 0:
        r -= lambda_h * hausdorff(deformed_vertices, truth_vertices)
    return r


def q_value(r, gamma, future_max=0.0):
    """Q = r + gamma * future_max. Training uses future_max = 0, where the
    next state always admits an ideal follow-up action."""
    if not (0.0 <= gamma < 1.0):
        raise ValueError("gamma must be in [0, 1)")
    return r + gamma * future_max


# ---------------------------------------------------------------------------
# debug dump

def dump_action_csv(field, path):
    """Per-vertex action values as CSV (index + 1 or 3 value columns)."""
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        if field.mode == "normal":
            w.writerow(["vertex", "magnitude_mm"])
            for i, s in enumerate(field.values):
                w.writerow([i, repr(float(s))])
        else:
            w.writerow(["vertex", "dx_mm", "dy_mm", "dz_mm"])
            for i, row in enumerate(field.values):
                w.writerow([i] + [repr(float(x)) for x in row])
