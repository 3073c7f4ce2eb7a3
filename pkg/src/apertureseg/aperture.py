"""Per-vertex cone apertures: boundary vectors, gray-value sampling of the
volume inside each cone, and assembly of the network state matrix.

Every vertex gets a cone of vision along its outward normal with half-angle
alpha and height beta. Samples sit at ranges beta*k/n_depth along rays tilted
by alpha*r/n_ring at four fixed azimuths, one axial ray included; alpha = 0
degenerates to a single ray along the normal.
"""

import json
import os
from dataclasses import dataclass

import numpy as np

from .mesh import local_frames, vertex_normals

N_AZIMUTH = 4


@dataclass(frozen=True)
class ApertureConfig:
    """Cone geometry and sampling density.

    alpha: half-angle, radians in [0, pi/2). alpha = 0 requires n_ring = 0.
    beta: cone height along the ray, mm.
    n_depth: samples along each ray depth, >= 1.
    n_ring: angular rings per depth, >= 0.
    two_sided: mirror the sample pattern through the tangent plane as well
        (doubles the sample count; off by default).
    """
    alpha: float = np.pi / 8
    beta: float = 20.0
    n_depth: int = 8
    n_ring: int = 2
    two_sided: bool = False

    def __post_init__(self):
        if not (0.0 <= self.alpha < np.pi / 2):
            raise ValueError(f"alpha must be in [0, pi/2), got {self.alpha}")
        if self.beta <= 0:
            raise ValueError("beta must be positive")
        if self.n_depth < 1:
            raise ValueError("n_depth must be >= 1")
        if self.n_ring < 0:
            raise ValueError("n_ring must be >= 0")
        if self.alpha == 0.0 and self.n_ring != 0:
            raise ValueError("alpha = 0 is a degenerate ray: n_ring must "
                             "be 0")

    @property
    def sample_count(self):
        base = self.n_depth * (1 + self.n_ring * N_AZIMUTH)
        return 2 * base if self.two_sided else base

    @property
    def mode(self):
        """Action parameterization implied by the cone: a degenerate ray
        constrains actions to signed magnitudes along the normal."""
        return "normal" if self.alpha == 0.0 else "general"

    @property
    def state_width(self):
        return 3 + 3 + 12 + self.sample_count


@dataclass
class ApertureFeatures:
    """Per-vertex aperture extraction results."""
    positions: np.ndarray  # (N, 3) vertex positions, mm
    normals: np.ndarray    # (N, 3) unit normals (e1)
    psi: np.ndarray        # (N, 4, 3) cone boundary vectors, mm
    gray: np.ndarray       # (N, sample_count) gray values
    cfg: ApertureConfig


@dataclass
class StateNorm:
    """Normalization applied to the geometric block of a state matrix."""
    center: np.ndarray  # (3,)
    radius: float


def _sample_offsets(cfg):
    """Local-frame sample offsets, (sample_count, 3) in (e1, e2, e3)
    coefficients, mm. Order: depth-major; per depth one axial sample, then
    rings inner to outer, each ring at azimuths 0/90/180/270. The mirrored
    block (two_sided) repeats the whole pattern with e1 negated."""
    rows = []
    for k in range(1, cfg.n_depth + 1):
        depth = cfg.beta * k / cfg.n_depth
        rows.append((depth, 0.0, 0.0))
        for r in range(1, cfg.n_ring + 1):
            ang = cfg.alpha * r / cfg.n_ring
            for a in range(N_AZIMUTH):
                phi = 2.0 * np.pi * a / N_AZIMUTH
                rows.append((depth * np.cos(ang),
                             depth * np.sin(ang) * np.cos(phi),
                             depth * np.sin(ang) * np.sin(phi)))
    out = np.array(rows, dtype=np.float64)
    if cfg.two_sided:
        out = np.concatenate([out, out * [-1.0, 1.0, 1.0]])
    return out


def cone_boundary(vertex, frame, cfg):
    """Four cone boundary vectors rooted at the vertex, (4, 3) world mm.

    Each has length beta at angle alpha from e1, at azimuths 0/90/180/270
    degrees in the (e2, e3) plane. frame rows are (e1, e2, e3).
    """
    return _cone_boundaries(np.asarray(frame)[None], cfg)[0]


def _cone_boundaries(frames, cfg):
    """(N, 3, 3) frames -> (N, 4, 3) boundary vectors."""
    ca, sa = np.cos(cfg.alpha), np.sin(cfg.alpha)
    phis = 2.0 * np.pi * np.arange(N_AZIMUTH) / N_AZIMUTH
    local = np.stack([np.full(N_AZIMUTH, ca),
                      sa * np.cos(phis),
                      sa * np.sin(phis)], axis=1) * cfg.beta  # (4, 3)
    return np.einsum("ac,ncw->naw", local, frames)


def sample_aperture(vol, mesh, cfg, pad=0.0):
    """Extract gray values inside each vertex's cone of vision.

    Sample order per vertex is the fixed pattern of _sample_offsets; rows
    are ordered by vertex index. Points outside the volume read pad.
    """
    normals = vertex_normals(mesh)
    frames = local_frames(normals)
    offsets = _sample_offsets(cfg)  # (S, 3) local
    world = np.einsum("sc,ncw->nsw", offsets, frames)
    points = mesh.vertices[:, None, :] + world
    gray = vol.sample_trilinear(points.reshape(-1, 3), pad=pad)
    gray = gray.reshape(mesh.n_vertices, cfg.sample_count)
    psi = _cone_boundaries(frames, cfg)
    return ApertureFeatures(mesh.vertices.copy(), normals, psi, gray, cfg)


def assemble_state(mesh, feats):
    """Build the N x D state matrix and its normalization transform.

    Row i: [position (3, centered and radius-scaled), normal (3), boundary
    vectors (12, radius-scaled), gray values (sample_count, raw)]. Dividing
    the geometric block by the bounding-sphere radius makes the matrix
    invariant to a world rescale that scales mesh, volume, and aperture
    together.
    """
    if feats.positions.shape != mesh.vertices.shape or \
            not np.array_equal(feats.positions, mesh.vertices):
        raise ValueError("features were not computed from this mesh")
    center = mesh.centroid()
    radius = mesh.bounding_radius()
    if radius <= 0:
        raise ValueError("mesh has zero bounding radius")
    n = mesh.n_vertices
    s = np.concatenate([
        (mesh.vertices - center) / radius,
        feats.normals,
        feats.psi.reshape(n, 12) / radius,
        feats.gray,
    ], axis=1)
    return s, StateNorm(center, radius)


# ---------------------------------------------------------------------------
# debug dump

def dump_features(feats, path):
    """Write the raw feature matrix plus a JSON shape descriptor."""
    base = os.fspath(path)
    for suffix in (".omega.json", ".omega.raw", ".omega"):
        if base.endswith(suffix):
            base = base[: -len(suffix)]
            break
    n = len(feats.positions)
    mat = np.concatenate([feats.positions, feats.normals,
                          feats.psi.reshape(n, 12), feats.gray], axis=1)
    meta = {
        "format": "omega",
        "version": 1,
        "n_vertices": n,
        "row_width": mat.shape[1],
        "blocks": {"position": 3, "normal": 3, "psi": 12,
                   "gray": int(feats.cfg.sample_count)},
        "config": {"alpha": feats.cfg.alpha, "beta": feats.cfg.beta,
                   "n_depth": feats.cfg.n_depth, "n_ring": feats.cfg.n_ring,
                   "two_sided": feats.cfg.two_sided},
    }
    with open(base + ".omega.json", "w") as fh:
        json.dump(meta, fh)
        fh.write("\n")
    with open(base + ".omega.raw", "wb") as fh:
        fh.write(mat.astype("<f8").tobytes())
    return base + ".omega.json", base + ".omega.raw"
