"""Statistical shape models over corresponded meshes.

Training shapes (same topology, vertexwise correspondence) are aligned with
similarity Procrustes, then a PCA over the aligned vertex coordinates gives
orthonormal variation modes with standard deviations. Shapes are sampled as
mean + sum_j coeff_j * sigma_j * mode_j with coefficients in units of
standard deviations.
"""

import json
import os
from dataclasses import dataclass

import numpy as np

from .mesh import Mesh

_MODE_TOL = 1e-12  # relative eigenvalue cutoff for numerically-null modes


@dataclass
class Similarity:
    """x -> scale * R @ x + t."""
    scale: float
    rotation: np.ndarray   # (3, 3)
    translation: np.ndarray  # (3,)

    def apply(self, points):
        p = np.asarray(points, dtype=np.float64)
        return self.scale * p @ self.rotation.T + self.translation


def procrustes_align(src, dst):
    """Least-squares similarity transform mapping src points onto dst.

    Minimizes ||dst - (s R src + t)||_F^2 over rotation R (det +1), scale
    s > 0 and translation t. src/dst: (N, 3) in correspondence. Raises for
    degenerate configurations (all src coincident or collinear) where the
    rotation is not determined.
    """
    x = np.asarray(src, dtype=np.float64)
    y = np.asarray(dst, dtype=np.float64)
    if x.shape != y.shape or x.ndim != 2 or x.shape[1] != 3:
        raise ValueError("src and dst must be matching (N, 3) arrays")
    n = len(x)
    if n < 3:
        raise ValueError("need at least 3 points")
    mx, my = x.mean(axis=0), y.mean(axis=0)
    xc, yc = x - mx, y - my
    var_x = (xc * xc).sum() / n
    if var_x == 0:
        raise ValueError("source points are coincident")
    cov = yc.T @ xc / n
    u, d, vt = np.linalg.svd(cov)
    if d[1] <= 1e-12 * max(d[0], 1e-300):
        raise ValueError("source/target points are collinear; rotation "
                         "is undetermined")
    sign = np.sign(np.linalg.det(u) * np.linalg.det(vt))
    s3 = np.array([1.0, 1.0, sign])
    rot = u @ np.diag(s3) @ vt
    scale = float((d * s3).sum() / var_x)
    trans = my - scale * rot @ mx
    return Similarity(scale, rot, trans)


@dataclass
class ShapeModel:
    """PCA shape model tied to one mesh topology."""
    topo: str
    level: int
    faces: np.ndarray     # (F, 3)
    mean: np.ndarray      # (N, 3)
    modes: np.ndarray     # (M, N, 3), orthonormal over flattened coords
    sigmas: np.ndarray    # (M,), descending

    @property
    def n_modes(self):
        return len(self.sigmas)

    @property
    def n_vertices(self):
        return len(self.mean)


def fit_ssm(meshes):
    """Fit a shape model to corresponded training meshes.

    All meshes must share topology tag, level, and vertex/face counts. Each
    mesh is similarity-aligned to the first, the mean is taken over the
    aligned stack, and the PCA runs on the residual 3N-vectors through the
    K x K Gram matrix (K meshes, never a 3N x 3N covariance). Modes with
    numerically null variance are dropped; sigmas come out descending.
    """
    if len(meshes) < 2:
        raise ValueError("need at least 2 training meshes")
    first = meshes[0]
    for m in meshes[1:]:
        if (m.topo != first.topo or m.level != first.level
                or m.n_vertices != first.n_vertices
                or not np.array_equal(m.faces, first.faces)):
            raise ValueError("training meshes must share one topology")

    shapes = np.stack([m.vertices for m in meshes])  # (K, N, 3)
    aligned = np.stack([shapes[0]] +
                       [procrustes_align(s, shapes[0]).apply(s)
                        for s in shapes[1:]])
    mean = aligned.mean(axis=0)
    k, n, _ = aligned.shape

    x = aligned.reshape(k, 3 * n) - mean.reshape(1, 3 * n)
    gram = x @ x.T / (k - 1)
    lam, u = np.linalg.eigh(gram)
    order = np.argsort(lam)[::-1]
    lam, u = lam[order], u[:, order]
    keep = (lam > max(lam[0], 0.0) * _MODE_TOL) & (lam > 0)
    lam, u = lam[keep], u[:, keep]
    modes = x.T @ u  # (3N, M)
    modes /= np.linalg.norm(modes, axis=0, keepdims=True)
    sigmas = np.sqrt(lam)
    return ShapeModel(first.topo, first.level, first.faces.copy(), mean,
                      modes.T.reshape(-1, n, 3), sigmas)


def sample_shape(model, coeffs):
    """Instantiate a mesh at the given mode coefficients (std-dev units).

    Missing trailing coefficients are zero; more coefficients than modes is
    an error.
    """
    c = np.atleast_1d(np.asarray(coeffs, dtype=np.float64))
    if len(c) > model.n_modes:
        raise ValueError(f"{len(c)} coefficients for {model.n_modes} modes")
    v = model.mean.copy()
    for j, cj in enumerate(c):
        v = v + cj * model.sigmas[j] * model.modes[j]
    return Mesh(v, model.faces, model.topo, model.level)


# ---------------------------------------------------------------------------
# serialization: JSON header + raw little-endian float64 payload

def _ssm_paths(path):
    s = os.fspath(path)
    for suffix in (".ssm.json", ".ssm.raw", ".ssm"):
        if s.endswith(suffix):
            s = s[: -len(suffix)]
            break
    return s + ".ssm.json", s + ".ssm.raw"


def save_ssm(model, path):
    jpath, rpath = _ssm_paths(path)
    meta = {
        "format": "ssm",
        "version": 1,
        "topo": model.topo,
        "level": int(model.level),
        "n_vertices": int(model.n_vertices),
        "n_modes": int(model.n_modes),
        "sigmas": [float(s) for s in model.sigmas],
        "faces": model.faces.astype(int).tolist(),
        "payload": "mean then modes, float64 little-endian",
    }
    with open(jpath, "w") as fh:
        json.dump(meta, fh)
        fh.write("\n")
    blob = np.concatenate([model.mean.ravel(),
                           model.modes.ravel()]).astype("<f8")
    with open(rpath, "wb") as fh:
        fh.write(blob.tobytes())
    return jpath, rpath


def load_ssm(path):
    jpath, rpath = _ssm_paths(path)
    with open(jpath) as fh:
        meta = json.load(fh)
    if meta.get("format") != "ssm" or meta.get("version") != 1:
        raise ValueError(f"{jpath}: not a version-1 ssm header")
    n = int(meta["n_vertices"])
    m = int(meta["n_modes"])
    raw = np.fromfile(rpath, dtype="<f8")
    want = 3 * n + m * 3 * n
    if raw.size != want:
        raise ValueError(f"{rpath}: payload has {raw.size} values, header "
                         f"promises {want}")
    mean = raw[:3 * n].reshape(n, 3)
    modes = raw[3 * n:].reshape(m, n, 3)
    return ShapeModel(meta["topo"], int(meta["level"]),
                      np.array(meta["faces"], dtype=np.int64), mean, modes,
                      np.array(meta["sigmas"], dtype=np.float64))
