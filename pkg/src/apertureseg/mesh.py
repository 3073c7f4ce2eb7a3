"""Triangle meshes: icosphere construction, subdivision, normals and local
frames, exact point-to-surface queries (BVH), Hausdorff distance, OBJ I/O.

All meshes are closed orientable triangle surfaces. Vertex order is part of
the contract: subdivision keeps the parent's vertices as a prefix so vertex
correspondence survives refinement.
"""

import re

import numpy as np
from scipy.spatial import cKDTree

_LEAF_SIZE = 8


class Mesh:
    """Triangle mesh with a topology tag.

    vertices: (N, 3) float64 world coordinates (mm).
    faces: (F, 3) int vertex indices, counter-clockwise when viewed from
        outside.
    topo: short string identifying the connectivity family (e.g. "ico").
    level: subdivision level within the family.
    """

    def __init__(self, vertices, faces, topo="mesh", level=0):
        vertices = np.ascontiguousarray(vertices, dtype=np.float64)
        faces = np.ascontiguousarray(faces, dtype=np.int64)
        if vertices.ndim != 2 or vertices.shape[1] != 3:
            raise ValueError(f"vertices must be (N, 3), got {vertices.shape}")
        if faces.ndim != 2 or faces.shape[1] != 3:
            raise ValueError(f"faces must be (F, 3), got {faces.shape}")
        if len(faces) and (faces.min() < 0 or faces.max() >= len(vertices)):
            raise ValueError("face index out of range")
        self.vertices = vertices
        self.faces = faces
        self.topo = topo
        self.level = int(level)
        self._index = None  # lazy BVH

    @property
    def n_vertices(self):
        return len(self.vertices)

    @property
    def n_faces(self):
        return len(self.faces)

    def with_vertices(self, vertices):
        """Same connectivity, new vertex positions."""
        return Mesh(vertices, self.faces, self.topo, self.level)

    def copy(self):
        return Mesh(self.vertices.copy(), self.faces, self.topo, self.level)

    def triangles(self):
        """(F, 3, 3) corner coordinates."""
        return self.vertices[self.faces]

    def centroid(self):
        return self.vertices.mean(axis=0)

    def bounding_radius(self):
        """Radius of the centroid-centered bounding sphere."""
        d = self.vertices - self.centroid()
        return float(np.sqrt((d * d).sum(axis=1).max()))

    def surface_index(self):
        """Cached BVH over the current vertex positions."""
        if self._index is None:
            self._index = _Bvh(self)
        return self._index


def edges(mesh):
    """Unique undirected edges as a sorted (E, 2) int array.

    Sorted lexicographically with each row (lo, hi); deterministic, used as
    the canonical edge order by subdivision and the smoothness operator.
    """
    f = mesh.faces
    e = np.concatenate([f[:, [0, 1]], f[:, [1, 2]], f[:, [2, 0]]])
    e = np.sort(e, axis=1)
    return np.unique(e, axis=0)


def check_closed(mesh):
    """Raise unless every edge is shared by exactly two faces with opposite
    orientation (closed orientable 2-manifold)."""
    f = mesh.faces
    directed = np.concatenate([f[:, [0, 1]], f[:, [1, 2]], f[:, [2, 0]]])
    # each directed edge must appear exactly once...
    du, dc = np.unique(directed, axis=0, return_counts=True)
    if (dc != 1).any():
        raise ValueError("mesh has a repeated directed edge (inconsistent "
                         "winding or non-manifold edge)")
    # ...and its reverse exactly once
    su, sc = np.unique(np.sort(directed, axis=1), axis=0, return_counts=True)
    if (sc != 2).any():
        raise ValueError("mesh is not closed: edge not shared by exactly "
                         "two faces")


def vertex_degrees(mesh):
    """Number of incident edges per vertex."""
    e = edges(mesh)
    deg = np.zeros(mesh.n_vertices, dtype=np.int64)
    np.add.at(deg, e[:, 0], 1)
    np.add.at(deg, e[:, 1], 1)
    return deg


def vertex_normals(mesh):
    """Outward unit vertex normals, area-weighted over incident faces.

    Raises on vertices referenced by no face (no normal is defined there).
    """
    v, f = mesh.vertices, mesh.faces
    fn = np.cross(v[f[:, 1]] - v[f[:, 0]], v[f[:, 2]] - v[f[:, 0]])
    acc = np.zeros_like(v)
    for k in range(3):
        np.add.at(acc, f[:, k], fn)
    norm = np.linalg.norm(acc, axis=1)
    if (norm == 0).any():
        bad = int(np.flatnonzero(norm == 0)[0])
        raise ValueError(f"vertex {bad} has no defined normal (isolated or "
                         "degenerate one-ring)")
    return acc / norm[:, None]


def local_frames(normals):
    """Right-handed orthonormal frame per vertex, (N, 3, 3).

    Rows of each frame are (e1, e2, e3): e1 is the normal, e2 comes from
    projecting the global axis least aligned with e1 onto the tangent plane,
    e3 = e1 x e2. Deterministic; ties in axis choice go to the lowest axis
    index.
    """
    n = np.asarray(normals, dtype=np.float64)
    if n.ndim == 1:
        return local_frames(n[None])[0]
    # least-aligned global axis per vertex (argmin picks lowest index on ties)
    axis = np.argmin(np.abs(n), axis=1)
    g = np.zeros_like(n)
    g[np.arange(len(n)), axis] = 1.0
    e2 = g - (g * n).sum(axis=1, keepdims=True) * n
    e2 /= np.linalg.norm(e2, axis=1, keepdims=True)
    e3 = np.cross(n, e2)
    return np.stack([n, e2, e3], axis=1)


# ---------------------------------------------------------------------------
# icosphere and subdivision

def _icosahedron():
    phi = (1.0 + np.sqrt(5.0)) / 2.0
    v = np.array([
        [-1, phi, 0], [1, phi, 0], [-1, -phi, 0], [1, -phi, 0],
        [0, -1, phi], [0, 1, phi], [0, -1, -phi], [0, 1, -phi],
        [phi, 0, -1], [phi, 0, 1], [-phi, 0, -1], [-phi, 0, 1],
    ], dtype=np.float64)
    v /= np.linalg.norm(v[0])
    f = np.array([
        [0, 11, 5], [0, 5, 1], [0, 1, 7], [0, 7, 10], [0, 10, 11],
        [1, 5, 9], [5, 11, 4], [11, 10, 2], [10, 7, 6], [7, 1, 8],
        [3, 9, 4], [3, 4, 2], [3, 2, 6], [3, 6, 8], [3, 8, 9],
        [4, 9, 5], [2, 4, 11], [6, 2, 10], [8, 6, 7], [9, 8, 1],
    ], dtype=np.int64)
    return v, f


def subdivide(mesh):
    """One round of midpoint subdivision (no reprojection).

    The parent's vertices keep their indices as a prefix of the child's
    vertex array; one new vertex is created per parent edge, ordered by the
    canonical sorted edge list. Face count quadruples. Raises if the mesh is
    not a closed manifold.
    """
    check_closed(mesh)
    v, f = mesh.vertices, mesh.faces
    e = edges(mesh)
    mid = 0.5 * (v[e[:, 0]] + v[e[:, 1]])
    new_v = np.concatenate([v, mid])
    # edge (lo, hi) -> new vertex index
    n0 = len(v)
    key = e[:, 0] * len(v) + e[:, 1]
    lut = {int(k): n0 + i for i, k in enumerate(key)}

    def midx(a, b):
        lo = np.minimum(a, b)
        hi = np.maximum(a, b)
        return np.array([lut[int(k)] for k in lo * len(v) + hi],
                        dtype=np.int64)

    a, b, c = f[:, 0], f[:, 1], f[:, 2]
    ab, bc, ca = midx(a, b), midx(b, c), midx(c, a)
    new_f = np.concatenate([
        np.stack([a, ab, ca], axis=1),
        np.stack([b, bc, ab], axis=1),
        np.stack([c, ca, bc], axis=1),
        np.stack([ab, bc, ca], axis=1),
    ])
    return Mesh(new_v, new_f, mesh.topo, mesh.level + 1)


def icosphere(level, radius=1.0, center=(0.0, 0.0, 0.0)):
    """Unit-sphere triangulation from a subdivided icosahedron.

    Each subdivision round splits edges at their midpoints and reprojects all
    vertices to the sphere. level 0 has 12 vertices; level k has
    10*4^k + 2 vertices and 20*4^k faces.
    """
    if level < 0:
        raise ValueError("level must be >= 0")
    v, f = _icosahedron()
    m = Mesh(v, f, "ico", 0)
    for _ in range(level):
        m = subdivide(m)
        w = m.vertices / np.linalg.norm(m.vertices, axis=1, keepdims=True)
        m = Mesh(w, m.faces, m.topo, m.level)
    out = m.vertices * float(radius) + np.asarray(center, dtype=np.float64)
    return Mesh(out, m.faces, "ico", level)


# ---------------------------------------------------------------------------
# exact closest point on triangles (vectorized, Ericson-style regions)

def closest_point_on_triangles(tri, p):
    """Closest point to p on each triangle, elementwise.

    tri: (K, 3, 3), p: (K, 3) -> (K, 3). Triangles must be non-degenerate.
    """
    a, b, c = tri[:, 0], tri[:, 1], tri[:, 2]
    ab = b - a
    ac = c - a
    ap = p - a
    d1 = (ab * ap).sum(1)
    d2 = (ac * ap).sum(1)
    bp = p - b
    d3 = (ab * bp).sum(1)
    d4 = (ac * bp).sum(1)
    cp = p - c
    d5 = (ab * cp).sum(1)
    d6 = (ac * cp).sum(1)

    vc = d1 * d4 - d3 * d2
    vb = d5 * d2 - d1 * d6
    va = d3 * d6 - d5 * d4

    def safe_div(num, den):
        return num / np.where(den == 0.0, 1.0, den)

    # candidate points for every region; masks pick the first that applies
    q_ab = a + safe_div(d1, d1 - d3)[:, None] * ab
    q_ac = a + safe_div(d2, d2 - d6)[:, None] * ac
    w_bc = safe_div(d4 - d3, (d4 - d3) + (d5 - d6))
    q_bc = b + w_bc[:, None] * (c - b)
    denom = safe_div(np.ones_like(va), va + vb + vc)
    q_in = a + (vb * denom)[:, None] * ab + (vc * denom)[:, None] * ac

    m_a = (d1 <= 0) & (d2 <= 0)
    m_b = (d3 >= 0) & (d4 <= d3)
    m_c = (d6 >= 0) & (d5 <= d6)
    m_ab = (vc <= 0) & (d1 >= 0) & (d3 <= 0)
    m_ac = (vb <= 0) & (d2 >= 0) & (d6 <= 0)
    m_bc = (va <= 0) & (d4 - d3 >= 0) & (d5 - d6 >= 0)

    q = q_in.copy()
    for mask, cand in [(m_bc, q_bc), (m_ac, q_ac), (m_ab, q_ab),
                       (m_c, c), (m_b, b), (m_a, a)]:
        q = np.where(mask[:, None], cand, q)
    return q


class _Bvh:
    """Median-split AABB tree over a mesh's triangles.

    Queries are batched: a frontier of (point, node) pairs descends the tree
    together, pruned by an exact nearest-vertex upper bound. Results are
    exact closest points, deterministic under distance ties (lowest evaluated
    pair wins).
    """

    def __init__(self, mesh):
        tri = np.ascontiguousarray(mesh.triangles())
        if len(tri) == 0:
            raise ValueError("empty mesh")
        self.tri = tri
        self._verts = mesh.vertices
        self._vert_tree = cKDTree(mesh.vertices)
        self._build()

    def _build(self):
        tri = self.tri
        cent = tri.mean(axis=1)
        tmin = tri.min(axis=1)
        tmax = tri.max(axis=1)
        order = np.arange(len(tri))
        node_min, node_max = [], []
        node_left, node_right = [], []
        node_start, node_count = [], []

        def add_node(idx):
            node_min.append(tmin[idx].min(axis=0))
            node_max.append(tmax[idx].max(axis=0))
            node_left.append(-1)
            node_right.append(-1)
            node_start.append(-1)
            node_count.append(0)
            return len(node_min) - 1

        leaf_tris = []

        def build(idx):
            me = add_node(idx)
            if len(idx) <= _LEAF_SIZE:
                node_start[me] = len(leaf_tris)
                node_count[me] = len(idx)
                leaf_tris.extend(idx.tolist())
                return me
            span = cent[idx].max(axis=0) - cent[idx].min(axis=0)
            axis = int(np.argmax(span))
            srt = idx[np.argsort(cent[idx, axis], kind="stable")]
            half = len(srt) // 2
            node_left[me] = build(srt[:half])
            node_right[me] = build(srt[half:])
            return me

        build(order)
        self.node_min = np.array(node_min)
        self.node_max = np.array(node_max)
        self.node_left = np.array(node_left, dtype=np.int64)
        self.node_right = np.array(node_right, dtype=np.int64)
        self.node_start = np.array(node_start, dtype=np.int64)
        self.node_count = np.array(node_count, dtype=np.int64)
        self.leaf_tris = np.array(leaf_tris, dtype=np.int64)

    def query(self, points):
        """Exact closest surface points.

        points: (M, 3) -> (dist (M,), closest (M, 3)).
        """
        p = np.atleast_2d(np.asarray(points, dtype=np.float64))
        m = len(p)
        # nearest mesh vertex is an exact upper bound on surface distance;
        # square it with the same arithmetic the leaves use so an equal
        # leaf distance passes the <= test bit-for-bit
        _, vi = self._vert_tree.query(p)
        best2 = ((p - self._verts[vi]) ** 2).sum(axis=1)
        best_tri = np.full(m, -1, dtype=np.int64)

        pts = np.arange(m)
        nodes = np.zeros(m, dtype=np.int64)
        while pts.size:
            lo = self.node_min[nodes] - p[pts]
            hi = p[pts] - self.node_max[nodes]
            gap = np.maximum(np.maximum(lo, hi), 0.0)
            lb2 = (gap * gap).sum(axis=1)
            keep = lb2 <= best2[pts]
            pts, nodes = pts[keep], nodes[keep]
            if not pts.size:
                break
            is_leaf = self.node_count[nodes] > 0
            if is_leaf.any():
                lp, ln = pts[is_leaf], nodes[is_leaf]
                counts = self.node_count[ln]
                starts = self.node_start[ln]
                rp = np.repeat(lp, counts)
                # flatten the per-leaf triangle ranges
                offs = np.concatenate([[0], np.cumsum(counts)])
                flat = np.empty(offs[-1], dtype=np.int64)
                for i in range(len(ln)):
                    flat[offs[i]:offs[i + 1]] = self.leaf_tris[
                        starts[i]:starts[i] + counts[i]]
                q = closest_point_on_triangles(self.tri[flat], p[rp])
                d2 = ((p[rp] - q) ** 2).sum(axis=1)
                # per-point minimum; ties resolved by evaluation order
                srt = np.lexsort((np.arange(len(rp)), d2, rp))
                rp_s, d2_s, t_s = rp[srt], d2[srt], flat[srt]
                uniq, first = np.unique(rp_s, return_index=True)
                # <= so a triangle claims points whose vertex upper bound
                # is already exact
                upd = d2_s[first] <= best2[uniq]
                best2[uniq[upd]] = d2_s[first][upd]
                best_tri[uniq[upd]] = t_s[first][upd]
            ip, inn = pts[~is_leaf], nodes[~is_leaf]
            pts = np.concatenate([ip, ip])
            nodes = np.concatenate([self.node_left[inn],
                                    self.node_right[inn]])

        # a point can stay unclaimed when its true closest point sits at a
        # mesh vertex and every incident triangle rounds a hair above the
        # exact vertex bound; the nearest vertex is then the answer
        closest = self._verts[vi].copy()
        claimed = best_tri >= 0
        if claimed.any():
            closest[claimed] = closest_point_on_triangles(
                self.tri[best_tri[claimed]], p[claimed])
        dist = np.linalg.norm(p - closest, axis=1)
        return dist, closest


def point_to_surface(points, mesh):
    """Distance and exact closest point on the mesh surface.

    points: (M, 3) or (3,) -> (dist, closest) with matching leading shape.
    """
    pts = np.asarray(points, dtype=np.float64)
    single = pts.ndim == 1
    dist, closest = mesh.surface_index().query(np.atleast_2d(pts))
    if single:
        return float(dist[0]), closest[0]
    return dist, closest


def hausdorff(points_a, points_b):
    """Symmetric Hausdorff distance between two vertex sets (mm)."""
    d, _, _ = hausdorff_witness(points_a, points_b)
    return d


def hausdorff_witness(points_a, points_b):
    """Hausdorff distance plus the realizing pair.

    Returns (dist, (side, i, j)) info as (dist, idx_a, idx_b) where the
    distance is attained between points_a[idx_a] and points_b[idx_b].
    """
    a = np.atleast_2d(np.asarray(points_a, dtype=np.float64))
    b = np.atleast_2d(np.asarray(points_b, dtype=np.float64))
    if len(a) == 0 or len(b) == 0:
        raise ValueError("empty point set")
    ta, tb = cKDTree(a), cKDTree(b)
    d_ab, j_ab = tb.query(a)   # nearest b for each a
    d_ba, j_ba = ta.query(b)   # nearest a for each b
    ia = int(np.argmax(d_ab))
    ib = int(np.argmax(d_ba))
    if d_ab[ia] >= d_ba[ib]:
        return float(d_ab[ia]), ia, int(j_ab[ia])
    return float(d_ba[ib]), int(j_ba[ib]), ib


# ---------------------------------------------------------------------------
# OBJ I/O

_TOPO_RE = re.compile(r"#\s*topo:\s*(\S+)\s+level:\s*(-?\d+)")


def save_obj(mesh, path):
    """Wavefront OBJ with the topology tag in a comment header."""
    lines = [f"# topo: {mesh.topo} level: {mesh.level}"]
    for x, y, z in mesh.vertices:
        lines.append(f"v {x:.17g} {y:.17g} {z:.17g}")
    for a, b, c in mesh.faces + 1:
        lines.append(f"f {a} {b} {c}")
    with open(path, "w") as fh:
        fh.write("\n".join(lines) + "\n")


def load_obj(path):
    """Load an OBJ written by save_obj (v/f records, optional topo tag)."""
    verts, faces = [], []
    topo, level = "mesh", 0
    with open(path) as fh:
        for line in fh:
            line = line.strip()
            if not line:
                continue
            if line.startswith("#"):
                m = _TOPO_RE.search(line)
                if m:
                    topo, level = m.group(1), int(m.group(2))
                continue
            parts = line.split()
            if parts[0] == "v":
                verts.append([float(x) for x in parts[1:4]])
            elif parts[0] == "f":
                idx = [int(tok.split("/")[0]) - 1 for tok in parts[1:4]]
                faces.append(idx)
    if not verts:
        raise ValueError(f"no vertices in {path}")
    return Mesh(np.array(verts), np.array(faces), topo, level)
