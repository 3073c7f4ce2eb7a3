"""Volume module tests. Trilinear sampling is checked against a scalar
8-corner reference; voxelization against the analytic inside test away from
the faceting band."""

import numpy as np
import pytest

from apertureseg import mesh as M
from apertureseg import volume as V


def oracle_trilinear(vol, p, pad=0.0):
    """Scalar 8-corner interpolation written independently."""
    g = (np.asarray(p, dtype=np.float64) - vol.origin) / vol.spacing
    n = vol.shape
    for a in range(3):
        if g[a] < 0 or g[a] > n[a] - 1:
            return pad
    i = [min(int(np.floor(g[a])), n[a] - 2) for a in range(3)]
    i = [max(ii, 0) for ii in i]
    f = [g[a] - i[a] for a in range(3)]
    total = 0.0
    for dx in (0, 1):
        for dy in (0, 1):
            for dz in (0, 1):
                w = ((f[0] if dx else 1 - f[0]) *
                     (f[1] if dy else 1 - f[1]) *
                     (f[2] if dz else 1 - f[2]))
                total += w * float(vol.data[min(i[0] + dx, n[0] - 1),
                                            min(i[1] + dy, n[1] - 1),
                                            min(i[2] + dz, n[2] - 1)])
    return total


def small_volume(seed=0, shape=(7, 6, 5)):
    rng = np.random.default_rng(seed)
    data = rng.normal(size=shape).astype(np.float32)
    return V.Volume(data, spacing=(1.5, 2.0, 0.75), origin=(-3.0, 1.0, 2.5))


# ---------------------------------------------------------------------------
# trilinear sampling

def test_trilinear_matches_reference():
    vol = small_volume()
    rng = np.random.default_rng(1)
    lo, hi = vol.world_bounds()
    pts = rng.uniform(lo - 2, hi + 2, size=(300, 3))
    got = vol.sample_trilinear(pts, pad=-7.0)
    want = np.array([oracle_trilinear(vol, p, pad=-7.0) for p in pts])
    np.testing.assert_allclose(got, want, atol=1e-12)


def test_trilinear_voxel_centers_exact():
    vol = small_volume(seed=2)
    idx = np.stack(np.meshgrid(*[np.arange(n) for n in vol.shape],
                               indexing="ij"), axis=-1).reshape(-1, 3)
    pts = vol.origin + idx * vol.spacing
    got = vol.sample_trilinear(pts)
    np.testing.assert_allclose(got, vol.data[idx[:, 0], idx[:, 1],
                                             idx[:, 2]].astype(np.float64),
                               atol=1e-6)


def test_trilinear_reproduces_affine_field():
    # f(x) = 0.2 + 0.03 x - 0.05 y + 0.01 z is exactly trilinear
    shape = (9, 8, 7)
    spacing = np.array([2.0, 1.0, 1.5])
    origin = np.array([-4.0, 0.0, 1.0])
    idx = np.stack(np.meshgrid(*[np.arange(n) for n in shape],
                               indexing="ij"), axis=-1)
    world = origin + idx * spacing
    f = 0.2 + 0.03 * world[..., 0] - 0.05 * world[..., 1] \
        + 0.01 * world[..., 2]
    vol = V.Volume(f.astype(np.float32), spacing, origin)
    rng = np.random.default_rng(3)
    lo, hi = vol.world_bounds()
    pts = rng.uniform(lo, hi, size=(200, 3))
    want = 0.2 + 0.03 * pts[:, 0] - 0.05 * pts[:, 1] + 0.01 * pts[:, 2]
    got = vol.sample_trilinear(pts)
    np.testing.assert_allclose(got, want, atol=1e-5)


def test_trilinear_padding():
    vol = small_volume(seed=4)
    lo, hi = vol.world_bounds()
    outside = np.array([
        lo - [0.01, 0, 0], lo - [0, 0.01, 0], lo - [0, 0, 0.01],
        hi + [0.01, 0, 0], hi + [100, 100, 100],
    ])
    got = vol.sample_trilinear(outside, pad=9.5)
    np.testing.assert_array_equal(got, np.full(5, 9.5))
    # hull corners themselves are inside
    inside = vol.sample_trilinear(np.array([lo, hi]), pad=9.5)
    assert (inside != 9.5).all()


# ---------------------------------------------------------------------------
# serialization

def test_vol_roundtrip(tmp_path):
    vol = small_volume(seed=5)
    V.save_volume(vol, tmp_path / "img.vol.json")
    r = V.load_volume(tmp_path / "img")
    np.testing.assert_array_equal(r.data, vol.data)
    np.testing.assert_array_equal(r.spacing, vol.spacing)
    np.testing.assert_array_equal(r.origin, vol.origin)


def test_vol_stream_is_x_fastest(tmp_path):
    vol = small_volume(seed=6)
    _, rpath = V.save_volume(vol, tmp_path / "img")
    raw = np.fromfile(rpath, dtype="<f4")
    assert raw[0] == vol.data[0, 0, 0]
    assert raw[1] == vol.data[1, 0, 0]
    nx = vol.shape[0]
    assert raw[nx] == vol.data[0, 1, 0]


def test_vol_truncated_payload(tmp_path):
    vol = small_volume(seed=7)
    jpath, rpath = V.save_volume(vol, tmp_path / "img")
    raw = open(rpath, "rb").read()
    open(rpath, "wb").write(raw[:-8])
    with pytest.raises(ValueError):
        V.load_volume(jpath)


def test_vol_bad_header(tmp_path):
    vol = small_volume(seed=8)
    jpath, _ = V.save_volume(vol, tmp_path / "img")
    txt = open(jpath).read().replace('"version": 1', '"version": 99')
    open(jpath, "w").write(txt)
    with pytest.raises(ValueError):
        V.load_volume(jpath)


# ---------------------------------------------------------------------------
# phantoms

def test_sphere_phantom_rotational_symmetry():
    spec = V.PhantomSpec(semi_axes=(30.0, 30.0, 30.0), shape=(33, 33, 33),
                         spacing=(3.0, 3.0, 3.0), softness=4.0, noise=0.0)
    vol, _ = V.generate_phantom(spec)
    d = vol.data
    np.testing.assert_array_equal(d, d.transpose(1, 0, 2))
    np.testing.assert_array_equal(d, d.transpose(2, 1, 0))
    np.testing.assert_array_equal(d, d[::-1, :, :])
    np.testing.assert_array_equal(d, d[:, :, ::-1])


def test_phantom_mesh_on_analytic_surface():
    spec = V.PhantomSpec(family="blob", semi_axes=(35.0, 28.0, 31.0),
                         center=(4.0, -2.0, 1.0), seed=9, mesh_level=2,
                         shape=(48, 48, 48), spacing=(3.0, 3.0, 3.0))
    vol, gt = V.generate_phantom(spec)
    M.check_closed(gt)
    rng = np.random.Generator(np.random.PCG64(spec.seed))
    lobes = V._phantom_lobes(spec, rng)
    d = gt.vertices - np.array(spec.center)
    r = np.linalg.norm(d, axis=1)
    want = V._phantom_radius(spec, d / r[:, None], lobes)
    np.testing.assert_allclose(r, want, atol=1e-9)


def test_phantom_deterministic():
    spec = V.PhantomSpec(family="blob", seed=3, noise=1.5,
                         shape=(40, 40, 40))
    v1, m1 = V.generate_phantom(spec)
    v2, m2 = V.generate_phantom(spec)
    np.testing.assert_array_equal(v1.data, v2.data)
    np.testing.assert_array_equal(m1.vertices, m2.vertices)
    v3, _ = V.generate_phantom(V.PhantomSpec(family="blob", seed=4,
                                             noise=1.5, shape=(40, 40, 40)))
    assert not np.array_equal(v1.data, v3.data)


def test_phantom_intensities():
    spec = V.PhantomSpec(interior=100.0, exterior=10.0, softness=2.0,
                         semi_axes=(36.0, 36.0, 36.0), shape=(48, 48, 48))
    vol, _ = V.generate_phantom(spec)
    c = vol.sample_trilinear(np.zeros((1, 3)))[0]
    assert abs(c - 100.0) < 1e-6
    corner = float(vol.data[0, 0, 0])
    assert abs(corner - 10.0) < 1e-6


def test_phantom_bounds_error():
    spec = V.PhantomSpec(semi_axes=(80.0, 80.0, 80.0), shape=(32, 32, 32),
                         spacing=(3.0, 3.0, 3.0))
    with pytest.raises(ValueError):
        V.generate_phantom(spec)


def test_phantom_bad_family():
    with pytest.raises(ValueError):
        V.generate_phantom(V.PhantomSpec(family="box"))


# ---------------------------------------------------------------------------
# voxelization and dice

def test_voxelize_sphere_vs_analytic():
    r = 31.0
    m = M.icosphere(3, radius=r)
    shape, spacing = (40, 40, 40), np.array([2.0, 2.0, 2.0])
    origin = -spacing * (np.array(shape) - 1) / 2
    mask = V.voxelize_mesh(m, shape, spacing, origin)
    idx = np.stack(np.meshgrid(*[np.arange(n) for n in shape],
                               indexing="ij"), axis=-1)
    world = origin + idx * spacing
    rad = np.linalg.norm(world, axis=-1)
    # faceting band: chord sagitta of the longest edge
    e = M.edges(m)
    u = m.vertices[e[:, 0]] / r
    v = m.vertices[e[:, 1]] / r
    theta = np.arccos(np.clip((u * v).sum(axis=1), -1, 1)).max()
    band = r * (1 - np.cos(theta / 2)) * 2 + 1e-6
    clear = np.abs(rad - r) > band
    np.testing.assert_array_equal(mask[clear], (rad < r)[clear])
    # and the band is thin, so overall agreement is near-total
    assert V.dice(mask, rad < r) > 0.985


def test_voxelize_deterministic():
    m = M.icosphere(2, radius=12.0)
    args = ((24, 24, 24), (1.5, 1.5, 1.5), (-17.25, -17.25, -17.25))
    m1 = V.voxelize_mesh(m, *args)
    m2 = V.voxelize_mesh(m, *args)
    np.testing.assert_array_equal(m1, m2)
    assert m1.sum() > 0


def test_voxelize_requires_closed():
    m = M.icosphere(1)
    open_m = M.Mesh(m.vertices, m.faces[:-1])
    with pytest.raises(ValueError):
        V.voxelize_mesh(open_m, (8, 8, 8), (0.5, 0.5, 0.5),
                        (-2.0, -2.0, -2.0))


def test_dice_identities():
    a = np.zeros((4, 4, 4), dtype=bool)
    a[:2] = True
    b = np.zeros((4, 4, 4), dtype=bool)
    b[1:3] = True
    assert V.dice(a, a) == 1.0
    assert V.dice(a, ~a) == 0.0
    assert abs(V.dice(a, b) - 0.5) < 1e-15
    with pytest.raises(ValueError):
        V.dice(np.zeros((2, 2, 2), bool), np.zeros((2, 2, 2), bool))
