import math

import numpy as np
import pytest
from scipy import ndimage

from ctribim.analysis import surface_area
from ctribim.geometry import CartesianGrid, enumerate_tube
from ctribim.surface_gen import (
    AtomSet,
    SesConfig,
    SurfaceGenError,
    fast_marching,
    generate_ses,
    read_atoms,
    remove_cavities,
    sas_distance,
    vdw_sdf,
)


def _all_points(grid):
    idx = np.indices(grid.dims).reshape(3, -1).T
    return grid.points(idx).reshape(*grid.dims, 3)


def _one_atom(r=1.5, q=1.0):
    return AtomSet([[0.0, 0.0, 0.0]], [r], [q])


THREE = AtomSet(0.7 * np.array([[0, 0, 0], [1.8, 0, 0], [0.6, 1.6, 0]]),
                0.7 * np.array([1.5, 1.2, 1.0]), [1.0, -1.0, 0.5])


@pytest.fixture(scope="module")
def three_ses():
    return generate_ses(THREE, SesConfig.for_atoms(THREE, 0.5, 48, margin=1.5))


# ---------------------------------------------------------------------------
# Atoms and configuration
# ---------------------------------------------------------------------------


def test_atomset_validation():
    a = AtomSet([0.0, 0.0, 0.0], 1.5, 1.0)
    assert len(a) == 1
    lo, hi = a.bounding_box
    np.testing.assert_array_equal(lo, [-1.5] * 3)
    np.testing.assert_array_equal(hi, [1.5] * 3)
    with pytest.raises(SurfaceGenError):
        AtomSet(np.zeros((0, 3)), [], [])
    with pytest.raises(SurfaceGenError):
        AtomSet([[0, 0, 0]], [0.0], [1.0])
    with pytest.raises(SurfaceGenError):
        AtomSet([[0, 0, np.nan]], [1.0], [1.0])
    with pytest.raises(SurfaceGenError):
        AtomSet([[0, 0, 0], [1, 1, 1]], [1.0], [1.0, 2.0])


def test_read_atoms(tmp_path):
    p = tmp_path / "a.pqr"
    p.write_text("# header\n\n0 0 0 1.0 1.5\n  1.0 2.0 3.0 -0.5 2.0\n")
    a = read_atoms(p)
    assert len(a) == 2
    np.testing.assert_array_equal(a.centers[1], [1, 2, 3])
    np.testing.assert_array_equal(a.charges, [1.0, -0.5])
    np.testing.assert_array_equal(a.radii, [1.5, 2.0])


@pytest.mark.parametrize("body, lineno", [
    ("0 0 0 1.0\n", 1),
    ("# c\n0 0 0 1 1.5\n0 0 x 1 1.5\n", 3),
    ("0 0 0 1 -1\n", 1),
    ("0 0 0 1 1\n\n0 0 inf 1 1\n", 3),
])
def test_read_atoms_reports_line(tmp_path, body, lineno):
    p = tmp_path / "bad.pqr"
    p.write_text(body)
    with pytest.raises(SurfaceGenError, match=f"bad.pqr:{lineno}:"):
        read_atoms(p)


def test_read_atoms_empty_and_missing(tmp_path):
    p = tmp_path / "c.pqr"
    p.write_text("# only a comment\n")
    with pytest.raises(SurfaceGenError, match="no atoms"):
        read_atoms(p)
    with pytest.raises(SurfaceGenError):
        read_atoms(tmp_path / "missing.pqr")


def test_ses_config_validation():
    grid = CartesianGrid((20, 20, 20), (-5, -5, -5), 0.5)
    SesConfig(1.0, grid)
    with pytest.raises(SurfaceGenError, match="resolve"):
        SesConfig(0.9, grid)
    with pytest.raises(SurfaceGenError):
        SesConfig(-1.0, grid)
    with pytest.raises(SurfaceGenError):
        SesConfig(1.0, grid, band=2.0)
    with pytest.raises(SurfaceGenError):
        SesConfig(1.0, grid, tol=0.1)


def test_config_for_atoms_box():
    cfg = SesConfig.for_atoms(THREE, 0.5, 33, margin=1.0)
    assert cfg.grid.dims == (33, 33, 33)
    lo, hi = THREE.bounding_box
    assert np.all(np.asarray(cfg.grid.origin) <= lo - 1.5 + 1e-12)
    assert np.all(cfg.grid.upper >= hi + 1.5 - 1e-12)


def test_atoms_outside_box_rejected():
    grid = CartesianGrid((10, 10, 10), (-2.0, -2.0, -2.0), 0.4)
    with pytest.raises(SurfaceGenError, match="box"):
        generate_ses(_one_atom(), SesConfig(0.8, grid))


# ---------------------------------------------------------------------------
# Van der Waals and SAS distances
# ---------------------------------------------------------------------------


def test_vdw_examples():
    assert vdw_sdf(_one_atom(), [3.0, 0.0, 0.0]) == pytest.approx(-1.5)
    two = AtomSet([[-5, 0, 0], [5, 0, 0]], [1.0, 1.0], [0, 0])
    assert vdw_sdf(two, [1.0, 0.0, 0.0]) == pytest.approx(-3.0)
    assert vdw_sdf(two, [0.0, 0.0, 0.0]) == pytest.approx(-4.0)
    pair = AtomSet([[-0.5, 0, 0], [0.5, 0, 0]], [1.0, 1.0], [0, 0])
    assert vdw_sdf(pair, [0.0, 0.0, 0.0]) > 0
    assert vdw_sdf(pair, np.zeros((4, 3))).shape == (4,)


def _sas_brute(atoms, probe, x, n=400):
    # Distance from x to the exposed part of the union of inflated spheres,
    # by dense sampling of each sphere.
    R = atoms.radii + probe
    g = (1 + 5**0.5) / 2
    k = np.arange(n * n) + 0.5
    t = np.arccos(1 - 2 * k / (n * n))
    p = 2 * np.pi * k / g
    u = np.stack([np.sin(t) * np.cos(p), np.sin(t) * np.sin(p), np.cos(t)], axis=1)
    best = np.inf
    for c, r in zip(atoms.centers, R):
        s = c + r * u
        inner = np.any(np.linalg.norm(s[:, None] - atoms.centers[None], axis=2) < R - 1e-12,
                       axis=1)
        s = s[~inner]
        if s.size:
            best = min(best, np.min(np.linalg.norm(s - x, axis=1)))
    return best


def test_sas_distance_against_sampled_surface():
    pts = np.array([[0.3, 0.2, 0.0], [0.9, 0.3, 0.1], [0.6, 0.7, 0.2], [0.4, 0.4, 0.4]])
    d = sas_distance(THREE, 0.5, pts, cap=5.0)
    for x, v in zip(pts, d):
        # Sampling spacing ~ pi R / 400, so the brute value is an upper bound
        # within a few thousandths.
        ref = _sas_brute(THREE, 0.5, x)
        assert 0 < v <= ref + 1e-12
        assert ref - v < 5e-3
    out = np.array([[5.0, 0.0, 0.0]])
    assert sas_distance(THREE, 0.5, out, cap=1.0)[0] == pytest.approx(
        vdw_sdf(AtomSet(THREE.centers, THREE.radii + 0.5, THREE.charges), out)[0])


def test_sas_distance_cap():
    d = sas_distance(_one_atom(3.0), 0.5, [[0.0, 0.0, 0.0]], cap=1.0)
    assert d[0] == pytest.approx(1.0)


# ---------------------------------------------------------------------------
# Cavities and fast marching
# ---------------------------------------------------------------------------


def test_remove_cavities_simple_cases():
    x = np.indices((15, 15, 15)) - 7
    ball = np.sum(x**2, axis=0) <= 25
    np.testing.assert_array_equal(remove_cavities(ball), ball)
    empty = np.zeros((6, 6, 6), dtype=bool)
    np.testing.assert_array_equal(remove_cavities(empty), empty)
    with pytest.raises(SurfaceGenError):
        remove_cavities(np.zeros((4, 4), dtype=bool))


def test_remove_cavities_matches_component_labels():
    x = np.indices((21, 21, 21)) - 10
    r2 = np.sum(x**2, axis=0)
    shell = (r2 >= 16) & (r2 <= 49)
    inside = shell.copy()
    filled = remove_cavities(inside)
    labels, _ = ndimage.label(~inside)  # 6-connectivity by default
    border = np.unique(np.concatenate([labels[0].ravel(), labels[-1].ravel(), labels[:, 0].ravel(),
                                       labels[:, -1].ravel(), labels[:, :, 0].ravel(),
                                       labels[:, :, -1].ravel()]))
    expected = ~np.isin(labels, border[border > 0])
    np.testing.assert_array_equal(filled, expected)
    assert np.all(filled[r2 < 16])
    # Piercing the shell connects the void to the outside.
    pierced = shell.copy()
    pierced[10:, 10, 10] = False
    np.testing.assert_array_equal(remove_cavities(pierced), pierced)


def test_fast_marching_plane():
    h = 0.1
    grid = CartesianGrid((12, 12, 30), (0, 0, 0), h)
    z = _all_points(grid)[..., 2]
    exact = 1.45 - z
    frozen = np.abs(exact) <= 1.5 * h
    out = fast_marching(np.where(frozen, exact, np.sign(exact)), frozen, h)
    # First-order marching is exact for a grid-aligned plane.
    np.testing.assert_allclose(out, exact, atol=1e-12)
    with pytest.raises(SurfaceGenError):
        fast_marching(exact, np.zeros_like(frozen), h)


def test_fast_marching_sphere_first_order():
    errs = []
    for n in (24, 48):
        h = 4.0 / n
        grid = CartesianGrid.centered(h, 2.0)
        x = _all_points(grid)
        exact = 1.0 - np.linalg.norm(x, axis=-1)
        frozen = np.abs(exact) <= 2 * h
        out = fast_marching(np.where(frozen, exact, np.sign(exact)), frozen, h)
        errs.append(np.max(np.abs(out - exact)))
    assert errs[1] < 0.7 * errs[0]
    assert errs[1] < 0.1


# ---------------------------------------------------------------------------
# SES pipeline
# ---------------------------------------------------------------------------


def test_single_atom_ses_is_the_sphere():
    cfg = SesConfig.for_atoms(_one_atom(), 0.6, 41, margin=1.0)
    res = generate_ses(_one_atom(), cfg)
    h = cfg.grid.h
    exact = 1.5 - np.linalg.norm(_all_points(cfg.grid), axis=-1)
    band = np.abs(exact) <= 3 * h
    assert np.max(np.abs(res.field.values[band] - exact[band])) <= 2 * h**2
    assert res.n_cavity == 0
    tube = enumerate_tube(res.field, None, 2 * h)
    area = surface_area(tube)
    assert abs(area / (4 * math.pi * 1.5**2) - 1.0) < 0.02


def test_two_far_atoms_are_two_spheres():
    atoms = AtomSet([[-3.0, 0, 0], [3.0, 0, 0]], [1.0, 1.2], [1, 1])
    # Gap 6 - 2.2 = 3.8 exceeds 2 (r + r_p) for r_p = 0.5.
    cfg = SesConfig.for_atoms(atoms, 0.5, 61, margin=1.0)
    res = generate_ses(atoms, cfg)
    h = cfg.grid.h
    x = _all_points(cfg.grid)
    per = np.maximum(1.0 - np.linalg.norm(x - [-3, 0, 0], axis=-1),
                     1.2 - np.linalg.norm(x - [3, 0, 0], axis=-1))
    band = np.abs(per) <= 3 * h
    assert np.max(np.abs(res.field.values[band] - per[band])) <= 2 * h**2
    # No bridge: every node on the segment between the balls stays outside.
    seg = (np.linalg.norm(x[..., 1:], axis=-1) < h) & (x[..., 0] > -1.5) & (x[..., 0] < 1.3)
    assert np.any(seg) and np.all(res.field.values[seg] < -0.3)


def test_ses_contains_vdw(three_ses):
    grid = three_ses.config.grid
    vdw = vdw_sdf(THREE, _all_points(grid).reshape(-1, 3)).reshape(grid.dims)
    assert np.all(three_ses.field.values[vdw >= 0] >= -1e-12)
    # The probe fills the crevices between the balls.
    assert np.count_nonzero((three_ses.field.values > 0) & (vdw < 0)) > 0


def test_probe_limit():
    atoms = THREE
    n = 64
    grid = SesConfig.for_atoms(atoms, 1.0, n, margin=1.0).grid
    vdw = vdw_sdf(atoms, _all_points(grid).reshape(-1, 3)).reshape(grid.dims) > 0
    mismatch = []
    for rp in (1.0, 0.5, 2.0 * grid.h):
        res = generate_ses(atoms, SesConfig(rp, grid))
        mismatch.append(np.count_nonzero((res.field.values > 0) != vdw))
    assert mismatch[0] > mismatch[1] > mismatch[2]
    assert mismatch[2] < 0.2 * mismatch[0]


def test_ses_eikonal_on_tube(three_ses):
    grid = three_ses.config.grid
    tube = enumerate_tube(three_ses.field, None, 2 * grid.h)
    g = np.linalg.norm(np.gradient(three_ses.field.values, grid.h), axis=0)
    vals = g[tuple(tube.index[tube.good].T)]
    assert np.max(np.abs(vals - 1.0)) <= 10 * grid.h


def test_ses_deterministic(three_ses):
    again = generate_ses(THREE, three_ses.config)
    np.testing.assert_array_equal(again.field.values, three_ses.field.values)


def test_hollow_cluster_cavity_is_filled():
    # Six touching atoms around a central void too small for the probe to
    # leave: the enclosed solvent pocket must become interior.
    c = 2.0 * np.array([[1, 0, 0], [-1, 0, 0], [0, 1, 0], [0, -1, 0], [0, 0, 1], [0, 0, -1]])
    atoms = AtomSet(c, np.full(6, 1.6), np.zeros(6))
    cfg = SesConfig.for_atoms(atoms, 0.3, 65, margin=0.5)
    res = generate_ses(atoms, cfg)
    centre = np.argmin(np.linalg.norm(_all_points(cfg.grid), axis=-1))
    assert res.field.values.ravel()[centre] > 0
