from __future__ import annotations

import csv

import numpy as np
import pytest

from mcfd.frontprop import (
    extract_zero_level,
    finite_difference_value_grad,
    ray_directions,
    ray_seeds,
    two_disks_initial,
    write_surface,
)
from mcfd.testbeds import sphere_g


def _sphere_field(R):
    g, grad = sphere_g(R)
    return lambda x: (g(x), grad(x))


def test_sphere_profile_level_set_in_3d():
    out = extract_zero_level(_sphere_field(0.5), ray_seeds([0, 0, 0], 0.3, 200), tol=1e-3)
    assert not out.unresolved
    np.testing.assert_allclose(out.radii(), 1.0, atol=1e-3)


def test_seeds_outside_walk_inward():
    out = extract_zero_level(_sphere_field(0.5), ray_seeds([0, 0, 0], 1.7, 50), tol=1e-3)
    np.testing.assert_allclose(out.radii(), 1.0, atol=1e-3)


def test_linear_root_in_1d():
    def field(x):
        return 2.0 * (x[:, 0] - 0.37), np.full((len(x), 1), 2.0)

    out = extract_zero_level(field, np.array([[-1.0], [2.0]]), tol=1e-6, step=0.05)
    np.testing.assert_allclose(out.points[:, 0], 0.37, atol=1e-6)


def test_many_rays_have_small_radius_spread():
    out = extract_zero_level(_sphere_field(0.5), ray_seeds([0, 0], 0.5, 1024), tol=1e-3)
    assert len(out.points) == 1024
    assert out.radii().std() < 1e-3


def test_finite_difference_wrapper():
    g, _ = sphere_g(0.5)
    out = extract_zero_level(finite_difference_value_grad(g), ray_seeds([0, 0], 0.2, 16), tol=1e-4)
    np.testing.assert_allclose(out.radii(), 1.0, atol=1e-4)


def test_unresolved_seeds_are_reported():
    def field(x):
        # zero set at |x| = 1 but a flat region (zero gradient) for x0 > 5
        v = 1.0 - np.sum(x * x, axis=1)
        gr = -2.0 * x
        gr[x[:, 0] > 5] = 0.0
        return v, gr

    seeds = np.array([[0.5, 0.0], [6.0, 0.0]])
    out = extract_zero_level(field, seeds, tol=1e-3)
    assert out.unresolved == [1]
    assert list(out.seed_index) == [0]


def test_no_sign_change_within_budget():
    def field(x):
        return np.ones(len(x)), np.tile([1.0, 0.0], (len(x), 1))

    out = extract_zero_level(field, np.zeros((3, 2)), tol=1e-2, max_iter=20)
    assert out.unresolved == [0, 1, 2]
    assert out.points.shape == (0, 2)


def test_two_disks_signs():
    g = two_disks_initial()
    assert g(np.array([1.5, 0.0])) == pytest.approx(1.0)
    assert g(np.array([-1.5, 0.0])) == pytest.approx(1.0)
    assert g(np.array([0.0, 0.0])) == pytest.approx(0.5)
    assert g(np.array([0.0, 0.9])) < 0
    assert g(np.array([3.0, 0.0])) < 0
    assert g(np.array([0.0, 0.5])) == pytest.approx(0.0)
    pts = np.random.default_rng(0).uniform(-3, 3, size=(500, 2))
    np.testing.assert_allclose(g(pts), [g(p) for p in pts])


def test_two_disks_is_lipschitz():
    g = two_disks_initial()
    rng = np.random.default_rng(1)
    a, b = rng.uniform(-3, 3, size=(2, 2000, 2))
    assert np.all(np.abs(g(a) - g(b)) <= np.linalg.norm(a - b, axis=1) + 1e-12)


def test_ray_directions_are_unit():
    for d, n in ((1, 2), (2, 12), (3, 100)):
        dirs = ray_directions(d, n)
        assert dirs.shape == (n, d)
        np.testing.assert_allclose(np.linalg.norm(dirs, axis=1), 1.0)
    np.testing.assert_allclose(ray_directions(3, 2000).mean(axis=0), 0.0, atol=1e-2)
    with pytest.raises(ValueError):
        ray_directions(4, 10)


def test_write_surface(tmp_path):
    pts = np.array([[0.1, 0.2], [0.3, -0.4]])
    path = tmp_path / "s.csv"
    write_surface(path, 0.05, pts)
    rows = list(csv.reader(path.open()))
    assert rows[0] == ["t", "x0", "x1"]
    assert [float(v) for v in rows[2]] == [0.05, 0.3, -0.4]
