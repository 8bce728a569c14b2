"""Grid, field, and operator tests.

Frozen expected values come from analytic integrals: for v = (sin x1, 0) on
the 2pi-periodic box, ||v||_{L^2}^2 = int sin^2 = 2 pi^2 and the H^1 norm
squared doubles it (the only surviving derivative is cos x1), giving
pi*sqrt(2) and 2*pi. Bounded-domain orders are measured by grid doubling.
"""

import math

import numpy as np
import numpy.testing as npt
import pytest

import semigeo as sg
from semigeo.errors import ConfigError

PI = math.pi


def torus_grid(N=64, extent=2 * PI):
    return sg.DomainSpec.flat_torus(extent).grid(N)


def square_grid(N=64, extent=1.0):
    return sg.DomainSpec.square(extent).grid(N)


def disk_grid(N=64, radius=0.8):
    return sg.DomainSpec.disk(radius).grid(N)


# ---------------------------------------------------------------------------
# norms and quadrature


def test_sobolev_norm_frozen_values():
    g = torus_grid(64)
    v = sg.vector_field(g, lambda X, Y: (np.sin(X), 0 * X))
    npt.assert_allclose(sg.sobolev_norm(v, 0), PI * math.sqrt(2), rtol=1e-12)
    npt.assert_allclose(sg.sobolev_norm(v, 1), 2 * PI, rtol=1e-12)


def test_sobolev_norm_h2_frozen_value():
    # cos(x)cos(y): every multi-index |alpha| <= 2 contributes pi^2
    g = torus_grid(64)
    f = sg.scalar_field(g, lambda X, Y: np.cos(X) * np.cos(Y))
    npt.assert_allclose(sg.sobolev_norm(f, 2), PI * math.sqrt(6), rtol=1e-12)


def test_sobolev_norm_square_against_exact_integral():
    # x^2 y^2 on [0,1]^2: sum over |alpha|<=2 of ||D^alpha f||^2 = 889/225;
    # stencils are exact on quadratics, midpoint quadrature is O(h^2)
    g = square_grid(64)
    f = sg.scalar_field(g, lambda X, Y: X * X * Y * Y)
    expect = math.sqrt(889.0 / 225.0)
    npt.assert_allclose(sg.sobolev_norm(f, 2), expect, atol=2e-3)


def test_disk_quadrature_exact_area():
    g = disk_grid(32, radius=0.7)
    npt.assert_allclose(g.area, PI * 0.49, rtol=1e-13)


def test_inner_product_requires_matching_rank_and_grid():
    g = torus_grid(16)
    f = sg.scalar_field(g, lambda X, Y: X * 0 + 1)
    v = sg.vector_field(g, lambda X, Y: (X * 0 + 1, X * 0))
    with pytest.raises(ConfigError):
        sg.inner(f, v)
    g2 = torus_grid(32)
    f2 = sg.scalar_field(g2, lambda X, Y: X * 0 + 1)
    with pytest.raises(ConfigError):
        sg.inner(f, f2)


# ---------------------------------------------------------------------------
# derivative accuracy


def test_torus_spectral_derivatives_exact_on_band_limited():
    g = torus_grid(32)
    f = sg.scalar_field(g, lambda X, Y: np.sin(3 * X) * np.cos(2 * Y) + np.cos(X))
    gr = sg.gradient(f)
    ex = 3 * np.cos(3 * g.X) * np.cos(2 * g.Y) - np.sin(g.X)
    ey = -2 * np.sin(3 * g.X) * np.sin(2 * g.Y)
    npt.assert_allclose(gr.values[:, :, 0], ex, atol=1e-12)
    npt.assert_allclose(gr.values[:, :, 1], ey, atol=1e-12)


def _max_gradient_error(grid, method=None):
    f = sg.scalar_field(grid, lambda X, Y: np.exp(X) * np.cos(Y) + X * Y)
    gr = sg.gradient(f, method=method)
    ex = np.exp(grid.X) * np.cos(grid.Y) + grid.Y
    ey = -np.exp(grid.X) * np.sin(grid.Y) + grid.X
    return max(np.max(np.abs(gr.values[:, :, 0] - ex)),
               np.max(np.abs(gr.values[:, :, 1] - ey)))


@pytest.mark.parametrize("maker", [square_grid, disk_grid])
def test_bounded_gradient_second_order(maker):
    e1 = _max_gradient_error(maker(48))
    e2 = _max_gradient_error(maker(96))
    order = math.log2(e1 / e2)
    assert order > 1.8, f"measured order {order:.2f}"


def test_torus_fd_gradient_second_order():
    # periodic but not band-limited, so the FD error is genuinely O(h^2)
    def err(g):
        f = sg.scalar_field(g, lambda X, Y: np.exp(np.sin(X) + np.cos(Y)))
        gr = sg.gradient(f, method="fd")
        base = np.exp(np.sin(g.X) + np.cos(g.Y))
        e1 = np.max(np.abs(gr.values[:, :, 0] - np.cos(g.X) * base))
        e2 = np.max(np.abs(gr.values[:, :, 1] + np.sin(g.Y) * base))
        return max(e1, e2)

    order = math.log2(err(torus_grid(64)) / err(torus_grid(128)))
    assert order > 1.9, f"measured order {order:.2f}"


def test_disk_derivative_exact_through_pole():
    # f = x is smooth across the pole; the parity ghost must see it
    g = disk_grid(32)
    f = sg.scalar_field(g, lambda X, Y: X)
    gr = sg.gradient(f)
    npt.assert_allclose(gr.values[:, :, 0], 1.0, atol=1e-12)
    npt.assert_allclose(gr.values[:, :, 1], 0.0, atol=1e-12)


# ---------------------------------------------------------------------------
# integration by parts and structure identities


def _rand_band_limited(grid, rng, band=5):
    N = grid.N
    f = np.zeros((N, N))
    for _ in range(6):
        kx, ky = rng.integers(-band, band + 1, size=2)
        amp, ph = rng.normal(), rng.uniform(0, 2 * PI)
        f += amp * np.cos(kx * grid.X + ky * grid.Y + ph)
    return sg.scalar_field(grid, f)


def test_integration_by_parts_torus():
    rng = np.random.default_rng(7)
    g = torus_grid(48)
    for method, tol in (("spectral", 1e-11), ("fd", 1e-11)):
        f = _rand_band_limited(g, rng)
        q = _rand_band_limited(g, rng)
        lhs = sg.inner(sg.scalar_field(g, g.dx(f.values, method)), q)
        rhs = -sg.inner(f, sg.scalar_field(g, g.dx(q.values, method)))
        scale = sg.l2_norm(f) * sg.l2_norm(q) + 1
        assert abs(lhs - rhs) <= tol * scale


def test_curl_of_gradient_vanishes():
    rng = np.random.default_rng(3)
    g = torus_grid(48)
    f = _rand_band_limited(g, rng)
    assert sg.l2_norm(sg.curl(sg.gradient(f))) < 1e-11

    gsq = square_grid(48)
    fs = sg.scalar_field(gsq, lambda X, Y: np.exp(X) * np.sin(2 * Y))
    # axis-separable stencils commute exactly on the square
    assert sg.l2_norm(sg.curl(sg.gradient(fs))) < 1e-11

    gd = disk_grid(48)
    fd = sg.scalar_field(gd, lambda X, Y: np.exp(X) * np.sin(2 * Y))
    c1 = sg.l2_norm(sg.curl(sg.gradient(fd)))
    gd2 = disk_grid(96)
    fd2 = sg.scalar_field(gd2, lambda X, Y: np.exp(X) * np.sin(2 * Y))
    c2 = sg.l2_norm(sg.curl(sg.gradient(fd2)))
    assert c2 < c1 / 3.0  # polar mixed partials commute only at O(h^2)


def test_perp_and_cofactor_identities():
    rng = np.random.default_rng(11)
    g = torus_grid(16)
    v = sg.vector_field(g, rng.normal(size=(16, 16, 2)))
    npt.assert_allclose(sg.perp(sg.perp(v)).values, -v.values, atol=0)

    M = sg.matrix_field(g, rng.normal(size=(16, 16, 2, 2)))
    C = sg.cofactor(M)
    # Cof(M)^T M = det(M) I
    prod = np.einsum("...ji,...jk->...ik", C.values, M.values)
    det = np.linalg.det(M.values)
    npt.assert_allclose(prod[:, :, 0, 0], det, rtol=1e-12, atol=1e-12)
    npt.assert_allclose(prod[:, :, 1, 1], det, rtol=1e-12, atol=1e-12)
    npt.assert_allclose(prod[:, :, 0, 1], 0, atol=1e-12)
    # J Cof(M) = M J with J the quarter rotation
    J = np.array([[0.0, -1.0], [1.0, 0.0]])
    npt.assert_allclose(np.einsum("ij,...jk->...ik", J, C.values),
                        np.einsum("...ij,jk->...ik", M.values, J), atol=1e-12)


def test_divergence_matrix_convention():
    # div(A grad f) = Tr(A D^2 f) + div(A) . grad f, checked spectrally
    rng = np.random.default_rng(5)
    g = torus_grid(64)
    f = _rand_band_limited(g, rng, band=3)
    A = np.empty((64, 64, 2, 2))
    a = _rand_band_limited(g, rng, band=2).values
    b = _rand_band_limited(g, rng, band=2).values
    c = _rand_band_limited(g, rng, band=2).values
    A[:, :, 0, 0], A[:, :, 0, 1] = a, c
    A[:, :, 1, 0], A[:, :, 1, 1] = c, b
    Af = sg.matrix_field(g, A)
    grad = sg.gradient(f)
    w = sg.vector_field(g, np.einsum("...ij,...j->...i", A, grad.values))
    lhs = sg.divergence(w).values
    H = sg.hessian(f).values
    rhs = (np.einsum("...ij,...ij->...", A, H)
           + np.einsum("...j,...j->...", sg.divergence_matrix(Af).values,
                       grad.values))
    npt.assert_allclose(lhs, rhs, atol=1e-9)


# ---------------------------------------------------------------------------
# validation and immutability


def test_field_values_are_write_locked():
    g = torus_grid(16)
    f = sg.scalar_field(g, lambda X, Y: X)
    with pytest.raises(ValueError):
        f.values[0, 0] = 1.0


def test_grid_validation_errors():
    with pytest.raises(ConfigError):
        sg.DomainSpec.flat_torus().grid(4)          # too coarse
    with pytest.raises(ConfigError):
        sg.DomainSpec.disk(1.0).grid(33)            # odd N on the disk
    with pytest.raises(ConfigError):
        sg.DomainSpec.spherical_cap(1.0, 1.2)       # chart leaves the cap
    with pytest.raises(ConfigError):
        sg.DomainSpec.spherical_cap(-1.0, 0.5)
    with pytest.raises(ConfigError):
        sg.DomainSpec("hexagon", 1.0)
    g = torus_grid(16)
    with pytest.raises(ConfigError):
        sg.ScalarField2D(g, np.zeros((8, 8)))
    with pytest.raises(ConfigError):
        sg.sobolev_norm(sg.scalar_field(square_grid(8), lambda X, Y: X), 4)


def test_spherical_cap_coefficients():
    # Coriolis parameter 2*omega*(1-r^2)/(1+r^2) and its square at the origin
    d = sg.DomainSpec.spherical_cap(1.5, 0.8)
    g = d.grid(16)
    r2 = g.X ** 2 + g.Y ** 2
    npt.assert_allclose(g.emphi, 2 * 1.5 * (1 - r2) / (1 + r2), rtol=1e-12)
    npt.assert_allclose(g.e2V, ((1 + r2) / 2) ** 2, rtol=1e-12)
    # gradient callables agree with finite differences of the potentials
    eps = 1e-6
    x0, y0 = 0.3, -0.2
    for fn, gfn in ((d.V, d.grad_V), (d.phi, d.grad_phi)):
        fx = (fn(x0 + eps, y0) - fn(x0 - eps, y0)) / (2 * eps)
        fy = (fn(x0, y0 + eps) - fn(x0, y0 - eps)) / (2 * eps)
        gx, gy = gfn(np.array(x0), np.array(y0))
        npt.assert_allclose([fx, fy], [gx, gy], rtol=1e-8)
