"""Discrete 2D domains, sampled fields, and differential operators.

Three geometries share one field API:

* ``torus``  -- uniform periodic grid on [0, extent)^2, spectral derivatives
  (FFT); centered second-order differences are available behind
  ``method="fd"`` for convergence studies.
* ``square`` -- cell-centered uniform grid on [0, extent]^2 (nodes at
  (i + 1/2) h, h = extent/N), centered differences inside and one-sided
  second-order stencils at the boundary.
* ``disk``   -- polar grid, cell-centered in r (first node at h_r/2, so the
  pole carries no node), periodic spectral derivatives in the angle,
  finite differences in r with a parity ghost across the pole.

All fields store Cartesian components; on the disk the polar structure is
only a sampling layout, the operators still return d/dx^1 and d/dx^2.
Fields are immutable value objects: the sample array is write-locked and
every operation allocates a fresh one, so they are safe to share across
worker threads.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field as dc_field
from typing import Callable

import numpy as np

from .errors import ConfigError

TWO_PI = 2.0 * math.pi


def _zero_fn(x, y):
    return np.zeros_like(x)


def _zero_grad(x, y):
    z = np.zeros_like(x)
    return z, z.copy()


@dataclass(eq=False)
class DomainSpec:
    """Geometry plus the conformal factor V and Coriolis potential phi.

    The metric is e^{-2V} (dx^2 + dy^2) and the Coriolis parameter is
    e^{-phi}; both enter the coefficient algebra through their values and
    first derivatives on the grid, supplied here as vectorized callables
    (None means identically zero / flat).
    """

    kind: str                      # "torus" | "square" | "disk"
    extent: float                  # period / side length / radius
    V: Callable | None = None
    grad_V: Callable | None = None
    phi: Callable | None = None
    grad_phi: Callable | None = None
    omega: float | None = None     # rotation rate, spherical preset only
    label: str = ""
    _grids: dict = dc_field(default_factory=dict, repr=False)

    def __post_init__(self):
        if self.kind not in ("torus", "square", "disk"):
            raise ConfigError(f"unknown domain kind {self.kind!r}")
        if not (self.extent > 0 and np.isfinite(self.extent)):
            raise ConfigError(f"domain extent must be positive, got {self.extent}")
        if (self.V is None) != (self.grad_V is None):
            raise ConfigError("V and grad_V must be supplied together")
        if (self.phi is None) != (self.grad_phi is None):
            raise ConfigError("phi and grad_phi must be supplied together")

    # -- presets ---------------------------------------------------------

    @classmethod
    def flat_torus(cls, extent: float = TWO_PI) -> "DomainSpec":
        """Flat periodic box: V = phi = 0, unit Coriolis parameter."""
        return cls("torus", extent, label="flat_torus")

    @classmethod
    def torus(cls, extent: float = TWO_PI, V=None, grad_V=None,
              phi=None, grad_phi=None, label="torus") -> "DomainSpec":
        return cls("torus", extent, V, grad_V, phi, grad_phi, label=label)

    @classmethod
    def square(cls, extent: float, V=None, grad_V=None,
               phi=None, grad_phi=None, label="square") -> "DomainSpec":
        return cls("square", extent, V, grad_V, phi, grad_phi, label=label)

    @classmethod
    def disk(cls, radius: float, V=None, grad_V=None,
             phi=None, grad_phi=None, label="disk") -> "DomainSpec":
        return cls("disk", radius, V, grad_V, phi, grad_phi, label=label)

    @classmethod
    def spherical_cap(cls, omega: float, radius: float) -> "DomainSpec":
        """Stereographic cap of the rotating sphere.

        Metric 4/(1+|x|^2)^2 (dx^2+dy^2) and Coriolis parameter
        2*omega*(1-|x|^2)/(1+|x|^2); the latter vanishes at the equator
        |x| = 1, so the chart requires radius < 1.
        """
        if not 0 < radius < 1:
            raise ConfigError(
                f"spherical cap radius must lie in (0, 1), got {radius}")
        if not omega > 0:
            raise ConfigError(f"rotation rate must be positive, got {omega}")

        def V(x, y):
            return np.log((1.0 + x * x + y * y) / 2.0)

        def grad_V(x, y):
            s = 2.0 / (1.0 + x * x + y * y)
            return s * x, s * y

        def phi(x, y):
            r2 = x * x + y * y
            return -np.log(2.0 * omega * (1.0 - r2) / (1.0 + r2))

        def grad_phi(x, y):
            r2 = x * x + y * y
            s = 4.0 / (1.0 - r2 * r2)
            return s * x, s * y

        return cls("disk", radius, V, grad_V, phi, grad_phi,
                   omega=omega, label="spherical_cap")

    # -- grid cache ------------------------------------------------------

    def grid(self, N: int) -> "Grid":
        g = self._grids.get(N)
        if g is None:
            g = Grid(self, N)
            self._grids[N] = g
        return g


class Grid:
    """Discretization of a DomainSpec at resolution N x N.

    Axis 0 runs along x^1 (radius on the disk), axis 1 along x^2 (angle on
    the disk). Exposes the raw derivative kernels dx/dy on plain arrays;
    the field-level operators below wrap them.
    """

    def __init__(self, domain: DomainSpec, N: int):
        if N < 8:
            raise ConfigError(f"resolution must be at least 8, got {N}")
        if domain.kind == "disk" and N % 2 != 0:
            raise ConfigError("disk grids need even N for the pole parity shift")
        self.domain = domain
        self.N = int(N)
        kind = domain.kind

        if kind == "disk":
            R = domain.extent
            self.hr = R / N
            self.ht = TWO_PI / N
            r = (np.arange(N) + 0.5) * self.hr
            t = np.arange(N) * self.ht
            self.r = r
            self.theta = t
            self.X = r[:, None] * np.cos(t)[None, :]
            self.Y = r[:, None] * np.sin(t)[None, :]
            self.weights = np.broadcast_to(
                (r * self.hr * self.ht)[:, None], (N, N)).copy()
            self._cos_t = np.cos(t)[None, :]
            self._sin_t = np.sin(t)[None, :]
            self._inv_r = (1.0 / r)[:, None]
            self.h = self.hr  # radial spacing doubles as the reference scale
            # Azimuthal band limit near the pole. A smooth field's mode m
            # scales like r^m, so row i carries no real content above
            # m ~ pi*(i+1/2); the 1/r in the Cartesian frame amplifies
            # anything parked there by m/r_i per derivative pass, which
            # compounds exponentially when derivatives are nested. Rows
            # whose cutoff reaches the Nyquist mode need no mask.
            m_all = np.arange(N // 2 + 1)
            cuts = np.maximum(4.0, np.pi * (np.arange(N) + 0.5))
            rows = int(np.searchsorted(cuts, N // 2))
            self._taper_rows = rows
            self._taper_mask = (
                m_all[None, :] <= cuts[:rows, None]).astype(float)
        else:
            L = domain.extent
            self.h = L / N
            if kind == "torus":
                x = np.arange(N) * self.h
            else:
                x = (np.arange(N) + 0.5) * self.h
            self.x = x
            self.X, self.Y = np.meshgrid(x, x, indexing="ij")
            self.weights = np.full((N, N), self.h * self.h)
            if kind == "torus":
                k = TWO_PI * np.fft.fftfreq(N, d=self.h)
                kr = TWO_PI * np.fft.rfftfreq(N, d=self.h)
                dk = k.copy()
                if N % 2 == 0:
                    dk[N // 2] = 0.0  # zero Nyquist in odd derivatives
                dkr = kr.copy()
                if N % 2 == 0:
                    dkr[-1] = 0.0
                self._k_full = k
                self._ikx = (1j * dk)[:, None]
                self._iky = (1j * dkr)[None, :]
        self.weights.setflags(write=False)

        # coefficient arrays from the domain callables
        X, Y = self.X, self.Y
        if domain.V is None:
            self.V_arr = np.zeros((N, N))
            self.dV = (np.zeros((N, N)), np.zeros((N, N)))
        else:
            self.V_arr = np.asarray(domain.V(X, Y), dtype=float) + np.zeros((N, N))
            gx, gy = domain.grad_V(X, Y)
            self.dV = (np.asarray(gx, float) + np.zeros((N, N)),
                       np.asarray(gy, float) + np.zeros((N, N)))
        if domain.phi is None:
            self.phi_arr = np.zeros((N, N))
            self.dphi = (np.zeros((N, N)), np.zeros((N, N)))
        else:
            self.phi_arr = np.asarray(domain.phi(X, Y), dtype=float) + np.zeros((N, N))
            gx, gy = domain.grad_phi(X, Y)
            self.dphi = (np.asarray(gx, float) + np.zeros((N, N)),
                         np.asarray(gy, float) + np.zeros((N, N)))
        coriolis = np.exp(-self.phi_arr)
        if not np.all(np.isfinite(coriolis)) or np.any(coriolis <= 0):
            raise ConfigError(
                "Coriolis parameter e^{-phi} must be finite and positive "
                "on the whole grid")
        self.e2V = np.exp(2.0 * self.V_arr)
        self.em2phi = np.exp(-2.0 * self.phi_arr)
        self.emphi = coriolis
        self.e2V2phi = np.exp(2.0 * (self.V_arr + self.phi_arr))
        self.area = float(np.sum(self.weights))
        self._sobolev_weights = {}

    # -- raw derivative kernels -----------------------------------------

    def dx(self, a: np.ndarray, method: str | None = None) -> np.ndarray:
        kind = self.domain.kind
        if kind == "torus":
            if method in (None, "spectral"):
                return np.fft.irfft2(self._ikx * np.fft.rfft2(a), s=a.shape)
            return (np.roll(a, -1, axis=0) - np.roll(a, 1, axis=0)) / (2 * self.h)
        if kind == "square":
            return _fd_axis0(a, self.h)
        dr = self._disk_dr(a)
        dt = self._disk_dtheta(a)
        return self._pole_taper(self._cos_t * dr - self._sin_t * self._inv_r * dt)

    def dy(self, a: np.ndarray, method: str | None = None) -> np.ndarray:
        kind = self.domain.kind
        if kind == "torus":
            if method in (None, "spectral"):
                return np.fft.irfft2(self._iky * np.fft.rfft2(a), s=a.shape)
            return (np.roll(a, -1, axis=1) - np.roll(a, 1, axis=1)) / (2 * self.h)
        if kind == "square":
            return _fd_axis0(a.T, self.h).T
        dr = self._disk_dr(a)
        dt = self._disk_dtheta(a)
        return self._pole_taper(self._sin_t * dr + self._cos_t * self._inv_r * dt)

    def _pole_taper(self, d: np.ndarray) -> np.ndarray:
        # hard cutoff, so the taper is a projection and nested derivatives
        # see an already-clean slab instead of re-amplifying residue
        k = self._taper_rows
        if k:
            F = np.fft.rfft(d[:k], axis=1)
            F *= self._taper_mask
            d[:k] = np.fft.irfft(F, n=self.N, axis=1)
        return d

    def pole_refit(self, a: np.ndarray, rows: int = 3,
                   src: int = 6, mmax: int = 8) -> np.ndarray:
        """Replace the innermost radial rings by the smooth continuation
        r^m (c0 + c1 r^2) of each azimuthal mode, fitted just outside.

        Discrete solves deposit O(h^2) ring defects at the coordinate
        center; they are invisible to low-order norms but their nested
        derivatives grow without bound, so solver outputs that will be
        differentiated pass through here first. Disk grids only.
        """
        if self.domain.kind != "disk":
            raise ConfigError("pole_refit applies to disk grids only")
        n = self.N
        src = max(2, min(src, n - rows))
        mmax = min(mmax, n // 2)
        F = np.fft.rfft(a, axis=1)
        r = self.r
        i0, i1 = rows, rows + src
        for m in range(mmax + 1):
            b1 = r[i0:i1] ** m
            b2 = r[i0:i1] ** (m + 2)
            s1, s2 = b1.max(), b2.max()
            design = np.stack([b1 / s1, b2 / s2], axis=1)
            coef, *_ = np.linalg.lstsq(design, F[i0:i1, m], rcond=None)
            F[:rows, m] = (coef[0] * r[:rows] ** m / s1
                           + coef[1] * r[:rows] ** (m + 2) / s2)
        out = a.copy()
        out[:rows] = np.fft.irfft(F[:rows], n=n, axis=1)
        return out

    def _disk_dr(self, a: np.ndarray) -> np.ndarray:
        # uniformly 4th order: nested derivatives amplify stencil truncation
        # by roughly 1/h per pass near the pole, so 2nd-order error there
        # leaks into high Sobolev norms while h^4 error stays bounded
        h = self.hr
        d = np.empty_like(a)
        d[2:-2] = (a[:-4] - 8 * a[1:-3] + 8 * a[3:-1] - a[4:]) / (12 * h)
        # across the pole: f(-r, theta) = f(r, theta + pi)
        g0 = np.roll(a[0], self.N // 2)
        g1 = np.roll(a[1], self.N // 2)
        d[0] = (g1 - 8 * g0 + 8 * a[1] - a[2]) / (12 * h)
        d[1] = (g0 - 8 * a[0] + 8 * a[2] - a[3]) / (12 * h)
        d[-2] = (3 * a[-1] + 10 * a[-2] - 18 * a[-3]
                 + 6 * a[-4] - a[-5]) / (12 * h)
        d[-1] = (25 * a[-1] - 48 * a[-2] + 36 * a[-3]
                 - 16 * a[-4] + 3 * a[-5]) / (12 * h)
        return d

    def _disk_dtheta(self, a: np.ndarray) -> np.ndarray:
        N = self.N
        m = np.arange(N // 2 + 1, dtype=float)
        if N % 2 == 0:
            m[-1] = 0.0
        return np.fft.irfft(1j * m[None, :] * np.fft.rfft(a, axis=1),
                            n=N, axis=1)

    # -- quadrature ------------------------------------------------------

    def integrate(self, a: np.ndarray) -> float:
        return float(np.sum(self.weights * a))

    def mean(self, a: np.ndarray) -> float:
        return self.integrate(a) / self.area

    def node_coords(self, i: int, j: int) -> tuple[float, float]:
        return float(self.X[i, j]), float(self.Y[i, j])


def _fd_axis0(a: np.ndarray, h: float) -> np.ndarray:
    """Centered difference along axis 0, one-sided second order at the ends."""
    d = np.empty_like(a)
    d[1:-1] = (a[2:] - a[:-2]) / (2 * h)
    d[0] = (-3 * a[0] + 4 * a[1] - a[2]) / (2 * h)
    d[-1] = (3 * a[-1] - 4 * a[-2] + a[-3]) / (2 * h)
    return d


# ---------------------------------------------------------------------------
# fields


def _lock(values) -> np.ndarray:
    v = np.asarray(values, dtype=float)
    v.setflags(write=False)
    return v


@dataclass(frozen=True)
class ScalarField2D:
    grid: Grid
    values: np.ndarray

    def __post_init__(self):
        N = self.grid.N
        if self.values.shape != (N, N):
            raise ConfigError(
                f"scalar field needs shape {(N, N)}, got {self.values.shape}")
        object.__setattr__(self, "values", _lock(self.values))


@dataclass(frozen=True)
class VectorField2D:
    grid: Grid
    values: np.ndarray  # [..., component]

    def __post_init__(self):
        N = self.grid.N
        if self.values.shape != (N, N, 2):
            raise ConfigError(
                f"vector field needs shape {(N, N, 2)}, got {self.values.shape}")
        object.__setattr__(self, "values", _lock(self.values))


@dataclass(frozen=True)
class MatrixField2D:
    grid: Grid
    values: np.ndarray  # [..., row, col]

    def __post_init__(self):
        N = self.grid.N
        if self.values.shape != (N, N, 2, 2):
            raise ConfigError(
                f"matrix field needs shape {(N, N, 2, 2)}, got {self.values.shape}")
        object.__setattr__(self, "values", _lock(self.values))


Field = ScalarField2D | VectorField2D | MatrixField2D


def scalar_field(grid: Grid, data) -> ScalarField2D:
    """Wrap an array, or sample a callable f(X, Y), as a scalar field."""
    if callable(data):
        data = data(grid.X, grid.Y) + np.zeros((grid.N, grid.N))
    return ScalarField2D(grid, np.array(data, dtype=float))


def vector_field(grid: Grid, data) -> VectorField2D:
    if callable(data):
        vx, vy = data(grid.X, grid.Y)
        data = np.stack([vx + np.zeros_like(grid.X),
                         vy + np.zeros_like(grid.X)], axis=-1)
    return VectorField2D(grid, np.array(data, dtype=float))


def matrix_field(grid: Grid, data) -> MatrixField2D:
    return MatrixField2D(grid, np.array(data, dtype=float))


def _same_grid(*fields):
    g = fields[0].grid
    for f in fields[1:]:
        if f.grid is not g:
            raise ConfigError("fields in a binary operation must share one grid")
    return g


# ---------------------------------------------------------------------------
# differential operators


def gradient(f: ScalarField2D, method: str | None = None) -> VectorField2D:
    g = f.grid
    out = np.stack([g.dx(f.values, method), g.dy(f.values, method)], axis=-1)
    return VectorField2D(g, out)


def jacobian(v: VectorField2D, method: str | None = None) -> MatrixField2D:
    """Pointwise matrix J[i, j] = d v^i / d x^j."""
    g = v.grid
    J = np.empty((g.N, g.N, 2, 2))
    for i in range(2):
        J[:, :, i, 0] = g.dx(v.values[:, :, i], method)
        J[:, :, i, 1] = g.dy(v.values[:, :, i], method)
    return MatrixField2D(g, J)


def hessian(f: ScalarField2D, method: str | None = None) -> MatrixField2D:
    """Symmetrized second-derivative matrix of a scalar.

    The discrete mixed partials commute exactly on the torus and the square
    (the stencils act on different axes); on the disk the polar composition
    leaves an O(h^2) antisymmetric residue, removed here.
    """
    J = jacobian(gradient(f, method), method).values
    return MatrixField2D(f.grid, 0.5 * (J + np.swapaxes(J, -1, -2)))


def divergence(v: VectorField2D, method: str | None = None) -> ScalarField2D:
    g = v.grid
    return ScalarField2D(
        g, g.dx(v.values[:, :, 0], method) + g.dy(v.values[:, :, 1], method))


def divergence_matrix(m: MatrixField2D, method: str | None = None) -> VectorField2D:
    """Column-wise divergence div(M)^j = sum_i d_i M[i, j], so that
    div(A grad f) = Tr(A D^2 f) + div(A) . grad f for symmetric A."""
    g = m.grid
    out = np.empty((g.N, g.N, 2))
    for j in range(2):
        out[:, :, j] = (g.dx(m.values[:, :, 0, j], method)
                        + g.dy(m.values[:, :, 1, j], method))
    return VectorField2D(g, out)


def curl(v: VectorField2D, method: str | None = None) -> ScalarField2D:
    g = v.grid
    return ScalarField2D(
        g, g.dx(v.values[:, :, 1], method) - g.dy(v.values[:, :, 0], method))


def perp(v: VectorField2D) -> VectorField2D:
    """Quarter rotation (v1, v2) -> (-v2, v1)."""
    out = np.empty_like(v.values)
    out[:, :, 0] = -v.values[:, :, 1]
    out[:, :, 1] = v.values[:, :, 0]
    return VectorField2D(v.grid, out)


def cofactor(m: MatrixField2D) -> MatrixField2D:
    """Pointwise cofactor [[a, b], [c, d]] -> [[d, -c], [-b, a]]; linear in
    2D and equal to -J M J for the quarter rotation J."""
    v = m.values
    out = np.empty_like(v)
    out[:, :, 0, 0] = v[:, :, 1, 1]
    out[:, :, 0, 1] = -v[:, :, 1, 0]
    out[:, :, 1, 0] = -v[:, :, 0, 1]
    out[:, :, 1, 1] = v[:, :, 0, 0]
    return MatrixField2D(m.grid, out)


# ---------------------------------------------------------------------------
# inner products and norms


def inner(a: Field, b: Field) -> float:
    """Quadrature inner product; components are summed for vector/matrix
    fields."""
    g = _same_grid(a, b)
    if type(a) is not type(b):
        raise ConfigError("inner product needs fields of the same rank")
    prod = a.values * b.values
    while prod.ndim > 2:
        prod = prod.sum(axis=-1)
    return float(np.sum(g.weights * prod))


def l2_norm(a: Field) -> float:
    return math.sqrt(max(inner(a, a), 0.0))


def _component_list(f: Field):
    if isinstance(f, ScalarField2D):
        return [f.values]
    if isinstance(f, VectorField2D):
        return [f.values[:, :, 0], f.values[:, :, 1]]
    return [f.values[:, :, i, j] for i in range(2) for j in range(2)]


def sobolev_norm(f: Field, k: int) -> float:
    """H^k norm: sqrt of the sum of ||D^alpha f||_{L^2}^2 over all
    multi-indices |alpha| <= k, each distinct alpha counted once.

    Spectral (exact for trigonometric data) on the torus; repeated
    finite differences with cell-area quadrature on bounded domains.
    """
    if k < 0:
        raise ConfigError(f"Sobolev order must be >= 0, got {k}")
    g = f.grid
    comps = _component_list(f)
    if g.domain.kind == "torus":
        W = g._sobolev_weights.get(k)
        if W is None:
            kx = g._k_full[:, None]
            ky = g._k_full[None, :]
            W = np.zeros((g.N, g.N))
            for a in range(k + 1):
                for b in range(k + 1 - a):
                    W = W + kx ** (2 * a) * ky ** (2 * b)
            g._sobolev_weights[k] = W
        total = 0.0
        scale = g.h * g.h / (g.N * g.N)
        for c in comps:
            total += scale * float(np.sum(W * np.abs(np.fft.fft2(c)) ** 2))
        return math.sqrt(total)
    if g.N < 3 * max(k, 1):
        raise ConfigError(
            f"H^{k} norm needs at least {3 * k} nodes per axis, grid has {g.N}")
    total = 0.0
    for c in comps:
        derivs = {(0, 0): c}
        total += float(np.sum(g.weights * c * c))
        for order in range(1, k + 1):
            for a in range(order + 1):
                b = order - a
                if a > 0:
                    d = g.dx(derivs[(a - 1, b)])
                else:
                    d = g.dy(derivs[(a, b - 1)])
                derivs[(a, b)] = d
                total += float(np.sum(g.weights * d * d))
    return math.sqrt(total)
