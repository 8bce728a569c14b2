"""Helmholtz decomposition X = grad(q) + w and the harmonic-component check.

The gradient-part projector solves Delta q = div(X) with the boundary
condition matching the domain: zero-mean periodic q on the torus, natural
(Neumann) condition grad(q).nu = X.nu on square and disk. On the torus the
solve is spectral and the projector is exactly idempotent and orthogonal in
the grid inner product; the same Nyquist-zeroed derivative multipliers used
everywhere else are used here, so the checkerboard modes join the constants
in the harmonic (solenoidal) component. On bounded domains the Neumann
problem uses the corner-sampled weak form from the elliptic module with
even ghost reflection, so the discrete compatibility condition holds to
machine precision; the mean of the right-hand side is subtracted anyway and
its size reported.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np
from scipy.sparse.linalg import LinearOperator, bicgstab

from .elliptic import _CornerForm, _DiskPrecond, _SquarePrecond
from .errors import ConfigError, SolverDiverged, UnsupportedDomain
from .grid import (DomainSpec, Grid, ScalarField2D, VectorField2D, gradient)


@dataclass(frozen=True)
class HodgeDecomposition:
    gradient_part: VectorField2D
    solenoidal_part: VectorField2D
    q: ScalarField2D
    rhs_mean: float = 0.0   # compatibility correction subtracted (bounded)
    iterations: int = 0
    residual: float = 0.0


def _project_torus(X: VectorField2D) -> HodgeDecomposition:
    g = X.grid
    N = g.N
    Xh1 = np.fft.rfft2(X.values[:, :, 0])
    Xh2 = np.fft.rfft2(X.values[:, :, 1])
    div_h = g._ikx * Xh1 + g._iky * Xh2
    k2 = g._ikx.imag ** 2 + g._iky.imag ** 2  # zeroed multipliers squared
    qh = np.zeros_like(div_h)
    nz = k2 > 0
    qh[nz] = div_h[nz] / (-k2[nz])
    q = np.fft.irfft2(qh, s=(N, N))
    qf = ScalarField2D(g, q)
    gp = gradient(qf)
    w = VectorField2D(g, X.values - gp.values)
    return HodgeDecomposition(gradient_part=gp, solenoidal_part=w, q=qf)


# identity coefficient for the Neumann weak form, cached per grid
_neumann_cache: dict = {}


def _neumann_pieces(g: Grid):
    key = id(g)
    got = _neumann_cache.get(key)
    if got is not None:
        return got
    N = g.N
    eye = np.zeros((N, N, 2, 2))
    eye[:, :, 0, 0] = eye[:, :, 1, 1] = 1.0
    form = _CornerForm(g, eye, sign=+1)
    if g.domain.kind == "square":
        precond = _SquarePrecond(g, 1.0, neumann=True)
    else:
        precond = _DiskPrecond(g, 1.0, neumann=True)
    _neumann_cache[key] = (form, precond)
    return form, precond


def _project_bounded(X: VectorField2D, tol: float,
                     max_iter: int) -> HodgeDecomposition:
    g = X.grid
    N = g.N
    form, precond = _neumann_pieces(g)
    rhs = form.weak_div(X.values)
    rhs_mean = float(g.mean(rhs))
    rhs = rhs - rhs_mean

    bn = float(np.linalg.norm(rhs))
    if bn == 0.0:
        q = np.zeros((N, N))
        iters, res = 0, 0.0
    else:
        def matvec(x):
            u = x.reshape(N, N)
            return (form.apply(u) + g.mean(u)).ravel()

        def psolve(x):
            r = x.reshape(N, N)
            return (precond(r) + g.mean(r)).ravel()

        L = LinearOperator((N * N, N * N), matvec=matvec)
        M = LinearOperator((N * N, N * N), matvec=psolve)
        b = rhs.ravel()
        history = []

        def cb(xk):
            history.append(float(np.linalg.norm(b - matvec(xk))) / bn)

        x, info = bicgstab(L, b, rtol=tol, atol=0.0, maxiter=max_iter,
                           M=M, callback=cb)
        res = float(np.linalg.norm(b - matvec(x))) / bn
        iters = len(history)
        if info != 0 or not np.isfinite(res) or res > 4.0 * tol:
            raise SolverDiverged(
                f"Neumann projection solve failed after {iters} iterations "
                f"(relative residual {res:.3e}, target {tol:.1e})",
                residual=res, iterations=iters)
        q = x.reshape(N, N)
        q = q - g.mean(q)

    if g.domain.kind == "disk":
        q = g.pole_refit(q)
    qf = ScalarField2D(g, q)
    gp = gradient(qf)
    w = VectorField2D(g, X.values - gp.values)
    return HodgeDecomposition(gradient_part=gp, solenoidal_part=w, q=qf,
                              rhs_mean=rhs_mean, iterations=iters,
                              residual=res)


def project(X: VectorField2D, d: DomainSpec | None = None,
            tol: float = 1e-10, max_iter: int = 600) -> HodgeDecomposition:
    """Split X into a gradient part and a divergence-free remainder.

    `d`, when given, must describe the domain X lives on; it exists so call
    sites can state their intent and get a hard error on a mixup.
    """
    g = X.grid
    if d is not None:
        if d.kind != g.domain.kind or d.extent != g.domain.extent:
            raise ConfigError(
                f"domain spec ({d.kind}, extent {d.extent}) does not match "
                f"the field's grid ({g.domain.kind}, extent {g.domain.extent})")
    if X.values.ndim != 3 or X.values.shape[2] != 2:
        raise ConfigError("hodge projection expects a vector field")
    if g.domain.kind == "torus":
        return _project_torus(X)
    return _project_bounded(X, tol, max_iter)


def harmonic_residual(X: VectorField2D, dec: HodgeDecomposition):
    """Mean components (alpha1, alpha2) of the solenoidal part.

    On the flat torus these are the pairings of X with the two harmonic
    unit fields; for right-hand sides of the evolution they vanish, which
    is what makes the projected dynamics stay a pure gradient. Only
    meaningful on the torus.
    """
    g = X.grid
    if g.domain.kind != "torus":
        raise UnsupportedDomain(
            "harmonic residuals are defined for the torus branch only")
    if dec.solenoidal_part.grid is not g:
        raise ConfigError("decomposition belongs to a different grid")
    w = dec.solenoidal_part.values
    return float(g.mean(w[:, :, 0])), float(g.mean(w[:, :, 1]))
