"""Pointwise coefficient algebra for the frozen-coefficient elliptic solve.

Given the (mollified) pressure gradient xi and its Jacobian, this module
assembles

* the first-order coupling matrix  B[xi] = gV (x) xi + xi (x) gV
  - <xi, gV> I + xi (x) gphi  (gV, gphi are the gradients of the conformal
  and Coriolis potentials, (x) the outer product), split into its symmetric
  and antisymmetric parts;
* the stability matrix  Q = e^{2V+2phi} Cof(D xi^T + B^s[xi]), whose
  smallest eigenvalue controls solvability (I + Q must stay positive);
* the elliptic coefficient bundle  A = e^{-2phi}(I + Q), the stream
  potential b = e^{2V} B^as_{12}[xi] whose rotated gradient is the
  first-order term, and the flux data F = -e^{-phi} xi.

The eigenvalue is evaluated on grid nodes via the closed form
(tr - sqrt(tr^2 - 4 det))/2; a brute-force unit-circle oracle cross-checks
it in the tests.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .errors import ConfigError, NumericalError, StabilityViolation
from .grid import (Grid, MatrixField2D, ScalarField2D, VectorField2D,
                   cofactor, curl, jacobian, l2_norm, matrix_field)
from .mollify import Mollifier, mollify

_EYE = np.eye(2)


def _outer(a0, a1, b0, b1, out, scale=1.0):
    out[:, :, 0, 0] += scale * a0 * b0
    out[:, :, 0, 1] += scale * a0 * b1
    out[:, :, 1, 0] += scale * a1 * b0
    out[:, :, 1, 1] += scale * a1 * b1


def build_B(xi: VectorField2D):
    """First-order coupling matrix and its symmetric/antisymmetric split.

    Returns (B, B_sym, B_antisym) with B = B_sym + B_antisym exactly.
    """
    g = xi.grid
    x0, x1 = xi.values[:, :, 0], xi.values[:, :, 1]
    dV0, dV1 = g.dV
    dp0, dp1 = g.dphi
    N = g.N

    Bs = np.zeros((N, N, 2, 2))
    w0, w1 = dV0 + 0.5 * dp0, dV1 + 0.5 * dp1
    _outer(w0, w1, x0, x1, Bs)
    _outer(x0, x1, w0, w1, Bs)
    dot = x0 * dV0 + x1 * dV1
    Bs[:, :, 0, 0] -= dot
    Bs[:, :, 1, 1] -= dot

    Ba = np.zeros((N, N, 2, 2))
    _outer(x0, x1, dp0, dp1, Ba, 0.5)
    _outer(dp0, dp1, x0, x1, Ba, -0.5)

    return (MatrixField2D(g, Bs + Ba), MatrixField2D(g, Bs),
            MatrixField2D(g, Ba))


def build_Q(grad_p: VectorField2D, hess_p: MatrixField2D) -> MatrixField2D:
    """Stability matrix e^{2V+2phi} Cof(hess_p^T + B^s[grad_p])."""
    g = grad_p.grid
    if hess_p.grid is not g:
        raise ConfigError("grad_p and hess_p must share one grid")
    _, Bs, _ = build_B(grad_p)
    M = np.swapaxes(hess_p.values, -1, -2) + Bs.values
    C = cofactor(MatrixField2D(g, M))
    return MatrixField2D(g, g.e2V2phi[:, :, None, None] * C.values)


def build_Q_intro(grad_p: VectorField2D, hess_p: MatrixField2D) -> MatrixField2D:
    """Cofactor-free variant used only to vet initial data; on symmetric
    input it shares the spectrum of build_Q (the 2x2 cofactor is a rotation
    conjugation), which the tests assert."""
    g = grad_p.grid
    if hess_p.grid is not g:
        raise ConfigError("grad_p and hess_p must share one grid")
    _, Bs, _ = build_B(grad_p)
    M = np.swapaxes(hess_p.values, -1, -2) + Bs.values
    return MatrixField2D(g, g.e2V2phi[:, :, None, None] * M)


def stability_eigenvalue(Q: MatrixField2D, sym_tol: float = 1e-10):
    """Largest negative-definiteness defect of the stability matrix.

    Returns (mu, mu_field) with mu_field = -lambda_min(Q) per node and
    mu = max(mu_field); the solvability condition is mu < 1. Q must be
    symmetric up to sym_tol (relative); it is symmetrized before the
    closed-form eigenvalue is taken.
    """
    v = Q.values
    asym = float(np.max(np.abs(v - np.swapaxes(v, -1, -2))))
    scale = float(np.max(np.abs(v))) + 1.0
    if asym > sym_tol * scale:
        raise NumericalError(
            f"stability matrix asymmetry {asym:.3e} exceeds tolerance "
            f"{sym_tol:.1e} (relative to scale {scale:.3e})")
    S = 0.5 * (v + np.swapaxes(v, -1, -2))
    tr = S[:, :, 0, 0] + S[:, :, 1, 1]
    det = S[:, :, 0, 0] * S[:, :, 1, 1] - S[:, :, 0, 1] ** 2
    disc = np.sqrt(np.maximum(tr * tr - 4.0 * det, 0.0))
    lam_min = 0.5 * (tr - disc)
    if not np.all(np.isfinite(lam_min)):
        raise NumericalError("non-finite stability eigenvalue")
    mu_field = ScalarField2D(Q.grid, -lam_min)
    return float(np.max(mu_field.values)), mu_field


def argmax_location(f: ScalarField2D):
    """(x, y) coordinates of the maximizing node."""
    idx = np.unravel_index(int(np.argmax(f.values)), f.values.shape)
    return f.grid.node_coords(*idx)


@dataclass(frozen=True)
class CoeffBundle:
    """Everything the elliptic solve needs, assembled from one gradient state.

    A            symmetric coefficient matrix e^{-2phi}(I + Q)
    b_potential  scalar whose rotated gradient is the first-order term
    F_rhs        flux data; the right-hand side is div(F_rhs)
    mu           stability eigenvalue (solvable while mu < 1)
    mu_field     per-node -lambda_min(Q)
    xi           the (mollified) gradient the bundle was built from
    """

    A: MatrixField2D
    b_potential: ScalarField2D
    F_rhs: VectorField2D
    mu: float
    mu_field: ScalarField2D
    xi: VectorField2D
    asym_residual: float
    curl_residual: float

    @property
    def grid(self) -> Grid:
        return self.A.grid


def build_bundle(grad_p: VectorField2D, m: Mollifier | None = None,
                 curl_tol: float | None = None) -> CoeffBundle:
    """Assemble the frozen elliptic coefficients from a pressure gradient.

    ``m`` smooths the input first (None runs the continuum-limit variant).
    Raises StabilityViolation when mu >= 1, naming the offending node.
    """
    g = grad_p.grid
    # gate the caller's state, not the smoothed copy: boundary-reflected
    # smoothing trades exact closedness for regularity in a boundary layer
    rel_curl = l2_norm(curl(grad_p)) / (l2_norm(grad_p) + 1e-300)
    if curl_tol is None:
        curl_tol = 1e-6 if g.domain.kind == "torus" else 1e-3
    if l2_norm(grad_p) > 1e-12 and rel_curl > curl_tol:
        raise NumericalError(
            f"input is not a gradient field: relative curl {rel_curl:.3e} "
            f"exceeds {curl_tol:.1e}")
    xi = mollify(grad_p, m) if m is not None else grad_p

    Dxi = jacobian(xi)
    Q = build_Q(xi, Dxi)

    # polar mixed partials commute only to O(h^2); drop the antisymmetric
    # residue explicitly (it belongs to the first-order term, carried exactly
    # via b_potential) and keep its size for monitoring
    v = Q.values
    asym = float(np.max(np.abs(v - np.swapaxes(v, -1, -2))))
    rel_asym = asym / (float(np.max(np.abs(v))) + 1.0)
    if rel_asym > 1e-2:
        raise NumericalError(
            f"stability matrix asymmetry {rel_asym:.3e} is beyond any "
            "discretization residue; refusing to symmetrize")
    Qs = MatrixField2D(g, 0.5 * (v + np.swapaxes(v, -1, -2)))
    mu, mu_field = stability_eigenvalue(Qs)
    if mu >= 1.0:
        x, y = argmax_location(mu_field)
        raise StabilityViolation(
            f"stability eigenvalue mu = {mu:.6f} >= 1 at node "
            f"({x:.4f}, {y:.4f}); the elliptic problem is not solvable",
            mu=mu, location=(x, y))

    A = np.empty((g.N, g.N, 2, 2))
    A[:] = Qs.values
    A[:, :, 0, 0] += 1.0
    A[:, :, 1, 1] += 1.0
    A *= g.em2phi[:, :, None, None]

    _, _, Ba = build_B(xi)
    b_pot = ScalarField2D(g, g.e2V * Ba.values[:, :, 0, 1])
    F = VectorField2D(g, -g.emphi[:, :, None] * xi.values)

    return CoeffBundle(MatrixField2D(g, A), b_pot, F, mu, mu_field, xi,
                       asym_residual=rel_asym, curl_residual=rel_curl)
