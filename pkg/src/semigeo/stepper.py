"""Macro-stepped integration of the regularized gradient flow.

Each macro-step freezes the stream potential: the elliptic problem is
assembled and solved once from the mollified state at the step's start, and
the resulting psi is held constant while classical RK4 advances the state
over [0, tau] with right-hand side

    H ieps( e^{2V} (D(ieps gp) + B[ieps gp] + e^{-2phi-2V} I) perp(grad psi)
            + e^{-phi} perp(ieps gp) )

where gp is the evolving pressure gradient, ieps the mollifier and H the
gradient part of the Helmholtz projection. H keeps the state an exact
discrete gradient, so the curl residual is a pure consistency monitor.

The run halts gracefully when the stability eigenvalue of the freshly
assembled coefficients reaches 1 - stability_margin; the history collected
so far is returned with the halt reason.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .coeffs import argmax_location, build_B, build_Q_intro, build_bundle, \
    stability_eigenvalue
from .diagnostics import DiagnosticsRecord, theta
from .elliptic import assemble, solve
from .errors import ConfigError, SolverDiverged, StabilityViolation
from .grid import (DomainSpec, MatrixField2D, ScalarField2D, VectorField2D,
                   curl, gradient, hessian, jacobian, l2_norm, perp,
                   sobolev_norm)
from .hodge import harmonic_residual, project
from .mollify import Mollifier, mollify


@dataclass
class SolverConfig:
    domain: DomainSpec
    N: int
    epsilon: float
    tau: float
    t_final: float
    k: int = 4
    substeps: int | None = None       # None picks from a Lipschitz probe
    stability_margin: float = 0.02
    elliptic_tol: float = 1e-10
    elliptic_max_iter: int = 600
    hodge_tol: float = 1e-10
    hodge_max_iter: int = 600
    snapshot_every: int = 0           # macro-steps between kept states; 0 = none

    def __post_init__(self):
        if not isinstance(self.N, int) or self.N < 8:
            raise ConfigError(f"grid size must be an integer >= 8, got {self.N}")
        if not (isinstance(self.k, int) and self.k >= 1):
            raise ConfigError(f"Sobolev order must be a positive integer, got {self.k}")
        if not (self.epsilon > 0 and np.isfinite(self.epsilon)):
            raise ConfigError(f"epsilon must be positive, got {self.epsilon}")
        if not (self.tau > 0 and np.isfinite(self.tau)):
            raise ConfigError(f"tau must be positive, got {self.tau}")
        if not (self.t_final > 0 and np.isfinite(self.t_final)):
            raise ConfigError(f"t_final must be positive, got {self.t_final}")
        n = self.t_final / self.tau
        if abs(n - round(n)) > 1e-9 * max(1.0, n) or round(n) < 1:
            raise ConfigError(
                f"t_final = {self.t_final} is not an integer multiple of "
                f"tau = {self.tau}; the horizon must split into whole "
                "macro-steps")
        if self.substeps is not None and self.substeps < 1:
            raise ConfigError(f"substeps must be >= 1, got {self.substeps}")
        if not 0.0 <= self.stability_margin < 1.0:
            raise ConfigError(
                f"stability margin must lie in [0, 1), got {self.stability_margin}")

    @property
    def n_steps(self) -> int:
        return int(round(self.t_final / self.tau))

    @property
    def mollifier(self) -> Mollifier:
        return Mollifier(self.epsilon)

    def grid(self):
        return self.domain.grid(self.N)


@dataclass(frozen=True)
class RunState:
    i: int                      # completed macro-steps
    s: float                    # intra-step time, 0 at every step boundary
    grad_p: VectorField2D
    psi: ScalarField2D | None   # frozen potential of the last completed step
    bundle: object
    history: tuple


@dataclass(frozen=True)
class RunResult:
    records: tuple              # DiagnosticsRecord per step boundary
    grad_p: VectorField2D       # state where the run stopped
    status: str                 # "completed" | "stability_halt" | "solver_failure"
    halt_reason: str | None
    field_snapshots: tuple      # (t, VectorField2D) every snapshot_every steps
    config: SolverConfig


def validate_initial(p0: ScalarField2D, cfg: SolverConfig):
    """Gate the raw initial data; returns (grad_p0, mu0).

    Uses the cofactor-free stability form on the unmollified pressure, which
    is the admissibility actually required of the data.
    """
    g = cfg.grid()
    if p0.grid is not g:
        raise ConfigError("initial data lives on a different grid than the config")
    gp = gradient(p0)
    Q = build_Q_intro(gp, hessian(p0)).values
    # FD mixed partials commute only to O(h^2) off the torus
    Qs = MatrixField2D(g, 0.5 * (Q + np.swapaxes(Q, -1, -2)))
    mu0, mu_field = stability_eigenvalue(Qs)
    gate = 1.0 - cfg.stability_margin
    if mu0 >= gate:
        x, y = argmax_location(mu_field)
        raise StabilityViolation(
            f"initial data inadmissible: mu0 = {mu0:.6f} >= {gate:.4f} "
            f"at node ({x:.4f}, {y:.4f})", mu=mu0, location=(x, y))
    return gp, mu0


# On bounded domains the componentwise bump mollifier does not map gradient
# fields to gradient fields (boundary reflection adds a rotational layer that
# also skews the stability matrix), so gradient states are smoothed at the
# potential level instead: recover the potential with the Helmholtz
# projection, smooth it with derivative-preserving boundary ghosts, and take
# the gradient. The result is an exact discrete gradient up to the polar FD
# commutator near the pole, which this tolerance allows for.
_SMOOTHED_CURL_TOL = 0.05


def _potential(grad_p: VectorField2D, cfg: SolverConfig):
    """Zero-mean potential of a gradient state; None on the torus, where the
    componentwise mollifier already preserves gradients exactly."""
    if grad_p.grid.domain.kind == "torus":
        return None
    return project(grad_p, tol=cfg.hodge_tol, max_iter=cfg.hodge_max_iter).q


def _smooth_state(grad_p, q, cfg):
    if grad_p.grid.domain.kind == "torus":
        return mollify(grad_p, cfg.mollifier)
    return gradient(mollify(q, Mollifier(cfg.epsilon, extension="linear")))


def _bracket(P: VectorField2D, psi: ScalarField2D) -> VectorField2D:
    """Transport bracket before mollification and projection."""
    g = P.grid
    M = jacobian(P).values + build_B(P)[0].values
    gperp = perp(gradient(psi)).values
    c = 1.0 / g.e2V2phi
    bx = (M[:, :, 0, 0] + c) * gperp[:, :, 0] + M[:, :, 0, 1] * gperp[:, :, 1]
    by = M[:, :, 1, 0] * gperp[:, :, 0] + (M[:, :, 1, 1] + c) * gperp[:, :, 1]
    Pv = P.values
    out = np.stack([g.e2V * bx - g.emphi * Pv[:, :, 1],
                    g.e2V * by + g.emphi * Pv[:, :, 0]], axis=-1)
    return VectorField2D(g, out)


def _rhs_core(grad_p, q, psi, cfg):
    """(d/ds grad_p, its potential, alpha1, alpha2) for one stage state.

    q must be the potential of grad_p (None on the torus); the returned
    potential lets callers update potentials linearly along with the state.
    Harmonic residuals are NaN off the torus.

    The smoothing and the projection commute exactly on the torus, where the
    output is smooth-then-project as written. Off the torus the commuted
    order is used: project the raw bracket, smooth the potential, return its
    gradient. Smoothing last keeps the update the gradient of a genuinely
    smooth scalar; the other order lets the projector's pole-ring gradient
    artifact into the state, where its high derivatives pile up step by step.
    """
    P = _smooth_state(grad_p, q, cfg)
    X = _bracket(P, psi)
    if grad_p.grid.domain.kind == "torus":
        Xm = mollify(X, cfg.mollifier)
        dec = project(Xm, tol=cfg.hodge_tol, max_iter=cfg.hodge_max_iter)
        a1, a2 = harmonic_residual(Xm, dec)
        return dec.gradient_part, dec.q, a1, a2
    dec = project(X, tol=cfg.hodge_tol, max_iter=cfg.hodge_max_iter)
    qm = mollify(dec.q, Mollifier(cfg.epsilon, extension="linear"))
    return gradient(qm), qm, float("nan"), float("nan")


def rhs(grad_p: VectorField2D, psi: ScalarField2D, cfg: SolverConfig):
    """Frozen-psi right-hand side for the state grad_p."""
    return _rhs_core(grad_p, _potential(grad_p, cfg), psi, cfg)[0]


def _observe(grad_p, t, cfg, prev_theta_max, gate=True):
    """Assemble coefficients, solve for psi, and record the diagnostics.

    Returns (record, solution, rhs_at_state, state_potential); raises
    StabilityViolation when gating and mu has reached 1 - stability_margin.
    """
    q = _potential(grad_p, cfg)
    if grad_p.grid.domain.kind == "torus":
        bundle = build_bundle(grad_p, cfg.mollifier)
    else:
        bundle = build_bundle(_smooth_state(grad_p, q, cfg), None,
                              curl_tol=_SMOOTHED_CURL_TOL)
    gate_val = 1.0 - cfg.stability_margin
    if gate and bundle.mu >= gate_val:
        x, y = argmax_location(bundle.mu_field)
        raise StabilityViolation(
            f"stability eigenvalue mu = {bundle.mu:.6f} reached the gate "
            f"{gate_val:.4f} at t = {t:.6g}, node ({x:.4f}, {y:.4f})",
            mu=bundle.mu, location=(x, y))
    problem = assemble(bundle, tol=cfg.elliptic_tol,
                       max_iter=cfg.elliptic_max_iter)
    sol = solve(problem, bundle.F_rhs)
    rhs0, q_rhs0, a1, a2 = _rhs_core(grad_p, q, sol.psi, cfg)

    hk = sobolev_norm(grad_p, cfg.k)
    th = theta(hk, bundle.mu, cfg.k)
    pnorm = l2_norm(grad_p)
    rec = DiagnosticsRecord(
        t=t,
        l2_energy=0.5 * pnorm ** 2,
        hk_norm=hk,
        mu=bundle.mu,
        theta=th,
        theta_max=max(th, prev_theta_max),
        psi_hk_norm=sobolev_norm(sol.grad_psi, cfg.k),
        alpha1=a1,
        alpha2=a2,
        curl_residual=l2_norm(curl(grad_p)) / pnorm if pnorm > 0 else 0.0,
        solver_iters=sol.iterations,
        solver_residual=sol.residual,
        h3_norm=sobolev_norm(grad_p, 3) if cfg.k >= 4 else float("nan"),
        psi_h3_norm=sobolev_norm(sol.grad_psi, 3) if cfg.k >= 4 else float("nan"),
    )
    return rec, sol, (rhs0, q_rhs0), q


def _auto_substeps(grad_p, psi, rhs0, cfg):
    """max(4, ceil(tau * L)) with L a directional Lipschitz probe of the rhs."""
    g = grad_p.grid
    rnorm = l2_norm(rhs0)
    if rnorm == 0.0:
        return 4
    delta = 1e-3 * (l2_norm(grad_p) + 1.0)
    probe = VectorField2D(g, grad_p.values + (delta / rnorm) * rhs0.values)
    r1 = rhs(probe, psi, cfg)
    lip = l2_norm(VectorField2D(g, r1.values - rhs0.values)) / delta
    return max(4, math.ceil(cfg.tau * lip))


def macro_step(state: RunState, cfg: SolverConfig) -> RunState:
    """Advance one macro-step: solve for psi at s = 0, hold it, RK4 to tau.

    Off the torus every stage needs the potential of its stage state; the
    projection is linear, so potentials combine with the same RK4 weights as
    the states and only the step's initial potential costs a solve.
    """
    g = state.grad_p.grid
    torus = g.domain.kind == "torus"
    t = state.i * cfg.tau
    prev_max = state.history[-1].theta_max if state.history else 0.0
    try:
        rec, sol, (rhs0, q_rhs0), q0 = _observe(state.grad_p, t, cfg, prev_max)
    except StabilityViolation as e:
        e.step = state.i
        raise

    nsub = cfg.substeps or _auto_substeps(state.grad_p, sol.psi, rhs0, cfg)
    dt = cfg.tau / nsub
    y = state.grad_p.values
    qv = None if torus else q0.values

    def stage(yv, qsv, reuse=None):
        if reuse is not None:
            return reuse[0].values, None if torus else reuse[1].values
        f = VectorField2D(g, yv)
        fq = None if torus else ScalarField2D(g, qsv)
        k, qk, _, _ = _rhs_core(f, fq, sol.psi, cfg)
        return k.values, None if torus else qk.values

    def lc(a, ka, w):
        return None if a is None else a + w * ka

    for j in range(nsub):
        k1, qk1 = stage(y, qv, reuse=(rhs0, q_rhs0) if j == 0 else None)
        k2, qk2 = stage(y + 0.5 * dt * k1, lc(qv, qk1, 0.5 * dt))
        k3, qk3 = stage(y + 0.5 * dt * k2, lc(qv, qk2, 0.5 * dt))
        k4, qk4 = stage(y + dt * k3, lc(qv, qk3, dt))
        y = y + (dt / 6.0) * (k1 + 2.0 * k2 + 2.0 * k3 + k4)
        if not torus:
            qv = qv + (dt / 6.0) * (qk1 + 2.0 * qk2 + 2.0 * qk3 + qk4)

    return RunState(i=state.i + 1, s=0.0, grad_p=VectorField2D(g, y),
                    psi=sol.psi, bundle=rec, history=state.history + (rec,))


def run(p0: ScalarField2D, cfg: SolverConfig) -> RunResult:
    """Integrate to the horizon or to a graceful halt.

    Records are written at every macro-step start plus the terminal state,
    so a completed run carries n_steps + 1 of them. Stability and solver
    failures are folded into the returned status with the partial history.
    """
    snaps = []
    try:
        grad_p, _ = validate_initial(p0, cfg)
    except StabilityViolation as e:
        zero = VectorField2D(cfg.grid(), np.zeros((cfg.N, cfg.N, 2)))
        return RunResult((), zero, "stability_halt", str(e), (), cfg)

    state = RunState(i=0, s=0.0, grad_p=grad_p, psi=None, bundle=None,
                     history=())
    if cfg.snapshot_every > 0:
        snaps.append((0.0, grad_p))
    status, halt_reason = "completed", None
    for i in range(cfg.n_steps):
        try:
            state = macro_step(state, cfg)
        except StabilityViolation as e:
            status, halt_reason = "stability_halt", str(e)
            break
        except SolverDiverged as e:
            status, halt_reason = "solver_failure", str(e)
            break
        if cfg.snapshot_every > 0 and state.i % cfg.snapshot_every == 0:
            snaps.append((state.i * cfg.tau, state.grad_p))
    else:
        prev_max = state.history[-1].theta_max if state.history else 0.0
        try:
            rec, _, _, _ = _observe(state.grad_p, cfg.t_final, cfg, prev_max,
                                    gate=False)
            state = RunState(state.i, 0.0, state.grad_p, state.psi,
                             state.bundle, state.history + (rec,))
        except (StabilityViolation, SolverDiverged) as e:
            halt_reason = f"horizon reached; terminal diagnostics failed: {e}"

    return RunResult(records=state.history, grad_p=state.grad_p,
                     status=status, halt_reason=halt_reason,
                     field_snapshots=tuple(snaps), config=cfg)
