"""Run monitors and empirical inequality checks.

One DiagnosticsRecord is written per macro-step (plus one at the terminal
state). The verify_* helpers post-process a finished history: each fits the
smallest constant that makes the corresponding differential inequality hold
interval by interval, so "pass" means the fitted constant is finite and
stays put under refinement, never a comparison against an assumed value.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

from .errors import ConfigError, StabilityViolation

CSV_COLUMNS = ("t", "l2_energy", "hk_norm", "mu", "theta", "theta_max",
               "psi_hk_norm", "alpha1", "alpha2", "curl_residual",
               "solver_iters")


@dataclass(frozen=True)
class DiagnosticsRecord:
    """State monitors sampled at one macro-step boundary.

    alpha1/alpha2 are the torus harmonic residuals of the projected
    right-hand side (NaN off the torus). The trailing fields are extra
    monitors kept out of the mandated CSV schema: the verified linear-solver
    residual and, when k >= 4, the H^3 norms entering the lower-order
    elliptic estimate.
    """

    t: float
    l2_energy: float
    hk_norm: float
    mu: float
    theta: float
    theta_max: float
    psi_hk_norm: float
    alpha1: float
    alpha2: float
    curl_residual: float
    solver_iters: int
    solver_residual: float = 0.0
    h3_norm: float = float("nan")
    psi_h3_norm: float = float("nan")


def theta(hk_norm, mu, k):
    """((hk_norm + 1)/(1 - mu))^(k(k+1)+2); blows up as mu -> 1."""
    if mu >= 1.0:
        raise StabilityViolation(
            f"theta is undefined for mu = {mu:.6f} >= 1", mu=mu)
    return ((hk_norm + 1.0) / (1.0 - mu)) ** (k * (k + 1) + 2)


def horizon_estimate(hk_norm0, mu0, k, C):
    """Existence-horizon surrogate C/theta0, with C fitted empirically."""
    if not C > 0:
        raise ConfigError(f"horizon constant must be positive, got {C}")
    if mu0 >= 1.0:
        raise StabilityViolation(
            f"horizon is undefined for mu0 = {mu0:.6f} >= 1", mu=mu0)
    return C * ((1.0 - mu0) / (hk_norm0 + 1.0)) ** (k * (k + 1) + 2)


def _intervals(history):
    if len(history) < 2:
        raise ConfigError("need at least 2 records to fit interval constants")
    for a, b in zip(history[:-1], history[1:]):
        dt = b.t - a.t
        if not dt > 0:
            raise ConfigError("record times must be strictly increasing")
        yield a, b, dt


def verify_theta_growth(history):
    """Smallest C with dTheta~/dt <= C Theta~^2 across the history.

    The per-interval ratio uses the geometric mean value Theta~_i Theta~_{i+1},
    which reproduces c exactly on the extremal trajectory 1/(1 - c t).
    """
    if len(history) < 10:
        raise ConfigError(
            f"theta growth fit needs >= 10 records, got {len(history)}")
    C = 0.0
    for a, b, dt in _intervals(history):
        growth = b.theta_max - a.theta_max
        if growth > 0:
            C = max(C, growth / (dt * a.theta_max * b.theta_max))
    return C


def verify_energy_estimate(history, cfg=None):
    """Smallest C with dN/dt <= C (N+1) Psi + C N per interval, where N is
    the H^k norm of the state and Psi the H^k norm of the stream gradient."""
    C = 0.0
    for a, b, dt in _intervals(history):
        growth = (b.hk_norm - a.hk_norm) / dt
        if growth <= 0:
            continue
        den = (a.hk_norm + 1.0) * a.psi_hk_norm + a.hk_norm
        if den == 0.0:
            raise ConfigError(
                "state norm grew from an identically zero record; "
                "no finite constant fits")
        C = max(C, growth / den)
    return C


def mu_lipschitz_constant(history):
    """max |mu_{i+1} - mu_i| / dt; finiteness under refinement is the check."""
    C = 0.0
    for a, b, dt in _intervals(history):
        C = max(C, abs(b.mu - a.mu) / dt)
    return C


def verify_recursive_bound(theta0, c, N):
    """Iterate x_{i+1} = x_i/(1 - c x_i) and check x_i <= x0/(1 - c i x0).

    The closed form is exact for this extremal recursion, so the assert only
    allows rounding slack. Requires theta0 <= 1/(cN) so the denominators
    stay nonnegative through i = N; the sequence stops early if one hits 0.
    """
    if not (theta0 > 0 and N >= 1 and c >= 0):
        raise ConfigError(
            f"need theta0 > 0, c >= 0, N >= 1; got ({theta0}, {c}, {N})")
    if c > 0 and theta0 > 1.0 / (c * N) * (1.0 + 1e-12):
        raise ConfigError(
            f"theta0 = {theta0:.6g} exceeds 1/(cN) = {1.0 / (c * N):.6g}; "
            "the recursion is not controlled that far")
    seq = [theta0]
    for i in range(N):
        den = 1.0 - c * seq[-1]
        if den <= 0.0:
            seq.append(math.inf)
            break
        x = seq[-1] / den
        bound_den = 1.0 - c * (i + 1) * theta0
        if bound_den > 0 and x > (theta0 / bound_den) * (1.0 + 1e-9):
            raise ConfigError(
                f"closed-form bound violated at step {i + 1}: "
                f"{x:.17g} > {theta0 / bound_den:.17g}")
        seq.append(x)
    return seq


def _fmt(x):
    if isinstance(x, int):
        return str(x)
    return "%.17g" % x


def write_diagnostics_csv(history, path):
    """One row per record; mandated column order, 17 significant digits."""
    with open(path, "w") as fh:
        fh.write(",".join(CSV_COLUMNS) + "\n")
        for r in history:
            fh.write(",".join(_fmt(getattr(r, c)) for c in CSV_COLUMNS)
                     + "\n")


def write_solver_stats_csv(history, path):
    with open(path, "w") as fh:
        fh.write("t,iterations,residual\n")
        for r in history:
            fh.write("%s,%d,%s\n"
                     % (_fmt(r.t), r.solver_iters, _fmt(r.solver_residual)))
