"""Smoothing operators used to regularize transport coefficients.

On the torus the mollifier is a spectral Gaussian: mode k is multiplied by
exp(-eps^2 |k|^2 / 2). It is self-adjoint, non-expansive, preserves the
mean, and commutes exactly with the spectral derivatives, which is what the
discrete energy bookkeeping relies on.

On bounded domains it is a convolution with a compactly supported bump
(support radius eps) applied after even reflection across the boundary.
The disk variant smooths each ring spectrally in the angle at arc-length
scale eps and convolves radially with parity ghosts across the pole; the
r-weighted mean can drift by O(eps^2 h) there, which is logged rather than
repaired (the exactness requirements all live on the torus).
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np
from scipy import ndimage

from .errors import ConfigError, UnsupportedDomain
from .grid import (Grid, MatrixField2D, ScalarField2D, VectorField2D,
                   gradient, l2_norm, scalar_field)

_KERNELS = ("auto", "spectral_gaussian", "bump")
_EXTENSIONS = ("even", "linear")


@dataclass(frozen=True)
class Mollifier:
    """Smoothing scale and kernel choice.

    ``extension`` picks the boundary ghost rule for the bump convolution:
    "even" mirrors values (natural for fluxes), "linear" point-reflects
    about the last sample so first derivatives carry through the boundary,
    which keeps the Hessian of a smoothed scalar free of reflection spikes.
    The torus path ignores it.
    """

    epsilon: float
    kernel: str = "auto"
    extension: str = "even"

    def __post_init__(self):
        if not (self.epsilon > 0 and np.isfinite(self.epsilon)):
            raise ConfigError(
                f"mollifier scale must be positive, got {self.epsilon}")
        if self.kernel not in _KERNELS:
            raise ConfigError(f"unknown mollifier kernel {self.kernel!r}")
        if self.extension not in _EXTENSIONS:
            raise ConfigError(
                f"unknown boundary extension {self.extension!r}")

    def resolved_kernel(self, grid: Grid) -> str:
        if self.kernel != "auto":
            if self.kernel == "spectral_gaussian" and grid.domain.kind != "torus":
                raise ConfigError(
                    "spectral_gaussian kernel requires a torus domain")
            return self.kernel
        return "spectral_gaussian" if grid.domain.kind == "torus" else "bump"


def _bump_profile(x):
    """exp(-1/(1-x^2)) on |x| < 1, zero outside."""
    out = np.zeros_like(x)
    inside = np.abs(x) < 1.0
    out[inside] = np.exp(-1.0 / (1.0 - x[inside] ** 2))
    return out


def _bump_kernel_2d(eps: float, h: float) -> np.ndarray:
    P = int(math.floor(eps / h))
    if P < 1:
        return np.ones((1, 1))  # under-resolved scale: identity
    off = np.arange(-P, P + 1) * h
    d = np.hypot(off[:, None], off[None, :]) / eps
    K = _bump_profile(d)
    return K / K.sum()


def _bump_kernel_1d(eps: float, h: float) -> np.ndarray:
    P = int(math.floor(eps / h))
    if P < 1:
        return np.ones(1)
    K = _bump_profile(np.arange(-P, P + 1) * h / eps)
    return K / K.sum()


def _smooth_plane(grid: Grid, a: np.ndarray, eps: float,
                  extension: str = "even") -> np.ndarray:
    kind = grid.domain.kind
    if kind == "torus":
        kx = grid._k_full[:, None]
        ky = grid._k_full[None, :]
        mult = np.exp(-0.5 * eps * eps * (kx * kx + ky * ky))
        N = grid.N
        return np.fft.irfft2(mult[:, :N // 2 + 1] * np.fft.rfft2(a), s=a.shape)
    if kind == "square":
        K = _bump_kernel_2d(eps, grid.h)
        if K.size == 1:
            return a.copy()
        if extension == "even":
            return ndimage.convolve(a, K, mode="reflect")
        P = (K.shape[0] - 1) // 2
        padded = np.pad(a, P, mode="reflect", reflect_type="odd")
        return ndimage.convolve(padded, K, mode="constant")[P:-P, P:-P]
    # disk: angular spectral damping per ring, then radial bump convolution
    N = grid.N
    m = np.arange(N // 2 + 1, dtype=float)
    damp = np.exp(-0.5 * (eps * m[None, :] * grid._inv_r) ** 2)
    out = np.fft.irfft(damp * np.fft.rfft(a, axis=1), n=N, axis=1)
    K = _bump_kernel_1d(eps, grid.hr)
    P = (K.size - 1) // 2
    if P == 0:
        # the damping profile varies too fast in r near the center for the
        # innermost rings to stay differentiable; refit them
        return grid.pole_refit(out)
    padded = np.empty((N + 2 * P, N))
    padded[P:P + N] = out
    half = N // 2
    for t in range(P):
        padded[P - 1 - t] = np.roll(out[min(t, N - 1)], half)  # across the pole
        if extension == "even":
            padded[P + N + t] = out[max(N - 1 - t, 0)]
        else:
            padded[P + N + t] = 2.0 * out[N - 1] - out[max(N - 2 - t, 0)]
    sm = np.zeros_like(out)
    for s, w in enumerate(K):
        sm += w * padded[s:s + N]
    return grid.pole_refit(sm)


def mollify(field, m: Mollifier):
    """Apply the mollifier componentwise; returns a field of the same rank."""
    grid = field.grid
    m.resolved_kernel(grid)  # validates kernel/domain pairing
    eps, ext = m.epsilon, m.extension
    v = field.values
    if isinstance(field, ScalarField2D):
        return ScalarField2D(grid, _smooth_plane(grid, v, eps, ext))
    if isinstance(field, VectorField2D):
        out = np.stack([_smooth_plane(grid, v[:, :, i], eps, ext)
                        for i in range(2)], axis=-1)
        return VectorField2D(grid, out)
    if isinstance(field, MatrixField2D):
        out = np.empty_like(v)
        for i in range(2):
            for j in range(2):
                out[:, :, i, j] = _smooth_plane(grid, v[:, :, i, j], eps, ext)
        return MatrixField2D(grid, out)
    raise ConfigError(f"cannot mollify object of type {type(field).__name__}")


def mollify_commutator_check(f: ScalarField2D, m: Mollifier) -> float:
    """|| grad(mollify f) - mollify(grad f) ||_{L^2}; exact commutation is a
    torus-only property of the spectral pair."""
    if f.grid.domain.kind != "torus":
        raise UnsupportedDomain(
            "derivative/mollifier commutation is only exact on the torus")
    a = gradient(mollify(f, m))
    b = mollify(gradient(f), m)
    diff = a.values - b.values
    return math.sqrt(float(np.sum(f.grid.weights * np.sum(diff ** 2, axis=-1))))
