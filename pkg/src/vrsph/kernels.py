"""Smoothing kernels and their gradients.

Only the cubic spline ships. ``KernelSpec`` carries the family name so other
radial kernels can be registered in ``_FAMILIES`` without touching callers.
"""

from __future__ import annotations

import enum
import itertools
import math
from dataclasses import dataclass, field

import numpy as np

from ._jit import njit


class KernelFamily(str, enum.Enum):
    CUBIC_SPLINE = "cubic_spline"


# Normalisation factors sigma_d, indexed by dimension.
_CUBIC_SIGMA = {1: 4.0 / 3.0, 2: 40.0 / (7.0 * math.pi), 3: 8.0 / math.pi}


def cubic_shape(R):
    """Dimensionless cubic spline shape W^(R) (vectorised)."""
    R = np.asarray(R, dtype=float)
    inner = 1.0 - 6.0 * R**2 + 6.0 * R**3
    outer = 2.0 * (1.0 - R) ** 3
    return np.where(R < 0.5, inner, np.where(R < 1.0, outer, 0.0))


def cubic_shape_deriv(R):
    """dW^/dR for the cubic spline (vectorised); zero outside the support."""
    R = np.asarray(R, dtype=float)
    inner = -12.0 * R + 18.0 * R**2
    outer = -6.0 * (1.0 - R) ** 2
    return np.where(R < 0.5, inner, np.where(R < 1.0, outer, 0.0))


@njit
def cubic_shape_scalar(R):
    if R < 0.5:
        return 1.0 - 6.0 * R * R + 6.0 * R * R * R
    if R < 1.0:
        q = 1.0 - R
        return 2.0 * q * q * q
    return 0.0


@njit
def cubic_shape_deriv_scalar(R):
    if R < 0.5:
        return -12.0 * R + 18.0 * R * R
    if R < 1.0:
        q = 1.0 - R
        return -6.0 * q * q
    return 0.0


_FAMILIES = {
    KernelFamily.CUBIC_SPLINE: (cubic_shape, cubic_shape_deriv, _CUBIC_SIGMA),
}


@dataclass(frozen=True)
class KernelSpec:
    """Radial kernel of a given family, dimension and smoothing length ``h``.

    ``h`` is the support radius: ``W`` vanishes for ``|x| >= h``.
    """

    dim: int
    h: float
    family: KernelFamily = KernelFamily.CUBIC_SPLINE
    sigma: float = field(init=False)

    def __post_init__(self):
        fam = KernelFamily(self.family)
        object.__setattr__(self, "family", fam)
        if self.dim not in (1, 2, 3):
            raise ValueError(f"dimension must be 1, 2 or 3, got {self.dim}")
        if not self.h > 0:
            raise ValueError(f"smoothing length must be positive, got {self.h}")
        object.__setattr__(self, "sigma", _FAMILIES[fam][2][self.dim])

    def with_h(self, h: float) -> KernelSpec:
        return KernelSpec(self.dim, h, self.family)

    def shape(self, R):
        return _FAMILIES[self.family][0](R)

    def shape_deriv(self, R):
        return _FAMILIES[self.family][1](R)

    def w_of_r(self, r):
        """Kernel value as a function of distance (vectorised)."""
        return self.sigma / self.h**self.dim * self.shape(np.asarray(r) / self.h)

    def dw_of_r(self, r):
        """Radial derivative dW/dr (vectorised, <= 0 for decaying kernels)."""
        return self.sigma / self.h ** (self.dim + 1) * self.shape_deriv(np.asarray(r) / self.h)


def eval_w(displacement, spec: KernelSpec):
    """Evaluate ``W(x, h)`` for one displacement or an ``(..., d)`` array of them."""
    x = np.asarray(displacement, dtype=float)
    if spec.dim == 1 and x.ndim == 0:
        x = x[None]
    r = np.linalg.norm(x, axis=-1)
    return spec.w_of_r(r)


def grad_w(x_i, x_j, spec: KernelSpec):
    """Gradient of ``W_ij`` with respect to ``x_i``.

    Broadcasts over leading axes. The value at coincident points is zero.
    """
    xij = np.asarray(x_i, dtype=float) - np.asarray(x_j, dtype=float)
    if spec.dim == 1 and xij.ndim == 0:
        xij = xij[None]
    return grad_w_from_displacement(xij, spec)


def grad_w_from_displacement(xij, spec: KernelSpec):
    """``grad_i W_ij`` given ``x_ij = x_i - x_j`` with shape ``(..., d)``."""
    xij = np.asarray(xij, dtype=float)
    r = np.linalg.norm(xij, axis=-1)
    safe = np.where(r > 0.0, r, 1.0)
    scale = np.where(r > 0.0, spec.dw_of_r(r) / safe, 0.0)
    return scale[..., None] * xij


@dataclass
class KernelReport:
    """Outcome of :func:`verify_kernel_properties`."""

    normalization_error: float
    symmetric: bool
    compact: bool
    monotone: bool
    grad_bound_constant: float
    failures: list = field(default_factory=list)

    @property
    def ok(self) -> bool:
        return not self.failures


def _trapezoid_weights(n: int, step: float):
    w = np.full(n, step)
    w[0] = w[-1] = 0.5 * step
    return w


def verify_kernel_properties(spec: KernelSpec, quadrature_resolution: int = 10_000,
                             normalization_tol: float = 1e-6, seed: int = 0) -> KernelReport:
    """Numerically check the kernel conditions the scheme relies on.

    Normalisation uses a tensor-product trapezoid rule over ``[-h, h]^d`` with
    ``quadrature_resolution`` intervals per axis (capped at 2000 for d >= 2,
    4000 points per axis is already ~1.6e7 samples in 2-D).
    """
    d, h = spec.dim, spec.h
    failures = []

    n = quadrature_resolution if d == 1 else min(quadrature_resolution, 2000 if d == 2 else 160)
    axis = np.linspace(-h, h, n + 1)
    wts = _trapezoid_weights(n + 1, 2.0 * h / n)
    if d == 1:
        integral = float(np.sum(wts * spec.w_of_r(np.abs(axis))))
    else:
        integral = 0.0
        # accumulate slab by slab to bound memory
        rest = np.meshgrid(*([axis] * (d - 1)), indexing="ij")
        rest_r2 = sum(c**2 for c in rest)
        rest_w = _trapezoid_weights(n + 1, 2.0 * h / n)
        rest_wt = rest_w
        for _ in range(d - 2):
            rest_wt = np.multiply.outer(rest_wt, rest_w)
        for a, wa in zip(axis, wts):
            vals = spec.w_of_r(np.sqrt(a * a + rest_r2))
            integral += wa * float(np.sum(rest_wt * vals))
    norm_err = abs(integral - 1.0)
    if norm_err > normalization_tol:
        failures.append(f"normalisation: |int W - 1| = {norm_err:.3e}")

    rng = np.random.default_rng(seed)
    samples = rng.uniform(-1.5 * h, 1.5 * h, size=(4096, d))
    w_pos = eval_w(samples, spec)
    w_neg = eval_w(-samples, spec)
    symmetric = bool(np.array_equal(w_pos, w_neg))
    if not symmetric:
        k = int(np.argmax(np.abs(w_pos - w_neg)))
        failures.append(f"symmetry: W(x) != W(-x) at x = {samples[k]}")

    r = np.linalg.norm(samples, axis=1)
    outside = r >= h
    compact = bool(np.all(w_pos[outside] == 0.0)) and spec.w_of_r(h) == 0.0
    if not compact:
        k = int(np.flatnonzero(outside & (w_pos != 0.0))[0])
        failures.append(f"compactness: W = {w_pos[k]} at |x| = {r[k]}")

    R = np.linspace(0.0, 1.2, 1001)
    wh = spec.shape(R)
    steps = np.diff(wh)
    monotone = bool(np.all(steps <= 0.0))
    if not monotone:
        k = int(np.argmax(steps))
        failures.append(f"decay: W^ increases between R = {R[k]} and {R[k + 1]}")

    grads = grad_w_from_displacement(samples, spec)
    sup = float(np.max(np.abs(grads))) if grads.size else 0.0
    grad_const = sup * h ** (d + 1)
    return KernelReport(norm_err, symmetric, compact, monotone, grad_const, failures)


def multi_indices(dim: int, order: int):
    """All multi-indices of total degree ``order`` in ``dim`` variables.

    Ordered as ``itertools.combinations_with_replacement`` of the axes, e.g.
    (2,0), (1,1), (0,2) in 2-D.
    """
    out = []
    for combo in itertools.combinations_with_replacement(range(dim), order):
        alpha = [0] * dim
        for axis in combo:
            alpha[axis] += 1
        out.append(tuple(alpha))
    return out
