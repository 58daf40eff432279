"""Volume reconstruction: moment systems, non-negative least squares, VRSPH operators.

For each particle ``i`` the weights ``V_j >= 0`` of its neighbours are chosen
so that kernel-gradient moments ``sum_j V_j x_ji^alpha grad_i W_ij`` hit the
values a continuous integral would produce. Plugging those weights into the
traditional SPH formulas gives second-order gradient and Laplacian
approximations on irregular particles.
"""

from __future__ import annotations

import csv
import enum
import warnings
from dataclasses import dataclass, field

import numpy as np

from . import operators as ops
from ._jit import USE_NUMBA, njit
from .geometry import NeighborTable, ParticleSet, minimum_image
from .kernels import KernelFamily, KernelSpec, cubic_shape_deriv_scalar, cubic_shape_scalar, multi_indices

NNLS_TOL = 1e-12


class Mode(str, enum.Enum):
    FUNCTION = "function"
    GRADIENT = "gradient"
    LAPLACIAN = "laplacian"


class NNLSError(RuntimeError):
    """Iteration limit hit; carries the best feasible iterate found."""

    def __init__(self, message, best, residual, particle=None):
        super().__init__(message)
        self.best = best
        self.residual = residual
        self.particle = particle


class RegularityError(RuntimeError):
    """A reconstructed constraint violation exceeded the hard limit."""


# --------------------------------------------------------------------------
# constraint layout


def constraint_layout(dim: int, mode: Mode):
    """Row descriptors ``(alphas, betas, targets)`` for a moment system.

    ``betas[k] >= 0`` selects the kernel-gradient component; ``-1`` selects
    the kernel value itself (function mode). Rows are grouped by ``|alpha|``
    with the gradient component varying fastest.
    """
    mode = Mode(mode)
    alphas, betas, targets = [], [], []
    if mode is Mode.FUNCTION:
        for alpha in [(0,) * dim] + multi_indices(dim, 1):
            alphas.append(alpha)
            betas.append(-1)
            targets.append(1.0 if sum(alpha) == 0 else 0.0)
    else:
        orders = (0, 1, 2) if mode is Mode.LAPLACIAN else (1, 2)
        for order in orders:
            for alpha in multi_indices(dim, order):
                for beta in range(dim):
                    alphas.append(alpha)
                    betas.append(beta)
                    targets.append(1.0 if order == 1 and alpha[beta] == 1 else 0.0)
    return (np.array(alphas, dtype=np.int64).reshape(len(alphas), dim),
            np.array(betas, dtype=np.int64), np.array(targets))


@dataclass(frozen=True, eq=False)
class MomentSystem:
    """Constraint matrix for one particle: rows are moments, columns neighbours.

    ``matrix``/``target`` are unscaled; ``row_scale`` holds the per-row
    divisors (max absolute entry) used before solving.
    """

    matrix: np.ndarray
    target: np.ndarray
    mode: Mode
    particle: int
    columns: np.ndarray
    row_scale: np.ndarray
    dim: int = 1

    @property
    def scaled_matrix(self):
        return self.matrix / self.row_scale[:, None]

    @property
    def scaled_target(self):
        return self.target / self.row_scale

    def residual(self, weights) -> float:
        return float(np.linalg.norm(self.matrix @ weights - self.target))

    def violations(self, weights, length_scale: float = 1.0) -> np.ndarray:
        """Per-row ``|A V - b|``, made dimensionless with ``length_scale``."""
        alphas, betas, _ = constraint_layout(self.dim, self.mode)
        return np.abs(self.matrix @ weights - self.target) * row_factors(alphas, betas, length_scale)


def row_factors(alphas, betas, length_scale: float = 1.0) -> np.ndarray:
    """Factors that make each moment row dimensionless.

    A gradient row with monomial order ``|a|`` carries units ``L^(|a|-1)``;
    a kernel row carries ``L^|a|``. With ``length_scale=1`` all factors are 1.
    """
    order = np.asarray(alphas).sum(axis=1)
    return float(length_scale) ** ((np.asarray(betas) >= 0).astype(float) - order)


def _columns(i, nbrs, mode):
    cols = nbrs.neighbors(i)
    if Mode(mode) is Mode.FUNCTION:
        cols = np.sort(np.append(cols, i))
    return cols


def assemble_moment_system(i: int, pset: ParticleSet | None, nbrs: NeighborTable,
                           kernel: KernelSpec, mode) -> MomentSystem:
    """Build the moment system of particle ``i``.

    Gradient/Laplacian columns are the neighbours ``Gamma_i``; function mode
    adds ``i`` itself since ``W_ii`` does not vanish.
    """
    mode = Mode(mode)
    if pset is not None and pset.dim != kernel.dim:
        raise ValueError("particle and kernel dimensions differ")
    cols = _columns(i, nbrs, mode)
    if len(nbrs.neighbors(i)) == 0:
        raise ValueError(f"particle {i} has no neighbours within h={nbrs.h}")
    pos = nbrs.points
    xji = minimum_image(pos[cols] - pos[i], nbrs.period)
    r = np.linalg.norm(xji, axis=1)
    w = kernel.w_of_r(r)
    safe = np.where(r > 0, r, 1.0)
    gw = np.where(r[:, None] > 0, (kernel.dw_of_r(r) / safe)[:, None] * -xji, 0.0)
    alphas, betas, targets = constraint_layout(kernel.dim, mode)
    A = np.empty((len(betas), len(cols)))
    for k, (alpha, beta) in enumerate(zip(alphas, betas)):
        mono = np.prod(xji**alpha, axis=1)
        A[k] = mono * (w if beta < 0 else gw[:, beta])
    scale = np.abs(A).max(axis=1)
    scale[scale == 0] = 1.0
    return MomentSystem(A, targets, mode, int(i), cols, scale, kernel.dim)


# --------------------------------------------------------------------------
# Lawson-Hanson NNLS


@njit
def _householder_lstsq(M, b):
    """Least squares for a tall full-rank ``M`` by Householder QR.

    Returns (z, ok); ``ok`` is False when ``R`` is numerically rank deficient.
    """
    m, k = M.shape
    R = M.copy()
    y = b.copy()
    for c in range(min(k, m)):
        norm = 0.0
        for r in range(c, m):
            norm += R[r, c] * R[r, c]
        norm = np.sqrt(norm)
        if norm == 0.0:
            continue
        alpha = -norm if R[c, c] >= 0.0 else norm
        v0 = R[c, c] - alpha
        vnorm2 = v0 * v0 + norm * norm - R[c, c] * R[c, c]
        if vnorm2 <= 0.0:
            continue
        for q in range(c + 1, k):
            dot = v0 * R[c, q]
            for r in range(c + 1, m):
                dot += R[r, c] * R[r, q]
            f = 2.0 * dot / vnorm2
            R[c, q] -= f * v0
            for r in range(c + 1, m):
                R[r, q] -= f * R[r, c]
        dot = v0 * y[c]
        for r in range(c + 1, m):
            dot += R[r, c] * y[r]
        f = 2.0 * dot / vnorm2
        y[c] -= f * v0
        for r in range(c + 1, m):
            y[r] -= f * R[r, c]
        R[c, c] = alpha
    z = np.zeros(k)
    if k > m:
        return z, False
    dmax = 0.0
    for c in range(k):
        dmax = max(dmax, abs(R[c, c]))
    for c in range(k - 1, -1, -1):
        if abs(R[c, c]) <= 1e-13 * dmax:
            return z, False
        acc = y[c]
        for q in range(c + 1, k):
            acc -= R[c, q] * z[q]
        z[c] = acc / R[c, c]
    return z, True


@njit
def _solve_passive(A, b, P):
    m, n = A.shape
    k = 0
    for j in range(n):
        if P[j]:
            k += 1
    sub = np.empty((m, k))
    c = 0
    for j in range(n):
        if P[j]:
            sub[:, c] = A[:, j]
            c += 1
    if not USE_NUMBA:
        return _scatter(np.linalg.lstsq(sub, b)[0], P)
    zs, ok = _householder_lstsq(sub, b)
    if not ok:
        zs = np.linalg.lstsq(sub, b)[0]
    return _scatter(zs, P)


@njit
def _scatter(zs, P):
    z = np.zeros(P.shape[0])
    c = 0
    for j in range(P.shape[0]):
        if P[j]:
            z[j] = zs[c]
            c += 1
    return z


@njit
def _nnls_core(A, b, tol, max_iter, init):
    """Active-set NNLS. Returns (x, status, iterations); status 1 = limit hit.

    ``init`` seeds the passive set (warm start). Ties in the entering
    multiplier go to the lowest column index.
    """
    m, n = A.shape
    x = np.zeros(n)
    P = np.zeros(n, dtype=np.bool_)
    blocked = np.zeros(n, dtype=np.bool_)
    it = 0
    seeded = False
    for j in range(n):
        if init[j]:
            P[j] = True
            seeded = True
    while seeded:
        z = _solve_passive(A, b, P)
        it += 1
        dropped = False
        for j in range(n):
            if P[j] and z[j] <= 0.0:
                P[j] = False
                dropped = True
        if not dropped:
            for j in range(n):
                x[j] = z[j] if P[j] else 0.0
            break
        seeded = False
        for j in range(n):
            if P[j]:
                seeded = True
    while True:
        resid = b - A @ x
        w = A.T @ resid
        jmax = -1
        wmax = tol
        for j in range(n):
            if not P[j] and not blocked[j] and w[j] > wmax:
                wmax = w[j]
                jmax = j
        if jmax < 0:
            return x, 0, it
        P[jmax] = True
        first = True
        while True:
            it += 1
            if it > max_iter:
                return x, 1, it
            z = _solve_passive(A, b, P)
            if first and z[jmax] <= 0.0:
                # degenerate entering column: skip it until x changes
                P[jmax] = False
                blocked[jmax] = True
                break
            first = False
            alpha = np.inf
            kmin = -1
            for j in range(n):
                if P[j] and z[j] <= 0.0:
                    step = x[j] / (x[j] - z[j])
                    if step < alpha:
                        alpha = step
                        kmin = j
            if kmin < 0:
                for j in range(n):
                    x[j] = z[j] if P[j] else 0.0
                blocked[:] = False
                break
            for j in range(n):
                if P[j]:
                    x[j] += alpha * (z[j] - x[j])
            x[kmin] = 0.0
            for j in range(n):
                if P[j] and x[j] <= 0.0:
                    x[j] = 0.0
                    P[j] = False
            blocked[:] = False


def nnls(matrix, target, tolerance: float = NNLS_TOL, max_iterations: int | None = None,
         init=None):
    """Solve ``min ||A V - b||_2`` subject to ``V >= 0``.

    Lawson-Hanson active set method. ``max_iterations`` defaults to ten
    times the column count and counts least-squares subproblem solves.

    Returns
    -------
    weights : ndarray
        Feasible minimiser (exactly non-negative).
    residual : float
        ``||A V - b||_2``.

    Raises
    ------
    NNLSError
        If the iteration limit is reached; ``best`` and ``residual`` hold the
        last feasible iterate.
    """
    A = np.ascontiguousarray(matrix, dtype=float)
    b = np.ascontiguousarray(target, dtype=float).ravel()
    if A.ndim != 2 or A.shape[0] != b.size:
        raise ValueError(f"shape mismatch: A {A.shape}, b {b.shape}")
    if not (np.all(np.isfinite(A)) and np.all(np.isfinite(b))):
        raise ValueError("non-finite entries in NNLS problem")
    if not tolerance > 0:
        raise ValueError("tolerance must be positive")
    n = A.shape[1]
    max_iterations = 10 * max(n, 1) if max_iterations is None else int(max_iterations)
    seed = np.zeros(n, dtype=np.bool_) if init is None else np.asarray(init, dtype=np.bool_)
    x, status, _ = _nnls_core(A, b, float(tolerance), max_iterations, seed)
    x = np.maximum(x, 0.0)
    res = float(np.linalg.norm(A @ x - b))
    if status:
        raise NNLSError(f"NNLS did not converge in {max_iterations} iterations (residual {res:.3e})",
                        x, res)
    return x, res


def kkt_violation(matrix, target, weights) -> float:
    """Largest breach of the NNLS optimality conditions at ``weights``."""
    A = np.asarray(matrix, dtype=float)
    w = A.T @ (np.asarray(target, dtype=float) - A @ weights)
    pos = weights > 0
    worst = np.abs(w[pos]).max() if pos.any() else 0.0
    if (~pos).any():
        worst = max(worst, float(np.max(w[~pos], initial=0.0)))
    return float(max(worst, -float(np.min(weights, initial=0.0))))


# --------------------------------------------------------------------------
# batch reconstruction


@njit
def _reconstruct_rows(pos, indptr, indices, period, h, sigma, alphas, betas, targets,
                      with_self, particles, tol, iter_factor,
                      warm_indptr, warm_indices, warm_values, use_warm, row_factor):
    n, d = pos.shape
    nnz = indices.shape[0]
    nrow = betas.shape[0]
    values = np.zeros(nnz)
    self_vals = np.zeros(n)
    residuals = np.full(n, np.nan)
    violation = np.full(n, np.nan)
    status = np.zeros(n, dtype=np.int64)
    hd = h**d
    for pi in range(particles.shape[0]):
        i = particles[pi]
        s0, s1 = indptr[i], indptr[i + 1]
        k = s1 - s0
        ncol = k + 1 if with_self else k
        A = np.empty((nrow, ncol))
        xji = np.zeros(d)
        for c in range(ncol):
            if c < k:
                j = indices[s0 + c]
                r2 = 0.0
                for q in range(d):
                    dx = pos[j, q] - pos[i, q]
                    if period[q] > 0:
                        dx -= period[q] * np.floor(dx / period[q] + 0.5)
                    xji[q] = dx
                    r2 += dx * dx
                r = np.sqrt(r2)
            else:
                for q in range(d):
                    xji[q] = 0.0
                r = 0.0
            w = sigma / hd * cubic_shape_scalar(r / h)
            g = 0.0
            if r > 0.0:
                g = sigma / (hd * h) * cubic_shape_deriv_scalar(r / h) / r
            for row in range(nrow):
                mono = 1.0
                for q in range(d):
                    for _ in range(alphas[row, q]):
                        mono *= xji[q]
                beta = betas[row]
                if beta < 0:
                    A[row, c] = mono * w
                else:
                    # grad_i W_ij = g * x_ij = -g * x_ji
                    A[row, c] = -mono * g * xji[beta]
        As = np.empty_like(A)
        bs = np.empty(nrow)
        for row in range(nrow):
            sc = 0.0
            for c in range(ncol):
                if abs(A[row, c]) > sc:
                    sc = abs(A[row, c])
            if sc == 0.0:
                sc = 1.0
            for c in range(ncol):
                As[row, c] = A[row, c] / sc
            bs[row] = targets[row] / sc
        nb = np.sqrt(np.sum(bs * bs))
        init = np.zeros(ncol, dtype=np.bool_)
        if use_warm:
            # seed with the previous support, matched by neighbour index
            p, q1 = warm_indptr[i], warm_indptr[i + 1]
            for c in range(k):
                j = indices[s0 + c]
                while p < q1 and warm_indices[p] < j:
                    p += 1
                if p < q1 and warm_indices[p] == j and warm_values[p] > 0.0:
                    init[c] = True
        x, st, _ = _nnls_core(As, bs / nb, tol, iter_factor * ncol, init)
        status[i] = st
        for c in range(ncol):
            v = x[c] * nb
            if v < 0.0:
                v = 0.0
            if c < k:
                values[s0 + c] = v
            else:
                self_vals[i] = v
        res2 = 0.0
        worst = 0.0
        for row in range(nrow):
            acc = -targets[row]
            for c in range(ncol):
                v = values[s0 + c] if c < k else self_vals[i]
                acc += A[row, c] * v
            res2 += acc * acc
            if abs(acc) * row_factor[row] > worst:
                worst = abs(acc) * row_factor[row]
        residuals[i] = np.sqrt(res2)
        violation[i] = worst
    return values, self_vals, residuals, violation, status


def _reconstruct_numpy(pos, indptr, indices, period, h, sigma, alphas, betas, targets,
                       with_self, particles, tol, iter_factor,
                       warm_indptr, warm_indices, warm_values, use_warm, row_factor):
    n, d = pos.shape
    values = np.zeros(len(indices))
    self_vals = np.zeros(n)
    residuals = np.full(n, np.nan)
    violation = np.full(n, np.nan)
    status = np.zeros(n, dtype=np.int64)
    kernel = KernelSpec(d, h)
    gradient_rows = betas >= 0
    for i in particles:
        s = slice(indptr[i], indptr[i + 1])
        cols = indices[s]
        xji = pos[cols] - pos[i]
        for q in range(d):
            if period[q] > 0:
                xji[:, q] -= period[q] * np.floor(xji[:, q] / period[q] + 0.5)
        if with_self:
            xji = np.vstack([xji, np.zeros((1, d))])
        r = np.sqrt(np.einsum("ij,ij->i", xji, xji))
        w = kernel.w_of_r(r)
        g = np.where(r > 0, kernel.dw_of_r(r) / np.where(r > 0, r, 1.0), 0.0)
        mono = np.prod(xji[None, :, :] ** alphas[:, None, :], axis=2)
        kern = np.where(gradient_rows[:, None], -g[None, :] * xji.T[np.maximum(betas, 0)], w[None, :])
        A = mono * kern
        sc = np.abs(A).max(axis=1)
        sc[sc == 0] = 1.0
        bs = targets / sc
        nb = np.linalg.norm(bs)
        init = np.zeros(A.shape[1], dtype=bool)
        if use_warm:
            prev = dict(zip(warm_indices[warm_indptr[i]:warm_indptr[i + 1]],
                            warm_values[warm_indptr[i]:warm_indptr[i + 1]]))
            init[: len(cols)] = [prev.get(j, 0.0) > 0.0 for j in cols]
        x, st, _ = _nnls_core.py_func(np.ascontiguousarray(A / sc[:, None]), bs / nb, tol,
                                      iter_factor * A.shape[1], init)
        status[i] = st
        v = np.maximum(x * nb, 0.0)
        values[s] = v[: len(cols)]
        if with_self:
            self_vals[i] = v[-1]
        res = A @ v - targets
        residuals[i] = np.linalg.norm(res)
        violation[i] = (np.abs(res) * row_factor).max()
    return values, self_vals, residuals, violation, status


@dataclass(frozen=True)
class VolumeWeights:
    """Reconstructed weights of one particle's neighbours."""

    particle: int
    neighbors: np.ndarray
    weights: np.ndarray
    residual: float
    max_violation: float
    mode: Mode
    self_weight: float = 0.0

    def as_dict(self) -> dict:
        out = {int(j): float(v) for j, v in zip(self.neighbors, self.weights)}
        if self.mode is Mode.FUNCTION:
            out[self.particle] = float(self.self_weight)
        return out


@dataclass(frozen=True, eq=False)
class WeightTable:
    """Weights for all particles, stored per pair in neighbour-table order.

    Rows that were not reconstructed have zero weights and NaN residuals.
    """

    mode: Mode
    h: float
    indptr: np.ndarray
    indices: np.ndarray
    values: np.ndarray
    self_values: np.ndarray
    residuals: np.ndarray
    violations: np.ndarray
    reconstructed: np.ndarray = field(repr=False)
    length_scale: float = 1.0

    def __len__(self):
        return len(self.indptr) - 1

    def __getitem__(self, i) -> VolumeWeights:
        s = slice(self.indptr[i], self.indptr[i + 1])
        return VolumeWeights(int(i), self.indices[s], self.values[s], float(self.residuals[i]),
                             float(self.violations[i]), self.mode, float(self.self_values[i]))

    def __iter__(self):
        return (self[i] for i in np.flatnonzero(self.reconstructed))

    def to_csv(self, path):
        """Dump ``i,j,V,residual`` rows (self weights appear with ``j == i``)."""
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["i", "j", "V", "residual"])
            for vw in self:
                for j, v in sorted(vw.as_dict().items()):
                    w.writerow([vw.particle, j, repr(v), repr(vw.residual)])


def reconstruct_volumes(pset: ParticleSet | None, nbrs: NeighborTable, kernel: KernelSpec, mode,
                        particles=None, strict: bool = False, warm_start: WeightTable | None = None,
                        tolerance: float = NNLS_TOL, backend: str | None = None,
                        length_scale: float = 1.0) -> WeightTable:
    """Reconstruct neighbour weights for every particle in ``particles``.

    ``particles`` defaults to the interior particles of ``pset`` (all rows
    when ``pset`` is None). Per-constraint violations above ``h^2`` emit a
    warning; with ``strict=True`` violations above ``10 h^2`` raise
    :class:`RegularityError`. ``warm_start`` seeds each active set from a
    previous table, which pays off when particles move slightly.

    Violations are measured in units where ``length_scale`` is 1 (see
    :func:`row_factors`), so the check compares against ``(h/L)^2``. The
    default suits unit-size domains; dimensional problems should pass a
    characteristic length.
    """
    if not length_scale > 0:
        raise ValueError("length_scale must be positive")
    mode = Mode(mode)
    if kernel.family is not KernelFamily.CUBIC_SPLINE:
        raise NotImplementedError("compiled reconstruction supports the cubic spline only")
    if abs(nbrs.h - kernel.h) > 1e-12 * kernel.h:
        raise ValueError("neighbour table radius does not match kernel h")
    n = len(nbrs)
    if particles is None:
        particles = np.arange(pset.n_interior) if pset is not None else np.arange(n)
    particles = np.asarray(particles, dtype=np.int64)
    empty = particles[nbrs.counts[particles] == 0]
    if empty.size:
        raise ValueError(f"particle {int(empty[0])} has no neighbours within h={kernel.h}")
    alphas, betas, targets = constraint_layout(kernel.dim, mode)
    use_warm = warm_start is not None
    if use_warm:
        wi, wj, wv = warm_start.indptr, warm_start.indices, warm_start.values
    else:
        wi, wj, wv = np.zeros(n + 1, np.int64), np.zeros(0, np.int64), np.zeros(0)
    use_numba = USE_NUMBA if backend is None else backend == "numba"
    impl = _reconstruct_rows if use_numba else _reconstruct_numpy
    values, self_vals, res, viol, status = impl(
        np.ascontiguousarray(nbrs.points), nbrs.indptr, nbrs.indices, nbrs.period, kernel.h,
        kernel.sigma, alphas, betas, targets, mode is Mode.FUNCTION, particles, tolerance, 10,
        wi, wj, wv, use_warm, row_factors(alphas, betas, length_scale))
    bad = np.flatnonzero(status)
    if bad.size:
        i = int(bad[0])
        s = slice(nbrs.indptr[i], nbrs.indptr[i + 1])
        raise NNLSError(f"NNLS iteration limit at particle {i}", values[s], float(res[i]), particle=i)
    done = np.zeros(n, dtype=bool)
    done[particles] = True
    table = WeightTable(mode, kernel.h, nbrs.indptr, nbrs.indices, values, self_vals, res, viol, done,
                        float(length_scale))
    _check_regularity(viol[particles], particles, kernel.h / length_scale, strict)
    return table


def _check_regularity(viol, particles, h, strict):
    h2 = h * h
    if np.any(viol > h2):
        worst = int(particles[np.argmax(viol)])
        msg = (f"{int(np.sum(viol > h2))} particle(s) violate the moment constraints by more "
               f"than (h/L)^2={h2:.3e} (worst: particle {worst}, {viol.max():.3e})")
        if strict and np.any(viol > 10 * h2):
            raise RegularityError(msg)
        warnings.warn(msg, RuntimeWarning, stacklevel=3)


@dataclass
class RegularityReport:
    """Per-particle dimensionless constraint violations compared against ``(h/L)^2``."""

    particles: np.ndarray
    violations: np.ndarray
    h: float
    warn_factor: float = 1.0
    fail_factor: float = 10.0
    length_scale: float = 1.0

    @property
    def threshold(self) -> float:
        return (self.h / self.length_scale) ** 2

    @property
    def warnings(self) -> np.ndarray:
        return self.particles[self.violations > self.warn_factor * self.threshold]

    @property
    def failures(self) -> np.ndarray:
        return self.particles[self.violations > self.fail_factor * self.threshold]

    @property
    def passed(self) -> bool:
        return self.warnings.size == 0

    @property
    def max_violation(self) -> float:
        return float(self.violations.max(initial=0.0))


def regularity_report(weights: WeightTable, pset: ParticleSet | None, nbrs: NeighborTable,
                      kernel: KernelSpec, mode=None, particles=None) -> RegularityReport:
    """Recompute every moment constraint from scratch and report violations."""
    mode = weights.mode if mode is None else Mode(mode)
    if mode is not weights.mode:
        raise ValueError(f"weights were built in {weights.mode.value} mode, not {mode.value}")
    idx = np.flatnonzero(weights.reconstructed) if particles is None else np.asarray(particles)
    viol = np.empty(len(idx))
    for k, i in enumerate(idx):
        system = assemble_moment_system(int(i), pset, nbrs, kernel, mode)
        viol[k] = system.violations(_column_weights(weights, int(i), system.columns),
                                    weights.length_scale).max()
    return RegularityReport(idx, viol, kernel.h, length_scale=weights.length_scale)


def _column_weights(weights, i, columns):
    vw = weights[i]
    lookup = vw.as_dict()
    return np.array([lookup.get(int(j), 0.0) for j in columns])


# --------------------------------------------------------------------------
# VRSPH operators


def _require(weights: WeightTable, allowed, nbrs):
    if weights.mode not in allowed:
        raise ValueError(f"operator needs weights in {[m.value for m in allowed]} mode, "
                         f"got {weights.mode.value}")
    if weights.indices is not nbrs.indices and not np.array_equal(weights.indices, nbrs.indices):
        raise ValueError("weights were built on a different neighbour table")


_GRAD_MODES = (Mode.GRADIENT, Mode.LAPLACIAN)


def vrsph_function(i, field, weights: WeightTable, nbrs, kernel):
    """``sum_j V_j f_j W_ij`` including the self weight; needs function-mode weights."""
    _require(weights, (Mode.FUNCTION,), nbrs)
    g = ops.pair_geometry(nbrs, kernel)
    s = slice(nbrs.indptr[i], nbrs.indptr[i + 1])
    f = np.asarray(field, dtype=float)
    return (ops._seq_sum(weights.values[s] * f[g.cols[s]] * g.w[s])
            + weights.self_values[i] * f[i] * float(kernel.w_of_r(0.0)))


def vrsph_gradient(i, field, weights: WeightTable, nbrs, kernel):
    """Gradient with reconstructed weights (gradient- or Laplacian-mode weights)."""
    _require(weights, _GRAD_MODES, nbrs)
    return ops.sph_gradient(i, field, ops.pair_volumes(weights.values), nbrs, kernel)


def vrsph_laplacian(i, field, weights: WeightTable, nbrs, kernel):
    _require(weights, (Mode.LAPLACIAN,), nbrs)
    return ops.sph_laplacian(i, field, ops.pair_volumes(weights.values), nbrs, kernel)


def vrsph_morris(i, field, coeff, weights: WeightTable, nbrs, kernel):
    _require(weights, (Mode.LAPLACIAN,), nbrs)
    return ops.sph_morris(i, field, coeff, ops.pair_volumes(weights.values), nbrs, kernel)


def vrsph_function_all(field, weights: WeightTable, nbrs, kernel):
    _require(weights, (Mode.FUNCTION,), nbrs)
    g = ops.pair_geometry(nbrs, kernel)
    f = ops._check_field(field, len(nbrs))
    pair = ops._row_sum(weights.values * f[g.cols] * g.w, g.rows, len(nbrs))
    return pair + weights.self_values * f * float(kernel.w_of_r(0.0))


def vrsph_gradient_all(field, weights: WeightTable, nbrs, kernel):
    _require(weights, _GRAD_MODES, nbrs)
    return ops.sph_gradient_all(field, ops.pair_volumes(weights.values), nbrs, kernel)


def vrsph_laplacian_all(field, weights: WeightTable, nbrs, kernel):
    _require(weights, (Mode.LAPLACIAN,), nbrs)
    return ops.sph_laplacian_all(field, ops.pair_volumes(weights.values), nbrs, kernel)


def vrsph_morris_all(field, coeff, weights: WeightTable, nbrs, kernel):
    _require(weights, (Mode.LAPLACIAN,), nbrs)
    return ops.sph_morris_all(field, coeff, ops.pair_volumes(weights.values), nbrs, kernel)
