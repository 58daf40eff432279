"""Traditional SPH particle approximations and the finite particle method.

Every operator comes in two flavours: a per-particle function taking the
particle index first (``sph_gradient(i, ...)``) and a batch function over all
particles (``sph_gradient_all(...)``). Both sum neighbour contributions
sequentially in ascending neighbour order, so they agree bit for bit.

``vols`` may be a per-particle array (length N, traditional ``v_j``) or a
per-pair array aligned with ``nbrs.indices`` (reconstructed ``V_j`` that
depend on the evaluation particle).
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .geometry import NeighborTable
from .kernels import KernelSpec, multi_indices

COND_LIMIT = 1e12


class SingularMomentMatrix(np.linalg.LinAlgError):
    """FPM moment matrix is singular or too ill-conditioned at a particle."""

    def __init__(self, particle: int, cond: float):
        super().__init__(f"particle {particle}: FPM moment matrix condition number {cond:.3e} "
                         f"exceeds {COND_LIMIT:.0e}")
        self.particle = particle
        self.cond = cond


@dataclass(frozen=True, eq=False)
class PairGeometry:
    """Kernel quantities for every stored pair ``(i, j)``, ``j`` in Gamma_i."""

    rows: np.ndarray
    cols: np.ndarray
    xij: np.ndarray      # x_i - x_j
    r: np.ndarray
    w: np.ndarray        # W_ij
    gw: np.ndarray       # grad_i W_ij
    radial: np.ndarray   # x_ij . grad_i W_ij / |x_ij|^2  (<= 0)


def pair_geometry(nbrs: NeighborTable, kernel: KernelSpec) -> PairGeometry:
    """Pair quantities for ``nbrs`` under ``kernel``, cached on the table."""
    if not math.isclose(nbrs.h, kernel.h, rel_tol=1e-12):
        raise ValueError(f"neighbour table radius {nbrs.h} does not match kernel h {kernel.h}")
    cache = nbrs.__dict__.setdefault("_pair_cache", {})
    if kernel in cache:
        return cache[kernel]
    xij = nbrs.displacements()
    r = np.sqrt(np.einsum("ij,ij->i", xij, xij))
    dw = kernel.dw_of_r(r)
    gw = (dw / r)[:, None] * xij
    geom = PairGeometry(nbrs.row_ids(), nbrs.indices, xij, r, kernel.w_of_r(r), gw, dw / r)
    cache[kernel] = geom
    return geom


class PairVolumes(np.ndarray):
    """Marks a volume array as per-pair (aligned with ``nbrs.indices``)."""


def pair_volumes(values) -> PairVolumes:
    return np.asarray(values, dtype=float).view(PairVolumes)


def _pair_volumes(vols, nbrs: NeighborTable):
    n, nnz = len(nbrs), len(nbrs.indices)
    if isinstance(vols, PairVolumes):
        if vols.shape != (nnz,):
            raise ValueError(f"per-pair volumes must have {nnz} entries")
        return vols.view(np.ndarray)
    v = np.asarray(vols, dtype=float)
    if v.shape == (nnz,) and nnz != n:
        return v
    if v.shape == (n,):
        return v[nbrs.indices]
    raise ValueError(f"volumes must have length N={n} or one entry per pair ({nnz})")


def _row_sum(terms, rows, n):
    """Sequential per-row sums of ``terms`` (scalar or (nnz, k))."""
    if terms.ndim == 1:
        return np.bincount(rows, weights=terms, minlength=n)
    return np.stack([np.bincount(rows, weights=terms[:, k], minlength=n)
                     for k in range(terms.shape[1])], axis=1)


def _check_field(field, n):
    f = np.asarray(field, dtype=float)
    if f.shape[0] != n:
        raise ValueError(f"field has {f.shape[0]} entries, expected {n}")
    return f


# --------------------------------------------------------------------------
# batch traditional operators


def sph_function_all(field, vols, nbrs, kernel):
    """``<f_i> = sum_{j in Gamma_i + {i}} v_j f_j W_ij`` for every particle.

    ``vols`` must be per-particle here because the self term uses ``v_i``.
    """
    g = pair_geometry(nbrs, kernel)
    n = len(nbrs)
    f = _check_field(field, n)
    v = np.asarray(vols, dtype=float)
    if v.shape != (n,):
        raise ValueError("sph_function needs one volume per particle")
    w0 = float(kernel.w_of_r(0.0))
    return _row_sum(v[g.cols] * f[g.cols] * g.w, g.rows, n) + v * f * w0


def sph_gradient_all(field, vols, nbrs, kernel):
    """``-sum_j v_j (f_i - f_j) grad_i W_ij``, shape (N, d)."""
    g = pair_geometry(nbrs, kernel)
    n = len(nbrs)
    f = _check_field(field, n)
    fij = f[g.rows] - f[g.cols]
    return -_row_sum((_pair_volumes(vols, nbrs) * fij)[:, None] * g.gw, g.rows, n)


def sph_divergence_all(vector_field, vols, nbrs, kernel):
    """``-sum_j v_j (A_i - A_j) . grad_i W_ij``."""
    g = pair_geometry(nbrs, kernel)
    n = len(nbrs)
    A = _check_field(vector_field, n).reshape(n, -1)
    Aij = A[g.rows] - A[g.cols]
    return -_row_sum(_pair_volumes(vols, nbrs) * np.einsum("ij,ij->i", Aij, g.gw), g.rows, n)


def sph_morris_all(field, coeff, vols, nbrs, kernel):
    """``sum_j v_j (f_i - f_j) (a_i + a_j) x_ij . grad_i W_ij / |x_ij|^2``."""
    g = pair_geometry(nbrs, kernel)
    n = len(nbrs)
    f = _check_field(field, n)
    a = _check_field(coeff, n)
    if np.any(a <= 0):
        raise ValueError("diffusion coefficient must be strictly positive")
    return _morris_sum(f, a[g.rows] + a[g.cols], _pair_volumes(vols, nbrs), g, n)


def sph_laplacian_all(field, vols, nbrs, kernel):
    """``2 sum_j v_j (f_i - f_j) x_ij . grad_i W_ij / |x_ij|^2``."""
    g = pair_geometry(nbrs, kernel)
    n = len(nbrs)
    f = _check_field(field, n)
    return _morris_sum(f, np.full(len(g.rows), 2.0), _pair_volumes(vols, nbrs), g, n)


def _morris_sum(f, coef, pv, g, n):
    fij = f[g.rows] - f[g.cols]
    if f.ndim == 1:
        return _row_sum(pv * fij * coef * g.radial, g.rows, n)
    return _row_sum((pv * coef * g.radial)[:, None] * fij, g.rows, n)


# --------------------------------------------------------------------------
# per-particle traditional operators


def _row_view(i, nbrs):
    if not 0 <= i < len(nbrs):
        raise IndexError(f"particle index {i} out of range")
    return slice(nbrs.indptr[i], nbrs.indptr[i + 1])


def _seq_sum(terms):
    return np.bincount(np.zeros(len(terms), dtype=np.int64), weights=terms, minlength=1)[0]


def sph_function(i, field, vols, nbrs, kernel):
    g = pair_geometry(nbrs, kernel)
    s = _row_view(i, nbrs)
    f = np.asarray(field, dtype=float)
    v = np.asarray(vols, dtype=float)
    j = g.cols[s]
    return _seq_sum(v[j] * f[j] * g.w[s]) + v[i] * f[i] * float(kernel.w_of_r(0.0))


def sph_gradient(i, field, vols, nbrs, kernel):
    g = pair_geometry(nbrs, kernel)
    s = _row_view(i, nbrs)
    f = np.asarray(field, dtype=float)
    pv = _pair_volumes(vols, nbrs)[s]
    terms = (pv * (f[i] - f[g.cols[s]]))[:, None] * g.gw[s]
    return -np.array([_seq_sum(terms[:, k]) for k in range(terms.shape[1])])


def sph_divergence(i, vector_field, vols, nbrs, kernel):
    g = pair_geometry(nbrs, kernel)
    s = _row_view(i, nbrs)
    A = np.asarray(vector_field, dtype=float).reshape(len(nbrs), -1)
    pv = _pair_volumes(vols, nbrs)[s]
    return -_seq_sum(pv * np.einsum("ij,ij->i", A[i] - A[g.cols[s]], g.gw[s]))


def sph_morris(i, field, coeff, vols, nbrs, kernel):
    g = pair_geometry(nbrs, kernel)
    s = _row_view(i, nbrs)
    f = np.asarray(field, dtype=float)
    a = np.asarray(coeff, dtype=float)
    if np.any(a <= 0):
        raise ValueError("diffusion coefficient must be strictly positive")
    j = g.cols[s]
    pv = _pair_volumes(vols, nbrs)[s]
    return _seq_sum(pv * (f[i] - f[j]) * (a[i] + a[j]) * g.radial[s])


def sph_laplacian(i, field, vols, nbrs, kernel):
    g = pair_geometry(nbrs, kernel)
    s = _row_view(i, nbrs)
    f = np.asarray(field, dtype=float)
    pv = _pair_volumes(vols, nbrs)[s]
    return _seq_sum(pv * (f[i] - f[g.cols[s]]) * 2.0 * g.radial[s])


# --------------------------------------------------------------------------
# finite particle method


def _fpm_layout(dim, second_order):
    """Taylor monomials (multi-indices) and their 1/alpha! coefficients."""
    basis = [(0,) * dim] + multi_indices(dim, 1)
    if second_order:
        basis += multi_indices(dim, 2)
    fact = np.array([1.0 / np.prod([math.factorial(a) for a in al]) for al in basis])
    return np.array(basis, dtype=np.int64), fact


def _monomials(x, basis):
    """``x^alpha`` for each row of ``x`` (n, d) and alpha in ``basis``."""
    out = np.ones((len(x), len(basis)))
    for c, alpha in enumerate(basis):
        for k, p in enumerate(alpha):
            if p:
                out[:, c] *= x[:, k] ** p
    return out


def _fpm_pair_rows(g, s, dim, basis, second_order):
    """Weight rows for the pairs in slice ``s``: W, grad W^b, and Laplacian-type rows."""
    xji = -g.xij[s]
    rows = [g.w[s]] + [g.gw[s][:, b] for b in range(dim)]
    if second_order:
        lap_w = -2.0 * g.radial[s]
        r2 = g.r[s] ** 2
        for alpha in multi_indices(dim, 2):
            rows.append(lap_w * _monomials(xji, [alpha])[:, 0] / r2)
    return np.stack(rows, axis=1), _monomials(xji, basis)


def _fpm_solve(i, M, rhs, h, basis):
    # rescale columns by h^|alpha| and rows by their magnitude before the check
    col = h ** basis.sum(axis=1).astype(float)
    Ms = M * col
    rs = np.abs(Ms).max(axis=1)
    rs[rs == 0] = 1.0
    Ms = Ms / rs[:, None]
    cond = np.linalg.cond(Ms) if np.all(np.isfinite(Ms)) else np.inf
    if not cond < COND_LIMIT:
        raise SingularMomentMatrix(i, cond)
    return np.linalg.solve(Ms, rhs / rs) * col


def _fpm(i, field, vols, nbrs, kernel, second_order):
    g = pair_geometry(nbrs, kernel)
    s = _row_view(i, nbrs)
    d = kernel.dim
    f = np.asarray(field, dtype=float)
    v = np.asarray(vols, dtype=float)
    basis, fact = _fpm_layout(d, second_order)
    K, X = _fpm_pair_rows(g, s, d, basis, second_order)
    vj = _pair_volumes(vols, nbrs)[s]
    M = (K * vj[:, None]).T @ (X * fact)
    rhs = (K * vj[:, None]).T @ f[g.cols[s]]
    # self term: only the W row sees x_ii = 0
    w0 = float(kernel.w_of_r(0.0))
    vi = v[i] if v.shape == (len(nbrs),) else 0.0
    M[0, 0] += vi * w0
    rhs[0] += vi * w0 * f[i]
    return _fpm_solve(i, M, rhs, kernel.h, basis)


def fpm_first_order(i, field, vols, nbrs, kernel):
    """FPM estimate of ``(f_i, grad f_i)`` from the (1+d)x(1+d) moment system.

    Raises :class:`SingularMomentMatrix` when the scaled matrix has condition
    number above 1e12.
    """
    sol = _fpm(i, field, vols, nbrs, kernel, False)
    return sol[0], sol[1:]


def fpm_second_order(i, field, vols, nbrs, kernel):
    """FPM estimate of ``(f_i, grad f_i, Hessian_i)``.

    Weight rows are ``W``, ``grad W`` and, for each second-order multi-index
    ``alpha``, ``Lap_i W_ij * x_ji^alpha / |x_ji|^2`` with
    ``Lap_i W_ij = -2 x_ij . grad_i W_ij / |x_ij|^2``. In 1-D this is the
    classic three-row system.
    """
    d = kernel.dim
    sol = _fpm(i, field, vols, nbrs, kernel, True)
    hess = np.zeros((d, d))
    for c, alpha in enumerate(multi_indices(d, 2)):
        ax = [k for k in range(d) for _ in range(alpha[k])]
        hess[ax[0], ax[1]] = hess[ax[1], ax[0]] = sol[1 + d + c]
    return sol[0], sol[1:1 + d], hess


def fpm_all(field, vols, nbrs, kernel, second_order=False, particles=None):
    """Batch FPM over ``particles`` (default all); returns (f, grad[, hessian]).

    Moment matrices are accumulated for all pairs at once and solved with a
    batched dense solve; singular rows raise :class:`SingularMomentMatrix`.
    """
    g = pair_geometry(nbrs, kernel)
    n, d = len(nbrs), kernel.dim
    f = _check_field(field, n)
    v = np.asarray(vols, dtype=float)
    basis, fact = _fpm_layout(d, second_order)
    m = len(basis)
    K, X = _fpm_pair_rows(g, slice(None), d, basis, second_order)
    vj = _pair_volumes(vols, nbrs)
    KV = K * vj[:, None]
    M = np.zeros((n, m, m))
    rhs = np.zeros((n, m))
    for a in range(m):
        rhs[:, a] = np.bincount(g.rows, weights=KV[:, a] * f[g.cols], minlength=n)
        for b in range(m):
            M[:, a, b] = np.bincount(g.rows, weights=KV[:, a] * X[:, b] * fact[b], minlength=n)
    if v.shape == (n,):
        w0 = float(kernel.w_of_r(0.0))
        M[:, 0, 0] += v * w0
        rhs[:, 0] += v * w0 * f
    idx = np.arange(n) if particles is None else np.asarray(particles)
    col = kernel.h ** basis.sum(axis=1).astype(float)
    Ms = M[idx] * col
    rs = np.abs(Ms).max(axis=2)
    rs[rs == 0] = 1.0
    Ms = Ms / rs[:, :, None]
    cond = np.linalg.cond(Ms)
    bad = np.flatnonzero(~(cond < COND_LIMIT))
    if bad.size:
        raise SingularMomentMatrix(int(idx[bad[0]]), float(cond[bad[0]]))
    sol = np.linalg.solve(Ms, (rhs[idx] / rs)[..., None])[..., 0] * col
    out_f, out_g = sol[:, 0], sol[:, 1:1 + d]
    if not second_order:
        return out_f, out_g
    hess = np.zeros((len(idx), d, d))
    for c, alpha in enumerate(multi_indices(d, 2)):
        ax = [k for k in range(d) for _ in range(alpha[k])]
        hess[:, ax[0], ax[1]] = hess[:, ax[1], ax[0]] = sol[:, 1 + d + c]
    return out_f, out_g, hess
