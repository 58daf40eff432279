"""Variable-coefficient Poisson problems with homogeneous Dirichlet data.

The discrete operator is the Morris form

    L_h U_i = sum_j V_j (U_i - U_j) (a_i + a_j) x_ij . grad_i W_ij / |x_ij|^2

written as ``L_h U_i = sum_j a_ij (U_j - U_i)`` with ``a_ij >= 0``. Boundary
particles carry ``U = 0`` and are eliminated, so ``-L`` restricted to the
interior unknowns is a Z-matrix with positive diagonal.
"""

from __future__ import annotations

import csv
import math
import time
from dataclasses import dataclass, field

import numpy as np
import scipy.sparse as sp
import scipy.sparse.linalg as spla

from . import operators as ops
from ._jit import USE_NUMBA, njit
from .geometry import NeighborTable, ParticleSet, build_neighbor_table, generate_perturbed, generate_uniform
from .kernels import KernelSpec
from .reconstruction import Mode, WeightTable, reconstruct_volumes


class ConvergenceError(RuntimeError):
    """Iterative solver stopped before reaching the tolerance."""

    def __init__(self, message, history):
        super().__init__(message)
        self.history = history


@dataclass(frozen=True, eq=False)
class PoissonProblem:
    """Coefficient ``a`` at every particle and right-hand side ``f``."""

    coefficient: np.ndarray
    rhs: np.ndarray

    def __post_init__(self):
        a = np.asarray(self.coefficient, dtype=float)
        if not np.all(np.isfinite(a)) or np.any(a <= 0):
            raise ValueError("coefficient must be finite and strictly positive")
        object.__setattr__(self, "coefficient", a)
        object.__setattr__(self, "rhs", np.asarray(self.rhs, dtype=float))

    @property
    def a_min(self) -> float:
        return float(self.coefficient.min())


@dataclass(frozen=True, eq=False)
class SparseOperator:
    """``L`` over the interior unknowns (CSR) plus the eliminated boundary couplings.

    ``unknowns[k]`` is the particle index of row/column ``k``.
    ``boundary_coupling[k]`` is the sum of ``a_ij`` over eliminated columns.
    """

    matrix: sp.csr_matrix
    unknowns: np.ndarray
    boundary_coupling: np.ndarray

    @property
    def shape(self):
        return self.matrix.shape

    def apply(self, u):
        return self.matrix @ u


def _pair_volumes_for(weights, nbrs):
    if isinstance(weights, WeightTable):
        if weights.mode is not Mode.LAPLACIAN:
            raise ValueError(f"Poisson assembly needs Laplacian-mode weights, got {weights.mode.value}")
        return weights.values
    return ops._pair_volumes(weights, nbrs)


def assemble_discrete_laplacian(pset: ParticleSet, problem: PoissonProblem, weights,
                                nbrs: NeighborTable, kernel: KernelSpec) -> SparseOperator:
    """Assemble ``L`` for the interior particles of ``pset``.

    ``weights`` is a Laplacian-mode :class:`WeightTable` (VRSPH) or an
    array of traditional per-particle volumes (SPH).
    """
    a = problem.coefficient
    if a.shape != (pset.n_total,):
        raise ValueError("coefficient must be sampled at every particle")
    g = ops.pair_geometry(nbrs, kernel)
    pv = _pair_volumes_for(weights, nbrs)
    aij = -pv * (a[g.rows] + a[g.cols]) * g.radial
    n_in = pset.n_interior
    keep = g.rows < n_in
    rows, cols, vals = g.rows[keep], g.cols[keep], aij[keep]
    diag = -np.bincount(rows, weights=vals, minlength=n_in)
    inner = cols < n_in
    bsum = np.bincount(rows[~inner], weights=vals[~inner], minlength=n_in)
    M = sp.csr_matrix((np.concatenate([vals[inner], diag]),
                       (np.concatenate([rows[inner], np.arange(n_in)]),
                        np.concatenate([cols[inner], np.arange(n_in)]))), shape=(n_in, n_in))
    M.sum_duplicates()
    M.sort_indices()
    return SparseOperator(M, np.arange(n_in), bsum)


@dataclass
class MMatrixReport:
    z_pattern: bool
    positive_diagonal: bool
    violations: list = field(default_factory=list)
    inverse_checked: bool = False
    min_inverse_entry: float = float("nan")

    @property
    def ok(self) -> bool:
        inv_ok = (not self.inverse_checked) or self.min_inverse_entry >= -1e-12
        return self.z_pattern and self.positive_diagonal and inv_ok


def verify_m_matrix(op, small_instance_limit: int = 400, max_report: int = 20) -> MMatrixReport:
    """Check that ``-L`` is a (non-singular) M-matrix.

    The sign pattern is checked always; for at most ``small_instance_limit``
    unknowns the inverse of ``-L`` is formed densely and tested for
    non-negativity. ``op`` may be a :class:`SparseOperator` or any matrix.
    """
    M = op.matrix if isinstance(op, SparseOperator) else sp.csr_matrix(op)
    neg = (-M).tocoo()
    off = neg.row != neg.col
    bad = off & (neg.data > 0)
    violations = [(int(r), int(c), float(v)) for r, c, v in
                  zip(neg.row[bad][:max_report], neg.col[bad][:max_report], neg.data[bad][:max_report])]
    diag = -M.diagonal()
    report = MMatrixReport(not bad.any(), bool(np.all(diag > 0)), violations)
    if not report.positive_diagonal:
        k = int(np.argmin(diag))
        report.violations.append((k, k, float(diag[k])))
    if M.shape[0] <= small_instance_limit:
        inv = np.linalg.solve(-M.toarray(), np.eye(M.shape[0]))
        report.inverse_checked = True
        report.min_inverse_entry = float(inv.min())
        if report.min_inverse_entry < -1e-12:
            r, c = np.unravel_index(np.argmin(inv), inv.shape)
            report.violations.append((int(r), int(c), report.min_inverse_entry))
    return report


# --------------------------------------------------------------------------
# solvers


@njit
def _gs_sweeps(indptr, indices, data, diag, b, x, sweeps):
    n = b.shape[0]
    for _ in range(sweeps):
        for i in range(n):
            acc = b[i]
            for p in range(indptr[i], indptr[i + 1]):
                j = indices[p]
                if j != i:
                    acc -= data[p] * x[j]
            x[i] = acc / diag[i]
    return x


def _gs_sweeps_numpy(M, lower, upper, b, x, sweeps):
    for _ in range(sweeps):
        x = spla.spsolve_triangular(lower, b - upper @ x, lower=True)
    return x


@dataclass
class SolveResult:
    solution: np.ndarray
    iterations: int
    residual: float
    history: list
    method: str


def solve(op, rhs, tolerance: float = 1e-12, max_iterations: int = 10**6,
          method: str = "gauss-seidel", x0=None, check_every: int = 10) -> SolveResult:
    """Solve ``L U = f`` to relative residual ``||f - L U|| / ||f|| <= tolerance``.

    ``method`` is ``"gauss-seidel"`` (default, forward sweeps in row order),
    ``"bicgstab"`` or ``"gmres"`` (ILU-preconditioned Krylov), or ``"direct"``.
    """
    if not tolerance > 0:
        raise ValueError("tolerance must be positive")
    M = op.matrix if isinstance(op, SparseOperator) else sp.csr_matrix(op)
    M = sp.csr_matrix(M)
    b = np.asarray(rhs, dtype=float)
    bnorm = float(np.linalg.norm(b))
    if bnorm == 0.0:
        return SolveResult(np.zeros_like(b), 0, 0.0, [0.0], method)
    x = np.zeros_like(b) if x0 is None else np.array(x0, dtype=float)
    history = []

    def rel(xv):
        return float(np.linalg.norm(b - M @ xv)) / bnorm

    if method == "direct":
        x = spla.spsolve(sp.csc_matrix(M), b)
        r = rel(x)
        return SolveResult(x, 1, r, [r], method)
    if method == "gauss-seidel":
        diag = M.diagonal()
        if np.any(diag == 0):
            raise ValueError("zero diagonal entry; Gauss-Seidel undefined")
        if USE_NUMBA:
            def sweep(xv, k):
                return _gs_sweeps(M.indptr, M.indices, M.data, diag, b, xv, k)
        else:
            lower = sp.tril(M, format="csr")
            upper = sp.triu(M, k=1, format="csr")

            def sweep(xv, k):
                return _gs_sweeps_numpy(M, lower, upper, b, xv, k)
        it = 0
        while it < max_iterations:
            k = min(check_every, max_iterations - it)
            x = sweep(x, k)
            it += k
            r = rel(x)
            history.append(r)
            if r <= tolerance:
                return SolveResult(x, it, r, history, method)
            if not np.isfinite(r):
                break
        raise ConvergenceError(f"Gauss-Seidel stalled at relative residual {history[-1]:.3e} "
                               f"after {it} sweeps", history)
    if method in ("bicgstab", "gmres"):
        ilu = spla.spilu(sp.csc_matrix(M), drop_tol=1e-5, fill_factor=10)
        pre = spla.LinearOperator(M.shape, ilu.solve)
        solver = spla.bicgstab if method == "bicgstab" else spla.gmres
        count = [0]

        def cb(xk):
            count[0] += 1
            history.append(rel(xk) if method == "bicgstab" else float(xk))

        kwargs = {"callback_type": "pr_norm"} if method == "gmres" else {}
        x, info = solver(M, b, x0=x, rtol=tolerance, atol=0.0, maxiter=max_iterations, M=pre,
                         callback=cb, **kwargs)
        r = rel(x)
        if info != 0 or r > tolerance * 10:
            raise ConvergenceError(f"{method} returned info={info}, relative residual {r:.3e}", history)
        return SolveResult(x, count[0], r, history, method)
    raise ValueError(f"unknown method {method!r}")


# --------------------------------------------------------------------------
# manufactured solution study


def manufactured_u(x):
    """``u = sin(pi x) sin(pi y)`` on the unit square."""
    return np.sin(np.pi * x[:, 0]) * np.sin(np.pi * x[:, 1])


def manufactured_a(x):
    return x[:, 0] ** 2 + x[:, 1] ** 2 + 1.0


def manufactured_f(x):
    """``div(a grad u)`` for the manufactured pair, differentiated by hand."""
    px, py = np.pi * x[:, 0], np.pi * x[:, 1]
    u = np.sin(px) * np.sin(py)
    lap_u = -2.0 * np.pi**2 * u
    ux = np.pi * np.cos(px) * np.sin(py)
    uy = np.pi * np.sin(px) * np.cos(py)
    return manufactured_a(x) * lap_u + 2.0 * x[:, 0] * ux + 2.0 * x[:, 1] * uy


@dataclass
class PoissonStudyConfig:
    """Settings for a manufactured-solution convergence sweep.

    ``resolutions`` count lattice intervals per axis on the unit square, so
    ``n`` yields ``(n + 1)^2`` particles including the boundary nodes and
    ``delta_x = 1 / n``. Perturbed sets keep the boundary nodes and the first
    ``frozen_layers`` interior layers on the lattice.
    """

    method: str = "vrsph"
    distribution: str = "uniform"
    resolutions: tuple = (20, 40, 80, 160)
    kappa: float = 3.0
    seed: int = 7
    amplitude: float = 0.5
    frozen_layers: int = 2
    solver: str = "gauss-seidel"
    tolerance: float = 1e-12

    def __post_init__(self):
        self.method = self.method.lower()
        self.distribution = self.distribution.lower()
        if self.method not in ("sph", "vrsph"):
            raise ValueError("method must be 'sph' or 'vrsph'")
        if self.distribution not in ("uniform", "perturbed"):
            raise ValueError("distribution must be 'uniform' or 'perturbed'")


@dataclass
class ConvergenceRecord:
    n_per_dim: int
    error_inf: float
    order: float | None
    solver_residual: float = float("nan")
    seconds: float = float("nan")


@dataclass
class ConvergenceReport:
    method: str
    distribution: str
    records: list = field(default_factory=list)
    operators: list = field(default_factory=list, repr=False)

    @property
    def errors(self):
        return np.array([r.error_inf for r in self.records])

    @property
    def orders(self):
        return np.array([r.order for r in self.records[1:]], dtype=float)

    def add(self, n, err, **kw):
        order = None
        if self.records:
            prev = self.records[-1]
            if n != 2 * prev.n_per_dim:
                raise ValueError("orders are defined only between resolutions doubling N^(1/d)")
            order = math.log2(prev.error_inf / err)
        self.records.append(ConvergenceRecord(n, err, order, **kw))

    def to_csv(self, path, append=False):
        mode = "a" if append else "w"
        with open(path, mode, newline="") as fh:
            w = csv.writer(fh)
            if not append or fh.tell() == 0:
                w.writerow(["method", "distribution", "n_per_dim", "error_inf", "order"])
            for r in self.records:
                w.writerow([self.method, self.distribution, r.n_per_dim, f"{r.error_inf:.4e}",
                            "" if r.order is None else f"{r.order:.4f}"])

    def to_table(self) -> str:
        lines = [f"{self.method.upper()} ({self.distribution})",
                 f"{'N^(1/d)':>8}  {'||u-U||_inf':>12}  {'order':>7}"]
        for r in self.records:
            order = "-" if r.order is None else f"{r.order:.4f}"
            lines.append(f"{r.n_per_dim:>8d}  {r.error_inf:>12.4e}  {order:>7}")
        return "\n".join(lines)


def poisson_particles(n, config: PoissonStudyConfig) -> ParticleSet:
    box = ((0.0, 1.0), (0.0, 1.0))
    if config.distribution == "uniform":
        return generate_uniform(n, box, layout="node")
    return generate_perturbed(n, box, amplitude=config.amplitude, seed=config.seed, layout="node",
                              boundary="fixed", frozen_layers=config.frozen_layers)


def solve_manufactured(pset: ParticleSet, config: PoissonStudyConfig):
    """Assemble and solve one instance; returns (U at all particles, operator, residual)."""
    h = config.kappa * pset.delta_x
    kernel = KernelSpec(2, h)
    nbrs = build_neighbor_table(pset, h)
    x = pset.positions
    a = manufactured_a(x)
    if config.method == "vrsph":
        weights = reconstruct_volumes(pset, nbrs, kernel, Mode.LAPLACIAN)
    else:
        weights = np.full(pset.n_total, pset.delta_x**2)
    problem = PoissonProblem(a, manufactured_f(x))
    op = assemble_discrete_laplacian(pset, problem, weights, nbrs, kernel)
    result = solve(op, problem.rhs[: pset.n_interior], tolerance=config.tolerance, method=config.solver)
    U = np.zeros(pset.n_total)
    U[: pset.n_interior] = result.solution
    return U, op, result.residual


def manufactured_poisson_study(config: PoissonStudyConfig, keep_operators=False) -> ConvergenceReport:
    """Run the manufactured-solution sweep and record L-infinity errors.

    The error is taken over all particles; boundary rows are exact.
    """
    report = ConvergenceReport(config.method, config.distribution)
    for n in config.resolutions:
        t0 = time.perf_counter()
        pset = poisson_particles(n, config)
        U, op, res = solve_manufactured(pset, config)
        err = float(np.max(np.abs(U - manufactured_u(pset.positions))))
        report.add(n, err, solver_residual=res, seconds=time.perf_counter() - t0)
        if keep_operators:
            report.operators.append(op)
    return report
