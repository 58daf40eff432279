"""Truncation-error sweeps and phase timings.

The truncation study samples ``f(x) = prod_k cos(pi x_k)`` on perturbed
lattices of ``[-1, 1]^d`` with three virtual layers and ``h = kappa dx``, and
measures the L-infinity error of gradient and Laplacian approximations over
the interior particles.
"""

from __future__ import annotations

import csv
import statistics
import time
from dataclasses import dataclass, field

import numpy as np

from . import operators as ops
from .geometry import Box, build_neighbor_table, estimate_covering_radius, generate_perturbed, generate_uniform
from .kernels import KernelSpec
from .reconstruction import Mode, reconstruct_volumes, vrsph_gradient_all, vrsph_laplacian_all

METHODS = ("sph", "fpm", "vrsph")
VIRTUAL_LAYERS = 3
DIVERGENCE_SLOPE = 0.0


def sample_field(x):
    """``f``, ``grad f`` and ``lap f`` for ``f = prod_k cos(pi x_k)``."""
    x = np.atleast_2d(np.asarray(x, dtype=float))
    c = np.cos(np.pi * x)
    s = np.sin(np.pi * x)
    f = np.prod(c, axis=1)
    d = x.shape[1]
    grad = np.empty_like(x)
    for k in range(d):
        others = np.prod(np.delete(c, k, axis=1), axis=1) if d > 1 else 1.0
        grad[:, k] = -np.pi * s[:, k] * others
    return f, grad, -d * np.pi**2 * f


def loglog_slope(n_per_dim, errors) -> float:
    """Least-squares order ``p`` in ``err ~ n^-p``."""
    n = np.asarray(n_per_dim, dtype=float)
    e = np.asarray(errors, dtype=float)
    if n.size < 2:
        return float("nan")
    return float(-np.polyfit(np.log(n), np.log(e), 1)[0])


def _orders(n, e):
    return [float("nan")] + [float(np.log(e[k - 1] / e[k]) / np.log(n[k] / n[k - 1]))
                             for k in range(1, len(e))]


def truncation_particles(n, dim, distribution="perturbed", seed=0, amplitude=0.5):
    box = Box.cube(-1.0, 1.0, dim)
    if distribution == "uniform":
        return generate_uniform(n, box, virtual_layers=VIRTUAL_LAYERS, layout="node")
    return generate_perturbed(n, box, amplitude=amplitude, seed=seed, virtual_layers=VIRTUAL_LAYERS,
                              layout="node")


def approximate(method: str, pset, kappa: float = 3.0):
    """Gradient and Laplacian of the test field at the interior particles."""
    h = kappa * pset.delta_x
    kernel = KernelSpec(pset.dim, h)
    nbrs = build_neighbor_table(pset, h)
    f, _, _ = sample_field(pset.positions)
    vols = np.full(pset.n_total, pset.delta_x**pset.dim)
    interior = np.arange(pset.n_interior)
    if method == "sph":
        grad = ops.sph_gradient_all(f, vols, nbrs, kernel)
        lap = ops.sph_laplacian_all(f, vols, nbrs, kernel)
    elif method == "fpm":
        _, grad = ops.fpm_all(f, vols, nbrs, kernel, second_order=False, particles=interior)
        _, _, hess = ops.fpm_all(f, vols, nbrs, kernel, second_order=True, particles=interior)
        lap = np.trace(hess, axis1=1, axis2=2)
        return grad, lap
    elif method == "vrsph":
        wg = reconstruct_volumes(pset, nbrs, kernel, Mode.GRADIENT)
        wl = reconstruct_volumes(pset, nbrs, kernel, Mode.LAPLACIAN)
        grad = vrsph_gradient_all(f, wg, nbrs, kernel)
        lap = vrsph_laplacian_all(f, wl, nbrs, kernel)
    else:
        raise ValueError(f"unknown method {method!r}; expected one of {METHODS}")
    return grad[interior], lap[interior]


@dataclass
class TruncationReport:
    """Errors of one method over a resolution sweep."""

    method: str
    dim: int
    n_per_dim: list = field(default_factory=list)
    grad_err: list = field(default_factory=list)
    lap_err: list = field(default_factory=list)

    @property
    def slope_grad(self) -> float:
        return loglog_slope(self.n_per_dim, self.grad_err)

    @property
    def slope_lap(self) -> float:
        return loglog_slope(self.n_per_dim, self.lap_err)

    @property
    def divergent(self) -> bool:
        """Laplacian error does not decrease over the sweep."""
        return bool(self.slope_lap <= DIVERGENCE_SLOPE)

    def rows(self):
        og = _orders(self.n_per_dim, self.grad_err)
        ol = _orders(self.n_per_dim, self.lap_err)
        for k, n in enumerate(self.n_per_dim):
            yield self.method, n, self.grad_err[k], self.lap_err[k], og[k], ol[k]


TRUNCATION_HEADER = ["method", "n_per_dim", "grad_err", "lap_err", "order_grad", "order_lap"]
SUMMARY_HEADER = ["method", "dim", "slope_grad", "slope_lap", "divergent"]


def truncation_study(methods=METHODS, dim: int = 2, kmin: int = 3, kmax: int = 7, kappa: float = 3.0,
                     seed: int = 0, distribution: str = "perturbed") -> list[TruncationReport]:
    """Sweep ``N^(1/d) = 2^k`` for ``k = kmin..kmax`` and collect L-infinity errors."""
    if kmin < 2 or kmax <= kmin:
        raise ValueError("need 2 <= kmin < kmax")
    reports = [TruncationReport(m, dim) for m in methods]
    for k in range(kmin, kmax + 1):
        n = 2**k
        pset = truncation_particles(n, dim, distribution, seed)
        _, grad_ex, lap_ex = sample_field(pset.positions[: pset.n_interior])
        for rep in reports:
            grad, lap = approximate(rep.method, pset, kappa)
            rep.n_per_dim.append(n)
            rep.grad_err.append(float(np.abs(grad - grad_ex).max()))
            rep.lap_err.append(float(np.abs(lap - lap_ex).max()))
    return reports


def write_truncation_csv(reports, path, summary_path=None):
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(TRUNCATION_HEADER)
        for rep in reports:
            for row in rep.rows():
                w.writerow([row[0], row[1]] + [repr(float(v)) for v in row[2:]])
    if summary_path is not None:
        with open(summary_path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(SUMMARY_HEADER)
            for rep in reports:
                w.writerow([rep.method, rep.dim, repr(rep.slope_grad), repr(rep.slope_lap),
                            str(rep.divergent).lower()])


# --------------------------------------------------------------------------
# timing


PHASES = ("neighbor_search", "covering_radius", "reconstruction", "operator")


@dataclass(frozen=True)
class TimingRecord:
    phase: str
    seconds: float
    fraction: float


@dataclass
class TimingReport:
    records: list
    repetitions: int
    threads: int
    dim: int
    n_per_dim: int
    samples: dict = field(repr=False, default_factory=dict)

    @property
    def total(self) -> float:
        return sum(r.seconds for r in self.records)

    def fraction(self, phase: str) -> float:
        return next(r.fraction for r in self.records if r.phase == phase)

    def to_csv(self, path):
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["phase", "median_seconds", "fraction", "repetitions", "threads", "dim", "n_per_dim"])
            for r in self.records:
                w.writerow([r.phase, repr(r.seconds), repr(r.fraction), self.repetitions, self.threads,
                            self.dim, self.n_per_dim])


def timing_study(dim: int = 2, k: int = 7, kappa: float = 3.0, repetitions: int = 10, seed: int = 0,
                 threads: int = 1) -> TimingReport:
    """Median wall time per phase of a VRSPH Laplacian evaluation.

    The phases are neighbour search, covering-radius estimation,
    reconstruction of Laplacian weights, and applying the operator.
    A warm-up pass (JIT compilation) precedes the timed repetitions.
    """
    if repetitions < 1:
        raise ValueError("repetitions must be positive")
    pset = truncation_particles(2**k, dim, "perturbed", seed)
    h = kappa * pset.delta_x
    kernel = KernelSpec(dim, h)
    f, _, _ = sample_field(pset.positions)
    samples = {p: [] for p in PHASES}
    for rep in range(repetitions + 1):
        t0 = time.perf_counter()
        nbrs = build_neighbor_table(pset, h)
        t1 = time.perf_counter()
        estimate_covering_radius(pset)
        t2 = time.perf_counter()
        weights = reconstruct_volumes(pset, nbrs, kernel, Mode.LAPLACIAN)
        t3 = time.perf_counter()
        vrsph_laplacian_all(f, weights, nbrs, kernel)
        t4 = time.perf_counter()
        if rep == 0:
            continue
        for p, dt in zip(PHASES, (t1 - t0, t2 - t1, t3 - t2, t4 - t3)):
            samples[p].append(dt)
    med = {p: statistics.median(v) for p, v in samples.items()}
    total = sum(med.values())
    records = [TimingRecord(p, med[p], med[p] / total) for p in PHASES]
    return TimingReport(records, repetitions, threads, dim, 2**k, samples)
