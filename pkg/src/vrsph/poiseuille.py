"""Weakly-compressible SPH simulation of start-up plane Poiseuille flow.

Fluid fills the gap ``0 < y < l`` between two no-slip plates and is driven
from rest by a body force ``F`` along x. The channel is periodic in x. The
pressure gradient and viscous term use reconstructed (VRSPH) weights; density
follows the continuity equation with the traditional SPH divergence.
"""

from __future__ import annotations

import csv
import math
import time
from dataclasses import dataclass, field, replace

import numpy as np

from . import operators as ops
from ._jit import USE_NUMBA, njit
from .geometry import NeighborTable, build_neighbor_table
from .kernels import KernelSpec, cubic_shape_deriv_scalar
from .reconstruction import Mode, WeightTable, reconstruct_volumes

PROFILE_TIMES = (0.0, 0.0225, 0.045, 0.1125, 0.225, 0.5)


class CFLViolation(ValueError):
    """Requested time step exceeds the viscous or acoustic stability limit."""


@dataclass(frozen=True)
class FlowConfig:
    """Physical and numerical parameters (SI units).

    ``wall="rows"`` places one stationary particle row on each plate and
    leaves the one-sided supports to the reconstruction. ``wall="mirror"``
    adds three stationary dummy layers beyond each plate; each dummy carries
    the negated velocity and the density of the fluid particle it mirrors.

    ``continuity="adjoint"`` evolves density with the transpose of the
    reconstructed gradient applied to the mass flux, which keeps the
    pressure/density pair energy-stable and conserves total mass.
    ``continuity="sph"`` uses the traditional SPH divergence; paired with a
    reconstructed pressure gradient it admits growing acoustic modes (see
    :func:`acoustic_growth_rate`).

    ``advect=False`` keeps every particle at its initial position. The
    convective term vanishes for this unidirectional flow, so the exact
    solution is unchanged; neighbours and weights are then built once.
    """

    force: float = 8e-4
    plate_gap: float = 1e-3
    density: float = 1e3
    viscosity: float = 1e-6
    sound_speed: float = 20.0
    dx: float = 5e-5
    dt: float = 1.67e-5
    kappa: float = 3.0
    end_time: float = 0.0225
    sample_times: tuple = ()
    width_cells: int = 20
    wall: str = "rows"
    continuity: str = "adjoint"
    advect: bool = True
    max_reynolds: float = 2300.0

    def __post_init__(self):
        for name in ("plate_gap", "density", "viscosity", "sound_speed", "dx", "dt", "kappa"):
            if not getattr(self, name) > 0:
                raise ValueError(f"{name} must be positive")
        if not self.force >= 0:
            raise ValueError("force must be non-negative")
        if self.wall not in ("rows", "mirror"):
            raise ValueError("wall must be 'rows' or 'mirror'")
        if self.continuity not in ("adjoint", "sph"):
            raise ValueError("continuity must be 'adjoint' or 'sph'")
        n = self.plate_gap / self.dx
        if abs(n - round(n)) > 1e-9 * n:
            raise ValueError("plate_gap must be an integer multiple of dx")
        if self.width_cells * self.dx < 3 * self.h:
            raise ValueError("periodic width must be at least 3h")
        if self.reynolds > self.max_reynolds:
            raise ValueError(f"Re = {self.reynolds:.1f} exceeds {self.max_reynolds:g}: "
                             "turbulent regimes are not modelled")

    @property
    def reynolds(self) -> float:
        return self.peak_velocity * self.plate_gap / self.viscosity

    @property
    def peak_velocity(self) -> float:
        return self.force * self.plate_gap**2 / (8.0 * self.viscosity)

    @property
    def h(self) -> float:
        return self.kappa * self.dx

    @property
    def n_gap(self) -> int:
        return int(round(self.plate_gap / self.dx))

    @property
    def stable_dt(self) -> float:
        """``min(0.125 h^2 / nu, 0.25 h / c)``."""
        return min(0.125 * self.h**2 / self.viscosity, 0.25 * self.h / self.sound_speed)

    @classmethod
    def for_reynolds(cls, reynolds: float, **kw) -> FlowConfig:
        """Config whose body force yields the requested Reynolds number."""
        l = kw.get("plate_gap", cls.plate_gap)
        nu = kw.get("viscosity", cls.viscosity)
        return cls(force=8.0 * nu**2 * reynolds / l**3, **kw)


def analytic_poiseuille(y, t, config: FlowConfig):
    """Start-up velocity ``v(y, t)`` from the Fourier sine series.

    The series is truncated once the bound on the next term drops below
    ``1e-12 * v0``. Returns zeros for ``t <= 0``.
    """
    y = np.asarray(y, dtype=float)
    if t <= 0:
        return np.zeros_like(y)
    F, l, nu = config.force, config.plate_gap, config.viscosity
    steady = F / (2.0 * nu) * y * (l - y)
    cutoff = 1e-12 * config.peak_velocity
    total = np.zeros_like(y)
    n = 0
    while True:
        k = 2 * n + 1
        amp = 4.0 * F * l**2 / (nu * math.pi**3 * k**3) * math.exp(-(k**2) * math.pi**2 * nu * t / l**2)
        if amp < cutoff:
            break
        total += amp * np.sin(k * math.pi * y / l)
        n += 1
    return steady - total


@dataclass(frozen=True, eq=False)
class FlowState:
    """Particle state; the first ``n_fluid`` particles are fluid."""

    positions: np.ndarray
    velocity: np.ndarray
    density: np.ndarray
    pressure: np.ndarray
    mass: np.ndarray
    time: float
    n_fluid: int
    mirror_of: np.ndarray = None       # dummy -> mirrored fluid particle (mirror walls)
    acceleration: np.ndarray = field(default=None, repr=False)
    weights: WeightTable = field(default=None, repr=False)
    neighbors: NeighborTable = field(default=None, repr=False)

    @property
    def fluid_y(self):
        return self.positions[: self.n_fluid, 1]

    @property
    def fluid_u(self):
        return self.velocity[: self.n_fluid, 0]


def initial_state(config: FlowConfig) -> FlowState:
    """Fluid at rest on a lattice, plus wall particles."""
    dx, n, W = config.dx, config.n_gap, config.width_cells
    xs = (np.arange(W) + 0.5) * dx
    if config.wall == "rows":
        fluid_y = np.arange(1, n) * dx
        wall_y = np.array([0.0, config.plate_gap])
        mirror_rows = None
    else:
        fluid_y = (np.arange(n) + 0.5) * dx
        layers = np.arange(3)
        wall_y = np.concatenate([-(layers + 0.5) * dx, config.plate_gap + (layers + 0.5) * dx])
        mirror_rows = np.concatenate([layers, n - 1 - layers])
    fx, fy = np.meshgrid(xs, fluid_y, indexing="xy")
    wx, wy = np.meshgrid(xs, wall_y, indexing="xy")
    pos = np.vstack([np.column_stack([fx.ravel(), fy.ravel()]),
                     np.column_stack([wx.ravel(), wy.ravel()])])
    n_fluid = fx.size
    mirror_of = None
    if mirror_rows is not None:
        mirror_of = (mirror_rows[:, None] * W + np.arange(W)[None, :]).ravel()
    N = len(pos)
    rho = np.full(N, config.density)
    return FlowState(pos, np.zeros((N, 2)), rho, np.zeros(N), rho * dx * dx, 0.0, n_fluid, mirror_of)


def _period(config):
    return np.array([config.width_cells * config.dx, 0.0])


def _apply_wall_velocity(state_velocity, state: FlowState):
    v = state_velocity
    if state.mirror_of is not None:
        v[state.n_fluid:] = -v[state.mirror_of]
    else:
        v[state.n_fluid:] = 0.0
    return v


def _geometry(pos, n_fluid, config, kernel, warm):
    nbrs = build_neighbor_table(pos, config.h, period=_period(config))
    weights = reconstruct_volumes(None, nbrs, kernel, Mode.LAPLACIAN, particles=np.arange(n_fluid),
                                  warm_start=warm, length_scale=config.plate_gap)
    return nbrs, weights


def _acceleration(geom, vel, rho, pressure, n_fluid, config, kernel):
    """``(div(mu grad v) - grad p) / rho + F e_x`` on fluid particles, zero elsewhere."""
    nbrs, weights = geom
    pv = ops.pair_volumes(weights.values)
    grad_p = ops.sph_gradient_all(pressure, pv, nbrs, kernel)
    visc = ops.sph_morris_all(vel, rho * config.viscosity, pv, nbrs, kernel)
    acc = np.zeros_like(vel)
    acc[:n_fluid] = (visc[:n_fluid] - grad_p[:n_fluid]) / rho[:n_fluid, None]
    acc[:n_fluid, 0] += config.force
    return acc


def _density_rate(geom, vel, rho, mass, kernel, continuity):
    """Continuity right-hand side from the operator library.

    ``"adjoint"``: ``(G^T (rho v))_i`` where ``G`` is the reconstructed
    gradient (``G^T`` approximates ``-div``); pair ``(j, i)`` sends
    ``V_ji grad_j W_ji . rho_j v_j`` to ``i``.
    ``"sph"``: ``-rho_i div v`` with the traditional volumes ``m / rho``.
    """
    nbrs, weights = geom
    if continuity == "sph":
        return -rho * ops.sph_divergence_all(vel, mass / rho, nbrs, kernel)
    g = ops.pair_geometry(nbrs, kernel)
    flux = rho[:, None] * vel
    sent = weights.values * np.einsum("ij,ij->i", g.gw, flux[g.rows])
    return np.bincount(g.cols, weights=sent, minlength=len(nbrs))


@njit
def _pair_radial(pos, i, j, period, h, gscale, xij):
    """Fill ``xij = x_i - x_j`` (minimum image) and return ``dW/dr / r``."""
    r2 = 0.0
    for k in range(pos.shape[1]):
        dx = pos[i, k] - pos[j, k]
        if period[k] > 0:
            dx -= period[k] * np.floor(dx / period[k] + 0.5)
        xij[k] = dx
        r2 += dx * dx
    r = np.sqrt(r2)
    return gscale * cubic_shape_deriv_scalar(r / h) / r


@njit
def _fused_density_rate_sph(pos, vel, rho, mass, indptr, indices, period, h, sigma):
    n, d = pos.shape
    out = np.zeros(n)
    gscale = sigma / h ** (d + 1)
    xij = np.empty(d)
    for i in range(n):
        acc = 0.0
        for q in range(indptr[i], indptr[i + 1]):
            j = indices[q]
            g = _pair_radial(pos, i, j, period, h, gscale, xij)
            dot = 0.0
            for k in range(d):
                dot += (vel[i, k] - vel[j, k]) * g * xij[k]
            acc += mass[j] / rho[j] * dot
        out[i] = rho[i] * acc
    return out


@njit
def _fused_density_rate_adjoint(pos, vel, rho, indptr, indices, period, h, sigma, V):
    n, d = pos.shape
    out = np.zeros(n)
    gscale = sigma / h ** (d + 1)
    xij = np.empty(d)
    for j in range(n):
        for q in range(indptr[j], indptr[j + 1]):
            if V[q] == 0.0:
                continue
            i = indices[q]
            g = _pair_radial(pos, j, i, period, h, gscale, xij)
            dot = 0.0
            for k in range(d):
                dot += g * xij[k] * rho[j] * vel[j, k]
            out[i] += V[q] * dot
    return out


@njit
def _fused_acceleration(pos, vel, rho, pressure, indptr, indices, period, h, sigma, V, nu, force,
                        n_fluid):
    n, d = pos.shape
    out = np.zeros((n, d))
    gscale = sigma / h ** (d + 1)
    xij = np.empty(d)
    for i in range(n_fluid):
        visc = np.zeros(d)
        gradp = np.zeros(d)
        for q in range(indptr[i], indptr[i + 1]):
            j = indices[q]
            radial = _pair_radial(pos, i, j, period, h, gscale, xij)
            c = V[q] * nu * (rho[i] + rho[j]) * radial
            dp = V[q] * (pressure[i] - pressure[j])
            for k in range(d):
                visc[k] += c * (vel[i, k] - vel[j, k])
                gradp[k] -= dp * radial * xij[k]
        for k in range(d):
            out[i, k] = (visc[k] - gradp[k]) / rho[i]
        out[i, 0] += force
    return out


def _drho(geom, vel, rho, mass, config, kernel, fused):
    nbrs, weights = geom
    if not fused:
        rate = _density_rate(geom, vel, rho, mass, kernel, config.continuity)
    else:
        args = (nbrs.indptr, nbrs.indices, nbrs.period, kernel.h, kernel.sigma)
        if config.continuity == "sph":
            rate = _fused_density_rate_sph(nbrs.points, vel, rho, mass, *args)
        else:
            rate = _fused_density_rate_adjoint(nbrs.points, vel, rho, *args, weights.values)
    return rate


def _accel(geom, vel, rho, pressure, n_fluid, config, kernel, fused):
    nbrs, weights = geom
    if not fused:
        return _acceleration(geom, vel, rho, pressure, n_fluid, config, kernel)
    return _fused_acceleration(nbrs.points, vel, rho, pressure, nbrs.indptr, nbrs.indices, nbrs.period,
                               kernel.h, kernel.sigma, weights.values, config.viscosity, config.force,
                               n_fluid)


def acoustic_growth_rate(state: FlowState, config: FlowConfig) -> float:
    """Fastest exponential growth rate (1/s) of the linearised pressure waves.

    Linearising about rest at uniform density gives ``rho'' = -c^2 D G rho``
    with ``G`` the pressure-gradient matrix and ``D`` the continuity matrix
    (both approximate ``grad`` and ``-div``).
    Modes grow when ``D G`` has eigenvalues off the non-negative real axis.
    Dense eigenvalues: small particle counts only.
    """
    kernel = KernelSpec(2, config.h)
    nbrs, weights = _geometry(state.positions, state.n_fluid, config, kernel, None)
    g = ops.pair_geometry(nbrs, kernel)
    n, nf = len(nbrs), state.n_fluid
    rows, cols = g.rows, g.cols
    vol = state.mass / state.density
    DG = np.zeros((n, n))
    for k in range(2):
        G = np.zeros((n, n))
        np.add.at(G, (rows, cols), weights.values * g.gw[:, k])
        np.add.at(G, (rows, rows), -weights.values * g.gw[:, k])
        G[nf:] = 0.0
        if config.continuity == "sph":
            D = np.zeros((n, n))
            np.add.at(D, (rows, rows), vol[cols] * g.gw[:, k])
            np.add.at(D, (rows, cols), -vol[cols] * g.gw[:, k])
        else:
            D = G.T
        DG += D @ G
    ev = np.linalg.eigvals(config.sound_speed**2 * DG).astype(complex)
    return float(np.max(np.real(np.sqrt(-ev))))


def step_leapfrog(state: FlowState, config: FlowConfig, dt: float | None = None,
                  kernel: KernelSpec | None = None, fused: bool | None = None) -> FlowState:
    """Advance one kick-drift-kick step.

    Neighbours and weights are rebuilt once, after the drift (never when
    ``config.advect`` is false). The
    acceleration at the end of the step is cached on the returned state and
    reused as the opening kick of the next step. ``fused`` selects the
    compiled pair loops (default with numba) over the operator library.
    """
    dt = config.dt if dt is None else dt
    if dt > config.stable_dt * (1 + 1e-9):
        raise CFLViolation(f"dt={dt:.3e} exceeds the stable limit {config.stable_dt:.3e} "
                           f"(0.125 h^2/nu and 0.25 h/c)")
    kernel = kernel or KernelSpec(2, config.h)
    fused = USE_NUMBA if fused is None else fused
    nf = state.n_fluid
    acc0 = state.acceleration
    if acc0 is None or state.neighbors is None:
        geom = _geometry(state.positions, nf, config, kernel, state.weights)
        acc0 = _accel(geom, state.velocity, state.density, state.pressure, nf, config, kernel, fused)
        state = replace(state, weights=geom[1], neighbors=geom[0])
    vel = state.velocity.copy()
    vel[:nf] += 0.5 * dt * acc0[:nf]
    vel = _apply_wall_velocity(vel, state)
    pos = state.positions
    if config.advect:
        pos = pos.copy()
        pos[:nf] += dt * vel[:nf]
        pos[:nf, 0] %= config.width_cells * config.dx
        try:
            geom = _geometry(pos, nf, config, kernel, state.weights)
        except Exception as exc:
            raise RuntimeError(f"step at t={state.time:.6e} failed: {exc}") from exc
    else:
        geom = (state.neighbors, state.weights)
    rho = state.density + dt * _drho(geom, vel, state.density, state.mass, config, kernel, fused)
    if state.mirror_of is not None:
        rho[nf:] = rho[state.mirror_of]
    if np.any(rho <= 0):
        raise RuntimeError(f"non-positive density at t={state.time + dt:.6e}")
    p = config.sound_speed**2 * (rho - config.density)
    acc1 = _accel(geom, vel, rho, p, nf, config, kernel, fused)
    vel[:nf] += 0.5 * dt * acc1[:nf]
    vel = _apply_wall_velocity(vel, state)
    return replace(state, positions=pos, velocity=vel, density=rho, pressure=p, time=state.time + dt,
                   acceleration=acc1, weights=geom[1], neighbors=geom[0])


# --------------------------------------------------------------------------
# driver and reports


@dataclass
class FlowReport:
    """Errors and velocity profiles sampled during a run.

    ``errors[k]`` is ``max |u - u_exact|`` over fluid particles at
    ``times[k]``; ``relative_errors[k]`` divides it by ``max |u_exact|``.
    """

    config: FlowConfig
    times: np.ndarray
    errors: np.ndarray
    relative_errors: np.ndarray
    profiles: list
    substep: float
    steps: int
    momentum: np.ndarray = field(repr=False, default=None)
    seconds: float = 0.0

    @property
    def final_error(self) -> float:
        return float(self.errors[-1])

    @property
    def final_relative_error(self) -> float:
        return float(self.relative_errors[-1])

    def to_csv(self, path):
        """Write ``t,y,v_numeric,v_analytic,rel_error`` rows for every sampled profile."""
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["t", "y", "v_numeric", "v_analytic", "rel_error"])
            for t, y, u, ua in self.profiles:
                scale = np.abs(ua).max()
                rel = np.abs(u - ua) / scale if scale > 0 else np.abs(u - ua)
                for row in sorted(zip(y, u, ua, rel)):
                    w.writerow([repr(float(t))] + [repr(float(v)) for v in row])


def substep_for(config: FlowConfig, safety: float = 1.0) -> float:
    """Largest stable step not exceeding ``config.dt``."""
    if not 0 < safety <= 1:
        raise ValueError("safety must lie in (0, 1]")
    return min(config.dt, safety * config.stable_dt)


def run_poiseuille(config: FlowConfig, safety: float = 1.0, progress=None) -> FlowReport:
    """Integrate from rest and compare against the analytic series.

    ``config.dt`` is the nominal step; when it exceeds the stability limit
    the run sub-cycles with the largest stable step, shortened slightly so
    every sample time is reached exactly. Samples are taken at
    ``config.sample_times`` and at ``config.end_time``.
    """
    times = sorted({float(t) for t in config.sample_times if 0 <= t <= config.end_time} | {config.end_time})
    dt_max = substep_for(config, safety)
    kernel = KernelSpec(2, config.h)
    state = initial_state(config)
    t0 = time.perf_counter()
    profiles, errs, rels, momentum = [], [], [], [0.0]
    steps, used = 0, 0.0
    for target in times:
        span = target - state.time
        nsub = int(math.ceil(span / dt_max * (1 - 1e-12))) if span > 0 else 0
        for k in range(nsub):
            dt = (target - state.time) / (nsub - k)
            state = step_leapfrog(state, config, dt, kernel)
            used = max(used, dt)
            steps += 1
            momentum.append(float(np.sum(state.mass[: state.n_fluid] * state.fluid_u)))
        y, u = state.fluid_y.copy(), state.fluid_u.copy()
        ua = analytic_poiseuille(y, target, config)
        err = float(np.abs(u - ua).max())
        scale = float(np.abs(ua).max())
        profiles.append((target, y, u, ua))
        errs.append(err)
        rels.append(err / scale if scale > 0 else err)
        if progress is not None:
            progress(target, err)
    return FlowReport(config, np.array(times), np.array(errs), np.array(rels), profiles,
                      used or dt_max, steps, np.array(momentum), time.perf_counter() - t0)


REFERENCE_ERRORS = {
    0.1: {5e-5: 4.0352e-8, 2.5e-5: 1.0115e-8, 1.25e-5: 2.5339e-9},
    500: {5e-5: 2.0177e-4, 2.5e-5: 5.0557e-5, 1.25e-5: 1.0325e-5},
    2000: {5e-5: 8.0705e-4, 2.5e-5: 2.0236e-4, 1.25e-5: 4.9424e-5},
}
CONVERGENCE_HEADER = ["re", "dx", "dt", "substep", "error", "order", "reference_error"]


@dataclass
class FlowConvergenceRecord:
    reynolds: float
    dx: float
    dt: float
    substep: float
    error: float
    order: float | None
    reference_error: float | None = None


def poiseuille_convergence(reynolds: float, dxs=(5e-5, 2.5e-5), at: float = 0.0225, profile_times=(),
                           safety: float = 1.0, progress=None, **kw):
    """Errors at time ``at`` for successive halvings of ``dx`` at one Reynolds number.

    The coarsest run also samples ``profile_times`` (and runs to their
    maximum); the finer runs stop at ``at``. Returns the records and the
    report of every run.
    """
    dxs = sorted(dxs, reverse=True)
    records, reports = [], []
    for k, dx in enumerate(dxs):
        extra = tuple(profile_times) if k == 0 else ()
        end = max((at,) + extra)
        config = FlowConfig.for_reynolds(reynolds, dx=dx, end_time=end, sample_times=(at,) + extra, **kw)
        report = run_poiseuille(config, safety=safety)
        err = float(report.errors[int(np.argmin(np.abs(report.times - at)))])
        order = None
        if records:
            prev = records[-1]
            order = math.log(prev.error / err) / math.log(prev.dx / dx)
        ref = REFERENCE_ERRORS.get(reynolds, {}).get(dx)
        records.append(FlowConvergenceRecord(reynolds, dx, config.dt, report.substep, err, order, ref))
        reports.append(report)
        if progress is not None:
            progress(records[-1])
    return records, reports


def write_convergence_csv(records, path):
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(CONVERGENCE_HEADER)
        for r in records:
            w.writerow([repr(float(r.reynolds)), repr(r.dx), repr(r.dt), repr(r.substep), f"{r.error:.4e}",
                        "" if r.order is None else f"{r.order:.4f}",
                        "" if r.reference_error is None else f"{r.reference_error:.4e}"])
