##########################
# Particle push
##########################

"""
Gyrocenter orbits in normalized units (lengths in a, B in B0, speeds in v_th).
The field line runs along +zeta with zeta' = v_par B / R0 and theta' = zeta' / q.
Drifts: vE = rho* (E x b) / B, vd = rho* (v_par^2 + mu B) / B^2 (b x grad B)
with (b x grad X)_r = -(1/r) dX/dtheta and (b x grad X)_theta = dX/dr.
"""

import logging
from dataclasses import dataclass

import numpy as np

from .config import PushLoop, RunParams
from .fieldsolve import GridVector
from .geometry import TorusGrid, wrap_angle
from .kernel import chunk_bounds, run_chunks
from .particles import ParticleStore, gyro_points

log = logging.getLogger(__name__)

PROFILE_CENTER = 0.5
PROFILE_WIDTH = 0.35


@dataclass
class PushStats:
    clamped_points: int = 0
    reflections: int = 0
    double_crossings: int = 0
    weight_cap_violations: int = 0

    def add(self, other: "PushStats"):
        self.clamped_points += other.clamped_points
        self.reflections += other.reflections
        self.double_crossings += other.double_crossings
        self.weight_cap_violations += other.weight_cap_violations

    def to_yaml(self):
        return dict(self.__dict__)


@dataclass
class DriftTerms:
    """drift velocities at the gyrocenter as (r, theta) components, plus the b* correction factor"""
    v_e: np.ndarray
    v_d: np.ndarray
    b_star: np.ndarray
    grad_b: np.ndarray


def gradient_profile(r):
    """drive envelope exp(-((r - 0.5)/0.35)^6), 1 on the peak gradient surface"""
    return np.exp(-((r - PROFILE_CENTER) / PROFILE_WIDTH) ** 6)


def kappa(r, energy, params: RunParams):
    """-d ln f0 / dr of the background Maxwellian for a particle of kinetic energy `energy`"""
    return gradient_profile(r) * (params.rln + (energy - 1.5) * params.rlt) / params.aspect_ratio


def drift_terms(r, theta, v_par, mu, e, grid: TorusGrid, include_drifts: bool = True, eq=None) -> DriftTerms:
    b, db_dr, db_dtheta, _ = grid.equilibrium(r, theta, check=False) if eq is None else eq
    rs = grid.rho_star
    v_e = np.stack((rs * e[1] / b, -rs * e[0] / b))
    if include_drifts:
        c = rs * (v_par * v_par + mu * b) / (b * b)
        v_d = np.stack((-c * db_dtheta / r, c * db_dr))
        b_star = v_par * rs / (b * b)
    else:
        v_d = np.zeros((2,) + np.shape(r))
        b_star = np.zeros(np.shape(r))
    return DriftTerms(v_e=v_e, v_d=v_d, b_star=b_star, grad_b=np.stack((db_dr, db_dtheta / r)))


def gather(store: ParticleStore, efield: GridVector, grid: TorusGrid, start: int = 0, stop: int | None = None):
    """
    Field averaged over the four gyro-points of particles [start, stop).
    :return: (E of shape (3, n), number of gyro-points clamped beyond the ghost rings)
    """
    stop = store.count if stop is None else stop
    n = stop - start
    if n <= 0:
        return np.zeros((3, 0)), 0
    w = efield.window
    pr, pt = gyro_points(store.r[start:stop], store.theta[start:stop], store.mu[start:stop], grid)
    pz = np.broadcast_to(store.zeta[start:stop], (4, n))
    cell = grid.locate(pr.ravel(), pt.ravel(), pz.ravel(), window=w, plane_origin=w.plane)
    flat = cell.plane_of_corner() * w.n_local + cell.nodes
    ev = efield.values.reshape(3, 2 * w.n_local)
    at_points = np.sum(ev[:, flat] * cell.weights, axis=1)
    e = 0.25 * np.sum(at_points.reshape(3, 4, n), axis=1)
    return e, int(np.count_nonzero(cell.outside))


class Pusher:
    def __init__(self, grid: TorusGrid, params: RunParams, workers: int | None = None, push_loop: str | None = None):
        """
        :param workers: threads sharing the particles of one rank, defaults to params.workers
        :param push_loop: 'fused' gathers and updates in one pass per stage, 'split' gathers all particles first
        """
        self.grid = grid
        self.params = params
        self.workers = params.workers if workers is None else workers
        self.push_loop = PushLoop.parse(push_loop or params.push_loop)

    def derivatives(self, r, theta, v_par, mu, w, e, include_drifts: bool = True):
        """time derivatives of (r, theta, zeta, v_par, weight)"""
        p = self.params
        eq = self.grid.equilibrium(r, theta, check=False)
        b, db_dr, db_dtheta, q = eq
        d = drift_terms(r, theta, v_par, mu, e, self.grid, include_drifts, eq=eq)
        zeta_dot = v_par * b / p.aspect_ratio
        e_par = e[2] * b / p.aspect_ratio
        # (b x grad B) . E
        cross = db_dr * e[1] - db_dtheta * e[0] / r
        dr = d.v_e[0] + d.v_d[0]
        dtheta = zeta_dot / q + (d.v_e[1] + d.v_d[1]) / r
        dv = -mu * (b / (q * p.aspect_ratio)) * db_dtheta + e_par + d.b_star * cross
        energy = 0.5 * v_par * v_par + mu * b
        vd_dot_e = d.v_d[0] * e[0] + d.v_d[1] * e[1]
        # -v_E . grad ln f0, grad ln f0 = -kappa r
        dw = (1.0 - w) * (d.v_e[0] * kappa(r, energy, p) + v_par * e_par + v_par * d.b_star * cross + vd_dot_e)
        return dr, dtheta, zeta_dot, dv, dw

    def _stage(self, store: ParticleStore, efield: GridVector | None, h: float, include_drifts: bool) -> int:
        def fetch(start: int, stop: int):
            if efield is None:
                return np.zeros((3, stop - start)), 0
            return gather(store, efield, self.grid, start, stop)

        def update(start: int, stop: int, e: np.ndarray):
            sl = slice(start, stop)
            dr, dth, dz, dv, dw = self.derivatives(store.r[sl], store.theta[sl], store.v_par[sl], store.mu[sl],
                                                   store.weight[sl], e, include_drifts)
            store.r[sl] = store.r0[sl] + h * dr
            store.theta[sl] = wrap_angle(store.theta0[sl] + h * dth)
            store.zeta[sl] = wrap_angle(store.zeta0[sl] + h * dz)
            store.v_par[sl] = store.v_par0[sl] + h * dv
            store.weight[sl] = store.weight0[sl] + h * dw

        if self.push_loop == PushLoop.fused:
            def fused(start: int, stop: int):
                e, outside = fetch(start, stop)
                update(start, stop, e)
                return outside
            return sum(run_chunks(fused, store.count, self.workers))

        # split: gather every chunk into a temporary, then update
        gathered = dict(zip(chunk_bounds(store.count, self.workers), run_chunks(fetch, store.count, self.workers)))
        run_chunks(lambda start, stop: update(start, stop, gathered[(start, stop)][0]), store.count, self.workers)
        return sum(g[1] for g in gathered.values())

    def advance(self, store: ParticleStore, efield: GridVector | None, dt: float | None = None,
                include_drifts: bool = True) -> PushStats:
        """
        One RK2 step: a half step with the derivatives at the start, then a full step from the saved
        state with the midpoint derivatives. mu is never written.
        :param efield: None for a field-free push
        """
        dt = self.params.dt if dt is None else dt
        stats = PushStats()
        store.save_state()
        stats.clamped_points += self._stage(store, efield, 0.5 * dt, include_drifts)
        stats.clamped_points += self._stage(store, efield, dt, include_drifts)
        store.check_finite()
        stats.reflections, stats.double_crossings = boundary(store, self.grid)
        stats.weight_cap_violations = store.weight_cap_violations(self.params.weight_cap)
        if stats.weight_cap_violations:
            log.warning(f"{stats.weight_cap_violations} particles exceed the weight cap {self.params.weight_cap}")
        if stats.clamped_points:
            log.debug(f"{stats.clamped_points} gyro-points clamped to the ghost rings in gather")
        return stats


def boundary(store: ParticleStore, grid: TorusGrid) -> tuple[int, int]:
    """
    Reflect particles that left [r_inner, r_outer]: r -> 2 r_bound - r.
    :return: (reflections, double crossings); a double crossing is clamped onto the domain
    """
    r = store.live("r")
    outer = r > grid.r_outer
    inner = r < grid.r_inner
    r[outer] = 2.0 * grid.r_outer - r[outer]
    r[inner] = 2.0 * grid.r_inner - r[inner]
    double = (r > grid.r_outer) | (r < grid.r_inner)
    n_double = int(np.count_nonzero(double))
    if n_double:
        log.warning(f"{n_double} particles crossed the radial domain in one step, dt is too large")
        np.clip(r, grid.r_inner, grid.r_outer, out=r)
    return int(np.count_nonzero(outer | inner)), n_double
