##########################
# Charge deposition
##########################

import logging
from dataclasses import dataclass, field

import numpy as np

from .geometry import RankWindow, TorusGrid
from .kernel import NULL_CLOCK, KernelClock, KernelId, run_chunks
from .particles import NumericalError, ParticleStore, gyro_points
from .transport import CommKind, GhostMode, Transport

log = logging.getLogger(__name__)


@dataclass
class GridScalar:
    """
    Scalar on a rank's window: values[0] is the rank's own plane, values[1] its right boundary plane
    (the right neighbour's own plane). Node axis is local to the window, closure nodes included.
    """
    window: RankWindow
    values: np.ndarray


@dataclass
class ScatterResult:
    values: np.ndarray
    dropped_points: int = 0
    dropped_weight: float = 0.0


@dataclass
class ChargeResult:
    charge: list[GridScalar]
    density: list[GridScalar]
    flux_average: np.ndarray
    deposited: float
    particle_weight: float
    dropped_points: int
    dropped_weight: float
    scatter: list[ScatterResult] = field(default_factory=list)

    @property
    def conservation_error(self) -> float:
        """relative mismatch between the deposited charge and the weight of the kept gyro-points"""
        expected = self.particle_weight - self.dropped_weight
        scale = max(abs(expected), abs(self.particle_weight), 1e-300)
        return abs(self.deposited - expected) / scale


def scatter(store: ParticleStore, grid: TorusGrid, window: RankWindow, workers: int = 1) -> ScatterResult:
    """
    Deposit w/4 of every particle at each of its four gyro-points onto the 8 surrounding nodes
    of the rank's two planes. Every worker fills a private copy of the grid, copies are summed in worker order.
    Gyro-points beyond the ghost rings are dropped and counted.
    """
    n_local = window.n_local
    weight = store.live("weight")
    bad = np.flatnonzero(~np.isfinite(weight))
    if bad.size:
        raise NumericalError("non-finite weight in charge deposition", index=int(bad[0]))

    def deposit_chunk(start: int, stop: int):
        n = stop - start
        replica = np.zeros(2 * n_local)
        if n == 0:
            return replica, 0, 0.0
        r = store.r[start:stop]
        pr, pt = gyro_points(r, store.theta[start:stop], store.mu[start:stop], grid)
        pz = np.broadcast_to(store.zeta[start:stop], (4, n))
        cell = grid.locate(pr.ravel(), pt.ravel(), pz.ravel(), window=window, plane_origin=window.plane)
        pw = np.broadcast_to(0.25 * weight[start:stop], (4, n)).ravel()
        keep = ~cell.outside
        flat = cell.plane_of_corner() * n_local + cell.nodes
        replica += np.bincount(flat[:, keep].ravel(), weights=(cell.weights[:, keep] * pw[keep]).ravel(),
                               minlength=2 * n_local)
        return replica, int(np.count_nonzero(cell.outside)), float(np.sum(pw[cell.outside]))

    parts = run_chunks(deposit_chunk, store.count, workers)
    values = parts[0][0]
    for replica, _, _ in parts[1:]:
        values = values + replica
    dropped_points = sum(p[1] for p in parts)
    dropped_weight = sum(p[2] for p in parts)
    return ScatterResult(values=values.reshape(2, n_local), dropped_points=dropped_points,
                         dropped_weight=dropped_weight)


def density_norm(grid: TorusGrid, window: RankWindow, micell: int) -> np.ndarray:
    """expected marker count around every local node: micell * J / <J>_ring"""
    r = grid.node_r[window.node_lo:window.node_hi]
    theta = grid.node_theta[window.node_lo:window.node_hi]
    eps = r / grid.aspect_ratio
    return micell * grid.jacobian(r, theta) / (1.0 + 0.5 * eps * eps)


def owned_sum(fields: list[GridScalar], grid: TorusGrid, transport: Transport) -> float:
    """sum over the canonical owned nodes of each rank's own plane, counting every spatial domain once"""
    topo = transport.topology
    local = []
    for rank, f in enumerate(fields):
        if topo.coords(rank).replica == 0:
            local.append(float(np.sum(f.values[0, grid.owned_canonical_local(f.window)])))
        else:
            local.append(0.0)
    return transport.global_sum(local)


def fill_ghosts(fields: list[np.ndarray], windows: list[RankWindow], grid: TorusGrid, transport: Transport):
    """make closure nodes, ghost rings and the right boundary plane consistent with the owners"""
    for a, w in zip(fields, windows):
        grid.fill_closure(a, w)
    transport.exchange_ghosts(fields, windows, grid, CommKind.radial, GhostMode.fill)
    transport.exchange_ghosts(fields, windows, grid, CommKind.toroidal, GhostMode.fill)


def merge_charge(raw: list[np.ndarray], windows: list[RankWindow], grid: TorusGrid, transport: Transport):
    """sum particle replicas, then radial ghosts, then the right boundary plane into its owner, in place"""
    merged = transport.particle_reduce_grid(raw)
    transport.exchange_ghosts(merged, windows, grid, CommKind.radial, GhostMode.merge)
    transport.exchange_ghosts(merged, windows, grid, CommKind.toroidal, GhostMode.merge)
    return merged


def flux_surface_average(fields: list[GridScalar], grid: TorusGrid, transport: Transport) -> list[np.ndarray]:
    """
    Per-ring mean over all canonical nodes of all planes, replicated on every rank.
    The sum runs over the toroidal and radial communicators; particle replicas already hold identical
    merged grids and are not summed again.
    """
    local = []
    for f in fields:
        w = f.window
        nodes = grid.window_nodes(w, owned_only=True)
        local.append(np.bincount(grid.node_ring[nodes], weights=f.values[0, nodes - w.node_lo],
                                 minlength=grid.mpsi + 1))
    summed = transport.allreduce_sum(local, CommKind.radial)
    summed = transport.allreduce_sum(summed, CommKind.toroidal)
    return [s / (grid.mtheta * grid.ntoroidal) for s in summed]


def charge(stores: list[ParticleStore], grid: TorusGrid, windows: list[RankWindow], transport: Transport,
           micell: int, workers: int = 1, clock: KernelClock = NULL_CLOCK) -> ChargeResult:
    """
    The charge kernel over all ranks: scatter, merge of replicas, ghosts and boundary planes,
    density normalization and the flux-surface average.
    """
    topo = transport.topology
    scatters = []
    for rank in range(topo.size):
        with clock.measure(KernelId.charge, rank):
            scatters.append(scatter(stores[rank], grid, windows[rank], workers))

    with clock.measure(KernelId.charge, range(topo.size)):
        merged = merge_charge([s.values for s in scatters], windows, grid, transport)
        charge_fields = [GridScalar(w, m) for w, m in zip(windows, merged)]
        deposited = owned_sum(charge_fields, grid, transport)
        density = [f.values / density_norm(grid, f.window, micell) for f in charge_fields]
        fill_ghosts(density, windows, grid, transport)
        fill_ghosts(merged, windows, grid, transport)
        density_fields = [GridScalar(w, d) for w, d in zip(windows, density)]
        zonal = flux_surface_average(density_fields, grid, transport)

        particle_weight = transport.global_sum([s.total_weight() for s in stores])
        dropped_weight = transport.global_sum([s.dropped_weight for s in scatters])
        dropped_points = int(transport.global_sum([float(s.dropped_points) for s in scatters]))

    if dropped_points:
        log.warning(f"{dropped_points} gyro-points beyond the ghost rings dropped (weight {dropped_weight:.3e})")
    return ChargeResult(charge=charge_fields, density=density_fields, flux_average=zonal[0], deposited=deposited,
                        particle_weight=particle_weight, dropped_points=dropped_points,
                        dropped_weight=dropped_weight, scatter=scatters)


def global_field(fields: list[GridScalar], grid: TorusGrid, transport: Transport) -> np.ndarray:
    """
    Gather the own planes of all spatial domains into a (ntoroidal, mgrid) array of canonical values
    (closure nodes copied from node 0). Used for diagnostics output and tests.
    """
    topo = transport.topology
    out = np.zeros((grid.ntoroidal, grid.mgrid))
    for rank, f in enumerate(fields):
        c = topo.coords(rank)
        if c.replica != 0:
            continue
        nodes = grid.window_nodes(f.window, owned_only=True, canonical_only=False)
        out[c.toroidal, nodes] = f.values[0, nodes - f.window.node_lo]
    return out
