##########################
# Grid kernels: Poisson, smoothing, field
##########################

"""
The grid-side kernels. Their cost scales with the number of grid points, never with the particle count.
All loops over rings are flattened: stencils are precomputed index arrays over the window's nodes.
"""

import logging
import dataclasses
from dataclasses import dataclass

import numpy as np
import scipy.linalg
import scipy.sparse as sp

from .config import RunParams
from .deposit import GridScalar, fill_ghosts
from .geometry import RankWindow, TorusGrid
from .transport import CommKind, GhostMode, Transport

log = logging.getLogger(__name__)

SMOOTH_PASSES = ("theta", "radial", "toroidal")


class GhostZoneError(RuntimeError):
    pass


@dataclass
class GridVector:
    """E = (E_r, E_theta, E_zeta) on both planes of a window, shape (3, 2, n_local)"""
    window: RankWindow
    values: np.ndarray

    @staticmethod
    def zeros(window: RankWindow) -> "GridVector":
        return GridVector(window, np.zeros((3, 2, window.n_local)))


@dataclass
class SolveInfo:
    iterations: int = 0
    converged: bool = True
    residuals: list[float] = dataclasses.field(default_factory=list)


@dataclass
class LocalOperator:
    rows: np.ndarray
    matrix: sp.csr_matrix


class GyroOperator:
    def __init__(self, grid: TorusGrid, rho_star: float | None = None, tau: float | None = None):
        """
        Four-point gyroaverage G at the thermal gyroradius and its square, on one poloidal plane.
        :param rho_star: gyroradius scale, defaults to the grid's 1/a_over_rho
        :param tau: Ti/Te, defaults to the run's value
        """
        self.grid = grid
        self.rho_star = grid.rho_star if rho_star is None else rho_star
        self.c1 = 1.0
        self.c2 = 1.0 / (grid.params.tau if tau is None else tau)
        self.g = self._assemble()
        self.g2 = (self.g @ self.g).tocsr()
        self._local: dict[RankWindow, LocalOperator] = {}
        self._zonal = None

    def _assemble(self) -> sp.csr_matrix:
        g = self.grid
        nodes = np.arange(g.mgrid)
        r = g.node_r
        theta = g.node_theta
        rho = self.rho_star / g.b_field(r, theta)
        pr = np.concatenate((np.clip(r + rho, g.r_inner, g.r_outer), r, np.clip(r - rho, g.r_inner, g.r_outer), r))
        pt = np.concatenate((theta, theta + rho / r, theta, theta - rho / r))
        row = np.tile(nodes, 4)

        i0, wr, _, _ = g.ring_position(pr)
        rows, cols, data = [], [], []
        for ring, wring in ((i0, 1.0 - wr), (i0 + 1, wr)):
            j0, j1, wt = g.node_position(ring, pt)
            base = g.igrid[ring]
            rows += [row, row]
            cols += [base + j0, base + j1]
            data += [0.25 * wring * (1.0 - wt), 0.25 * wring * wt]
        m = sp.csr_matrix((np.concatenate(data), (np.concatenate(rows), np.concatenate(cols))),
                          shape=(g.mgrid, g.mgrid))
        m.eliminate_zeros()
        return m

    def system_matrix(self) -> tuple[sp.csr_matrix, np.ndarray, np.ndarray]:
        """
        The assembled system (c1 + c2) phi - c1 G^2 phi = rhs over canonical nodes, Dirichlet rings as identity rows.
        :return: (matrix, canonical global node indices, boundary mask over those nodes)
        """
        g = self.grid
        can = np.flatnonzero(g.canonical)
        a = (self.c1 + self.c2) * sp.identity(can.size, format="csr") - self.c1 * self.g2[can][:, can]
        boundary = (g.node_ring[can] == 0) | (g.node_ring[can] == g.mpsi)
        interior = sp.diags(np.where(boundary, 0.0, 1.0))
        a = (interior @ a + sp.diags(np.where(boundary, 1.0, 0.0))).tocsr()
        return a, can, boundary

    def local_operator(self, window: RankWindow) -> LocalOperator:
        """G^2 rows of the window's owned interior nodes, columns mapped to local node indices"""
        op = self._local.get(window)
        if op is not None:
            return op
        g = self.grid
        rows = g.window_nodes(window, owned_only=True)
        rows = rows[(g.node_ring[rows] != 0) & (g.node_ring[rows] != g.mpsi)]
        sub = self.g2[rows].tocoo()
        if sub.nnz and (sub.col.min() < window.node_lo or sub.col.max() >= window.node_hi):
            raise GhostZoneError(f"gyroaverage stencil of radial domain {window.radial} reaches beyond its "
                                 f"{g.nghost} ghost rings, increase nghost or the grid spacing")
        matrix = sp.csr_matrix((sub.data, (sub.row, sub.col - window.node_lo)), shape=(rows.size, window.n_local))
        op = LocalOperator(rows=rows - window.node_lo, matrix=matrix)
        self._local[window] = op
        return op

    def zonal_matrix(self) -> np.ndarray:
        """ring-averaged G^2: M[i, k] = mean over nodes of ring i of the G^2 weight landing on ring k"""
        if self._zonal is None:
            g = self.grid
            can = np.flatnonzero(g.canonical)
            ring = g.node_ring[can]
            avg = sp.csr_matrix((1.0 / g.mtheta[ring], (ring, can)), shape=(g.mpsi + 1, g.mgrid))
            to_ring = sp.csr_matrix((np.ones(can.size), (can, ring)), shape=(g.mgrid, g.mpsi + 1))
            self._zonal = (avg @ self.g2 @ to_ring).toarray()
        return self._zonal


def build_gyro_operator(grid: TorusGrid, rho_star: float | None = None) -> GyroOperator:
    return GyroOperator(grid, rho_star=rho_star)


def poisson(rhs: list[GridScalar], op: GyroOperator, transport: Transport, omega: float = 2.0 / 3.0,
            tol: float = 1e-6, max_iter: int = 200) -> tuple[list[GridScalar], SolveInfo]:
    """
    Weighted Jacobi iteration for (c1 + c2) phi - c1 G^2 phi = rhs on every rank's own plane, phi = 0 on the
    first and last ring. Stops at a relative residual (max norm) <= tol or after max_iter sweeps.
    """
    grid = op.grid
    windows = [f.window for f in rhs]
    locals_ = [op.local_operator(w) for w in windows]
    diag = op.c1 + op.c2
    phi = [np.zeros((2, w.n_local)) for w in windows]
    b = [f.values[0, lo.rows] for f, lo in zip(rhs, locals_)]
    info = SolveInfo()

    def global_max(local: list[float]) -> float:
        return float(transport.allreduce_max([np.array([v]) for v in local], CommKind.world)[0][0])

    rhs_norm = global_max([float(np.max(np.abs(x), initial=0.0)) for x in b])
    if rhs_norm == 0.0:
        info.residuals.append(0.0)
        fill_ghosts(phi, windows, grid, transport)
        return [GridScalar(w, p) for w, p in zip(windows, phi)], info

    for k in range(max_iter + 1):
        res = []
        for p, lo, bk in zip(phi, locals_, b):
            res.append(bk - (diag * p[0, lo.rows] - op.c1 * (lo.matrix @ p[0])))
        rel = global_max([float(np.max(np.abs(x), initial=0.0)) for x in res]) / rhs_norm
        info.residuals.append(rel)
        if rel <= tol:
            break
        if k == max_iter:
            info.converged = False
            break
        for p, lo, rk in zip(phi, locals_, res):
            p[0, lo.rows] += (omega / diag) * rk
        transport.exchange_ghosts(phi, windows, grid, CommKind.radial, GhostMode.fill, own_plane_only=True)
        info.iterations += 1

    if not info.converged:
        log.warning(f"Jacobi solver stopped after {max_iter} iterations at relative residual {info.residuals[-1]:.3e}")
    fill_ghosts(phi, windows, grid, transport)
    return [GridScalar(w, p) for w, p in zip(windows, phi)], info


def zonal_solve(flux_avg: np.ndarray, op: GyroOperator) -> np.ndarray:
    """flux-surface averaged equation reduced to the rings, phi00 = 0 on the first and last ring"""
    m = op.zonal_matrix()
    n = m.shape[0]
    a = op.c1 * (np.eye(n) - m) + op.c2 * np.eye(n)
    phi00 = np.zeros(n)
    if n > 2 and np.any(flux_avg[1:-1] != 0.0):
        phi00[1:-1] = scipy.linalg.solve(a[1:-1, 1:-1], flux_avg[1:-1])
    return phi00


def potential(density: list[GridScalar], flux_avg: np.ndarray, op: GyroOperator, transport: Transport,
              params: RunParams) -> tuple[list[GridScalar], SolveInfo]:
    """non-zonal part by Jacobi iteration, zonal part by the ring solve, then recombined"""
    grid = op.grid
    rhs = []
    for f in density:
        ring = grid.node_ring[f.window.node_lo:f.window.node_hi]
        rhs.append(GridScalar(f.window, f.values - flux_avg[ring]))
    phi, info = poisson(rhs, op, transport, omega=params.jacobi_omega, tol=params.jacobi_tol,
                        max_iter=params.jacobi_max_iter)
    phi00 = zonal_solve(flux_avg, op)
    for f in phi:
        f.values += phi00[grid.node_ring[f.window.node_lo:f.window.node_hi]]
    return phi, info


@dataclass
class _Interp:
    i0: np.ndarray
    i1: np.ndarray
    wt: np.ndarray

    def __call__(self, values: np.ndarray) -> np.ndarray:
        return values[..., self.i0] * (1.0 - self.wt) + values[..., self.i1] * self.wt


class Stencils:
    """flattened neighbour tables over all nodes of a window"""

    def __init__(self, grid: TorusGrid, w: RankWindow):
        sl = slice(w.node_lo, w.node_hi)
        ring = grid.node_ring[sl]
        theta = grid.node_theta[sl]
        m = grid.mtheta[ring]
        base = grid.igrid[ring] - w.node_lo
        jj = np.mod(grid.node_j[sl], m)
        self.ring = ring
        self.r = grid.node_r[sl]
        self.dtheta = grid.delta_t[ring]
        self.prev = base + np.mod(jj - 1, m)
        self.next = base + np.mod(jj + 1, m)

        self.inner_ok = ring > w.lo
        self.outer_ok = ring < w.hi
        self.inner = self._ring_interp(grid, w, np.where(self.inner_ok, ring - 1, ring), theta)
        self.outer = self._ring_interp(grid, w, np.where(self.outer_ok, ring + 1, ring), theta)
        self.radial_interior = self.inner_ok & self.outer_ok & (ring > 0) & (ring < grid.mpsi)
        self.first_ring = ring == 0
        self.last_ring = ring == grid.mpsi

        tw = grid.twist_offset[ring]
        self.left = self._ring_interp(grid, w, ring, theta - tw)
        self.right = self._ring_interp(grid, w, ring, theta + tw)

    @staticmethod
    def _ring_interp(grid: TorusGrid, w: RankWindow, ring: np.ndarray, theta: np.ndarray) -> _Interp:
        j0, j1, wt = grid.node_position(ring, theta)
        base = grid.igrid[ring] - w.node_lo
        return _Interp(base + j0, base + j1, wt)


class GridKernels:
    def __init__(self, grid: TorusGrid):
        self.grid = grid
        self._stencils: dict[RankWindow, Stencils] = {}

    def stencils(self, w: RankWindow) -> Stencils:
        s = self._stencils.get(w)
        if s is None:
            s = Stencils(self.grid, w)
            self._stencils[w] = s
        return s

    def smooth(self, fields: list[GridScalar], transport: Transport, passes=SMOOTH_PASSES) -> list[GridScalar]:
        """
        1-2-1 filter along theta (periodic), along r (first and last ring untouched) and along the field line
        across planes. Ghosts are refreshed after every pass.
        """
        grid = self.grid
        windows = [f.window for f in fields]
        out = [f.values.copy() for f in fields]
        for p in passes:
            if p not in SMOOTH_PASSES:
                raise ValueError(f"unknown smoothing pass '{p}', valid passes are {list(SMOOTH_PASSES)}")
            lefts = transport.sendrecv_planes([v[0] for v in out]) if p == "toroidal" else None
            for k, (v, w) in enumerate(zip(out, windows)):
                s = self.stencils(w)
                own = v[0]
                match p:
                    case "theta":
                        new = 0.25 * own[s.prev] + 0.5 * own + 0.25 * own[s.next]
                    case "radial":
                        new = own.copy()
                        mask = s.radial_interior
                        new[mask] = (0.25 * s.inner(own) + 0.5 * own + 0.25 * s.outer(own))[mask]
                    case _:
                        new = 0.25 * s.left(lefts[k]) + 0.5 * own + 0.25 * s.right(v[1])
                v[0] = new
            fill_ghosts(out, windows, grid, transport)
        return [GridScalar(w, v) for w, v in zip(windows, out)]

    def field(self, phi: list[GridScalar], transport: Transport) -> list[GridVector]:
        """E = -grad(phi): centered in r (one-sided on the first and last ring), centered along theta,
        and along the field line between the neighbouring planes"""
        grid = self.grid
        windows = [f.window for f in phi]
        lefts = transport.sendrecv_planes([f.values[0] for f in phi])
        out = []
        for f, left in zip(phi, lefts):
            s = self.stencils(f.window)
            own = f.values[0]
            e = np.zeros((3, 2, f.window.n_local))
            er = np.zeros_like(own)
            mid = s.radial_interior
            er[mid] = (-(s.outer(own) - s.inner(own)) / (2.0 * grid.delta_r))[mid]
            first = s.first_ring & s.outer_ok
            er[first] = (-(s.outer(own) - own) / grid.delta_r)[first]
            last = s.last_ring & s.inner_ok
            er[last] = (-(own - s.inner(own)) / grid.delta_r)[last]
            e[0, 0] = er
            e[1, 0] = -(own[s.next] - own[s.prev]) / (2.0 * s.r * s.dtheta)
            e[2, 0] = -(s.right(f.values[1]) - s.left(left)) / (2.0 * grid.delta_zeta)
            out.append(e)
        fill_ghosts(out, windows, grid, transport)
        return [GridVector(w, e) for w, e in zip(windows, out)]


def smooth(fields: list[GridScalar], grid: TorusGrid, transport: Transport, passes=SMOOTH_PASSES,
           kernels: GridKernels | None = None) -> list[GridScalar]:
    return (kernels or GridKernels(grid)).smooth(fields, transport, passes)


def field(phi: list[GridScalar], grid: TorusGrid, transport: Transport,
          kernels: GridKernels | None = None) -> list[GridVector]:
    return (kernels or GridKernels(grid)).field(phi, transport)

