##########################
# Field-aligned toroidal grid
##########################

"""
Circular-cross-section torus with a field-aligned mesh.

Every poloidal plane carries the same nodes: ring i sits at radius r_i and holds mtheta(i) nodes at
theta_j = j * delta_t(i), plus one closure node at theta = 2*pi that duplicates node 0.
Nodes are numbered ring by ring, ring i starts at flat index igrid[i].
Interpolation between two neighbouring planes follows the field line, which advances theta by
twist_offset(i) = delta_zeta / q(r_i) from one plane to the next.
"""

import logging
import math
from dataclasses import dataclass

import numpy as np

from .config import RunParams

log = logging.getLogger(__name__)

TWO_PI = 2.0 * math.pi
# positions closer than this (in cell units) to a node are snapped onto it
SNAP = 1e-10


class DomainError(ValueError):
    pass


class PartitionError(ValueError):
    pass


def wrap_angle(a):
    """wrap into [0, 2*pi)"""
    w = np.mod(a, TWO_PI)
    # np.mod can round up to exactly 2*pi for tiny negative inputs
    return np.where(w >= TWO_PI, 0.0, w)


def _snap(x):
    rx = np.round(x)
    return np.where(np.abs(x - rx) < SNAP, rx, x)


@dataclass(frozen=True)
class RankWindow:
    """
    Part of the grid held by one rank: owned rings [own_lo, own_hi], rings with ghosts [lo, hi]
    and the toroidal wedge [plane * delta_zeta, (plane+1) * delta_zeta).
    Local arrays index nodes of rings lo..hi, local index 0 is node 0 of ring lo.
    """
    radial: int
    plane: int
    own_lo: int
    own_hi: int
    lo: int
    hi: int
    node_lo: int
    node_hi: int
    r_lo: float
    r_hi: float

    @property
    def n_local(self) -> int:
        return self.node_hi - self.node_lo


class TorusGrid:
    def __init__(self, params: RunParams):
        """
        Build the grid of a run (rings, node counts, equilibrium samples and twist offsets).
        :param params: validated run parameters
        """
        self.params = params
        self.mpsi = params.mpsi
        self.mthetamax = params.mthetamax
        self.ntoroidal = params.ntoroidal
        self.nghost = params.nghost
        self.r_inner = params.r_inner
        self.r_outer = params.r_outer
        self.aspect_ratio = params.aspect_ratio
        self.rho_star = params.rho_star

        self.delta_r = (params.r_outer - params.r_inner) / params.mpsi
        self.r = params.r_inner + self.delta_r * np.arange(params.mpsi + 1)
        self.r[-1] = params.r_outer
        # nearest even node count proportional to radius, at least 4
        half = np.floor(params.mthetamax * self.r / (2.0 * params.r_outer) + 0.5).astype(np.int64)
        self.mtheta = 2 * np.maximum(2, half)
        self.igrid = np.concatenate(([0], np.cumsum(self.mtheta + 1)))
        self.mgrid = int(self.igrid[-1])
        self.delta_t = TWO_PI / self.mtheta
        self.delta_zeta = TWO_PI / params.ntoroidal
        self.qprofile = self.q(self.r)
        self.twist_offset = self.delta_zeta / self.qprofile

        # flattened node tables: ring and theta of every node (closure nodes included)
        self.node_ring = np.repeat(np.arange(self.mpsi + 1), self.mtheta + 1)
        self.node_j = np.arange(self.mgrid) - self.igrid[self.node_ring]
        self.node_theta = self.node_j * self.delta_t[self.node_ring]
        self.node_r = self.r[self.node_ring]
        self.canonical = self.node_j < self.mtheta[self.node_ring]
        log.debug(f"built grid mpsi={self.mpsi} mthetamax={self.mthetamax} mgrid={self.mgrid}")

    # -- equilibrium --

    def check_domain(self, r):
        r = np.asarray(r, dtype=np.float64)
        tol = 1e-12
        if np.any(r < self.r_inner - tol) or np.any(r > self.r_outer + tol) or not np.all(np.isfinite(r)):
            raise DomainError(f"radius outside [{self.r_inner}, {self.r_outer}]")

    def q(self, r):
        return self.params.q(r)

    def jacobian(self, r, theta):
        return (1.0 + (r / self.aspect_ratio) * np.cos(theta)) ** 2

    def b_field(self, r, theta):
        return 1.0 / (1.0 + (r / self.aspect_ratio) * np.cos(theta))

    def equilibrium(self, r, theta, check: bool = True):
        """
        Field strength and its gradient at (r, theta).
        :return: (B, dB/dr, dB/dtheta, q)
        """
        if check:
            self.check_domain(r)
        eps_cos = (r / self.aspect_ratio) * np.cos(theta)
        b = 1.0 / (1.0 + eps_cos)
        db_dr = -(np.cos(theta) / self.aspect_ratio) * b * b
        db_dtheta = (r / self.aspect_ratio) * np.sin(theta) * b * b
        return b, db_dr, db_dtheta, self.q(r)

    # -- decomposition --

    def radial_partition(self, nradial_domains: int) -> list[tuple[int, int]]:
        """
        Split the rings into equal-area radial domains.
        :return: owned ring range (first, last) per domain
        """
        if nradial_domains < 1:
            raise PartitionError(f"need at least one radial domain (got {nradial_domains})")
        radii = equal_area_radii(self.r_inner, self.r_outer, nradial_domains)
        bounds = [0]
        for rk in radii[1:-1]:
            bounds.append(int(np.floor((rk - self.r_inner) / self.delta_r + 0.5)))
        bounds.append(self.mpsi + 1)
        owned = []
        for k in range(nradial_domains):
            first, end = bounds[k], bounds[k + 1]
            if end - first < self.nghost:
                raise PartitionError(f"radial domain {k} owns {max(0, end - first)} rings, "
                                     f"fewer than nghost={self.nghost} ({nradial_domains} domains on {self.mpsi + 1} rings)")
            owned.append((first, end - 1))
        return owned

    def window(self, radial: int, plane: int, owned: list[tuple[int, int]]) -> RankWindow:
        own_lo, own_hi = owned[radial]
        lo = max(0, own_lo - self.nghost)
        hi = min(self.mpsi, own_hi + self.nghost)
        # particles owned by this domain live in [r_lo, r_hi), the outermost domain includes r_outer
        r_lo = float(self.r[own_lo])
        r_hi = float(self.r[own_hi + 1]) if own_hi < self.mpsi else self.r_outer
        return RankWindow(radial=radial, plane=plane, own_lo=own_lo, own_hi=own_hi, lo=lo, hi=hi,
                          node_lo=int(self.igrid[lo]), node_hi=int(self.igrid[hi + 1]), r_lo=r_lo, r_hi=r_hi)

    def full_window(self, plane: int = 0) -> RankWindow:
        return self.window(0, plane, [(0, self.mpsi)])

    def radial_owner(self, r, owned: list[tuple[int, int]]):
        """radial domain owning particles at radius r"""
        edges = np.array([self.r[lo] for lo, _ in owned[1:]])
        return np.searchsorted(edges, r, side="right")

    def toroidal_owner(self, zeta):
        return np.minimum(np.floor(wrap_angle(zeta) / self.delta_zeta).astype(np.int64), self.ntoroidal - 1)

    # -- index maps --

    def ring_nodes(self, i: int) -> slice:
        """global flat nodes of ring i without the closure node"""
        return slice(int(self.igrid[i]), int(self.igrid[i]) + int(self.mtheta[i]))

    def window_nodes(self, w: RankWindow, owned_only: bool = False, canonical_only: bool = True) -> np.ndarray:
        """global flat indices of the nodes in a window"""
        lo, hi = (w.own_lo, w.own_hi) if owned_only else (w.lo, w.hi)
        nodes = np.arange(self.igrid[lo], self.igrid[hi + 1])
        if canonical_only:
            nodes = nodes[self.canonical[nodes]]
        return nodes

    def closure_pairs(self, w: RankWindow) -> tuple[np.ndarray, np.ndarray]:
        """local indices of the closure nodes of a window and of the nodes they duplicate"""
        rings = np.arange(w.lo, w.hi + 1)
        first = self.igrid[rings] - w.node_lo
        return first + self.mtheta[rings], first

    def fill_closure(self, values: np.ndarray, w: RankWindow):
        closure, first = self.closure_pairs(w)
        values[..., closure] = values[..., first]

    def owned_canonical_local(self, w: RankWindow) -> np.ndarray:
        return self.window_nodes(w, owned_only=True) - w.node_lo

    def ring_position(self, r, window: RankWindow | None = None):
        """
        Lower ring index and radial weight for radii r, clamped into the window.
        :return: (i0, wr, clamped, outside_window)
        """
        lo, hi = (0, self.mpsi) if window is None else (window.lo, window.hi)
        y = _snap((np.asarray(r, dtype=np.float64) - self.r_inner) / self.delta_r)
        clamped = (y < lo) | (y > hi)
        at_boundary = ((y < lo) & (lo == 0)) | ((y > hi) & (hi == self.mpsi))
        y = np.clip(y, lo, hi)
        i0 = np.minimum(np.floor(y).astype(np.int64), hi - 1)
        wr = y - i0
        return i0, wr, clamped, clamped & ~at_boundary

    def node_position(self, ring, theta):
        """
        Node pair on the given rings enclosing theta (periodic).
        :return: (j0, j1, wt) with j1 == (j0+1) mod mtheta
        """
        m = self.mtheta[ring]
        x = _snap(wrap_angle(theta) / self.delta_t[ring])
        j0 = np.floor(x).astype(np.int64)
        wt = x - j0
        j0 = np.mod(j0, m)
        j1 = np.mod(j0 + 1, m)
        return j0, j1, wt

    def locate(self, r, theta, zeta, window: RankWindow | None = None, plane_origin: int | None = None):
        """
        Trilinear cell of points (r, theta, zeta) on the field-aligned grid.
        Without a window the whole grid is used and nodes are global flat indices, planes are global
        plane indices. With a window nodes are local indices and planes are 0 (left) and 1 (right)
        relative to `plane_origin`, zeta outside that wedge is clamped onto its boundary planes.
        """
        r = np.asarray(r, dtype=np.float64)
        theta = np.asarray(theta, dtype=np.float64)
        zeta = np.asarray(zeta, dtype=np.float64)
        n = r.shape[0]

        if plane_origin is None:
            z = _snap(wrap_angle(zeta) / self.delta_zeta)
            left = np.minimum(np.floor(z).astype(np.int64), self.ntoroidal - 1)
            wz = z - left
            planes = np.stack((left, np.mod(left + 1, self.ntoroidal)))
        else:
            rel = wrap_angle(zeta - plane_origin * self.delta_zeta)
            # just below the wedge start is nearer than the far end of the torus
            rel = np.where(rel > 0.5 * (TWO_PI + self.delta_zeta), rel - TWO_PI, rel)
            wz = np.clip(_snap(rel / self.delta_zeta), 0.0, 1.0)
            planes = np.stack((np.zeros(n, dtype=np.int64), np.ones(n, dtype=np.int64)))

        i0, wr, clamped, outside = self.ring_position(r, window)
        offset = 0 if window is None else window.node_lo

        nodes = np.empty((8, n), dtype=np.int64)
        weights = np.empty((8, n), dtype=np.float64)
        c = 0
        for p, (shift, wp) in enumerate(((-wz, 1.0 - wz), (1.0 - wz, wz))):
            for ring, wring in ((i0, 1.0 - wr), (i0 + 1, wr)):
                j0, j1, wt = self.node_position(ring, theta + shift * self.twist_offset[ring])
                base = self.igrid[ring] - offset
                nodes[c] = base + j0
                nodes[c + 1] = base + j1
                weights[c] = wp * wring * (1.0 - wt)
                weights[c + 1] = wp * wring * wt
                c += 2
        return CellLocation(nodes=nodes, weights=weights, planes=planes, clamped=clamped, outside=outside)

    def summary(self) -> str:
        lines = [f"# mpsi={self.mpsi} mthetamax={self.mthetamax} ntoroidal={self.ntoroidal} mgrid={self.mgrid}",
                 f"{'ring':>5} {'r':>12} {'mtheta':>7} {'q':>12} {'twist_offset':>14}"]
        for i in range(self.mpsi + 1):
            lines.append(f"{i:>5} {self.r[i]:>12.8f} {self.mtheta[i]:>7} {self.qprofile[i]:>12.8f} "
                         f"{self.twist_offset[i]:>14.10f}")
        return "\n".join(lines) + "\n"


@dataclass
class CellLocation:
    """
    8 corners per point: corners 0-3 on the left plane, 4-7 on the right plane,
    each plane ordered (inner ring j0, inner ring j1, outer ring j0, outer ring j1).
    """
    nodes: np.ndarray
    weights: np.ndarray
    planes: np.ndarray
    clamped: np.ndarray
    outside: np.ndarray

    def plane_of_corner(self):
        return np.concatenate((np.repeat(self.planes[:1], 4, axis=0), np.repeat(self.planes[1:], 4, axis=0)))


def equal_area_radii(r_inner: float, r_outer: float, k: int) -> np.ndarray:
    """radii splitting the annulus [r_inner, r_outer] into k rings of equal area"""
    f = np.arange(k + 1) / k
    return np.sqrt(r_inner ** 2 + f * (r_outer ** 2 - r_inner ** 2))


def build_grid(params: RunParams) -> TorusGrid:
    return TorusGrid(params.validate())


def memory_footprint(params: RunParams) -> dict:
    """
    Per toroidal domain memory of the charge and field grids (two planes) and of the particles
    (12 reals per particle).
    """
    mgrid = build_grid(params).mgrid
    mib = 1024.0 ** 2
    return {
        "mgrid": mgrid,
        "chargei_mib": mgrid * 2 * 8 / mib,
        "evector_mib": mgrid * 2 * 3 * 8 / mib,
        "particles_gib": mgrid * params.micell * 12 * 8 / 1024.0 ** 3,
        "total_particles": params.ntoroidal * mgrid * params.micell,
    }
