##########################
# Marker particles
##########################

"""
Gyrocenter markers stored attribute by attribute: one contiguous float64 array per attribute
(r, theta, zeta, v_par, mu, weight) plus the RK2 copies of the same six, each `capacity` long.
Only the first `count` entries are live.
"""

import logging

import numpy as np

from .config import RunParams
from .geometry import TWO_PI, RankWindow, TorusGrid

log = logging.getLogger(__name__)

ATTRIBUTES = ("r", "theta", "zeta", "v_par", "mu", "weight")
SAVED_ATTRIBUTES = tuple(a + "0" for a in ATTRIBUTES)
ALL_ATTRIBUTES = ATTRIBUTES + SAVED_ATTRIBUTES

SNAPSHOT_MAGIC = b"GYROSNAP"
_SNAPSHOT_HEADER = np.dtype([("magic", "S8"), ("count", "<u8"), ("nattr", "<u4")])
_SNAPSHOT_NAME = np.dtype("S16")


class CapacityError(RuntimeError):
    pass


class NumericalError(RuntimeError):
    def __init__(self, message: str, index: int | None = None):
        super().__init__(message if index is None else f"{message} (particle {index})")
        self.index = index


class ParticleStore:
    def __init__(self, capacity: int):
        if capacity < 0:
            raise CapacityError(f"negative capacity {capacity}")
        self.capacity = capacity
        self.count = 0
        for a in ALL_ATTRIBUTES:
            setattr(self, a, np.zeros(capacity, dtype=np.float64))
        self.bin_index = None

    @staticmethod
    def from_columns(columns: dict, capacity: int | None = None) -> "ParticleStore":
        """
        Build a store from live attributes; missing saved attributes are copied from the live ones.
        """
        n = len(columns["r"])
        s = ParticleStore(n if capacity is None else capacity)
        if n > s.capacity:
            raise CapacityError(f"{n} particles exceed capacity {s.capacity}")
        for a in ATTRIBUTES:
            getattr(s, a)[:n] = columns[a]
        for a, a0 in zip(ATTRIBUTES, SAVED_ATTRIBUTES):
            getattr(s, a0)[:n] = columns.get(a0, columns[a])
        s.count = n
        return s

    def live(self, attribute: str) -> np.ndarray:
        return getattr(self, attribute)[:self.count]

    def columns(self, attributes=ALL_ATTRIBUTES) -> dict:
        return {a: self.live(a).copy() for a in attributes}

    def as_matrix(self) -> np.ndarray:
        """(12, count) copy in canonical attribute order"""
        return np.stack([self.live(a) for a in ALL_ATTRIBUTES]) if self.count else np.zeros((12, 0))

    def save_state(self):
        for a, a0 in zip(ATTRIBUTES, SAVED_ATTRIBUTES):
            getattr(self, a0)[:self.count] = self.live(a)

    def append(self, block: np.ndarray):
        """append a (12, n) block in canonical attribute order"""
        n = block.shape[1]
        if self.count + n > self.capacity:
            raise CapacityError(f"receiving {n} particles overflows capacity {self.capacity} (holding {self.count})")
        for k, a in enumerate(ALL_ATTRIBUTES):
            getattr(self, a)[self.count:self.count + n] = block[k]
        self.count += n

    def take(self, mask: np.ndarray) -> np.ndarray:
        """
        Remove the particles selected by mask (over live particles) and return them as a (12, n) block.
        Holes are backfilled from the tail, the order of the remaining particles is not preserved.
        """
        holes = np.flatnonzero(mask)
        block = np.stack([self.live(a)[holes] for a in ALL_ATTRIBUTES]) if holes.size else np.zeros((12, 0))
        n_keep = self.count - holes.size
        front_holes = holes[holes < n_keep]
        # live particles beyond n_keep, last one fills the first hole
        tail = n_keep + np.flatnonzero(~mask[n_keep:self.count])
        tail = tail[::-1]
        for a in ALL_ATTRIBUTES:
            arr = getattr(self, a)
            arr[front_holes] = arr[tail]
        self.count = n_keep
        self.bin_index = None
        return block

    def permute(self, order: np.ndarray):
        for a in ALL_ATTRIBUTES:
            arr = getattr(self, a)
            arr[:self.count] = arr[:self.count][order]

    def total_weight(self) -> float:
        return float(np.sum(self.live("weight")))

    @property
    def nbytes(self) -> int:
        return sum(getattr(self, a).nbytes for a in ALL_ATTRIBUTES)

    def check_finite(self, attributes=ATTRIBUTES):
        for a in attributes:
            bad = np.flatnonzero(~np.isfinite(self.live(a)))
            if bad.size:
                raise NumericalError(f"non-finite {a}", index=int(bad[0]))

    def weight_cap_violations(self, cap: float) -> int:
        return int(np.count_nonzero(np.abs(self.live("weight")) > cap))


def particle_count(grid: TorusGrid, window: RankWindow, micell: int, npartdom: int, replica: int) -> int:
    """particles of one replica: owned grid points times micell, split over the particle replicas"""
    nodes = int(grid.igrid[window.own_hi + 1] - grid.igrid[window.own_lo])
    total = nodes * micell
    return total // npartdom + (1 if replica < total % npartdom else 0)


def rank_rng(seed: int, rank: int) -> np.random.Generator:
    return np.random.default_rng(np.random.SeedSequence([seed, rank]))


def load(grid: TorusGrid, params: RunParams, window: RankWindow, rank: int, replica: int = 0,
         rng: np.random.Generator | None = None) -> ParticleStore:
    """
    Load a Maxwellian marker population with uniform physical density in the rank's annulus and wedge.
    :param rank: rank id, seeds the generator when `rng` is not given
    """
    if rng is None:
        rng = rank_rng(params.seed, rank)
    n = particle_count(grid, window, params.micell, params.npartdom, replica)
    capacity = int(np.ceil(n * params.capacity_margin))

    # uniform in area
    u = rng.random(n)
    r = np.sqrt(window.r_lo ** 2 + u * (window.r_hi ** 2 - window.r_lo ** 2))
    # theta with density proportional to the Jacobian, by rejection
    theta = np.empty(n)
    pending = np.arange(n)
    while pending.size:
        cand = TWO_PI * rng.random(pending.size)
        jmax = (1.0 + r[pending] / grid.aspect_ratio) ** 2
        ok = rng.random(pending.size) * jmax < grid.jacobian(r[pending], cand)
        theta[pending[ok]] = cand[ok]
        pending = pending[~ok]
    zeta = (window.plane + rng.random(n)) * grid.delta_zeta
    zeta = np.minimum(zeta, np.nextafter((window.plane + 1) * grid.delta_zeta, 0.0))

    # 3D Maxwellian with a speed cutoff
    v = rng.standard_normal((3, n))
    cut2 = params.velocity_cutoff ** 2
    bad = np.flatnonzero(np.sum(v * v, axis=0) > cut2)
    while bad.size:
        v[:, bad] = rng.standard_normal((3, bad.size))
        bad = bad[np.sum(v[:, bad] ** 2, axis=0) > cut2]
    v_par = v[0]
    v_perp2 = v[1] ** 2 + v[2] ** 2
    mu = v_perp2 / (2.0 * grid.b_field(r, theta))
    weight = rng.uniform(-params.weight_noise, params.weight_noise, n)

    store = ParticleStore.from_columns({"r": r, "theta": theta, "zeta": zeta, "v_par": v_par, "mu": mu,
                                        "weight": weight}, capacity=capacity)
    log.debug(f"rank {rank}: loaded {n} particles (capacity {capacity})")
    return store


def radial_bins(store: ParticleStore, grid: TorusGrid) -> np.ndarray:
    i = np.floor((store.live("r") - grid.r_inner) / grid.delta_r).astype(np.int64)
    return np.clip(i, 0, grid.mpsi - 1)


def bin_radial(store: ParticleStore, grid: TorusGrid) -> np.ndarray:
    """
    Reorder particles by radial cell, stable within a cell.
    :return: the applied permutation
    """
    bins = radial_bins(store, grid)
    order = np.argsort(bins, kind="stable")
    store.permute(order)
    store.bin_index = bins[order]
    return order


def gyroradius(mu, b, rho_star: float = 1.0):
    return rho_star * np.sqrt(2.0 * mu * b) / b


def gyro_points(r, theta, mu, grid: TorusGrid):
    """
    The four gyro-points at phases 0, pi/2, pi, 3pi/2 around each gyrocenter.
    :return: (r, theta) arrays of shape (4, n)
    """
    rho = gyroradius(mu, grid.b_field(r, theta), grid.rho_star)
    dtheta = rho / r
    pr = np.stack((r + rho, r, r - rho, r))
    pt = np.stack((theta, theta + dtheta, theta, theta - dtheta))
    return pr, pt


def dump_snapshot(store: ParticleStore, path):
    header = np.array([(SNAPSHOT_MAGIC, store.count, len(ALL_ATTRIBUTES))], dtype=_SNAPSHOT_HEADER)
    names = np.array([a.encode() for a in ALL_ATTRIBUTES], dtype=_SNAPSHOT_NAME)
    with open(path, "wb") as f:
        f.write(header.tobytes())
        f.write(names.tobytes())
        for a in ALL_ATTRIBUTES:
            f.write(store.live(a).astype("<f8").tobytes())


def load_snapshot(path, capacity: int | None = None) -> ParticleStore:
    with open(path, "rb") as f:
        data = f.read()
    header = np.frombuffer(data, dtype=_SNAPSHOT_HEADER, count=1)[0]
    if header["magic"] != SNAPSHOT_MAGIC:
        raise ValueError(f"'{path}' is not a particle snapshot")
    count, nattr = int(header["count"]), int(header["nattr"])
    offset = _SNAPSHOT_HEADER.itemsize
    names = [n.decode() for n in np.frombuffer(data, dtype=_SNAPSHOT_NAME, count=nattr, offset=offset)]
    offset += nattr * _SNAPSHOT_NAME.itemsize
    if tuple(names) != ALL_ATTRIBUTES:
        raise ValueError(f"unexpected snapshot attributes {names}")
    columns = {}
    for a in names:
        columns[a] = np.frombuffer(data, dtype="<f8", count=count, offset=offset).astype(np.float64)
        offset += count * 8
    return ParticleStore.from_columns(columns, capacity=capacity)
