from dataclasses import dataclass

import numpy as np
import pytest

from gyrolab import particles
from gyrolab.config import RunParams
from gyrolab.geometry import RankWindow, TorusGrid
from gyrolab.particles import ParticleStore
from gyrolab.transport import RankTopology, Transport


def pytest_addoption(parser):
    parser.addoption("--runslow", action="store_true", default=False, help="also run the long physics runs")


def pytest_collection_modifyitems(config, items):
    if config.getoption("--runslow"):
        return
    skip_slow = pytest.mark.skip(reason="needs --runslow")
    for item in items:
        if "slow" in item.keywords:
            item.add_marker(skip_slow)


def tiny_params(**changes) -> RunParams:
    """9 rings with 4..16 nodes, two planes"""
    return RunParams(mpsi=8, mthetamax=16, ntoroidal=2, micell=4, nghost=3, nsteps=2).replace(**changes).validate()


def scaled_a_params(**changes) -> RunParams:
    """the A preset shrunk to 33 rings and 8 planes"""
    base = RunParams.preset("A").scaled_down(mpsi=32, mthetamax=128, ntoroidal=8, micell=20)
    return base.replace(**changes).validate()


@dataclass
class Decomposition:
    params: RunParams
    grid: TorusGrid
    topology: RankTopology
    transport: Transport
    owned: list[tuple[int, int]]
    windows: list[RankWindow]
    stores: list[ParticleStore]


def decompose(params: RunParams, load_particles: bool = True) -> Decomposition:
    grid = TorusGrid(params)
    topology = RankTopology(params.ntoroidal, params.nradial_domains, params.npartdom)
    owned = grid.radial_partition(params.nradial_domains)
    coords = topology.all_coords()
    windows = [grid.window(c.radial, c.toroidal, owned) for c in coords]
    stores = []
    if load_particles:
        stores = [particles.load(grid, params, w, rank=c.rank, replica=c.replica) for c, w in zip(coords, windows)]
    return Decomposition(params=params, grid=grid, topology=topology, transport=Transport(topology), owned=owned,
                         windows=windows, stores=stores)


def redistribute(stores: list[ParticleStore], dec: Decomposition, capacity_factor: int = 4) -> list[ParticleStore]:
    """the union of the given particles, handed to the owner ranks of another decomposition"""
    columns = {a: np.concatenate([s.live(a) for s in stores]) for a in particles.ATTRIBUTES}
    tor = dec.grid.toroidal_owner(columns["zeta"])
    rad = dec.grid.radial_owner(columns["r"], dec.owned)
    replica = np.arange(len(columns["r"])) % dec.topology.npartdom
    result = []
    for c in dec.topology.all_coords():
        mask = (tor == c.toroidal) & (rad == c.radial) & (replica == c.replica)
        n = int(np.count_nonzero(mask))
        result.append(ParticleStore.from_columns({a: v[mask] for a, v in columns.items()},
                                                 capacity=max(1, capacity_factor * n)))
    return result
