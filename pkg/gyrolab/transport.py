##########################
# Logical-rank message passing
##########################

"""
In-process ranks that only talk through FIFO channels.

A rank id is replica * (ntoroidal * nradial) + radial * ntoroidal + toroidal.
Every communication phase first posts all sends and then performs all receives, so the result does not
depend on the order ranks are visited in. Data handed to a collective is a list indexed by rank id.
"""

import logging
from collections import deque
from dataclasses import dataclass

import numpy as np

from .enum_string import EnumString
from .geometry import RankWindow, TorusGrid
from .particles import ALL_ATTRIBUTES, ParticleStore

log = logging.getLogger(__name__)

WIRE_MAGIC = 0x4759_4B50
WIRE_HEADER = np.dtype([("magic", "<u4"), ("nattr", "<u4"), ("count", "<u8")])


class TransportError(RuntimeError):
    pass


class CommKind(EnumString):
    toroidal = "toroidal"
    radial = "radial"
    particle = "particle"
    world = "world"


class GhostMode(EnumString):
    merge = "merge"
    fill = "fill"


@dataclass(frozen=True)
class RankCoords:
    rank: int
    toroidal: int
    radial: int
    replica: int


class RankTopology:
    def __init__(self, ntoroidal: int, nradial: int = 1, npartdom: int = 1):
        if ntoroidal < 1 or nradial < 1 or npartdom < 1:
            raise TransportError(f"invalid topology {ntoroidal}x{nradial}x{npartdom}")
        self.ntoroidal = ntoroidal
        self.nradial = nradial
        self.npartdom = npartdom
        self.size = ntoroidal * nradial * npartdom

    def rank_of(self, toroidal: int, radial: int, replica: int = 0) -> int:
        return replica * (self.ntoroidal * self.nradial) + radial * self.ntoroidal + toroidal

    def coords(self, rank: int) -> RankCoords:
        if not 0 <= rank < self.size:
            raise TransportError(f"no such rank {rank} (size {self.size})")
        replica, rest = divmod(rank, self.ntoroidal * self.nradial)
        radial, toroidal = divmod(rest, self.ntoroidal)
        return RankCoords(rank=rank, toroidal=toroidal, radial=radial, replica=replica)

    def all_coords(self) -> list[RankCoords]:
        return [self.coords(r) for r in range(self.size)]

    def toroidal_left(self, rank: int) -> int:
        c = self.coords(rank)
        return self.rank_of((c.toroidal - 1) % self.ntoroidal, c.radial, c.replica)

    def toroidal_right(self, rank: int) -> int:
        c = self.coords(rank)
        return self.rank_of((c.toroidal + 1) % self.ntoroidal, c.radial, c.replica)

    def radial_inner(self, rank: int) -> int | None:
        c = self.coords(rank)
        return None if c.radial == 0 else self.rank_of(c.toroidal, c.radial - 1, c.replica)

    def radial_outer(self, rank: int) -> int | None:
        c = self.coords(rank)
        return None if c.radial == self.nradial - 1 else self.rank_of(c.toroidal, c.radial + 1, c.replica)

    def group(self, kind: CommKind, rank: int) -> list[int]:
        """members of the communicator of `kind` that contains rank, in member order"""
        c = self.coords(rank)
        match kind:
            case CommKind.toroidal:
                return [self.rank_of(t, c.radial, c.replica) for t in range(self.ntoroidal)]
            case CommKind.radial:
                return [self.rank_of(c.toroidal, k, c.replica) for k in range(self.nradial)]
            case CommKind.particle:
                return [self.rank_of(c.toroidal, c.radial, p) for p in range(self.npartdom)]
            case CommKind.world:
                return list(range(self.size))
            case _:
                raise TransportError(f"unknown communicator '{kind}'")

    def groups(self, kind: CommKind) -> list[list[int]]:
        seen = set()
        result = []
        for rank in range(self.size):
            if rank not in seen:
                g = self.group(kind, rank)
                seen.update(g)
                result.append(g)
        return result

    def to_yaml(self):
        return {"ntoroidal": self.ntoroidal, "nradial": self.nradial, "npartdom": self.npartdom, "size": self.size}


def pack_particles(block: np.ndarray) -> bytes:
    """wire message: header, then one little-endian float64 array per attribute in canonical order"""
    if block.ndim != 2 or block.shape[0] != len(ALL_ATTRIBUTES):
        raise TransportError(f"particle block must have shape ({len(ALL_ATTRIBUTES)}, n), got {block.shape}")
    header = np.array([(WIRE_MAGIC, block.shape[0], block.shape[1])], dtype=WIRE_HEADER)
    return header.tobytes() + np.ascontiguousarray(block, dtype="<f8").tobytes()


def unpack_particles(message: bytes) -> np.ndarray:
    if len(message) < WIRE_HEADER.itemsize:
        raise TransportError("truncated particle message")
    header = np.frombuffer(message, dtype=WIRE_HEADER, count=1)[0]
    if int(header["magic"]) != WIRE_MAGIC or int(header["nattr"]) != len(ALL_ATTRIBUTES):
        raise TransportError("malformed particle message header")
    count = int(header["count"])
    expected = WIRE_HEADER.itemsize + 8 * len(ALL_ATTRIBUTES) * count
    if len(message) != expected:
        raise TransportError(f"particle message of {len(message)} bytes, expected {expected}")
    if count == 0:
        return np.zeros((len(ALL_ATTRIBUTES), 0))
    body = np.frombuffer(message, dtype="<f8", offset=WIRE_HEADER.itemsize)
    return body.reshape(len(ALL_ATTRIBUTES), count).astype(np.float64)


@dataclass
class ShiftStats:
    iterations: int = 0
    sent_toroidal: int = 0
    sent_radial: int = 0
    messages: int = 0

    def to_yaml(self):
        return {"iterations": self.iterations, "sent_toroidal": self.sent_toroidal, "sent_radial": self.sent_radial,
                "messages": self.messages}


class Transport:
    def __init__(self, topology: RankTopology):
        self.topology = topology
        self.channels: dict[tuple, deque] = {}
        self.bytes_sent = {k: 0 for k in CommKind}
        self.messages_sent = {k: 0 for k in CommKind}

    # -- point to point --

    def send(self, src: int, dst: int, tag, payload, kind: CommKind):
        if isinstance(payload, np.ndarray):
            payload = payload.copy()
            nbytes = payload.nbytes
        else:
            nbytes = len(payload)
        self.channels.setdefault((src, dst, tag), deque()).append(payload)
        self.bytes_sent[kind] += nbytes
        self.messages_sent[kind] += 1

    def probe(self, dst: int, src: int, tag) -> bool:
        q = self.channels.get((src, dst, tag))
        return q is not None and len(q) > 0

    def recv(self, dst: int, src: int, tag):
        q = self.channels.get((src, dst, tag))
        if not q:
            raise TransportError(f"rank {dst}: no message from rank {src} with tag {tag}")
        return q.popleft()

    def pending(self) -> int:
        return sum(len(q) for q in self.channels.values())

    # -- collectives --

    def _check_shapes(self, values: list[np.ndarray], group: list[int]):
        shape = np.shape(values[group[0]])
        for r in group:
            if np.shape(values[r]) != shape:
                raise TransportError(f"collective size mismatch: rank {r} holds {np.shape(values[r])}, "
                                     f"rank {group[0]} holds {shape}")

    def _reduce(self, values: list[np.ndarray], kind: CommKind, op) -> list[np.ndarray]:
        if len(values) != self.topology.size:
            raise TransportError(f"collective needs one value per rank ({self.topology.size}), got {len(values)}")
        result: list = [None] * self.topology.size
        for group in self.topology.groups(kind):
            self._check_shapes(values, group)
            root = group[0]
            tag = ("reduce", str(kind))
            for r in group:
                self.send(r, root, tag, np.asarray(values[r], dtype=np.float64), kind)
            # left fold in member order
            acc = self.recv(root, group[0], tag)
            for r in group[1:]:
                acc = op(acc, self.recv(root, r, tag))
            tag = ("bcast", str(kind))
            for r in group:
                self.send(root, r, tag, acc, kind)
            for r in group:
                result[r] = self.recv(r, root, tag)
        return result

    def allreduce_sum(self, values: list[np.ndarray], kind: CommKind) -> list[np.ndarray]:
        return self._reduce(values, kind, np.add)

    def allreduce_max(self, values: list[np.ndarray], kind: CommKind) -> list[np.ndarray]:
        return self._reduce(values, kind, np.maximum)

    def reduce_sum(self, values: list[np.ndarray], kind: CommKind) -> dict[int, np.ndarray]:
        """sum delivered to the first member of every group, keyed by that member"""
        summed = self.allreduce_sum(values, kind)
        return {g[0]: summed[g[0]] for g in self.topology.groups(kind)}

    def broadcast(self, values: list[np.ndarray], kind: CommKind) -> list[np.ndarray]:
        """value of the first member of every group replicated to the whole group"""
        result: list = [None] * self.topology.size
        for group in self.topology.groups(kind):
            tag = ("bcast", str(kind))
            for r in group:
                self.send(group[0], r, tag, np.asarray(values[group[0]]), kind)
            for r in group:
                result[r] = self.recv(r, group[0], tag)
        return result

    def particle_reduce_grid(self, values: list[np.ndarray]) -> list[np.ndarray]:
        """merge the private grids of the particle replicas of each spatial domain"""
        if self.topology.npartdom == 1:
            return [v.copy() for v in values]
        return self.allreduce_sum(values, CommKind.particle)

    def global_sum(self, local: list[float]) -> float:
        return float(self.allreduce_sum([np.array([v], dtype=np.float64) for v in local], CommKind.world)[0][0])

    # -- ghost zones --

    def exchange_ghosts(self, arrays: list[np.ndarray], windows: list[RankWindow], grid: TorusGrid,
                        direction: CommKind, mode: GhostMode, own_plane_only: bool = False):
        """
        Exchange boundary data of per-rank arrays shaped (..., 2, n_local) in place.
        With own_plane_only a radial exchange moves only plane 0.
        radial/merge: ghost-ring values are added to the owning neighbour and zeroed on the donor.
        radial/fill: ghost rings of both planes are overwritten with the owner's values.
        toroidal/merge: the right-boundary plane is added to the right neighbour's own plane and zeroed.
        toroidal/fill: the right-boundary plane is overwritten with the right neighbour's own plane.
        """
        topo = self.topology
        if len(arrays) != topo.size:
            raise TransportError(f"ghost exchange needs one array per rank ({topo.size}), got {len(arrays)}")
        for a, w in zip(arrays, windows):
            if a.shape[-2:] != (2, w.n_local):
                raise TransportError(f"ghost exchange array of shape {a.shape} does not match window "
                                     f"with {w.n_local} nodes")
        if own_plane_only and direction != CommKind.radial:
            raise TransportError(f"own_plane_only applies to radial exchanges, not {direction}")
        planes = slice(0, 1) if own_plane_only else slice(None)

        def nodes(w: RankWindow, first: int, last: int) -> slice:
            return slice(int(grid.igrid[first]) - w.node_lo, int(grid.igrid[last + 1]) - w.node_lo)

        match (direction, mode):
            case (CommKind.radial, GhostMode.merge):
                for rank in range(topo.size):
                    w = windows[rank]
                    for nb, first, last, tag in ((topo.radial_inner(rank), w.lo, w.own_lo - 1, "in"),
                                                 (topo.radial_outer(rank), w.own_hi + 1, w.hi, "out")):
                        if nb is None or last < first:
                            continue
                        s = nodes(w, first, last)
                        self.send(rank, nb, ("ghost-merge", tag), arrays[rank][..., planes, s], CommKind.radial)
                        arrays[rank][..., planes, s] = 0.0
                for rank in range(topo.size):
                    w = windows[rank]
                    for nb, tag in ((topo.radial_inner(rank), "out"), (topo.radial_outer(rank), "in")):
                        if nb is None:
                            continue
                        nw = windows[nb]
                        first, last = (nw.own_hi + 1, nw.hi) if tag == "out" else (nw.lo, nw.own_lo - 1)
                        if last < first:
                            continue
                        self._check_owned(w, first, last, rank)
                        arrays[rank][..., planes, nodes(w, first, last)] += self.recv(rank, nb, ("ghost-merge", tag))
            case (CommKind.radial, GhostMode.fill):
                for rank in range(topo.size):
                    w = windows[rank]
                    for nb, tag in ((topo.radial_inner(rank), "in"), (topo.radial_outer(rank), "out")):
                        if nb is None:
                            continue
                        nw = windows[nb]
                        first, last = (nw.own_hi + 1, nw.hi) if tag == "in" else (nw.lo, nw.own_lo - 1)
                        if last < first:
                            continue
                        self._check_owned(w, first, last, rank)
                        self.send(rank, nb, ("ghost-fill", tag), arrays[rank][..., planes, nodes(w, first, last)],
                                  CommKind.radial)
                for rank in range(topo.size):
                    w = windows[rank]
                    for nb, first, last, tag in ((topo.radial_inner(rank), w.lo, w.own_lo - 1, "out"),
                                                 (topo.radial_outer(rank), w.own_hi + 1, w.hi, "in")):
                        if nb is None or last < first:
                            continue
                        arrays[rank][..., planes, nodes(w, first, last)] = self.recv(rank, nb, ("ghost-fill", tag))
            case (CommKind.toroidal, GhostMode.merge):
                for rank in range(topo.size):
                    w = windows[rank]
                    s = nodes(w, w.own_lo, w.own_hi)
                    self.send(rank, topo.toroidal_right(rank), "plane-merge", arrays[rank][..., 1, s],
                              CommKind.toroidal)
                    arrays[rank][..., 1, :] = 0.0
                for rank in range(topo.size):
                    w = windows[rank]
                    s = nodes(w, w.own_lo, w.own_hi)
                    arrays[rank][..., 0, s] += self.recv(rank, topo.toroidal_left(rank), "plane-merge")
            case (CommKind.toroidal, GhostMode.fill):
                for rank in range(topo.size):
                    self.send(rank, topo.toroidal_left(rank), "plane-fill", arrays[rank][..., 0, :],
                              CommKind.toroidal)
                for rank in range(topo.size):
                    arrays[rank][..., 1, :] = self.recv(rank, topo.toroidal_right(rank), "plane-fill")
            case _:
                raise TransportError(f"unsupported ghost exchange {direction}/{mode}")

    @staticmethod
    def _check_owned(w: RankWindow, first: int, last: int, rank: int):
        if first < w.own_lo or last > w.own_hi:
            raise TransportError(f"rank {rank}: ghost rings {first}..{last} reach beyond the owned rings "
                                 f"{w.own_lo}..{w.own_hi} (topology fault)")

    def sendrecv_planes(self, planes: list[np.ndarray]) -> list[np.ndarray]:
        """send every rank's own plane to its right neighbour, return what each rank got from its left"""
        topo = self.topology
        for rank in range(topo.size):
            self.send(rank, topo.toroidal_right(rank), "plane-left", planes[rank], CommKind.toroidal)
        return [self.recv(rank, topo.toroidal_left(rank), "plane-left") for rank in range(topo.size)]

    # -- particle shift --

    def shift(self, stores: list[ParticleStore], grid: TorusGrid, owned: list[tuple[int, int]]) -> ShiftStats:
        """
        Move every particle to the rank owning its (zeta, r) with nearest-neighbour hops:
        a toroidal hop towards the owner wedge, then a radial hop towards the owner annulus, repeated
        until no rank holds a foreign particle.
        """
        topo = self.topology
        stats = ShiftStats()
        guard = topo.ntoroidal + topo.nradial
        coords = topo.all_coords()

        def misplaced(rank: int) -> tuple[np.ndarray, np.ndarray]:
            s = stores[rank]
            tor = grid.toroidal_owner(s.live("zeta"))
            rad = grid.radial_owner(s.live("r"), owned)
            return tor, rad

        while True:
            remaining = []
            for rank in range(topo.size):
                tor, rad = misplaced(rank)
                c = coords[rank]
                remaining.append(float(np.count_nonzero((tor != c.toroidal) | (rad != c.radial))))
            if self.global_sum(remaining) == 0.0:
                break
            if stats.iterations >= guard:
                raise TransportError(f"particle shift did not settle after {guard} iterations")
            stats.iterations += 1

            # toroidal hop
            half = topo.ntoroidal // 2
            for rank in range(topo.size):
                c = coords[rank]
                for dst, tag in ((topo.toroidal_right(rank), "shift-right"), (topo.toroidal_left(rank), "shift-left")):
                    # masks are recomputed since take() reorders the store
                    tor, _ = misplaced(rank)
                    distance = np.mod(tor - c.toroidal, topo.ntoroidal)
                    mask = ((distance != 0) & (distance <= half)) if tag == "shift-right" else (distance > half)
                    if np.any(mask):
                        block = stores[rank].take(mask)
                        self.send(rank, dst, tag, pack_particles(block), CommKind.toroidal)
                        stats.sent_toroidal += block.shape[1]
                        stats.messages += 1
            for rank in range(topo.size):
                for src, tag in ((topo.toroidal_left(rank), "shift-right"), (topo.toroidal_right(rank), "shift-left")):
                    while self.probe(rank, src, tag):
                        stores[rank].append(unpack_particles(self.recv(rank, src, tag)))

            # radial hop
            for rank in range(topo.size):
                c = coords[rank]
                for dst, tag in ((topo.radial_inner(rank), "shift-in"), (topo.radial_outer(rank), "shift-out")):
                    if dst is None:
                        continue
                    _, rad = misplaced(rank)
                    mask = rad < c.radial if tag == "shift-in" else rad > c.radial
                    if np.any(mask):
                        block = stores[rank].take(mask)
                        self.send(rank, dst, tag, pack_particles(block), CommKind.radial)
                        stats.sent_radial += block.shape[1]
                        stats.messages += 1
            for rank in range(topo.size):
                for src, tag in ((topo.radial_outer(rank), "shift-in"), (topo.radial_inner(rank), "shift-out")):
                    while src is not None and self.probe(rank, src, tag):
                        stores[rank].append(unpack_particles(self.recv(rank, src, tag)))

        log.debug(f"shift settled after {stats.iterations} iterations, {stats.sent_toroidal} toroidal and "
                  f"{stats.sent_radial} radial moves")
        return stats

    def volume_report(self) -> dict:
        return {str(k): {"bytes": int(self.bytes_sent[k]), "messages": int(self.messages_sent[k])} for k in CommKind}
