##########################
# Timings, physics history and weak scaling
##########################

import logging
import math
from dataclasses import dataclass

import numpy as np
import pandas as pd
import scipy.stats

from .config import RunParams
from .deposit import GridScalar, owned_sum
from .fieldsolve import GridVector
from .geometry import TorusGrid
from .kernel import KernelId
from .particles import ParticleStore
from .push import gather
from .transport import Transport

log = logging.getLogger(__name__)

TIMING_COLUMNS = ["step", "kernel", "rank", "seconds"]
HISTORY_COLUMNS = ["step", "time", "field_energy", "chi_gb", "total_weight", "particle_count"]
SCALING_COLUMNS = ["rung", "kernel", "mean_s", "rel_to_first"]
# float format that reproduces every double exactly
CSV_FLOAT_FORMAT = "%.17g"

DIAGNOSTIC_ANNULUS = (0.4, 0.6)
CHI_ESTIMATOR_VERSION = "flux-weighted-energy/abs-weight-norm v1"


class KernelTimings:
    def __init__(self):
        self.rows: list[tuple[int, str, int, float]] = []

    def record(self, kernel: KernelId | str, rank: int, step: int, seconds: float):
        if not isinstance(kernel, KernelId):
            kernel = KernelId.parse(str(kernel))
        if not seconds >= 0.0:
            raise ValueError(f"negative or invalid time {seconds} for kernel '{kernel}' on rank {rank}")
        self.rows.append((int(step), str(kernel), int(rank), float(seconds)))

    def sink(self, step: int):
        """callback for a KernelClock that books onto the given step"""
        return lambda kernel, rank, seconds: self.record(kernel, rank, step, seconds)

    def to_frame(self) -> pd.DataFrame:
        return pd.DataFrame(self.rows, columns=TIMING_COLUMNS)

    def totals(self) -> pd.Series:
        return self.to_frame().groupby("kernel")["seconds"].sum()

    def write_csv(self, path):
        self.to_frame().to_csv(path, index=False)


def timing_summary(frame: pd.DataFrame) -> pd.Series:
    """mean seconds per kernel of one step on one rank"""
    if frame.empty:
        return pd.Series(dtype=np.float64, name="mean_s")
    per_step = frame.groupby(["kernel", "step", "rank"])["seconds"].sum()
    return per_step.groupby(level="kernel").mean().rename("mean_s")


def read_timings(path) -> pd.DataFrame:
    return pd.read_csv(path, float_precision="round_trip")


class History:
    def __init__(self):
        self.rows: list[tuple] = []

    def append(self, step: int, time: float, field_energy: float, chi_gb: float, total_weight: float,
               particle_count: int):
        values = (field_energy, chi_gb, total_weight)
        if not all(math.isfinite(v) for v in values):
            log.warning(f"non-finite diagnostics at step {step}: {values}")
        self.rows.append((int(step), float(time), float(field_energy), float(chi_gb), float(total_weight),
                          int(particle_count)))

    def to_frame(self) -> pd.DataFrame:
        return pd.DataFrame(self.rows, columns=HISTORY_COLUMNS)

    def write_csv(self, path):
        self.to_frame().to_csv(path, index=False, float_format=CSV_FLOAT_FORMAT)


def field_energy(phi: list[GridScalar], grid: TorusGrid, transport: Transport) -> float:
    """half the mean of phi^2 over all canonical nodes of all planes"""
    squared = [GridScalar(f.window, f.values * f.values) for f in phi]
    n_points = grid.ntoroidal * int(np.sum(grid.mtheta))
    return 0.5 * owned_sum(squared, grid, transport) / n_points


def chi_gyrobohm(stores: list[ParticleStore], efields: list[GridVector], grid: TorusGrid, transport: Transport,
                 params: RunParams) -> float:
    """
    Ion heat conductivity in gyro-Bohm units from the radial E x B energy flux of the markers in the
    diagnostic annulus, normalized by the local temperature gradient and sum(|w|) over the same annulus.
    """
    numerator, norm = [], []
    for store, efield in zip(stores, efields):
        r = store.live("r")
        inside = (r >= DIAGNOSTIC_ANNULUS[0]) & (r <= DIAGNOSTIC_ANNULUS[1])
        if store.count == 0 or not np.any(inside):
            numerator.append(0.0)
            norm.append(0.0)
            continue
        e, _ = gather(store, efield, grid)
        theta = store.live("theta")
        b = grid.b_field(r, theta)
        v_er = grid.rho_star * e[1] / b
        energy = 0.5 * store.live("v_par") ** 2 + store.live("mu") * b
        w = store.live("weight")
        numerator.append(float(np.sum((w * energy * v_er)[inside])))
        norm.append(float(np.sum(np.abs(w[inside]))))
    flux = transport.global_sum(numerator)
    v_norm = transport.global_sum(norm)
    if v_norm == 0.0:
        return 0.0
    # n0 = 1, |dT/dr| at the peak gradient surface = rlt / R0
    chi = flux / ((params.rlt / params.aspect_ratio) * v_norm)
    c_s = math.sqrt(1.0 / params.tau)
    return chi / (params.rho_star ** 2 * c_s)


@dataclass
class GrowthPhase:
    """log-linear fit of the field energy: rows [start, stop) of the history grow at `rate` per unit time"""
    start: int
    stop: int
    rate: float
    r_squared: float
    late_rate: float

    def saturated(self, fraction: float = 0.1) -> bool:
        return self.late_rate < fraction * self.rate


def growth_phase(history: pd.DataFrame, min_rows: int = 200, min_r_squared: float = 0.98,
                 late_rows: int | None = None) -> GrowthPhase | None:
    """
    The steepest interval of exponential field-energy growth in a history frame, at least `min_rows` long
    and extended forward while the following rows keep growing at half that rate or more
    and the fit keeps `min_r_squared`. The late rate is fitted over the last
    `late_rows` rows (default `min_rows`). None when no interval qualifies.
    """
    late_rows = min_rows if late_rows is None else late_rows
    time = history["time"].to_numpy(dtype=np.float64)
    energy = history["field_energy"].to_numpy(dtype=np.float64)
    if len(time) < min_rows or len(time) < late_rows:
        raise ValueError(f"{len(time)} history rows, need at least {max(min_rows, late_rows)}")
    if min_rows < 3:
        raise ValueError(f"a growth fit needs at least 3 rows (got {min_rows})")
    if not np.all(energy > 0.0):
        raise ValueError("field energy must be positive for a log-linear fit")
    log_energy = np.log(energy)

    def fit(start: int, stop: int):
        res = scipy.stats.linregress(time[start:stop], log_energy[start:stop])
        return res.slope, res.rvalue ** 2

    stride = max(2, min_rows // 10)
    best = None
    for start in range(0, len(time) - min_rows + 1, stride):
        slope, r2 = fit(start, start + min_rows)
        if slope > 0.0 and r2 >= min_r_squared and (best is None or slope > best[2]):
            best = (start, start + min_rows, slope, r2)
    if best is None:
        return None

    start, stop, slope, r2 = best
    # extend while the next rows still grow
    while stop + stride <= len(time) and fit(stop, stop + stride)[0] >= 0.5 * slope:
        s, q = fit(start, stop + stride)
        if q < min_r_squared:
            break
        stop, slope, r2 = stop + stride, s, q
    late_rate, _ = fit(len(time) - late_rows, len(time))
    log.debug(f"growth over rows [{start}, {stop}) at rate {slope:.4g} (R^2 {r2:.4f}), late rate {late_rate:.4g}")
    return GrowthPhase(start=start, stop=stop, rate=float(slope), r_squared=float(r2), late_rate=float(late_rate))


def scale_params(base: RunParams, multiplier: int) -> RunParams:
    """
    One rung of the weak-scaling ladder: radial domains times m, linear grid sizes and a/rho times sqrt(m),
    toroidal planes unchanged.
    """
    s = math.sqrt(multiplier)
    mthetamax = 2 * max(4, int(round(base.mthetamax * s / 2.0)))
    return base.replace(mpsi=max(4, int(round(base.mpsi * s))), mthetamax=mthetamax,
                        a_over_rho=base.a_over_rho * s, nradial_domains=base.nradial_domains * multiplier)


def weak_scaling_harness(base: RunParams, multipliers: list[int]) -> pd.DataFrame:
    """
    Run every rung and report the mean per-kernel time per step and rank, relative to the first rung.
    A failing rung is recorded with its error and the ladder continues.
    """
    from .simulation import Simulation

    rows = []
    first = None
    for rung, m in enumerate(multipliers):
        try:
            params = scale_params(base, m).validate()
            sim = Simulation(params)
            sim.run()
        except (ValueError, RuntimeError) as e:
            log.warning(f"weak scaling rung {rung} (x{m}) failed: {e}")
            rows.append({"rung": rung, "multiplier": m, "kernel": None, "mean_s": np.nan, "rel_to_first": np.nan,
                         "particles_per_rank": np.nan, "grid_per_radial_rank": np.nan, "status": f"failed: {e}"})
            continue
        summary = timing_summary(sim.timings.to_frame())
        if first is None:
            first = summary
        for kernel in KernelId:
            k = str(kernel)
            if k not in summary.index:
                continue
            ref = first.get(k, np.nan)
            rows.append({"rung": rung, "multiplier": m, "kernel": k, "mean_s": float(summary[k]),
                         "rel_to_first": float(summary[k] / ref) if ref and ref > 0 else np.nan,
                         "particles_per_rank": sim.total_particles() / sim.topology.size,
                         "grid_per_radial_rank": sim.grid_points_per_radial_domain(), "status": "ok"})
    return pd.DataFrame(rows, columns=["rung", "multiplier", "kernel", "mean_s", "rel_to_first",
                                       "particles_per_rank", "grid_per_radial_rank", "status"])


def write_scaling_plot_data(report: pd.DataFrame, path):
    report[report["status"] == "ok"][SCALING_COLUMNS].to_csv(path, index=False, float_format=CSV_FLOAT_FORMAT)
