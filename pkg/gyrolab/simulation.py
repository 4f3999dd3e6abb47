##########################
# Time loop and command line
##########################

import argparse
import logging
import sys
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from . import particles
from .config import (ConfigError, RunParams, apply_overrides, load_config_file, load_layered_defaults,
                     serialize_config)
from .deposit import charge, flux_surface_average
from .diagnostics import (CHI_ESTIMATOR_VERSION, History, KernelTimings, chi_gyrobohm, field_energy,
                          weak_scaling_harness, write_scaling_plot_data)
from .fieldsolve import GridKernels, GyroOperator, potential
from .geometry import TorusGrid, memory_footprint
from .kernel import NULL_CLOCK, Kernel, KernelClock, KernelId, KernelStore
from .push import Pusher, PushStats
from .reportable import Reportable, write_report
from .transport import RankTopology, ShiftStats, Transport

log = logging.getLogger(__name__)

CONFIG_FILES = [".gyrolab.yml", ".local.gyrolab.yml"]


@dataclass
class RunTotals:
    steps: int = 0
    dropped_points: int = 0
    dropped_weight: float = 0.0
    max_conservation_error: float = 0.0
    jacobi_iterations: int = 0
    jacobi_unconverged: int = 0
    shift_iterations: int = 0
    shifted_toroidal: int = 0
    shifted_radial: int = 0

    def to_yaml(self):
        return dict(self.__dict__)


class Simulation(Reportable):
    def __init__(self, params: RunParams, report_override: dict | None = None):
        """
        Set up grid, ranks, particles and operators of a run.
        :param params: run parameters, validated here
        :param report_override: keys replacing (or extending) the generated run.yml content
        """
        super().__init__(report_override)
        self.params = params.validate()
        self.grid = TorusGrid(params)
        self.topology = RankTopology(params.ntoroidal, params.nradial_domains, params.npartdom)
        self.transport = Transport(self.topology)
        self.owned = self.grid.radial_partition(params.nradial_domains)
        self.coords = self.topology.all_coords()
        self.windows = [self.grid.window(c.radial, c.toroidal, self.owned) for c in self.coords]
        self.stores = [particles.load(self.grid, params, w, rank=c.rank, replica=c.replica)
                       for c, w in zip(self.coords, self.windows)]
        self.operator = GyroOperator(self.grid)
        for w in self.windows:
            self.operator.local_operator(w)
        self.grid_kernels = GridKernels(self.grid)
        self.pusher = Pusher(self.grid, params)

        self.timings = KernelTimings()
        self.history = History()
        self.totals = RunTotals()
        self.push_totals = PushStats()
        self.clock = NULL_CLOCK
        self.charge_result = None
        self.density = None
        self.phi = None
        self.efield = None
        self.initial_count = self.total_particles()
        self.kernels = self._build_kernels()
        log.info(f"{self.topology.size} ranks, mgrid={self.grid.mgrid}, {self.initial_count} particles")

    def _build_kernels(self) -> KernelStore:
        p = self.params
        k = KernelStore()
        k.add("sort", Kernel("sort", self._sort, KernelId.sort, every=p.bin_every))
        k.add("charge", Kernel("charge", self._charge, KernelId.charge))
        k.add("smooth_charge", Kernel("smooth(charge)", self._smooth_charge, KernelId.smooth))
        k.add("poisson", Kernel("poisson", self._poisson, KernelId.poisson))
        k.add("smooth_potential", Kernel("smooth(potential)", self._smooth_potential, KernelId.smooth))
        k.add("field", Kernel("field", self._field, KernelId.field))
        k.add("diagnostics", Kernel("diagnostics", self._diagnostics, None, every=p.diag_every))
        k.add("push", Kernel("push", self._push, KernelId.push))
        k.add("shift", Kernel("shift", self._shift, KernelId.shift))
        return k

    @property
    def all_ranks(self):
        return range(self.topology.size)

    # -- kernels --

    def _sort(self, step: int):
        for rank, store in enumerate(self.stores):
            with self.clock.measure(KernelId.sort, rank):
                particles.bin_radial(store, self.grid)

    def _charge(self, step: int):
        res = charge(self.stores, self.grid, self.windows, self.transport, self.params.micell,
                     workers=self.params.workers, clock=self.clock)
        self.charge_result = res
        self.density = res.density
        self.totals.dropped_points += res.dropped_points
        self.totals.dropped_weight += res.dropped_weight
        self.totals.max_conservation_error = max(self.totals.max_conservation_error, res.conservation_error)

    def _smooth_charge(self, step: int):
        with self.clock.measure(KernelId.smooth, self.all_ranks):
            self.density = self.grid_kernels.smooth(self.density, self.transport)

    def _poisson(self, step: int):
        with self.clock.measure(KernelId.poisson, self.all_ranks):
            flux_avg = flux_surface_average(self.density, self.grid, self.transport)[0]
            self.phi, info = potential(self.density, flux_avg, self.operator, self.transport, self.params)
        self.totals.jacobi_iterations += info.iterations
        if not info.converged:
            self.totals.jacobi_unconverged += 1

    def _smooth_potential(self, step: int):
        with self.clock.measure(KernelId.smooth, self.all_ranks):
            self.phi = self.grid_kernels.smooth(self.phi, self.transport)

    def _field(self, step: int):
        with self.clock.measure(KernelId.field, self.all_ranks):
            self.efield = self.grid_kernels.field(self.phi, self.transport)

    def _diagnostics(self, step: int):
        self.history.append(step=step, time=step * self.params.dt,
                            field_energy=field_energy(self.phi, self.grid, self.transport),
                            chi_gb=chi_gyrobohm(self.stores, self.efield, self.grid, self.transport, self.params),
                            total_weight=self.transport.global_sum([s.total_weight() for s in self.stores]),
                            particle_count=self.total_particles())

    def _push(self, step: int):
        for rank, store in enumerate(self.stores):
            with self.clock.measure(KernelId.push, rank):
                self.push_totals.add(self.pusher.advance(store, self.efield[rank]))

    def _shift(self, step: int):
        with self.clock.measure(KernelId.shift, self.all_ranks):
            stats: ShiftStats = self.transport.shift(self.stores, self.grid, self.owned)
        self.totals.shift_iterations += stats.iterations
        self.totals.shifted_toroidal += stats.sent_toroidal
        self.totals.shifted_radial += stats.sent_radial
        count = self.total_particles()
        if count != self.initial_count:
            raise RuntimeError(f"particle count changed from {self.initial_count} to {count} in step {step}")

    # -- driver --

    def step(self, step: int):
        self.clock = KernelClock(self.timings.sink(step))
        for k in self.kernels.due(step):
            log.debug(f"step {step}: {k.name}")
            k.run(step)
        self.clock = NULL_CLOCK
        self.totals.steps += 1

    def run(self, nsteps: int | None = None) -> "Simulation":
        nsteps = self.params.nsteps if nsteps is None else nsteps
        for step in range(self.totals.steps, self.totals.steps + nsteps):
            self.step(step)
        return self

    def total_particles(self) -> int:
        return int(round(self.transport.global_sum([float(s.count) for s in self.stores])))

    def grid_points_per_radial_domain(self) -> float:
        return float(np.mean([self.grid.igrid[hi + 1] - self.grid.igrid[lo] for lo, hi in self.owned]))

    def write_outputs(self, out_dir):
        out = Path(out_dir)
        out.mkdir(parents=True, exist_ok=True)
        self.timings.write_csv(out / "timing.csv")
        self.history.write_csv(out / "history.csv")
        write_report(out / "run.yml", self.to_yaml(), "gyrolab run metadata")

    def to_yaml_impl(self) -> dict:
        g = self.grid
        return {
            "params": self.params.to_yaml(),
            "topology": self.topology.to_yaml(),
            "grid": {"mgrid": g.mgrid, "mtheta_inner": int(g.mtheta[0]), "mtheta_outer": int(g.mtheta[-1]),
                     "radial_domains": [list(o) for o in self.owned]},
            "kernels": self.kernels.to_yaml(),
            "chi_estimator": CHI_ESTIMATOR_VERSION,
            "velocity_space_nonlinearity": "omitted",
            "particles": {"initial": self.initial_count, "final": self.total_particles()},
            "totals": self.totals.to_yaml(),
            "push": self.push_totals.to_yaml(),
            "message_volume": self.transport.volume_report(),
        }


def run_main(params: RunParams, overrides: list[str] | None, out_dir) -> int:
    """
    Run the time loop and write timing.csv, history.csv and run.yml to out_dir.
    :param overrides: KEY=VALUE assignments applied on top of params
    :return: exit status
    """
    try:
        params = apply_overrides(params, overrides or []).validate()
        print(f"# Starting run: {params.nsteps} steps on {params.total_ranks} ranks\n", flush=True)
        sim = Simulation(params)
        sim.run()
        sim.write_outputs(out_dir)
    except (ValueError, RuntimeError, OSError) as e:
        print(f"error: {e}", file=sys.stderr)
        print("# Run FAILED.", flush=True)
        return 1
    print("# Run finished successfully.", flush=True)
    return 0


# flag -> parameter
_PARAM_FLAGS = {
    "steps": "nsteps",
    "dt": "dt",
    "seed": "seed",
    "ranks_toroidal": "ntoroidal",
    "ranks_radial": "nradial_domains",
    "npartdom": "npartdom",
    "workers": "workers",
    "bin_every": "bin_every",
    "diag_every": "diag_every",
}


def add_param_arguments(sub_parser):
    sub_parser.add_argument("--size", required=False, help="plasma size preset (A, B, C or D)")
    sub_parser.add_argument("--config", required=False, help="key=value config file")
    sub_parser.add_argument("-v", required=False, action="append", help="set a parameter (-v KEY=VALUE)")


def add_run_arguments(sub_parser):
    sub_parser.add_argument("--steps", required=False, help="number of time steps")
    sub_parser.add_argument("--dt", required=False, help="time step")
    sub_parser.add_argument("--seed", required=False, help="random seed")
    sub_parser.add_argument("--ranks-toroidal", required=False, help="toroidal domains (= toroidal planes)")
    sub_parser.add_argument("--ranks-radial", required=False, help="radial domains")
    sub_parser.add_argument("--npartdom", required=False, help="particle replicas per spatial domain")
    sub_parser.add_argument("--workers", required=False, help="threads per rank")
    sub_parser.add_argument("--bin-every", required=False, help="radial binning period in steps")
    sub_parser.add_argument("--diag-every", required=False, help="diagnostics period in steps")


def resolve_params(args) -> tuple[RunParams, list[str]]:
    """preset, layered YAML defaults, config file; returns those params and the flag/-v overrides"""
    params = RunParams.preset(args.size) if args.size else RunParams()
    if not args.no_config:
        params = load_layered_defaults(CONFIG_FILES, params)
    if args.config:
        params = load_config_file(args.config, base=params)
    overrides = [f"{key}={getattr(args, flag)}" for flag, key in _PARAM_FLAGS.items()
                 if getattr(args, flag, None) is not None]
    overrides += args.v or []
    return params, overrides


def main(cmd_args: list[str] | None = None):
    arg_parser = argparse.ArgumentParser(description="Gyrokinetic particle-in-cell runs on logical ranks.")
    sub_parsers = arg_parser.add_subparsers(required=True, title="subcommands")
    arg_parser.add_argument("--no-config", required=False, action="store_true",
                            help="Do not load parameters from config files (e.g. .gyrolab.yml).")
    arg_parser.add_argument("--verbose", required=False, action="store_true", help="Log debug output.")
    # run sub command
    run_arg_parser = sub_parsers.add_parser("run", description="Run the time loop and write CSV outputs.")
    add_param_arguments(run_arg_parser)
    add_run_arguments(run_arg_parser)
    run_arg_parser.add_argument("--out", default="out", help="output directory")
    run_arg_parser.set_defaults(command="run")
    # grid sub command
    grid_arg_parser = sub_parsers.add_parser("grid", description="Print the per-ring grid summary.")
    add_param_arguments(grid_arg_parser)
    grid_arg_parser.set_defaults(command="grid")
    # config sub command
    config_arg_parser = sub_parsers.add_parser("config", description="Print the normalized configuration.")
    add_param_arguments(config_arg_parser)
    add_run_arguments(config_arg_parser)
    config_arg_parser.set_defaults(command="config")
    # memory sub command
    memory_arg_parser = sub_parsers.add_parser("memory", description="Print grid and particle memory per toroidal domain.")
    add_param_arguments(memory_arg_parser)
    memory_arg_parser.set_defaults(command="memory")
    # scaling sub command
    scaling_arg_parser = sub_parsers.add_parser("scaling", description="Run the weak-scaling ladder.")
    add_param_arguments(scaling_arg_parser)
    add_run_arguments(scaling_arg_parser)
    scaling_arg_parser.add_argument("--multipliers", default="1,4", help="comma separated rank multipliers")
    scaling_arg_parser.add_argument("--emit-plots-data", required=False,
                                    help="write the per-rung summary (rung,kernel,mean_s,rel_to_first) to this file")
    scaling_arg_parser.set_defaults(command="scaling")
    args = arg_parser.parse_args(cmd_args)

    logging.basicConfig(level=logging.DEBUG if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")

    try:
        params, overrides = resolve_params(args)
        if args.command != "run":
            params = apply_overrides(params, overrides).validate()
    except (ConfigError, ValueError, RuntimeError, OSError) as e:
        print(f"error: {e}", file=sys.stderr)
        sys.exit(1)

    match args.command:
        case "run":
            sys.exit(run_main(params, overrides, args.out))
        case "grid":
            print(TorusGrid(params).summary(), end="")
        case "config":
            print(serialize_config(params), end="")
        case "memory":
            m = memory_footprint(params)
            print(f"mgrid: {m['mgrid']}")
            print(f"chargei grid: {m['chargei_mib']:.2f} MiB")
            print(f"evector grid: {m['evector_mib']:.2f} MiB")
            print(f"particles (micell={params.micell}): {m['particles_gib']:.2f} GiB")
            print(f"total particles: {m['total_particles']}")
        case "scaling":
            try:
                multipliers = [int(x) for x in args.multipliers.split(",") if x.strip()]
            except ValueError:
                print(f"error: invalid multipliers '{args.multipliers}'", file=sys.stderr)
                sys.exit(1)
            report = weak_scaling_harness(params, multipliers)
            print(report.to_string(index=False))
            if args.emit_plots_data:
                write_scaling_plot_data(report, args.emit_plots_data)
            if (report["status"] != "ok").any():
                sys.exit(1)
        case _:
            arg_parser.print_help()
