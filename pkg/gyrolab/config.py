##########################
# Run parameters
##########################

from __future__ import annotations

import dataclasses
import logging
import math
import sys
from dataclasses import dataclass

from .enum_string import EnumString
from .reportable import Reportable

log = logging.getLogger(__name__)

# location of the peak gradient surface and the two local Cyclone constraints there
CYCLONE_R_MID = 0.5
CYCLONE_Q_MID = 1.4
CYCLONE_SHEAR_MID = 0.78


class ConfigError(ValueError):
    pass


class MalformedLineError(ConfigError):
    pass


class UnknownKeyError(ConfigError):
    pass


class InvariantError(ConfigError):
    pass


class SizeLabel(EnumString):
    A = "A"
    B = "B"
    C = "C"
    D = "D"


class PushLoop(EnumString):
    fused = "fused"
    split = "split"


def cyclone_q_coefficients(q_mid: float = CYCLONE_Q_MID, shear: float = CYCLONE_SHEAR_MID,
                           r_mid: float = CYCLONE_R_MID) -> tuple[float, float]:
    """
    Solve q(r_mid) = q_mid and (r/q)(dq/dr)(r_mid) = shear for q(r) = q0 + q2*r^2.
    :return: (q0, q2)
    """
    q2 = shear * q_mid / (2.0 * r_mid ** 2)
    q0 = q_mid - q2 * r_mid ** 2
    return q0, q2


_Q0, _Q2 = cyclone_q_coefficients()


@dataclass
class RunParams(Reportable):
    """
    Every numerical and physical parameter of a run.
    Lengths are in units of the minor radius a, time in a/v_th.
    """
    # grid
    mpsi: int = 90
    mthetamax: int = 640
    ntoroidal: int = 64
    micell: int = 100
    nghost: int = 4
    # decomposition
    nradial_domains: int = 1
    npartdom: int = 1
    workers: int = 1
    # Cyclone physics
    a_over_rho: float = 125.0
    r_inner: float = 0.1
    r_outer: float = 0.9
    aspect_ratio: float = 2.78
    q0: float = _Q0
    q2: float = _Q2
    rln: float = 2.2
    rlt: float = 6.9
    tau: float = 1.0
    # time loop
    dt: float = 0.06
    nsteps: int = 100
    diag_every: int = 1
    bin_every: int = 10
    seed: int = 1
    # particles
    weight_noise: float = 1e-3
    velocity_cutoff: float = 5.0
    weight_cap: float = 10.0
    capacity_margin: float = 2.0
    push_loop: str = PushLoop.fused.value
    # field solver
    jacobi_omega: float = 2.0 / 3.0
    jacobi_tol: float = 1e-6
    jacobi_max_iter: int = 200

    def __post_init__(self):
        Reportable.__init__(self)

    @staticmethod
    def preset(size_label: str | SizeLabel) -> RunParams:
        """
        Plasma-size presets with 64 toroidal planes, micell=100 and the Cyclone physics defaults.
        """
        if not isinstance(size_label, SizeLabel):
            try:
                size_label = SizeLabel.parse(str(size_label))
            except ValueError:
                raise ConfigError(f"unknown preset '{size_label}', valid presets are {[s.value for s in SizeLabel]}")
        mpsi, mthetamax, a_over_rho = {
            SizeLabel.A: (90, 640, 125.0),
            SizeLabel.B: (180, 1280, 250.0),
            SizeLabel.C: (360, 2560, 500.0),
            SizeLabel.D: (720, 5120, 1000.0),
        }[size_label]
        return RunParams(mpsi=mpsi, mthetamax=mthetamax, a_over_rho=a_over_rho, ntoroidal=64, micell=100)

    def scaled_down(self, mpsi: int, mthetamax: int, **changes) -> RunParams:
        """
        A smaller grid for the same plasma shape: a/rho shrinks with the radial grid so that a ring spacing
        still spans the same number of gyroradii.
        """
        return self.replace(mpsi=mpsi, mthetamax=mthetamax, a_over_rho=self.a_over_rho * mpsi / self.mpsi, **changes)

    @property
    def rho_star(self) -> float:
        """thermal ion gyroradius in units of a"""
        return 1.0 / self.a_over_rho

    @property
    def total_ranks(self) -> int:
        return self.ntoroidal * self.nradial_domains * self.npartdom

    def q(self, r):
        return self.q0 + self.q2 * r ** 2

    def replace(self, **changes) -> RunParams:
        return dataclasses.replace(self, **changes)

    def problems(self) -> list[str]:
        p = []
        if self.mpsi < 4:
            p.append(f"mpsi must be >= 4 (got {self.mpsi})")
        if self.mthetamax < 8 or self.mthetamax % 2 != 0:
            p.append(f"mthetamax must be even and >= 8 (got {self.mthetamax})")
        if self.ntoroidal < 1:
            p.append(f"ntoroidal must be >= 1 (got {self.ntoroidal})")
        if self.micell < 1:
            p.append(f"micell must be >= 1 (got {self.micell})")
        if not 3 <= self.nghost <= 8:
            p.append(f"nghost must be within [3, 8] (got {self.nghost})")
        if self.nradial_domains < 1 or self.npartdom < 1 or self.workers < 1:
            p.append("nradial_domains, npartdom and workers must be >= 1")
        elif (self.mpsi + 1) // self.nradial_domains < self.nghost:
            p.append(f"{self.nradial_domains} radial domains leave fewer than nghost={self.nghost} "
                     f"owned rings per domain on {self.mpsi + 1} rings")
        if not 0.0 < self.r_inner < self.r_outer <= 1.0:
            p.append(f"need 0 < r_inner < r_outer <= 1 (got {self.r_inner}, {self.r_outer})")
        if self.aspect_ratio <= self.r_outer:
            p.append(f"aspect_ratio must exceed r_outer (got {self.aspect_ratio})")
        if self.a_over_rho <= 0.0 or self.tau <= 0.0:
            p.append("a_over_rho and tau must be positive")
        if self.q(self.r_inner) <= 0.0:
            p.append("safety factor must be positive on the whole domain")
        if not self.dt > 0.0:
            p.append(f"dt must be positive (got {self.dt})")
        if self.nsteps < 0:
            p.append(f"nsteps must be >= 0 (got {self.nsteps})")
        if self.diag_every < 1 or self.bin_every < 1:
            p.append("diag_every and bin_every must be >= 1")
        if not 0 <= self.seed < 2 ** 64:
            p.append(f"seed must be an unsigned 64-bit integer (got {self.seed})")
        if self.weight_noise < 0.0 or self.velocity_cutoff <= 0.0 or self.weight_cap <= 0.0:
            p.append("weight_noise must be >= 0, velocity_cutoff and weight_cap > 0")
        if self.capacity_margin < 1.0:
            p.append(f"capacity_margin must be >= 1 (got {self.capacity_margin})")
        if self.push_loop not in [v.value for v in PushLoop]:
            p.append(f"push_loop must be one of {[v.value for v in PushLoop]} (got '{self.push_loop}')")
        if not 0.0 < self.jacobi_omega <= 1.0 or self.jacobi_tol <= 0.0 or self.jacobi_max_iter < 1:
            p.append("need 0 < jacobi_omega <= 1, jacobi_tol > 0 and jacobi_max_iter >= 1")
        return p

    def validate(self) -> RunParams:
        p = self.problems()
        if p:
            raise InvariantError("invalid run parameters: " + "; ".join(p))
        return self

    def to_yaml_impl(self) -> dict:
        return {f.name: getattr(self, f.name) for f in dataclasses.fields(self)}


def param_names() -> list[str]:
    return [f.name for f in dataclasses.fields(RunParams)]


def _convert(key: str, text: str):
    default = RunParams.__dataclass_fields__[key].default
    text = text.strip()
    try:
        if isinstance(default, int):
            return int(text, 0)
        elif isinstance(default, float):
            value = float(text)
            if not math.isfinite(value):
                raise ValueError(text)
            return value
        else:
            return text
    except ValueError:
        raise MalformedLineError(f"invalid value '{text}' for key '{key}'")


def _format(value) -> str:
    if isinstance(value, float):
        return repr(value)
    return str(value)


def split_assignment(line: str, where: str = "") -> tuple[str, str]:
    equal_sign_i = line.find("=")
    if equal_sign_i <= 0:
        raise MalformedLineError(f"{where}invalid expression '{line}', expected KEY=VALUE")
    return line[:equal_sign_i].strip(), line[equal_sign_i + 1:].strip()


def apply_overrides(params: RunParams, assignments: dict[str, str] | list[str]) -> RunParams:
    """
    Apply KEY=VALUE assignments (strings) on top of params. A 'size' key resets to that preset first.
    The result is not validated.
    """
    if isinstance(assignments, list):
        pairs = [split_assignment(a) for a in assignments]
    else:
        pairs = list(assignments.items())
    known = set(param_names())
    changes = {}
    for key, value in pairs:
        if key == "size":
            params = RunParams.preset(str(value).strip())
            changes = {}
            continue
        if key not in known:
            raise UnknownKeyError(f"no such parameter '{key}'")
        changes[key] = _convert(key, str(value))
    return params.replace(**changes)


def parse_config(text: str, base: RunParams | None = None) -> RunParams:
    """
    Parse a line based `key=value` document ('#' starts a comment).
    Absent keys keep the defaults (or the values of `base`), a `size=<A-D>` line selects a preset.
    """
    assignments = {}
    size = None
    for number, raw in enumerate(text.splitlines(), start=1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        key, value = split_assignment(line, where=f"line {number}: ")
        if key == "size":
            size = value
        elif key not in RunParams.__dataclass_fields__:
            raise UnknownKeyError(f"line {number}: no such parameter '{key}'")
        else:
            assignments[key] = value

    params = base if base is not None else RunParams()
    if size is not None:
        params = RunParams.preset(size)
    params = apply_overrides(params, assignments)
    return params.validate()


def serialize_config(params: RunParams) -> str:
    return "".join(f"{name}={_format(getattr(params, name))}\n" for name in param_names())


def normalize_config(text: str) -> str:
    return serialize_config(parse_config(text))


def load_config_file(path, base: RunParams | None = None) -> RunParams:
    with open(path, "r") as f:
        return parse_config(f.read(), base=base)


def load_layered_defaults(config_files: list[str], base: RunParams) -> RunParams:
    """
    Apply the `params:` mapping of every existing YAML file in the given order (later files win).
    """
    for config_file in config_files:
        try:
            with open(config_file, "r") as f:
                import yaml  # import yaml only when a config file exists
                content = yaml.safe_load(f)
        except FileNotFoundError:
            continue
        if content is not None:
            values = content.get("params")
            if values is not None:
                try:
                    base = apply_overrides(base, {str(k): _format(v) for k, v in values.items()})
                except ConfigError as e:
                    raise type(e)(f"In file {config_file}: {e}")
        print(f"Loaded config '{config_file}'.", file=sys.stderr)
    return base
