import math

import numpy as np
import pandas as pd
import pytest

from gyrolab.deposit import GridScalar
from gyrolab.diagnostics import (CSV_FLOAT_FORMAT, DIAGNOSTIC_ANNULUS, History, KernelTimings, chi_gyrobohm,
                                 field_energy, growth_phase, read_timings, scale_params, timing_summary,
                                 weak_scaling_harness, write_scaling_plot_data)
from gyrolab.fieldsolve import GridVector
from gyrolab.geometry import TWO_PI
from gyrolab.kernel import KernelId
from gyrolab.particles import ParticleStore

from conftest import decompose, tiny_params


def test_timings_csv(tmp_path):
    t = KernelTimings()
    t.record(KernelId.charge, rank=0, step=0, seconds=0.5)
    t.record("charge", rank=0, step=0, seconds=0.25)
    t.record("push", rank=1, step=0, seconds=1.0)
    t.record("push", rank=1, step=1, seconds=3.0)
    path = tmp_path / "timing.csv"
    t.write_csv(path)
    with open(path) as f:
        assert f.readline().strip() == "step,kernel,rank,seconds"
    frame = read_timings(path)
    assert len(frame) == 4
    totals = frame.groupby("kernel")["seconds"].sum()
    assert totals["charge"] == 0.75
    assert totals["push"] == 4.0
    assert t.totals().equals(totals)

    summary = timing_summary(frame)
    assert summary["charge"] == 0.75
    assert summary["push"] == 2.0


def test_timings_invalid():
    t = KernelTimings()
    for kernel, seconds in [("push", -1.0), ("push", float("nan")), ("gather", 1.0)]:
        try:
            t.record(kernel, rank=0, step=0, seconds=seconds)
            assert False
        except ValueError:
            pass
    assert t.to_frame().empty


def test_timing_sink():
    t = KernelTimings()
    sink = t.sink(7)
    sink(KernelId.shift, 3, 0.125)
    assert t.rows == [(7, "shift", 3, 0.125)]


def test_history_csv_exact(tmp_path):
    h = History()
    rng = np.random.default_rng(0)
    values = rng.standard_normal((3, 3)) * 1e-7
    for step in range(3):
        h.append(step=step, time=step * 0.06, field_energy=values[step, 0], chi_gb=values[step, 1],
                 total_weight=values[step, 2], particle_count=1000)
    path = tmp_path / "history.csv"
    h.write_csv(path)
    frame = pd.read_csv(path, float_precision="round_trip")
    assert list(frame.columns) == ["step", "time", "field_energy", "chi_gb", "total_weight", "particle_count"]
    assert np.array_equal(frame[["field_energy", "chi_gb", "total_weight"]].to_numpy(), values)
    assert list(frame["time"]) == [0.0, 0.06, 0.12]
    assert CSV_FLOAT_FORMAT % 0.1 == "0.10000000000000001"


def test_empty_history(tmp_path):
    path = tmp_path / "history.csv"
    History().write_csv(path)
    assert path.read_text().strip() == "step,time,field_energy,chi_gb,total_weight,particle_count"


def test_field_energy():
    for changes in [dict(), dict(nradial_domains=2, npartdom=2)]:
        dec = decompose(tiny_params(**changes), load_particles=False)
        phi = [GridScalar(w, np.full((2, w.n_local), 0.2)) for w in dec.windows]
        assert field_energy(phi, dec.grid, dec.transport) == pytest.approx(0.5 * 0.04, rel=1e-14)


def test_chi_direct_sum():
    params = tiny_params(ntoroidal=1)
    dec = decompose(params, load_particles=False)
    grid = dec.grid
    rng = np.random.default_rng(6)
    n = 10
    store = ParticleStore.from_columns({
        "r": np.linspace(0.3, 0.7, n),
        "theta": rng.uniform(0.0, TWO_PI, n),
        "zeta": rng.uniform(0.0, TWO_PI, n),
        "v_par": rng.standard_normal(n),
        "mu": rng.uniform(0.0, 1.0, n),
        "weight": rng.uniform(-1e-3, 1e-3, n),
    })
    e_theta = 0.04
    efield = GridVector.zeros(dec.windows[0])
    efield.values[1] = e_theta

    r = store.live("r")
    b = grid.b_field(r, store.live("theta"))
    inside = (r >= DIAGNOSTIC_ANNULUS[0]) & (r <= DIAGNOSTIC_ANNULUS[1])
    w = store.live("weight")
    energy = 0.5 * store.live("v_par") ** 2 + store.live("mu") * b
    flux = 0.0
    norm = 0.0
    for k in range(n):
        if inside[k]:
            flux += w[k] * energy[k] * params.rho_star * e_theta / b[k]
            norm += abs(w[k])
    expected = flux / (params.rlt / params.aspect_ratio * norm) / (params.rho_star ** 2 * math.sqrt(1.0 / params.tau))

    chi = chi_gyrobohm([store], [efield], grid, dec.transport, params)
    assert chi == pytest.approx(expected, rel=1e-12)
    assert 0 < np.count_nonzero(inside) < n

    # no particles in the annulus
    outside = ParticleStore.from_columns({a: store.live(a)[:2] for a in ["r", "theta", "zeta", "v_par", "mu",
                                                                        "weight"]})
    assert chi_gyrobohm([outside], [efield], grid, dec.transport, params) == 0.0


def energy_history(log_energy: np.ndarray, dt: float = 0.06) -> pd.DataFrame:
    return pd.DataFrame({"time": dt * np.arange(len(log_energy)), "field_energy": np.exp(log_energy)})


def test_growth_phase():
    rng = np.random.default_rng(3)
    t = 0.06 * np.arange(1500)
    # noise floor, growth at 0.2 between rows 300 and 1000, then a plateau
    log_e = np.log(1e-10) + 0.2 * (np.clip(t, t[300], t[1000]) - t[300]) + rng.normal(0.0, 1e-3, len(t))
    g = growth_phase(energy_history(log_e))
    assert g is not None
    assert g.rate == pytest.approx(0.2, rel=0.15)
    assert g.r_squared >= 0.98
    assert g.stop - g.start >= 200
    assert 280 <= g.start and g.stop <= 1100
    assert abs(g.late_rate) < 0.01
    assert g.saturated()

    # still growing at the end
    g = growth_phase(energy_history(np.log(1e-10) + 0.2 * t))
    assert g.rate == pytest.approx(0.2)
    assert g.late_rate == pytest.approx(0.2)
    assert not g.saturated()


def test_growth_phase_flat():
    rng = np.random.default_rng(4)
    assert growth_phase(energy_history(np.log(1e-10) + rng.normal(0.0, 0.1, 600))) is None
    # steady decay is not growth
    assert growth_phase(energy_history(-0.1 * np.arange(600))) is None


def test_growth_phase_invalid():
    try:
        growth_phase(energy_history(np.zeros(100)))
        assert False
    except ValueError as e:
        assert "100 history rows" in str(e)
    frame = energy_history(np.zeros(300))
    frame.loc[5, "field_energy"] = 0.0
    try:
        growth_phase(frame)
        assert False
    except ValueError as e:
        assert "positive" in str(e)


def test_scale_params():
    base = tiny_params()
    p = scale_params(base, 4)
    assert p.nradial_domains == 4
    assert p.mpsi == 16
    assert p.mthetamax == 32
    assert p.a_over_rho == 2 * base.a_over_rho
    assert p.ntoroidal == base.ntoroidal
    assert scale_params(base, 1) == base


def test_weak_scaling_harness(tmp_path):
    base = tiny_params(micell=2, nsteps=2)
    report = weak_scaling_harness(base, [1, 2, 9])
    ok = report[report["status"] == "ok"]
    assert set(ok["rung"]) == {0, 1}
    first = ok[ok["rung"] == 0]
    assert set(first["kernel"]) == {str(k) for k in KernelId}
    assert np.allclose(first["rel_to_first"], 1.0)
    assert np.all(ok["mean_s"] > 0.0)
    failed = report[report["status"] != "ok"]
    assert list(failed["rung"]) == [2]
    assert failed["status"].iloc[0].startswith("failed")

    path = tmp_path / "scaling.csv"
    write_scaling_plot_data(report, path)
    frame = pd.read_csv(path)
    assert list(frame.columns) == ["rung", "kernel", "mean_s", "rel_to_first"]
    assert len(frame) == len(ok)
