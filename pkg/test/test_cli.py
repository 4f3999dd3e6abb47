import os
import pathlib
import subprocess
import sys

import pandas as pd
import pytest
import yaml

from gyrolab.config import parse_config

repo_dir = pathlib.Path(__file__).parent.parent
simulate_script = str(repo_dir / "simulate.py")
tiny_config = str(pathlib.Path(__file__).parent / "resources" / "tiny.cfg")


def simulate(*args, cwd=None):
    env = dict(os.environ)
    env["PYTHONPATH"] = str(repo_dir) + os.pathsep + env.get("PYTHONPATH", "")
    return subprocess.run([sys.executable, simulate_script, *args], cwd=cwd, env=env, capture_output=True, text=True)


def create_config(file, content: str):
    with open(file, "w") as f:
        f.write(content)
    yield file
    os.remove(file)


@pytest.fixture
def project_config(tmp_path):
    yield from create_config(tmp_path / ".gyrolab.yml", "params:\n  micell: 3\n  seed: 5\n")


@pytest.fixture
def project_local_config(tmp_path):
    yield from create_config(tmp_path / ".local.gyrolab.yml", "params:\n  seed: 6\n")


def test_run(tmp_path):
    out = tmp_path / "out"
    p = simulate("--no-config", "run", "--config", tiny_config, "--steps", "2", "--out", str(out))
    assert p.returncode == 0, p.stderr
    assert "# Run finished successfully." in p.stdout
    history = pd.read_csv(out / "history.csv")
    assert list(history["step"]) == [0, 1]
    timing = pd.read_csv(out / "timing.csv")
    assert list(timing.columns) == ["step", "kernel", "rank", "seconds"]
    assert set(timing["rank"]) == {0, 1}
    with open(out / "run.yml") as f:
        report = yaml.safe_load(f)
    assert report["params"]["mpsi"] == 8
    assert report["params"]["nsteps"] == 2


def test_run_zero_steps(tmp_path):
    p = simulate("--no-config", "run", "--config", tiny_config, "--steps", "0", "--out", str(tmp_path))
    assert p.returncode == 0, p.stderr
    assert (tmp_path / "history.csv").read_text().strip() == \
           "step,time,field_energy,chi_gb,total_weight,particle_count"


def test_run_bad_parameter(tmp_path):
    p = simulate("--no-config", "run", "--config", tiny_config, "-v", "bogus=1", "--out", str(tmp_path))
    assert p.returncode == 1
    assert "bogus" in p.stderr
    assert "# Run FAILED." in p.stdout

    p = simulate("--no-config", "config", "--size", "Z")
    assert p.returncode == 1
    assert "unknown preset" in p.stderr


def test_layered_config(tmp_path, project_config, project_local_config):
    p = simulate("config", "--config", tiny_config, cwd=tmp_path)
    assert p.returncode == 0, p.stderr
    lines = p.stdout.splitlines()
    # the config file wins over the project defaults, the local file over the project file
    assert "micell=2" in lines
    assert "seed=6" in lines

    p = simulate("config", cwd=tmp_path)
    assert "micell=3" in p.stdout.splitlines()

    p = simulate("--no-config", "config", cwd=tmp_path)
    lines = p.stdout.splitlines()
    assert "micell=100" in lines
    assert "seed=1" in lines

    p = simulate("config", "-v", "seed=9", "--steps", "4", cwd=tmp_path)
    lines = p.stdout.splitlines()
    assert "seed=9" in lines
    assert "nsteps=4" in lines


def test_config_output_reloads(tmp_path, project_config):
    p = simulate("config", cwd=tmp_path)
    assert p.returncode == 0, p.stderr
    assert "Loaded config" not in p.stdout
    assert f"Loaded config '{project_config.name}'." in p.stderr
    # the printed config is a valid config file on its own
    params = parse_config(p.stdout)
    assert params.micell == 3
    assert params.seed == 5


def test_grid():
    p = simulate("--no-config", "grid", "--config", tiny_config)
    assert p.returncode == 0, p.stderr
    lines = p.stdout.splitlines()
    assert lines[0].startswith("# mpsi=8 mthetamax=16 ntoroidal=2 mgrid=91")
    # header plus one line per ring
    assert len(lines) == 2 + 9
    assert [int(line.split()[2]) for line in lines[2:]] == [4, 4, 6, 8, 8, 10, 12, 14, 16]


def test_memory():
    p = simulate("--no-config", "memory", "--size", "A")
    assert p.returncode == 0, p.stderr
    lines = p.stdout.splitlines()
    assert "mgrid: 32449" in lines
    assert "chargei grid: 0.50 MiB" in lines
    assert "evector grid: 1.49 MiB" in lines
    assert "particles (micell=100): 0.29 GiB" in lines


def test_scaling(tmp_path):
    plot_data = tmp_path / "scaling.csv"
    p = simulate("--no-config", "scaling", "--config", tiny_config, "--steps", "1", "--multipliers", "1,2",
                 "--emit-plots-data", str(plot_data))
    assert p.returncode == 0, p.stderr
    frame = pd.read_csv(plot_data)
    assert list(frame.columns) == ["rung", "kernel", "mean_s", "rel_to_first"]
    assert set(frame["rung"]) == {0, 1}
