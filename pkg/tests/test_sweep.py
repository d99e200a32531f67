import pytest

from railodo.config import load_manifest
from railodo.sweep import max_workers, run_sweep

SCENARIO = """\
seed = 1
path = straight 40
speed = hold 10 3.5
[camera]
rate_hz = 10
"""


@pytest.fixture
def manifest(tmp_path):
    (tmp_path / "s.cfg").write_text(SCENARIO)
    (tmp_path / "m.cfg").write_text(
        "name = tiny\nscenario = s.cfg\nout = out\nseeds = 1, 2\nmodes = stereo-inertial, stereo\n"
        "baselines = 0.31, 0.71\nsegment_lengths = 10\n")
    return tmp_path / "m.cfg"


def test_sweep_outputs(manifest):
    m = load_manifest(manifest)
    res = run_sweep(m, workers=1)
    assert res.n_ok == 8
    out = m.out
    for name in ("report.txt", "segments.csv", "errors_stereo.csv", "errors_stereo-inertial.csv"):
        assert (out / name).is_file()
    assert (out / "cells" / "b0.71_s2" / "log" / "imu.txt").is_file()
    lines = (out / "report.txt").read_text().splitlines()
    assert lines[0].startswith("# tiny: seeds 1, 2")
    assert sum(1 for l in lines if l.startswith(("stereo ", "stereo-inertial"))) == 4


def test_sweep_is_byte_identical(manifest, tmp_path):
    m = load_manifest(manifest)
    run_sweep(m, workers=1)
    first = {p.name: p.read_bytes() for p in m.out.glob("*.*")}
    m.out = tmp_path / "again"
    run_sweep(m, workers=2)
    second = {p.name: p.read_bytes() for p in m.out.glob("*.*")}
    assert first == second


def test_failed_cell_is_reported(manifest, tmp_path):
    m = load_manifest(manifest)
    m.segment_lengths = (500.0,)
    res = run_sweep(m, workers=1)
    assert res.n_ok == 0
    assert "failed" in res.table and "TrajectoryTooShort" in res.table


def test_worker_cap(monkeypatch):
    monkeypatch.setenv("RAILODO_THREADS", "3")
    assert max_workers(10) == 3 and max_workers(2) == 2
    monkeypatch.setenv("RAILODO_THREADS", "x")
    with pytest.raises(ValueError):
        max_workers(4)
