import json
from pathlib import Path

import numpy as np
import pytest

from terranav import estimator as est
from terranav.cli import ERROR_HEADER, TRAJECTORY_HEADER, main
from terranav.flow import read_flow_csv, write_pgm
from terranav.sim import InsNoiseModel, load_scenario, save_scenario
from terranav.terrain import TerrainSpec, generate_synthetic_dtm, load_ascii_grid

SCENARIO = Path(__file__).resolve().parents[1] / "scenarios" / "xiaoshan-like.json"


def texture(shape, shift=(0.0, 0.0)):
    y, x = np.mgrid[0:shape[0], 0:shape[1]].astype(float)
    x, y = x - shift[0], y - shift[1]
    out = np.sin(0.11 * x + 0.05 * y) + np.sin(0.07 * y - 0.13 * x + 1.0) + np.cos(0.09 * (x + y))
    return 0.5 + 0.15 * out


@pytest.fixture
def noiseless_scenario(tmp_path):
    cfg = load_scenario(SCENARIO).replace(flow_noise_px=0.0, ins_noise=InsNoiseModel(0.0, 0.0))
    path = tmp_path / "clean.json"
    save_scenario(cfg, path)
    return path


# -- generate-terrain -----------------------------------------------------------

def test_generate_terrain_flat(tmp_path, capsys):
    out = tmp_path / "flat.asc"
    assert main(["generate-terrain", "--kind", "flat", "--amplitude", "0", "--width", "20",
                 "--height", "10", "-o", str(out)]) == 0
    dtm = load_ascii_grid(out)
    assert np.all(dtm.elevations == dtm.elevations[0, 0])
    assert "20x10" in capsys.readouterr().out


def test_generate_terrain_round_trip_and_determinism(tmp_path):
    spec = tmp_path / "spec.json"
    spec.write_text(json.dumps({"kind": "fractal", "amplitude": 150, "width": 40, "height": 30}))
    a, b = tmp_path / "a.asc", tmp_path / "b.asc"
    assert main(["--seed", "9", "generate-terrain", "--spec", str(spec), "-o", str(a)]) == 0
    assert main(["generate-terrain", "--spec", str(spec), "--seed", "9", "--output", str(b)]) == 0
    assert a.read_bytes() == b.read_bytes()
    ref = generate_synthetic_dtm(TerrainSpec(kind="fractal", amplitude=150, width=40, height=30, seed=9))
    np.testing.assert_allclose(load_ascii_grid(a).elevations, ref.elevations, rtol=1e-6, atol=1e-6)


def test_generate_terrain_errors(tmp_path):
    assert main(["generate-terrain", "--kind", "flat"]) == 1
    assert main(["generate-terrain", "--width", "1", "-o", str(tmp_path / "x.asc")]) == 1
    assert main(["generate-terrain", "--kind", "flat", "-o", str(tmp_path / "no/dir/x.asc")]) == 1
    assert main(["generate-terrain", "--kind", "volcano"]) == 2


# -- track ----------------------------------------------------------------------

def _frames(tmp_path, shifts, shape=(200, 240)):
    paths = []
    for k, s in enumerate(shifts):
        p = tmp_path / f"f{k}.pgm"
        write_pgm(p, texture(shape, s), maxval=65535)
        paths.append(str(p))
    return paths


def test_track_identical_and_shifted(tmp_path, capsys):
    same = _frames(tmp_path, [(0, 0), (0, 0)])
    out = tmp_path / "same.csv"
    assert main(["track", *same, "--grid", "5", "--margin", "50", "--levels", "3", "-o", str(out)]) == 0
    feats = read_flow_csv(out)
    assert len(feats) == 25 and all(f.tracked for f in feats)
    assert max(np.abs(f.flow).max() for f in feats) <= 1e-6
    capsys.readouterr()

    shifted = _frames(tmp_path, [(0, 0), (3.5, -2.25)])
    assert main(["track", *shifted, "--grid", "5", "--margin", "50", "--levels", "3"]) == 0
    captured = capsys.readouterr()
    lines = captured.out.strip().splitlines()
    assert lines[0] == "id,u1x,u1y,u2x,u2y,status,score"
    flows = np.array([[float(v) for v in ln.split(",")[1:5]] for ln in lines[1:]])
    mean_flow = (flows[:, 2:] - flows[:, :2]).mean(axis=0)
    assert np.max(np.abs(mean_flow - [3.5, -2.25])) <= 0.25
    assert "tracked 25" in captured.err


def test_track_chain_and_corners(tmp_path):
    chain = _frames(tmp_path, [(0, 0), (2, 1), (4, 2), (6, 3)])
    out = tmp_path / "chain.csv"
    assert main(["track", *chain, "--grid", "4", "--margin", "60", "--levels", "2", "-o", str(out)]) == 0
    flows = np.array([f.flow for f in read_flow_csv(out) if f.tracked])
    np.testing.assert_allclose(flows.mean(axis=0), [6, 3], atol=0.25)
    out2 = tmp_path / "corners.csv"
    assert main(["track", chain[0], chain[1], "--seeding", "corners", "--max-corners", "20",
                 "--levels", "2", "-o", str(out2)]) == 0
    assert 0 < len(read_flow_csv(out2)) <= 20


def test_track_errors(tmp_path):
    a = _frames(tmp_path, [(0, 0)])[0]
    b = tmp_path / "small.pgm"
    write_pgm(b, texture((100, 100)))
    assert main(["track", a, str(b)]) == 1
    assert main(["track", a]) == 1
    assert main(["track", a, str(tmp_path / "missing.pgm")]) == 1


# -- simulate / estimate / plot-data ------------------------------------------------

def test_simulate_default_scenario(tmp_path, capsys):
    prefix = tmp_path / "run"
    assert main(["simulate", str(SCENARIO), "-o", str(prefix)]) == 0
    summary = json.loads(Path(f"{prefix}_summary.json").read_text())
    assert summary["n_epochs"] == 5
    report = Path(f"{prefix}_report.csv").read_text().splitlines()
    assert len(report) == 6
    times = [float(r.split(",")[1]) for r in report[1:]]
    np.testing.assert_allclose(np.diff(times), 3.6, atol=1e-9)
    tracks = Path(f"{prefix}_tracks.csv").read_text().splitlines()
    assert len(tracks) == 51
    assert json.loads(capsys.readouterr().out)["n_epochs"] == 5


def test_simulate_noiseless(tmp_path, noiseless_scenario):
    prefix = tmp_path / "clean"
    assert main(["simulate", str(noiseless_scenario), "-o", str(prefix)]) == 0
    s = json.loads(Path(f"{prefix}_summary.json").read_text())
    assert s["vision_max_position_error_m"] <= 0.1
    assert s["vision_max_angle_error_deg"] <= 0.01


def test_simulate_monte_carlo(tmp_path):
    prefix = tmp_path / "mc"
    assert main(["simulate", str(SCENARIO), "--monte-carlo", "3", "--seed", "40", "-o", str(prefix)]) == 0
    agg = json.loads(Path(f"{prefix}_aggregate.json").read_text())
    assert agg["n_seeds"] == 3 and agg["seeds"] == [40, 41, 42]
    for key in ("vision_max_position_error_m", "vision_max_angle_error_deg"):
        assert agg[key]["median"] <= agg[key]["p95"] <= agg[key]["max"]
    assert agg["vision_max_position_error_m"]["median"] <= 20.0
    for s in (40, 41, 42):
        assert Path(f"{prefix}_seed{s:04d}_report.csv").exists()


def test_export_then_estimate(tmp_path, noiseless_scenario, capsys):
    prefix = tmp_path / "x"
    assert main(["simulate", str(noiseless_scenario), "--export-problem", "2", "-o", str(prefix)]) == 0
    stem = f"{prefix}_epoch2"
    args = ["estimate", f"{stem}_flow.csv", f"{stem}_dtm.asc", f"{stem}_problem.json"]
    out1, out2 = tmp_path / "r1.json", tmp_path / "r2.json"
    assert main([*args, "-o", str(out1)]) == 0
    assert main([*args, "-o", str(out2)]) == 0
    assert out1.read_bytes() == out2.read_bytes()
    doc = json.loads(out1.read_text())
    assert doc["converged"] and doc["n_features"] >= 100
    truth = est.theta_from_json(json.loads(Path(f"{stem}_problem.json").read_text())["truth"])
    theta = est.theta_from_json(doc["theta"])
    # exported pixels are rounded to 6 decimals
    assert max(np.linalg.norm(theta[0:3] - truth[0:3]), np.linalg.norm(theta[6:9] - truth[6:9])) <= 0.1
    assert np.degrees(np.max(np.abs(theta[est.ANGLE_IDX] - truth[est.ANGLE_IDX]))) <= 0.01
    assert "vs embedded truth" in capsys.readouterr().out


def test_estimate_errors(tmp_path, noiseless_scenario):
    prefix = tmp_path / "x"
    assert main(["simulate", str(noiseless_scenario), "--export-problem", "0", "-o", str(prefix)]) == 0
    stem = f"{prefix}_epoch0"
    lines = Path(f"{stem}_flow.csv").read_text().splitlines()
    few = tmp_path / "few.csv"
    few.write_text("\n".join(lines[:6]) + "\n")
    assert main(["estimate", str(few), f"{stem}_dtm.asc", f"{stem}_problem.json"]) == 1
    broken = tmp_path / "broken.csv"
    broken.write_text("\n".join(lines[:3] + ["7,1,2,x,4,tracked,0"]) + "\n")
    assert main(["estimate", str(broken), f"{stem}_dtm.asc", f"{stem}_problem.json"]) == 1
    assert main(["estimate", f"{stem}_flow.csv", f"{stem}_dtm.asc"]) == 2


def test_plot_data_format(tmp_path, noiseless_scenario):
    prefix = tmp_path / "p"
    assert main(["simulate", str(noiseless_scenario), "-o", str(prefix)]) == 0
    assert main(["plot-data", f"{prefix}_report.csv", "-o", str(tmp_path / "plot")]) == 0
    traj = (tmp_path / "plot_trajectory.dat").read_text().splitlines()
    errs = (tmp_path / "plot_errors.dat").read_text().splitlines()
    assert traj[0] == "# " + " ".join(TRAJECTORY_HEADER)
    assert errs[0] == "# " + " ".join(ERROR_HEADER)
    t = np.loadtxt(tmp_path / "plot_trajectory.dat")
    e = np.loadtxt(tmp_path / "plot_errors.dat")
    assert t.shape == (5, 10) and e.shape == (5, 15)
    assert np.max(np.abs(e[:, 1:5])) <= 0.1 and np.max(np.abs(e[:, 5:8])) <= 0.01


def test_plot_data_malformed(tmp_path):
    bad = tmp_path / "bad.csv"
    bad.write_text("epoch,t\n1,2\n")
    assert main(["plot-data", str(bad)]) == 1
    assert main(["plot-data", str(tmp_path / "missing.csv")]) == 1


def test_usage_errors():
    assert main([]) == 2
    assert main(["fly"]) == 2
    assert main(["simulate"]) == 2
    assert main(["simulate", str(SCENARIO), "--monte-carlo", "x"]) == 2


def test_invalid_scenario(tmp_path):
    bad = tmp_path / "bad.json"
    bad.write_text(json.dumps({"speed": -5}))
    assert main(["simulate", str(bad), "-o", str(tmp_path / "b")]) == 1
