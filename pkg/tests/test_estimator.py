import json
import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from scenes import INTRINSICS, angle_error_deg, offset_guess, position_error_m, random_scene
from terranav import estimator as est
from terranav.errors import (
    ConfigurationError,
    DegenerateFeatureError,
    DegenerateGeometryError,
    InsufficientConstraintsError,
    RobustCollapseError,
)
from terranav.flow import FlowFeature, write_flow_csv
from terranav.terrain import Dtm, GroundAnchor, elevation, save_ascii_grid

NADIR_R1 = np.array([math.pi, 0.0, 0.0])  # rotation diag(1, -1, -1)


def nadir_truth_theta():
    return np.array([0, 0, 1000, *NADIR_R1, -100, 0, 0, 0, 0, 0], dtype=float)


def make_problem(rng, **kw):
    (dtm, feats, _), truth = random_scene(rng, **kw)
    return est.EstimationProblem(dtm, INTRINSICS, feats, truth), truth


@pytest.fixture(scope="module")
def scene():
    return make_problem(np.random.default_rng(100))


# -- residuals -----------------------------------------------------------------

def test_residual_vanishes_at_truth_example():
    anchor = GroundAnchor(np.zeros(3), np.array([0.0, 0.0, 1.0]), 1000.0)
    theta = nadir_truth_theta()
    f = est.residual_single(theta, anchor, [0, 0, 1], [-0.1, 0, 1])
    assert np.max(np.abs(f)) <= 1e-12
    theta[0] += 10.0
    assert np.linalg.norm(est.residual_single(theta, anchor, [0, 0, 1], [-0.1, 0, 1])) > 0


def test_residual_degenerate_cases():
    theta = nadir_truth_theta()
    grazing = GroundAnchor(np.zeros(3), np.array([1.0, 0.0, 0.0]), 1000.0)
    with pytest.raises(DegenerateFeatureError):
        est.residual_single(theta, grazing, [0, 0, 1], [0, 0, 1])
    anchor = GroundAnchor(np.zeros(3), np.array([0.0, 0.0, 1.0]), 1000.0)
    # camera 2 sits on the ground point: v = 0
    theta[6:9] = [0.0, 0.0, -1000.0]
    with pytest.raises(DegenerateGeometryError):
        est.residual_single(theta, anchor, [0, 0, 1], [0, 0, 1])


def test_anchor_nadir_center_feature():
    dtm = Dtm(-2000.0, -2000.0, 100.0, np.zeros((41, 41)))
    centre = [INTRINSICS.cx, INTRINSICS.cy]
    feats = [FlowFeature(centre, centre)] * 6
    problem = est.EstimationProblem(dtm, INTRINSICS, feats, nadir_truth_theta())
    anchors = est.anchor_features(problem, nadir_truth_theta())
    np.testing.assert_allclose(anchors.points[0], [0, 0, 0], atol=1e-9)
    assert anchors.depths[0] == pytest.approx(1000.0, abs=1e-6)


def test_anchor_ramp_matches_terrain_example():
    x = np.arange(201.0)
    dtm = Dtm(0.0, -5.0, 1.0, np.tile(0.1 * x, (11, 1)))
    # attitude whose optical axis is (1, 0, -1)/sqrt(2) in the world
    theta = np.array([0, 0, 100, math.pi, -math.pi / 4, 0, 0, 0, 0, 0, 0, 0], dtype=float)
    centre = [INTRINSICS.cx, INTRINSICS.cy]
    problem = est.EstimationProblem(dtm, INTRINSICS, [FlowFeature(centre, centre)] * 6, theta)
    anchors = est.anchor_features(problem, theta)
    np.testing.assert_allclose(anchors.points[0], [100 / 1.1, 0, 10 / 1.1], atol=1e-3)
    assert anchors.depths[0] == pytest.approx(128.565, abs=1e-3)


def test_anchor_residence(scene):
    problem, truth = scene
    anchors = est.anchor_features(problem, truth)
    z = elevation(problem.dtm, anchors.points[:, 0], anchors.points[:, 1])
    assert np.max(np.abs(z - anchors.points[:, 2])) <= 1e-3 * problem.dtm.cell_size


def test_anchor_too_few_hits():
    dtm = Dtm(0.0, 0.0, 10.0, np.zeros((5, 5)))
    centre = [INTRINSICS.cx, INTRINSICS.cy]
    problem = est.EstimationProblem(dtm, INTRINSICS, [FlowFeature(centre, centre)] * 6,
                                    nadir_truth_theta())
    with pytest.raises(InsufficientConstraintsError):
        est.anchor_features(problem, nadir_truth_theta())


def test_problem_needs_six_tracked(scene):
    problem, truth = scene
    feats = problem.features[:5] + [FlowFeature([1, 1], [np.nan, np.nan], "lost")] * 3
    with pytest.raises(InsufficientConstraintsError):
        est.EstimationProblem(problem.dtm, INTRINSICS, feats, truth)


def test_truth_vanishes_on_simulated_scenes():
    rng = np.random.default_rng(7)
    for _ in range(5):
        problem, truth = make_problem(rng)
        F = est.residual_stack(problem, truth, est.anchor_features(problem, truth))
        assert np.max(np.abs(F)) <= 1e-10
        assert np.linalg.norm(F) <= 1e-9 * math.sqrt(problem.n)


def test_stack_single_and_objective(scene):
    problem, truth = scene
    theta = truth + 0.001
    anchors = est.anchor_features(problem, theta)
    F = est.residual_stack(problem, theta, anchors)
    assert F.shape == (3 * problem.n,)
    for k in (0, 17, problem.n - 1):
        np.testing.assert_allclose(
            F[3 * k:3 * k + 3], est.residual_single(theta, anchors[k], problem.q1[k], problem.q2[k]),
            rtol=0, atol=1e-15)
    f = F.reshape(-1, 3)
    assert abs(est._objective(f, np.ones(problem.n)) - np.sum(f * f)) <= 1e-12


_unit = st.floats(-1, 1, allow_nan=False)


@settings(max_examples=400, deadline=None)
@given(theta=st.lists(st.floats(-0.5, 0.5), min_size=12, max_size=12),
       qx=st.floats(-0.57, 0.57), qy=st.floats(-0.35, 0.35),
       q2x=st.floats(-0.57, 0.57), q2y=st.floats(-0.35, 0.35),
       nx=_unit, ny=_unit, qz=st.floats(-200, 200))
def test_projector_invariants(theta, qx, qy, q2x, q2y, nx, ny, qz):
    t = np.array(theta)
    t[0:3] = [t[0] * 100, t[1] * 100, 1000.0]
    t[3] += math.pi
    t[6:9] *= 300
    normal = np.array([nx, ny, 1.0]) / np.linalg.norm([nx, ny, 1.0])
    anchor = GroundAnchor(np.array([0.0, 0.0, qz]), normal, 1.0)
    q2 = np.array([q2x, q2y, 1.0])
    try:
        f = est.residual_single(t, anchor, [qx, qy, 1.0], q2)
    except (DegenerateFeatureError, DegenerateGeometryError):
        return
    P = np.eye(3) - np.outer(q2, q2) / (q2 @ q2)
    assert np.max(np.abs(P @ P - P)) <= 1e-12
    assert np.max(np.abs(P @ q2)) <= 1e-12
    assert abs(f @ q2) <= 1e-12
    assert np.linalg.norm(f) <= 1.0 + 1e-15


# -- jacobian --------------------------------------------------------------------

def test_jacobian_columns_and_rank(scene):
    problem, truth = scene
    anchors = est.anchor_features(problem, truth)
    J = est.jacobian(problem, truth, anchors)
    assert J.shape == (3 * problem.n, 12)
    assert np.all(np.isfinite(J))
    assert np.all(np.linalg.norm(J, axis=0) > 0)
    s = np.linalg.svd(J * est.COLUMN_SCALE[None, :] ** -1, compute_uv=False)
    assert np.sum(s > s[0] * 1e-9) >= 11


def test_jacobian_forward_vs_central_bulk(scene):
    # the strict per-entry form lives in the acceptance suite
    problem, truth = scene
    theta = truth + np.r_[20, -15, 10, 0.01, -0.01, 0.01, 5, 5, -3, 0.002, 0.003, -0.002]
    anchors = est.anchor_features(problem, theta)
    Jf = est.jacobian(problem, theta, anchors)
    Jc = est.jacobian(problem, theta, anchors, central=True)
    col_err = np.linalg.norm(Jf - Jc, axis=0) / np.linalg.norm(Jc, axis=0)
    assert np.max(col_err) <= 1e-3
    big = np.abs(Jc) > 1e-8
    rel = np.abs(Jf - Jc)[big] / np.abs(Jc)[big]
    assert np.mean(rel <= 1e-4) >= 0.98


# -- weights ---------------------------------------------------------------------

def test_mestimator_weights():
    r = np.full(10, 0.3)
    for kind in ("huber", "tukey", "none"):
        w = est.mestimator_weights(r, kind)
        assert np.all(w == w[0]) and 0 < w[0] <= 1
    assert np.all(est.mestimator_weights(np.arange(1.0, 6.0), "none") == 1)
    r = np.r_[np.random.default_rng(0).uniform(0.9, 1.1, 30), 100.0]
    w = est.mestimator_weights(r, "huber", 1.345)
    assert w[-1] < 0.05
    assert np.all(w[:-1] > 0.99)
    wt = est.mestimator_weights(r, "tukey")
    assert wt[-1] == 0.0
    with pytest.raises(RobustCollapseError):
        est.mestimator_weights(np.array([5.0, 6.0]), "tukey", 1e-9)
    with pytest.raises(ConfigurationError):
        est.mestimator_weights(r, "cauchy")


# -- solver ----------------------------------------------------------------------

def test_solve_from_truth_is_fixed_point(scene):
    problem, truth = scene
    res = est.solve(problem)
    assert res.converged
    assert res.iterations <= 2
    assert res.objective <= 1e-18


def test_solve_recovers_offset_guess():
    rng = np.random.default_rng(3)
    for _ in range(3):
        problem, truth = make_problem(rng)
        problem.initial_guess = offset_guess(truth, rng)
        res = est.solve(problem)
        assert res.converged
        assert position_error_m(res.theta, truth) <= 0.1
        assert angle_error_deg(res.theta, truth) <= 0.01


def test_solve_result_contract(scene):
    problem, truth = scene
    rng = np.random.default_rng(4)
    problem = est.EstimationProblem(problem.dtm, INTRINSICS, problem.features,
                                    offset_guess(truth, rng, 40.0, 1.0))
    res = est.solve(problem)
    w = res.per_feature_weights
    f = res.per_feature_residuals
    assert abs(res.objective - np.sum(w * np.sum(f * f, axis=1))) <= 1e-9
    assert np.all((w >= 0) & (w <= 1))
    assert res.method_used in ("gauss-newton", "levenberg-marquardt")
    for before, after in res.step_objectives:
        assert after <= before
    doc = res.to_dict()
    json.dumps(doc)
    np.testing.assert_allclose(est.theta_from_json(doc["theta"]), res.theta, atol=1e-12)


def test_solve_deterministic(scene):
    problem, truth = scene
    problem = est.EstimationProblem(problem.dtm, INTRINSICS, problem.features,
                                    offset_guess(truth, np.random.default_rng(5), 50.0, 1.0))
    a = est.solve(problem)
    b = est.solve(problem)
    assert np.array_equal(a.theta, b.theta) and a.objective == b.objective
    assert a.iterations == b.iterations


def test_solve_downweights_outliers():
    rng = np.random.default_rng(6)
    (dtm, feats, _), truth = random_scene(rng, noise_px=1.0)
    bad = rng.choice(len(feats), len(feats) // 10, replace=False)
    for k in bad:
        feats[k] = FlowFeature(feats[k].u1, rng.uniform([0, 0], [INTRINSICS.width_px,
                                                                 INTRINSICS.height_px]))
    problem = est.EstimationProblem(dtm, INTRINSICS, feats, offset_guess(truth, rng, 20.0, 0.5))
    res = est.solve(problem)
    assert position_error_m(res.theta, truth) <= 20.0
    good = np.setdiff1d(np.arange(len(feats)), bad)
    assert np.median(res.per_feature_weights[bad]) < 0.2
    assert np.median(res.per_feature_weights[good]) == 1.0


def test_solver_config_validation():
    with pytest.raises(ConfigurationError):
        est.SolverConfig(max_gn_iters=0)
    with pytest.raises(ConfigurationError):
        est.SolverConfig(step_tol=0)
    with pytest.raises(ConfigurationError):
        est.SolverConfig(mestimator="cauchy")
    with pytest.raises(ConfigurationError):
        est.SolverConfig.from_dict({"bogus": 1})
    assert est.SolverConfig.from_dict({"mestimator": "tukey"}).mestimator == "tukey"


def test_theta_json_round_trip():
    theta = np.random.default_rng(0).normal(size=12)
    np.testing.assert_allclose(est.theta_from_json(est.theta_to_json(theta)), theta, atol=1e-12)


def test_load_problem_round_trip(tmp_path, scene):
    problem, truth = scene
    write_flow_csv(tmp_path / "f.csv", problem.features)
    save_ascii_grid(problem.dtm, tmp_path / "d.asc")
    est.write_problem_json(tmp_path / "p.json", INTRINSICS, truth, est.SolverConfig(), truth=truth)
    loaded, config = est.load_problem(tmp_path / "f.csv", tmp_path / "d.asc", tmp_path / "p.json")[:2]
    assert loaded.n == problem.n
    np.testing.assert_allclose(loaded.initial_guess, truth, atol=1e-9)
    assert isinstance(config, est.SolverConfig)
    # 6-decimal pixels still put the truth within a hair of the optimum
    res = est.solve(loaded, config)
    assert position_error_m(res.theta, truth) < 0.5
