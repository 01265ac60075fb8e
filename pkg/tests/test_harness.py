import copy
import json

import numpy as np
import pytest

from fasm import harness, mpc
from fasm.harness import (ConfigError, ObstacleConfig, StepRecord, TrajectoryLog, compute_metrics, csv_header,
                          csv_text, data_path, load_scenario, obstacle_truth, run_scenario)
from fasm.kinematics import ee_pose

GOLDEN_HEADER = (
    "k,t,theta_1,theta_2,theta_3,theta_4,theta_5,theta_6,u_1,u_2,u_3,u_4,u_5,u_6,"
    "ee_x,ee_y,ee_z,ee_qw,ee_qx,ee_qy,ee_qz,obs_x,obs_y,obs_z,obs_hat_x,obs_hat_y,obs_hat_z,"
    "vhat_x,vhat_y,vhat_z,h_e,h_min_crit,gamma_e,gamma_j_min,cost,status,solve_ms"
)


@pytest.fixture
def fast_small_data():
    return json.loads(data_path("scenarios", "fast_small.json").read_text())


def _record(k, t, gamma_e=np.nan, active=False, h=1.0, z=0.2):
    ee = np.array([0.5, 0.0, z, 1.0, 0, 0, 0])
    return StepRecord(k=k, t=t, theta=np.zeros(6), u=np.zeros(6), ee=ee, crit=np.zeros((6, 3)),
                      obs=np.zeros(3), obs_hat=np.zeros(3), vel_hat=np.zeros(3), h_e=h, h_crit=np.full(6, h + 1),
                      H_e=h, gamma_e=gamma_e, gamma_j=np.zeros(6), cost=0.0, status=mpc.OPTIMAL, solve_ms=0.0,
                      active=active, reference=ee.copy())


class TestObstacleTruth:
    ob = ObstacleConfig(np.array([0.60, -0.40, 0.16]), np.array([0.0, 0.145, 0.0]), 0.0866)

    def test_start(self):
        np.testing.assert_array_equal(obstacle_truth(0.0, self.ob)[0], [0.60, -0.40, 0.16])

    def test_one_second(self):
        o, v = obstacle_truth(1.0, self.ob)
        assert o[1] - (-0.40) == pytest.approx(0.145, abs=1e-15)
        np.testing.assert_array_equal(v, [0, 0.145, 0])

    def test_static(self):
        ob = ObstacleConfig(np.ones(3), np.zeros(3), 0.1)
        np.testing.assert_array_equal(obstacle_truth(7.0, ob)[0], np.ones(3))


class TestConfig:
    def test_shipped_scenarios_load(self):
        for path in sorted(data_path("scenarios").glob("*.json")):
            cfg = load_scenario(path)
            assert cfg.steps > 0 and cfg.waypoints

    def test_packaged_lookup_by_name(self):
        assert load_scenario("fast_small.json").name == "fast_small"

    def test_certificate_tolerance(self):
        cfg = load_scenario("fast_small.json")
        assert cfg.r_d == pytest.approx(0.001 * cfg.observer.certificate.phi0)
        assert cfg.obstacles[0].R_o == pytest.approx(0.0866, abs=1e-4)

    def test_units(self, fast_small_data):
        d = copy.deepcopy(fast_small_data)
        d["safety"].update(unit="cm", d_min=0.1)
        ob = d["safety"]["obstacle"]
        ob.update(dims=[10, 10, 10], start=[60, -40, 16], velocity=[0, 14.5, 0])
        cfg = load_scenario(d)
        assert cfg.d_min == pytest.approx(0.001)
        np.testing.assert_allclose(cfg.obstacles[0].start, [0.6, -0.4, 0.16])
        assert cfg.obstacles[0].R_o == pytest.approx(0.0866, abs=1e-4)

    @pytest.mark.parametrize("key, value", [
        ("duration", -1.0),
        ("reference.waypoints", []),
        ("controller.mode", "bogus"),
        ("controller.N", 0),
        ("chain", "missing.json"),
        ("observer.alphas", [0.0, 0.0, 0.0]),
        ("safety.obstacle.shape", "cone"),
    ])
    def test_bad_values(self, fast_small_data, key, value):
        with pytest.raises(ConfigError):
            load_scenario(fast_small_data, {key: value})

    def test_missing_file(self):
        with pytest.raises(ConfigError):
            load_scenario("/nonexistent/scenario.json")

    def test_override_parsing(self):
        assert harness.parse_override("controller.P_gamma=1000") == ("controller.P_gamma", 1000)
        assert harness.parse_override("controller.mode=baseline") == ("controller.mode", "baseline")
        with pytest.raises(ConfigError):
            harness.parse_override("nonsense")

    def test_reference_schedule(self):
        cfg = load_scenario("slow_small.json")
        b, a = cfg.waypoints[0].pose.p, cfg.waypoints[1].pose.p
        np.testing.assert_array_equal(cfg.reference(11.9)[:3], b)
        np.testing.assert_array_equal(cfg.reference(12.0)[:3], a)


class TestRun:
    def test_single_step(self, fast_small_data):
        cfg = load_scenario(fast_small_data, {"duration": 0.04})
        log = run_scenario(cfg)
        assert len(log) == 1 and log.records[0].k == 0

    def test_equilibrium(self, ur5):
        theta = np.array([0.268444, -0.683695, 0.923699, -0.220591, -0.161712, -1.588902])
        ref = ee_pose(ur5, theta).as_vector()
        data = {"name": "still", "chain": "ur5.json", "duration": 2.0, "initial": {"theta": theta.tolist()},
                "reference": {"waypoints": [{"pose": ref.tolist()}]}, "safety": {"obstacles": []}}
        log = run_scenario(load_scenario(data))
        assert np.max(np.abs(log.column("u"))) < 1e-9
        err = [np.linalg.norm(r.ee[:3] - ref[:3]) for r in log.records]
        assert max(err) < 1e-6

    def test_time_grid(self, fast_small_data):
        log = run_scenario(load_scenario(fast_small_data, {"duration": 0.4}))
        t = log.column("t")
        np.testing.assert_allclose(np.diff(t), 0.04)
        assert [r.k for r in log.records] == list(range(10))

    def test_fast_small_passage_is_safe(self, fast_small_data):
        log = run_scenario(load_scenario(fast_small_data, {"duration": 4.0}))
        m = compute_metrics(log)
        assert not m.collision and m.all_optimal
        assert m.max_abs_u <= 0.6 + 1e-9 and m.theta_in_box

    def test_noise_is_seeded(self, fast_small_data):
        over = {"duration": 0.8, "safety.obstacle.noise_std": 0.002}
        a = csv_text(run_scenario(load_scenario(fast_small_data, over)))
        b = csv_text(run_scenario(load_scenario(fast_small_data, over)))
        c = csv_text(run_scenario(load_scenario(fast_small_data, {**over, "seed": 5})))
        assert a == b
        assert a != c

    def test_obstacle_free_twin(self, fast_small_data):
        cfg = load_scenario(fast_small_data, {"duration": 2.0})
        log, twin = run_scenario(cfg), run_scenario(cfg, obstacle_free=True)
        assert np.all(np.isinf(twin.column("h_e")))
        m = compute_metrics(log, twin)
        assert m.deviation_moment is not None and m.deviation_moment <= 2.0


class TestCsv:
    def test_golden_header(self):
        assert ",".join(csv_header(6)) == GOLDEN_HEADER

    def test_rows(self, fast_small_data):
        text = csv_text(run_scenario(load_scenario(fast_small_data, {"duration": 0.2})))
        lines = text.strip().split("\n")
        assert lines[0] == GOLDEN_HEADER
        assert len(lines) == 6
        assert all(len(line.split(",")) == len(csv_header(6)) for line in lines)
        assert lines[1].split(",")[-2] == "optimal"
        assert lines[1].split(",")[-1] == "nan"

    def test_timing_column(self, fast_small_data):
        text = csv_text(run_scenario(load_scenario(fast_small_data, {"duration": 0.08})), timing=True)
        assert float(text.split("\n")[1].split(",")[-1]) > 0


class TestMetrics:
    def _log(self, records):
        return TrajectoryLog("synthetic", "fasm", 0.04, records, joint_limits=np.tile([-3.0, 3.0], (6, 1)))

    def test_no_activity(self):
        m = compute_metrics(self._log([_record(k, 0.04 * k) for k in range(5)]))
        assert m.trigger_moment is None

    def test_max_gamma(self):
        recs = [_record(k, 0.04 * k, g) for k, g in enumerate((0.001, 0.05, 0.02))]
        assert compute_metrics(self._log(recs)).max_gamma == 0.05

    def test_trigger_and_altitude(self):
        recs = [_record(0, 0.0), _record(1, 0.04, active=True, z=0.3), _record(2, 0.08, active=True)]
        m = compute_metrics(self._log(recs))
        assert m.trigger_moment == 0.04
        assert m.highest_altitude == 0.3

    def test_collision_iff_negative_clearance(self):
        m = compute_metrics(self._log([_record(0, 0.0, h=0.0)]))
        assert not m.collision and m.min_clearance == 0.0
        m = compute_metrics(self._log([_record(0, 0.0, h=-1e-4)]))
        assert m.collision

    def test_empty(self):
        with pytest.raises(ValueError):
            compute_metrics(self._log([]))

    def test_quaternion_error_sign_aligned(self):
        q = np.array([0.6902, -0.1499, 0.6914, 0.1519])
        assert harness.quaternion_error(-q, q) == 0.0


class TestCompare:
    def test_grid_mismatch(self, fast_small_data):
        a = load_scenario(fast_small_data, {"duration": 0.4})
        b = load_scenario(fast_small_data, {"duration": 0.8})
        with pytest.raises(ConfigError):
            harness.compare_runs([a, b])

    def test_needs_two(self, fast_small_data):
        with pytest.raises(ConfigError):
            harness.compare_runs([load_scenario(fast_small_data)])

    def test_identical_configs_identical_metrics(self, fast_small_data):
        cfg = load_scenario(fast_small_data, {"duration": 0.8})
        r1, r2 = harness.compare_runs([cfg, cfg], workers=2)
        assert r1.metrics == r2.metrics
        table = harness.comparison_table([r1, r2])
        assert table.count("\n") == 2
