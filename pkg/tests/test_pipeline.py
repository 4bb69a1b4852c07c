"""Start lookup, episode phases, and the evaluation report contract."""

import csv
import json

import numpy as np
import pytest

from fabricgrasp.core import (
    ContractError,
    DatasetLookupError,
    InvalidArgumentError,
    JointState,
    stream,
    wrap_angle,
)
from fabricgrasp.datagen import (
    TrajectoryDataset,
    build_dataset,
    build_grasp_table,
)
from fabricgrasp.env import ArmModel, SceneObject, Shape, forward_kinematics
from fabricgrasp.expert import (
    ExpertGains,
    expert_accel,
    nearest_trajectory,
    track_indices,
)
from fabricgrasp.pipeline import (
    APPROACH,
    GRASP,
    LIFT,
    EpisodeConfig,
    EpisodeOutcome,
    EvalConfig,
    PolicySpec,
    approach_spline,
    evaluate,
    nearest_start_index,
    nearest_start_lookup,
    replay_baseline,
    run_episode,
    write_episode_csv,
    write_report_json,
)

ARM = ArmModel()
POSES = [(0.45, -0.15, 0.4), (0.52, -0.1, 1.0)]


@pytest.fixture(scope="module")
def table():
    return build_grasp_table([(Shape.CIRCLE, (0.05,))], POSES)


@pytest.fixture(scope="module")
def ds(table):
    return build_dataset(table, 3, seed=11)


class ReplayExpert:
    """Identifies the nearest trajectory once, then tracks it to the end."""

    def __init__(self, ds, gains=ExpertGains()):
        self.ds = ds
        self.gains = gains
        self._track = None
        self._step = 0

    def accel(self, state, z):
        if self._track is None:
            ti, k = nearest_trajectory(state, z, self.ds)
            ref = self.ds.entries[ti].traj
            self._track = ref.q[track_indices(len(ref), k, 10 ** 6)]
            self._step = 0
        i = min(self._step, len(self._track) - 1)
        self._step += 1
        return expert_accel(self._track[i], state, self.gains)


class FunnelExpert:
    """Stateless variant: re-identifies the nearest frame every step.

    Pure function of the state, so it is safe to share across episodes
    and threads in the evaluation tests. Eval objects are novel, so the
    query encoding is first snapped to the closest dataset encoding.
    """

    def __init__(self, ds, gains=ExpertGains()):
        self.ds = ds
        self.gains = gains

    def accel(self, state, z):
        gaps = [np.linalg.norm(e.z - z) for e in self.ds.entries]
        z_near = self.ds.entries[int(np.argmin(gaps))].z
        ti, k = nearest_trajectory(state, z_near, self.ds)
        ref = self.ds.entries[ti].traj
        return expert_accel(ref.q[min(k + 1, len(ref) - 1)], state,
                            self.gains)


class ZeroPolicy:
    def accel(self, state, z):
        return np.zeros_like(state.q)


class NanPolicy:
    def accel(self, state, z):
        return np.full(state.q.shape, np.nan)


def brute_start_scan(z_query, x0, ds):
    zd = [np.linalg.norm(e.z - z_query) for e in ds.entries]
    zmin = min(zd)
    best = (np.inf, -1)
    for i, e in enumerate(ds.entries):
        if zd[i] != zmin:
            continue
        ee, _ = forward_kinematics(ARM, e.traj.q[0])
        c = (np.linalg.norm(ee[:2] - x0[:2])
             + 0.1 * abs(wrap_angle(ee[2] - x0[2])))
        if c < best[0]:
            best = (c, i)
    return best[1]


class TestNearestStart:
    def test_eval_pos_encoding_matches_dataset(self, ds):
        # pos_encode at eval time must reproduce the stored training codes
        # bit for bit, or the z-nearest lookup degrades for trained poses.
        from fabricgrasp.pipeline import pos_encode
        for e, pose in zip(ds.entries[:1], POSES):
            obj = SceneObject(Shape.CIRCLE, (0.05,), pose)
            np.testing.assert_array_equal(pos_encode(obj), e.z)

    def test_exact_pair_returns_that_frame(self, ds):
        e = ds.entries[2]
        x0, _ = forward_kinematics(ARM, e.traj.q[0])
        q = nearest_start_lookup(e.z, x0, ds)
        np.testing.assert_array_equal(q, e.traj.q[0])

    def test_brute_force_oracle(self, ds):
        rng = stream(23, "start-oracle", 0)
        for _ in range(50):
            base = ds.entries[int(rng.integers(len(ds.entries)))]
            z = base.z + rng.normal(0.0, 0.02, base.z.shape)
            x0 = np.array([rng.uniform(0.3, 0.7), rng.uniform(-0.3, 0.1),
                           rng.uniform(-np.pi, np.pi)])
            assert nearest_start_index(z, x0, ds) == brute_start_scan(
                z, x0, ds)

    def test_removing_winner_promotes_runner_up(self, ds):
        rng = stream(29, "start-stability", 0)
        x0 = np.array([0.5, -0.1, 0.2])
        z = ds.entries[0].z + rng.normal(0.0, 0.01, ds.entries[0].z.shape)
        win = nearest_start_index(z, x0, ds)
        rest = [e for i, e in enumerate(ds.entries) if i != win]
        ds2 = TrajectoryDataset(rest, d=ds.d, z_dim=ds.z_dim, dt=ds.dt)
        second = nearest_start_index(z, x0, ds2)
        assert nearest_start_index(z, x0, ds2) == brute_start_scan(z, x0, ds2)
        q_second = rest[second].traj.q[0]
        assert not np.array_equal(q_second, ds.entries[win].traj.q[0])

    def test_tie_breaks_to_lowest_id(self, ds):
        e = ds.entries[1]
        twice = TrajectoryDataset([e, e], d=ds.d, z_dim=ds.z_dim, dt=ds.dt)
        x0, _ = forward_kinematics(ARM, e.traj.q[0])
        assert nearest_start_index(e.z, x0, twice) == 0

    def test_empty_dataset(self):
        empty = TrajectoryDataset([], d=6, z_dim=2, dt=1.0 / 30.0)
        with pytest.raises(DatasetLookupError):
            nearest_start_lookup(np.zeros(2), np.zeros(3), empty)


class TestApproachSpline:
    def test_endpoints_exact(self):
        q0, q1 = np.zeros(3), np.array([1.0, -0.5, 0.25])
        path = approach_spline(q0, q1, 2.0, 1.0 / 30.0)
        np.testing.assert_array_equal(path[0], q0)
        np.testing.assert_array_equal(path[-1], q1)
        assert len(path) == 61

    def test_ends_at_rest(self):
        q0, q1 = np.zeros(2), np.ones(2)
        path = approach_spline(q0, q1, 1.0, 1.0 / 30.0)
        speeds = np.linalg.norm(np.diff(path, axis=0), axis=1) * 30.0
        # cubic blend flattens at the end: last interval far below the peak
        assert speeds[-1] < 0.1 * np.max(speeds)

    def test_monotone_blend(self):
        path = approach_spline(np.zeros(1), np.ones(1), 1.0, 0.05)
        assert np.all(np.diff(path[:, 0]) >= 0.0)


class TestRunEpisode:
    def test_replay_expert_succeeds_on_training_pose(self, table, ds):
        obj = table.entries[0].obj
        out = run_episode(obj, ReplayExpert(ds), ds, EpisodeConfig(),
                          stream(41, "episode", 0))
        assert out.success and out.phase == LIFT
        assert out.steps[GRASP] <= EpisodeConfig().grasp_max_steps

    def test_zero_policy_fails_at_grasp(self, table, ds):
        obj = table.entries[0].obj
        out = run_episode(obj, ZeroPolicy(), ds, EpisodeConfig(),
                          stream(41, "episode", 1))
        assert not out.success
        assert out.phase == GRASP

    def test_nan_policy_fails_with_diagnostics(self, table, ds):
        obj = table.entries[0].obj
        out = run_episode(obj, NanPolicy(), ds, EpisodeConfig(),
                          stream(41, "episode", 2))
        assert not out.success and out.phase == GRASP
        assert "non-finite" in out.diagnostics["failure"]

    def test_deterministic_per_seed(self, table, ds):
        obj = table.entries[1].obj
        outs = [run_episode(obj, ReplayExpert(ds), ds, EpisodeConfig(),
                            stream(43, "episode", 7)) for _ in range(2)]
        assert outs[0].phase == outs[1].phase
        assert outs[0].success == outs[1].success
        assert outs[0].steps == outs[1].steps
        np.testing.assert_array_equal(outs[0].terminal.q, outs[1].terminal.q)

    def test_ik_start_variant_runs(self, table, ds):
        obj = table.entries[0].obj
        cfg = EpisodeConfig(use_ik_start=True)
        out = run_episode(obj, ReplayExpert(ds), ds, cfg,
                          stream(47, "episode", 3))
        assert out.phase in (APPROACH, GRASP, LIFT)

    def test_success_requires_lift_phase(self):
        with pytest.raises(ContractError):
            EpisodeOutcome(GRASP, True, JointState(np.zeros(2), np.zeros(2)),
                           {}, {})

    def test_bad_config(self):
        with pytest.raises(InvalidArgumentError):
            EpisodeConfig(grasp_max_steps=0)
        with pytest.raises(InvalidArgumentError):
            EpisodeConfig(approach_seconds=-1.0)


class TestEvaluate:
    def specs(self, ds):
        return [PolicySpec("funnel", FunnelExpert(ds), ds),
                PolicySpec("zero", ZeroPolicy(), ds)]

    def test_zero_trials_valid_schema(self, ds):
        report, episodes = evaluate(self.specs(ds),
                                    [(Shape.CIRCLE, (0.05,))], seed=3,
                                    cfg=EvalConfig(trials=0))
        assert episodes == []
        assert report["report_version"] == 1
        cell = report["policies"]["funnel"]["circle"]
        assert cell == {"success": 0, "trials": 0, "rate": None}

    def test_episode_counting_and_recount(self, ds):
        cfg = EvalConfig(trials=2, episode=EpisodeConfig(grasp_max_steps=50))
        report, episodes = evaluate(
            self.specs(ds),
            [(Shape.CIRCLE, (0.05,)), (Shape.BOX, (0.09, 0.05))],
            seed=5, cfg=cfg)
        assert len(episodes) == 8  # 2 policies x 2 shapes x 2 trials
        for name, per_shape in report["policies"].items():
            for shape, cell in per_shape.items():
                wins = sum(1 for row in episodes
                           if row["policy"] == name and row["shape"] == shape
                           and row["success"])
                n = sum(1 for row in episodes
                        if row["policy"] == name and row["shape"] == shape)
                assert cell["success"] == wins <= cell["trials"] == n == 2
                assert cell["rate"] == wins / 2

    def test_poses_paired_across_policies(self, ds):
        cfg = EvalConfig(trials=2, episode=EpisodeConfig(grasp_max_steps=5))
        _, episodes = evaluate(self.specs(ds), [(Shape.CIRCLE, (0.05,))],
                               seed=7, cfg=cfg)
        by_policy = {}
        for row in episodes:
            by_policy.setdefault(row["policy"], []).append(row["pose"])
        assert by_policy["funnel"] == by_policy["zero"]

    def test_deterministic(self, ds):
        cfg = EvalConfig(trials=2, episode=EpisodeConfig(grasp_max_steps=40))
        a = evaluate(self.specs(ds), [(Shape.CIRCLE, (0.05,))], seed=9,
                     cfg=cfg)
        b = evaluate(self.specs(ds), [(Shape.CIRCLE, (0.05,))], seed=9,
                     cfg=cfg)
        assert json.dumps(a[0], sort_keys=True) == json.dumps(
            b[0], sort_keys=True)
        assert a[1] == b[1]

    def test_threads_match_serial(self, ds):
        kw = dict(specs=self.specs(ds), shapes=[(Shape.CIRCLE, (0.05,))],
                  seed=11)
        serial = evaluate(cfg=EvalConfig(
            trials=2, episode=EpisodeConfig(grasp_max_steps=40)), **kw)
        threaded = evaluate(cfg=EvalConfig(
            trials=2, threads=4,
            episode=EpisodeConfig(grasp_max_steps=40)), **kw)
        # only the config echo may differ (the thread count itself)
        assert serial[0]["policies"] == threaded[0]["policies"]
        assert serial[1] == threaded[1]

    def test_duplicate_names_rejected(self, ds):
        specs = [PolicySpec("a", ZeroPolicy(), ds),
                 PolicySpec("a", ZeroPolicy(), ds)]
        with pytest.raises(InvalidArgumentError):
            evaluate(specs, [(Shape.CIRCLE, (0.05,))], seed=1,
                     cfg=EvalConfig(trials=0))

    def test_replay_baseline(self, table, ds):
        # datagen rejects bad trajectories up front, so replay is perfect
        base = replay_baseline(ds, table)
        assert base == {"circle": 1.0}
        report, _ = evaluate([PolicySpec("zero", ZeroPolicy(), ds)],
                             [(Shape.CIRCLE, (0.05,))], seed=2,
                             cfg=EvalConfig(trials=0), tables={"zero": table})
        assert report["replay_baseline"]["zero"] == {"circle": 1.0}

    def test_report_files(self, ds, tmp_path):
        cfg = EvalConfig(trials=1, episode=EpisodeConfig(grasp_max_steps=5))
        report, episodes = evaluate(self.specs(ds),
                                    [(Shape.CIRCLE, (0.05,))], seed=13,
                                    cfg=cfg)
        jp, cp = tmp_path / "report.json", tmp_path / "episodes.csv"
        write_report_json(report, jp)
        write_episode_csv(episodes, cp)
        loaded = json.loads(jp.read_text())
        assert loaded["report_version"] == 1
        assert loaded["seed"] == 13
        with open(cp) as fh:
            rows = list(csv.DictReader(fh))
        assert len(rows) == len(episodes)
        for row, ep in zip(rows, episodes):
            assert row["policy"] == ep["policy"]
            assert int(row["success"]) == int(ep["success"])
            assert int(row["grasp_steps"]) == ep["steps"][GRASP]
