import json
from dataclasses import replace
from types import SimpleNamespace

import numpy as np
import pytest
from hypothesis import given, strategies as st

from crowdnav.core import RobotAction, RobotState, point_segment_distance
from crowdnav.sicnav import MpcConfig, SicnavController
from crowdnav.sim import (EpisodeResult, HumanAttributes, Predictor, ScenarioConfig, TraceFormatError,
                          World, aggregate_metrics, generate_corridor, read_trace, result_from_trace,
                          robot_collides, run_episode, scenario_from_dict, scenario_to_dict, step_world,
                          write_trace)
from crowdnav.sim.metrics import TABLE_HEADER
from crowdnav.sim.scenario import corridor_walls

DT = 0.25


def _attrs(goal, speed=1.0, buffer=0.0, horizon=3.0):
    return HumanAttributes(0.3, buffer, horizon, goal, speed, speed)


def _scenario(starts, humans, robot=(0.5, 0.0, 0.0), goal=(8.5, 0.0), walls=None, timeout=30.0):
    walls = corridor_walls() if walls is None else walls
    return ScenarioConfig(1.75, 9.0, walls, robot, goal, tuple(starts), tuple(humans), 0, timeout)


class ZeroController:
    def reset(self):
        pass

    def step(self, measured, samples):
        return SimpleNamespace(action=RobotAction(0.0, 0.0), status="fixed", fallback=False)


# scenario generation

def test_empty_corridor():
    sc = generate_corridor(0, 0)
    assert sc.num_humans == 0
    assert len(sc.walls) == 2
    assert sc.width == 1.75 and sc.length == 9.0


def test_generation_is_deterministic():
    assert scenario_to_dict(generate_corridor(11, 3)) == scenario_to_dict(generate_corridor(11, 3))
    assert scenario_to_dict(generate_corridor(11, 3)) != scenario_to_dict(generate_corridor(12, 3))


def test_five_hundred_seeds_place_agents_validly():
    for seed in range(500):
        sc = generate_corridor(seed, 3)
        half = sc.width / 2
        pts = [np.array(sc.robot_start[:2])] + [np.array(p) for p in sc.human_starts]
        radii = [sc.robot_radius] + [h.inflated_radius for h in sc.humans]
        for p, r in zip(pts, radii):
            assert 0.0 <= p[0] <= sc.length
            assert abs(p[1]) + r <= half
        for i in range(len(pts)):
            for k in range(i + 1, len(pts)):
                assert np.linalg.norm(pts[i] - pts[k]) >= radii[i] + radii[k]
        for h in sc.humans:
            assert 0.0 <= h.radius_buffer <= 0.1
            assert 1.0 <= h.orca_time_horizon <= 5.0
            assert 0.8 <= h.max_speed <= 1.4
            assert abs(h.goal[1]) <= 0.4


def test_negative_human_count_rejected():
    with pytest.raises(ValueError):
        generate_corridor(0, -1)


def test_scenario_round_trip():
    sc = generate_corridor(4, 3)
    data = json.loads(json.dumps(scenario_to_dict(sc)))
    assert scenario_to_dict(scenario_from_dict(data)) == scenario_to_dict(sc)


def test_malformed_scenario_rejected():
    data = scenario_to_dict(generate_corridor(4, 1))
    del data["walls"]
    with pytest.raises(ValueError):
        scenario_from_dict(data)
    with pytest.raises(ValueError):
        _scenario([(0.6, 0.0)], [_attrs((-1, 0))])


def test_attribute_validation():
    with pytest.raises(ValueError):
        HumanAttributes(0.3, -0.1, 3.0, (0, 0), 1.0, 1.0)
    with pytest.raises(ValueError):
        HumanAttributes(0.0, 0.0, 3.0, (0, 0), 1.0, 1.0)


# world stepping

def test_single_human_walks_to_goal_at_preferred_speed():
    # robot behind the human so nothing is in its way
    sc = _scenario([(6.0, 0.0)], [_attrs((-1.0, 0.0), speed=1.1)], robot=(8.5, 0.0, 0.0))
    world = World.from_scenario(sc)
    for k in range(1, 11):
        world = step_world(world, RobotAction(0.0, 0.0), DT)
        np.testing.assert_allclose(world.humans[0].velocity, [-1.1, 0.0], atol=1e-9)
        np.testing.assert_allclose(world.humans[0].position, [6.0 - 1.1 * DT * k, 0.0], atol=1e-9)


def test_symmetric_head_on_humans_mirror_each_other():
    # a parked robot at the centre keeps the scene point-symmetric about it
    c = np.array([4.5, 0.0])
    sc = _scenario([(2.0, 0.1), (7.0, -0.1)], [_attrs((10.0, 0.1)), _attrs((-1.0, -0.1))],
                   robot=(4.5, 0.0, 0.0), walls=())
    world = World.from_scenario(sc)
    lateral = 0.0
    for _ in range(40):
        world = step_world(world, RobotAction(0.0, 0.0), DT)
        a, b = world.humans
        np.testing.assert_allclose(a.position + b.position, 2 * c, atol=1e-6)
        np.testing.assert_allclose(a.velocity + b.velocity, 0.0, atol=1e-6)
        lateral = max(lateral, abs(a.position[1]))
    # both swerve around the robot and pass each other
    assert lateral > 0.5
    assert world.humans[0].position[0] > 7.0 and world.humans[1].position[0] < 2.0


def _relaxation_probe(monkeypatch):
    import crowdnav.sim.world as world_mod
    slacks = []
    orig = world_mod.solve_orca_qp

    def probe(planes, v, params):
        sol = orig(planes, v, params)
        slacks.append(sol.slack)
        return sol

    monkeypatch.setattr(world_mod, "solve_orca_qp", probe)
    return slacks


def test_matching_radii_humans_do_not_overlap(monkeypatch):
    slacks = _relaxation_probe(monkeypatch)
    for seed in range(6):
        sc = generate_corridor(seed, 3)
        sc = replace(sc, humans=tuple(replace(h, radius_buffer=0.0) for h in sc.humans))
        world = World.from_scenario(sc)
        for _ in range(120):
            slacks.clear()
            world = step_world(world, RobotAction(0.0, 0.0), DT)
            # an infeasible crowd forces a real relaxation, where ORCA promises nothing
            if max(slacks) > 1e-3:
                continue
            pos = world.human_positions()
            for i in range(3):
                for k in range(i + 1, 3):
                    assert np.linalg.norm(pos[i] - pos[k]) >= 0.6 - 1e-3


def test_humans_never_cross_walls():
    for seed in range(6):
        sc = generate_corridor(seed, 3)
        world = World.from_scenario(sc)
        for _ in range(120):
            world = step_world(world, RobotAction(0.0, 0.0), DT)
            for p, h in zip(world.human_positions(), sc.humans):
                for w in sc.walls:
                    assert point_segment_distance(p, w) >= h.radius - 1e-6


def test_step_world_rejects_bad_dt():
    with pytest.raises(ValueError):
        step_world(World.from_scenario(generate_corridor(0, 0)), RobotAction(0, 0), 0.0)


def test_collision_detector():
    sc = _scenario([(3.0, 0.0)], [_attrs((-1.0, 0.0), buffer=0.1)])
    world = World.from_scenario(sc)
    assert not robot_collides(world)
    assert robot_collides(replace(world, robot=RobotState(np.array([2.5, 0.0]))))
    assert robot_collides(replace(world, robot=RobotState(np.array([0.5, 0.7]))))
    # the buffer shapes behaviour only; collisions use true radii
    assert not robot_collides(replace(world, robot=RobotState(np.array([2.39, 0.0]))))


# episodes

def test_empty_corridor_episode_succeeds():
    sc = generate_corridor(0, 0)
    cfg = MpcConfig(goal=sc.robot_goal, obstacles=sc.walls)
    res = run_episode(sc, SicnavController(cfg), Predictor("cvg", 8, DT, 1))
    assert res.success
    assert res.collision_steps == 0 and res.frozen_steps == 0
    assert res.nav_time <= sc.timeout


def test_zero_action_controller_freezes():
    sc = generate_corridor(0, 0, timeout=5.0)
    res = run_episode(sc, ZeroController(), Predictor("cvg", 8, DT, 1))
    assert not res.success and res.nav_time is None
    assert res.total_steps == 20 and res.frozen_steps == 20
    m = aggregate_metrics([res])
    assert m.frozen_freq == pytest.approx(1.0 / DT * res.frozen_steps / res.total_steps)
    assert m.frozen_freq > 0 and m.nav_time_is_sentinel


def test_episode_determinism_and_trace_replay(tmp_path):
    sc = generate_corridor(3, 3, timeout=6.0)
    cfg = MpcConfig(goal=sc.robot_goal, obstacles=sc.walls)
    a = run_episode(sc, SicnavController(cfg), Predictor("mixture", 8, DT, 9, seed=3),
                    trace_path=tmp_path / "trace.jsonl")
    b = run_episode(sc, SicnavController(cfg), Predictor("mixture", 8, DT, 9, seed=3))
    assert a == b
    assert a.collision_steps <= a.total_steps and a.frozen_steps <= a.total_steps
    replay = result_from_trace(read_trace(tmp_path / "trace.jsonl"), sc.seed, DT, sc.timeout)
    assert replay.summary() == a.summary()
    assert aggregate_metrics([replay]) == aggregate_metrics([a])


def test_predictor_validation():
    with pytest.raises(ValueError):
        Predictor("oracle", 8, DT)
    with pytest.raises(ValueError):
        Predictor("external", 8, DT)


# traces

def test_trace_errors_name_the_line(tmp_path):
    good = {"step": 1, "time": 0.25, "robot": [0, 0, 0, 0], "humans": [], "action": [0, 0],
            "collision": False, "frozen": True, "reached_goal": False}
    path = tmp_path / "t.jsonl"
    path.write_text(json.dumps(good) + "\n" + "{not json\n")
    with pytest.raises(TraceFormatError) as exc:
        read_trace(path)
    assert exc.value.line_no == 2 and "line 2" in str(exc.value)
    bad = dict(good)
    del bad["robot"]
    path.write_text(json.dumps(good) + "\n\n" + json.dumps(bad) + "\n")
    with pytest.raises(TraceFormatError) as exc:
        read_trace(path)
    assert exc.value.line_no == 3
    path.write_text(json.dumps(dict(good, humans=[[1, 2, 3]])) + "\n")
    with pytest.raises(TraceFormatError):
        read_trace(path)


def test_trace_round_trip(tmp_path):
    trace = [{"step": k, "time": k * DT, "robot": [k, 0, 0, 1], "humans": [[1, 2, 0, 0]], "action": [1, 0],
              "collision": k == 2, "frozen": False, "reached_goal": k == 3} for k in (1, 2, 3)]
    write_trace(trace, tmp_path / "t.jsonl")
    back = read_trace(tmp_path / "t.jsonl")
    assert back == trace
    res = result_from_trace(back, 5, DT, 30.0)
    assert res.success and res.nav_time == 0.75 and res.collision_steps == 1 and res.total_steps == 3


# metrics

def _result(seed, success, nav=None, coll=0, frozen=0, steps=40):
    return EpisodeResult(seed, success, nav, coll, frozen, steps, DT, 30.0)


def test_metrics_all_successes():
    m = aggregate_metrics([_result(s, True, 10.0) for s in range(4)])
    assert (m.success_rate, m.avg_nav_time, m.collision_freq, m.frozen_freq) == (1.0, 10.0, 0.0, 0.0)


def test_metrics_half_success():
    m = aggregate_metrics([_result(0, True, 10.0), _result(1, False, steps=120)])
    assert m.success_rate == 0.5 and m.avg_nav_time == 10.0


def test_metrics_constructed_counts():
    rs = [_result(0, True, 10.0, coll=3, frozen=1, steps=40), _result(1, False, coll=2, frozen=10, steps=120)]
    m = aggregate_metrics(rs)
    seconds = (40 + 120) * DT
    assert m.collision_freq == pytest.approx(5 / seconds)
    assert m.frozen_freq == pytest.approx(11 / seconds)


def test_metrics_no_success_sentinel():
    m = aggregate_metrics([_result(0, False, steps=120)])
    assert m.nav_time_is_sentinel and m.avg_nav_time == 30.0
    assert "timeout" in m.table_row("x")
    assert TABLE_HEADER.split()[0] == "method"


def test_metrics_need_results():
    with pytest.raises(ValueError):
        aggregate_metrics([])


@given(st.lists(st.tuples(st.booleans(), st.integers(0, 10), st.integers(0, 10), st.integers(10, 120)),
                min_size=1, max_size=8), st.randoms())
def test_metrics_permutation_invariant(rows, rnd):
    rs = [_result(i, ok, 5.0 + i if ok else None, c, f, n) for i, (ok, c, f, n) in enumerate(rows)]
    shuffled = list(rs)
    rnd.shuffle(shuffled)
    a, b = aggregate_metrics(rs), aggregate_metrics(shuffled)
    assert a == b
    assert 0.0 <= a.success_rate <= 1.0 and a.collision_freq >= 0 and a.frozen_freq >= 0
