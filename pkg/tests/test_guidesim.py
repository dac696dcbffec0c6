import dataclasses
import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from conftest import random_position
from vesselnav.guidesim import (DT, ZERO_ACTION, ActionCommand, Observer, SimConfig,
                                entry_probability, initial_state, normalize, observe, project,
                                step, wire_points, write_trajectory_csv)
from vesselnav.vasctree import ArcPosition, Branch, VascTree, pathlength, position_along_path


def x_line(length=200.0, n=201):
    x = np.linspace(0, length, n)
    return VascTree({"a": Branch("a", "FEMORAL", np.c_[x, 0 * x, 0 * x], np.full(n, 3.0))}, "a")


def y_tree():
    """Straight trunk along z with one side branch leaving at 60 degrees."""
    z = np.linspace(0, 100, 101)
    trunk = Branch("t", "DESC_AORTA", np.c_[0 * z, 0 * z, z], np.full(z.size, 5.0))
    u = np.linspace(0, 60, 61)
    d = np.array([math.sin(math.radians(60)), 0, math.cos(math.radians(60))])
    side = Branch("s", "LCCA", trunk.positions[50] + u[:, None] * d, np.full(u.size, 3.0), ("t", 50), 60.0)
    return VascTree({"t": trunk, "s": side}, "t")


def test_action_clamped_on_construction():
    a = ActionCommand(500, -99, -1000, 41)
    assert a.as_array().tolist() == [180, -40, -180, 40]
    assert ActionCommand.from_unit([1, 1, -1, 0]).as_array().tolist() == [180, 40, -180, 0]
    assert ActionCommand(math.nan).wire_rot_speed == 0.0


def test_zero_action_keeps_state(anatomy):
    cfg = SimConfig()
    st0 = initial_state(anatomy, ArcPosition(anatomy.by_label("ILIAC").id, 30.0), cfg)
    assert step(anatomy, st0, ZERO_ACTION, DT, np.random.default_rng(0), cfg) is st0


def test_translation_kinematics():
    t = x_line()
    cfg = SimConfig()
    s0 = initial_state(t, ArcPosition("a", 50.0), cfg)
    s1 = step(t, s0, ActionCommand(0, 40, 0, 0), DT, np.random.default_rng(0), cfg)
    assert s1.inserted_wire - s0.inserted_wire == pytest.approx(40 * 2 / 15, abs=1e-9)
    assert s1.wire_tip.s == pytest.approx(55.3333333, abs=1e-6)
    s2 = step(t, s1, ActionCommand(90, 0, 0, 0), DT, np.random.default_rng(0), cfg)
    assert s2.wire_rotation == pytest.approx(12.0)


def test_dead_end_stalls():
    t = x_line(20.0, 21)
    cfg = SimConfig()
    s = initial_state(t, ArcPosition("a", 18.0), cfg)
    s = step(t, s, ActionCommand(0, 40, 0, 0), DT, np.random.default_rng(0), cfg)
    assert s.stalled and s.wire_tip.s == pytest.approx(20.0)
    s = step(t, s, ActionCommand(0, -40, 0, 0), DT, np.random.default_rng(0), cfg)
    assert not s.stalled


def test_entry_probability_law():
    cfg = SimConfig()
    assert entry_probability(cfg, 0.0, 60.0, True) == pytest.approx(cfg.p_aligned)
    assert entry_probability(cfg, 0.0, 60.0, False) == pytest.approx(cfg.p_aligned * cfg.unsupported_factor)
    ps = [entry_probability(cfg, m, 120.0, True) for m in range(0, 181, 5)]
    assert all(a >= b for a, b in zip(ps, ps[1:]))
    # sharper turns narrow the window
    assert entry_probability(cfg, 30.0, 140.0, True) < entry_probability(cfg, 30.0, 100.0, True)
    assert entry_probability(cfg, 170.0, 100.0, False) == 0.0


def test_aligned_entry_frequency_matches_law():
    t = y_tree()
    cfg = SimConfig()
    rot = t.orientation("s")
    s0 = initial_state(t, ArcPosition("t", 48.0), cfg, rotation=rot)
    s0 = dataclasses.replace(s0, catheter_tip=ArcPosition("t", 40.0), inserted_catheter=40.0)
    assert 50.0 - s0.inserted_catheter - s0.inserted_catheter <= cfg.support_distance_mm
    rng = np.random.default_rng(0)
    n = 10_000
    hits = sum(step(t, s0, ActionCommand(0, 40, 0, 0), DT, rng, cfg).wire_tip.branch == "s" for _ in range(n))
    assert abs(hits / n - cfg.p_aligned) <= 0.02


def test_enter_then_retract_returns_to_bifurcation():
    t = y_tree()
    cfg = SimConfig(p_aligned=1.0, unsupported_factor=1.0)
    s0 = initial_state(t, ArcPosition("t", 48.0), cfg, rotation=t.orientation("s"))
    s1 = step(t, s0, ActionCommand(0, 30, 0, 0), DT, np.random.default_rng(0), cfg)
    assert s1.wire_tip.branch == "s"
    s2 = step(t, s1, ActionCommand(0, -30, 0, 0), DT, np.random.default_rng(0), cfg)
    assert s2.wire_tip.branch == "t"
    assert np.linalg.norm(t.position(s2.wire_tip) - t.position(s0.wire_tip)) <= 1e-6


def _random_walk(tree, n, seed, cfg=None):
    cfg = cfg or SimConfig()
    rng = np.random.default_rng(seed)
    state = initial_state(tree, tree.insertion, cfg)
    states = [state]
    for _ in range(n):
        a = ActionCommand.from_unit(rng.uniform(-1, 1, 4) + np.array([0, 0.4, 0, 0.4]))
        state = step(tree, state, a, DT, rng, cfg)
        states.append(state)
    return states


def test_conservation_containment_and_speed_limits(anatomy):
    states = _random_walk(anatomy, 600, 1)
    for prev, s in zip(states, states[1:]):
        assert anatomy.root_distance(s.wire_tip) == pytest.approx(s.inserted_wire, abs=1e-6)
        lin = anatomy.lineage(s.wire_tip.branch)
        assert s.catheter_tip.branch in lin
        assert anatomy.root_distance(s.catheter_tip) <= s.inserted_wire + 1e-9
        assert abs(s.inserted_wire - prev.inserted_wire) <= 40 * DT + 1e-9
        assert abs(s.inserted_catheter - prev.inserted_catheter) <= 40 * DT + 1e-9
        drot = abs((s.wire_rotation - prev.wire_rotation + 180) % 360 - 180)
        assert drot <= 180 * DT + 1e-9
        assert 0 <= s.wire_rotation < 360 and s.inserted_wire >= 0 and s.inserted_catheter >= 0


def test_step_deterministic(anatomy):
    a = _random_walk(anatomy, 300, 4)
    b = _random_walk(anatomy, 300, 4)
    assert a == b


def test_catheter_modes(anatomy):
    for mode in ("frozen", "follow"):
        cfg = SimConfig(catheter_mode=mode)
        states = _random_walk(anatomy, 100, 2, cfg)
        if mode == "frozen":
            assert all(s.catheter_rotation == 0.0 for s in states)
        else:
            for s in states[1:]:
                assert s.inserted_catheter == pytest.approx(max(0.0, s.inserted_wire - cfg.initial_catheter_gap_mm))


def test_observe_straight_wire_points():
    t = x_line()
    cfg = SimConfig(tip_bend_mm=0.0)
    st0 = initial_state(t, ArcPosition("a", 30.0), cfg)
    obs = observe(t, st0, ArcPosition("a", 100.0), ZERO_ACTION, cfg)
    np.testing.assert_allclose(obs.tip_points_mm, [[30, 0], [28, 0], [26, 0]], atol=1e-12)
    np.testing.assert_allclose(obs.target_mm, [100, 0])
    assert obs.as_vector().shape == (18,)


def test_observe_near_insertion_clamps():
    t = x_line()
    cfg = SimConfig(tip_bend_mm=0.0)
    obs = observe(t, initial_state(t, ArcPosition("a", 1.0), cfg), ArcPosition("a", 9.0), ZERO_ACTION, cfg)
    np.testing.assert_allclose(obs.tip_points_mm, [[1, 0], [0, 0], [0, 0]], atol=1e-12)


def test_consecutive_observations_identical_points(anatomy):
    cfg = SimConfig()
    obsr = Observer(cfg)
    st0 = initial_state(anatomy, ArcPosition(anatomy.by_label("ILIAC").id, 20.0), cfg)
    tgt = ArcPosition(anatomy.by_label("RCCA").id, 10.0)
    obsr.observe(anatomy, st0, tgt, ZERO_ACTION)
    o2 = obsr.observe(anatomy, st0, tgt, ZERO_ACTION)
    np.testing.assert_array_equal(o2.tip_points, o2.prev_tip_points)


def test_tip_points_spacing_without_bend(anatomy):
    cfg = SimConfig(tip_bend_mm=0.0, drop_axis=1)
    rng = np.random.default_rng(0)
    for _ in range(50):
        p = random_position(anatomy, rng)
        if anatomy.root_distance(p) < 5:
            continue
        st0 = initial_state(anatomy, p, cfg)
        pts = wire_points(anatomy, st0, cfg)
        for k in (0, 1):
            a = position_along_path(anatomy, p, st0.inserted_wire - 2 * k)
            b = position_along_path(anatomy, p, st0.inserted_wire - 2 * (k + 1))
            assert pathlength(anatomy, a, b) == pytest.approx(2.0, abs=1e-9)
            assert np.linalg.norm(pts[k] - pts[k + 1]) <= 2.0 + 1e-9


def test_normalized_observations_bounded(anatomy):
    cfg = SimConfig()
    rng = np.random.default_rng(3)
    tgt = ArcPosition(anatomy.by_label("LICA").id, 5.0)
    for _ in range(10_000):
        p = random_position(anatomy, rng)
        st0 = initial_state(anatomy, p, cfg, rotation=float(rng.uniform(0, 360)))
        v = observe(anatomy, st0, tgt, ActionCommand.from_unit(rng.uniform(-1, 1, 4)), cfg).as_vector()
        assert np.all(np.abs(v) <= 1.0)


def test_normalize_clips():
    cfg = SimConfig()
    np.testing.assert_allclose(normalize(np.array([[1e6, -1e6]]), cfg), [[1, -1]])
    np.testing.assert_allclose(normalize(np.array(cfg.workspace_lo), cfg), [-1, -1])


def test_project_examples():
    np.testing.assert_array_equal(project([1, 2, 3], drop_axis=2), [1, 2])
    np.testing.assert_array_equal(project([1, 2, 3]), [1, 3])


@settings(max_examples=200)
@given(st.lists(st.floats(-1e3, 1e3), min_size=6, max_size=6), st.integers(0, 2))
def test_project_linear_and_contracting(v, ax):
    a, b = np.array(v[:3]), np.array(v[3:])
    np.testing.assert_allclose(project(a + b, ax), project(a, ax) + project(b, ax), atol=1e-9)
    assert np.linalg.norm(project(a, ax) - project(b, ax)) <= np.linalg.norm(a - b) + 1e-9


def test_trajectory_csv(tmp_path):
    rows = [dict(episode=0, step=1, tip_x=1.0, tip_y=2.0, tip_z=3.0, proj_u=1.0, proj_v=3.0,
                 wire_rot_speed=0.0, wire_trans_speed=40.0, cath_rot_speed=0.0,
                 cath_trans_speed=0.0, reward=0.1, done=0)]
    write_trajectory_csv(tmp_path / "t.csv", rows)
    text = (tmp_path / "t.csv").read_text().splitlines()
    assert text[0].startswith("episode,step,tip_x") and len(text) == 2


def test_sim_config_validation():
    from vesselnav.errors import ConfigurationError
    with pytest.raises(ConfigurationError):
        SimConfig(catheter_mode="robot").validate()
    with pytest.raises(ConfigurationError):
        SimConfig(p_aligned=1.2).validate()
