import math

import networkx as nx
import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from conftest import random_position, random_tree, segment_graph
from vesselnav.errors import GeometryError, ParameterError
from vesselnav.vasctree import (LABELS, AnatomyParams, ArcPosition, Branch, CenterlinePoint,
                                VascTree, augment, chain_tortuosity, dumps, fuse, fusion_scale,
                                generate_body, generate_neck, generate_synthetic, load_tree,
                                loads, meet_point, pathlength, sample_targets, save_tree,
                                tortuosity)


def straight(n=11, length=100.0, r=2.0):
    x = np.linspace(0, length, n)
    return Branch("a", "FEMORAL", np.c_[x, np.zeros(n), np.zeros(n)], np.full(n, r))


def line_tree():
    return VascTree({"a": straight()}, "a")


# -- types -----------------------------------------------------------------------

def test_centerline_point_rejects_bad_radius():
    with pytest.raises(GeometryError):
        CenterlinePoint((0, 0, 0), 0.0)
    with pytest.raises(GeometryError):
        CenterlinePoint((0, math.nan, 0), 1.0)


@pytest.mark.parametrize("kwargs", [
    dict(positions=[[0, 0, 0]], radii=[1]),
    dict(positions=[[0, 0, 0], [0, 0, 0]], radii=[1, 1]),
    dict(positions=[[0, 0, 0], [1, 0, 0]], radii=[1, -1]),
    dict(positions=[[0, 0, 0], [1, 0, 0]], radii=[1, 1], takeoff_angle=181.0),
])
def test_branch_invariants(kwargs):
    with pytest.raises(GeometryError):
        Branch("x", "FEMORAL", **kwargs)


def test_tree_rejects_two_roots_and_dangling_parent():
    a = straight()
    b = Branch("b", "ILIAC", [[0, 1, 0], [0, 2, 0]], [1, 1])
    with pytest.raises(GeometryError):
        VascTree({"a": a, "b": b}, "a")
    c = Branch("c", "ILIAC", [[0, 1, 0], [0, 2, 0]], [1, 1], parent=("zz", 0))
    with pytest.raises(GeometryError):
        VascTree({"a": a, "c": c}, "a")


def test_generated_tree_topology(anatomy):
    anatomy.validate(complete=True)
    assert {b.label for b in anatomy.branches.values()} == set(LABELS)
    assert anatomy.branches[anatomy.root].label == "FEMORAL"
    lin = [anatomy.branches[b].label for b in anatomy.lineage(anatomy.by_label("RICA").id)]
    assert lin == ["FEMORAL", "ILIAC", "DESC_AORTA", "ARCH", "BCT", "RCCA", "RICA"]
    lin = [anatomy.branches[b].label for b in anatomy.lineage(anatomy.by_label("LICA").id)]
    assert lin == ["FEMORAL", "ILIAC", "DESC_AORTA", "ARCH", "LCCA", "LICA"]
    for b in anatomy.branches.values():
        assert np.all(np.diff(b.s) > 0) and 0 <= b.takeoff_angle <= 180
        assert b.seg.max() <= 1.0 + 1e-9     # resolvable at 2 mm observation spacing


# -- generation ----------------------------------------------------------------------

def test_generation_is_deterministic():
    assert dumps(generate_synthetic(seed=7)) == dumps(generate_synthetic(seed=7))
    assert dumps(generate_synthetic(seed=7)) != dumps(generate_synthetic(seed=8))


def test_arch_type_mix():
    # only the first draw of each seed decides the arch type
    n = 1000
    type1 = sum(np.random.default_rng(s).random() < 0.8 for s in range(n))
    assert abs(type1 / n - 0.8) <= 0.04
    types = [generate_synthetic(seed=s).arch_type for s in range(40)]
    assert set(types) <= {"TypeI", "TypeII"}
    assert types == ["TypeI" if np.random.default_rng(s).random() < 0.8 else "TypeII" for s in range(40)]


def test_right_tortuosity_in_calibrated_range():
    right = [chain_tortuosity(generate_synthetic(seed=s), "R") for s in range(100)]
    left = [chain_tortuosity(generate_synthetic(seed=s), "L") for s in range(100)]
    assert 1.05 <= np.mean(right) <= 1.35
    assert 1.0 <= np.mean(left) <= 1.35


def test_left_takeoff_more_acute(anatomy):
    for s in range(20):
        t = generate_synthetic(seed=s)
        assert t.by_label("LCCA").takeoff_angle > t.by_label("BCT").takeoff_angle


@pytest.mark.parametrize("bad", [
    dict(radii={"RICA": (0.0, 3.0)}),
    dict(lcca_acute_deg=(60.0, 80.0)),
    dict(p_type1=1.5),
    dict(lengths={"RCCA": (100.0, 90.0)}),
])
def test_infeasible_params(bad):
    with pytest.raises(ParameterError):
        generate_synthetic(AnatomyParams.from_dict(bad), 0)


def test_params_reject_unknown_keys():
    with pytest.raises(ParameterError):
        AnatomyParams.from_dict({"nope": 1})


@settings(max_examples=1000, deadline=None)
@given(st.integers(min_value=0, max_value=2 ** 32 - 1))
def test_generated_trees_always_valid(seed):
    t = generate_synthetic(seed=seed)
    t.validate(complete=True)


# -- fusion ---------------------------------------------------------------------------

def _fragments(seed):
    rng = np.random.default_rng(seed)
    p = AnatomyParams()
    return generate_neck(p, rng, "TypeI"), generate_body(p, rng)


def test_fusion_scale_examples():
    neck, body = _fragments(0)
    arch = neck.by_label("ARCH")
    ao = body.by_label("DESC_AORTA")
    arch.radii[:] *= 12.0 / arch.radii[0]
    ao.radii[:] *= 10.0 / ao.radii[-1]
    assert fusion_scale(neck, body) == pytest.approx(1.2, abs=1e-12)
    ao.radii[:] *= 12.0 / ao.radii[-1]
    assert fusion_scale(neck, body) == pytest.approx(1.0, abs=1e-12)
    fused = fuse(neck, body)
    for bid, b in body.branches.items():
        if b.label != "DESC_AORTA":
            d_old = np.linalg.norm(np.diff(b.positions, axis=0), axis=1)
            d_new = np.linalg.norm(np.diff(fused.branches[bid].positions, axis=0), axis=1)
            np.testing.assert_allclose(d_new, d_old, atol=1e-9)


def test_fusion_radius_continuity():
    for seed in range(50):
        neck, body = _fragments(seed)
        k = neck.by_label("ARCH").radii[0] / body.by_label("DESC_AORTA").radii[-1]
        fused = fuse(neck, body)
        ao = fused.by_label("DESC_AORTA")
        arch = fused.by_label("ARCH")
        assert abs(ao.radii[-1] - arch.radii[0]) <= 1e-9
        np.testing.assert_allclose(ao.radii, body.by_label("DESC_AORTA").radii * k, atol=1e-12)
        assert np.linalg.norm(ao.positions[-1] - arch.positions[0]) <= 1e-9


def test_fusion_pathlength_across_junction():
    neck, body = _fragments(3)
    t = fuse(neck, body)
    ao, arch = t.by_label("DESC_AORTA"), t.by_label("ARCH")
    a = ArcPosition(ao.id, 0.3 * ao.length)
    b = ArcPosition(arch.id, 0.5 * arch.length)
    junction = ArcPosition(ao.id, ao.length)
    assert pathlength(t, a, b) == pytest.approx(pathlength(t, a, junction) + pathlength(
        t, ArcPosition(arch.id, 0.0), b), abs=1e-6)


def test_fusion_rejects_missing_fragment():
    neck, body = _fragments(1)
    with pytest.raises(GeometryError):
        fuse(body, body)


# -- augmentation -------------------------------------------------------------------------

def test_augment_identity(anatomy):
    out = augment(anatomy, rotation=(0, 0, 0), scale_h=1.0, scale_w=1.0)
    for bid, b in anatomy.branches.items():
        np.testing.assert_allclose(out.branches[bid].positions, b.positions, atol=1e-9)
        np.testing.assert_allclose(out.branches[bid].radii, b.radii, atol=1e-12)


def test_augment_rotation_is_rigid(anatomy):
    out = augment(anatomy, rotation=(10, 0, 0), scale_h=1.0, scale_w=1.0)
    rng = np.random.default_rng(0)
    p0, p1 = anatomy.all_points(), out.all_points()
    i, j = rng.integers(0, len(p0), 500), rng.integers(0, len(p0), 500)
    np.testing.assert_allclose(np.linalg.norm(p1[i] - p1[j], axis=1),
                               np.linalg.norm(p0[i] - p0[j], axis=1), atol=1e-9)
    for _ in range(50):
        a, b = random_position(anatomy, rng), random_position(anatomy, rng)
        assert pathlength(out, a, b) == pytest.approx(pathlength(anatomy, a, b), rel=1e-9, abs=1e-9)
        if np.linalg.norm(anatomy.position(a) - anatomy.position(b)) > 1e-3:
            assert tortuosity(out, a, b) == pytest.approx(tortuosity(anatomy, a, b), rel=1e-9)


def test_augment_height_scale(anatomy):
    out = augment(anatomy, rotation=(0, 0, 0), scale_h=0.7, scale_w=1.0)
    z0 = [p[2] for b in anatomy.branches.values() for p in b.positions]
    z1 = [p[2] for b in out.branches.values() for p in b.positions]
    assert (max(z1) - min(z1)) == pytest.approx(0.7 * (max(z0) - min(z0)), rel=1e-12)
    assert [b.label for b in out.branches.values()] == [b.label for b in anatomy.branches.values()]


@pytest.mark.parametrize("kw", [dict(rotation=(11, 0, 0)), dict(scale_h=0.69), dict(scale_w=1.31)])
def test_augment_range_errors(anatomy, kw):
    with pytest.raises(ParameterError):
        augment(anatomy, **kw)


def test_augment_seeded_draws_in_range(anatomy):
    a = augment(anatomy, seed=5)
    assert dumps(a) == dumps(augment(anatomy, seed=5))


# -- pathlength -------------------------------------------------------------------------

def test_pathlength_simple_cases():
    t = line_tree()
    a = ArcPosition("a", 10.0)
    assert pathlength(t, a, a) == 0.0
    assert pathlength(t, a, ArcPosition("a", 25.0)) == pytest.approx(15.0)
    with pytest.raises(GeometryError):
        pathlength(t, a, ArcPosition("a", 100.5))
    with pytest.raises(GeometryError):
        pathlength(t, a, ArcPosition("zz", 1.0))


def test_pathlength_matches_segment_graph_oracle():
    rng = np.random.default_rng(2024)
    for _ in range(100):
        t = random_tree(rng)
        for _ in range(5):
            a, b = random_position(t, rng), random_position(t, rng)
            g = segment_graph(t, [a, b])
            ref = nx.shortest_path_length(g, a, b, weight="weight") if a != b else 0.0
            assert pathlength(t, a, b) == pytest.approx(ref, abs=1e-6)


def test_pathlength_on_anatomy_across_bifurcations(anatomy):
    a = ArcPosition(anatomy.by_label("RICA").id, 20.0)
    b = ArcPosition(anatomy.by_label("LICA").id, 30.0)
    g = segment_graph(anatomy, [a, b])
    assert pathlength(anatomy, a, b) == pytest.approx(nx.shortest_path_length(g, a, b, weight="weight"), abs=1e-6)


@settings(max_examples=200, deadline=None)
@given(st.integers(0, 10 ** 6))
def test_pathlength_metric_properties(seed):
    rng = np.random.default_rng(seed)
    t = random_tree(rng)
    a, b, c = (random_position(t, rng) for _ in range(3))
    dab = pathlength(t, a, b)
    assert dab >= 0 and dab == pytest.approx(pathlength(t, b, a), abs=1e-9)
    assert pathlength(t, a, c) <= dab + pathlength(t, b, c) + 1e-9
    m = meet_point(t, a, b)
    assert dab == pytest.approx(pathlength(t, a, m) + pathlength(t, m, b), abs=1e-9)


# -- tortuosity ------------------------------------------------------------------------

def test_tortuosity_straight_and_semicircle():
    t = line_tree()
    assert tortuosity(t, ArcPosition("a", 0), ArcPosition("a", 100)) == pytest.approx(1.0, abs=1e-12)
    th = np.linspace(0, np.pi, 4001)
    arc = Branch("a", "ARCH", np.c_[np.cos(th), np.sin(th), 0 * th] * 30, np.full(th.size, 5.0))
    ta = VascTree({"a": arc}, "a")
    assert tortuosity(ta, ArcPosition("a", 0), ArcPosition("a", arc.length)) == pytest.approx(np.pi / 2, abs=1e-3)
    with pytest.raises(GeometryError):
        tortuosity(t, ArcPosition("a", 3.0), ArcPosition("a", 3.0))


def test_tortuosity_at_least_one():
    rng = np.random.default_rng(5)
    for _ in range(200):
        t = random_tree(rng)
        a, b = random_position(t, rng), random_position(t, rng)
        if np.linalg.norm(t.position(a) - t.position(b)) > 1e-6:
            assert tortuosity(t, a, b) >= 1 - 1e-9


# -- targets -----------------------------------------------------------------------------

def test_sample_targets(anatomy):
    for label in ("DESC_AORTA", "RCCA", "RICA", "LCCA", "LICA"):
        bid = anatomy.by_label(label).id
        ts = sample_targets(anatomy, bid, 11)
        assert len(ts.train) == len(ts.eval) == 10
        assert not set(ts.train) & set(ts.eval)
        s = np.sort([p.s for p in ts.all])
        assert np.diff(s).min() > 0
        assert all(p.branch == bid and 0 <= p.s <= anatomy.branches[bid].length for p in ts.all)
        assert ts == sample_targets(anatomy, bid, 11)


def test_sample_targets_short_branch():
    t = VascTree({"a": straight(n=5, length=4.0)}, "a")
    with pytest.raises(GeometryError):
        sample_targets(t, "a", 0)


# -- serialization ------------------------------------------------------------------------

def test_serialization_round_trip(anatomy, tmp_path):
    path = tmp_path / "t.vtree"
    save_tree(anatomy, path)
    back = load_tree(path)
    assert dumps(back) == dumps(anatomy)
    for bid, b in anatomy.branches.items():
        np.testing.assert_allclose(back.branches[bid].positions, b.positions, atol=5e-7)
        assert back.branches[bid].parent == b.parent


def test_loads_rejects_garbage():
    with pytest.raises(GeometryError):
        loads("hello\n")
