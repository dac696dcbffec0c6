import os

os.environ.setdefault("OPENBLAS_NUM_THREADS", "1")

import networkx as nx
import numpy as np
import pytest

from vesselnav.vasctree import LABELS, ArcPosition, Branch, VascTree, generate_synthetic


@pytest.fixture(scope="session")
def anatomy():
    return generate_synthetic(seed=0)


def random_tree(rng, n_branches=None, max_points=12):
    """Random centerline tree of unconstrained shape (labels cycle through LABELS)."""
    n_branches = n_branches or int(rng.integers(1, 8))
    branches = {}
    for k in range(n_branches):
        n = int(rng.integers(2, max_points))
        if k == 0:
            start, parent = rng.normal(size=3) * 10, None
        else:
            pid = f"b{int(rng.integers(0, k))}"
            idx = int(rng.integers(0, len(branches[pid].radii)))
            start, parent = branches[pid].positions[idx], (pid, idx)
        steps = rng.normal(size=(n - 1, 3)) * rng.uniform(0.5, 5.0)
        steps[np.linalg.norm(steps, axis=1) < 1e-3] += 0.1
        pos = np.vstack([start, start + np.cumsum(steps, axis=0)])
        branches[f"b{k}"] = Branch(f"b{k}", LABELS[k % len(LABELS)], pos,
                                   rng.uniform(0.5, 3, n), parent, 90.0)
    return VascTree(branches, "b0")


def random_position(tree, rng):
    bid = list(tree.branches)[int(rng.integers(len(tree.branches)))]
    return ArcPosition(bid, float(rng.uniform(0, tree.branches[bid].length)))


def segment_graph(tree, extra=()):
    """Graph over every centerline vertex plus the given on-tree positions."""
    g = nx.Graph()
    for bid, b in tree.branches.items():
        arc = np.concatenate([[0.0], np.cumsum(np.sqrt(((b.positions[1:] - b.positions[:-1]) ** 2).sum(1)))])
        cuts = {i: [] for i in range(len(arc) - 1)}
        for p in extra:
            if p.branch == bid:
                i = min(max(int(np.searchsorted(arc, p.s, side="right")) - 1, 0), len(arc) - 1 - 1)
                cuts[i].append(p)
        for i in range(len(arc) - 1):
            chain = [(bid, i, arc[i])] + sorted(((p, None, p.s) for p in cuts[i]), key=lambda t: t[2]) \
                + [(bid, i + 1, arc[i + 1])]
            nodes = [(c[0], c[1]) if c[1] is not None else c[0] for c in chain]
            for (u, su), (v, sv) in zip(zip(nodes, [c[2] for c in chain]),
                                        zip(nodes[1:], [c[2] for c in chain[1:]])):
                w = abs(sv - su)
                if g.has_edge(u, v):
                    w = min(w, g[u][v]["weight"])
                g.add_edge(u, v, weight=w)
        if b.parent is not None:
            g.add_edge((bid, 0), b.parent, weight=0.0)
    return g


def pytest_terminal_summary(terminalreporter):
    mod = __import__("sys").modules.get("test_acceptance")
    lines = [line for _, line in sorted(getattr(mod, "REPORT", []))]
    if lines:
        terminalreporter.section("acceptance criteria")
        for line in lines:
            terminalreporter.write_line(line)
