"""Shared fixtures and independent oracles used across the suite."""

from __future__ import annotations

import numpy as np
import pytest

from pfcc import scenario as sc
from pfcc.topology import DirectedTopology

SWAP = np.array([[0.0, 1.0], [1.0, 0.0]])


def transitive_closure(adjacency: np.ndarray) -> np.ndarray:
    """Brute-force reachability oracle: (i, j) true iff a path j -> i exists."""
    n = adjacency.shape[0]
    reach = adjacency > 0
    for _ in range(n):
        reach = reach | (reach @ reach)
    return reach


def chain_topology() -> DirectedTopology:
    """T -> L1 -> L2 -> F1 -> F2 -> F3, one long relay line."""
    ff = np.zeros((3, 3))
    ff[1, 0] = 1.0
    ff[2, 1] = 1.0
    ll = np.zeros((2, 2))
    ll[1, 0] = 1.0
    lf = np.zeros((3, 2))
    lf[0, 1] = 1.0
    return DirectedTopology(3, 2, ff, ll, lf, np.array([1.0, 0.0]))


def star_topology() -> DirectedTopology:
    """Every leader wired straight to every follower."""
    lf = np.ones((3, 2))
    return DirectedTopology(3, 2, np.zeros((3, 3)), np.zeros((2, 2)), lf,
                            np.array([1.0, 1.0]))


def relay_line_topology() -> DirectedTopology:
    """Followers 1-3 hear only the last leader of the line 4 -> 5 -> 6."""
    ll = np.zeros((3, 3))
    ll[1, 0] = 1.0  # 4 -> 5
    ll[2, 1] = 1.0  # 5 -> 6
    lf = np.zeros((3, 3))
    lf[:, 2] = 1.0  # 6 -> everyone
    return DirectedTopology(3, 3, np.zeros((3, 3)), ll, lf,
                            np.array([1.0, 0.0, 0.0]))


def direct_leaders_topology() -> DirectedTopology:
    """Each leader feeds one follower; followers relay around a ring."""
    ff = np.zeros((3, 3))
    ff[1, 0] = 1.0
    ff[2, 1] = 1.0
    ff[0, 2] = 1.0
    lf = np.eye(3)
    return DirectedTopology(3, 3, ff, np.zeros((3, 3)), lf,
                            np.array([1.0, 1.0, 1.0]))


def mixed_relay_topology() -> DirectedTopology:
    """Four leaders 4..7 with the line 4 -> 5 -> 6 -> 7, leader 6 feeding
    every follower and leader 7 feeding only follower 3."""
    ll = np.zeros((4, 4))
    ll[1, 0] = 1.0  # 4 -> 5
    ll[2, 1] = 1.0  # 5 -> 6
    ll[3, 2] = 1.0  # 6 -> 7
    lf = np.zeros((3, 4))
    lf[:, 2] = 1.0  # 6 -> all
    lf[2, 3] = 1.0  # 7 -> follower 3
    return DirectedTopology(3, 4, np.zeros((3, 3)), ll, lf,
                            np.array([1.0, 0.0, 0.0, 0.0]))


def random_topology(rng: np.random.Generator) -> DirectedTopology:
    """Random graph satisfying the spanning-tree and leader-coverage
    structure, at most 12 nodes."""
    n = int(rng.integers(1, 6))
    m = int(rng.integers(1, 6))
    ff = np.zeros((n, n))
    ll = np.zeros((m, m))
    lf = np.zeros((n, m))
    tl = np.zeros(m)
    # leaders: random in-tree rooted at the tracking leader
    for q in range(m):
        parent = int(rng.integers(0, q + 1))
        if parent == 0:
            tl[q] = 1.0
        else:
            ll[q, parent - 1] = 1.0
    # followers: parent is a leader or an earlier follower
    for i in range(n):
        choices = m + i
        pick = int(rng.integers(0, choices))
        if pick < m:
            lf[i, pick] = 1.0
        else:
            ff[i, pick - m] = 1.0
    # extra random edges respecting the type shape
    for _ in range(int(rng.integers(0, n + m))):
        i = int(rng.integers(0, n + m))
        j = int(rng.integers(0, n + m))
        w = float(rng.uniform(0.5, 2.0))
        if i < n:  # receiver is a follower
            if j < n and j != i:
                ff[i, j] = w
            elif j >= n:
                lf[i, j - n] = w
        else:  # receiver is a leader: only leaders may transmit
            if j >= n and j != i:
                ll[i - n, j - n] = w
    return DirectedTopology(n, m, ff, ll, lf, tl)


@pytest.fixture()
def hexagon_config():
    return sc.load_bundled("hexagon")


@pytest.fixture()
def hexagon_static_config():
    return sc.load_bundled("hexagon_static")
