import itertools

import numpy as np
import pytest

from molmae.molgraph import Atom, Bond, Molecule


def brute_force_dual_edges(directed_edges):
    """Every ordered pair of directed edges (u->v, x->w) with v == x and u != w."""
    out = set()
    for (i, (u, v)), (j, (x, w)) in itertools.product(enumerate(directed_edges), repeat=2):
        if v == x and u != w:
            out.add((i, j))
    return out


def random_molecule(rng: np.random.Generator, max_atoms: int = 12) -> Molecule:
    """Random simple graph as a carbon skeleton, max degree 5."""
    n = int(rng.integers(1, max_atoms + 1))
    deg = [0] * n
    pairs = set()
    for _ in range(int(rng.integers(0, 2 * n + 1))):
        a, b = (int(x) for x in rng.choice(n, 2)) if n > 1 else (0, 0)
        if a == b or (min(a, b), max(a, b)) in pairs or deg[a] >= 5 or deg[b] >= 5:
            continue
        pairs.add((min(a, b), max(a, b)))
        deg[a] += 1
        deg[b] += 1
    atoms = tuple(Atom("C") for _ in range(n))
    bonds = tuple(Bond(a, b, "single") for a, b in sorted(pairs))
    return Molecule(atoms, bonds)


@pytest.fixture
def rng():
    return np.random.default_rng(1234)
