"""Bundled corpora: a fragment-assembly molecule generator, a SMILES writer,
the 200-molecule sample file and synthetic label sets."""

from __future__ import annotations

import csv
from importlib import resources
from pathlib import Path
from typing import Sequence

import numpy as np

from .molgraph import Atom, Bond, Molecule, parse_smiles

_VALENCE = {"B": 3, "C": 4, "N": 3, "O": 2, "P": 5, "S": 6, "F": 1, "Cl": 1, "Br": 1, "I": 1}
_BOND_VALENCE = {"single": 1.0, "double": 2.0, "triple": 3.0, "aromatic": 1.5}

CORES = (
    ("c1ccccc1", 30), ("c1ccncc1", 8), ("c1ccoc1", 3), ("c1ccsc1", 3), ("c1cc[nH]c1", 2),
    ("c1cncnc1", 3), ("c1ccc2ccccc2c1", 3), ("c1ccc2[nH]ccc2c1", 2), ("c1cn[nH]c1", 2),
    ("C1CCCCC1", 6), ("C1CCNCC1", 6), ("C1COCCN1", 4), ("C1CCOC1", 2), ("C1CC1", 3),
    ("C1CCNC1", 3), ("O=C1CCCN1", 2),
)
LINKERS = (
    ("C", 6), ("CC", 4), ("C(=O)N", 6), ("O", 4), ("N", 3), ("C(=O)O", 2), ("S(=O)(=O)N", 2),
    ("CCO", 2), ("C=C", 1), ("CN", 3), ("OCC", 2), ("", 6),
)
SUBSTITUENTS = (
    ("C", 20), ("CC", 6), ("O", 8), ("OC", 6), ("N", 5), ("F", 6), ("Cl", 5), ("Br", 2), ("I", 1),
    ("C(=O)O", 4), ("C(=O)N", 3), ("C#N", 3), ("C(F)(F)F", 3), ("C(=O)C", 3),
    ("[N+](=O)[O-]", 2), ("S(C)(=O)=O", 1), ("CO", 3), ("N(C)C", 3), ("C(C)C", 3), ("OCC", 2),
    ("SC", 1), ("C(=O)OC", 2), ("NC(C)=O", 2), ("P(=O)(O)O", 1), ("B(O)O", 1), ("C=O", 1),
)


def _pick(rng: np.random.Generator, table):
    items, weights = zip(*table)
    w = np.asarray(weights, dtype=np.float64)
    return items[rng.choice(len(items), p=w / w.sum())]


class _Builder:
    def __init__(self):
        self.atoms: list[Atom] = []
        self.bonds: list[tuple[int, int, str]] = []

    def add_fragment(self, smiles: str) -> list[int]:
        frag = parse_smiles(smiles)
        base = len(self.atoms)
        self.atoms.extend(frag.atoms)
        self.bonds.extend((b.a1 + base, b.a2 + base, b.order) for b in frag.bonds)
        return list(range(base, base + frag.n_atoms))

    def free_valence(self, i: int) -> float:
        a = self.atoms[i]
        used = sum(_BOND_VALENCE[o] for x, y, o in self.bonds if i in (x, y))
        cap = _VALENCE[a.element] + (a.charge if a.element in ("N", "O") else 0)
        if a.element == "S" and not a.aromatic and used <= 2:
            cap = 2 if not any(o == "double" for x, y, o in self.bonds if i in (x, y)) else 6
        return cap - used - a.num_hs

    def degree(self, i: int) -> int:
        return sum(i in (x, y) for x, y, _ in self.bonds)

    def attachable(self, atoms: Sequence[int]) -> list[int]:
        return [i for i in atoms if self.free_valence(i) >= 1 and self.degree(i) < 4]

    def molecule(self) -> Molecule:
        return Molecule(tuple(self.atoms), tuple(Bond(a, b, o) for a, b, o in self.bonds))


def generate_molecule(rng: np.random.Generator) -> str:
    """Assemble 1-3 ring cores with linkers and decorate with substituents."""
    b = _Builder()
    placed = b.add_fragment(_pick(rng, CORES))
    n_cores = int(rng.choice([1, 2, 3], p=[0.35, 0.5, 0.15]))
    for _ in range(n_cores - 1):
        sites = b.attachable(placed)
        if not sites:
            break
        anchor = int(rng.choice(sites))
        link = _pick(rng, LINKERS)
        if link:
            latoms = b.add_fragment(link)
            b.bonds.append((anchor, latoms[0], "single"))
            anchor = latoms[-1]
            placed = placed + latoms
        core = b.add_fragment(_pick(rng, CORES))
        csites = b.attachable(core)
        if b.free_valence(anchor) < 1 or not csites:
            break
        b.bonds.append((anchor, int(rng.choice(csites)), "single"))
        placed = placed + core
    for _ in range(int(rng.choice([0, 1, 2, 3, 4], p=[0.1, 0.3, 0.3, 0.2, 0.1]))):
        sites = b.attachable(placed)
        if not sites:
            break
        anchor = int(rng.choice(sites))
        sub = b.add_fragment(_pick(rng, SUBSTITUENTS))
        b.bonds.append((anchor, sub[0], "single"))
    return to_smiles(b.molecule(), rng)


def _atom_token(a: Atom) -> str:
    sym = a.element.lower() if a.aromatic else a.element
    if a.charge == 0 and a.num_hs == 0 and (not a.aromatic or sym in "bcnops"):
        return sym
    h = "" if a.num_hs == 0 else ("H" if a.num_hs == 1 else f"H{a.num_hs}")
    c = "" if a.charge == 0 else ("+" if a.charge == 1 else "-" if a.charge == -1 else f"{a.charge:+d}")
    return f"[{sym}{h}{c}]"


def _bond_token(mol: Molecule, i: int, j: int, order: str) -> str:
    both_arom = mol.atoms[i].aromatic and mol.atoms[j].aromatic
    if order == "aromatic":
        return "" if both_arom else ":"
    if order == "single":
        return "-" if both_arom else ""
    return {"double": "=", "triple": "#"}[order]


def to_smiles(mol: Molecule, rng: np.random.Generator | None = None) -> str:
    """Write a SMILES string by depth-first traversal from atom 0.

    Neighbour order is shuffled when ``rng`` is given. Every component is
    written, joined by ``.``.
    """
    adj: list[list[tuple[int, str]]] = [[] for _ in range(mol.n_atoms)]
    for bond in mol.bonds:
        adj[bond.a1].append((bond.a2, bond.order))
        adj[bond.a2].append((bond.a1, bond.order))
    if rng is not None:
        for lst in adj:
            rng.shuffle(lst)

    visited = [False] * mol.n_atoms
    children: list[list[tuple[int, str]]] = [[] for _ in range(mol.n_atoms)]
    closures: dict[int, list[tuple[int, str, bool]]] = {i: [] for i in range(mol.n_atoms)}
    tree_edges: set[frozenset[int]] = set()
    roots = []
    for root in range(mol.n_atoms):
        if not visited[root]:
            roots.append(root)
            _dfs_tree(root, adj, visited, children, tree_edges)
    rank = {}
    for root in roots:
        _preorder(root, children, rank)
    for bond in mol.bonds:
        key = frozenset((bond.a1, bond.a2))
        if key in tree_edges:
            continue
        first, second = sorted((bond.a1, bond.a2), key=lambda a: rank[a])
        closures[first].append((second, bond.order, True))
        closures[second].append((first, bond.order, False))

    labels: dict[frozenset[int], int] = {}
    free = list(range(1, 100))
    out: list[str] = []

    def emit(v: int) -> None:
        out.append(_atom_token(mol.atoms[v]))
        for w, o, opening in sorted(closures[v], key=lambda t: rank[t[0]]):
            key = frozenset((v, w))
            if opening:
                lab = free.pop(0)
                labels[key] = lab
                out.append(_bond_token(mol, v, w, o) + (str(lab) if lab < 10 else f"%{lab}"))
            else:
                lab = labels.pop(key)
                free.insert(0, lab)
                free.sort()
                out.append(str(lab) if lab < 10 else f"%{lab}")
        kids = children[v]
        for idx, (w, o) in enumerate(kids):
            last = idx == len(kids) - 1
            if not last:
                out.append("(")
            out.append(_bond_token(mol, v, w, o))
            emit(w)
            if not last:
                out.append(")")

    for k, root in enumerate(roots):
        if k:
            out.append(".")
        emit(root)
    return "".join(out)


def _dfs_tree(root, adj, visited, children, tree_edges) -> None:
    visited[root] = True
    stack = [(root, iter(adj[root]))]
    while stack:
        v, it = stack[-1]
        nxt = next(it, None)
        if nxt is None:
            stack.pop()
            continue
        w, o = nxt
        if not visited[w]:
            visited[w] = True
            children[v].append((w, o))
            tree_edges.add(frozenset((v, w)))
            stack.append((w, iter(adj[w])))


def _preorder(root, children, rank) -> None:
    stack = [root]
    while stack:
        v = stack.pop()
        rank[v] = len(rank)
        stack.extend(w for w, _ in reversed(children[v]))


def generate_corpus(n: int, seed: int = 0) -> list[str]:
    rng = np.random.default_rng(seed)
    return [generate_molecule(rng) for _ in range(n)]


def sample_corpus_path() -> Path:
    return Path(str(resources.files("molmae") / "resources" / "sample_200.smi"))


def load_sample_corpus() -> list[str]:
    from .molgraph import read_smiles_file

    return [s for _, s in read_smiles_file(sample_corpus_path())]


def desk_corpus(n: int = 2000, seed: int = 0) -> list[str]:
    """The bundled sample file topped up with generated molecules to ``n``."""
    base = load_sample_corpus()
    return (base + generate_corpus(max(0, n - len(base)), seed))[:n]


def contains_oxygen(smiles: str) -> int:
    return int(any(a.element == "O" for a in parse_smiles(smiles).atoms))


def write_label_csv(path: str | Path, smiles: Sequence[str], labels: Sequence[Sequence[float | None]],
                    task_names: Sequence[str]) -> None:
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh)
        w.writerow(["smiles", *task_names])
        for s, row in zip(smiles, labels):
            w.writerow([s, *("" if v is None else int(v) for v in row)])
