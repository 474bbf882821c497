"""Molecule parsing, featurization and node/dual graph construction.

The SMILES dialect is deliberately small: organic-subset atoms, bracket atoms
with charge and hydrogen count, branches, ring closures and explicit bond
symbols. Stereo markers are accepted and dropped.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterator

import numpy as np

ELEMENTS = ("B", "C", "N", "O", "P", "S", "F", "Cl", "Br", "I")
AROMATIC = {"b": "B", "c": "C", "n": "N", "o": "O", "p": "P", "s": "S"}
BOND_ORDERS = ("single", "double", "triple", "aromatic")
_BOND_SYMBOLS = {"-": "single", "=": "double", "#": "triple", ":": "aromatic"}

MAX_DEGREE = 5
CHARGES = (-2, -1, 0, 1, 2)
MAX_HS = 4

# (name, start, stop, kind) column groups of the atom feature vector
NODE_GROUPS = (
    ("element", 0, 10, "categorical"),
    ("degree", 10, 16, "categorical"),
    ("charge", 16, 21, "categorical"),
    ("aromatic", 21, 22, "binary"),
    ("num_hs", 22, 27, "categorical"),
)
EDGE_GROUPS = (
    ("bond_order", 0, 4, "categorical"),
    ("in_ring", 4, 5, "binary"),
)
F_NODE = 27
F_EDGE = 5
F_DUAL = F_EDGE + F_NODE
N_DESCRIPTORS = 24


class SmilesError(ValueError):
    """Base class for parse failures; ``offset`` is the byte offset of the problem."""

    def __init__(self, message: str, offset: int):
        super().__init__(f"{message} at offset {offset}")
        self.offset = offset


class EmptyInput(SmilesError):
    pass


class UnbalancedParenthesis(SmilesError):
    pass


class UnclosedRingBond(SmilesError):
    pass


class UnknownElement(SmilesError):
    pass


class DegreeOverflow(ValueError):
    pass


@dataclass(frozen=True)
class Atom:
    element: str
    aromatic: bool = False
    charge: int = 0
    num_hs: int = 0


@dataclass(frozen=True)
class Bond:
    a1: int
    a2: int
    order: str
    in_ring: bool = False


@dataclass(frozen=True)
class Molecule:
    atoms: tuple[Atom, ...]
    bonds: tuple[Bond, ...]
    source_text: str = ""

    @property
    def n_atoms(self) -> int:
        return len(self.atoms)

    @property
    def n_bonds(self) -> int:
        return len(self.bonds)

    def degrees(self) -> list[int]:
        deg = [0] * self.n_atoms
        for b in self.bonds:
            deg[b.a1] += 1
            deg[b.a2] += 1
        return deg


@dataclass
class NodeGraph:
    """Atoms as nodes; every bond contributes two directed edges.

    Directed edge ``2*b`` runs ``a1 -> a2`` of bond ``b`` and ``2*b + 1`` the
    reverse. ``neighbors[v]`` lists ``(u, edge_id)`` for edges ``u -> v``.
    """

    n_nodes: int
    node_features: np.ndarray
    directed_edges: np.ndarray  # (E, 2) int rows (head u, tail v)
    edge_features: np.ndarray
    neighbors: list[list[tuple[int, int]]] = field(repr=False)

    @property
    def n_edges(self) -> int:
        return len(self.directed_edges)


@dataclass
class DualGraph:
    """Directed line graph: one node per directed edge of a NodeGraph.

    ``dual_edges`` rows are ``(source, target)`` dual-node ids where source is
    ``u -> v`` and target is ``v -> w`` with ``u != w``. ``heads``/``tails``
    give the atoms ``u``/``v`` of each dual node; a dual edge carries the
    features of the atom the two directed edges share.
    """

    n_dual_nodes: int
    dual_node_features: np.ndarray
    dual_edges: np.ndarray
    dual_edge_features: np.ndarray
    heads: np.ndarray
    tails: np.ndarray

    @property
    def n_dual_edges(self) -> int:
        return len(self.dual_edges)

    def in_neighbors(self, i: int) -> list[int]:
        return [int(s) for s, t in self.dual_edges if t == i]


# ---------------------------------------------------------------------------
# parsing


def _read_atom_symbol(text: str, i: int) -> tuple[str, bool, int]:
    """Organic-subset symbol starting at ``i``: (element, aromatic, next index)."""
    two = text[i : i + 2]
    if two in ("Cl", "Br"):
        return two, False, i + 2
    ch = text[i]
    if ch in AROMATIC:
        return AROMATIC[ch], True, i + 1
    if ch in ELEMENTS:
        return ch, False, i + 1
    raise UnknownElement(f"unknown element {ch!r}", i)


def _parse_bracket(text: str, start: int) -> tuple[Atom, int]:
    end = text.find("]", start)
    if end < 0:
        raise UnknownElement("unterminated bracket atom", start)
    body = text[start + 1 : end]
    j = 0
    while j < len(body) and body[j].isdigit():  # isotope, ignored
        j += 1
    if j >= len(body):
        raise UnknownElement("empty bracket atom", start)
    sym = body[j : j + 2] if body[j : j + 2] in ELEMENTS else body[j]
    if sym in AROMATIC:
        element, aromatic = AROMATIC[sym], True
    elif sym in ELEMENTS:
        element, aromatic = sym, False
    else:
        raise UnknownElement(f"unknown element in [{body}]", start + 1 + j)
    j += len(sym)
    while j < len(body) and body[j] == "@":
        j += 1
    num_hs = 0
    if j < len(body) and body[j] == "H":
        j += 1
        num_hs = 1
        k = j
        while j < len(body) and body[j].isdigit():
            j += 1
        if j > k:
            num_hs = int(body[k:j])
    charge = 0
    if j < len(body) and body[j] in "+-":
        sign = 1 if body[j] == "+" else -1
        k = j
        while j < len(body) and body[j] == body[k]:
            j += 1
        if j - k > 1:
            charge = sign * (j - k)
        else:
            d0 = j
            while j < len(body) and body[j].isdigit():
                j += 1
            charge = sign * (int(body[d0:j]) if j > d0 else 1)
    if j < len(body) and body[j] == ":":  # atom class, ignored
        j = len(body)
    if j != len(body):
        raise UnknownElement(f"unsupported bracket atom [{body}]", start)
    return Atom(element, aromatic, charge, num_hs), end + 1


def parse_smiles(text: str) -> Molecule:
    """Parse one SMILES string into a :class:`Molecule`.

    Atom indices follow first appearance. A ring-closure bond is attached
    when its closing digit is read. Two aromatic atoms joined without a bond
    symbol get an aromatic bond, everything else defaults to single.
    """
    if not text or not text.strip():
        raise EmptyInput("empty SMILES", 0)
    text = text.strip()
    atoms: list[Atom] = []
    bonds: list[tuple[int, int, str]] = []
    bonded: set[frozenset[int]] = set()
    branch_stack: list[tuple[int, int]] = []
    rings: dict[int, tuple[int, str | None, int]] = {}
    prev: int | None = None
    pending_bond: str | None = None

    def implied(a: int, b: int, explicit: str | None) -> str:
        if explicit is not None:
            return explicit
        if atoms[a].aromatic and atoms[b].aromatic:
            return "aromatic"
        return "single"

    def add_bond(a: int, b: int, order: str, offset: int) -> None:
        key = frozenset((a, b))
        if a == b or key in bonded:
            raise SmilesError("self or duplicate bond", offset)
        bonded.add(key)
        bonds.append((a, b, order))

    i = 0
    n = len(text)
    while i < n:
        ch = text[i]
        if ch in " \t\r\n":
            break
        if ch == "(":
            if prev is None:
                raise UnbalancedParenthesis("branch before any atom", i)
            branch_stack.append((prev, i))
            i += 1
        elif ch == ")":
            if not branch_stack:
                raise UnbalancedParenthesis("unmatched ')'", i)
            prev = branch_stack.pop()[0]
            i += 1
        elif ch in _BOND_SYMBOLS:
            pending_bond = _BOND_SYMBOLS[ch]
            i += 1
        elif ch in "/\\":
            i += 1
        elif ch == ".":
            prev, pending_bond = None, None
            i += 1
        elif ch.isdigit() or ch == "%":
            if ch == "%":
                digits = text[i + 1 : i + 3]
                if len(digits) != 2 or not digits.isdigit():
                    raise UnclosedRingBond("malformed %nn ring label", i)
                label, width = int(digits), 3
            else:
                label, width = int(ch), 1
            if prev is None:
                raise UnclosedRingBond("ring label before any atom", i)
            if label in rings:
                opener, open_bond, _ = rings.pop(label)
                order = implied(opener, prev, pending_bond or open_bond)
                add_bond(opener, prev, order, i)
            else:
                rings[label] = (prev, pending_bond, i)
            pending_bond = None
            i += width
        else:
            if ch == "[":
                atom, i_next = _parse_bracket(text, i)
            else:
                element, aromatic, i_next = _read_atom_symbol(text, i)
                atom = Atom(element, aromatic)
            atoms.append(atom)
            idx = len(atoms) - 1
            if prev is not None:
                add_bond(prev, idx, implied(prev, idx, pending_bond), i)
            pending_bond = None
            prev = idx
            i = i_next
    if branch_stack:
        raise UnbalancedParenthesis("unclosed '('", branch_stack[-1][1])
    if rings:
        offset = min(v[2] for v in rings.values())
        raise UnclosedRingBond("ring bond never closed", offset)
    if not atoms:
        raise EmptyInput("no atoms", 0)

    in_ring = _ring_bonds(len(atoms), [(a, b) for a, b, _ in bonds])
    return Molecule(
        atoms=tuple(atoms),
        bonds=tuple(Bond(a, b, o, r) for (a, b, o), r in zip(bonds, in_ring)),
        source_text=text.strip(),
    )


def _ring_bonds(n_atoms: int, pairs: list[tuple[int, int]]) -> list[bool]:
    """A bond is in a ring iff it is not a bridge of the molecular graph."""
    adj: list[list[tuple[int, int]]] = [[] for _ in range(n_atoms)]
    for b, (x, y) in enumerate(pairs):
        adj[x].append((y, b))
        adj[y].append((x, b))
    disc = [-1] * n_atoms
    low = [0] * n_atoms
    bridge = [False] * len(pairs)
    t = 0
    for root in range(n_atoms):
        if disc[root] >= 0:
            continue
        disc[root] = low[root] = t
        t += 1
        stack = [(root, -1, iter(adj[root]))]
        while stack:
            v, via, it = stack[-1]
            nxt = next(it, None)
            if nxt is None:
                stack.pop()
                if stack:
                    p = stack[-1][0]
                    low[p] = min(low[p], low[v])
                    if low[v] > disc[p]:
                        bridge[via] = True
                continue
            w, b = nxt
            if b == via:
                continue
            if disc[w] < 0:
                disc[w] = low[w] = t
                t += 1
                stack.append((w, b, iter(adj[w])))
            else:
                low[v] = min(low[v], disc[w])
    return [not x for x in bridge]


def read_smiles_file(path: str | Path) -> Iterator[tuple[int, str]]:
    """Yield ``(line_number, smiles)`` for non-blank, non-comment lines."""
    with open(path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, start=1):
            s = line.strip()
            if not s or s.startswith("#"):
                continue
            yield lineno, s.split()[0]


# ---------------------------------------------------------------------------
# features and graphs


def featurize(mol: Molecule) -> tuple[np.ndarray, np.ndarray]:
    """One-hot atom features (n_atoms x 27) and bond features (n_bonds x 5)."""
    deg = mol.degrees()
    x = np.zeros((mol.n_atoms, F_NODE))
    for i, atom in enumerate(mol.atoms):
        if deg[i] > MAX_DEGREE:
            raise DegreeOverflow(f"atom {i} has degree {deg[i]} > {MAX_DEGREE}")
        x[i, ELEMENTS.index(atom.element)] = 1.0
        x[i, 10 + deg[i]] = 1.0
        x[i, 16 + CHARGES.index(max(-2, min(2, atom.charge)))] = 1.0
        x[i, 21] = float(atom.aromatic)
        x[i, 22 + min(atom.num_hs, MAX_HS)] = 1.0
    e = np.zeros((mol.n_bonds, F_EDGE))
    for b, bond in enumerate(mol.bonds):
        e[b, BOND_ORDERS.index(bond.order)] = 1.0
        e[b, 4] = float(bond.in_ring)
    return x, e


def build_node_graph(mol: Molecule) -> NodeGraph:
    x, e = featurize(mol)
    edges = np.empty((2 * mol.n_bonds, 2), dtype=np.int64)
    for b, bond in enumerate(mol.bonds):
        edges[2 * b] = (bond.a1, bond.a2)
        edges[2 * b + 1] = (bond.a2, bond.a1)
    neighbors: list[list[tuple[int, int]]] = [[] for _ in range(mol.n_atoms)]
    for eid, (u, v) in enumerate(edges):
        neighbors[int(v)].append((int(u), eid))
    return NodeGraph(
        n_nodes=mol.n_atoms,
        node_features=x,
        directed_edges=edges,
        edge_features=np.repeat(e, 2, axis=0),
        neighbors=neighbors,
    )


def build_dual_graph(g: NodeGraph) -> DualGraph:
    """Directed line graph of ``g`` with head-atom feature augmentation."""
    n_dual = g.n_edges
    heads = g.directed_edges[:, 0].copy() if n_dual else np.zeros(0, dtype=np.int64)
    tails = g.directed_edges[:, 1].copy() if n_dual else np.zeros(0, dtype=np.int64)
    pairs = []
    for target, (v, w) in enumerate(g.directed_edges):
        for u, source in g.neighbors[int(v)]:
            if u != w:
                pairs.append((source, target))
    dual_edges = np.array(pairs, dtype=np.int64).reshape(-1, 2)
    shared = tails[dual_edges[:, 0]] if len(pairs) else np.zeros(0, dtype=np.int64)
    feats = np.concatenate([g.edge_features, g.node_features[heads]], axis=1)
    return DualGraph(
        n_dual_nodes=n_dual,
        dual_node_features=feats.reshape(n_dual, F_DUAL),
        dual_edges=dual_edges,
        dual_edge_features=g.node_features[shared].reshape(len(pairs), F_NODE),
        heads=heads,
        tails=tails,
    )


def count_rings(mol: Molecule) -> int:
    """Cyclomatic number: bonds - atoms + connected components."""
    parent = list(range(mol.n_atoms))

    def find(a: int) -> int:
        while parent[a] != a:
            parent[a] = parent[parent[a]]
            a = parent[a]
        return a

    for b in mol.bonds:
        parent[find(b.a1)] = find(b.a2)
    components = len({find(a) for a in range(mol.n_atoms)})
    return mol.n_bonds - mol.n_atoms + components


def compute_descriptors(mol: Molecule) -> np.ndarray:
    """Fixed 24-slot molecule-level descriptor vector.

    Slots: element counts (10), bond-order counts (4), ring count, aromatic
    atom fraction, heavy-atom count, mean degree, then 6 reserved zeros.
    """
    out = np.zeros(N_DESCRIPTORS)
    for atom in mol.atoms:
        out[ELEMENTS.index(atom.element)] += 1
    for bond in mol.bonds:
        out[10 + BOND_ORDERS.index(bond.order)] += 1
    n = mol.n_atoms
    out[14] = count_rings(mol)
    out[15] = sum(a.aromatic for a in mol.atoms) / n
    out[16] = n
    out[17] = 2.0 * mol.n_bonds / n
    return out


def dump_dual(smiles: str) -> str:
    """Human-readable listing of the dual graph of ``smiles``."""
    mol = parse_smiles(smiles)
    g = build_node_graph(mol)
    dg = build_dual_graph(g)
    lines = [
        f"smiles\t{mol.source_text}",
        f"atoms\t{mol.n_atoms}",
        f"bonds\t{mol.n_bonds}",
        f"dual_nodes\t{dg.n_dual_nodes}",
        f"dual_edges\t{dg.n_dual_edges}",
    ]
    for i in range(dg.n_dual_nodes):
        u, v = int(dg.heads[i]), int(dg.tails[i])
        ins = ",".join(str(s) for s in dg.in_neighbors(i)) or "-"
        feats = "".join(str(int(f)) for f in dg.dual_node_features[i])
        lines.append(f"node\t{i}\t{u}->{v}\tin={ins}\tx={feats}")
    for s, t in dg.dual_edges:
        lines.append(f"edge\t{int(s)}->{int(t)}\tvia_atom={int(dg.tails[s])}")
    return "\n".join(lines)
