"""Molecular graphs: a SMILES-subset parser, a writer, and shortest-path tables.

Hydrogens live on atoms as ``implicit_h`` counts; graph nodes are heavy atoms
(a bracket ``[H]`` is kept as a node only when it cannot be folded onto a
single heavy neighbour).
"""
import math
from collections import deque
from dataclasses import dataclass, field
from enum import IntEnum

import numpy as np

from config import SmilesError

ORGANIC_VALENCES = {
    "B": (3,),
    "C": (4,),
    "N": (3, 5),
    "O": (2,),
    "P": (3, 5),
    "S": (2, 4, 6),
    "F": (1,),
    "Cl": (1,),
    "Br": (1,),
    "I": (1,),
}

# Organic subset first, then elements that may only appear in brackets.
SUPPORTED_ELEMENTS = tuple(ORGANIC_VALENCES) + (
    "H", "Li", "Na", "K", "Rb", "Cs", "Be", "Mg", "Ca", "Sr", "Ba",
    "Al", "Ga", "In", "Tl", "Si", "Ge", "Sn", "Pb", "As", "Sb", "Bi",
    "Se", "Te", "Ti", "V", "Cr", "Mn", "Fe", "Co", "Ni", "Cu", "Zn",
    "Zr", "Mo", "Ru", "Rh", "Pd", "Ag", "Cd", "W", "Os", "Ir", "Pt",
    "Au", "Hg", "Ce", "Xe",
)
_ELEMENT_SET = frozenset(SUPPORTED_ELEMENTS)

ORGANIC_AROMATIC = {"b": "B", "c": "C", "n": "N", "o": "O", "p": "P", "s": "S"}
BRACKET_AROMATIC = dict(ORGANIC_AROMATIC, se="Se", te="Te", **{"as": "As"})

MASK_ELEMENT = "[MASK]"
DISCONNECTED = -1
MAX_CHARGE = 15


class BondOrder(IntEnum):
    SINGLE = 1
    DOUBLE = 2
    TRIPLE = 3
    AROMATIC = 4
    MASK = 5

    @property
    def valence(self):
        return _BOND_VALENCE[self]

    @property
    def label(self):
        return self.name.lower()

    @classmethod
    def from_label(cls, label):
        return cls[label.upper()]


_BOND_VALENCE = {
    BondOrder.SINGLE: 1.0,
    BondOrder.DOUBLE: 2.0,
    BondOrder.TRIPLE: 3.0,
    BondOrder.AROMATIC: 1.5,
    BondOrder.MASK: 0.0,
}
_BOND_SYMBOLS = {"-": BondOrder.SINGLE, "=": BondOrder.DOUBLE, "#": BondOrder.TRIPLE, ":": BondOrder.AROMATIC}


@dataclass(frozen=True)
class Atom:
    element: str
    formal_charge: int = 0
    implicit_h: int = 0
    aromatic: bool = False
    map_num: int = None

    def __post_init__(self):
        if self.element not in _ELEMENT_SET and self.element != MASK_ELEMENT:
            raise ValueError(f"unsupported element {self.element!r}")
        if self.implicit_h < 0:
            raise ValueError("implicit_h must be non-negative")

    @property
    def is_mask(self):
        return self.element == MASK_ELEMENT


@dataclass(frozen=True)
class Bond:
    begin: int
    end: int
    order: BondOrder

    def __post_init__(self):
        if self.begin == self.end:
            raise ValueError(f"self-loop on atom {self.begin}")
        if self.begin > self.end:
            begin, end = self.end, self.begin
            object.__setattr__(self, "begin", begin)
            object.__setattr__(self, "end", end)
        object.__setattr__(self, "order", BondOrder(self.order))

    @property
    def endpoints(self):
        return self.begin, self.end

    def other(self, atom):
        return self.end if atom == self.begin else self.begin


@dataclass(frozen=True)
class MolecularGraph:
    atoms: tuple
    bonds: tuple
    adjacency: tuple = field(init=False, repr=False, compare=False)
    _bond_index: dict = field(init=False, repr=False, compare=False)

    def __post_init__(self):
        atoms = tuple(self.atoms)
        bonds = tuple(self.bonds)
        neighbours = [[] for _ in atoms]
        index = {}
        for k, bond in enumerate(bonds):
            if bond.end >= len(atoms):
                raise ValueError(f"bond {k} references atom {bond.end} outside the graph")
            if bond.endpoints in index:
                raise ValueError(f"parallel bond between atoms {bond.begin} and {bond.end}")
            index[bond.endpoints] = k
            neighbours[bond.begin].append(bond.end)
            neighbours[bond.end].append(bond.begin)
        object.__setattr__(self, "atoms", atoms)
        object.__setattr__(self, "bonds", bonds)
        object.__setattr__(self, "adjacency", tuple(tuple(sorted(n)) for n in neighbours))
        object.__setattr__(self, "_bond_index", index)

    def __len__(self):
        return len(self.atoms)

    def bond_index(self, i, j):
        """Index of the bond joining atoms i and j, or None."""
        return self._bond_index.get((min(i, j), max(i, j)))

    def bond_between(self, i, j):
        k = self.bond_index(i, j)
        return None if k is None else self.bonds[k]

    def incident_bonds(self, i):
        return [self.bond_index(i, j) for j in self.adjacency[i]]

    def degree(self, i):
        return len(self.adjacency[i])

    def bond_valence(self, i):
        return sum(self.bonds[k].order.valence for k in self.incident_bonds(i))

    def with_atoms(self, atoms):
        return MolecularGraph(tuple(atoms), self.bonds)


def degrees(g):
    return [len(n) for n in g.adjacency]


def disjoint_union(graphs):
    """Concatenate graphs into one disconnected graph, atoms in input order."""
    atoms, bonds = [], []
    for g in graphs:
        offset = len(atoms)
        atoms.extend(g.atoms)
        bonds.extend(Bond(b.begin + offset, b.end + offset, b.order) for b in g.bonds)
    return MolecularGraph(tuple(atoms), tuple(bonds))


def default_implicit_h(element, aromatic, bond_valence):
    """Valence fill for organic-subset atoms written without brackets.

    Aromatic bonds count 1.5 and the sum is floored. Aromatic atoms fill up to
    their lowest default valence only (so thiophene sulfur carries no H).
    """
    valences = ORGANIC_VALENCES.get(element)
    if valences is None:
        return 0
    total = math.floor(bond_valence + 1e-9)
    if aromatic:
        return max(0, valences[0] - total)
    for valence in valences:
        if valence >= total:
            return valence - total
    return 0


class _SmilesParser:
    def __init__(self, text):
        self.text = text
        self.pos = 0
        self.atoms = []
        self.bracketed = []
        self.bonds = {}
        self.rings = {}
        self.branches = []
        self.prev = None
        self.pending = None

    def fail(self, message, offset=None):
        raise SmilesError(message, self.pos if offset is None else offset)

    def parse(self):
        text = self.text
        while self.pos < len(text):
            ch = text[self.pos]
            if ch == "[":
                self.add_atom(*self.bracket_atom())
            elif ch.isalpha():
                self.add_atom(*self.organic_atom())
            elif ch in _BOND_SYMBOLS or ch in "/\\":
                self.bond_symbol(ch)
            elif ch.isdigit() or ch == "%":
                self.ring_closure()
            elif ch == "(":
                if self.prev is None:
                    self.fail("branch without a preceding atom")
                if self.pending is not None:
                    self.fail("bond symbol before branch", self.pending[1])
                if self.pos + 1 < len(text) and text[self.pos + 1] == ")":
                    self.fail("empty branch")
                self.branches.append((self.prev, self.pos))
                self.pos += 1
            elif ch == ")":
                if not self.branches:
                    self.fail("unmatched ')'")
                if self.pending is not None:
                    self.fail("dangling bond symbol", self.pending[1])
                self.prev = self.branches.pop()[0]
                self.pos += 1
            elif ch == ".":
                if self.prev is None:
                    self.fail("empty fragment")
                if self.branches:
                    self.fail("fragment separator inside a branch")
                if self.pending is not None:
                    self.fail("dangling bond symbol", self.pending[1])
                self.prev = None
                self.pos += 1
            elif ch == "$":
                self.fail("quadruple bonds are not supported")
            else:
                self.fail(f"unexpected character {ch!r}")
        if self.pending is not None:
            self.fail("dangling bond symbol", self.pending[1])
        if self.branches:
            self.fail("unclosed branch", self.branches[-1][1])
        if self.atoms and self.prev is None:
            self.fail("empty fragment", len(text) - 1)
        if self.rings:
            number, (_, _, offset) = next(iter(self.rings.items()))
            self.fail(f"unclosed ring {number}", offset)
        if not self.atoms:
            self.fail("no atoms", 0)
        return self.build()

    def organic_atom(self):
        text, start = self.text, self.pos
        two = text[start:start + 2]
        if two in ("Cl", "Br"):
            self.pos += 2
            return dict(element=two, aromatic=False), False
        ch = text[start]
        if ch in ORGANIC_VALENCES:
            self.pos += 1
            return dict(element=ch, aromatic=False), False
        if ch in ORGANIC_AROMATIC:
            self.pos += 1
            return dict(element=ORGANIC_AROMATIC[ch], aromatic=True), False
        if ch.isupper():
            symbol = two if len(two) == 2 and two[1].islower() else ch
            if symbol in _ELEMENT_SET:
                self.fail(f"element {symbol!r} must be written in brackets")
            self.fail(f"unknown element {symbol!r}")
        self.fail(f"unknown aromatic symbol {ch!r}")

    def bracket_atom(self):
        text, start = self.text, self.pos
        self.pos += 1
        while self.pos < len(text) and text[self.pos].isdigit():
            self.pos += 1  # isotope, discarded
        if self.pos >= len(text):
            self.fail("unclosed bracket atom", start)
        two = text[self.pos:self.pos + 2]
        ch = text[self.pos]
        if two in BRACKET_AROMATIC:
            element, aromatic = BRACKET_AROMATIC[two], True
            self.pos += 2
        elif ch in BRACKET_AROMATIC:
            element, aromatic = BRACKET_AROMATIC[ch], True
            self.pos += 1
        elif ch.isupper():
            if len(two) == 2 and two[1].islower():
                element = two
            else:
                element = ch
            if element not in _ELEMENT_SET:
                self.fail(f"unknown element {element!r}")
            aromatic = False
            self.pos += len(element)
        else:
            self.fail("expected an element symbol")
        while self.pos < len(text) and text[self.pos] == "@":
            self.pos += 1  # chirality, discarded
        hydrogens = 0
        if self.pos < len(text) and text[self.pos] == "H":
            self.pos += 1
            hydrogens = self.read_number(default=1)
        charge = 0
        if self.pos < len(text) and text[self.pos] in "+-":
            sign_offset = self.pos
            sign = text[self.pos]
            self.pos += 1
            if self.pos < len(text) and text[self.pos].isdigit():
                magnitude = self.read_number(default=1)
            else:
                magnitude = 1
                while self.pos < len(text) and text[self.pos] == sign:
                    magnitude += 1
                    self.pos += 1
            if magnitude > MAX_CHARGE or (self.pos < len(text) and text[self.pos] in "+-"):
                self.fail("invalid charge", sign_offset)
            charge = magnitude if sign == "+" else -magnitude
        map_num = None
        if self.pos < len(text) and text[self.pos] == ":":
            self.pos += 1
            if self.pos >= len(text) or not text[self.pos].isdigit():
                self.fail("invalid atom map number")
            map_num = self.read_number(default=None) or None
        if self.pos >= len(text) or text[self.pos] != "]":
            self.fail("unclosed bracket atom", start)
        self.pos += 1
        atom = dict(element=element, aromatic=aromatic, formal_charge=charge,
                    implicit_h=hydrogens, map_num=map_num)
        return atom, True

    def read_number(self, default):
        start = self.pos
        while self.pos < len(self.text) and self.text[self.pos].isdigit():
            self.pos += 1
        return int(self.text[start:self.pos]) if self.pos > start else default

    def bond_symbol(self, ch):
        if self.prev is None:
            self.fail("bond without a preceding atom")
        if self.pending is not None:
            self.fail("consecutive bond symbols")
        # '/' and '\' carry only stereo information; they stand for a plain single bond.
        order = _BOND_SYMBOLS.get(ch, BondOrder.SINGLE)
        self.pending = (order, self.pos)
        self.pos += 1

    def ring_closure(self):
        start = self.pos
        if self.text[self.pos] == "%":
            digits = self.text[self.pos + 1:self.pos + 3]
            if len(digits) != 2 or not digits.isdigit():
                self.fail("ring number after '%' needs two digits")
            number = int(digits)
            self.pos += 3
        else:
            number = int(self.text[self.pos])
            self.pos += 1
        if self.prev is None:
            self.fail("ring closure without a preceding atom", start)
        order = self.pending[0] if self.pending else None
        self.pending = None
        if number in self.rings:
            other, opened_order, _ = self.rings.pop(number)
            if order is not None and opened_order is not None and order != opened_order:
                self.fail(f"conflicting bond orders on ring {number}", start)
            self.add_bond(other, self.prev, order or opened_order, start)
        else:
            self.rings[number] = (self.prev, order, start)

    def add_atom(self, atom, bracketed):
        index = len(self.atoms)
        self.atoms.append(atom)
        self.bracketed.append(bracketed)
        if self.prev is not None:
            order, offset = self.pending if self.pending else (None, self.pos)
            self.add_bond(self.prev, index, order, offset)
        self.pending = None
        self.prev = index

    def add_bond(self, i, j, order, offset):
        if i == j:
            self.fail("ring closure bonds an atom to itself", offset)
        key = (min(i, j), max(i, j))
        if key in self.bonds:
            self.fail(f"duplicate bond between atoms {i} and {j}", offset)
        if order is None:
            both_aromatic = self.atoms[i]["aromatic"] and self.atoms[j]["aromatic"]
            order = BondOrder.AROMATIC if both_aromatic else BondOrder.SINGLE
        self.bonds[key] = order

    def build(self):
        valence = [0.0] * len(self.atoms)
        for (i, j), order in self.bonds.items():
            valence[i] += order.valence
            valence[j] += order.valence
        for k, atom in enumerate(self.atoms):
            if not self.bracketed[k]:
                atom["implicit_h"] = default_implicit_h(atom["element"], atom["aromatic"], valence[k])
        neighbours = [[] for _ in self.atoms]
        for (i, j), order in self.bonds.items():
            neighbours[i].append((j, order))
            neighbours[j].append((i, order))
        folded = set()
        for k, atom in enumerate(self.atoms):
            if atom["element"] != "H" or atom.get("formal_charge") or atom.get("map_num"):
                continue
            if len(neighbours[k]) != 1 or atom.get("implicit_h"):
                continue
            other, order = neighbours[k][0]
            if order != BondOrder.SINGLE or self.atoms[other]["element"] == "H" or other in folded:
                continue
            folded.add(k)
            self.atoms[other]["implicit_h"] = self.atoms[other].get("implicit_h", 0) + 1
        remap = {}
        atoms = []
        for k, atom in enumerate(self.atoms):
            if k in folded:
                continue
            remap[k] = len(atoms)
            atoms.append(Atom(**atom))
        bonds = [Bond(remap[i], remap[j], order) for (i, j), order in self.bonds.items()
                 if i in remap and j in remap]
        return MolecularGraph(tuple(atoms), tuple(bonds))


def parse_smiles(text):
    """Parse one SMILES string into a MolecularGraph.

    Atoms keep first-occurrence order; '.'-separated fragments give a
    disconnected graph. Raises SmilesError with the character offset.
    """
    if not text or not text.strip():
        raise SmilesError("empty SMILES", 0)
    return _SmilesParser(text.strip()).parse()


def _atom_text(g, i):
    atom = g.atoms[i]
    if atom.is_mask:
        raise ValueError("masked graphs cannot be written as SMILES")
    symbol = atom.element.lower() if atom.aromatic else atom.element
    bare = (
        atom.element in ORGANIC_VALENCES
        and atom.formal_charge == 0
        and atom.map_num is None
        and (not atom.aromatic or symbol in ORGANIC_AROMATIC)
        and default_implicit_h(atom.element, atom.aromatic, g.bond_valence(i)) == atom.implicit_h
    )
    if bare:
        return symbol
    text = "[" + symbol
    if atom.implicit_h:
        text += "H" + (str(atom.implicit_h) if atom.implicit_h > 1 else "")
    if atom.formal_charge:
        sign = "+" if atom.formal_charge > 0 else "-"
        text += sign + (str(abs(atom.formal_charge)) if abs(atom.formal_charge) > 1 else "")
    if atom.map_num is not None:
        text += f":{atom.map_num}"
    return text + "]"


def _bond_text(g, i, j):
    order = g.bond_between(i, j).order
    both_aromatic = g.atoms[i].aromatic and g.atoms[j].aromatic
    if order == BondOrder.SINGLE:
        return "-" if both_aromatic else ""
    if order == BondOrder.AROMATIC:
        return "" if both_aromatic else ":"
    if order == BondOrder.DOUBLE:
        return "="
    if order == BondOrder.TRIPLE:
        return "#"
    raise ValueError("masked graphs cannot be written as SMILES")


def serialize_smiles(g):
    """Write g as SMILES (depth-first, lowest index first; not canonical)."""
    n = len(g.atoms)
    position = [-1] * n
    children = [[] for _ in range(n)]
    ring_bonds = [[] for _ in range(n)]
    roots = []
    counter = 0
    for root in range(n):
        if position[root] >= 0:
            continue
        roots.append(root)
        position[root] = counter
        counter += 1
        parent = {root: None}
        stack = [(root, iter(g.adjacency[root]))]
        while stack:
            v, neighbours = stack[-1]
            for u in neighbours:
                if u == parent[v]:
                    continue
                if position[u] < 0:
                    position[u] = counter
                    counter += 1
                    parent[u] = v
                    children[v].append(u)
                    stack.append((u, iter(g.adjacency[u])))
                    break
                if position[u] < position[v]:
                    ring_bonds[u].append(v)
                    ring_bonds[v].append(u)
            else:
                stack.pop()

    pieces = []
    free_numbers = []
    open_rings = {}
    next_number = 1

    def ring_label(number):
        return str(number) if number < 10 else f"%{number:02d}"

    def write_atom(v):
        nonlocal next_number
        pieces.append(_atom_text(g, v))
        others = sorted(ring_bonds[v], key=lambda u: position[u])
        for u in others:
            key = (min(u, v), max(u, v))
            if key in open_rings:
                number = open_rings.pop(key)
                pieces.append(_bond_text(g, u, v) + ring_label(number))
                free_numbers.append(number)
        for u in others:
            if position[u] > position[v]:
                if free_numbers:
                    free_numbers.sort()
                    number = free_numbers.pop(0)
                else:
                    number = next_number
                    next_number += 1
                open_rings[(min(u, v), max(u, v))] = number
                pieces.append(ring_label(number))

    for index, root in enumerate(roots):
        if index:
            pieces.append(".")
        stack = [("atom", root, None)]
        while stack:
            item = stack.pop()
            if item[0] == "text":
                pieces.append(item[1])
                continue
            _, v, parent = item
            if parent is not None:
                pieces.append(_bond_text(g, parent, v))
            write_atom(v)
            kids = children[v]
            if kids:
                stack.append(("atom", kids[-1], v))
            # all children but the last are written as parenthesised branches
            for kid in reversed(kids[:-1]):
                stack.append(("text", ")"))
                stack.append(("atom", kid, v))
                stack.append(("text", "("))
    return "".join(pieces)


@dataclass(frozen=True, eq=False)
class ShortestPaths:
    """All-pairs BFS distances plus a predecessor table for path reconstruction."""

    distance: np.ndarray
    predecessor: np.ndarray
    graph: MolecularGraph

    def path(self, i, j):
        """Atom pairs along the reconstructed i→j shortest path ([] if i == j or disconnected)."""
        if i == j or self.distance[i, j] == DISCONNECTED:
            return []
        steps = []
        node = j
        while node != i:
            prev = int(self.predecessor[i, node])
            steps.append((prev, node))
            node = prev
        steps.reverse()
        return steps

    def bond_path(self, i, j):
        return [self.graph.bond_index(u, v) for u, v in self.path(i, j)]


def all_pairs_shortest_paths(g):
    """BFS from every atom; neighbours are expanded lowest index first."""
    n = len(g.atoms)
    distance = np.full((n, n), DISCONNECTED, dtype=np.int64)
    predecessor = np.full((n, n), -1, dtype=np.int64)
    for source in range(n):
        distance[source, source] = 0
        queue = deque([source])
        while queue:
            v = queue.popleft()
            for u in g.adjacency[v]:
                if distance[source, u] == DISCONNECTED:
                    distance[source, u] = distance[source, v] + 1
                    predecessor[source, u] = v
                    queue.append(u)
    return ShortestPaths(distance, predecessor, g)
