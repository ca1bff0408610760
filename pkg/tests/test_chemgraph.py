import networkx as nx
import numpy as np
import pytest
from networkx.algorithms.isomorphism import categorical_edge_match, categorical_node_match

from chemgraph import (
    DISCONNECTED,
    Atom,
    Bond,
    BondOrder,
    MolecularGraph,
    all_pairs_shortest_paths,
    default_implicit_h,
    disjoint_union,
    parse_smiles,
    serialize_smiles,
)
from config import SmilesError

FIXTURE_SMILES = [
    "C", "CC", "CCO", "CC(=O)O", "C#N", "C=CC=C", "CC(C)(C)C", "c1ccccc1", "c1ccc2ccccc2c1",
    "c1cc[nH]c1", "c1ccsc1", "c1ccoc1", "O=C1CCCCC1", "CN(C)C=O", "[NH4+]", "[O-]C(=O)C",
    "CC[N+](C)(C)C", "ClC(Cl)Cl", "BrCCBr", "FC(F)(F)c1ccccc1", "OCC(O)CO", "C1CC1", "C1CCC2CCCCC2C1",
    "CC(=O)Oc1ccccc1C(=O)O", "[Na+].[Cl-]", "CCOC(=O)C.O", "N#CC#N", "O=S(=O)(O)O", "P(Cl)(Cl)Cl",
    "B(O)(O)c1ccccc1", "CC[C@H](N)C(=O)O", "F/C=C/F", "C%10CC%10", "[13CH4]", "[CH3:4][OH:7]",
    "c1ccc(cc1)-c1ccccc1", "[Fe+2]", "OS(=O)(=O)c1ccc(C)cc1", "C1=CC=CC=C1", "[se]1cccc1",
    "CN1C=NC2=C1C(=O)N(C(=O)N2C)C", "O=C(O)CC(O)(CC(=O)O)C(=O)O", "I[I]", "[H][H]", "CCC#CCC",
]


def to_networkx(g):
    graph = nx.Graph()
    for k, a in enumerate(g.atoms):
        graph.add_node(k, element=a.element, charge=a.formal_charge, h=a.implicit_h,
                       aromatic=a.aromatic, map_num=a.map_num)
    for b in g.bonds:
        graph.add_edge(b.begin, b.end, order=int(b.order))
    return graph


NODE_MATCH = categorical_node_match(["element", "charge", "h", "aromatic", "map_num"], [None] * 5)
EDGE_MATCH = categorical_edge_match("order", None)


def isomorphic(g1, g2):
    return nx.is_isomorphic(to_networkx(g1), to_networkx(g2), node_match=NODE_MATCH, edge_match=EDGE_MATCH)


def random_graph(rng, max_atoms=15):
    elements = ["C", "C", "C", "N", "O", "S", "P", "B", "F", "Cl", "Br", "I"]
    aromatic_ok = {"B", "C", "N", "O", "P", "S"}
    n = int(rng.integers(1, max_atoms + 1))
    atoms = []
    for _ in range(n):
        element = elements[int(rng.integers(len(elements)))]
        atoms.append(Atom(
            element,
            formal_charge=int(rng.choice([0, 0, 0, 1, -1, 2])),
            implicit_h=int(rng.integers(0, 4)),
            aromatic=bool(element in aromatic_ok and rng.random() < 0.3),
            map_num=None if rng.random() < 0.6 else int(rng.integers(1, 200)),
        ))
    orders = [BondOrder.SINGLE, BondOrder.DOUBLE, BondOrder.TRIPLE, BondOrder.AROMATIC]
    edges = {}
    for k in range(1, n):
        if rng.random() < 0.9:  # occasionally start a new fragment
            edges[(int(rng.integers(k)), k)] = orders[int(rng.integers(4))]
    for _ in range(int(rng.integers(0, n))):
        i, j = sorted(int(x) for x in rng.choice(n, size=2, replace=True))
        if i != j and (i, j) not in edges:
            edges[(i, j)] = orders[int(rng.integers(4))]
    return MolecularGraph(tuple(atoms), tuple(Bond(i, j, o) for (i, j), o in edges.items()))


def test_parse_ethanol():
    g = parse_smiles("CCO")
    assert [a.element for a in g.atoms] == ["C", "C", "O"]
    assert [a.implicit_h for a in g.atoms] == [3, 2, 1]
    assert [(b.begin, b.end, b.order) for b in g.bonds] == [(0, 1, BondOrder.SINGLE), (1, 2, BondOrder.SINGLE)]


def test_parse_aromatic_rings():
    benzene = parse_smiles("c1ccccc1")
    assert all(a.aromatic and a.implicit_h == 1 for a in benzene.atoms)
    assert len(benzene.bonds) == 6
    assert all(b.order == BondOrder.AROMATIC for b in benzene.bonds)
    pyrrole = parse_smiles("c1cc[nH]c1")
    assert pyrrole.atoms[3].element == "N" and pyrrole.atoms[3].implicit_h == 1
    thiophene = parse_smiles("c1ccsc1")
    assert thiophene.atoms[3].element == "S" and thiophene.atoms[3].implicit_h == 0


def test_parse_bracket_atoms():
    ammonium = parse_smiles("[NH4+]")
    assert ammonium.atoms[0].formal_charge == 1 and ammonium.atoms[0].implicit_h == 4
    mapped = parse_smiles("[CH3:7]Br")
    assert mapped.atoms[0].map_num == 7 and mapped.atoms[1].map_num is None
    assert parse_smiles("[CH4:0]").atoms[0].map_num is None
    assert parse_smiles("[Fe+++]").atoms[0].formal_charge == 3
    assert parse_smiles("[O-2]").atoms[0].formal_charge == -2


def test_explicit_hydrogens_fold_into_neighbour():
    methane = parse_smiles("[H]C([H])([H])[H]")
    assert len(methane.atoms) == 1
    assert methane.atoms[0].implicit_h == 4
    hydrogen = parse_smiles("[H][H]")
    assert [a.element for a in hydrogen.atoms] == ["H", "H"]
    assert len(hydrogen.bonds) == 1


def test_default_implicit_h():
    assert default_implicit_h("C", False, 0) == 4
    assert default_implicit_h("N", False, 4) == 1
    assert default_implicit_h("S", False, 3) == 1
    assert default_implicit_h("C", True, 3.0) == 1
    assert default_implicit_h("Cl", False, 2) == 0
    assert default_implicit_h("Fe", False, 0) == 0


@pytest.mark.parametrize(
    "text, offset",
    [
        ("", 0),
        ("C1CC", 1),
        ("C(C", 1),
        ("CC)", 2),
        ("[Xx]", 1),
        ("C==C", 2),
        ("C%1C", 1),
        ("CC$C", 2),
        ("Xe", 0),
        ("C1C1", 3),
        ("C..C", 2),
        (".C", 0),
        ("C.", 1),
    ],
)
def test_parse_errors_report_offset(text, offset):
    with pytest.raises(SmilesError) as info:
        parse_smiles(text)
    assert info.value.offset == offset
    assert str(info.value).endswith(f"at offset {offset}")


def test_disjoint_union_offsets_bonds():
    union = disjoint_union([parse_smiles("CC"), parse_smiles("O=C=O")])
    assert len(union.atoms) == 5
    assert {(b.begin, b.end) for b in union.bonds} == {(0, 1), (2, 3), (3, 4)}


def test_graph_rejects_parallel_bonds():
    atoms = (Atom("C"), Atom("C"))
    with pytest.raises(ValueError):
        MolecularGraph(atoms, (Bond(0, 1, BondOrder.SINGLE), Bond(1, 0, BondOrder.DOUBLE)))


def test_serialize_simple_molecules():
    assert serialize_smiles(parse_smiles("CCO")) == "CCO"
    assert serialize_smiles(parse_smiles("CC(=O)O")) == "CC(=O)O"
    assert serialize_smiles(parse_smiles("c1ccccc1")) == "c1ccccc1"
    assert serialize_smiles(parse_smiles("[Na+].[Cl-]")) == "[Na+].[Cl-]"


@pytest.mark.parametrize("smiles", FIXTURE_SMILES)
def test_fixture_round_trip(smiles):
    g = parse_smiles(smiles)
    again = parse_smiles(serialize_smiles(g))
    assert isomorphic(g, again)


def test_random_graph_round_trip():
    rng = np.random.default_rng(7)
    failures = []
    for _ in range(500):
        g = random_graph(rng)
        text = serialize_smiles(g)
        if not isomorphic(g, parse_smiles(text)):
            failures.append(text)
    assert failures == []


def test_round_trip_with_many_open_rings():
    atoms = tuple(Atom("C") for _ in range(8))
    bonds = tuple(Bond(i, j, BondOrder.SINGLE) for i in range(8) for j in range(i + 1, 8))
    g = MolecularGraph(atoms, bonds)
    text = serialize_smiles(g)
    assert "%" in text
    assert isomorphic(g, parse_smiles(text))


def test_shortest_paths_match_floyd_warshall():
    rng = np.random.default_rng(11)
    for _ in range(200):
        g = random_graph(rng)
        paths = all_pairs_shortest_paths(g)
        graph = to_networkx(g)
        oracle = nx.floyd_warshall_numpy(graph, nodelist=list(range(len(g.atoms))))
        expected = np.where(np.isinf(oracle), DISCONNECTED, oracle).astype(np.int64)
        assert np.array_equal(paths.distance, expected)


def test_reconstructed_paths_follow_bonds():
    g = parse_smiles("CC(C)c1ccccc1.O")
    paths = all_pairs_shortest_paths(g)
    n = len(g.atoms)
    for i in range(n):
        for j in range(n):
            steps = paths.path(i, j)
            if i == j or paths.distance[i, j] == DISCONNECTED:
                assert steps == []
                continue
            assert len(steps) == paths.distance[i, j]
            assert steps[0][0] == i and steps[-1][1] == j
            assert all(g.bond_between(u, v) is not None for u, v in steps)
    assert paths.distance[0, n - 1] == DISCONNECTED
