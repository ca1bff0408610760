import json

import pytest

from centre_vocab import (
    UNK_INDEX,
    UNK_TOKEN,
    CentreToken,
    Vocabulary,
    build_vocab,
    count_tokens,
    parallel_count,
    token_distribution,
    token_of_atom,
    top_k_coverage,
    write_distribution,
)
from chemgraph import BondOrder, parse_smiles
from config import DatasetError, VocabMismatchError

from conftest import FINKELSTEIN, HYDROGENATION, desk_reactions


def test_token_names():
    acetic = parse_smiles("CC(=O)O")
    assert token_of_atom(acetic, 1).name == "C[-,-,=]"
    assert token_of_atom(acetic, 2).name == "O[=]"
    assert UNK_TOKEN.name == "<unk>[]"


def test_aromatic_atoms_keep_element_symbol():
    token = token_of_atom(parse_smiles("c1ccccc1"), 0)
    assert token == CentreToken("C", (BondOrder.AROMATIC, BondOrder.AROMATIC))


def test_charge_only_counts_when_requested():
    acetate = parse_smiles("CC(=O)[O-]")
    assert token_of_atom(acetate, 3) == CentreToken("O", (BondOrder.SINGLE,))
    charged = token_of_atom(acetate, 3, include_charge=True)
    assert charged.formal_charge == -1
    assert charged.name == "O-1[-]"


def test_build_vocab_orders_by_count_then_token():
    vocab = build_vocab([parse_smiles("CC"), parse_smiles("CO")])
    assert [t.name for t in vocab.tokens] == ["<unk>[]", "C[-]", "O[-]"]
    assert vocab.counts == [0, 3, 1]
    tied = build_vocab([parse_smiles("OC")])
    assert [t.name for t in tied.tokens[1:]] == ["C[-]", "O[-]"]


def test_index_of_unknown_token_is_unk():
    vocab = build_vocab([parse_smiles("CC")])
    assert vocab.index_of(CentreToken("C", (BondOrder.SINGLE,))) == 1
    assert vocab.index_of(CentreToken("N", (BondOrder.TRIPLE,))) == UNK_INDEX
    assert vocab.index_of(UNK_TOKEN) == UNK_INDEX


def test_empty_corpus_is_rejected():
    with pytest.raises(DatasetError):
        build_vocab([])


def test_vocab_save_load_keeps_digest(tmp_path):
    vocab = build_vocab([parse_smiles(s) for s in ("CC(=O)O", "c1ccccc1", "C#N", "[O-]C")], include_charge=True)
    path = tmp_path / "vocab.json"
    vocab.save(path, {"tool_version": "0.1.0", "config_hash": "abc", "seed": 0})
    payload = json.loads(path.read_text())
    assert payload["config_hash"] == "abc"
    loaded = Vocabulary.load(path)
    assert loaded.tokens == vocab.tokens
    assert loaded.counts == vocab.counts
    assert loaded.include_charge
    assert loaded.digest() == vocab.digest()
    loaded.check_compatible(len(vocab), vocab.digest())


def test_vocab_mismatch_is_reported():
    vocab = build_vocab([parse_smiles("CCO")])
    other = build_vocab([parse_smiles("CCN")])
    with pytest.raises(VocabMismatchError):
        vocab.check_compatible(len(vocab) + 1)
    with pytest.raises(VocabMismatchError):
        vocab.check_compatible(len(other), other.digest())


def test_unknown_vocab_version(tmp_path):
    path = tmp_path / "vocab.json"
    path.write_text(json.dumps({"version": 99, "tokens": []}))
    with pytest.raises(VocabMismatchError):
        Vocabulary.load(path)


def test_distribution_pools_unknown_tokens():
    vocab = build_vocab([parse_smiles("CC")])
    frame = token_distribution([parse_smiles("CCO")], vocab)
    assert list(frame["token"]) == ["<unk>[]", "C[-]"]
    assert list(frame["count"]) == [2, 1]
    assert frame["cumulative"].iloc[-1] == pytest.approx(1.0)


def test_distribution_over_centre_positions():
    graphs = [parse_smiles("CBr"), parse_smiles("[I-]"), parse_smiles("CC=C")]
    vocab = build_vocab(graphs)
    frame = token_distribution(graphs, vocab, positions=[(0, 1), (0,), (1, 2)])
    assert sorted(frame["token"]) == ["Br[-]", "C[-,=]", "C[-]", "C[=]", "I[]"]
    assert list(frame["fraction"]) == pytest.approx([0.2] * 5)
    assert top_k_coverage(frame, 2) == pytest.approx(0.4)


def test_parallel_count_matches_serial():
    graphs = [parse_smiles(part) for line in desk_reactions(6) for side in line.split(">") if side
              for part in side.split(".")]
    serial = count_tokens(graphs)
    for threads in (2, 3, 8):
        assert parallel_count(graphs, threads=threads) == serial
    positions = [tuple(range(len(g.atoms)))[:2] for g in graphs]
    assert parallel_count(graphs, positions=positions, threads=4) == count_tokens(graphs, positions=positions)


def test_write_distribution_columns(tmp_path):
    vocab = build_vocab([parse_smiles(FINKELSTEIN.split(">")[0].split(".")[0])])
    frame = token_distribution([parse_smiles(HYDROGENATION.split(">")[0])], vocab)
    path = tmp_path / "dist.csv"
    write_distribution(frame, path)
    assert path.read_text().splitlines()[0] == "token,count,fraction"
