import numpy as np
import pytest

from centre_vocab import build_vocab
from get_data import DataCache
from reaction import corpus_examples, corpus_molecules, read_corpus

FINKELSTEIN = "[CH3:1][Br:2].[I-:3]>>[CH3:1][I:3].[Br-:2]"
HYDROGENATION = "[CH3:1][CH:2]=[CH2:3]>>[CH3:1][CH2:2][CH3:3]"
IDENTITY = "[CH3:1][OH:2]>>[CH3:1][OH:2]"
BROMINATION = "[cH:1]1[cH:2][cH:3][cH:4][cH:5][cH:6]1.[Br:7][Br:8]>>[Br:7][c:1]1[cH:2][cH:3][cH:4][cH:5][cH:6]1.[BrH:8]"


def chain(n):
    """Mapped alkyl chain [CH3:1][CH2:2]...[CH2:n]; atom n is the attachment point."""
    return "[CH3:1]" + "".join(f"[CH2:{k}]" for k in range(2, n + 1))


def family_reactions(n):
    """Six balanced, fully mapped reactions built on a chain of n carbons."""
    r, m = chain(n), n
    return [
        f"{r}[Br:{m + 1}].[I-:{m + 2}]>>{r}[I:{m + 2}].[Br-:{m + 1}]",
        f"{r}[Cl:{m + 1}].[CH3:{m + 2}][O-:{m + 3}]>>{r}[O:{m + 3}][CH3:{m + 2}].[Cl-:{m + 1}]",
        f"{r}[C:{m + 1}](=[O:{m + 2}])[OH:{m + 3}].[NH2:{m + 4}][CH3:{m + 5}]"
        f">>{r}[C:{m + 1}](=[O:{m + 2}])[NH:{m + 4}][CH3:{m + 5}].[OH2:{m + 3}]",
        f"{r}[C:{m + 1}](=[O:{m + 2}])[CH3:{m + 3}]>[BH4-].[Na+]>{r}[CH:{m + 1}]([OH:{m + 2}])[CH3:{m + 3}]",
        f"{r}[CH:{m + 1}]=[CH2:{m + 2}]>>{r}[CH2:{m + 1}][CH3:{m + 2}]",
        f"{r}[C:{m + 1}](=[O:{m + 2}])[OH:{m + 3}].[CH3:{m + 4}][OH:{m + 5}]"
        f">>{r}[C:{m + 1}](=[O:{m + 2}])[O:{m + 5}][CH3:{m + 4}].[OH2:{m + 3}]",
    ]


def desk_reactions(max_chain):
    return [line for n in range(1, max_chain + 1) for line in family_reactions(n)]


@pytest.fixture(autouse=True)
def fresh_cache():
    DataCache().clear()
    yield
    DataCache().clear()


@pytest.fixture
def rng():
    return np.random.default_rng(0)


@pytest.fixture
def centre_fixtures():
    """Balanced mapped reactions: substitutions, condensations, reductions, an aromatic case."""
    return desk_reactions(10) + [FINKELSTEIN, HYDROGENATION, BROMINATION]


@pytest.fixture
def write_corpus(tmp_path):
    def write(lines, name="corpus.rsmi"):
        path = tmp_path / name
        path.write_text("\n".join(lines) + "\n", encoding="utf-8")
        return path

    return write


@pytest.fixture
def small_corpus(write_corpus):
    """Corpus file, vocabulary and examples for the first three chain lengths."""
    path = write_corpus(desk_reactions(3))
    accepted, rejected = read_corpus(path)
    assert not rejected
    vocab = build_vocab(corpus_molecules(accepted))
    examples, dropped = corpus_examples(accepted, vocab)
    assert not dropped
    return path, vocab, examples
