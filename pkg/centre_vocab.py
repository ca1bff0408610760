"""1-hop atom-environment tokens and the reconstruction vocabulary built from them."""
import hashlib
import json
import logging
from collections import Counter
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass

import pandas as pd

from chemgraph import BondOrder
from config import DatasetError, VocabMismatchError

logger = logging.getLogger(__name__)

VOCAB_VERSION = 1
ORDERING_RULE = "count desc, then (element, bond_orders, formal_charge) asc"

_BOND_GLYPH = {
    BondOrder.SINGLE: "-",
    BondOrder.DOUBLE: "=",
    BondOrder.TRIPLE: "#",
    BondOrder.AROMATIC: ":",
    BondOrder.MASK: "?",
}


@dataclass(frozen=True, order=True)
class CentreToken:
    element: str
    bond_orders: tuple = ()
    formal_charge: int = 0

    @property
    def name(self):
        charge = ""
        if self.formal_charge:
            charge = f"{self.formal_charge:+d}"
        return f"{self.element}{charge}[{','.join(_BOND_GLYPH[b] for b in self.bond_orders)}]"


UNK_TOKEN = CentreToken("<unk>")
UNK_INDEX = 0


def token_of_atom(g, i, include_charge=False):
    """Element of atom i plus the sorted orders of its heavy-atom bonds."""
    atom = g.atoms[i]
    orders = tuple(sorted(g.bonds[k].order for k in g.incident_bonds(i)))
    return CentreToken(atom.element, orders, atom.formal_charge if include_charge else 0)


def count_tokens(graphs, include_charge=False, positions=None):
    counts = Counter()
    for k, g in enumerate(graphs):
        atoms = range(len(g.atoms)) if positions is None else positions[k]
        counts.update(token_of_atom(g, i, include_charge) for i in atoms)
    return counts


def _chunks(items, parts):
    size = max(1, -(-len(items) // parts))
    return [items[start:start + size] for start in range(0, len(items), size)]


def parallel_count(graphs, include_charge=False, positions=None, threads=1):
    """Token counts merged from per-chunk partial counts (merge order does not matter)."""
    graphs = list(graphs)
    if threads <= 1 or len(graphs) < 2:
        return count_tokens(graphs, include_charge, positions)
    graph_chunks = _chunks(graphs, threads)
    position_chunks = [None] * len(graph_chunks) if positions is None else _chunks(list(positions), threads)
    total = Counter()
    with ThreadPoolExecutor(max_workers=threads) as pool:
        for partial in pool.map(count_tokens, graph_chunks, [include_charge] * len(graph_chunks), position_chunks):
            total.update(partial)
    return total


class Vocabulary:
    """Index table over CentreTokens; index 0 is reserved for UNK."""

    def __init__(self, tokens, counts, include_charge=False):
        self.tokens = [UNK_TOKEN] + list(tokens)
        self.counts = [0] + list(counts)
        self.include_charge = include_charge
        self.index = {token: k for k, token in enumerate(self.tokens) if k != UNK_INDEX}

    def __len__(self):
        return len(self.tokens)

    def index_of(self, token):
        return self.index.get(token, UNK_INDEX)

    def to_json(self):
        return {
            "version": VOCAB_VERSION,
            "ordering_rule": ORDERING_RULE,
            "include_charge": self.include_charge,
            "tokens": [
                {
                    "element": token.element,
                    "bonds": [order.label for order in token.bond_orders],
                    "charge": token.formal_charge,
                    "count": count,
                }
                for token, count in zip(self.tokens[1:], self.counts[1:])
            ],
        }

    def digest(self):
        payload = json.dumps(self.to_json()["tokens"], sort_keys=True, separators=(",", ":"))
        return hashlib.sha256(payload.encode("utf-8")).hexdigest()[:16]

    def check_compatible(self, size, digest=None):
        if size != len(self) or (digest is not None and digest != self.digest()):
            raise VocabMismatchError(
                f"vocabulary mismatch: checkpoint expects {size} tokens"
                f"{'' if digest is None else ' (digest ' + digest + ')'}, vocabulary has {len(self)} ({self.digest()})"
            )

    def save(self, path, stamp=None):
        payload = self.to_json()
        if stamp:
            payload.update(stamp)
        with open(path, "w", encoding="utf-8") as handle:
            json.dump(payload, handle, indent=1)

    @classmethod
    def load(cls, path):
        with open(path, "r", encoding="utf-8") as handle:
            payload = json.load(handle)
        if payload.get("version") != VOCAB_VERSION:
            raise VocabMismatchError(f"unsupported vocabulary version {payload.get('version')} in {path}")
        tokens, counts = [], []
        for entry in payload["tokens"]:
            orders = tuple(BondOrder.from_label(label) for label in entry["bonds"])
            tokens.append(CentreToken(entry["element"], orders, entry.get("charge", 0)))
            counts.append(entry["count"])
        return cls(tokens, counts, payload.get("include_charge", False))


def build_vocab(corpus, include_charge=False, threads=1):
    """Distinct tokens over every atom of the corpus, most frequent first."""
    corpus = list(corpus)
    if not corpus:
        raise DatasetError("cannot build a vocabulary from an empty corpus")
    counts = parallel_count(corpus, include_charge, threads=threads)
    ordered = sorted(counts.items(), key=lambda item: (-item[1], item[0]))
    logger.info("vocabulary built: %d tokens from %d molecules", len(ordered) + 1, len(corpus))
    return Vocabulary([t for t, _ in ordered], [c for _, c in ordered], include_charge)


def token_distribution(corpus, vocab, positions=None, threads=1):
    """Frequency table of tokens over the corpus (or over the given atom positions).

    Tokens missing from the vocabulary are pooled under UNK. Rows are ordered by
    count, then token; ``cumulative`` is the running coverage.
    """
    counts = parallel_count(corpus, vocab.include_charge, positions, threads)
    pooled = Counter()
    for token, count in counts.items():
        pooled[vocab.tokens[vocab.index_of(token)]] += count
    total = sum(pooled.values())
    rows = sorted(pooled.items(), key=lambda item: (-item[1], item[0]))
    frame = pd.DataFrame(
        {
            "token": [token.name for token, _ in rows],
            "count": [count for _, count in rows],
        }
    )
    frame["fraction"] = frame["count"] / total if total else 0.0
    frame["cumulative"] = frame["fraction"].cumsum()
    return frame


def top_k_coverage(frame, k):
    return float(frame["fraction"].head(k).sum())


def write_distribution(frame, path):
    frame[["token", "count", "fraction"]].to_csv(path, index=False)
