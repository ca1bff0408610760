"""Reaction SMILES, reaction-centre detection and pre-training example extraction."""
import json
import logging
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field

from chemgraph import parse_smiles
from centre_vocab import token_of_atom
from config import ReactionParseError, SmilesError, UnmappableReactionError

logger = logging.getLogger(__name__)

SEGMENTS = ("reactants", "reagents", "products")
DEFAULT_MAX_CENTRE_ATOMS = 20

PARSE_ERROR = "PARSE_ERROR"
UNMAPPABLE = "UNMAPPABLE"
EMPTY_CENTRE = "EMPTY_CENTRE"
NO_EXAMPLES = "NO_EXAMPLES"


@dataclass(frozen=True)
class ReactionRecord:
    reactants: tuple
    reagents: tuple
    products: tuple
    source_line: str = ""


@dataclass(frozen=True, order=True)
class CentrePair:
    i: int
    j: int
    before: object = None
    after: object = None

    def to_json(self):
        return {
            "i": self.i,
            "j": self.j,
            "before": None if self.before is None else self.before.label,
            "after": None if self.after is None else self.after.label,
        }


@dataclass(frozen=True)
class ReactionCentre:
    pairs: frozenset
    centre_atoms: frozenset

    def __bool__(self):
        return bool(self.pairs)

    def sorted_pairs(self):
        return sorted(self.pairs, key=lambda p: (p.i, p.j))


@dataclass(frozen=True)
class PretrainExample:
    primary: object
    conditional: tuple
    centre_atom_indices: tuple
    mrcr_targets: tuple
    rci_labels: tuple
    source: tuple = field(default=(None, None), compare=False)


def _parse_side(text, segment, start):
    graphs = []
    if not text:
        return graphs
    offset = start
    for number, piece in enumerate(text.split("."), 1):
        if not piece:
            raise ReactionParseError("empty molecule", segment, number, offset)
        try:
            graphs.append(parse_smiles(piece))
        except SmilesError as exc:
            message = str(exc).rsplit(" at offset ", 1)[0]
            raise ReactionParseError(message, segment, number, offset + exc.offset) from exc
        offset += len(piece) + 1
    return graphs


def _check_unique_maps(graphs, segment):
    seen = set()
    for graph in graphs:
        for atom in graph.atoms:
            if atom.map_num is None:
                continue
            if atom.map_num in seen:
                raise ReactionParseError(f"duplicate atom map {atom.map_num}", segment)
            seen.add(atom.map_num)


def parse_reaction(line):
    """Parse 'reactants>reagents>products'; trailing columns and CXSMILES blocks are ignored."""
    stripped = line.strip()
    text = stripped.split()[0] if stripped else ""
    segments = text.split(">")
    if len(segments) != 3:
        raise ReactionParseError(f"expected 3 '>'-separated segments, found {len(segments)}")
    sides = []
    start = 0
    for name, segment in zip(SEGMENTS, segments):
        sides.append(_parse_side(segment, name, start))
        start += len(segment) + 1
    reactants, reagents, products = sides
    if not reactants:
        raise ReactionParseError("at least one reactant is required", "reactants")
    if not products:
        raise ReactionParseError("at least one product is required", "products")
    _check_unique_maps(reactants, "reactants")
    _check_unique_maps(products, "products")
    return ReactionRecord(tuple(reactants), tuple(reagents), tuple(products), text)


def _mapped_bonds(graphs, keep):
    table = {}
    for graph in graphs:
        for bond in graph.bonds:
            a = graph.atoms[bond.begin].map_num
            b = graph.atoms[bond.end].map_num
            if a is None or b is None or not keep(a) or not keep(b):
                continue
            table[(min(a, b), max(a, b))] = bond.order
    return table


def side_maps(graphs):
    return {atom.map_num for graph in graphs for atom in graph.atoms if atom.map_num is not None}


def detect_reaction_centre(r):
    """Bond-level diff between reactant and product tables keyed by map-number pairs.

    The product table only keeps atoms mapped on both sides; a reactant bond
    to an atom that leaves the products shows up with ``after=None``.
    """
    reactant_maps = side_maps(r.reactants)
    if not reactant_maps:
        raise UnmappableReactionError("reaction has no mapped reactant atoms")
    before_table = _mapped_bonds(r.reactants, lambda m: True)
    after_table = _mapped_bonds(r.products, lambda m: m in reactant_maps)
    pairs = []
    for key in sorted(set(before_table) | set(after_table)):
        before, after = before_table.get(key), after_table.get(key)
        if before != after:
            pairs.append(CentrePair(key[0], key[1], before, after))
    for pair in pairs:
        assert pair.before != pair.after
    centre_atoms = {m for pair in pairs for m in (pair.i, pair.j) if m in reactant_maps}
    return ReactionCentre(frozenset(pairs), frozenset(centre_atoms))


def reverse_reaction(r):
    return ReactionRecord(r.products, r.reagents, r.reactants, r.source_line)


def extract_examples(r, c, vocab, max_centre_atoms=DEFAULT_MAX_CENTRE_ATOMS):
    """One example per reactant holding centre atoms; other reactants and reagents are context."""
    if not c:
        raise ValueError("reactions with an empty centre have no pre-training examples")
    examples = []
    for k, reactant in enumerate(r.reactants):
        indices = tuple(i for i, atom in enumerate(reactant.atoms) if atom.map_num in c.centre_atoms)
        if not indices:
            continue
        if len(indices) > max_centre_atoms:
            logger.warning("dropping reactant %d of %r: %d centre atoms exceed %d",
                           k, r.source_line, len(indices), max_centre_atoms)
            continue
        marked = set(indices)
        conditional = r.reactants[:k] + r.reactants[k + 1:] + r.reagents
        examples.append(
            PretrainExample(
                primary=reactant,
                conditional=tuple(conditional),
                centre_atom_indices=indices,
                mrcr_targets=tuple(token_of_atom(reactant, i, vocab.include_charge) for i in indices),
                rci_labels=tuple(1 if i in marked else 0 for i in range(len(reactant.atoms))),
                source=(r.source_line, k),
            )
        )
    return examples


def centre_to_json(line_no, centre):
    return {"source_line_no": line_no, "pairs": [p.to_json() for p in centre.sorted_pairs()]}


@dataclass(frozen=True)
class ProcessedReaction:
    line_no: int
    record: ReactionRecord
    centre: ReactionCentre


@dataclass(frozen=True)
class Rejection:
    line_no: int
    reason: str
    message: str
    line: str


def _process(item):
    line_no, line = item
    try:
        record = parse_reaction(line)
        centre = detect_reaction_centre(record)
    except UnmappableReactionError as exc:
        return Rejection(line_no, UNMAPPABLE, str(exc), line)
    except ReactionParseError as exc:
        return Rejection(line_no, PARSE_ERROR, str(exc), line)
    if not centre:
        return Rejection(line_no, EMPTY_CENTRE, "no bond changes between mapped atoms", line)
    return ProcessedReaction(line_no, record, centre)


def read_lines(path):
    """(line_no, text) for every non-blank, non-comment line."""
    with open(path, "r", encoding="utf-8") as handle:
        for line_no, line in enumerate(handle, 1):
            text = line.strip()
            if text and not text.startswith("#"):
                yield line_no, text


def read_corpus(path, threads=1):
    """Parse and detect every reaction of a corpus file; output follows input order."""
    items = list(read_lines(path))
    if threads > 1:
        with ThreadPoolExecutor(max_workers=threads) as pool:
            results = list(pool.map(_process, items))
    else:
        results = [_process(item) for item in items]
    accepted = [r for r in results if isinstance(r, ProcessedReaction)]
    rejected = [r for r in results if isinstance(r, Rejection)]
    logger.info("read %d reactions from %s (%d rejected)", len(accepted), path, len(rejected))
    return accepted, rejected


def corpus_examples(processed, vocab, max_centre_atoms=DEFAULT_MAX_CENTRE_ATOMS):
    """Examples for every processed reaction; reactions that yield none become NO_EXAMPLES rejections."""
    examples, rejected = [], []
    for item in processed:
        found = extract_examples(item.record, item.centre, vocab, max_centre_atoms)
        if not found:
            rejected.append(Rejection(item.line_no, NO_EXAMPLES, "no reactant kept any centre atom",
                                      item.record.source_line))
        examples.extend(found)
    return examples, rejected


def corpus_molecules(processed):
    return [g for item in processed for g in item.record.reactants + item.record.reagents + item.record.products]


def write_rejections(path, rejections, stamp=None):
    """Tab-separated rejections in line order, after a '# ' header carrying ``stamp`` as JSON."""
    with open(path, "w", encoding="utf-8") as handle:
        if stamp is not None:
            handle.write("# " + json.dumps(stamp, sort_keys=True) + "\n")
        for item in sorted(rejections, key=lambda r: r.line_no):
            handle.write(f"{item.line_no}\t{item.reason}\t{item.message}\t{item.line}\n")
