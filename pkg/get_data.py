from dotenv import load_dotenv
import logging
import os

import pandas as pd

from centre_vocab import Vocabulary
from chemgraph import parse_smiles
from config import ConfigError, DatasetError, SmilesError, ReactionParseError
from finetune import LabeledMolecule, LabeledPair, LabeledReaction
from reaction import corpus_examples, parse_reaction, read_corpus

load_dotenv()

logger = logging.getLogger(__name__)

LOG_LEVELS = {
    "error": logging.ERROR,
    "warn": logging.WARNING,
    "info": logging.INFO,
    "debug": logging.DEBUG,
}


def env_log_level():
    name = os.getenv("REMO_LOG_LEVEL", "info").strip().lower()
    if name not in LOG_LEVELS:
        raise ConfigError(f"REMO_LOG_LEVEL must be one of {sorted(LOG_LEVELS)}, got {name!r}")
    return LOG_LEVELS[name]


def env_threads(default=1):
    value = os.getenv("REMO_THREADS")
    if not value:
        return default
    try:
        return max(1, int(value))
    except ValueError:
        raise ConfigError(f"REMO_THREADS must be an integer, got {value!r}") from None


class DataCache:
    """Process-wide cache of parsed corpora and vocabularies, keyed by path."""

    _instance = None

    def __new__(cls, *args, **kwargs):
        if cls._instance is None:
            cls._instance = super().__new__(cls)
        return cls._instance

    def __init__(self):
        if hasattr(self, "corpora"):  # already initialised
            return
        self.corpora = {}
        self.vocabularies = {}

    def corpus(self, path, threads=1):
        key = os.path.abspath(path)
        if key not in self.corpora:
            if not os.path.exists(path):
                raise FileNotFoundError(path)
            self.corpora[key] = read_corpus(path, threads)
        return self.corpora[key]

    def vocabulary(self, path):
        key = os.path.abspath(path)
        if key not in self.vocabularies:
            if not os.path.exists(path):
                raise FileNotFoundError(path)
            self.vocabularies[key] = Vocabulary.load(path)
        return self.vocabularies[key]

    def examples(self, path, vocab, max_centre_atoms, threads=1):
        accepted, _ = self.corpus(path, threads)
        examples, dropped = corpus_examples(accepted, vocab, max_centre_atoms)
        if dropped:
            logger.warning("%d reactions of %s gave no pre-training example", len(dropped), path)
        return examples

    def clear(self):
        self.corpora.clear()
        self.vocabularies.clear()


def read_table(path, required):
    """CSV with at least the ``required`` columns; whitespace around values is stripped."""
    if not os.path.exists(path):
        raise FileNotFoundError(path)
    frame = pd.read_csv(path, dtype=str, keep_default_na=False, skipinitialspace=True)
    frame.columns = [c.strip() for c in frame.columns]
    missing = [c for c in required if c not in frame.columns]
    if missing:
        raise DatasetError(f"{path}: missing column(s) {', '.join(missing)}; found {list(frame.columns)}")
    return frame


def _row_error(path, row, exc):
    # header is line 1
    return DatasetError(f"{path} line {row + 2}: {exc}")


def _float(value, path, row, column):
    try:
        return float(value)
    except ValueError:
        raise _row_error(path, row, f"{column} {value!r} is not a number") from None


def _int(value, path, row, column):
    try:
        return int(value)
    except ValueError:
        raise _row_error(path, row, f"{column} {value!r} is not an integer") from None


def _graph(text, path, row):
    try:
        return parse_smiles(text)
    except SmilesError as exc:
        raise _row_error(path, row, exc) from exc


def load_regression_csv(path):
    """Rows of ``smiles,label[,cliff]``; the cliff flag is None when the column is absent."""
    frame = read_table(path, ["smiles", "label"])
    has_cliff = "cliff" in frame.columns
    rows = []
    for k, record in enumerate(frame.to_dict("records")):
        cliff = None
        if has_cliff:
            flag = record["cliff"].strip()
            if flag not in ("0", "1"):
                raise _row_error(path, k, f"cliff must be 0 or 1, got {flag!r}")
            cliff = flag == "1"
        rows.append(LabeledMolecule(_graph(record["smiles"], path, k), _float(record["label"], path, k, "label"), cliff))
    logger.info("loaded %d labelled molecules from %s", len(rows), path)
    return rows


def load_pair_csv(path):
    frame = read_table(path, ["smiles_a", "smiles_b", "label"])
    rows = [
        LabeledPair(_graph(r["smiles_a"], path, k), _graph(r["smiles_b"], path, k), _int(r["label"], path, k, "label"))
        for k, r in enumerate(frame.to_dict("records"))
    ]
    logger.info("loaded %d labelled pairs from %s", len(rows), path)
    return rows


def load_reaction_csv(path):
    frame = read_table(path, ["reaction", "label"])
    rows = []
    for k, record in enumerate(frame.to_dict("records")):
        try:
            parsed = parse_reaction(record["reaction"])
        except ReactionParseError as exc:
            raise _row_error(path, k, exc) from exc
        rows.append(LabeledReaction(parsed, _int(record["label"], path, k, "label")))
    logger.info("loaded %d labelled reactions from %s", len(rows), path)
    return rows


def num_classes(rows):
    return max(row.label for row in rows) + 1 if rows else 0
