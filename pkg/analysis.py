"""Entropy of reconstruction distributions and logits-grid export for single cases."""
import json
import logging
import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field, replace

import numpy as np
import pandas as pd
from scipy.special import softmax
from scipy.stats import entropy

import numerics as nx
from config import ValidationError, VocabMismatchError
from pretrain import mrcr_forward, prepare_examples

logger = logging.getLogger(__name__)

HISTOGRAM_LOW = 0.0
HISTOGRAM_HIGH = 12.0
HISTOGRAM_WIDTH = 0.25


def _base_value(base):
    if base in (2, "2", "bits"):
        return 2
    if base in ("e", "nats", math.e):
        return None
    raise ValidationError(f"entropy base must be 2 or e, got {base!r}")


def predictive_entropy(logits, base=2):
    """Entropy of softmax(logits); zero-probability terms contribute nothing."""
    logits = np.asarray(logits, dtype=float)
    if logits.size < 1:
        raise ValidationError("entropy needs at least one logit")
    if np.isnan(logits).any():
        raise ValidationError("NaN logits")
    return float(entropy(softmax(logits), base=_base_value(base)))


def histogram(values, low=HISTOGRAM_LOW, high=HISTOGRAM_HIGH, width=HISTOGRAM_WIDTH):
    """Fixed-width bin counts over [low, high) plus one overflow bin for values >= high."""
    bins = int(round((high - low) / width))
    values = np.asarray(values, dtype=float)
    index = np.floor((np.maximum(values, low) - low) / width).astype(np.int64)
    counts = np.bincount(np.minimum(index, bins), minlength=bins + 1)
    lows = low + width * np.arange(bins + 1)
    highs = np.append(lows[1:bins + 1], np.inf)
    return lows, highs, counts


@dataclass
class EntropyReport:
    base: str
    entropies_p: np.ndarray
    entropies_q: np.ndarray
    bin_lo: np.ndarray = field(repr=False)
    bin_hi: np.ndarray = field(repr=False)
    counts_p: np.ndarray = field(repr=False)
    counts_q: np.ndarray = field(repr=False)

    @property
    def mean_p(self):
        return float(np.mean(self.entropies_p)) if self.entropies_p.size else None

    @property
    def mean_q(self):
        return float(np.mean(self.entropies_q)) if self.entropies_q.size else None

    @property
    def conditional_lower(self):
        if self.mean_p is None:
            return None
        return self.mean_p < self.mean_q

    def means(self):
        to_bits = 1.0 if self.base == "bits" else 1.0 / math.log(2)
        p, q = self.mean_p, self.mean_q
        if p is None:
            return {"bits": {"P": None, "Q": None}, "nats": {"P": None, "Q": None}}
        return {
            "bits": {"P": p * to_bits, "Q": q * to_bits},
            "nats": {"P": p * to_bits * math.log(2), "Q": q * to_bits * math.log(2)},
        }


def mrcr_logits(model, store, items, threads=1):
    """Per masked position: (logits vector, target index), in input order."""

    def run(item):
        tape = nx.Tape(store, enabled=False)
        out = mrcr_forward(model, tape, item).value.astype(float)
        return list(zip(out, item.masked.targets))

    if threads > 1:
        with ThreadPoolExecutor(max_workers=threads) as pool:
            chunks = list(pool.map(run, items))
    else:
        chunks = [run(item) for item in items]
    return [pair for chunk in chunks for pair in chunk]


def _check_vocab(metadata, vocab, path):
    if metadata.get("vocab_size") is None:
        raise VocabMismatchError(f"{path} records no vocabulary size")
    vocab.check_compatible(metadata["vocab_size"], metadata.get("vocab_digest"))


def entropy_report(conditional, unconditional, examples, vocab, base=2, threads=1):
    """Entropies of the context model P and of the context-free model Q over every masked position.

    ``conditional`` and ``unconditional`` are (store, PretrainModel, metadata, path) tuples; Q is
    always evaluated with an empty conditional set.
    """
    for _, _, metadata, path in (conditional, unconditional):
        _check_vocab(metadata, vocab, path)
    base_tag = "bits" if _base_value(base) == 2 else "nats"
    items = prepare_examples(examples, vocab, threads)
    p_store, p_model = conditional[0], conditional[1]
    q_store, q_model = unconditional[0], replace(unconditional[1], use_context=False)
    p = np.array([predictive_entropy(l, base) for l, _ in mrcr_logits(p_model, p_store, items, threads)])
    q = np.array([predictive_entropy(l, base) for l, _ in mrcr_logits(q_model, q_store, items, threads)])
    high = HISTOGRAM_HIGH if base_tag == "bits" else HISTOGRAM_HIGH * math.log(2)
    width = HISTOGRAM_WIDTH if base_tag == "bits" else HISTOGRAM_WIDTH * math.log(2)
    lows, highs, counts_p = histogram(p, HISTOGRAM_LOW, high, width)
    _, _, counts_q = histogram(q, HISTOGRAM_LOW, high, width)
    report = EntropyReport(base_tag, p, q, lows, highs, counts_p, counts_q)
    logger.info("entropy over %d masked positions: P %.4f, Q %.4f %s", p.size,
                report.mean_p or 0.0, report.mean_q or 0.0, base_tag)
    return report


def histogram_frame(report):
    return pd.DataFrame(
        {
            "bin_lo": report.bin_lo,
            "bin_hi": report.bin_hi,
            "count_P": report.counts_p,
            "count_Q": report.counts_q,
        }
    )


def write_entropy_report(report, json_path, csv_path, stamp=None):
    payload = dict(stamp or {})
    payload.update(
        base=report.base,
        positions=int(report.entropies_p.size),
        mean_P=report.mean_p,
        mean_Q=report.mean_q,
        means=report.means(),
        conditional_lower=report.conditional_lower,
        entropies_P=[float(v) for v in report.entropies_p],
        entropies_Q=[float(v) for v in report.entropies_q],
        histogram=str(csv_path),
    )
    with open(json_path, "w", encoding="utf-8") as handle:
        json.dump(payload, handle, indent=1)
    histogram_frame(report).to_csv(csv_path, index=False)
    return payload


def logits_grid(logits):
    """Row-major square grid of side ceil(sqrt(V)); cells past V hold NaN."""
    logits = np.asarray(logits, dtype=float).reshape(-1)
    side = math.isqrt(logits.size)
    if side * side < logits.size:
        side += 1
    grid = np.full(side * side, np.nan)
    grid[:logits.size] = logits
    return grid.reshape(side, side)


def export_logits_grid(model, store, example, vocab, position, csv_path, sidecar_path, stamp=None):
    """Write the MRCR logits of one masked centre atom as a square CSV grid.

    ``position`` is an atom index of the primary that must be a centre atom.
    """
    item = prepare_examples([example], vocab)[0]
    positions = list(item.masked.masked_positions)
    if position not in positions:
        raise ValidationError(f"atom {position} is not a masked centre atom (centre atoms: {positions})")
    row = positions.index(position)
    tape = nx.Tape(store, enabled=False)
    logits = mrcr_forward(model, tape, item).value[row].astype(float)
    grid = logits_grid(logits)
    target = item.masked.targets[row]
    side = grid.shape[0]
    pd.DataFrame(grid).to_csv(csv_path, header=False, index=False, na_rep="nan")
    sidecar = dict(stamp or {})
    sidecar.update(target_row=target // side, target_col=target % side, target_index=target,
                   vocab_size=int(logits.size), side=side, atom=position)
    with open(sidecar_path, "w", encoding="utf-8") as handle:
        json.dump(sidecar, handle, indent=1)
    return grid, sidecar
