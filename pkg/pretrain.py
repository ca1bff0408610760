"""Masked reaction-centre reconstruction (MRCR), centre identification (RCI) and the pre-training loop."""
import json
import logging
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, replace
from pathlib import Path

import numpy as np
from tqdm import tqdm

import numerics as nx
from chemgraph import MASK_ELEMENT, BondOrder
from config import ConfigError, DatasetError, VocabMismatchError
from encoders import EncoderConfig, encode, encode_context, init_encoder_params
from finetune import roc_auc

logger = logging.getLogger(__name__)

OBJECTIVES = {"M": "MRCR", "I": "RCI", "IM": "IM"}


@dataclass(frozen=True)
class MaskedPrimary:
    graph: object
    masked_positions: tuple
    targets: tuple


def mask_primary(example, vocab):
    """Replace centre atoms and every bond touching them with MASK types; topology is kept."""
    centre = set(example.centre_atom_indices)
    g = example.primary
    atoms = tuple(replace(a, element=MASK_ELEMENT) if i in centre else a for i, a in enumerate(g.atoms))
    bonds = tuple(
        replace(b, order=BondOrder.MASK) if b.begin in centre or b.end in centre else b
        for b in g.bonds
    )
    return MaskedPrimary(
        graph=type(g)(atoms, bonds),
        masked_positions=tuple(example.centre_atom_indices),
        targets=tuple(vocab.index_of(token) for token in example.mrcr_targets),
    )


@dataclass(frozen=True)
class PretrainConfig:
    objective: str = "IM"
    lr: float = 3e-4
    batch_size: int = 128
    epochs: int = 5
    val_fraction: float = 0.1
    max_centre_atoms: int = 20
    rci_class_weight: bool = False
    use_context: bool = True
    head_hidden: int = None
    precision: str = "float32"
    token_charge: bool = False

    def __post_init__(self):
        if self.objective not in OBJECTIVES:
            raise ConfigError(f"objective must be one of {sorted(OBJECTIVES)}, got {self.objective!r}")
        if self.batch_size < 1 or self.epochs < 0:
            raise ConfigError("batch_size must be positive and epochs non-negative")
        if not 0.0 <= self.val_fraction < 1.0:
            raise ConfigError("val_fraction must lie in [0, 1)")


@dataclass(frozen=True)
class PretrainModel:
    encoder: EncoderConfig
    vocab_size: int
    use_context: bool = True
    rci_class_weight: bool = False


@dataclass(frozen=True)
class PreparedExample:
    example: object
    masked: MaskedPrimary


@dataclass(frozen=True)
class PretrainBatch:
    items: tuple
    objective: str


def init_pretrain_params(store, rng, model, head_hidden=None):
    d = model.encoder.hidden_dim
    hidden = head_hidden or d
    init_encoder_params(store, rng, model.encoder)
    nx.init_mlp(store, rng, "mrcr.head", [2 * d, hidden, model.vocab_size])
    nx.init_mlp(store, rng, "rci.head", [2 * d, hidden, 2])
    return store


def prepare_examples(examples, vocab, threads=1):
    def prepare(example):
        return PreparedExample(example, mask_primary(example, vocab))

    if threads > 1:
        with ThreadPoolExecutor(max_workers=threads) as pool:
            return list(pool.map(prepare, examples))
    return [prepare(example) for example in examples]


def make_batches(items, batch_size, rng, objective="IM"):
    """Seeded shuffle of the items, cut into consecutive batches of one objective tag."""
    order = rng.permutation(len(items))
    return [
        PretrainBatch(tuple(items[k] for k in order[start:start + batch_size]), OBJECTIVES.get(objective, objective))
        for start in range(0, len(items), batch_size)
    ]


def _context(model, tape, example):
    return encode_context(model.encoder, tape, example.conditional if model.use_context else ())


def _head_input(context, states, rows):
    picked = nx.take(states, np.asarray(rows, dtype=np.int64))
    return nx.concat([nx.tile_rows(context, len(rows)), picked], axis=-1)


def mrcr_forward(model, tape, item):
    """Logits (k, V) over the vocabulary for the k masked centre atoms of one example."""
    encoded = encode(model.encoder, tape, item.masked.graph)
    features = _head_input(_context(model, tape, item.example), encoded.node_states, item.masked.masked_positions)
    return nx.mlp_forward(nx.mlp_layers(tape, "mrcr.head"), features)


def rci_forward(model, tape, item):
    """Two-class logits (n, 2) for every atom of the unmasked primary."""
    primary = item.example.primary
    encoded = encode(model.encoder, tape, primary)
    features = _head_input(_context(model, tape, item.example), encoded.node_states, range(len(primary.atoms)))
    return nx.mlp_forward(nx.mlp_layers(tape, "rci.head"), features)


def _sum_nodes(nodes):
    total = nodes[0]
    for node in nodes[1:]:
        total = nx.add(total, node)
    return total


def mrcr_loss(model, tape, batch):
    """Summed negative log-likelihood of every masked centre atom's token, plus per-example logits."""
    losses, logits = [], []
    for item in batch.items:
        out = mrcr_forward(model, tape, item)
        logits.append(out)
        losses.append(nx.scale(nx.reduce_sum(nx.pick(nx.log_softmax(out), item.masked.targets)), -1.0))
    return _sum_nodes(losses), logits


def _rci_weights(labels, dtype):
    positives = int(labels.sum())
    negatives = labels.size - positives
    weights = np.ones(labels.size, dtype=dtype)
    if positives and negatives:
        weights[labels == 1] = negatives / positives
    return weights


def rci_loss(model, tape, batch):
    """Summed per-atom negative log-likelihood of centre membership, plus per-example probabilities."""
    losses, probabilities = [], []
    labels_all = np.concatenate([np.asarray(item.example.rci_labels) for item in batch.items])
    weights = _rci_weights(labels_all, tape.dtype) if model.rci_class_weight else None
    offset = 0
    for item in batch.items:
        labels = np.asarray(item.example.rci_labels, dtype=np.int64)
        log_probs = nx.log_softmax(rci_forward(model, tape, item))
        probabilities.append(np.exp(log_probs.value[:, 1]))
        nll = nx.pick(log_probs, labels)
        if weights is not None:
            nll = nx.mul(nll, weights[offset:offset + labels.size])
        offset += labels.size
        losses.append(nx.scale(nx.reduce_sum(nll), -1.0))
    return _sum_nodes(losses), probabilities


def im_loss(model, tape, batch):
    """Unweighted sum of the MRCR and RCI losses on the same parameters."""
    reconstruction, _ = mrcr_loss(model, tape, batch)
    identification, _ = rci_loss(model, tape, batch)
    return nx.add(reconstruction, identification)


def objective_loss(model, tape, batch):
    if batch.objective == "MRCR":
        return mrcr_loss(model, tape, batch)[0]
    if batch.objective == "RCI":
        return rci_loss(model, tape, batch)[0]
    return im_loss(model, tape, batch)


def evaluate(model, store, items, objective="IM", batch_size=128):
    """Per-example loss, argmax reconstruction accuracy and per-atom RCI ROC-AUC over ``items``.

    Metrics that cannot be computed (no items, a single RCI class) are None.
    """
    if not items:
        return {"loss": None, "recon_acc": None, "rci_auc": None}
    tag = OBJECTIVES.get(objective, objective)
    total, correct, positions = 0.0, 0, 0
    scores, labels = [], []
    for start in range(0, len(items), batch_size):
        batch = PretrainBatch(tuple(items[start:start + batch_size]), tag)
        tape = nx.Tape(store, enabled=False)
        reconstruction, logits = mrcr_loss(model, tape, batch)
        identification, probabilities = rci_loss(model, tape, batch)
        if tag == "MRCR":
            total += float(reconstruction.value)
        elif tag == "RCI":
            total += float(identification.value)
        else:
            total += float(reconstruction.value) + float(identification.value)
        for item, out, probs in zip(batch.items, logits, probabilities):
            correct += int(np.sum(np.argmax(out.value, axis=1) == np.asarray(item.masked.targets)))
            positions += len(item.masked.targets)
            scores.append(probs)
            labels.append(np.asarray(item.example.rci_labels))
    scores, labels = np.concatenate(scores), np.concatenate(labels)
    auc = roc_auc(scores, labels) if 0 < labels.sum() < labels.size else None
    return {
        "loss": total / len(items),
        "recon_acc": correct / positions if positions else None,
        "rci_auc": auc,
    }


def split_by_reaction(items, fraction, rng):
    """Hold out a seeded ``fraction`` of source reactions (never all of them)."""
    sources = list(dict.fromkeys(item.example.source[0] for item in items))
    if fraction <= 0 or len(sources) < 2:
        return list(items), []
    held = max(1, min(len(sources) - 1, int(round(fraction * len(sources)))))
    chosen = {sources[k] for k in rng.permutation(len(sources))[:held]}
    train = [item for item in items if item.example.source[0] not in chosen]
    val = [item for item in items if item.example.source[0] in chosen]
    return train, val


def checkpoint_metadata(model, settings, vocab, stamp):
    return dict(
        stamp,
        kind="pretrain",
        encoder=model.encoder.to_json(),
        vocab_size=len(vocab),
        vocab_digest=vocab.digest(),
        objective=settings.objective,
        use_context=model.use_context,
        head_hidden=settings.head_hidden,
    )


def _load_initial(store, path, model, vocab):
    loaded, metadata = nx.load_checkpoint(path)
    if metadata.get("vocab_size") is not None:
        vocab.check_compatible(metadata["vocab_size"], metadata.get("vocab_digest"))
    if metadata.get("encoder") and EncoderConfig.from_section(metadata["encoder"]) != model.encoder:
        raise VocabMismatchError(f"checkpoint {path} was trained with a different encoder configuration")
    for name in store:
        if name in loaded:
            if loaded[name].shape != store[name].shape:
                raise VocabMismatchError(f"parameter {name} has shape {loaded[name].shape} in {path}")
            store.values[name][...] = loaded[name]
    logger.info("initialised %d parameters from %s", sum(name in loaded for name in store), path)


def pretrain_run(run_config, examples, vocab, out_dir, init_checkpoint=None, threads=1):
    """Train on ``examples``; writes metrics.jsonl plus per-epoch and final checkpoints under ``out_dir``."""
    if not examples:
        raise DatasetError("pre-training corpus produced no examples")
    if vocab is None or len(vocab) < 2:
        raise DatasetError("pre-training needs a non-empty vocabulary")
    settings = PretrainConfig(**run_config.section("pretrain"))
    model = PretrainModel(
        encoder=EncoderConfig.from_section(run_config.section("encoder")),
        vocab_size=len(vocab),
        use_context=settings.use_context,
        rci_class_weight=settings.rci_class_weight,
    )
    rng = np.random.default_rng(run_config.seed)
    store = init_pretrain_params(nx.ParameterStore(nx.resolve_dtype(settings.precision)), rng, model, settings.head_hidden)
    if init_checkpoint:
        _load_initial(store, init_checkpoint, model, vocab)

    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    stamp = run_config.stamp()
    metadata = checkpoint_metadata(model, settings, vocab, stamp)
    items = prepare_examples(examples, vocab, threads)
    train, val = split_by_reaction(items, settings.val_fraction, rng)
    logger.info("pre-training %s on %d examples (%d held out), objective %s",
                model.encoder.kind, len(train), len(val), settings.objective)

    metrics_path = out_dir / "metrics.jsonl"
    history = []
    step = 0

    def log_metrics(epoch):
        train_metrics = evaluate(model, store, train, settings.objective)
        val_metrics = evaluate(model, store, val, settings.objective)
        line = dict(
            stamp,
            epoch=epoch,
            step=step,
            objective=settings.objective,
            loss=train_metrics["loss"],
            val_loss=val_metrics["loss"],
            recon_acc=val_metrics["recon_acc"],
            rci_auc=val_metrics["rci_auc"],
        )
        history.append(line)
        with open(metrics_path, "a", encoding="utf-8") as handle:
            handle.write(json.dumps(line) + "\n")
        return line

    metrics_path.write_text("", encoding="utf-8")
    log_metrics(0)
    quiet = not logger.isEnabledFor(logging.INFO)
    for epoch in tqdm(range(1, settings.epochs + 1), desc="pretrain", disable=quiet):
        for batch in make_batches(train, settings.batch_size, rng, settings.objective):
            tape = nx.Tape(store)
            loss = objective_loss(model, tape, batch)
            grads = nx.backward(tape, loss)
            try:
                nx.adam_step(store, grads, settings.lr)
            except nx.NonFiniteGradientError:
                logger.error("aborting at epoch %d step %d: non-finite gradient", epoch, step)
                raise
            step += 1
        line = log_metrics(epoch)
        logger.info("epoch %d: loss %.4f recon_acc %s rci_auc %s", epoch, line["loss"], line["recon_acc"], line["rci_auc"])
        nx.save_checkpoint(store, out_dir / f"checkpoint_epoch{epoch}.json", dict(metadata, epoch=epoch))
    final = nx.save_checkpoint(store, out_dir / "checkpoint.json", dict(metadata, epoch=settings.epochs))
    logger.info("wrote %s and %s", final, metrics_path)
    return {"checkpoint": final, "metrics": metrics_path, "history": history, "store": store, "model": model}


def load_pretrained(path):
    """(store, PretrainModel, metadata) from a pre-training checkpoint."""
    store, metadata = nx.load_checkpoint(path)
    if metadata.get("kind") != "pretrain":
        raise VocabMismatchError(f"{path} is not a pre-training checkpoint")
    model = PretrainModel(
        encoder=EncoderConfig.from_section(metadata["encoder"]),
        vocab_size=metadata["vocab_size"],
        use_context=metadata.get("use_context", True),
    )
    return store, model, metadata
