"""Downstream heads on a pre-trained encoder, plus the metrics they report."""
import logging
from dataclasses import dataclass

import numpy as np
from sklearn.metrics import accuracy_score, mean_squared_error, precision_recall_fscore_support, roc_auc_score
from tqdm import tqdm

import numerics as nx
from chemgraph import disjoint_union
from config import ConfigError, DatasetError, VocabMismatchError
from encoders import EncoderConfig, encode, graphormer_encode, init_encoder_params

logger = logging.getLogger(__name__)

DEFAULT_SPLITS = {"regression": (0.8, 0.2), "pair": (0.6, 0.2, 0.2), "reaction": (0.6, 0.2, 0.2)}
REACTION_HEAD_HIDDEN = 1024
RMSE_FLOOR = 1e-12


def _check_lengths(a, b):
    if len(a) != len(b):
        raise ValueError(f"length mismatch: {len(a)} predictions vs {len(b)} labels")
    if not len(a):
        raise ValueError("metrics need at least one prediction")


def rmse(predictions, labels):
    _check_lengths(predictions, labels)
    return float(np.sqrt(mean_squared_error(labels, predictions)))


def rmse_cliff(predictions, labels, cliff):
    """RMSE over rows flagged as activity cliffs, or None when no row is flagged."""
    _check_lengths(predictions, labels)
    flags = np.asarray([bool(f) for f in cliff])
    if not flags.any():
        return None
    return rmse(np.asarray(predictions)[flags], np.asarray(labels)[flags])


def roc_auc(scores, labels):
    _check_lengths(scores, labels)
    labels = np.asarray(labels)
    if len(np.unique(labels)) < 2:
        raise ValueError("ROC-AUC needs both classes among the labels")
    return float(roc_auc_score(labels, scores))


def classification_metrics(predictions, labels):
    """Accuracy plus macro precision, recall and F1 over classes seen in predictions or labels."""
    _check_lengths(predictions, labels)
    classes = np.union1d(np.asarray(predictions), np.asarray(labels))
    precision, recall, f1, _ = precision_recall_fscore_support(
        labels, predictions, labels=classes, average="macro", zero_division=0
    )
    return {
        "accuracy": float(accuracy_score(labels, predictions)),
        "precision": float(precision),
        "recall": float(recall),
        "f1": float(f1),
    }


@dataclass(frozen=True)
class LabeledMolecule:
    graph: object
    label: float
    cliff_flag: bool = None


@dataclass(frozen=True)
class LabeledPair:
    graph_a: object
    graph_b: object
    label: int


@dataclass(frozen=True)
class LabeledReaction:
    record: object
    label: int


@dataclass(frozen=True)
class FinetuneConfig:
    lr: float = 1e-4
    epochs: int = 50
    batch_size: int = 32
    patience: int = 10
    freeze_encoder: bool = False
    head_hidden: int = None
    precision: str = "float32"
    split: tuple = None

    def __post_init__(self):
        if self.batch_size < 1 or self.epochs < 0 or self.patience < 1:
            raise ConfigError("finetune batch_size and patience must be positive, epochs non-negative")


@dataclass
class FinetuneResult:
    store: object
    encoder: EncoderConfig
    report: dict
    predict: object = None


def split_indices(n, ratios, rng):
    """Seeded random split of range(n) by ``ratios``; rounding leftovers go to the first part."""
    ratios = np.asarray(ratios, dtype=float)
    if ratios.ndim != 1 or len(ratios) < 2 or np.any(ratios < 0) or ratios.sum() <= 0:
        raise ConfigError(f"invalid split ratios {list(ratios)}")
    counts = np.floor(ratios / ratios.sum() * n).astype(int)
    counts[0] += n - counts.sum()
    order = rng.permutation(n)
    bounds = np.cumsum(counts)[:-1]
    return [np.sort(part) for part in np.split(order, bounds)]


def make_splits(rows, task, settings, rng, test_rows=None):
    """{'train', 'val', 'test'} lists; a separate test file turns the ratios into a train/val split."""
    ratios = tuple(settings.split) if settings.split else DEFAULT_SPLITS[task]
    if test_rows is not None:
        ratios = ratios[:2]
    parts = split_indices(len(rows), ratios, rng)
    splits = {name: [rows[k] for k in part] for name, part in zip(("train", "val", "test"), parts)}
    if test_rows is not None:
        splits["test"] = list(test_rows)
    splits.setdefault("test", [])
    return splits


def build_store(checkpoint, encoder_section, precision, rng):
    """Encoder parameters from a pre-training checkpoint (``encoder.*`` only) or freshly initialised."""
    if checkpoint is None:
        config = EncoderConfig.from_section(encoder_section)
        return init_encoder_params(nx.ParameterStore(nx.resolve_dtype(precision)), rng, config), config
    loaded, metadata = nx.load_checkpoint(checkpoint)
    if "encoder" not in metadata:
        raise VocabMismatchError(f"{checkpoint} carries no encoder configuration")
    config = EncoderConfig.from_section(metadata["encoder"])
    store = nx.ParameterStore(nx.resolve_dtype(precision))
    for name in loaded.names("encoder."):
        store.add(name, loaded[name])
    logger.info("loaded %d encoder parameters from %s", len(store), checkpoint)
    return store, config


def _sum_nodes(nodes):
    total = nodes[0]
    for node in nodes[1:]:
        total = nx.add(total, node)
    return total


def _batches(count, batch_size, rng):
    order = rng.permutation(count)
    return [order[start:start + batch_size] for start in range(0, count, batch_size)]


def _train(store, settings, rng, train, val, batch_loss, val_loss, desc):
    """Adam over shuffled batches with early stopping on ``val_loss``; the best parameters are restored."""
    trainable = [n for n in store if not (settings.freeze_encoder and n.startswith("encoder."))]
    best, best_state, waited = None, store.snapshot(), 0
    quiet = not logger.isEnabledFor(logging.INFO)
    for epoch in tqdm(range(1, settings.epochs + 1), desc=desc, disable=quiet):
        for batch in _batches(len(train), settings.batch_size, rng):
            tape = nx.Tape(store)
            grads = nx.backward(tape, batch_loss(tape, [train[k] for k in batch]))
            nx.adam_step(store, {n: grads[n] for n in trainable}, settings.lr)
        score = val_loss(val) if val else None
        if score is None:
            continue
        if best is None or score < best:
            best, best_state, waited = score, store.snapshot(), 0
        else:
            waited += 1
            if waited >= settings.patience:
                logger.info("%s: early stop at epoch %d (best validation %.4f)", desc, epoch, best)
                break
    if best is not None:
        store.restore(best_state)
    return best


def _regression_forward(encoder, tape, rows):
    head = nx.mlp_layers(tape, "reg.head")
    outputs = [nx.mlp_forward(head, encode(encoder, tape, row.graph).global_state) for row in rows]
    return nx.reshape(nx.concat(outputs, axis=0), (len(rows),))


def finetune_regression(checkpoint, splits, run_config):
    """2-layer MLP on the global representation, trained with RMSE on standardised labels."""
    settings = FinetuneConfig(**run_config.section("finetune"))
    rng = np.random.default_rng(run_config.seed)
    train, val, test = splits["train"], splits["val"], splits.get("test") or splits["val"]
    if not train or not test:
        raise DatasetError("regression needs non-empty training and evaluation splits")
    labels = np.array([row.label for row in train], dtype=float)
    if not np.all(np.isfinite(labels)):
        raise DatasetError("regression labels must be finite")
    mu, sigma = float(labels.mean()), float(labels.std()) or 1.0
    store, encoder = build_store(checkpoint, run_config.section("encoder"), settings.precision, rng)
    d = encoder.hidden_dim
    nx.init_mlp(store, rng, "reg.head", [d, settings.head_hidden or d, 1])

    def batch_loss(tape, rows):
        target = np.array([(row.label - mu) / sigma for row in rows], dtype=tape.dtype)
        diff = nx.sub(_regression_forward(encoder, tape, rows), target)
        mse = nx.mean(nx.mul(diff, diff))
        return nx.sqrt(nx.add(mse, np.asarray(RMSE_FLOOR, dtype=tape.dtype)))

    def predict(rows):
        tape = nx.Tape(store, enabled=False)
        return _regression_forward(encoder, tape, rows).value.astype(float) * sigma + mu

    def val_rmse(rows):
        return rmse(predict(rows), [row.label for row in rows])

    best = _train(store, settings, rng, train, val, batch_loss, val_rmse, "finetune-reg")
    truth = [row.label for row in test]
    predictions = predict(test)
    report = {
        "task": "regression",
        "metrics": {
            "rmse": rmse(predictions, truth),
            "rmse_cliff": rmse_cliff(predictions, truth, [row.cliff_flag for row in test]),
            "baseline_rmse": rmse(np.full(len(truth), mu), truth),
            "val_rmse": best,
        },
        "label_mean": mu,
        "label_std": sigma,
        "sizes": {name: len(rows) for name, rows in splits.items()},
    }
    return FinetuneResult(store, encoder, report, predict)


def _check_classes(labels, num_classes, what):
    labels = np.asarray(labels)
    if labels.size and (labels.min() < 0 or labels.max() >= num_classes):
        raise DatasetError(f"{what} labels must lie in [0, {num_classes})")


def _classifier(store, settings, rng, splits, num_classes, forward, desc):
    train, val, test = splits["train"], splits["val"], splits.get("test") or splits["val"]
    if not train:
        raise DatasetError(f"{desc} training split is empty")
    for name, rows in splits.items():
        _check_classes([row.label for row in rows], num_classes, f"{desc} {name}")

    def batch_loss(tape, rows):
        log_probs = nx.log_softmax(forward(tape, rows))
        picked = nx.pick(log_probs, [row.label for row in rows])
        return nx.scale(nx.mean(picked), -1.0)

    def probabilities(rows):
        tape = nx.Tape(store, enabled=False)
        return np.exp(nx.log_softmax(forward(tape, rows)).value.astype(float))

    def val_loss(rows):
        probs = probabilities(rows)
        picked = probs[np.arange(len(rows)), [row.label for row in rows]]
        return float(-np.mean(np.log(np.maximum(picked, 1e-300))))

    best = _train(store, settings, rng, train, val, batch_loss, val_loss, desc)
    probs = probabilities(test) if test else np.zeros((0, num_classes))
    truth = [row.label for row in test]
    metrics = classification_metrics(np.argmax(probs, axis=1), truth) if test else {}
    metrics["val_loss"] = best
    return metrics, probs, probabilities


def finetune_pair(checkpoint, splits, num_classes, run_config):
    """Concatenated globals of both molecules (input order) into a 2-layer MLP with cross-entropy."""
    settings = FinetuneConfig(**run_config.section("finetune"))
    rng = np.random.default_rng(run_config.seed)
    if len({row.label for row in splits["train"]}) < 2:
        raise DatasetError("pair training set holds a single class; cannot fit a classifier")
    store, encoder = build_store(checkpoint, run_config.section("encoder"), settings.precision, rng)
    d = encoder.hidden_dim
    nx.init_mlp(store, rng, "pair.head", [2 * d, settings.head_hidden or d, num_classes])

    def forward(tape, rows):
        head = nx.mlp_layers(tape, "pair.head")
        joined = [
            nx.concat([encode(encoder, tape, row.graph_a).global_state, encode(encoder, tape, row.graph_b).global_state], axis=-1)
            for row in rows
        ]
        return nx.mlp_forward(head, nx.concat(joined, axis=0))

    metrics, probs, predict = _classifier(store, settings, rng, splits, num_classes, forward, "finetune-pair")
    test = splits.get("test") or splits["val"]
    truth = np.array([row.label for row in test])
    if num_classes == 2 and len(np.unique(truth)) == 2:
        metrics["roc_auc"] = roc_auc(probs[:, 1], truth)
    report = {
        "task": "pair",
        "num_classes": num_classes,
        "metrics": metrics,
        "sizes": {name: len(rows) for name, rows in splits.items()},
    }
    return FinetuneResult(store, encoder, report, predict)


def reaction_union(record):
    """Disjoint union of reactants+reagents then products, with the atom groups of each side."""
    left = list(record.reactants) + list(record.reagents)
    union = disjoint_union(left + list(record.products))
    split = sum(len(g.atoms) for g in left)
    return union, (tuple(range(split)), tuple(range(split, len(union.atoms))))


def reaction_forward(encoder, tape, records):
    head = nx.mlp_layers(tape, "rxn.head")
    features = []
    for record in records:
        union, groups = reaction_union(record)
        encoded = graphormer_encode(encoder, tape, union, groups=groups, roles=(0, 1))
        features.append(nx.reshape(encoded.virtual_states, (1, 2 * encoder.hidden_dim)))
    return nx.mlp_forward(head, nx.concat(features, axis=0))


def finetune_reaction_type(checkpoint, splits, num_classes, run_config):
    """Two virtual nodes (reactant side, product side) feeding an MLP with two 1024-unit hidden layers."""
    settings = FinetuneConfig(**run_config.section("finetune"))
    rng = np.random.default_rng(run_config.seed)
    store, encoder = build_store(checkpoint, run_config.section("encoder"), settings.precision, rng)
    if encoder.kind != "graphormer":
        raise ConfigError("reaction-type fine-tuning needs a graphormer encoder (virtual nodes)")
    hidden = settings.head_hidden or REACTION_HEAD_HIDDEN
    nx.init_mlp(store, rng, "rxn.head", [2 * encoder.hidden_dim, hidden, hidden, num_classes])

    def forward(tape, rows):
        return reaction_forward(encoder, tape, [row.record for row in rows])

    metrics, _, predict = _classifier(store, settings, rng, splits, num_classes, forward, "finetune-rxn")
    report = {
        "task": "reaction_type",
        "num_classes": num_classes,
        "metrics": {"accuracy": metrics.get("accuracy"), "val_loss": metrics["val_loss"]},
        "sizes": {name: len(rows) for name, rows in splits.items()},
    }
    return FinetuneResult(store, encoder, report, predict)
