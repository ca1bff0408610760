import argparse
import json
import logging
import sys
from pathlib import Path

import numpy as np

import numerics as nx
from analysis import entropy_report, export_logits_grid, write_entropy_report
from centre_vocab import build_vocab, token_distribution, top_k_coverage, write_distribution
from config import TOOL_VERSION, RemoError, RunConfig, ValidationError
from finetune import FinetuneConfig, finetune_pair, finetune_reaction_type, finetune_regression, make_splits
from get_data import DataCache, env_log_level, env_threads, load_pair_csv, load_reaction_csv, load_regression_csv, num_classes
from pretrain import load_pretrained, pretrain_run
from reaction import centre_to_json, corpus_examples, corpus_molecules, write_rejections
from views.entropy_histogram import render_histogram
from views.loss_epoch import render_metrics

logger = logging.getLogger("remo")


def setup_logging(level):
    logging.basicConfig(level=level, format="%(asctime)s %(levelname)s %(name)s: %(message)s", stream=sys.stderr)
    logging.getLogger().setLevel(level)


def resolve_config(args):
    config = RunConfig.from_file(args.config) if getattr(args, "config", None) else RunConfig()
    config.override(None, "seed", getattr(args, "seed", None))
    config.override("encoder", "kind", getattr(args, "encoder", None))
    section = "pretrain" if args.command == "pretrain" else "finetune"
    for key in ("epochs", "lr", "batch_size"):
        config.override(section, key, getattr(args, key, None))
    config.override("pretrain", "objective", getattr(args, "objective", None))
    if getattr(args, "no_context", False):
        config.override("pretrain", "use_context", False)
    if getattr(args, "token_charge", False):
        config.override("pretrain", "token_charge", True)
    if getattr(args, "freeze_encoder", False):
        config.override("finetune", "freeze_encoder", True)
    return config


def write_json(path, payload):
    Path(path).parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", encoding="utf-8") as handle:
        json.dump(payload, handle, indent=1, sort_keys=True)
    logger.info("wrote %s", path)


def write_jsonl(path, rows):
    Path(path).parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", encoding="utf-8") as handle:
        for row in rows:
            handle.write(json.dumps(row, sort_keys=True) + "\n")
    logger.info("wrote %s (%d lines)", path, len(rows))


def cmd_detect_centres(args, config):
    accepted, rejected = DataCache().corpus(args.input, args.threads)
    stamp = config.stamp()
    write_jsonl(args.out, [dict(centre_to_json(item.line_no, item.centre), **stamp) for item in accepted])
    write_rejections(f"{args.out}.rejected", rejected, stamp)
    return 0


def _vocabulary(args, config, accepted):
    if getattr(args, "vocab", None):
        return DataCache().vocabulary(args.vocab)
    return build_vocab(corpus_molecules(accepted), config.section("pretrain")["token_charge"], args.threads)


def cmd_ingest(args, config):
    accepted, rejected = DataCache().corpus(args.input, args.threads)
    vocab = _vocabulary(args, config, accepted)
    examples, dropped = corpus_examples(accepted, vocab, config.section("pretrain")["max_centre_atoms"])
    stamp = config.stamp()
    rows = [
        dict(
            stamp,
            reaction=example.source[0],
            primary_index=example.source[1],
            centre_atom_indices=list(example.centre_atom_indices),
            targets=[token.name for token in example.mrcr_targets],
            conditional=len(example.conditional),
        )
        for example in examples
    ]
    write_jsonl(args.out, rows)
    write_rejections(f"{args.out}.rejected", rejected + dropped, stamp)
    logger.info("%d examples from %d reactions; %d rejected", len(examples), len(accepted), len(rejected) + len(dropped))
    return 0


def cmd_build_vocab(args, config):
    accepted, _ = DataCache().corpus(args.input, args.threads)
    vocab = build_vocab(corpus_molecules(accepted), config.section("pretrain")["token_charge"], args.threads)
    Path(args.out).parent.mkdir(parents=True, exist_ok=True)
    vocab.save(args.out, dict(config.stamp(), digest=vocab.digest()))
    logger.info("wrote %s (%d tokens)", args.out, len(vocab))
    return 0


def cmd_stats(args, config):
    accepted, _ = DataCache().corpus(args.input, args.threads)
    vocab = _vocabulary(args, config, accepted)
    if args.restrict == "centres":
        graphs, positions = [], []
        for item in accepted:
            for reactant in item.record.reactants:
                indices = [i for i, a in enumerate(reactant.atoms) if a.map_num in item.centre.centre_atoms]
                if indices:
                    graphs.append(reactant)
                    positions.append(indices)
    else:
        graphs, positions = corpus_molecules(accepted), None
    frame = token_distribution(graphs, vocab, positions, args.threads)
    Path(args.out).parent.mkdir(parents=True, exist_ok=True)
    write_distribution(frame, args.out)
    summary = dict(
        config.stamp(),
        restrict=args.restrict,
        atoms=int(frame["count"].sum()),
        distinct_tokens=int(len(frame)),
        top_k=args.top_k,
        top_k_coverage=top_k_coverage(frame, args.top_k),
        vocab_digest=vocab.digest(),
    )
    write_json(f"{args.out}.summary.json", summary)
    return 0


def cmd_pretrain(args, config):
    vocab = DataCache().vocabulary(args.vocab)
    settings = config.section("pretrain")
    examples = DataCache().examples(args.input, vocab, settings["max_centre_atoms"], args.threads)
    result = pretrain_run(config, examples, vocab, args.out, args.init_checkpoint, args.threads)
    final = result["history"][-1]
    logger.info("pre-training done: loss %s, recon_acc %s, rci_auc %s", final["loss"], final["recon_acc"], final["rci_auc"])
    return 0


def _finetune_output(args, config, result, kind):
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    report = dict(result.report, **config.stamp())
    report["checkpoint"] = args.checkpoint
    write_json(out / "report.json", report)
    metadata = dict(config.stamp(), kind=kind, encoder=result.encoder.to_json(), source_checkpoint=args.checkpoint)
    nx.save_checkpoint(result.store, out / "model.json", metadata)
    return 0


def _splits(config, rows, test_rows, task):
    rng = np.random.default_rng(config.seed)
    return make_splits(rows, task, FinetuneConfig(**config.section("finetune")), rng, test_rows)


def cmd_finetune_reg(args, config):
    rows = load_regression_csv(args.input)
    test_rows = load_regression_csv(args.test) if args.test else None
    result = finetune_regression(args.checkpoint, _splits(config, rows, test_rows, "regression"), config)
    return _finetune_output(args, config, result, "finetune-reg")


def cmd_finetune_pair(args, config):
    rows = load_pair_csv(args.input)
    test_rows = load_pair_csv(args.test) if args.test else None
    classes = args.num_classes or max(num_classes(rows), num_classes(test_rows or []))
    result = finetune_pair(args.checkpoint, _splits(config, rows, test_rows, "pair"), classes, config)
    return _finetune_output(args, config, result, "finetune-pair")


def cmd_finetune_rxn(args, config):
    rows = load_reaction_csv(args.input)
    test_rows = load_reaction_csv(args.test) if args.test else None
    classes = args.num_classes or max(num_classes(rows), num_classes(test_rows or []))
    result = finetune_reaction_type(args.checkpoint, _splits(config, rows, test_rows, "reaction"), classes, config)
    return _finetune_output(args, config, result, "finetune-rxn")


def _sample(examples, size, seed):
    if not size or size >= len(examples):
        return examples
    keep = np.sort(np.random.default_rng(seed).permutation(len(examples))[:size])
    return [examples[k] for k in keep]


def cmd_entropy(args, config):
    vocab = DataCache().vocabulary(args.vocab)
    examples = DataCache().examples(args.input, vocab, config.section("pretrain")["max_centre_atoms"], args.threads)
    examples = _sample(examples, args.sample, config.seed)
    models = []
    for path in (args.conditional, args.unconditional):
        store, model, metadata = load_pretrained(path)
        models.append((store, model, metadata, path))
    report = entropy_report(models[0], models[1], examples, vocab, args.base, args.threads)
    csv_path = Path(args.out).with_suffix(".csv")
    stamp = dict(config.stamp(), conditional=args.conditional, unconditional=args.unconditional)
    write_entropy_report(report, args.out, csv_path, stamp)
    logger.info("mean entropy P %.4f vs Q %.4f (%s)", report.mean_p or 0.0, report.mean_q or 0.0, report.base)
    return 0


def cmd_export_grid(args, config):
    vocab = DataCache().vocabulary(args.vocab)
    store, model, metadata = load_pretrained(args.checkpoint)
    vocab.check_compatible(metadata["vocab_size"], metadata.get("vocab_digest"))
    examples = DataCache().examples(args.input, vocab, config.section("pretrain")["max_centre_atoms"], args.threads)
    if not 0 <= args.example < len(examples):
        raise ValidationError(f"example {args.example} out of range; the corpus has {len(examples)} examples")
    sidecar = Path(args.out).with_suffix(".json")
    export_logits_grid(model, store, examples[args.example], vocab, args.atom, args.out, sidecar, config.stamp())
    logger.info("wrote %s and %s", args.out, sidecar)
    return 0


def cmd_report(args, config):
    if args.input.endswith(".csv"):
        render_histogram(args.input, args.out)
    else:
        render_metrics(args.input, args.out)
    return 0


class CliParser(argparse.ArgumentParser):
    """Usage errors are validation errors: exit code 1."""

    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(1, f"error: {message}\n")


def build_parser():
    parser = CliParser(prog="remo", description="Reaction-centre pre-training toolkit")
    parser.add_argument("--version", action="version", version=f"%(prog)s {TOOL_VERSION}")
    sub = parser.add_subparsers(dest="command", required=True)

    def command(name, handler, help_text, needs_in=True):
        p = sub.add_parser(name, help=help_text)
        if needs_in:
            p.add_argument("--in", dest="input", required=True)
        p.add_argument("--out", required=True)
        p.add_argument("--config")
        p.add_argument("--seed", type=int)
        p.add_argument("--threads", type=int)
        p.set_defaults(handler=handler)
        return p

    p = command("ingest", cmd_ingest, "parse, detect and extract pre-training examples")
    p.add_argument("--vocab")
    command("detect-centres", cmd_detect_centres, "write reaction centres as JSON lines")
    p = command("build-vocab", cmd_build_vocab, "build the reconstruction vocabulary")
    p.add_argument("--token-charge", action="store_true")
    p = command("stats", cmd_stats, "token distribution and top-k coverage")
    p.add_argument("--vocab")
    p.add_argument("--restrict", choices=("all", "centres"), default="all")
    p.add_argument("--top-k", type=int, default=20)
    p = command("pretrain", cmd_pretrain, "pre-train an encoder")
    p.add_argument("--vocab", required=True)
    p.add_argument("--objective", choices=("M", "I", "IM"))
    p.add_argument("--encoder", choices=("gin", "graphormer"))
    p.add_argument("--epochs", type=int)
    p.add_argument("--lr", type=float)
    p.add_argument("--batch-size", type=int)
    p.add_argument("--init-checkpoint")
    p.add_argument("--no-context", action="store_true")
    for name, handler, help_text in (
        ("finetune-reg", cmd_finetune_reg, "single-molecule regression"),
        ("finetune-pair", cmd_finetune_pair, "molecule-pair classification"),
        ("finetune-rxn", cmd_finetune_rxn, "reaction-type classification"),
    ):
        p = command(name, handler, help_text)
        p.add_argument("--test")
        p.add_argument("--checkpoint")
        p.add_argument("--encoder", choices=("gin", "graphormer"))
        p.add_argument("--epochs", type=int)
        p.add_argument("--lr", type=float)
        p.add_argument("--batch-size", type=int)
        p.add_argument("--freeze-encoder", action="store_true")
        if name != "finetune-reg":
            p.add_argument("--num-classes", type=int)
    p = command("entropy", cmd_entropy, "entropy of reconstructions with and without context")
    p.add_argument("--vocab", required=True)
    p.add_argument("--conditional", required=True)
    p.add_argument("--unconditional", required=True)
    p.add_argument("--base", choices=("2", "e"), default="2")
    p.add_argument("--sample", type=int)
    p = command("export-grid", cmd_export_grid, "square logits grid for one masked centre atom")
    p.add_argument("--vocab", required=True)
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--example", type=int, default=0)
    p.add_argument("--atom", type=int, required=True)
    command("report", cmd_report, "render metrics.jsonl or an entropy histogram CSV as HTML")
    return parser


def run(argv=None):
    """Parse ``argv``, run one command and return its exit code."""
    try:
        level = env_log_level()
    except RemoError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return exc.exit_code
    setup_logging(level)
    try:
        args = build_parser().parse_args(argv)
    except SystemExit as exc:
        return exc.code if isinstance(exc.code, int) else 1
    try:
        if args.threads is None:
            args.threads = env_threads()
        config = resolve_config(args)
        return args.handler(args, config)
    except FileNotFoundError as exc:
        logger.debug("missing file", exc_info=True)
        print(f"error: file not found: {exc.filename or exc}", file=sys.stderr)
        return 1
    except RemoError as exc:
        logger.debug("command failed", exc_info=True)
        print(f"error: {exc}", file=sys.stderr)
        return exc.exit_code
    except OSError as exc:
        logger.debug("i/o failure", exc_info=True)
        print(f"error: {exc}", file=sys.stderr)
        return 2
    except Exception as exc:
        logger.debug("unexpected failure", exc_info=True)
        print(f"error: {type(exc).__name__}: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(run())
