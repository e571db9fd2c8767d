"""Command-line pipelines: n-gram extraction, training, evaluation, embedding.

Every command resolves its settings the same way: built-in defaults,
then a flat ``key = value`` config file, then command-line flags (flags
win).  Unknown config keys are rejected, the fully resolved config is
echoed to stderr, and all randomness flows from the single seed — so a
rerun with the same config and seed reproduces artifacts byte for byte.
"""

from __future__ import annotations

import argparse
import sys
import warnings
from contextlib import nullcontext
from dataclasses import dataclass
from pathlib import Path
from typing import Any, Callable

from .corpus import (
    CorpusError,
    Vocabulary,
    build_vocabulary,
    encode,
    read_corpus,
    tokenize,
)
from .encoder import (
    CheckpointError,
    ConfigError,
    EncoderConfig,
    Model,
    save_checkpoint,
)
from .evaluation import (
    ModelEmbedder,
    RetrievalSet,
    WordVectorEmbedder,
    bm25_rank,
    embed_corpus,
    evaluate_analogy,
    read_analogy_file,
    read_retrieval_corpus,
    read_retrieval_queries,
    retrieve_topk,
    topk_accuracy,
    topk_accuracy_by_group,
)
from .ngram import (
    NgramError,
    build_table,
    count_ngrams,
    inject_entities,
    length_histogram,
    load_table,
    prune_table,
    read_entity_file,
    save_table,
)
from .training import Trainer, TrainingConfig


class CliError(RuntimeError):
    """A user-facing command failure (bad input, bad config)."""


# ---------------------------------------------------------------------------
# config resolution


def _int_or_none(text: str):
    return None if text.strip().lower() == "none" else int(text)


@dataclass(frozen=True)
class Setting:
    convert: Callable[[str], Any]
    default: Any = None
    required: bool = False


COMMAND_SETTINGS: dict[str, dict[str, Setting]] = {
    "extract-ngrams": {
        "corpus": Setting(str, required=True),
        "n_max": Setting(int, 6),
        "pmi_threshold": Setting(float, 0.0),
        "per_doc_top_k": Setting(_int_or_none, 3000),
        "min_count": Setting(int, 5),
        "max_size": Setting(int, 50_000),
        "entities": Setting(str, None),
        "vocab_out": Setting(str, None),
        "out": Setting(str, required=True),
        "seed": Setting(int, 0),
    },
    "train": {
        "corpus": Setting(str, required=True),
        "table": Setting(str, required=True),
        "vocab": Setting(str, required=True),
        "d_model": Setting(int, 64),
        "n_heads": Setting(int, 2),
        "n_layers": Setting(int, 2),
        "d_ff": Setting(int, 128),
        "max_len": Setting(int, 128),
        "dropout": Setting(float, 0.1),
        "total_steps": Setting(int, required=True),
        "batch_size": Setting(int, 64),
        "peak_lr": Setting(float, 5e-5),
        "warmup_fraction": Setting(float, 0.1),
        "mask_rate": Setting(float, 0.15),
        "pooling_for_misad": Setting(str, "cls"),
        "misad_weight": Setting(float, 1.0),
        "mlm_weight": Setting(float, 1.0),
        "metrics_out": Setting(str, None),
        "out": Setting(str, required=True),
        "seed": Setting(int, 0),
    },
    "eval-analogy": {
        "dataset": Setting(str, required=True),
        "checkpoint": Setting(str, None),
        "vocab": Setting(str, None),
        "vectors": Setting(str, None),
        "pooling": Setting(str, "mean"),
        "out": Setting(str, None),
        "seed": Setting(int, 0),
    },
    "eval-retrieval": {
        "backend": Setting(str, required=True),
        "corpus": Setting(str, required=True),
        "queries": Setting(str, required=True),
        "checkpoint": Setting(str, None),
        "vocab": Setting(str, None),
        "vectors": Setting(str, None),
        "pooling": Setting(str, "mean"),
        "ks": Setting(str, "1,5,10"),
        "group_by_length": Setting(_int_or_none, None),
        "out": Setting(str, None),
        "seed": Setting(int, 0),
    },
    "embed": {
        "checkpoint": Setting(str, required=True),
        "vocab": Setting(str, required=True),
        "texts": Setting(str, required=True),
        "pooling": Setting(str, "mean"),
        "out": Setting(str, None),
        "seed": Setting(int, 0),
    },
}

VALID_BACKENDS = ("model", "vectors", "bm25")


def parse_config_file(path: str | Path) -> dict[str, str]:
    """Flat ``key = value`` lines; blank lines and # comments allowed."""
    settings: dict[str, str] = {}
    with open(path, encoding="utf-8") as fh:
        for lineno, raw in enumerate(fh, start=1):
            line = raw.strip()
            if not line or line.startswith("#"):
                continue
            if "=" not in line:
                raise CliError(f"{path}:{lineno}: expected 'key = value', got {raw!r}")
            key, _, value = line.partition("=")
            key = key.strip()
            if not key:
                raise CliError(f"{path}:{lineno}: empty key")
            if key in settings:
                raise CliError(f"{path}:{lineno}: duplicate key {key!r}")
            settings[key] = value.strip()
    return settings


def resolve_config(command: str, args: argparse.Namespace) -> dict[str, Any]:
    """Merge defaults <- config file <- flags; reject unknown keys."""
    known = COMMAND_SETTINGS[command]
    resolved = {key: s.default for key, s in known.items()}
    if getattr(args, "config", None):
        file_settings = parse_config_file(args.config)
        unknown = sorted(set(file_settings) - set(known))
        if unknown:
            raise CliError(
                f"unknown config key(s) for {command}: {', '.join(unknown)}"
            )
        for key, text in file_settings.items():
            try:
                resolved[key] = known[key].convert(text)
            except ValueError as exc:
                raise CliError(f"config key {key!r}: bad value {text!r} ({exc})")
    for key in known:
        flag_value = getattr(args, key, None)
        if flag_value is not None:
            resolved[key] = flag_value
    missing = sorted(k for k, s in known.items() if s.required and resolved[k] is None)
    if missing:
        raise CliError(f"missing required setting(s) for {command}: {', '.join(missing)}")
    echo = "\n".join(f"{k} = {resolved[k]}" for k in sorted(resolved))
    print(f"# resolved config ({command})\n{echo}", file=sys.stderr)
    return resolved


def _thread_limit_context(n: int | None):
    if n is None:
        return nullcontext()
    try:
        from threadpoolctl import threadpool_limits
    except ImportError:
        warnings.warn("--threads has no effect: threadpoolctl is not installed")
        return nullcontext()
    return threadpool_limits(limits=n)


def _write_or_print(text: str, out: str | None) -> None:
    if out is None:
        sys.stdout.write(text)
    else:
        Path(out).write_text(text, encoding="utf-8")


# ---------------------------------------------------------------------------
# commands


def _load_encoded_corpus(corpus_path: str, vocab: Vocabulary):
    docs = list(read_corpus(corpus_path))
    return [encode(d.tokens, vocab) for d in docs]


def cmd_extract_ngrams(args: argparse.Namespace) -> int:
    cfg = resolve_config("extract-ngrams", args)
    docs = list(read_corpus(cfg["corpus"]))
    vocab = build_vocabulary(docs, min_count=cfg["min_count"], max_size=cfg["max_size"])
    encoded = [encode(d.tokens, vocab) for d in docs]
    counts = count_ngrams(encoded, n_max=cfg["n_max"])
    table = build_table(counts)
    if cfg["entities"]:
        entities = read_entity_file(cfg["entities"], vocab)
        inject_entities(table, entities)
    table = prune_table(
        table, pmi_threshold=cfg["pmi_threshold"], per_doc_top_k=cfg["per_doc_top_k"]
    )
    vocab_out = cfg["vocab_out"] or f"{cfg['out']}.vocab"
    vocab.save(vocab_out)
    save_table(table, vocab, cfg["out"])
    hist = length_histogram(table, top_n=2000)
    hist_text = " ".join(f"{n}:{c}" for n, c in sorted(hist.items()))
    print(f"ngrams = {len(table)}")
    print(f"top-2000 length histogram = {hist_text or '(empty)'}")
    print(f"table written to {cfg['out']}; vocabulary to {vocab_out}")
    return 0


def cmd_train(args: argparse.Namespace) -> int:
    cfg = resolve_config("train", args)
    vocab = Vocabulary.load(cfg["vocab"])
    sequences = _load_encoded_corpus(cfg["corpus"], vocab)
    table = load_table(cfg["table"], vocab, n_max=6)
    enc_config = EncoderConfig(
        vocab_size=len(vocab),
        d_model=cfg["d_model"],
        n_heads=cfg["n_heads"],
        n_layers=cfg["n_layers"],
        d_ff=cfg["d_ff"],
        max_len=cfg["max_len"],
        dropout=cfg["dropout"],
        seed=cfg["seed"],
    )
    model = Model.init(enc_config)
    train_config = TrainingConfig(
        total_steps=cfg["total_steps"],
        batch_size=cfg["batch_size"],
        peak_lr=cfg["peak_lr"],
        warmup_fraction=cfg["warmup_fraction"],
        mask_rate=cfg["mask_rate"],
        pooling_for_misad=cfg["pooling_for_misad"],
        misad_weight=cfg["misad_weight"],
        mlm_weight=cfg["mlm_weight"],
        seed=cfg["seed"],
    )
    trainer = Trainer(model, table, sequences, train_config)
    metrics_path = cfg["metrics_out"] or f"{cfg['out']}.metrics.tsv"
    rows = trainer.run(metrics_path=metrics_path)
    save_checkpoint(model.params, enc_config, cfg["out"])
    first, last = rows[0], rows[-1]
    print(f"steps = {len(rows)}")
    print(f"l_total first = {first[3]:.9g}, last = {last[3]:.9g}")
    print(f"checkpoint written to {cfg['out']}; metrics to {metrics_path}")
    return 0


def _build_embedder(cfg: dict[str, Any]):
    if cfg.get("vectors"):
        return WordVectorEmbedder.from_file(cfg["vectors"])
    if cfg.get("checkpoint"):
        if not cfg.get("vocab"):
            raise CliError("a checkpoint embedder needs a vocab file (--vocab)")
        vocab = Vocabulary.load(cfg["vocab"])
        return ModelEmbedder.from_checkpoint(
            cfg["checkpoint"], vocab, pooling=cfg.get("pooling", "mean")
        )
    raise CliError("no embedder source: pass --checkpoint (with --vocab) or --vectors")


def cmd_eval_analogy(args: argparse.Namespace) -> int:
    cfg = resolve_config("eval-analogy", args)
    questions = read_analogy_file(cfg["dataset"])
    embedder = _build_embedder(cfg)
    report = evaluate_analogy(questions, embedder)
    lines = ["category\tcorrect\ttotal\taccuracy"]
    for name in sorted(report.per_category):
        res = report.per_category[name]
        lines.append(f"{name}\t{res.correct}\t{res.total}\t{res.accuracy:.4f}")
    for label, side in (("sem", report.semantic), ("syn", report.syntactic)):
        if side is not None:
            lines.append(f"{label}\t{side.correct}\t{side.total}\t{side.accuracy:.4f}")
    if report.average is not None:
        lines.append(f"avg\t-\t-\t{report.average:.4f}")
    _write_or_print("\n".join(lines) + "\n", cfg["out"])
    return 0


def cmd_eval_retrieval(args: argparse.Namespace) -> int:
    cfg = resolve_config("eval-retrieval", args)
    backend = cfg["backend"]
    if backend not in VALID_BACKENDS:
        raise CliError(
            f"unknown backend {backend!r}; valid backends: {', '.join(VALID_BACKENDS)}"
        )
    corpus_rows = read_retrieval_corpus(cfg["corpus"])
    query_rows = read_retrieval_queries(cfg["queries"])
    retrieval = RetrievalSet(corpus=tuple(corpus_rows), queries=tuple(query_rows))
    ids = [i for i, _ in retrieval.corpus]
    texts = [t for _, t in retrieval.corpus]
    ks = sorted({int(k) for k in cfg["ks"].split(",") if k.strip()})
    if not ks:
        raise CliError("ks must name at least one cutoff")
    depth = min(max(ks), len(ids))
    if backend == "bm25":
        corpus_tokens = [tokenize(t) for t in texts]
        rankings = [
            bm25_rank(tokenize(q), corpus_tokens, ids=ids)[:depth]
            for q, _ in retrieval.queries
        ]
    else:
        embedder = _build_embedder(cfg)
        matrix = embed_corpus(texts, embedder)
        rankings = [
            retrieve_topk(embedder(q), matrix, depth, ids=ids)
            for q, _ in retrieval.queries
        ]
    gold_sets = [g for _, g in retrieval.queries]
    acc = topk_accuracy(rankings, gold_sets, ks)
    lines = ["top_k\taccuracy"]
    for k in ks:
        lines.append(f"{k}\t{acc[k]:.4f}")
    if cfg["group_by_length"]:
        bucket = cfg["group_by_length"]
        groups = [f"len<={((len(tokenize(q)) - 1) // bucket + 1) * bucket}"
                  for q, _ in retrieval.queries]
        grouped = topk_accuracy_by_group(rankings, gold_sets, groups, ks)
        lines.append("group\ttop_k\taccuracy")
        for label in sorted(grouped):
            for k in ks:
                lines.append(f"{label}\t{k}\t{grouped[label][k]:.4f}")
    _write_or_print("\n".join(lines) + "\n", cfg["out"])
    return 0


def cmd_embed(args: argparse.Namespace) -> int:
    cfg = resolve_config("embed", args)
    vocab = Vocabulary.load(cfg["vocab"])
    embedder = ModelEmbedder.from_checkpoint(
        cfg["checkpoint"], vocab, pooling=cfg["pooling"]
    )
    with open(cfg["texts"], encoding="utf-8") as fh:
        texts = [line.rstrip("\n") for line in fh]
    matrix = embed_corpus(texts, embedder)
    lines = [" ".join(f"{x:.9g}" for x in row) for row in matrix]
    _write_or_print("\n".join(lines) + "\n", cfg["out"])
    return 0


# ---------------------------------------------------------------------------
# parser


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="ulrlab",
        description="PMI n-gram mining, compositional encoder training, and "
        "analogy/retrieval evaluation.",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    def add_shared(p: argparse.ArgumentParser):
        p.add_argument("--config", help="flat key = value settings file")
        p.add_argument("--seed", type=int, help="master random seed")
        p.add_argument("--threads", type=int, help="bound on BLAS threads")
        p.add_argument("--out", help="primary output path")

    p = sub.add_parser("extract-ngrams", help="mine a pruned PMI n-gram table")
    add_shared(p)
    p.add_argument("--corpus", help="input corpus, one document per line")
    p.add_argument("--n-max", dest="n_max", type=int, help="longest n-gram length")
    p.add_argument("--threshold", dest="pmi_threshold", type=float,
                   help="global PMI threshold (strictly greater-than)")
    p.add_argument("--top-k", dest="per_doc_top_k", type=_int_or_none,
                   help="per-document top-K cap, or 'none'")
    p.add_argument("--min-count", dest="min_count", type=int)
    p.add_argument("--max-size", dest="max_size", type=int)
    p.add_argument("--entities", help="privileged entity n-grams, one per line")
    p.add_argument("--vocab-out", dest="vocab_out", help="vocabulary output path")
    p.set_defaults(func=cmd_extract_ngrams)

    p = sub.add_parser("train", help="train the encoder with the joint objective")
    add_shared(p)
    p.add_argument("--corpus")
    p.add_argument("--table", help="n-gram table file")
    p.add_argument("--vocab", help="vocabulary file")
    p.add_argument("--total-steps", dest="total_steps", type=int)
    p.add_argument("--batch-size", dest="batch_size", type=int)
    p.add_argument("--d-model", dest="d_model", type=int)
    p.add_argument("--n-heads", dest="n_heads", type=int)
    p.add_argument("--n-layers", dest="n_layers", type=int)
    p.add_argument("--d-ff", dest="d_ff", type=int)
    p.add_argument("--max-len", dest="max_len", type=int)
    p.add_argument("--dropout", type=float)
    p.add_argument("--peak-lr", dest="peak_lr", type=float)
    p.add_argument("--warmup-fraction", dest="warmup_fraction", type=float)
    p.add_argument("--mask-rate", dest="mask_rate", type=float)
    p.add_argument("--pooling-for-misad", dest="pooling_for_misad",
                   choices=("cls", "mean", "max"))
    p.add_argument("--misad-weight", dest="misad_weight", type=float)
    p.add_argument("--mlm-weight", dest="mlm_weight", type=float)
    p.add_argument("--metrics-out", dest="metrics_out")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("eval-analogy", help="score analogy questions")
    add_shared(p)
    p.add_argument("--dataset", help="analogy TSV file")
    p.add_argument("--checkpoint")
    p.add_argument("--vocab")
    p.add_argument("--vectors", help="static word-vector file")
    p.add_argument("--pooling", choices=("cls", "mean", "max"))
    p.set_defaults(func=cmd_eval_analogy)

    p = sub.add_parser("eval-retrieval", help="Top-k paraphrase retrieval")
    add_shared(p)
    p.add_argument("--backend", help="model | vectors | bm25")
    p.add_argument("--corpus", help="retrieval corpus TSV (id, text)")
    p.add_argument("--queries", help="queries TSV (text, gold ids)")
    p.add_argument("--checkpoint")
    p.add_argument("--vocab")
    p.add_argument("--vectors")
    p.add_argument("--pooling", choices=("cls", "mean", "max"))
    p.add_argument("--ks", help="comma-separated cutoffs, default 1,5,10")
    p.add_argument("--group-by-length", dest="group_by_length", type=_int_or_none,
                   help="bucket queries by token count")
    p.set_defaults(func=cmd_eval_retrieval)

    p = sub.add_parser("embed", help="write one unit-norm vector per input line")
    add_shared(p)
    p.add_argument("--checkpoint")
    p.add_argument("--vocab")
    p.add_argument("--texts", help="input texts, one per line")
    p.add_argument("--pooling", choices=("cls", "mean", "max"))
    p.set_defaults(func=cmd_embed)

    return parser


def main(argv: list[str] | None = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        with _thread_limit_context(getattr(args, "threads", None)):
            return args.func(args)
    except (
        CliError,
        CorpusError,
        NgramError,
        ConfigError,
        CheckpointError,
        FloatingPointError,
        ValueError,
        OSError,
    ) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
