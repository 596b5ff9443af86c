"""Command-line interface.

Subcommands cover the full pipeline: corpus generation, vocabulary building,
training, indexing, search, inspection, evaluation, ablations, and the BM25
baseline. Every randomized command takes --seed.
"""

from __future__ import annotations

import argparse
import json
import sys
from pathlib import Path

import torch

from . import harness
from .corpus import (
    Query,
    Vocabulary,
    build_vocabulary,
    load_corpus,
    load_queries,
    load_tables,
    save_corpus,
    serialize_table,
)
from .encoder import EncoderConfig, checkpoint_hash, init_params, load_checkpoint, save_checkpoint
from .harness import AblationSpec, SyntheticSpec, evaluate, generate_synthetic, make_retriever
from .index import HybridIndex, bm25_search, build_index, vocabulary_hash
from .representation import PoolingConfig, SparseVector, query_repr, table_repr
from .training import TrainConfig, train


def _pooling_from_args(args) -> PoolingConfig:
    return PoolingConfig(
        within_field=args.within_field,
        across_field=args.across_field,
        k=args.gate_k,
    )


def _add_pooling_args(p):
    p.add_argument("--within-field", default="table_specific",
                   choices=("table_specific", "max", "mean"))
    p.add_argument("--across-field", default="mofe", choices=("mofe", "max", "mean"))
    p.add_argument("--gate-k", type=int, default=3)


def cmd_build_vocab(args):
    tables = load_tables(args.tables)
    items = list(tables.values())
    if args.queries:
        items.extend(load_queries(args.queries).values())
    vocab = build_vocabulary(items, min_count=args.min_count)
    vocab.save(args.out)
    print(f"vocabulary of {vocab.size} tokens written to {args.out}")


def cmd_gen_synth(args):
    spec = SyntheticSpec(
        n_tables=args.n_tables,
        n_cell_queries=args.n_cell_queries,
        n_title_queries=args.n_title_queries,
        seed=args.seed,
    )
    tables, queries, judgments = generate_synthetic(spec)
    out = Path(args.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    save_corpus(
        tables, queries, judgments,
        out / "tables.jsonl", out / "queries.jsonl", out / "judgments.jsonl",
    )
    print(f"wrote {len(tables)} tables, {len(queries)} queries to {out}")


def _load_train_config(args) -> TrainConfig:
    if args.config:
        cfg = TrainConfig.from_dict(json.loads(Path(args.config).read_text()))
    else:
        cfg = TrainConfig()
    overrides = {}
    for name in ("batch_size", "learning_rate", "epochs", "lambda_q", "lambda_t", "seed"):
        value = getattr(args, name, None)
        if value is not None:
            overrides[name] = value
    if overrides:
        d = cfg.to_dict()
        d.update(overrides)
        cfg = TrainConfig.from_dict(d)
    return cfg


def cmd_train(args):
    tables, queries, judgments = load_corpus(args.tables, args.queries, args.judgments)
    vocab = Vocabulary.load(args.vocab)
    cfg = _load_train_config(args)
    enc_cfg = EncoderConfig(
        vocab_size=vocab.size,
        hidden_dim=args.hidden_dim,
        num_layers=args.layers,
        num_heads=args.heads,
        seed=cfg.seed,
    )
    model = init_params(enc_cfg)
    train(
        tables, queries, judgments, model, cfg, vocab,
        curve_path=args.curve,
        checkpoint_path=args.out,
        log=lambda msg: print(msg, file=sys.stderr),
    )
    save_checkpoint(model, args.out)
    print(f"checkpoint written to {args.out}")


def cmd_index(args):
    tables = load_tables(args.tables)
    vocab = Vocabulary.load(args.vocab)
    model = load_checkpoint(args.params)
    pooling = _pooling_from_args(args)
    index = build_index(
        tables, model, vocab, pooling,
        max_len=args.max_len,
        params_hash=checkpoint_hash(args.params),
    )
    index.save(args.out_dir)
    print(f"indexed {index.doc_count} tables into {args.out_dir}")


def _load_index_model_vocab(args) -> tuple[HybridIndex, "object", Vocabulary]:
    vocab = Vocabulary.load(args.vocab)
    model = load_checkpoint(args.params)
    index = HybridIndex.load(
        args.index_dir,
        expected_vocab_hash=vocabulary_hash(vocab),
        expected_params_hash=checkpoint_hash(args.params),
    )
    return index, model, vocab


def cmd_search(args):
    index, model, vocab = _load_index_model_vocab(args)
    query = Query(id="cli", text=args.query)
    with torch.no_grad():
        q_dense, q_sparse = query_repr(query, vocab, model)
    results = index.search_hybrid(
        q_dense.numpy(), SparseVector.from_dense(q_sparse), args.top_k
    )
    for r in results:
        print(f"{r.rank:3d}  {r.table_id}  s={r.s:.4f}  s_sem={r.s_sem:.4f}  s_lex={r.s_lex:.4f}")


def cmd_inspect(args):
    vocab = Vocabulary.load(args.vocab)
    model = load_checkpoint(args.params)
    if args.query is None and not (args.tables and args.table_id):
        raise SystemExit("inspect needs --query, or --tables with --table-id")
    with torch.no_grad():
        if args.query is not None:
            _, sparse = query_repr(Query(id="cli", text=args.query), vocab, model)
        else:
            tables = load_tables(args.tables)
            if args.table_id not in tables:
                raise SystemExit(f"table {args.table_id!r} not found in {args.tables}")
            ser = serialize_table(tables[args.table_id], vocab, args.max_len)
            _, sparse, _ = table_repr(ser, model)
    for line in SparseVector.from_dense(sparse).dump_lines(vocab):
        print(line)


def cmd_eval(args):
    index, model, vocab = _load_index_model_vocab(args)
    tables = load_tables(args.tables)
    queries = load_queries(args.queries)
    from .corpus import load_judgments

    judgments = load_judgments(args.judgments, tables, queries)
    retrieve = make_retriever(index, model, vocab, mode=args.mode)
    report = evaluate(retrieve, queries, judgments, config={"mode": args.mode})
    if args.json_out:
        Path(args.json_out).write_text(report.to_json())
    print(report.to_text())


def cmd_ablate(args):
    tables, queries, judgments = load_corpus(args.tables, args.queries, args.judgments)
    vocab = Vocabulary.load(args.vocab)
    cfg = _load_train_config(args)
    spec_rows = json.loads(Path(args.spec).read_text())
    configs = tuple(
        (row["label"], PoolingConfig.from_dict(row.get("pooling", {})))
        for row in spec_rows
    )
    enc_cfg = EncoderConfig(vocab_size=vocab.size, hidden_dim=args.hidden_dim,
                            num_layers=args.layers, num_heads=args.heads, seed=cfg.seed)
    rows = harness.run_ablation(
        AblationSpec(configs=configs, train_config=cfg),
        tables, queries, judgments, vocab, enc_cfg,
        log=lambda msg: print(msg, file=sys.stderr),
    )
    if args.json_out:
        Path(args.json_out).write_text(json.dumps(rows, indent=2))
    print(harness.ablation_table(rows))


def cmd_bm25(args):
    tables = load_tables(args.tables)
    results = bm25_search(args.query, tables, top_k=args.top_k, k1=args.k1, b=args.b)
    if not results:
        print("(no matching tables)")
    for rank, (tid, s) in enumerate(results, start=1):
        print(f"{rank:3d}  {tid}  score={s:.4f}")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="tabret", description=__doc__)
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("build-vocab", help="build a word-level vocabulary")
    p.add_argument("--tables", required=True)
    p.add_argument("--queries")
    p.add_argument("--min-count", type=int, default=1)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_build_vocab)

    p = sub.add_parser("gen-synth", help="generate a synthetic corpus")
    p.add_argument("--out-dir", required=True)
    p.add_argument("--n-tables", type=int, default=200)
    p.add_argument("--n-cell-queries", type=int, default=50)
    p.add_argument("--n-title-queries", type=int, default=50)
    p.add_argument("--seed", type=int, default=7)
    p.set_defaults(func=cmd_gen_synth)

    p = sub.add_parser("train", help="train the retriever")
    p.add_argument("--tables", required=True)
    p.add_argument("--queries", required=True)
    p.add_argument("--judgments", required=True)
    p.add_argument("--vocab", required=True)
    p.add_argument("--config", help="JSON training config file")
    p.add_argument("--out", required=True, help="checkpoint path (.npz)")
    p.add_argument("--curve", help="loss-curve CSV path")
    p.add_argument("--batch-size", dest="batch_size", type=int)
    p.add_argument("--learning-rate", dest="learning_rate", type=float)
    p.add_argument("--epochs", type=int)
    p.add_argument("--lambda-q", dest="lambda_q", type=float)
    p.add_argument("--lambda-t", dest="lambda_t", type=float)
    p.add_argument("--seed", type=int)
    p.add_argument("--hidden-dim", type=int, default=64)
    p.add_argument("--layers", type=int, default=2)
    p.add_argument("--heads", type=int, default=4)
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("index", help="build the hybrid index")
    p.add_argument("--tables", required=True)
    p.add_argument("--vocab", required=True)
    p.add_argument("--params", required=True)
    p.add_argument("--out-dir", required=True)
    p.add_argument("--max-len", type=int, default=256)
    _add_pooling_args(p)
    p.set_defaults(func=cmd_index)

    p = sub.add_parser("search", help="search the index with one query")
    p.add_argument("--index-dir", required=True)
    p.add_argument("--vocab", required=True)
    p.add_argument("--params", required=True)
    p.add_argument("--query", required=True)
    p.add_argument("--top-k", type=int, default=10)
    p.set_defaults(func=cmd_search)

    p = sub.add_parser("inspect", help="dump a sparse vector (token<TAB>weight)")
    p.add_argument("--vocab", required=True)
    p.add_argument("--params", required=True)
    p.add_argument("--query", help="inspect a query's sparse vector")
    p.add_argument("--tables", help="tables file (with --table-id)")
    p.add_argument("--table-id", help="inspect a table's sparse vector")
    p.add_argument("--max-len", type=int, default=256)
    p.set_defaults(func=cmd_inspect)

    p = sub.add_parser("eval", help="evaluate retrieval quality")
    p.add_argument("--index-dir", required=True)
    p.add_argument("--vocab", required=True)
    p.add_argument("--params", required=True)
    p.add_argument("--tables", required=True)
    p.add_argument("--queries", required=True)
    p.add_argument("--judgments", required=True)
    p.add_argument("--mode", default="hybrid", choices=("hybrid", "dense", "sparse"))
    p.add_argument("--json-out")
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("ablate", help="train/evaluate pooling variants")
    p.add_argument("--tables", required=True)
    p.add_argument("--queries", required=True)
    p.add_argument("--judgments", required=True)
    p.add_argument("--vocab", required=True)
    p.add_argument("--spec", required=True, help="JSON list of {label, pooling}")
    p.add_argument("--config", help="JSON training config file")
    p.add_argument("--seed", type=int)
    p.add_argument("--hidden-dim", type=int, default=64)
    p.add_argument("--layers", type=int, default=2)
    p.add_argument("--heads", type=int, default=4)
    p.add_argument("--json-out")
    p.set_defaults(func=cmd_ablate)

    p = sub.add_parser("bm25", help="BM25 baseline search")
    p.add_argument("--tables", required=True)
    p.add_argument("--query", required=True)
    p.add_argument("--top-k", type=int, default=10)
    p.add_argument("--k1", type=float, default=0.9)
    p.add_argument("--b", type=float, default=0.4)
    p.set_defaults(func=cmd_bm25)

    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    args.func(args)
    return 0


if __name__ == "__main__":
    sys.exit(main())
