"""Evaluation metrics, ablation runner, and the synthetic corpus generator.

Metrics follow trec-style binary-relevance conventions: Recall@k is the
fraction of a query's relevant tables in the top k, NDCG@k uses gain 1 and
1/log2(rank+1) discounts normalized by the ideal ranking. Aggregation is a
macro-average over judged queries.
"""

from __future__ import annotations

import json
import math
import random
from dataclasses import dataclass, field
from typing import Callable, Optional, Sequence

import torch

from .corpus import Judgments, Query, Table, Vocabulary
from .encoder import TableEncoder, init_params
from .index import HybridIndex, build_index
from .representation import PoolingConfig, SparseVector, query_repr
from .training import TrainConfig, train

RECALL_CUTOFFS = (1, 10, 50)
NDCG_CUTOFFS = (5, 10)


def recall_at_k(ranked_ids: Sequence[str], relevant: set[str], k: int) -> float:
    """|top-k intersect relevant| / |relevant|."""
    if k < 1:
        raise ValueError("k must be >= 1")
    if not relevant:
        raise ValueError("relevant set must be non-empty")
    hits = sum(1 for tid in ranked_ids[:k] if tid in relevant)
    return hits / len(relevant)


def ndcg_at_k(ranked_ids: Sequence[str], relevant: set[str], k: int) -> float:
    """Binary-gain NDCG@k normalized by the ideal over min(k, |relevant|)."""
    if k < 1:
        raise ValueError("k must be >= 1")
    if not relevant:
        raise ValueError("relevant set must be non-empty")
    dcg = sum(
        1.0 / math.log2(rank + 1)
        for rank, tid in enumerate(ranked_ids[:k], start=1)
        if tid in relevant
    )
    ideal = sum(1.0 / math.log2(rank + 1) for rank in range(1, min(k, len(relevant)) + 1))
    return dcg / ideal


@dataclass
class EvalReport:
    metrics: dict[str, float]  # aggregates in [0, 1]
    per_query: dict[str, dict[str, float]]
    skipped: list[str]  # queries without judgments
    config: dict = field(default_factory=dict)

    def to_json(self) -> str:
        return json.dumps(
            {
                "metrics": self.metrics,
                "per_query": self.per_query,
                "skipped": self.skipped,
                "config": self.config,
            },
            indent=2,
            sort_keys=True,
        )

    def to_text(self) -> str:
        """Aligned text table with values scaled x100 (leaderboard convention)."""
        names = list(self.metrics)
        width = max(len(n) for n in names) + 2
        lines = [f"{n:<{width}}{100 * self.metrics[n]:6.2f}" for n in names]
        lines.append(f"{'queries':<{width}}{len(self.per_query):6d}")
        lines.append(f"{'skipped':<{width}}{len(self.skipped):6d}")
        return "\n".join(lines)


def metric_names() -> list[str]:
    return [f"ndcg@{k}" for k in NDCG_CUTOFFS] + [f"recall@{k}" for k in RECALL_CUTOFFS]


def evaluate(
    retrieve: Callable[[Query], list[str]],
    queries: dict[str, Query],
    judgments: Judgments,
    retrieve_depth: int = 50,
    config: Optional[dict] = None,
) -> EvalReport:
    """Run retrieval for every judged query and macro-average the metrics.

    ``retrieve`` returns a ranked id list (at least ``retrieve_depth`` deep
    where the corpus allows). Unjudged queries are skipped and counted.
    """
    per_query: dict[str, dict[str, float]] = {}
    skipped: list[str] = []
    for qid in sorted(queries):
        relevant = judgments.get(qid)
        if not relevant:
            skipped.append(qid)
            continue
        ranked = retrieve(queries[qid])[:retrieve_depth]
        row = {f"ndcg@{k}": ndcg_at_k(ranked, relevant, k) for k in NDCG_CUTOFFS}
        row.update({f"recall@{k}": recall_at_k(ranked, relevant, k) for k in RECALL_CUTOFFS})
        per_query[qid] = row
    if not per_query:
        raise ValueError("no judged queries to evaluate")
    metrics = {
        name: sum(row[name] for row in per_query.values()) / len(per_query)
        for name in metric_names()
    }
    return EvalReport(metrics=metrics, per_query=per_query, skipped=skipped, config=config or {})


def make_retriever(
    index: HybridIndex,
    model: TableEncoder,
    vocab: Vocabulary,
    mode: str = "hybrid",
    depth: int = 50,
) -> Callable[[Query], list[str]]:
    """Ranked-id retrieval function over a built index.

    mode selects the scoring path: "hybrid" (summed), "dense", or "sparse".
    """
    if mode not in ("hybrid", "dense", "sparse"):
        raise ValueError(f"unknown retrieval mode {mode!r}")

    def retrieve(query: Query) -> list[str]:
        with torch.no_grad():
            q_dense, q_sparse = query_repr(query, vocab, model)
        qs = SparseVector.from_dense(q_sparse)
        if mode == "dense":
            return [tid for tid, _ in index.search_dense(q_dense.numpy(), depth)]
        if mode == "sparse":
            return [tid for tid, _ in index.search_sparse(qs, depth)]
        return [r.table_id for r in index.search_hybrid(q_dense.numpy(), qs, depth)]

    return retrieve


# --------------------------------------------------------------------------
# Ablations
# --------------------------------------------------------------------------


@dataclass(frozen=True)
class AblationSpec:
    configs: tuple[tuple[str, PoolingConfig], ...]  # (label, pooling config)
    train_config: TrainConfig


def run_ablation(
    spec: AblationSpec,
    tables: dict[str, Table],
    queries: dict[str, Query],
    judgments: Judgments,
    vocab: Vocabulary,
    encoder_config,
    log: Optional[Callable[[str], None]] = None,
) -> list[dict]:
    """Train and evaluate one variant per pooling config, same seed and data
    order, mirroring the pooling/aggregation and field-masking comparisons.

    Returns one row per config: {"label", "pooling", "metrics"} or
    {"label", "error"} for variants that fail to train.
    """
    rows = []
    for label, pooling in spec.configs:
        try:
            cfg = TrainConfig(
                batch_size=spec.train_config.batch_size,
                learning_rate=spec.train_config.learning_rate,
                epochs=spec.train_config.epochs,
                lambda_q=spec.train_config.lambda_q,
                lambda_t=spec.train_config.lambda_t,
                dropout=spec.train_config.dropout,
                pooling=pooling,
                seed=spec.train_config.seed,
                max_len=spec.train_config.max_len,
            )
            model = init_params(encoder_config)
            train(tables, queries, judgments, model, cfg, vocab, log=log)
            index = build_index(tables, model, vocab, pooling, max_len=cfg.max_len)
            retrieve = make_retriever(index, model, vocab, mode="hybrid")
            report = evaluate(retrieve, queries, judgments, config=pooling.to_dict())
            rows.append({"label": label, "pooling": pooling.to_dict(), "metrics": report.metrics})
            if log:
                log(f"ablation {label}: " + ", ".join(
                    f"{k}={100 * v:.2f}" for k, v in report.metrics.items()))
        except Exception as e:  # one failing config aborts only its row
            rows.append({"label": label, "error": str(e)})
            if log:
                log(f"ablation {label}: FAILED ({e})")
    return rows


def ablation_table(rows: list[dict]) -> str:
    names = metric_names()
    width = max((len(r["label"]) for r in rows), default=5) + 2
    header = f"{'config':<{width}}" + "".join(f"{n:>10}" for n in names)
    lines = [header]
    for r in rows:
        if "error" in r:
            lines.append(f"{r['label']:<{width}}ERROR: {r['error']}")
        else:
            lines.append(
                f"{r['label']:<{width}}"
                + "".join(f"{100 * r['metrics'][n]:10.2f}" for n in names)
            )
    return "\n".join(lines)


# --------------------------------------------------------------------------
# Synthetic corpus
# --------------------------------------------------------------------------


@dataclass(frozen=True)
class SyntheticSpec:
    """Desk-scale corpus with two query families.

    Cell-lookup queries copy a planted, corpus-unique cell value plus its
    column header, so they are answerable only through body tokens.
    Title-paraphrase queries replace every title word with a synonym that
    never occurs in any table, so they require semantic (or learned
    expansion) matching.
    """

    n_tables: int = 200
    n_cell_queries: int = 50
    n_title_queries: int = 50
    rows: tuple[int, int] = (2, 4)
    cols: tuple[int, int] = (2, 3)
    vocab_size: int = 120  # filler-word pool
    n_title_concepts: int = 40
    n_header_words: int = 20
    seed: int = 7

    def __post_init__(self):
        if self.n_tables < 1:
            raise ValueError("n_tables must be >= 1")
        pairs = self.n_title_concepts * (self.n_title_concepts - 1) // 2
        if pairs < self.n_tables:
            raise ValueError(
                "vocabulary too small to guarantee unique titles: "
                f"{self.n_title_concepts} concepts give {pairs} pairs < {self.n_tables} tables"
            )
        if self.n_cell_queries > self.n_tables or self.n_title_queries > self.n_tables:
            raise ValueError("cannot target more tables than exist")


def generate_synthetic(
    spec: SyntheticSpec,
) -> tuple[dict[str, Table], dict[str, Query], Judgments]:
    """Deterministic synthetic corpus exercising both matching paths."""
    rng = random.Random(spec.seed)
    fillers = [f"w{i:03d}" for i in range(spec.vocab_size)]
    headers_pool = [f"hdr{i:02d}" for i in range(spec.n_header_words)]
    concepts = [f"topic{i:02d}" for i in range(spec.n_title_concepts)]
    synonym = {c: f"syn{i:02d}" for i, c in enumerate(concepts)}

    all_pairs = [
        (a, b) for i, a in enumerate(concepts) for b in concepts[i + 1 :]
    ]
    title_pairs = rng.sample(all_pairs, spec.n_tables)

    tables: dict[str, Table] = {}
    for i in range(spec.n_tables):
        tid = f"tbl{i:04d}"
        a, b = title_pairs[i]
        n_rows = rng.randint(*spec.rows)
        n_cols = rng.randint(*spec.cols)
        headers = rng.sample(headers_pool, n_cols)
        cells = [[rng.choice(fillers) for _ in range(n_cols)] for _ in range(n_rows)]
        tables[tid] = Table(
            id=tid,
            title=f"{a} {b}",
            headers=tuple(headers),
            cells=tuple(tuple(row) for row in cells),
        )

    queries: dict[str, Query] = {}
    judgments: Judgments = {}
    table_ids = sorted(tables)

    cell_targets = rng.sample(table_ids, spec.n_cell_queries)
    for qi, tid in enumerate(cell_targets):
        t = tables[tid]
        r = rng.randrange(t.n_rows)
        c = rng.randrange(t.n_cols)
        unique = f"val{qi:04d}x"  # never in the filler pool: unique by construction
        cells = [list(row) for row in t.cells]
        cells[r][c] = unique
        tables[tid] = Table(
            id=tid, title=t.title, headers=t.headers,
            cells=tuple(tuple(row) for row in cells),
        )
        qid = f"qcell{qi:04d}"
        queries[qid] = Query(id=qid, text=f"{t.headers[c]} {unique}")
        judgments[qid] = {tid}

    title_targets = rng.sample(table_ids, spec.n_title_queries)
    for qi, tid in enumerate(title_targets):
        a, b = tables[tid].title.split()
        qid = f"qtitle{qi:04d}"
        queries[qid] = Query(id=qid, text=f"{synonym[a]} {synonym[b]}")
        judgments[qid] = {tid}

    return tables, queries, judgments
