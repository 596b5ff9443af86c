"""Hybrid training: scoring, matching-score dropout, in-batch-negative loss,
sparsity (FLOPS) regularization, and the optimizer loop.

The relevance score of a (query, table) pair is the sum of a dense inner
product and a sparse inner product. During training one of three branches is
sampled per step and shared by the whole batch: semantic-only, lexical-only,
or the sum. The sparsity penalty is added only on the lexical-only branch.
Inference always uses the sum.
"""

from __future__ import annotations

import csv
import math
import random
from dataclasses import dataclass
from pathlib import Path
from typing import Callable, Optional, Sequence, Union

import torch

from .corpus import (
    Judgments,
    Query,
    SerializedInput,
    Table,
    Vocabulary,
    serialize_query,
    serialize_table,
)
from .encoder import TableEncoder, save_checkpoint
from .representation import (
    PoolingConfig,
    SparseVector,
    query_repr_from_hidden,
    table_repr_from_hidden,
)

BRANCHES = ("sem", "lex", "both")


@dataclass(frozen=True)
class ScoreTriple:
    s_sem: float
    s_lex: float

    @property
    def s(self) -> float:
        return self.s_sem + self.s_lex


@dataclass(frozen=True)
class DropoutPolicy:
    p_sem: float = 0.15
    p_lex: float = 0.15

    def __post_init__(self):
        if self.p_sem < 0 or self.p_lex < 0:
            raise ValueError("dropout probabilities must be non-negative")
        if self.p_sem + self.p_lex > 1.0:
            raise ValueError("p_sem + p_lex must not exceed 1")


@dataclass(frozen=True)
class TrainConfig:
    batch_size: int = 16
    learning_rate: float = 1e-3
    epochs: int = 50
    lambda_q: float = 1e-4
    lambda_t: float = 1e-4
    dropout: DropoutPolicy = DropoutPolicy()
    pooling: PoolingConfig = PoolingConfig()
    adam_betas: tuple[float, float] = (0.9, 0.999)
    adam_eps: float = 1e-8
    max_len: int = 256
    seed: int = 0

    def __post_init__(self):
        if self.batch_size < 2:
            raise ValueError("batch_size must be >= 2 (in-batch negatives)")
        if self.epochs < 1:
            raise ValueError("epochs must be >= 1")

    def to_dict(self) -> dict:
        return {
            "batch_size": self.batch_size,
            "learning_rate": self.learning_rate,
            "epochs": self.epochs,
            "lambda_q": self.lambda_q,
            "lambda_t": self.lambda_t,
            "p_sem": self.dropout.p_sem,
            "p_lex": self.dropout.p_lex,
            "pooling": self.pooling.to_dict(),
            "adam_betas": list(self.adam_betas),
            "adam_eps": self.adam_eps,
            "max_len": self.max_len,
            "seed": self.seed,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "TrainConfig":
        kwargs = dict(d)
        p_sem = kwargs.pop("p_sem", 0.15)
        p_lex = kwargs.pop("p_lex", 0.15)
        pooling = kwargs.pop("pooling", None)
        betas = kwargs.pop("adam_betas", (0.9, 0.999))
        return cls(
            dropout=DropoutPolicy(p_sem=p_sem, p_lex=p_lex),
            pooling=PoolingConfig.from_dict(pooling) if pooling else PoolingConfig(),
            adam_betas=tuple(betas),
            **kwargs,
        )


@dataclass
class LossBreakdown:
    rel: float
    flops_q: float
    flops_t: float
    total: float
    branch: str


def inner_product(a, b) -> float:
    """Inner product for dense sequences/tensors or SparseVector pairs."""
    if isinstance(a, SparseVector) and isinstance(b, SparseVector):
        return a.dot(b)
    ta = torch.as_tensor(a, dtype=torch.float64)
    tb = torch.as_tensor(b, dtype=torch.float64)
    if ta.shape != tb.shape:
        raise ValueError(f"dimension mismatch: {tuple(ta.shape)} vs {tuple(tb.shape)}")
    return float(ta @ tb)


def score(q_dense, q_sparse, t_dense, t_sparse) -> ScoreTriple:
    """Semantic + lexical matching scores for one query/table pair."""
    return ScoreTriple(
        s_sem=inner_product(q_dense, t_dense),
        s_lex=inner_product(q_sparse, t_sparse),
    )


def sample_branch(rng: random.Random, policy: DropoutPolicy) -> str:
    """One draw per training step, shared across the batch."""
    u = rng.random()
    if u < policy.p_sem:
        return "sem"
    if u < policy.p_sem + policy.p_lex:
        return "lex"
    return "both"


def relevance_loss(scores: torch.Tensor, pair_ids: Optional[Sequence[str]] = None) -> torch.Tensor:
    """In-batch-negative cross-entropy over a square score matrix.

    scores[i][j] is the relevance of query i against query j's positive table;
    the diagonal holds the positives. Computed with max-subtraction.
    """
    if scores.dim() != 2 or scores.shape[0] != scores.shape[1]:
        raise ValueError("score matrix must be square")
    if scores.shape[0] < 2:
        raise ValueError("in-batch negatives need batch size >= 2")
    if not torch.isfinite(scores).all():
        bad = torch.nonzero(~torch.isfinite(scores))[0].tolist()
        name = pair_ids[bad[0]] if pair_ids else f"row {bad[0]}"
        raise FloatingPointError(f"non-finite score for pair {name} (column {bad[1]})")
    shifted = scores - scores.max(dim=1, keepdim=True).values
    log_probs = shifted - shifted.exp().sum(dim=1, keepdim=True).log()
    return -log_probs.diagonal().mean()


def flops_penalty(batch: Union[torch.Tensor, Sequence[SparseVector]]) -> Union[torch.Tensor, float]:
    """Sum over vocabulary of the squared batch-mean weight.

    Accepts a (batch, vocab) tensor (differentiable) or a list of
    SparseVectors (returns a float).
    """
    if isinstance(batch, torch.Tensor):
        return (batch.mean(dim=0) ** 2).sum()
    if len(batch) == 0:
        raise ValueError("flops_penalty needs a non-empty batch")
    means: dict[int, float] = {}
    for vec in batch:
        for i, w in vec.weights.items():
            means[i] = means.get(i, 0.0) + w / len(batch)
    return sum(m * m for m in means.values())


@dataclass
class BatchRepresentations:
    q_dense: torch.Tensor  # (B, d)
    q_sparse: torch.Tensor  # (B, |V|)
    t_dense: torch.Tensor
    t_sparse: torch.Tensor
    pair_ids: list[str]


def encode_batch(
    pairs: Sequence[tuple[Query, SerializedInput]],
    model: TableEncoder,
    vocab: Vocabulary,
    pooling: PoolingConfig,
) -> BatchRepresentations:
    sequences = [serialize_query(q, vocab) for q, _ in pairs]
    sequences += [ser.token_ids for _, ser in pairs]
    hidden = model.encode_many(sequences)
    q_dense, q_sparse, t_dense, t_sparse, pair_ids = [], [], [], [], []
    for i, (query, ser) in enumerate(pairs):
        qd, ql = query_repr_from_hidden(hidden[i], model)
        td, tl, _ = table_repr_from_hidden(ser, hidden[len(pairs) + i], model, pooling)
        q_dense.append(qd)
        q_sparse.append(ql)
        t_dense.append(td)
        t_sparse.append(tl)
        pair_ids.append(f"{query.id}/{ser.table_id}")
    return BatchRepresentations(
        q_dense=torch.stack(q_dense),
        q_sparse=torch.stack(q_sparse),
        t_dense=torch.stack(t_dense),
        t_sparse=torch.stack(t_sparse),
        pair_ids=pair_ids,
    )


def score_matrix(reps: BatchRepresentations, branch: str) -> torch.Tensor:
    if branch == "sem":
        return reps.q_dense @ reps.t_dense.T
    if branch == "lex":
        return reps.q_sparse @ reps.t_sparse.T
    if branch == "both":
        return reps.q_dense @ reps.t_dense.T + reps.q_sparse @ reps.t_sparse.T
    raise ValueError(f"unknown branch {branch!r}")


def compute_loss(
    reps: BatchRepresentations, branch: str, cfg: TrainConfig
) -> tuple[torch.Tensor, LossBreakdown]:
    """Total objective: relevance loss, plus the sparsity terms on the lexical
    branch only."""
    rel = relevance_loss(score_matrix(reps, branch), reps.pair_ids)
    fq = flops_penalty(reps.q_sparse)
    ft = flops_penalty(reps.t_sparse)
    if branch == "lex":
        total = rel + cfg.lambda_q * fq + cfg.lambda_t * ft
    else:
        total = rel
    return total, LossBreakdown(
        rel=float(rel.detach()),
        flops_q=float(fq.detach()),
        flops_t=float(ft.detach()),
        total=float(total.detach()),
        branch=branch,
    )


def train_step(
    pairs: Sequence[tuple[Query, SerializedInput]],
    model: TableEncoder,
    optimizer: torch.optim.Optimizer,
    cfg: TrainConfig,
    branch: str,
    vocab: Vocabulary,
) -> LossBreakdown:
    reps = encode_batch(pairs, model, vocab, cfg.pooling)
    loss, breakdown = compute_loss(reps, branch, cfg)
    if not math.isfinite(breakdown.total):
        raise FloatingPointError(
            f"training diverged: loss={breakdown.total} branch={branch} "
            f"pairs={reps.pair_ids}"
        )
    optimizer.zero_grad()
    loss.backward()
    optimizer.step()
    return breakdown


def _make_batches(
    pair_list: list[tuple[Query, str]], batch_size: int, rng: random.Random
) -> list[list[tuple[Query, str]]]:
    """Shuffled batches with distinct table ids within each batch.

    A pair whose positive table already appears in the current batch is pushed
    to a later one so in-batch negatives stay well-defined.
    """
    pool = list(pair_list)
    rng.shuffle(pool)
    batches: list[list[tuple[Query, str]]] = []
    deferred: list[tuple[Query, str]] = []
    while pool or deferred:
        batch: list[tuple[Query, str]] = []
        seen: set[str] = set()
        rest: list[tuple[Query, str]] = []
        for item in deferred + pool:
            if len(batch) < batch_size and item[1] not in seen:
                batch.append(item)
                seen.add(item[1])
            else:
                rest.append(item)
        if len(batch) < 2:
            break  # remainder too small for in-batch negatives
        batches.append(batch)
        pool, deferred = rest, []
    return batches


def train(
    tables: dict[str, Table],
    queries: dict[str, Query],
    judgments: Judgments,
    model: TableEncoder,
    cfg: TrainConfig,
    vocab: Vocabulary,
    curve_path: Optional[Union[str, Path]] = None,
    checkpoint_path: Optional[Union[str, Path]] = None,
    log: Optional[Callable[[str], None]] = None,
) -> list[LossBreakdown]:
    """Epochs of shuffled in-batch-negative steps; returns the loss curve.

    One positive table is sampled per judged query per epoch. When
    checkpoint_path is given, the parameters are checkpointed whenever the
    epoch-mean loss improves.
    """
    judged = [qid for qid in queries if qid in judgments]
    if not judged:
        raise ValueError("no judged queries to train on")
    serialized = {tid: serialize_table(t, vocab, cfg.max_len) for tid, t in tables.items()}
    rng = random.Random(cfg.seed)
    optimizer = torch.optim.Adam(
        model.parameters(), lr=cfg.learning_rate, betas=cfg.adam_betas, eps=cfg.adam_eps
    )

    curve: list[LossBreakdown] = []
    best = math.inf
    writer = None
    curve_file = None
    if curve_path is not None:
        curve_file = open(curve_path, "w", newline="", encoding="utf-8")
        writer = csv.writer(curve_file)
        writer.writerow(["step", "branch", "l_rel", "l_flops_q", "l_flops_t", "l_all"])
    try:
        step = 0
        for epoch in range(cfg.epochs):
            pair_list = [
                (queries[qid], rng.choice(sorted(judgments[qid]))) for qid in judged
            ]
            epoch_losses = []
            for batch in _make_batches(pair_list, cfg.batch_size, rng):
                branch = sample_branch(rng, cfg.dropout)
                pairs = [(q, serialized[tid]) for q, tid in batch]
                breakdown = train_step(pairs, model, optimizer, cfg, branch, vocab)
                curve.append(breakdown)
                epoch_losses.append(breakdown.total)
                if writer:
                    writer.writerow(
                        [step, branch, breakdown.rel, breakdown.flops_q,
                         breakdown.flops_t, breakdown.total]
                    )
                step += 1
            mean_loss = sum(epoch_losses) / len(epoch_losses)
            if log:
                log(f"epoch {epoch + 1}/{cfg.epochs}: mean loss {mean_loss:.4f}")
            if mean_loss < best:
                best = mean_loss
                if checkpoint_path is not None:
                    save_checkpoint(model, checkpoint_path)
    finally:
        if curve_file:
            curve_file.close()
    return curve


# --------------------------------------------------------------------------
# Gradient verification
# --------------------------------------------------------------------------


def gradient_check(
    model: TableEncoder,
    loss_fn: Callable[[], torch.Tensor],
    step: float = 1e-5,
    denom_floor: float = 1e-6,
) -> float:
    """Max relative error between analytic gradients and central differences.

    loss_fn must recompute the scalar loss from the model's current
    parameters. Relative error uses max(|analytic|, |numeric|, denom_floor)
    as the denominator so near-zero gradients do not blow up the ratio.
    """
    model.zero_grad()
    loss = loss_fn()
    loss.backward()
    grads = {
        name: (p.grad.detach().clone() if p.grad is not None else torch.zeros_like(p))
        for name, p in model.named_parameters()
    }

    worst = 0.0
    with torch.no_grad():
        for name, p in model.named_parameters():
            flat = p.view(-1)
            g = grads[name].view(-1)
            for i in range(flat.shape[0]):
                orig = float(flat[i])
                flat[i] = orig + step
                up = float(loss_fn())
                flat[i] = orig - step
                down = float(loss_fn())
                flat[i] = orig
                numeric = (up - down) / (2 * step)
                analytic = float(g[i])
                denom = max(abs(analytic), abs(numeric), denom_floor)
                worst = max(worst, abs(analytic - numeric) / denom)
    model.zero_grad()
    return worst
