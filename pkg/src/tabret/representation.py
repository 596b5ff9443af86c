"""Dense and sparse representations for queries and tables.

The sparse side applies the log-saturation activation to vocabulary logits and
pools per field: max over title tokens, mean-within/max-across headers, and
mean-per-column/max-across-columns for cells. A gated mixture over the three
field vectors (scored from the [TTL]/[HEAD]/[CELL] hidden states) produces the
final table-side sparse vector; the dense side is simply the [CLS] state.

Functions here return plain torch tensors (dense vocabulary-dimension vectors
for the sparse side) so gradients flow during training; ``SparseVector``
wraps the inference-time dict form used by the index.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Optional, Sequence

import torch

from .corpus import Query, SerializedInput, Span, Vocabulary, serialize_query
from .encoder import TableEncoder

FIELDS = ("title", "headers", "cells")

WITHIN_FIELD_MODES = ("table_specific", "max", "mean")
ACROSS_FIELD_MODES = ("mofe", "max", "mean")


@dataclass(frozen=True)
class SparseVector:
    """Vocabulary-indexed positive weights; absent indices are zero."""

    weights: dict[int, float]
    dim: int

    def __post_init__(self):
        for idx, w in self.weights.items():
            if not (0 <= idx < self.dim):
                raise ValueError(f"index {idx} outside vocabulary dimension {self.dim}")
            if not (w > 0.0 and math.isfinite(w)):
                raise ValueError(f"weight at {idx} must be positive and finite, got {w}")

    @property
    def support(self) -> int:
        return len(self.weights)

    def dot(self, other: "SparseVector") -> float:
        a, b = self.weights, other.weights
        if len(b) < len(a):
            a, b = b, a
        return sum(w * b[i] for i, w in a.items() if i in b)

    @classmethod
    def from_dense(cls, vec: torch.Tensor) -> "SparseVector":
        values = vec.detach().cpu()
        nz = torch.nonzero(values > 0).flatten().tolist()
        return cls(weights={i: float(values[i]) for i in nz}, dim=int(values.shape[0]))

    def to_dense(self) -> torch.Tensor:
        out = torch.zeros(self.dim, dtype=torch.float64)
        for i, w in self.weights.items():
            out[i] = w
        return out

    def dump_lines(self, vocab: Vocabulary) -> list[str]:
        """Debug dump: "token<TAB>weight" sorted by weight descending."""
        items = sorted(self.weights.items(), key=lambda kv: (-kv[1], kv[0]))
        return [f"{vocab.tokens[i]}\t{w:.6f}" for i, w in items]


@dataclass(frozen=True)
class PoolingConfig:
    within_field: str = "table_specific"
    across_field: str = "mofe"
    k: int = 3
    # which fields contribute on each side; removing a field from
    # sparse_fields zeroes its vector before aggregation, removing all fields
    # from dense_fields suppresses the [CLS] dense vector entirely
    sparse_fields: frozenset = frozenset(FIELDS)
    dense_fields: frozenset = frozenset(FIELDS)

    def __post_init__(self):
        if self.within_field not in WITHIN_FIELD_MODES:
            raise ValueError(f"within_field must be one of {WITHIN_FIELD_MODES}")
        if self.across_field not in ACROSS_FIELD_MODES:
            raise ValueError(f"across_field must be one of {ACROSS_FIELD_MODES}")
        if not 1 <= self.k <= 3:
            raise ValueError("k must be in [1, 3]")
        for f in self.sparse_fields | self.dense_fields:
            if f not in FIELDS:
                raise ValueError(f"unknown field {f!r}")
        if self.sparse_fields and self.k > len(self.sparse_fields):
            raise ValueError("k exceeds the number of unmasked sparse fields")

    def to_dict(self) -> dict:
        return {
            "within_field": self.within_field,
            "across_field": self.across_field,
            "k": self.k,
            "sparse_fields": sorted(self.sparse_fields),
            "dense_fields": sorted(self.dense_fields),
        }

    @classmethod
    def from_dict(cls, d: dict) -> "PoolingConfig":
        return cls(
            within_field=d.get("within_field", "table_specific"),
            across_field=d.get("across_field", "mofe"),
            k=d.get("k", 3),
            sparse_fields=frozenset(d.get("sparse_fields", FIELDS)),
            dense_fields=frozenset(d.get("dense_fields", FIELDS)),
        )


def saturate(x: torch.Tensor) -> torch.Tensor:
    """log(1 + ReLU(x)): non-negative, monotone, zero for x <= 0."""
    return torch.log1p(torch.relu(x))


def query_repr_from_hidden(
    hidden: torch.Tensor, model: TableEncoder
) -> tuple[torch.Tensor, torch.Tensor]:
    logits = model.project_to_vocab(hidden)
    sparse = saturate(logits).max(dim=0).values
    return hidden[0], sparse


def query_repr(
    query: Query, vocab: Vocabulary, model: TableEncoder
) -> tuple[torch.Tensor, torch.Tensor]:
    """(dense, sparse) query representation.

    Dense is the [CLS] hidden state; sparse is the elementwise max of the
    saturated vocabulary logits over the entire sequence, special tokens
    included.
    """
    ids = serialize_query(query, vocab)
    return query_repr_from_hidden(model.encode(ids), model)


def table_dense(hidden: torch.Tensor) -> torch.Tensor:
    """The [CLS] hidden-state row (position 0)."""
    return hidden[0]


def _phi_rows(logits: torch.Tensor, span: Span) -> torch.Tensor:
    return saturate(logits[span.start : span.end])


def pool_title(logits: torch.Tensor, title_span: Span) -> torch.Tensor:
    """Elementwise max of saturated logits over title tokens; empty -> zeros."""
    if len(title_span) == 0:
        return torch.zeros(logits.shape[1], dtype=logits.dtype)
    return _phi_rows(logits, title_span).max(dim=0).values


def pool_headers(logits: torch.Tensor, header_spans: Sequence[Span]) -> torch.Tensor:
    """Mean of saturated logits within each header, max across headers."""
    if not header_spans:
        raise ValueError("pool_headers requires at least one header span")
    vocab_dim = logits.shape[1]
    per_header = []
    for span in header_spans:
        if len(span) == 0:
            per_header.append(torch.zeros(vocab_dim, dtype=logits.dtype))
        else:
            per_header.append(_phi_rows(logits, span).mean(dim=0))
    return torch.stack(per_header).max(dim=0).values


def pool_cells(
    logits: torch.Tensor, cell_spans: Sequence, n_cols: int
) -> torch.Tensor:
    """Mean of saturated logits over each column's tokens, max across columns.

    All tokens of all cells in a column enter one flat mean; a column with no
    tokens contributes zeros. Zero rows yield the all-zero vector.
    """
    vocab_dim = logits.shape[1]
    if not cell_spans:
        return torch.zeros(vocab_dim, dtype=logits.dtype)
    col_indices: dict[int, list[int]] = {}
    for cs in cell_spans:
        col_indices.setdefault(cs.col, []).extend(cs.span.indices())
    per_col = []
    for col in range(n_cols):
        idx = col_indices.get(col, [])
        if not idx:
            per_col.append(torch.zeros(vocab_dim, dtype=logits.dtype))
        else:
            # per-coordinate sort canonicalizes the summation order so the
            # mean is bitwise invariant under row permutations
            phi = saturate(logits[idx]).sort(dim=0).values
            per_col.append(phi.mean(dim=0))
    return torch.stack(per_col).max(dim=0).values


def top_k_gates(gate_logits: torch.Tensor, k: int) -> torch.Tensor:
    """Softmax gates with optional top-k selection.

    With k < 3 only the k largest logits keep mass (softmax renormalized over
    the selected set); ties resolve toward the lower field index so runs are
    reproducible.
    """
    n = gate_logits.shape[0]
    if k >= n:
        return torch.softmax(gate_logits, dim=0)
    # stable selection: sort by (-logit, index); detached, selection is not differentiated
    values = gate_logits.detach().tolist()
    order = sorted(range(n), key=lambda i: (-values[i], i))
    keep = order[:k]
    selected = torch.softmax(gate_logits[keep], dim=0)
    gates = torch.zeros(n, dtype=gate_logits.dtype)
    gates[keep] = selected
    return gates


def mofe_aggregate(
    gate_states: torch.Tensor,
    field_vectors: torch.Tensor,
    model: TableEncoder,
    k: int = 3,
) -> tuple[torch.Tensor, torch.Tensor]:
    """Gated mixture over the three per-field sparse vectors.

    gate_states: (3, d) hidden rows at [TTL]/[HEAD]/[CELL];
    field_vectors: (3, vocab) title/headers/cells vectors in field order.
    Returns (mixed vector, gates).
    """
    logits = model.gate_proj(gate_states).squeeze(-1)  # shared affine, 3 scalars
    gates = top_k_gates(logits, k)
    return gates @ field_vectors, gates


def _uniform_field_pool(
    logits: torch.Tensor, token_indices: list[int], mode: str
) -> torch.Tensor:
    if not token_indices:
        return torch.zeros(logits.shape[1], dtype=logits.dtype)
    phi = saturate(logits[token_indices])
    return phi.max(dim=0).values if mode == "max" else phi.mean(dim=0)


def _field_token_indices(ser: SerializedInput) -> dict[str, list[int]]:
    return {
        "title": list(ser.title_span.indices()),
        "headers": [i for s in ser.header_spans for i in s.indices()],
        "cells": [i for cs in ser.cell_spans for i in cs.span.indices()],
    }


def table_repr_from_hidden(
    ser: SerializedInput,
    hidden: torch.Tensor,
    model: TableEncoder,
    cfg: PoolingConfig = PoolingConfig(),
) -> tuple[torch.Tensor, torch.Tensor, Optional[torch.Tensor]]:
    logits = model.project_to_vocab(hidden)
    vocab_dim = logits.shape[1]

    if cfg.within_field == "table_specific":
        field_vecs = {
            "title": pool_title(logits, ser.title_span),
            "headers": pool_headers(logits, ser.header_spans),
            "cells": pool_cells(logits, ser.cell_spans, ser.n_cols),
        }
    else:
        indices = _field_token_indices(ser)
        field_vecs = {
            f: _uniform_field_pool(logits, indices[f], cfg.within_field) for f in FIELDS
        }

    zero = torch.zeros(vocab_dim, dtype=logits.dtype)
    stacked = torch.stack(
        [field_vecs[f] if f in cfg.sparse_fields else zero for f in FIELDS]
    )

    gates: Optional[torch.Tensor] = None
    if cfg.across_field == "mofe":
        gate_states = hidden[[ser.ttl_pos, ser.head_pos, ser.cell_pos]]
        sparse, gates = mofe_aggregate(gate_states, stacked, model, cfg.k)
    elif cfg.across_field == "max":
        sparse = stacked.max(dim=0).values
    else:
        sparse = stacked.mean(dim=0)

    if cfg.dense_fields:
        dense = table_dense(hidden)
    else:
        dense = torch.zeros(hidden.shape[1], dtype=hidden.dtype)
    return dense, sparse, gates


def table_repr(
    ser: SerializedInput,
    model: TableEncoder,
    cfg: PoolingConfig = PoolingConfig(),
) -> tuple[torch.Tensor, torch.Tensor, Optional[torch.Tensor]]:
    """(dense, sparse, gates) table representation under a pooling config.

    Gates are None unless across_field == "mofe". Masked fields contribute
    all-zero sparse vectors (their gate logits are kept, diluting the rest);
    the dense [CLS] vector is zeroed only when every field is dense-masked.
    """
    return table_repr_from_hidden(ser, model.encode(ser.token_ids), model, cfg)
