"""Persistent hybrid index: inverted postings for sparse vectors, a dense
vector store, exact fused top-k search, and a BM25 baseline.

Retrieval is exact by design (no ANN): the dense side is a full scan, the
sparse side traverses posting lists term-at-a-time, and fused search either
full-scans (small corpora) or grows per-branch candidate lists until a score
upper bound proves the fused top-k exact.
"""

from __future__ import annotations

import hashlib
import json
import math
import struct
from collections import Counter
from dataclasses import dataclass
from pathlib import Path
from typing import Optional, Union

import numpy as np
import torch

from .corpus import Table, Vocabulary, serialize_table, tokenize_text
from .encoder import TableEncoder
from .representation import PoolingConfig, SparseVector, table_repr_from_hidden

FULL_SCAN_THRESHOLD = 10_000


@dataclass(frozen=True)
class RetrievalResult:
    table_id: str
    s_sem: float
    s_lex: float
    rank: int

    @property
    def s(self) -> float:
        return self.s_sem + self.s_lex


def vocabulary_hash(vocab: Vocabulary) -> str:
    return hashlib.sha256("\n".join(vocab.tokens).encode("utf-8")).hexdigest()


class HybridIndex:
    """Inverted index + dense store over one table set.

    doc_ids are kept sorted so posting lists (internal doc numbers) are sorted
    by table id, and all tie-breaks resolve by table id ascending.
    """

    def __init__(
        self,
        doc_ids: list[str],
        dense: np.ndarray,
        sparse_vectors: list[dict[int, float]],
        vocab_size: int,
        vocab_hash: str,
        pooling: dict,
        params_hash: str = "",
    ):
        if len(doc_ids) != len(set(doc_ids)):
            raise ValueError("duplicate table id in index")
        order = sorted(range(len(doc_ids)), key=lambda i: doc_ids[i])
        self.doc_ids = [doc_ids[i] for i in order]
        self.dense = dense[order].astype(np.float32).astype(np.float64)
        self.sparse_vectors = [sparse_vectors[i] for i in order]
        self.vocab_size = vocab_size
        self.vocab_hash = vocab_hash
        self.pooling = pooling
        self.params_hash = params_hash
        self.postings: dict[int, list[tuple[int, float]]] = {}
        for doc_num, vec in enumerate(self.sparse_vectors):
            for token_id, weight in sorted(vec.items()):
                self.postings.setdefault(token_id, []).append((doc_num, weight))

    @property
    def doc_count(self) -> int:
        return len(self.doc_ids)

    @property
    def dense_dim(self) -> int:
        return int(self.dense.shape[1]) if self.doc_count else 0

    # -- search ------------------------------------------------------------

    def _rank(self, scored: list[tuple[float, int]], top_k: int) -> list[tuple[int, float]]:
        scored.sort(key=lambda t: (-t[0], self.doc_ids[t[1]]))
        return [(doc, s) for s, doc in scored[:top_k]]

    def search_sparse(self, q_sparse: SparseVector, top_k: int) -> list[tuple[str, float]]:
        """Exact top-k by sparse inner product via posting-list traversal."""
        if top_k <= 0:
            raise ValueError("top_k must be positive")
        acc: dict[int, float] = {}
        for token_id, q_weight in q_sparse.weights.items():
            for doc_num, weight in self.postings.get(token_id, ()):
                acc[doc_num] = acc.get(doc_num, 0.0) + q_weight * weight
        ranked = self._rank([(s, d) for d, s in acc.items()], top_k)
        return [(self.doc_ids[d], s) for d, s in ranked]

    def search_dense(self, q_dense: np.ndarray, top_k: int) -> list[tuple[str, float]]:
        """Exact top-k by dense inner product (full scan)."""
        if top_k <= 0:
            raise ValueError("top_k must be positive")
        q = np.asarray(q_dense, dtype=np.float64)
        if q.shape != (self.dense_dim,):
            raise ValueError(f"query dimension {q.shape} != store dimension {self.dense_dim}")
        scores = self.dense @ q
        ranked = self._rank([(float(s), d) for d, s in enumerate(scores)], top_k)
        return [(self.doc_ids[d], s) for d, s in ranked]

    def _lex_score(self, doc_num: int, q_sparse: SparseVector) -> float:
        vec = self.sparse_vectors[doc_num]
        return sum(w * vec[i] for i, w in q_sparse.weights.items() if i in vec)

    def search_hybrid(
        self, q_dense: np.ndarray, q_sparse: SparseVector, top_k: int
    ) -> list[RetrievalResult]:
        """Exact top-k under the summed dense + sparse score."""
        if top_k <= 0:
            raise ValueError("top_k must be positive")
        q = np.asarray(q_dense, dtype=np.float64)
        if q.shape != (self.dense_dim,):
            raise ValueError(f"query dimension {q.shape} != store dimension {self.dense_dim}")
        if self.doc_count <= FULL_SCAN_THRESHOLD:
            candidates = range(self.doc_count)
            sem = self.dense @ q
            fused = [
                (float(sem[d]) + self._lex_score(d, q_sparse), d) for d in candidates
            ]
            fused.sort(key=lambda t: (-t[0], self.doc_ids[t[1]]))
            top = fused[:top_k]
        else:
            top = self._hybrid_candidate_growth(q, q_sparse, top_k)
        results = []
        sem_scores = self.dense @ q
        for rank, (s, doc_num) in enumerate(top, start=1):
            s_sem = float(sem_scores[doc_num])
            results.append(
                RetrievalResult(
                    table_id=self.doc_ids[doc_num],
                    s_sem=s_sem,
                    s_lex=s - s_sem,
                    rank=rank,
                )
            )
        return results

    def _hybrid_candidate_growth(
        self, q: np.ndarray, q_sparse: SparseVector, top_k: int
    ) -> list[tuple[float, int]]:
        """Grow per-branch top-K' lists until the fused top-k is provably exact.

        A document outside both lists scores at most (K'-th best dense) +
        (K'-th best sparse, or 0 once the sparse accumulator is exhausted).
        """
        sem_all = self.dense @ q
        sem_order = sorted(range(self.doc_count), key=lambda d: (-sem_all[d], self.doc_ids[d]))
        lex_acc: dict[int, float] = {}
        for token_id, q_weight in q_sparse.weights.items():
            for doc_num, weight in self.postings.get(token_id, ()):
                lex_acc[doc_num] = lex_acc.get(doc_num, 0.0) + q_weight * weight
        lex_order = sorted(lex_acc, key=lambda d: (-lex_acc[d], self.doc_ids[d]))

        k_prime = 4 * top_k
        while True:
            cands = set(sem_order[:k_prime]) | set(lex_order[:k_prime])
            fused = [
                (float(sem_all[d]) + lex_acc.get(d, 0.0), d) for d in cands
            ]
            fused.sort(key=lambda t: (-t[0], self.doc_ids[t[1]]))
            covered = k_prime >= self.doc_count
            if not covered:
                sem_bound = float(sem_all[sem_order[k_prime - 1]])
                lex_bound = lex_acc[lex_order[k_prime - 1]] if k_prime <= len(lex_order) else 0.0
                kth = fused[top_k - 1][0] if len(fused) >= top_k else -math.inf
                covered = kth >= sem_bound + lex_bound
            if covered:
                return fused[:top_k]
            k_prime *= 2

    def reconstruct_sparse(self, table_id: str) -> SparseVector:
        doc_num = self.doc_ids.index(table_id)
        return SparseVector(weights=dict(self.sparse_vectors[doc_num]), dim=self.vocab_size)

    # -- persistence ---------------------------------------------------------

    def save(self, directory: Union[str, Path]) -> None:
        """Persist as a directory: manifest + float32 dense matrix +
        delta-encoded postings."""
        directory = Path(directory)
        directory.mkdir(parents=True, exist_ok=True)
        manifest = {
            "doc_ids": self.doc_ids,
            "doc_count": self.doc_count,
            "dense_dim": self.dense_dim,
            "vocab_size": self.vocab_size,
            "vocab_hash": self.vocab_hash,
            "pooling": self.pooling,
            "params_hash": self.params_hash,
        }
        (directory / "manifest.json").write_text(json.dumps(manifest, indent=2))
        np.save(directory / "dense.npy", self.dense.astype(np.float32))
        with open(directory / "postings.bin", "wb") as f:
            f.write(struct.pack("<I", len(self.postings)))
            for token_id in sorted(self.postings):
                plist = self.postings[token_id]
                f.write(struct.pack("<II", token_id, len(plist)))
                prev = 0
                for doc_num, weight in plist:
                    f.write(struct.pack("<Id", doc_num - prev, weight))
                    prev = doc_num

    @classmethod
    def load(
        cls,
        directory: Union[str, Path],
        expected_vocab_hash: Optional[str] = None,
        expected_params_hash: Optional[str] = None,
    ) -> "HybridIndex":
        directory = Path(directory)
        manifest = json.loads((directory / "manifest.json").read_text())
        if expected_vocab_hash and manifest["vocab_hash"] != expected_vocab_hash:
            raise ValueError("index was built with a different vocabulary")
        if expected_params_hash and manifest["params_hash"] != expected_params_hash:
            raise ValueError("index was built with a different parameter checkpoint")
        dense = np.load(directory / "dense.npy")
        doc_ids = manifest["doc_ids"]
        sparse_vectors: list[dict[int, float]] = [dict() for _ in doc_ids]
        with open(directory / "postings.bin", "rb") as f:
            (n_tokens,) = struct.unpack("<I", f.read(4))
            for _ in range(n_tokens):
                token_id, n = struct.unpack("<II", f.read(8))
                doc_num = 0
                for _ in range(n):
                    delta, weight = struct.unpack("<Id", f.read(12))
                    doc_num += delta
                    sparse_vectors[doc_num][token_id] = weight
        return cls(
            doc_ids=doc_ids,
            dense=dense,
            sparse_vectors=sparse_vectors,
            vocab_size=manifest["vocab_size"],
            vocab_hash=manifest["vocab_hash"],
            pooling=manifest["pooling"],
            params_hash=manifest["params_hash"],
        )


def build_index(
    tables: dict[str, Table],
    model: TableEncoder,
    vocab: Vocabulary,
    pooling: PoolingConfig = PoolingConfig(),
    max_len: int = 256,
    params_hash: str = "",
) -> HybridIndex:
    """Serialize, represent, and insert every table. Deterministic."""
    doc_ids = sorted(tables)
    serialized = [serialize_table(tables[tid], vocab, max_len) for tid in doc_ids]
    dense_rows, sparse_vecs = [], []
    chunk = 64
    with torch.no_grad():
        for start in range(0, len(serialized), chunk):
            batch = serialized[start : start + chunk]
            hidden = model.encode_many([s.token_ids for s in batch])
            for ser, h in zip(batch, hidden):
                t_dense, t_sparse, _ = table_repr_from_hidden(ser, h, model, pooling)
                dense_rows.append(t_dense.numpy())
                sparse_vecs.append(SparseVector.from_dense(t_sparse).weights)
    dense = np.stack(dense_rows) if dense_rows else np.zeros((0, model.config.hidden_dim))
    return HybridIndex(
        doc_ids=doc_ids,
        dense=dense,
        sparse_vectors=sparse_vecs,
        vocab_size=vocab.size,
        vocab_hash=vocabulary_hash(vocab),
        pooling=pooling.to_dict(),
        params_hash=params_hash,
    )


# --------------------------------------------------------------------------
# BM25 baseline
# --------------------------------------------------------------------------


def _table_bag(table: Table) -> list[str]:
    words = tokenize_text(table.title)
    for h in table.headers:
        words.extend(tokenize_text(h))
    for row in table.cells:
        for cell in row:
            words.extend(tokenize_text(cell))
    return words


def bm25_search(
    query_text: str,
    tables: dict[str, Table],
    top_k: int = 10,
    k1: float = 0.9,
    b: float = 0.4,
) -> list[tuple[str, float]]:
    """Okapi BM25 over tables flattened to bags of words.

    idf uses the non-negative variant ln(1 + (N - df + 0.5)/(df + 0.5)).
    Only documents with a positive score are returned.
    """
    bags = {tid: Counter(_table_bag(t)) for tid, t in tables.items()}
    lengths = {tid: sum(bag.values()) for tid, bag in bags.items()}
    n_docs = len(tables)
    if n_docs == 0:
        return []
    avgdl = sum(lengths.values()) / n_docs
    q_terms = tokenize_text(query_text)
    df = {t: sum(1 for bag in bags.values() if t in bag) for t in set(q_terms)}
    scores: dict[str, float] = {}
    for tid, bag in bags.items():
        s = 0.0
        for term in q_terms:
            tf = bag.get(term, 0)
            if tf == 0 or df[term] == 0:
                continue
            idf = math.log(1.0 + (n_docs - df[term] + 0.5) / (df[term] + 0.5))
            norm = tf + k1 * (1.0 - b + b * lengths[tid] / avgdl)
            s += idf * tf * (k1 + 1.0) / norm
        if s > 0.0:
            scores[tid] = s
    ranked = sorted(scores.items(), key=lambda kv: (-kv[1], kv[0]))
    return ranked[:top_k]
