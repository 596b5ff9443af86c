"""Table/query data model, vocabulary, tokenization, serialization, corpus I/O.

Tables carry three fields (title, headers, cells). Serialization lays a table
out as a single token sequence with indicator tokens marking field boundaries:

    [CLS] [TTL] title [HEAD] header_0 .. header_{n-1} [CELL] cells (row-major) [SEP]

Span metadata records where each field's content tokens live so that pooling
downstream can address fields without re-tokenizing.
"""

from __future__ import annotations

import json
import re
from collections import Counter
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Union

RESERVED_TOKENS = ("[PAD]", "[UNK]", "[CLS]", "[SEP]", "[TTL]", "[HEAD]", "[CELL]")

_TOKEN_RE = re.compile(r"[a-z0-9]+")


class CorpusFormatError(ValueError):
    """Raised for malformed corpus files; message carries the line number."""


class SerializationError(ValueError):
    """Raised when a table cannot be serialized within the length budget."""


@dataclass(frozen=True)
class Table:
    id: str
    title: str
    headers: tuple[str, ...]
    cells: tuple[tuple[str, ...], ...]  # m rows x n columns, row-major

    def __post_init__(self):
        if not self.id:
            raise ValueError("table id must be non-empty")
        n = len(self.headers)
        if n < 1:
            raise ValueError(f"table {self.id!r}: needs at least one header")
        for i, row in enumerate(self.cells):
            if len(row) != n:
                raise ValueError(
                    f"table {self.id!r}: row {i} has {len(row)} cells, expected {n}"
                )

    @property
    def n_rows(self) -> int:
        return len(self.cells)

    @property
    def n_cols(self) -> int:
        return len(self.headers)


@dataclass(frozen=True)
class Query:
    id: str
    text: str

    def __post_init__(self):
        if not self.id:
            raise ValueError("query id must be non-empty")
        if not self.text.strip():
            raise ValueError(f"query {self.id!r}: text must be non-empty")


# query id -> set of relevant table ids
Judgments = dict[str, set[str]]


def tokenize_text(text: str) -> list[str]:
    """Lowercase and split on whitespace/punctuation (alnum runs survive)."""
    return _TOKEN_RE.findall(text.lower())


@dataclass(frozen=True)
class Vocabulary:
    """Bijective token <-> index map with reserved tokens at the lowest indices."""

    tokens: tuple[str, ...]
    index: dict[str, int] = field(repr=False)

    PAD, UNK, CLS, SEP, TTL, HEAD, CELL = range(7)

    def __post_init__(self):
        if self.tokens[: len(RESERVED_TOKENS)] != RESERVED_TOKENS:
            raise ValueError("vocabulary must start with the reserved tokens")
        if len(self.tokens) < 8:
            raise ValueError("vocabulary must contain at least one content token")
        if len(self.index) != len(self.tokens):
            raise ValueError("token/index map is not a bijection")

    @property
    def size(self) -> int:
        return len(self.tokens)

    @classmethod
    def from_tokens(cls, content_tokens: Iterable[str]) -> "Vocabulary":
        tokens = RESERVED_TOKENS + tuple(content_tokens)
        return cls(tokens=tokens, index={t: i for i, t in enumerate(tokens)})

    def encode(self, text: str) -> list[int]:
        unk = self.UNK
        return [self.index.get(t, unk) for t in tokenize_text(text)]

    def save(self, path: Union[str, Path]) -> None:
        Path(path).write_text(json.dumps({"tokens": list(self.tokens)}), encoding="utf-8")

    @classmethod
    def load(cls, path: Union[str, Path]) -> "Vocabulary":
        data = json.loads(Path(path).read_text(encoding="utf-8"))
        tokens = tuple(data["tokens"])
        if tokens[: len(RESERVED_TOKENS)] != RESERVED_TOKENS:
            raise CorpusFormatError(f"{path}: reserved tokens missing or reordered")
        return cls(tokens=tokens, index={t: i for i, t in enumerate(tokens)})


def iter_item_texts(item: Union[Table, Query]) -> Iterable[str]:
    if isinstance(item, Table):
        yield item.title
        yield from item.headers
        for row in item.cells:
            yield from row
    else:
        yield item.text


def build_vocabulary(corpus: Iterable[Union[Table, Query]], min_count: int = 1) -> Vocabulary:
    """Build a word-level vocabulary from tables and queries.

    Content tokens are ordered by frequency (descending), ties broken
    lexicographically, so the result is deterministic for a given corpus.
    """
    counts: Counter[str] = Counter()
    n_items = 0
    for item in corpus:
        n_items += 1
        for text in iter_item_texts(item):
            counts.update(tokenize_text(text))
    if n_items == 0:
        raise ValueError("cannot build a vocabulary from an empty corpus")
    kept = [t for t, c in counts.items() if c >= min_count]
    kept.sort(key=lambda t: (-counts[t], t))
    return Vocabulary.from_tokens(kept)


@dataclass(frozen=True)
class Span:
    """Half-open token-index range [start, end)."""

    start: int
    end: int

    def __len__(self) -> int:
        return self.end - self.start

    def indices(self) -> range:
        return range(self.start, self.end)


@dataclass(frozen=True)
class CellSpan:
    row: int
    col: int
    span: Span


@dataclass(frozen=True)
class SerializedInput:
    table_id: str
    token_ids: tuple[int, ...]
    title_span: Span
    header_spans: tuple[Span, ...]
    cell_spans: tuple[CellSpan, ...]  # sorted by (row, col), matches token order
    ttl_pos: int
    head_pos: int
    cell_pos: int
    n_rows: int  # rows kept after truncation
    n_cols: int
    rows_dropped: int = 0
    title_truncated: bool = False

    @property
    def truncated(self) -> bool:
        return self.rows_dropped > 0 or self.title_truncated


def serialize_table(table: Table, vocab: Vocabulary, max_len: int = 256) -> SerializedInput:
    """Serialize a table to token ids with field spans.

    Over-length tables lose whole trailing rows first; the title is truncated
    only as a last resort. If [CLS]+indicators+headers+[SEP] alone exceed
    max_len the table is rejected.
    """
    title_ids = vocab.encode(table.title)
    header_ids = [vocab.encode(h) for h in table.headers]
    cell_ids = [[vocab.encode(c) for c in row] for row in table.cells]

    n_special = 5  # [CLS] [TTL] [HEAD] [CELL] [SEP]
    header_total = sum(len(h) for h in header_ids)
    budget = max_len - n_special - header_total
    if budget < 0:
        raise SerializationError(
            f"table {table.id!r}: headers alone do not fit in max_len={max_len}"
        )
    title_truncated = len(title_ids) > budget
    if title_truncated:
        title_ids = title_ids[:budget]
    budget -= len(title_ids)

    rows_kept = 0
    for row in cell_ids:
        row_len = sum(len(c) for c in row)
        if row_len > budget:
            break
        budget -= row_len
        rows_kept += 1
    rows_dropped = table.n_rows - rows_kept

    ids: list[int] = [vocab.CLS, vocab.TTL]
    ttl_pos = 1
    title_span = Span(len(ids), len(ids) + len(title_ids))
    ids.extend(title_ids)

    head_pos = len(ids)
    ids.append(vocab.HEAD)
    header_spans = []
    for h in header_ids:
        header_spans.append(Span(len(ids), len(ids) + len(h)))
        ids.extend(h)

    cell_pos = len(ids)
    ids.append(vocab.CELL)
    cell_spans = []
    for r in range(rows_kept):
        for c in range(table.n_cols):
            toks = cell_ids[r][c]
            cell_spans.append(CellSpan(r, c, Span(len(ids), len(ids) + len(toks))))
            ids.extend(toks)
    ids.append(vocab.SEP)

    return SerializedInput(
        table_id=table.id,
        token_ids=tuple(ids),
        title_span=title_span,
        header_spans=tuple(header_spans),
        cell_spans=tuple(cell_spans),
        ttl_pos=ttl_pos,
        head_pos=head_pos,
        cell_pos=cell_pos,
        n_rows=rows_kept,
        n_cols=table.n_cols,
        rows_dropped=rows_dropped,
        title_truncated=title_truncated,
    )


def serialize_query(query: Query, vocab: Vocabulary) -> tuple[int, ...]:
    """[CLS] query tokens [SEP]; errors on queries that normalize to nothing."""
    ids = vocab.encode(query.text)
    if not ids:
        raise ValueError(f"query {query.id!r}: no tokens after normalization")
    return (vocab.CLS, *ids, vocab.SEP)


# --------------------------------------------------------------------------
# JSON Lines corpus I/O
# --------------------------------------------------------------------------


def _iter_jsonl(path: Union[str, Path]):
    with open(path, encoding="utf-8") as f:
        for lineno, line in enumerate(f, start=1):
            if not line.strip():
                continue
            try:
                yield lineno, json.loads(line)
            except json.JSONDecodeError as e:
                raise CorpusFormatError(f"{path}:{lineno}: invalid JSON ({e.msg})") from e


def load_tables(path: Union[str, Path]) -> dict[str, Table]:
    tables: dict[str, Table] = {}
    for lineno, obj in _iter_jsonl(path):
        try:
            t = Table(
                id=obj["id"],
                title=obj["title"],
                headers=tuple(obj["headers"]),
                cells=tuple(tuple(row) for row in obj["cells"]),
            )
        except (KeyError, TypeError, ValueError) as e:
            raise CorpusFormatError(f"{path}:{lineno}: bad table record ({e})") from e
        if t.id in tables:
            raise CorpusFormatError(f"{path}:{lineno}: duplicate table id {t.id!r}")
        tables[t.id] = t
    return tables


def load_queries(path: Union[str, Path]) -> dict[str, Query]:
    queries: dict[str, Query] = {}
    for lineno, obj in _iter_jsonl(path):
        try:
            q = Query(id=obj["id"], text=obj["text"])
        except (KeyError, TypeError, ValueError) as e:
            raise CorpusFormatError(f"{path}:{lineno}: bad query record ({e})") from e
        if q.id in queries:
            raise CorpusFormatError(f"{path}:{lineno}: duplicate query id {q.id!r}")
        queries[q.id] = q
    return queries


def load_judgments(
    path: Union[str, Path],
    tables: dict[str, Table],
    queries: dict[str, Query],
) -> Judgments:
    judgments: Judgments = {}
    for lineno, obj in _iter_jsonl(path):
        try:
            qid = obj["query_id"]
            tids = list(obj["table_ids"])
        except (KeyError, TypeError) as e:
            raise CorpusFormatError(f"{path}:{lineno}: bad judgment record ({e})") from e
        if qid not in queries:
            raise CorpusFormatError(f"{path}:{lineno}: unknown query id {qid!r}")
        if not tids:
            raise CorpusFormatError(f"{path}:{lineno}: query {qid!r} has no relevant tables")
        for tid in tids:
            if tid not in tables:
                raise CorpusFormatError(f"{path}:{lineno}: unknown table id {tid!r}")
        judgments.setdefault(qid, set()).update(tids)
    return judgments


def load_corpus(
    tables_path: Union[str, Path],
    queries_path: Union[str, Path],
    judgments_path: Union[str, Path],
) -> tuple[dict[str, Table], dict[str, Query], Judgments]:
    tables = load_tables(tables_path)
    queries = load_queries(queries_path)
    judgments = load_judgments(judgments_path, tables, queries)
    return tables, queries, judgments


def save_tables(tables: Iterable[Table], path: Union[str, Path]) -> None:
    with open(path, "w", encoding="utf-8") as f:
        for t in tables:
            f.write(
                json.dumps(
                    {
                        "id": t.id,
                        "title": t.title,
                        "headers": list(t.headers),
                        "cells": [list(row) for row in t.cells],
                    },
                    ensure_ascii=False,
                )
                + "\n"
            )


def save_queries(queries: Iterable[Query], path: Union[str, Path]) -> None:
    with open(path, "w", encoding="utf-8") as f:
        for q in queries:
            f.write(json.dumps({"id": q.id, "text": q.text}, ensure_ascii=False) + "\n")


def save_judgments(judgments: Judgments, path: Union[str, Path]) -> None:
    with open(path, "w", encoding="utf-8") as f:
        for qid in sorted(judgments):
            f.write(
                json.dumps({"query_id": qid, "table_ids": sorted(judgments[qid])}) + "\n"
            )


def save_corpus(
    tables: dict[str, Table],
    queries: dict[str, Query],
    judgments: Judgments,
    tables_path: Union[str, Path],
    queries_path: Union[str, Path],
    judgments_path: Union[str, Path],
) -> None:
    save_tables(tables.values(), tables_path)
    save_queries(queries.values(), queries_path)
    save_judgments(judgments, judgments_path)
