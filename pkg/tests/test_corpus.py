import json

import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from tabret.corpus import (
    RESERVED_TOKENS,
    CorpusFormatError,
    Query,
    SerializationError,
    Table,
    Vocabulary,
    build_vocabulary,
    load_corpus,
    load_judgments,
    load_tables,
    save_corpus,
    serialize_query,
    serialize_table,
    tokenize_text,
)


def test_tokenize_normalizes_case_and_punctuation():
    v = Vocabulary.from_tokens(["hello", "world"])
    assert v.encode("Hello, world") == [v.index["hello"], v.index["world"]]


def test_tokenize_unknown_maps_to_unk():
    v = Vocabulary.from_tokens(["known"])
    assert v.encode("zzz-unseen") == [Vocabulary.UNK, Vocabulary.UNK]


def test_tokenize_empty():
    v = Vocabulary.from_tokens(["x"])
    assert v.encode("") == []


def test_build_vocabulary_frequency_ordering():
    corpus = [Query(id="a", text="a b"), Query(id="b", text="a")]
    v = build_vocabulary(corpus, min_count=1)
    assert v.index["a"] < v.index["b"]
    assert set(v.tokens) == set(RESERVED_TOKENS) | {"a", "b"}


def test_build_vocabulary_min_count_excludes():
    with pytest.raises(ValueError):
        # all corpus tokens fall below the threshold, leaving reserved only,
        # which is below the minimum usable size
        build_vocabulary([Query(id="a", text="a b")], min_count=2)


def test_build_vocabulary_deterministic():
    corpus = [Query(id="q", text="c a b b c c")]
    v1 = build_vocabulary(corpus)
    v2 = build_vocabulary(corpus)
    assert v1.tokens == v2.tokens
    assert v1.tokens[len(RESERVED_TOKENS):] == ("c", "b", "a")


def test_build_vocabulary_empty_corpus_errors():
    with pytest.raises(ValueError):
        build_vocabulary([])


def test_serialize_basic_layout():
    v = Vocabulary.from_tokens(["a", "b", "c", "d", "e"])
    t = Table(id="t", title="a", headers=("b", "c"), cells=(("d", "e"),))
    ser = serialize_table(t, v, max_len=20)
    idx = v.index
    assert list(ser.token_ids) == [
        v.CLS, v.TTL, idx["a"], v.HEAD, idx["b"], idx["c"],
        v.CELL, idx["d"], idx["e"], v.SEP,
    ]
    words = lambda span: [v.tokens[ser.token_ids[i]] for i in span.indices()]
    assert words(ser.title_span) == ["a"]
    assert [words(s) for s in ser.header_spans] == [["b"], ["c"]]
    assert [(cs.row, cs.col, words(cs.span)) for cs in ser.cell_spans] == [
        (0, 0, ["d"]),
        (0, 1, ["e"]),
    ]
    assert not ser.truncated


def test_serialize_header_only_table():
    v = Vocabulary.from_tokens(["a", "b"])
    t = Table(id="t", title="a", headers=("b",), cells=())
    ser = serialize_table(t, v, max_len=10)
    assert ser.cell_spans == ()
    assert list(ser.token_ids) == [v.CLS, v.TTL, v.index["a"], v.HEAD, v.index["b"], v.CELL, v.SEP]


def test_serialize_drops_whole_trailing_rows():
    # 5 specials + 1 title + 2 header tokens = 8; max_len=12 leaves room for
    # exactly two 2-token rows
    v = Vocabulary.from_tokens(["t", "a", "b", "r0a", "r0b", "r1a", "r1b", "r2a", "r2b"])
    t = Table(
        id="t3rows",
        title="t",
        headers=("a", "b"),
        cells=(("r0a", "r0b"), ("r1a", "r1b"), ("r2a", "r2b")),
    )
    ser = serialize_table(t, v, max_len=12)
    assert ser.n_rows == 2
    assert ser.rows_dropped == 1
    assert ser.truncated
    assert len(ser.token_ids) == 12
    kept = {(cs.row, cs.col) for cs in ser.cell_spans}
    assert kept == {(0, 0), (0, 1), (1, 0), (1, 1)}


def test_serialize_title_truncated_before_error():
    v = Vocabulary.from_tokens(["t1", "t2", "t3", "h"])
    t = Table(id="t", title="t1 t2 t3", headers=("h",), cells=())
    ser = serialize_table(t, v, max_len=7)  # 5 specials + 1 header leaves 1 title token
    assert ser.title_truncated
    assert len(ser.title_span) == 1


def test_serialize_headers_too_long_errors_with_id():
    v = Vocabulary.from_tokens(["h1", "h2", "h3"])
    t = Table(id="wide", title="", headers=("h1", "h2", "h3"), cells=())
    with pytest.raises(SerializationError, match="wide"):
        serialize_table(t, v, max_len=7)


def test_serialize_query_wraps_and_rejects_empty():
    v = Vocabulary.from_tokens(["hello"])
    ids = serialize_query(Query(id="q", text="hello"), v)
    assert ids == (v.CLS, v.index["hello"], v.SEP)
    with pytest.raises(ValueError):
        serialize_query(Query(id="q", text="..."), v)


def test_table_invariants():
    with pytest.raises(ValueError):
        Table(id="x", title="t", headers=("a", "b"), cells=(("only-one",),))
    with pytest.raises(ValueError):
        Table(id="x", title="t", headers=(), cells=())
    with pytest.raises(ValueError):
        Query(id="q", text="   ")


@st.composite
def small_tables(draw):
    words = st.text(alphabet="abcdefg", min_size=1, max_size=4)
    n = draw(st.integers(1, 3))
    m = draw(st.integers(0, 3))
    return Table(
        id=draw(st.text(alphabet="xyz", min_size=1, max_size=4)),
        title=draw(words),
        headers=tuple(draw(words) for _ in range(n)),
        cells=tuple(tuple(draw(words) for _ in range(n)) for _ in range(m)),
    )


@settings(max_examples=50, deadline=None)
@given(small_tables())
def test_spans_reconstruct_fields(table):
    vocab = build_vocabulary([table])
    ser = serialize_table(table, vocab, max_len=256)
    assert not ser.truncated
    detok = lambda span: [vocab.tokens[ser.token_ids[i]] for i in span.indices()]
    assert detok(ser.title_span) == tokenize_text(table.title)
    for header, span in zip(table.headers, ser.header_spans):
        assert detok(span) == tokenize_text(header)
    for cs in ser.cell_spans:
        assert detok(cs.span) == tokenize_text(table.cells[cs.row][cs.col])
    # spans are ordered, disjoint, and exclude specials
    covered = []
    for span in [ser.title_span, *ser.header_spans, *(cs.span for cs in ser.cell_spans)]:
        covered.extend(span.indices())
    assert covered == sorted(set(covered))
    specials = {0, ser.ttl_pos, ser.head_pos, ser.cell_pos, len(ser.token_ids) - 1}
    assert not specials & set(covered)
    # cell spans stay in row-major order
    assert [(cs.row, cs.col) for cs in ser.cell_spans] == sorted(
        (cs.row, cs.col) for cs in ser.cell_spans
    )


def test_serialization_injective_on_distinct_content():
    vocab = Vocabulary.from_tokens(["a", "b", "c", "d"])
    t1 = Table(id="x", title="a", headers=("b",), cells=(("c",),))
    t2 = Table(id="y", title="a", headers=("b",), cells=(("d",),))
    s1 = serialize_table(t1, vocab, 32)
    s2 = serialize_table(t2, vocab, 32)
    assert s1.token_ids != s2.token_ids


def test_corpus_round_trip(tmp_path, small_corpus):
    tables, queries, judgments = small_corpus
    paths = (tmp_path / "t.jsonl", tmp_path / "q.jsonl", tmp_path / "j.jsonl")
    save_corpus(tables, queries, judgments, *paths)
    t2, q2, j2 = load_corpus(*paths)
    assert t2 == tables
    assert q2 == queries
    assert j2 == judgments


def test_load_malformed_line_reports_number(tmp_path):
    p = tmp_path / "bad.jsonl"
    p.write_text('{"id": "a", "title": "t", "headers": ["h"], "cells": []}\nnot json\n')
    with pytest.raises(CorpusFormatError, match=":2:"):
        load_tables(p)


def test_load_judgments_dangling_id(tmp_path, small_corpus):
    tables, queries, _ = small_corpus
    p = tmp_path / "j.jsonl"
    p.write_text('{"query_id": "q1", "table_ids": ["missing"]}\n')
    with pytest.raises(CorpusFormatError, match="missing"):
        load_judgments(p, tables, queries)


def test_load_judgments_empty_file(tmp_path, small_corpus):
    tables, queries, _ = small_corpus
    p = tmp_path / "j.jsonl"
    p.write_text("")
    assert load_judgments(p, tables, queries) == {}


def test_duplicate_table_id_rejected(tmp_path):
    p = tmp_path / "t.jsonl"
    rec = json.dumps({"id": "a", "title": "t", "headers": ["h"], "cells": []})
    p.write_text(rec + "\n" + rec + "\n")
    with pytest.raises(CorpusFormatError, match="duplicate"):
        load_tables(p)


def test_vocabulary_round_trip(tmp_path, small_vocab):
    p = tmp_path / "vocab.json"
    small_vocab.save(p)
    loaded = Vocabulary.load(p)
    assert loaded.tokens == small_vocab.tokens
