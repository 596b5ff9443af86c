import math

import pytest
import torch
from hypothesis import given, settings
from hypothesis import strategies as st

from tabret.corpus import CellSpan, Span, serialize_table
from tabret.representation import (
    PoolingConfig,
    SparseVector,
    mofe_aggregate,
    pool_cells,
    pool_headers,
    pool_title,
    query_repr,
    saturate,
    table_dense,
    table_repr,
    top_k_gates,
)


def phi_inverse(v):
    """Logit whose saturated value is v (for crafting test matrices)."""
    return math.exp(v) - 1.0


def T(rows):
    return torch.tensor(rows, dtype=torch.float64)


# -- saturation --------------------------------------------------------------


def test_saturate_examples():
    assert float(saturate(T([0.0]))) == 0.0
    assert float(saturate(T([-5.0]))) == 0.0
    assert float(saturate(T([math.e - 1.0]))) == pytest.approx(1.0, abs=1e-12)


@given(st.floats(-50, 50), st.floats(-50, 50))
def test_saturate_monotone_nonnegative(a, b):
    fa, fb = float(saturate(T([a]))), float(saturate(T([b])))
    assert fa >= 0.0
    if a <= b:
        assert fa <= fb
    if a <= 0:
        assert fa == 0.0


# -- pooling -----------------------------------------------------------------


def test_pool_title_single_and_max():
    logits = T([[1.0, -1.0], [-1.0, 1.0]])
    out = pool_title(logits, Span(0, 2))
    assert torch.allclose(out, T([math.log(2.0), math.log(2.0)]))
    single = pool_title(logits, Span(0, 1))
    assert torch.allclose(single, saturate(logits[0]))


def test_pool_title_all_negative_is_zero():
    out = pool_title(T([[-3.0, -1.0]]), Span(0, 1))
    assert torch.equal(out, torch.zeros(2, dtype=torch.float64))


def test_pool_title_empty_span():
    out = pool_title(T([[1.0, 1.0]]), Span(0, 0))
    assert torch.equal(out, torch.zeros(2, dtype=torch.float64))


def test_pool_headers_mean_then_max():
    # header A: phi-rows (2,0) and (0,0) -> mean (1,0); header B: (0,4); max -> (1,4)
    logits = T([
        [phi_inverse(2.0), -1.0],
        [-1.0, -1.0],
        [-1.0, phi_inverse(4.0)],
    ])
    out = pool_headers(logits, [Span(0, 2), Span(2, 3)])
    assert torch.allclose(out, T([1.0, 4.0]), atol=1e-12)


def test_pool_headers_permutation_invariant_on_fixed_logits():
    logits = T([[1.0, 0.5], [0.2, 2.0], [3.0, -1.0]])
    spans = [Span(0, 1), Span(1, 2), Span(2, 3)]
    a = pool_headers(logits, spans)
    b = pool_headers(logits, [spans[2], spans[0], spans[1]])
    assert torch.equal(a, b)


def test_pool_headers_zero_length_span_contributes_zeros():
    logits = T([[-1.0, -1.0]])
    out = pool_headers(logits, [Span(0, 0), Span(0, 1)])
    assert torch.equal(out, torch.zeros(2, dtype=torch.float64))


def test_pool_cells_column_mean():
    # 2x1 column with phi-rows (2,0) and (0,2) -> mean (1,1)
    logits = T([
        [phi_inverse(2.0), -1.0],
        [-1.0, phi_inverse(2.0)],
    ])
    spans = [CellSpan(0, 0, Span(0, 1)), CellSpan(1, 0, Span(1, 2))]
    out = pool_cells(logits, spans, n_cols=1)
    assert torch.allclose(out, T([1.0, 1.0]), atol=1e-12)


def test_pool_cells_max_across_columns():
    # columns (1,0) and (0,3) -> (1,3)
    logits = T([
        [phi_inverse(1.0), -1.0],
        [-1.0, phi_inverse(3.0)],
    ])
    spans = [CellSpan(0, 0, Span(0, 1)), CellSpan(0, 1, Span(1, 2))]
    out = pool_cells(logits, spans, n_cols=2)
    assert torch.allclose(out, T([1.0, 3.0]), atol=1e-12)


def test_pool_cells_no_rows():
    out = pool_cells(T([[1.0, 1.0]]), [], n_cols=2)
    assert torch.equal(out, torch.zeros(2, dtype=torch.float64))


@st.composite
def cell_grids(draw):
    m = draw(st.integers(1, 3))
    n = draw(st.integers(1, 3))
    vocab = draw(st.integers(2, 4))
    # one token per cell keeps span bookkeeping simple
    values = draw(
        st.lists(
            st.lists(st.floats(-3, 3, allow_nan=False), min_size=vocab, max_size=vocab),
            min_size=m * n,
            max_size=m * n,
        )
    )
    return m, n, T(values)


@settings(max_examples=60, deadline=None)
@given(cell_grids(), st.randoms(use_true_random=False))
def test_pool_cells_row_and_column_permutation_invariance(grid, rnd):
    m, n, logits = grid
    spans = [CellSpan(r, c, Span(r * n + c, r * n + c + 1)) for r in range(m) for c in range(n)]
    base = pool_cells(logits, spans, n)

    rows = list(range(m))
    cols = list(range(n))
    rnd.shuffle(rows)
    rnd.shuffle(cols)
    permuted = [
        CellSpan(r, c, Span(rows[r] * n + cols[c], rows[r] * n + cols[c] + 1))
        for r in range(m)
        for c in range(n)
    ]
    assert torch.equal(base, pool_cells(logits, permuted, n))


@settings(max_examples=60, deadline=None)
@given(cell_grids())
def test_pool_cells_column_mean_bounds(grid):
    m, n, logits = grid
    phi = saturate(logits)
    for c in range(n):
        col = phi[[r * n + c for r in range(m)]]
        mean = col.mean(dim=0)
        assert bool((col.min(dim=0).values - 1e-12 <= mean).all())
        assert bool((mean <= col.max(dim=0).values + 1e-12).all())


# -- gates / MoFE -------------------------------------------------------------


def test_top_k_gates_full_softmax():
    g = top_k_gates(T([1.0, 1.0, 1.0]), k=3)
    assert torch.allclose(g, T([1 / 3, 1 / 3, 1 / 3]))


def test_top_k_gates_selects_and_renormalizes():
    g = top_k_gates(T([5.0, 0.0, 0.0]), k=1)
    assert torch.equal(g, T([1.0, 0.0, 0.0]))
    g2 = top_k_gates(T([0.0, 0.0, 5.0]), k=2)
    assert g2[1] == 0.0 or g2[0] == 0.0
    assert float(g2.sum()) == pytest.approx(1.0, abs=1e-12)


def test_top_k_gates_tie_breaks_to_lower_field_index():
    g = top_k_gates(T([1.0, 1.0, 1.0]), k=1)
    assert torch.equal(g, T([1.0, 0.0, 0.0]))


@settings(max_examples=200, deadline=None)
@given(
    st.lists(st.floats(-10, 10, allow_nan=False), min_size=3, max_size=3),
    st.integers(1, 3),
)
def test_gates_sum_to_one_with_topk_support(logits, k):
    g = top_k_gates(T(logits), k)
    assert float(g.sum()) == pytest.approx(1.0, abs=1e-9)
    assert int((g > 0).sum()) <= k
    assert bool((g >= 0).all())


def _gate_model(weight_row):
    """Minimal stand-in exposing gate_proj like the encoder does."""
    import torch.nn as nn

    class M(nn.Module):
        def __init__(self):
            super().__init__()
            self.gate_proj = nn.Linear(len(weight_row), 1).to(torch.float64)
            with torch.no_grad():
                self.gate_proj.weight.copy_(T([weight_row]))
                self.gate_proj.bias.zero_()

    return M()


def test_mofe_equal_logits_is_uniform():
    model = _gate_model([0.0, 0.0])
    fields = T([[3.0, 0.0], [1.0, 0.0], [0.0, 0.0]])
    states = T([[1.0, 0.0], [0.0, 1.0], [1.0, 1.0]])
    mixed, gates = mofe_aggregate(states, fields, model, k=3)
    assert torch.allclose(gates, T([1 / 3, 1 / 3, 1 / 3]))
    assert torch.allclose(mixed, T([4 / 3, 0.0]))


def test_mofe_top1_selects_exactly():
    model = _gate_model([1.0, 0.0])
    states = T([[5.0, 0.0], [0.0, 0.0], [0.0, 0.0]])  # logits (5, 0, 0)
    fields = T([[3.0, 1.0], [9.0, 9.0], [9.0, 9.0]])
    mixed, gates = mofe_aggregate(states, fields, model, k=1)
    assert torch.equal(gates, T([1.0, 0.0, 0.0]))
    assert torch.equal(mixed, fields[0])


def test_mofe_hand_computed_mixture():
    # logits (ln 2, 0, 0) -> softmax (0.5, 0.25, 0.25);
    # fields {0:3}, {0:1}, {} -> output {0: 1.75}
    model = _gate_model([1.0])
    states = T([[math.log(2.0)], [0.0], [0.0]])
    fields = T([[3.0], [1.0], [0.0]])
    mixed, gates = mofe_aggregate(states, fields, model, k=3)
    assert torch.allclose(gates, T([0.5, 0.25, 0.25]), atol=1e-12)
    assert torch.allclose(mixed, T([1.75]), atol=1e-12)


# -- full table representation ------------------------------------------------


@pytest.fixture()
def serialized_table(small_vocab, small_corpus):
    tables, _, _ = small_corpus
    return serialize_table(tables["t1"], small_vocab, max_len=64)


def test_table_repr_composition(serialized_table, small_vocab, tiny_config):
    from tabret.encoder import init_params, EncoderConfig

    cfg = EncoderConfig(vocab_size=small_vocab.size, hidden_dim=8, num_layers=2,
                        num_heads=2, ffn_dim=16, max_positions=64, seed=3)
    model = init_params(cfg)
    ser = serialized_table
    dense, sparse, gates = table_repr(ser, model, PoolingConfig())

    hidden = model.encode(ser.token_ids)
    logits = model.project_to_vocab(hidden)
    fields = torch.stack([
        pool_title(logits, ser.title_span),
        pool_headers(logits, ser.header_spans),
        pool_cells(logits, ser.cell_spans, ser.n_cols),
    ])
    states = hidden[[ser.ttl_pos, ser.head_pos, ser.cell_pos]]
    expected, expected_gates = mofe_aggregate(states, fields, model, k=3)
    assert torch.equal(dense, table_dense(hidden))
    assert torch.allclose(sparse, expected, atol=1e-12)
    assert torch.allclose(gates, expected_gates, atol=1e-12)


def test_table_repr_max_max_degenerates_to_flat_text(serialized_table, small_vocab):
    from tabret.encoder import init_params, EncoderConfig

    cfg = EncoderConfig(vocab_size=small_vocab.size, hidden_dim=8, num_layers=1,
                        num_heads=2, ffn_dim=16, max_positions=64, seed=4)
    model = init_params(cfg)
    ser = serialized_table
    _, sparse, gates = table_repr(ser, model, PoolingConfig(within_field="max", across_field="max"))
    assert gates is None

    logits = model.project_to_vocab(model.encode(ser.token_ids))
    union = list(ser.title_span.indices())
    union += [i for s in ser.header_spans for i in s.indices()]
    union += [i for cs in ser.cell_spans for i in cs.span.indices()]
    expected = saturate(logits[union]).max(dim=0).values
    assert torch.allclose(sparse, expected, atol=1e-12)


def test_table_repr_sparse_mask_zeroes_field(serialized_table, small_vocab):
    from tabret.encoder import init_params, EncoderConfig

    cfg = EncoderConfig(vocab_size=small_vocab.size, hidden_dim=8, num_layers=1,
                        num_heads=2, ffn_dim=16, max_positions=64, seed=5)
    model = init_params(cfg)
    ser = serialized_table
    masked_cfg = PoolingConfig(
        within_field="table_specific",
        across_field="max",
        sparse_fields=frozenset({"headers", "cells"}),
        k=2,
    )
    _, sparse, _ = table_repr(ser, model, masked_cfg)
    logits = model.project_to_vocab(model.encode(ser.token_ids))
    expected = torch.stack([
        torch.zeros(small_vocab.size, dtype=torch.float64),
        pool_headers(logits, ser.header_spans),
        pool_cells(logits, ser.cell_spans, ser.n_cols),
    ]).max(dim=0).values
    assert torch.allclose(sparse, expected, atol=1e-12)


def test_table_repr_dense_mask(serialized_table, small_vocab):
    from tabret.encoder import init_params, EncoderConfig

    cfg = EncoderConfig(vocab_size=small_vocab.size, hidden_dim=8, num_layers=1,
                        num_heads=2, ffn_dim=16, max_positions=64, seed=6)
    model = init_params(cfg)
    no_dense = PoolingConfig(dense_fields=frozenset())
    dense, _, _ = table_repr(serialized_table, model, no_dense)
    assert torch.equal(dense, torch.zeros_like(dense))


def test_query_repr_definition(small_vocab, small_corpus, tiny_config):
    from tabret.encoder import init_params, EncoderConfig
    from tabret.corpus import serialize_query

    cfg = EncoderConfig(vocab_size=small_vocab.size, hidden_dim=8, num_layers=2,
                        num_heads=2, ffn_dim=16, max_positions=64, seed=7)
    model = init_params(cfg)
    _, queries, _ = small_corpus
    q = queries["q1"]
    dense, sparse = query_repr(q, small_vocab, model)
    hidden = model.encode(serialize_query(q, small_vocab))
    assert torch.equal(dense, hidden[0])
    logits = model.project_to_vocab(hidden)
    assert torch.allclose(sparse, saturate(logits).max(dim=0).values)
    assert bool((sparse >= 0).all())


def test_query_repr_all_negative_logits_is_empty(small_vocab, small_corpus):
    from tabret.encoder import init_params, EncoderConfig

    cfg = EncoderConfig(vocab_size=small_vocab.size, hidden_dim=8, num_layers=1,
                        num_heads=2, ffn_dim=16, max_positions=64, seed=8)
    model = init_params(cfg)
    with torch.no_grad():
        model.vocab_proj.weight.zero_()
        model.vocab_proj.bias.fill_(-1.0)
    _, queries, _ = small_corpus
    _, sparse = query_repr(queries["q1"], small_vocab, model)
    assert SparseVector.from_dense(sparse).support == 0


# -- SparseVector -------------------------------------------------------------


def test_sparse_vector_validation():
    with pytest.raises(ValueError):
        SparseVector(weights={0: -1.0}, dim=4)
    with pytest.raises(ValueError):
        SparseVector(weights={5: 1.0}, dim=4)
    v = SparseVector(weights={0: 1.0, 2: 2.0}, dim=4)
    assert v.support == 2


def test_sparse_vector_round_trip_and_dump(small_vocab):
    v = SparseVector(weights={7: 2.5, 9: 0.5}, dim=small_vocab.size)
    dense = v.to_dense()
    assert SparseVector.from_dense(dense).weights == v.weights
    lines = v.dump_lines(small_vocab)
    assert lines[0].endswith("2.500000")
    assert all("\t" in line for line in lines)


def test_pooling_config_validation():
    with pytest.raises(ValueError):
        PoolingConfig(within_field="median")
    with pytest.raises(ValueError):
        PoolingConfig(k=0)
    with pytest.raises(ValueError):
        PoolingConfig(k=3, sparse_fields=frozenset({"title"}))
    cfg = PoolingConfig(k=1, sparse_fields=frozenset({"title"}))
    assert cfg.to_dict()["sparse_fields"] == ["title"]
    assert PoolingConfig.from_dict(cfg.to_dict()) == cfg
