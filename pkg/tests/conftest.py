import pytest
import torch

from tabret.corpus import Query, Table, Vocabulary, build_vocabulary
from tabret.encoder import EncoderConfig, init_params


@pytest.fixture(scope="session")
def tiny_vocab():
    words = [f"w{i}" for i in range(25)]
    return Vocabulary.from_tokens(words)


@pytest.fixture(scope="session")
def tiny_config(tiny_vocab):
    return EncoderConfig(
        vocab_size=tiny_vocab.size,
        hidden_dim=8,
        num_layers=2,
        num_heads=2,
        ffn_dim=16,
        max_positions=32,
        seed=11,
    )


@pytest.fixture()
def tiny_model(tiny_config):
    return init_params(tiny_config)


@pytest.fixture(scope="session")
def small_corpus():
    tables = {
        "t1": Table(
            id="t1",
            title="solar system planets",
            headers=("planet", "moons"),
            cells=(("mercury", "0"), ("earth", "1"), ("mars", "2")),
        ),
        "t2": Table(
            id="t2",
            title="world capitals",
            headers=("country", "capital"),
            cells=(("france", "paris"), ("japan", "tokyo")),
        ),
        "t3": Table(
            id="t3",
            title="chemical elements",
            headers=("symbol", "name"),
            cells=(("fe", "iron"), ("au", "gold")),
        ),
    }
    queries = {
        "q1": Query(id="q1", text="how many moons does mars have"),
        "q2": Query(id="q2", text="capital of japan"),
        "q3": Query(id="q3", text="element symbol gold"),
    }
    judgments = {"q1": {"t1"}, "q2": {"t2"}, "q3": {"t3"}}
    return tables, queries, judgments


@pytest.fixture(scope="session")
def small_vocab(small_corpus):
    tables, queries, _ = small_corpus
    return build_vocabulary(list(tables.values()) + list(queries.values()))


@pytest.fixture(autouse=True)
def _deterministic_torch():
    torch.manual_seed(0)
