"""Field-aware hybrid sparse-dense table retrieval."""

from .corpus import (
    Judgments,
    Query,
    SerializedInput,
    Table,
    Vocabulary,
    build_vocabulary,
    load_corpus,
    save_corpus,
    serialize_query,
    serialize_table,
    tokenize_text,
)
from .encoder import EncoderConfig, TableEncoder, init_params, load_checkpoint, save_checkpoint
from .harness import (
    AblationSpec,
    EvalReport,
    SyntheticSpec,
    evaluate,
    generate_synthetic,
    make_retriever,
    ndcg_at_k,
    recall_at_k,
    run_ablation,
)
from .index import HybridIndex, RetrievalResult, bm25_search, build_index
from .representation import (
    PoolingConfig,
    SparseVector,
    mofe_aggregate,
    pool_cells,
    pool_headers,
    pool_title,
    query_repr,
    saturate,
    table_repr,
)
from .training import (
    DropoutPolicy,
    LossBreakdown,
    ScoreTriple,
    TrainConfig,
    flops_penalty,
    gradient_check,
    inner_product,
    relevance_loss,
    sample_branch,
    score,
    train,
)

__version__ = "0.1.0"
