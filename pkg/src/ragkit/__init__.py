"""Retriever training from oracle relevance labels, plus budget-aware
self-labeling and reordered-context answer ensembling."""

__version__ = "0.1.0"

from .data import (  # noqa: F401
    ChunkingPolicy,
    Corpus,
    Document,
    EvidenceChunk,
    Provenance,
    Source,
    SupportLevel,
    TrainingTuple,
    chunk_document,
    load_corpus,
    load_tuples,
    save_corpus,
    save_tuples,
)
from .encoder import (  # noqa: F401
    EncoderConfig,
    EncoderParams,
    encode,
    init_params,
    load_checkpoint,
    params_hash,
    save_checkpoint,
)
from .index import (  # noqa: F401
    VectorIndex,
    load_index,
    recall_at_k,
    save_index,
    search,
)
from .index import build as build_index  # noqa: F401
from .inference import (  # noqa: F401
    EnsembleResult,
    OrderingPlan,
    PositionAgnosticReader,
    PositionBiasedReader,
    answer,
    ensemble_answer,
    exact_match,
    exact_match_rate,
    permutations,
    reorder,
    rerank_chunks,
)
from .labeler import (  # noqa: F401
    HttpChatLabeler,
    HttpOracleConfig,
    MockLabeler,
    OracleBudget,
    mine_negative_candidates,
    score_and_filter_negatives,
)
from .losses import LossConfig, list_loss, pair_loss, total_loss  # noqa: F401
from .synthetic import (  # noqa: F401
    adaptive_task,
    document_recall,
    graded_task,
    sample_corpus,
    separable_task,
    write_sample_corpus,
)
from .training import (  # noqa: F401
    AdaptiveConfig,
    TrainSchedule,
    adaptive_round,
    train,
)
