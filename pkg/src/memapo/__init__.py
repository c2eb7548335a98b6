"""Self-evolving dual memory (strategy templates + error patterns) for prompt optimization."""

from .codec import PromptKind, PromptLibrary, format_templates_block, parse, render
from .config import EngineParams, ProviderConfig, RunConfig
from .gateway import (
    ChatRequest,
    ChatResult,
    CostLedger,
    Gateway,
    OpenAICompatibleProvider,
    ScriptedProvider,
    Usage,
)
from .harness import Dataset, RunReport, evaluate, load_dataset, train
from .index import ScoredHit, VectorIndex, cosine_similarity
from .memory import (
    BadCase,
    Case,
    ErrorPattern,
    MemoryState,
    Template,
    append_case,
    create_template,
    remove_template,
)
from .reflection import (
    AttemptOutcome,
    QueryItem,
    extract_final_answer,
    run_inference,
    run_training_attempt,
)
from .retrieval import RetrievalResult, retrieve
from .snapshot import MemorySnapshot, load_memory, save_memory, state_digest
from .update import (
    MemoryDelta,
    consolidate,
    update_after_failure,
    update_after_success,
    verify_updated_template,
)

__version__ = "0.1.0"

__all__ = [
    "AttemptOutcome",
    "BadCase",
    "Case",
    "ChatRequest",
    "ChatResult",
    "CostLedger",
    "Dataset",
    "EngineParams",
    "ErrorPattern",
    "Gateway",
    "MemoryDelta",
    "MemorySnapshot",
    "MemoryState",
    "OpenAICompatibleProvider",
    "PromptKind",
    "PromptLibrary",
    "ProviderConfig",
    "QueryItem",
    "RetrievalResult",
    "RunConfig",
    "RunReport",
    "ScoredHit",
    "ScriptedProvider",
    "Template",
    "Usage",
    "VectorIndex",
    "append_case",
    "consolidate",
    "cosine_similarity",
    "create_template",
    "evaluate",
    "extract_final_answer",
    "format_templates_block",
    "load_dataset",
    "load_memory",
    "parse",
    "remove_template",
    "render",
    "retrieve",
    "run_inference",
    "run_training_attempt",
    "save_memory",
    "state_digest",
    "train",
    "update_after_failure",
    "update_after_success",
    "verify_updated_template",
]
