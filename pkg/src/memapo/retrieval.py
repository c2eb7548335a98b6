"""Stage I: fetch the top-k templates for a query plus every error pattern."""

from __future__ import annotations

import logging
from dataclasses import dataclass

import numpy as np

from .config import EngineParams
from .gateway import Gateway
from .memory import ErrorPattern, MemoryState, Template

log = logging.getLogger(__name__)


@dataclass(frozen=True)
class RetrievalResult:
    templates: tuple[tuple[Template, float], ...]
    error_patterns: tuple[ErrorPattern, ...]
    query_embedding: np.ndarray

    @property
    def template_list(self) -> list[Template]:
        return [t for t, _ in self.templates]

    @property
    def ids(self) -> list[str]:
        return [t.id for t, _ in self.templates]


def retrieve(
    query: str,
    memory: MemoryState,
    gateway: Gateway,
    params: EngineParams,
    *,
    mode: str = "train",
    k: int | None = None,
    theta_corr: float | None = None,
) -> RetrievalResult:
    if not query.strip():
        raise ValueError("query must be non-empty")
    k = params.k if k is None else k
    if k < 0:
        raise ValueError("k must be >= 0")
    threshold = params.theta_corr(mode) if theta_corr is None else theta_corr
    e_q = gateway.embed_one(query)
    hits = memory.template_index.top_k(e_q, k, threshold) if len(memory.template_index) else []
    templates = tuple((memory.ctm[h.id], h.score) for h in hits if h.id in memory.ctm)
    patterns = tuple(memory.epm.values())
    if params.epm_warn_size and len(patterns) > params.epm_warn_size:
        log.warning("error-pattern memory holds %d rules; every prompt carries all of them", len(patterns))
    return RetrievalResult(templates, patterns, e_q)
