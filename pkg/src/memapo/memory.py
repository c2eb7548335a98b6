"""Dual-memory domain types and their local mutation primitives.

Templates and error patterns are immutable values; :class:`MemoryState`
is the mutable container that owns both repositories and their embeddings.
"""

from __future__ import annotations

import logging
import threading
from dataclasses import dataclass, field, replace

from .errors import EmptyField
from .index import VectorIndex

log = logging.getLogger(__name__)

DEFAULT_CASE_CAP = 20
DEFAULT_MIN_RETAINED = 3


def _require(**fields: str) -> None:
    for name, value in fields.items():
        if not isinstance(value, str) or not value.strip():
            raise EmptyField(f"{name} must be non-empty")


@dataclass(frozen=True)
class Case:
    question: str
    answer: str

    def __post_init__(self):
        _require(question=self.question, answer=self.answer)


@dataclass(frozen=True)
class BadCase:
    question: str
    gold_answer: str
    wrong_answer: str
    reflection: str = ""

    def __post_init__(self):
        _require(
            question=self.question,
            gold_answer=self.gold_answer,
            wrong_answer=self.wrong_answer,
        )


@dataclass(frozen=True)
class Template:
    id: str
    index_text: str
    strategy_text: str
    cases: tuple[Case, ...]
    created_at: int
    updated_at: int

    @property
    def latest_case(self) -> Case:
        return self.cases[-1]


@dataclass(frozen=True)
class ErrorPattern:
    id: str
    pattern_text: str
    bad_cases: tuple[BadCase, ...]
    created_at: int
    updated_at: int


def create_template(
    index_text: str, strategy_text: str, case: Case, step: int, *, id: str
) -> Template:
    _require(index_text=index_text, strategy_text=strategy_text)
    if not isinstance(case, Case):
        raise TypeError("case must be a Case")
    return Template(
        id=id,
        index_text=index_text.strip(),
        strategy_text=strategy_text.strip(),
        cases=(case,),
        created_at=step,
        updated_at=step,
    )


def cap_cases(
    cases: tuple[Case, ...], case_cap: int, min_retained: int = DEFAULT_MIN_RETAINED
) -> tuple[Case, ...]:
    """Drop the oldest cases beyond ``case_cap``, keeping at least ``min_retained``."""
    keep = max(case_cap, min_retained)
    if len(cases) <= keep:
        return cases
    return cases[len(cases) - keep:]


def append_case(
    template: Template,
    case: Case,
    step: int,
    *,
    case_cap: int = DEFAULT_CASE_CAP,
    min_retained: int = DEFAULT_MIN_RETAINED,
) -> Template:
    if not isinstance(case, Case):
        raise TypeError("case must be a Case")
    _require(question=case.question, answer=case.answer)
    if any(c.question == case.question for c in template.cases):
        return template
    cases = cap_cases(template.cases + (case,), case_cap, min_retained)
    return replace(template, cases=cases, updated_at=step)


def create_error_pattern(
    pattern_text: str, bad_case: BadCase, step: int, *, id: str
) -> ErrorPattern:
    _require(pattern_text=pattern_text)
    return ErrorPattern(
        id=id,
        pattern_text=pattern_text.strip(),
        bad_cases=(bad_case,),
        created_at=step,
        updated_at=step,
    )


@dataclass(eq=False)
class MemoryState:
    """CTM + EPM with their embedding indexes and id counters."""

    ctm: dict[str, Template] = field(default_factory=dict)
    epm: dict[str, ErrorPattern] = field(default_factory=dict)
    step: int = 0
    template_seq: int = 0
    pattern_seq: int = 0
    template_index: VectorIndex = field(default_factory=VectorIndex)
    pattern_index: VectorIndex = field(default_factory=VectorIndex)

    def __post_init__(self):
        self.write_lock = threading.Lock()

    def next_template_id(self) -> str:
        self.template_seq += 1
        return f"t-{self.template_seq}"

    def next_pattern_id(self) -> str:
        self.pattern_seq += 1
        return f"e-{self.pattern_seq}"

    def put_template(self, template: Template, vector=None) -> None:
        self.ctm[template.id] = template
        if vector is not None:
            self.template_index.upsert(template.id, vector)

    def put_pattern(self, pattern: ErrorPattern, vector=None) -> None:
        self.epm[pattern.id] = pattern
        if vector is not None:
            self.pattern_index.upsert(pattern.id, vector)

    def copy(self) -> "MemoryState":
        return MemoryState(
            ctm=dict(self.ctm),
            epm=dict(self.epm),
            step=self.step,
            template_seq=self.template_seq,
            pattern_seq=self.pattern_seq,
            template_index=self.template_index.copy(),
            pattern_index=self.pattern_index.copy(),
        )

    def __eq__(self, other: object) -> bool:
        if not isinstance(other, MemoryState):
            return NotImplemented
        return (
            list(self.ctm.items()) == list(other.ctm.items())
            and list(self.epm.items()) == list(other.epm.items())
            and self.step == other.step
            and self.template_seq == other.template_seq
            and self.pattern_seq == other.pattern_seq
            and self.template_index == other.template_index
            and self.pattern_index == other.pattern_index
        )

    def __repr__(self) -> str:
        return f"MemoryState(|ctm|={len(self.ctm)}, |epm|={len(self.epm)}, step={self.step})"


def remove_template(state: MemoryState, id: str) -> bool:
    """Delete a template and its vector. Unknown ids log a warning and return False."""
    if id not in state.ctm:
        log.warning("remove_template: unknown template id %r", id)
        return False
    del state.ctm[id]
    if id in state.template_index:
        state.template_index.remove(id)
    return True

