"""Stage II: answer with the augmented prompt, grade, reflect and retry.

Training runs the full reflect-retry loop; inference is a single pass.
Neither touches memory.
"""

from __future__ import annotations

import logging
import re
from dataclasses import dataclass, field

from .ask import TranscriptEntry, ask
from .codec import (
    NONE_TEXT,
    PromptKind,
    PromptLibrary,
    format_reflections,
    format_rules,
    format_templates_block,
    render,
)
from .config import EngineParams
from .errors import ProviderError
from .gateway import Gateway
from .memory import MemoryState
from .retrieval import RetrievalResult, retrieve

log = logging.getLogger(__name__)

REFLECTION_UNAVAILABLE = "(reflection unavailable)"

_ANSWER = re.compile(r"answer\s*:\s*\(?\s*([a-z])\s*\)?(?![a-z])", re.IGNORECASE)


@dataclass(frozen=True)
class QueryItem:
    question: str
    gold: str
    options: tuple[str, ...] = ()
    id: str = ""
    dataset: str = ""
    instruction: str | None = None

    def __post_init__(self):
        if not self.question.strip():
            raise ValueError("question must be non-empty")
        if not self.gold.strip():
            raise ValueError("gold must be non-empty")

    @property
    def prompt_text(self) -> str:
        if not self.options:
            return self.question
        return self.question + "\n" + "\n".join(self.options)


@dataclass
class AttemptOutcome:
    success: bool
    final_answer: str
    extracted_label: str | None
    reflections: list[str] = field(default_factory=list)
    attempts_used: int = 0
    transcript: list[TranscriptEntry] = field(default_factory=list)
    # (answer text, reflection written about it or "") per failed attempt
    failed_attempts: list[tuple[str, str]] = field(default_factory=list)
    error: str | None = None

    @property
    def chat_calls(self) -> int:
        return len(self.transcript)


def extract_final_answer(reply: str) -> str | None:
    """Last ``Answer: (X)`` / ``Answer: X`` letter in the reply, uppercased."""
    matches = _ANSWER.findall(reply or "")
    return matches[-1].upper() if matches else None


def evaluate(pred_label: str | None, gold: str) -> bool:
    return pred_label is not None and pred_label.strip().upper() == gold.strip().upper()


def answer_prompt(
    item: QueryItem,
    retrieval: RetrievalResult | None,
    reflections: list[str],
    params: EngineParams,
    library: PromptLibrary | None = None,
) -> str:
    templates = retrieval.template_list if retrieval else []
    patterns = retrieval.error_patterns if retrieval else ()
    return render(
        PromptKind.ANSWER,
        {
            "init_instruction": item.instruction or params.init_instruction,
            "rules": format_rules(patterns),
            "templates": format_templates_block(templates),
            "reflections": format_reflections(reflections),
            "question": item.prompt_text,
            "output_format": params.output_format,
        },
        library,
    )


def run_training_attempt(
    item: QueryItem,
    memory: MemoryState,
    gateway: Gateway,
    params: EngineParams,
    *,
    library: PromptLibrary | None = None,
) -> tuple[AttemptOutcome, RetrievalResult]:
    """Generate, grade, and on failure reflect and retry up to ``max_retries`` times.

    Provider errors propagate; the caller decides whether to skip the item.
    """
    recalled = retrieve(item.prompt_text, memory, gateway, params, mode="train")
    out = AttemptOutcome(success=False, final_answer="", extracted_label=None)
    while True:
        prompt = answer_prompt(item, recalled, out.reflections, params, library)
        result = gateway.complete(prompt, temperature=params.temperature)
        out.transcript.append(TranscriptEntry("answer", prompt, result.text, result.usage))
        out.attempts_used += 1
        out.final_answer = result.text
        out.extracted_label = extract_final_answer(result.text)
        if evaluate(out.extracted_label, item.gold):
            out.success = True
            return out, recalled
        out.failed_attempts.append((result.text, ""))
        if out.attempts_used >= 1 + params.max_retries:
            return out, recalled
        reply = ask(
            gateway,
            PromptKind.REFLECT,
            {
                "question": item.prompt_text,
                "rules": format_rules(recalled.error_patterns),
                "templates": format_templates_block(recalled.template_list),
                "reflections": format_reflections(out.reflections, NONE_TEXT),
                "wrong_pred": result.text,
            },
            temperature=params.meta_temperature,
            transcript=out.transcript,
            library=library,
        )
        reflection = reply.reflection if reply is not None else REFLECTION_UNAVAILABLE
        out.reflections.append(reflection)
        out.failed_attempts[-1] = (result.text, reflection)


def run_inference(
    item: QueryItem,
    memory: MemoryState,
    gateway: Gateway,
    params: EngineParams,
    *,
    library: PromptLibrary | None = None,
) -> AttemptOutcome:
    """One retrieval and one generation; provider failures mark the item wrong."""
    out = AttemptOutcome(success=False, final_answer="", extracted_label=None)
    try:
        recalled = retrieve(item.prompt_text, memory, gateway, params, mode="infer")
        prompt = answer_prompt(item, recalled, [], params, library)
        result = gateway.complete(prompt, temperature=params.temperature)
    except ProviderError as exc:
        log.warning("inference failed for %s: %s", item.id or item.question[:40], exc)
        out.error = str(exc)
        return out
    out.transcript.append(TranscriptEntry("answer", prompt, result.text, result.usage))
    out.attempts_used = 1
    out.final_answer = result.text
    out.extracted_label = extract_final_answer(result.text)
    out.success = evaluate(out.extracted_label, item.gold)
    return out
