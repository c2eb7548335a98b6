"""Stage III: fold one attempt's experience back into memory.

Success path (correct-template memory):

* nothing recalled: draft a template from the interaction and insert it;
* otherwise append the case to every recalled template, then ask for an
  action plan (none / update / delete / add) and apply it, gating each
  update behind a verification run on sampled cases;
* consolidate whenever the library exceeds capacity.

Failure path (error-pattern memory): summarize the failed attempts into
one rule, then either refine the closest existing pattern (similarity
strictly above ``theta_error``) or add the rule as a new pattern.
"""

from __future__ import annotations

import logging
import random
from dataclasses import dataclass, field, replace

from .ask import TranscriptEntry, ask
from .codec import (
    NONE_TEXT,
    ActionPlan,
    MergePlan,
    PromptKind,
    PromptLibrary,
    format_bad_cases,
    format_failed_attempts,
    format_reflections,
    format_templates_block,
)
from .config import EngineParams
from .errors import ProviderError
from .gateway import Gateway
from .memory import (
    BadCase,
    Case,
    MemoryState,
    Template,
    append_case,
    cap_cases,
    create_error_pattern,
    create_template,
    remove_template,
)
from .reflection import QueryItem, answer_prompt, evaluate, extract_final_answer
from .retrieval import RetrievalResult

log = logging.getLogger(__name__)


@dataclass(frozen=True)
class MergeEvent:
    merged_id: str
    member_ids: tuple[str, ...]


@dataclass
class MemoryDelta:
    added_templates: list[str] = field(default_factory=list)
    updated_templates: list[str] = field(default_factory=list)
    deleted_template_ids: list[str] = field(default_factory=list)
    appended_cases: list[str] = field(default_factory=list)
    added_patterns: list[str] = field(default_factory=list)
    refined_patterns: list[str] = field(default_factory=list)
    pattern_cases: list[str] = field(default_factory=list)
    merge_events: list[MergeEvent] = field(default_factory=list)
    verification_failures: int = 0
    skipped: list[str] = field(default_factory=list)
    consolidation_rounds: int = 0
    # the last consolidation round reduced nothing (empty or unusable plan)
    consolidation_stalled: bool = False
    ctm_size: int = 0
    epm_size: int = 0
    transcript: list[TranscriptEntry] = field(default_factory=list)

    @property
    def counts(self) -> dict[str, int]:
        return {
            "added_templates": len(self.added_templates),
            "updated_templates": len(self.updated_templates),
            "deleted_templates": len(self.deleted_template_ids),
            "appended_cases": len(self.appended_cases),
            "added_patterns": len(self.added_patterns),
            "refined_patterns": len(self.refined_patterns),
            "merges": len(self.merge_events),
            "verification_failures": self.verification_failures,
        }

    def absorb(self, other: "MemoryDelta") -> None:
        for name in (
            "added_templates",
            "updated_templates",
            "deleted_template_ids",
            "appended_cases",
            "added_patterns",
            "refined_patterns",
            "pattern_cases",
            "merge_events",
            "skipped",
            "transcript",
        ):
            getattr(self, name).extend(getattr(other, name))
        self.verification_failures += other.verification_failures
        self.consolidation_rounds += other.consolidation_rounds
        self.consolidation_stalled = other.consolidation_stalled


def _finish(delta: MemoryDelta, memory: MemoryState) -> MemoryDelta:
    delta.ctm_size = len(memory.ctm)
    delta.epm_size = len(memory.epm)
    return delta


def _reflections_block(reflections: list[str]) -> str:
    if not reflections:
        return ""
    return "<REFLECTIONS>\n" + format_reflections(reflections) + "\n</REFLECTIONS>"


def _failed_block(failed: list[tuple[str, str]]) -> str:
    if not failed:
        return ""
    return "<FAILED_ATTEMPTS>\n" + format_failed_attempts(failed) + "\n</FAILED_ATTEMPTS>"


def _insert_template(
    memory: MemoryState, gateway: Gateway, when_to_use: str, strategy: str, case: Case, delta: MemoryDelta
) -> Template:
    template = create_template(when_to_use, strategy, case, memory.step, id=memory.next_template_id())
    memory.put_template(template, gateway.embed_one(template.index_text))
    delta.added_templates.append(template.id)
    return template


def _create_from_interaction(
    item: QueryItem,
    case: Case,
    reflections: list[str],
    failed: list[tuple[str, str]],
    memory: MemoryState,
    gateway: Gateway,
    params: EngineParams,
    delta: MemoryDelta,
    library: PromptLibrary | None,
) -> Template | None:
    draft = ask(
        gateway,
        PromptKind.TEMPLATE_CREATE,
        {
            "question": item.prompt_text,
            "reflections": format_reflections(reflections, NONE_TEXT),
            "correct_pred": case.answer,
            "reflections_block": _failed_block(failed),
        },
        temperature=params.meta_temperature,
        transcript=delta.transcript,
        library=library,
    )
    if draft is None:
        delta.skipped.append("template_create: unparseable reply")
        return None
    return _insert_template(memory, gateway, draft.when_to_use, draft.strategy, case, delta)


def verify_updated_template(
    candidate: Template,
    original: Template,
    gateway: Gateway,
    params: EngineParams,
    *,
    rng: random.Random,
    instruction: str | None = None,
    library: PromptLibrary | None = None,
    transcript: list[TranscriptEntry] | None = None,
) -> bool:
    """True iff the candidate alone solves every sampled case of the original."""
    if not original.cases:
        raise ValueError("original template has no cases to verify against")
    n = min(params.verify_samples, len(original.cases))
    sample = rng.sample(list(original.cases), n)
    for case in sample:
        gold = extract_final_answer(case.answer) or case.answer.strip().strip("()").upper()
        probe = QueryItem(question=case.question, gold=gold, instruction=instruction)
        retrieval = RetrievalResult(((candidate, 1.0),), (), None)
        prompt = answer_prompt(probe, retrieval, [], params, library)
        try:
            result = gateway.complete(prompt, temperature=params.temperature)
        except ProviderError as exc:
            log.warning("verification call failed, rejecting update: %s", exc)
            return False
        if transcript is not None:
            transcript.append(TranscriptEntry("verify", prompt, result.text, result.usage))
        if not evaluate(extract_final_answer(result.text), gold):
            return False
    return True


def _apply_plan(
    plan: ActionPlan,
    item: QueryItem,
    case: Case,
    reflections: list[str],
    failed: list[tuple[str, str]],
    memory: MemoryState,
    gateway: Gateway,
    params: EngineParams,
    rng: random.Random,
    delta: MemoryDelta,
    library: PromptLibrary | None,
) -> None:
    fell_back = False
    for action in plan.actions:
        if action.action == "none":
            continue
        if action.action == "delete":
            if remove_template(memory, action.template_id):
                delta.deleted_template_ids.append(action.template_id)
            continue
        if action.action == "add":
            _insert_template(memory, gateway, action.when_to_use, action.strategy, case, delta)
            continue
        original = memory.ctm.get(action.template_id)
        if original is None:
            delta.skipped.append(f"update: {action.template_id} no longer present")
            continue
        candidate = replace(
            original,
            index_text=action.when_to_use or original.index_text,
            strategy_text=action.strategy or original.strategy_text,
            updated_at=memory.step,
        )
        if candidate.index_text == original.index_text and candidate.strategy_text == original.strategy_text:
            continue
        if verify_updated_template(
            candidate,
            original,
            gateway,
            params,
            rng=rng,
            instruction=item.instruction,
            library=library,
            transcript=delta.transcript,
        ):
            vector = gateway.embed_one(candidate.index_text) if candidate.index_text != original.index_text else None
            memory.put_template(candidate, vector)
            delta.updated_templates.append(candidate.id)
        else:
            delta.verification_failures += 1
            # one fallback template per interaction, however many updates fail
            if not fell_back:
                fell_back = True
                _create_from_interaction(
                    item, case, reflections, failed, memory, gateway, params, delta, library
                )


def update_after_success(
    item: QueryItem,
    final_answer: str,
    reflections: list[str],
    recalled: RetrievalResult,
    memory: MemoryState,
    gateway: Gateway,
    params: EngineParams,
    *,
    rng: random.Random,
    failed_attempts: list[tuple[str, str]] | None = None,
    library: PromptLibrary | None = None,
) -> MemoryDelta:
    delta = MemoryDelta()
    failed = list(failed_attempts or [])
    case = Case(item.prompt_text, final_answer if final_answer.strip() else item.gold)
    with memory.write_lock:
        recalled_ids = [t.id for t in recalled.template_list if t.id in memory.ctm]
        if not recalled_ids:
            _create_from_interaction(
                item, case, reflections, failed, memory, gateway, params, delta, library
            )
        else:
            for tid in recalled_ids:
                before = memory.ctm[tid]
                after = append_case(
                    before, case, memory.step, case_cap=params.case_cap, min_retained=params.min_retained
                )
                if after is not before:
                    memory.put_template(after)
                    delta.appended_cases.append(tid)
            plan = ask(
                gateway,
                PromptKind.TEMPLATE_UPDATE,
                {
                    "recalled_templates": format_templates_block(memory.ctm[t] for t in recalled_ids),
                    "question": item.prompt_text,
                    "correct_pred": case.answer,
                    "reflections_block": _reflections_block(reflections),
                },
                temperature=params.meta_temperature,
                transcript=delta.transcript,
                library=library,
                recalled_ids=recalled_ids,
            )
            if plan is None:
                delta.skipped.append("template_update: unparseable plan")
            else:
                _apply_plan(
                    plan, item, case, reflections, failed, memory, gateway, params, rng, delta, library
                )
        if len(memory.ctm) > params.capacity:
            delta.absorb(_consolidate(memory, gateway, params, library))
    return _finish(delta, memory)


def _merge_round(
    memory: MemoryState, gateway: Gateway, params: EngineParams, library: PromptLibrary | None
) -> MemoryDelta:
    delta = MemoryDelta(consolidation_rounds=1)
    reply = ask(
        gateway,
        PromptKind.TEMPLATE_MERGE,
        {
            "all_templates": format_templates_block(memory.ctm.values()),
            "total": str(len(memory.ctm)),
            "limit": str(params.capacity),
            "target": str(params.target),
        },
        temperature=params.meta_temperature,
        transcript=delta.transcript,
        library=library,
    )
    if reply is None:
        delta.skipped.append("template_merge: unparseable plan")
        delta.consolidation_stalled = True
        return delta
    plan: MergePlan = reply
    consumed: set[str] = set()
    for group in plan.groups:
        ids = group.template_ids
        problem = None
        if len(set(ids)) != len(ids):
            problem = "repeats an id"
        elif len(ids) < 2:
            problem = "has fewer than two members"
        elif consumed.intersection(ids):
            problem = "overlaps an earlier group"
        elif any(i not in memory.ctm for i in ids):
            problem = "names unknown ids"
        if problem:
            log.warning("dropping merge group %s: %s", list(ids), problem)
            delta.skipped.append(f"merge group {list(ids)} {problem}")
            continue
        consumed.update(ids)
        cases: list[Case] = []
        seen: set[str] = set()
        for tid in ids:
            for c in memory.ctm[tid].cases:
                if c.question not in seen:
                    seen.add(c.question)
                    cases.append(c)
        merged = Template(
            id=memory.next_template_id(),
            index_text=group.merged_when_to_use,
            strategy_text=group.merged_strategy,
            cases=cap_cases(tuple(cases), params.case_cap, params.min_retained),
            created_at=memory.step,
            updated_at=memory.step,
        )
        vector = gateway.embed_one(merged.index_text)
        for tid in ids:
            remove_template(memory, tid)
        memory.put_template(merged, vector)
        delta.merge_events.append(MergeEvent(merged.id, tuple(ids)))
    delta.consolidation_stalled = not delta.merge_events
    return delta


def _consolidate(
    memory: MemoryState, gateway: Gateway, params: EngineParams, library: PromptLibrary | None
) -> MemoryDelta:
    delta = MemoryDelta()
    while len(memory.ctm) > params.capacity:
        round_delta = _merge_round(memory, gateway, params, library)
        delta.absorb(round_delta)
        if round_delta.consolidation_stalled:
            break
    return delta


def consolidate(
    memory: MemoryState,
    gateway: Gateway,
    params: EngineParams,
    *,
    library: PromptLibrary | None = None,
) -> MemoryDelta:
    """Merge templates until the library is within capacity or the model declines.

    Each round shows every template to the model; groups naming unknown,
    repeated or already-merged ids are dropped. A round that merges nothing
    ends the pass, leaving memory above capacity until the next success.
    """
    with memory.write_lock:
        return _finish(_consolidate(memory, gateway, params, library), memory)


def update_after_failure(
    item: QueryItem,
    reflections: list[str],
    failed_attempts: list[tuple[str, str]],
    memory: MemoryState,
    gateway: Gateway,
    params: EngineParams,
    *,
    library: PromptLibrary | None = None,
) -> MemoryDelta:
    if not failed_attempts:
        raise ValueError("update_after_failure needs at least one failed attempt")
    delta = MemoryDelta()
    last_answer = failed_attempts[-1][0].strip() or "(no answer)"
    bad_case = BadCase(
        question=item.prompt_text,
        gold_answer=item.gold,
        wrong_answer=last_answer,
        reflection=reflections[-1] if reflections else "",
    )
    with memory.write_lock:
        _record_failure(item, reflections, failed_attempts, bad_case, memory, gateway, params, delta, library)
        if len(memory.ctm) > params.capacity:
            # only reachable after an earlier stalled consolidation
            delta.absorb(_consolidate(memory, gateway, params, library))
    return _finish(delta, memory)


def _record_failure(
    item: QueryItem,
    reflections: list[str],
    failed_attempts: list[tuple[str, str]],
    bad_case: BadCase,
    memory: MemoryState,
    gateway: Gateway,
    params: EngineParams,
    delta: MemoryDelta,
    library: PromptLibrary | None,
) -> None:
    summary = ask(
        gateway,
        PromptKind.ERROR_SUMMARIZE,
        {
            "question": item.prompt_text,
            "correct_pred": item.gold,
            "failed_attempts": format_failed_attempts(failed_attempts),
        },
        temperature=params.meta_temperature,
        transcript=delta.transcript,
        library=library,
    )
    if summary is None:
        delta.skipped.append("error_summarize: unparseable reply")
        fallback = next((r for r in reversed(reflections) if r.strip()), "")
        rule = fallback or f"Re-check the reasoning on questions like: {item.question.strip()[:200]}"
        _add_pattern(memory, gateway, rule, bad_case, delta)
        return
    rule = summary.reflection
    e_rule = gateway.embed_one(rule)
    scores = memory.pattern_index.scores(e_rule) if len(memory.pattern_index) else {}
    similar = [(s, pid) for pid, s in scores.items() if s > params.theta_error and pid in memory.epm]
    if not similar:
        _add_pattern(memory, gateway, rule, bad_case, delta, vector=e_rule)
        return
    _, best_id = min(similar, key=lambda sp: (-sp[0], sp[1]))
    pattern = memory.epm[best_id]
    revision = ask(
        gateway,
        PromptKind.ERROR_UPDATE,
        {
            "current_pattern": pattern.pattern_text,
            "historical_bad_cases": format_bad_cases(pattern),
            "new_question": bad_case.question,
            "new_ground_truth": bad_case.gold_answer,
            "new_wrong_pred": bad_case.wrong_answer,
            "new_reflection": bad_case.reflection or NONE_TEXT,
        },
        temperature=params.meta_temperature,
        transcript=delta.transcript,
        library=library,
    )
    if revision is None:
        delta.skipped.append("error_update: unparseable reply")
        _add_pattern(memory, gateway, rule, bad_case, delta, vector=e_rule)
        return
    vector = None
    text = pattern.pattern_text
    if revision.updated and revision.pattern and revision.pattern != pattern.pattern_text:
        text = revision.pattern
        vector = gateway.embed_one(text)
        delta.refined_patterns.append(best_id)
    memory.put_pattern(
        replace(
            pattern,
            pattern_text=text,
            bad_cases=pattern.bad_cases + (bad_case,),
            updated_at=memory.step,
        ),
        vector,
    )
    delta.pattern_cases.append(best_id)


def _add_pattern(memory, gateway, rule, bad_case, delta, vector=None) -> None:
    pattern = create_error_pattern(rule, bad_case, memory.step, id=memory.next_pattern_id())
    memory.put_pattern(pattern, vector if vector is not None else gateway.embed_one(pattern.pattern_text))
    delta.added_patterns.append(pattern.id)
