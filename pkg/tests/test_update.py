import random

import numpy as np
import pytest

from memapo.config import EngineParams
from memapo.errors import TransportError
from memapo.gateway import ScriptedProvider
from memapo.memory import BadCase, Case, MemoryState, append_case, create_error_pattern, create_template
from memapo.reflection import QueryItem
from memapo.retrieval import RetrievalResult
from memapo.update import (
    consolidate,
    update_after_failure,
    update_after_success,
    verify_updated_template,
)

from conftest import (
    at_angle,
    basis,
    create_reply,
    make_gateway,
    merge_reply,
    plan_reply,
    revision_reply,
    summary_reply,
)

ITEM = QueryItem("Which is larger, 3/7 or 4/9?", "B", ("(A) 3/7", "(B) 4/9"), id="toy:1")
FINAL = "Cross-multiply: 27 < 28. Answer: (B)"
RIGHT, WRONG = "Answer: (B)", "Answer: (A)"


def seeded(n, dim=64):
    memory = MemoryState()
    for i in range(n):
        tid = memory.next_template_id()
        memory.put_template(
            create_template(f"when {i}", f"strategy {i}", Case(f"seed q{i}", "Answer: (B)"), 0, id=tid),
            basis(dim, i % dim) + 0.01 * i,
        )
    return memory


def recall(memory, *ids):
    return RetrievalResult(tuple((memory.ctm[i], 0.9) for i in ids), tuple(memory.epm.values()), None)


def success(memory, replies, *ids, params=None, reflections=(), failed=None, seed=42):
    provider = ScriptedProvider(replies)
    gw = make_gateway(provider)
    delta = update_after_success(
        ITEM,
        FINAL,
        list(reflections),
        recall(memory, *ids),
        memory,
        gw,
        params or EngineParams(),
        rng=random.Random(seed),
        failed_attempts=failed,
    )
    return delta, provider


# success path -----------------------------------------------------------------


def test_empty_recall_creates_template():
    memory = MemoryState()
    delta, provider = success(memory, [create_reply("comparing fractions", "cross-multiply")])
    assert list(memory.ctm) == ["t-1"]
    t = memory.ctm["t-1"]
    assert (t.index_text, t.strategy_text) == ("comparing fractions", "cross-multiply")
    assert t.cases == (Case(ITEM.prompt_text, FINAL),)
    assert "t-1" in memory.template_index
    assert delta.added_templates == ["t-1"]
    # failed attempts ride along in the create prompt
    assert "<FAILED_ATTEMPTS>" not in provider.requests[0].prompt_text


def test_create_prompt_carries_failed_attempts():
    memory = MemoryState()
    _, provider = success(
        memory, [create_reply("w", "s")], reflections=["flip the sign"], failed=[(WRONG, "flip the sign")]
    )
    text = provider.requests[0].prompt_text
    assert "<FAILED_ATTEMPTS>\nAttempt 1:\nAnswer: (A)\nReflection: flip the sign\n</FAILED_ATTEMPTS>" in text
    assert "<REFLECTIONs>\n1. flip the sign\n</REFLECTIONs>" in text


def test_none_action_only_appends_case():
    memory = seeded(1)
    before = memory.ctm["t-1"]
    delta, _ = success(memory, [plan_reply({"action": "none", "template_id": "t-1"})], "t-1")
    after = memory.ctm["t-1"]
    assert [c.question for c in after.cases] == ["seed q0", ITEM.prompt_text]
    assert (after.index_text, after.strategy_text) == (before.index_text, before.strategy_text)
    assert list(memory.ctm) == ["t-1"]
    assert delta.appended_cases == ["t-1"] and delta.counts["added_templates"] == 0


def test_plan_prompt_shows_appended_case_and_reflections():
    memory = seeded(1)
    _, provider = success(
        memory, [plan_reply({"action": "none", "template_id": "t-1"})], "t-1", reflections=["mind the sign"]
    )
    text = provider.requests[0].prompt_text
    assert "[t-1] WHEN TO USE: when 0" in text
    assert f"Question: {ITEM.prompt_text}" in text
    assert "<REFLECTIONS>\n1. mind the sign\n</REFLECTIONS>" in text


def test_update_rejected_falls_back_to_create():
    memory = seeded(1)
    before = memory.ctm["t-1"]
    delta, provider = success(
        memory,
        [
            plan_reply({"action": "update", "template_id": "t-1", "when_to_use": None, "strategy": "bad"}),
            WRONG,
            create_reply("fallback scenario", "fallback strategy"),
        ],
        "t-1",
    )
    t1 = memory.ctm["t-1"]
    assert t1.strategy_text == before.strategy_text and t1.index_text == before.index_text
    assert len(t1.cases) == 2
    assert list(memory.ctm) == ["t-1", "t-2"]
    assert memory.ctm["t-2"].strategy_text == "fallback strategy"
    assert delta.verification_failures == 1
    # verification prompt shows only the candidate and no rules
    verify = provider.requests[1].prompt_text
    assert "STRATEGY: bad" in verify and "## RULES" in verify and "(none)" in verify
    assert "REFLECTIONS" not in verify


def test_update_accepted_and_reembedded():
    memory = seeded(1)
    old_vec = memory.template_index.get("t-1")
    delta, _ = success(
        memory,
        [
            plan_reply({"action": "update", "template_id": "t-1", "when_to_use": "fraction order", "strategy": "better"}),
            RIGHT,
            RIGHT,
        ],
        "t-1",
    )
    t1 = memory.ctm["t-1"]
    assert (t1.index_text, t1.strategy_text) == ("fraction order", "better")
    assert delta.updated_templates == ["t-1"] and delta.verification_failures == 0
    assert not np.array_equal(memory.template_index.get("t-1"), old_vec)


def test_strategy_only_update_keeps_vector():
    memory = seeded(1)
    old_vec = memory.template_index.get("t-1")
    success(
        memory,
        [plan_reply({"action": "update", "template_id": "t-1", "when_to_use": "null", "strategy": "better"}), RIGHT, RIGHT],
        "t-1",
    )
    assert memory.ctm["t-1"].strategy_text == "better"
    assert np.array_equal(memory.template_index.get("t-1"), old_vec)


def test_delete_and_add():
    memory = seeded(2)
    delta, _ = success(
        memory,
        [
            plan_reply(
                {"action": "delete", "template_id": "t-1"},
                {"action": "none", "template_id": "t-2"},
                {"action": "add", "when_to_use": "new kind", "strategy": "new way"},
            )
        ],
        "t-1",
        "t-2",
    )
    assert list(memory.ctm) == ["t-2", "t-3"]
    assert "t-1" not in memory.template_index
    assert memory.ctm["t-3"].cases == (Case(ITEM.prompt_text, FINAL),)
    assert delta.deleted_template_ids == ["t-1"] and delta.added_templates == ["t-3"]


def test_only_one_fallback_per_stage():
    memory = seeded(2)
    delta, provider = success(
        memory,
        [
            plan_reply(
                {"action": "update", "template_id": "t-1", "strategy": "x", "when_to_use": None},
                {"action": "update", "template_id": "t-2", "strategy": "y", "when_to_use": None},
            ),
            WRONG,
            create_reply("fb", "fb"),
            WRONG,
        ],
        "t-1",
        "t-2",
    )
    assert delta.verification_failures == 2
    assert delta.added_templates == ["t-3"]
    assert provider.pending == 0


def test_unparseable_plan_keeps_case_appends():
    memory = seeded(1)
    delta, provider = success(memory, ["nope", "still nope"], "t-1")
    assert len(memory.ctm["t-1"].cases) == 2
    assert delta.skipped == ["template_update: unparseable plan"]
    assert len(provider.requests) == 2


def test_plan_reasked_once():
    memory = seeded(1)
    delta, _ = success(memory, [plan_reply(), plan_reply({"action": "none", "template_id": "t-1"})], "t-1")
    assert delta.skipped == []
    assert len(delta.transcript) == 2


# verification -----------------------------------------------------------------


def verifier(n_cases, replies, seed=0):
    original = create_template("w", "s", Case("c0", "Answer: (B)"), 0, id="t-1")
    for i in range(1, n_cases):
        original = append_case(original, Case(f"c{i}", "(B)"), i)
    candidate = original.__class__(**{**original.__dict__, "strategy_text": "candidate"})
    provider = ScriptedProvider(replies)
    ok = verify_updated_template(
        candidate, original, make_gateway(provider), EngineParams(), rng=random.Random(seed)
    )
    return ok, provider


def test_verify_all_pass():
    ok, provider = verifier(5, [RIGHT] * 3)
    assert ok and len(provider.requests) == 3


def test_verify_one_wrong():
    ok, _ = verifier(3, [RIGHT, WRONG, RIGHT])
    assert not ok


def test_verify_single_case():
    ok, provider = verifier(1, [RIGHT, RIGHT, RIGHT])
    assert ok and len(provider.requests) == 1 and provider.pending == 2


def test_verify_sampling_is_seeded():
    def asked(seed):
        _, provider = verifier(10, [RIGHT] * 3, seed)
        return [r.prompt_text.split("<QUESTION>\n")[1].split("\n")[0] for r in provider.requests]

    assert asked(1) == asked(1)
    assert len(set(asked(1))) == 3


def test_verify_provider_error_is_failure():
    ok, _ = verifier(3, [RIGHT, TransportError("down")])
    assert not ok


# consolidation ----------------------------------------------------------------


def test_consolidate_31_to_30():
    memory = seeded(31)
    provider = ScriptedProvider([merge_reply((["t-1", "t-2"], "merged when", "merged strategy"))])
    delta = consolidate(memory, make_gateway(provider), EngineParams())
    assert len(memory.ctm) == 30
    merged = memory.ctm["t-32"]
    assert [c.question for c in merged.cases] == ["seed q0", "seed q1"]
    assert "t-1" not in memory.ctm and "t-1" not in memory.template_index
    assert [(e.merged_id, e.member_ids) for e in delta.merge_events] == [("t-32", ("t-1", "t-2"))]
    assert "has grown too large (31) templates, limit is 30" in provider.requests[0].prompt_text


def test_consolidate_empty_plan():
    memory = seeded(31)
    delta = consolidate(memory, make_gateway(ScriptedProvider([merge_reply()])), EngineParams())
    assert len(memory.ctm) == 31 and delta.consolidation_stalled


def test_overlapping_groups_first_wins(caplog):
    memory = seeded(31)
    provider = ScriptedProvider(
        [merge_reply((["t-1", "t-2"], "a", "a"), (["t-2", "t-3"], "b", "b"), (["t-4", "t-99"], "c", "c"))]
    )
    delta = consolidate(memory, make_gateway(provider), EngineParams())
    assert len(memory.ctm) == 30 and "t-3" in memory.ctm and "t-4" in memory.ctm
    assert len(delta.merge_events) == 1
    assert "overlaps an earlier group" in caplog.text and "unknown ids" in caplog.text


def test_consolidation_runs_rounds_until_within_capacity():
    memory = seeded(32)
    provider = ScriptedProvider(
        [merge_reply((["t-1", "t-2"], "a", "a")), merge_reply((["t-3", "t-4"], "b", "b"))]
    )
    delta = consolidate(memory, make_gateway(provider), EngineParams())
    assert len(memory.ctm) == 30 and delta.consolidation_rounds == 2


def test_merged_cases_deduped_and_capped():
    memory = MemoryState()
    for i, qs in enumerate([["a", "b", "c"], ["b", "d"]]):
        t = create_template(f"w{i}", "s", Case(qs[0], "x"), 0, id=memory.next_template_id())
        for q in qs[1:]:
            t = append_case(t, Case(q, "x"), 0)
        memory.put_template(t, basis(64, i))
    consolidate(
        memory,
        make_gateway(ScriptedProvider([merge_reply((["t-1", "t-2"], "w", "s"))])),
        EngineParams(capacity=1, target=1, case_cap=3, min_retained=3),
    )
    assert [c.question for c in memory.ctm["t-3"].cases] == ["b", "c", "d"]


def test_success_stage_triggers_consolidation():
    memory = seeded(30)
    delta, _ = success(
        memory,
        [
            plan_reply({"action": "none", "template_id": "t-1"}, {"action": "add", "when_to_use": "w", "strategy": "s"}),
            merge_reply((["t-2", "t-3"], "m", "m")),
        ],
        "t-1",
    )
    assert delta.ctm_size == 30 and len(delta.merge_events) == 1


# failure path -----------------------------------------------------------------

RULE = "Always convert fractions to a common denominator first."


def fail(memory, replies, embeddings=None, reflections=("compare carefully",), params=None):
    provider = ScriptedProvider(replies, embeddings=embeddings, embedding_dim=8)
    delta = update_after_failure(
        ITEM, list(reflections), [(WRONG, r) for r in reflections] or [(WRONG, "")], memory,
        make_gateway(provider), params or EngineParams(),
    )
    return delta, provider


def with_pattern(vec):
    memory = MemoryState()
    memory.put_pattern(
        create_error_pattern("Old rule.", BadCase("old q", "A", "B", "old ref"), 0, id="e-1"), vec
    )
    memory.pattern_seq = 1
    return memory


def test_first_failure_adds_pattern():
    memory = MemoryState()
    delta, provider = fail(memory, [summary_reply(RULE)])
    p = memory.epm["e-1"]
    assert p.pattern_text == RULE
    assert p.bad_cases == (BadCase(ITEM.prompt_text, "B", WRONG, "compare carefully"),)
    assert delta.added_patterns == ["e-1"]
    assert "Attempt 1:\nAnswer: (A)\nReflection: compare carefully" in provider.requests[0].prompt_text


def test_similar_pattern_not_updated():
    base = basis(8, 0)
    memory = with_pattern(base)
    delta, provider = fail(
        memory,
        [summary_reply(RULE), revision_reply("false", "Old rule.")],
        embeddings={RULE: at_angle(base, basis(8, 1), 0.9)},
    )
    assert list(memory.epm) == ["e-1"]
    p = memory.epm["e-1"]
    assert p.pattern_text == "Old rule." and len(p.bad_cases) == 2
    assert delta.refined_patterns == [] and delta.pattern_cases == ["e-1"]
    text = provider.requests[1].prompt_text
    assert "<CURRENT_PATTERN>\nOld rule.\n</CURRENT_PATTERN>" in text
    assert "question: old q" in text and "reflection: compare carefully" in text


def test_similar_pattern_refined_and_reembedded():
    base = basis(8, 0)
    memory = with_pattern(base)
    delta, _ = fail(
        memory,
        [summary_reply(RULE), revision_reply(True, "Refined rule.")],
        embeddings={RULE: at_angle(base, basis(8, 1), 0.9), "Refined rule.": basis(8, 3)},
    )
    assert memory.epm["e-1"].pattern_text == "Refined rule."
    assert np.array_equal(memory.pattern_index.get("e-1"), basis(8, 3))
    assert delta.refined_patterns == ["e-1"]


def test_dissimilar_pattern_gets_sibling():
    base = basis(8, 0)
    memory = with_pattern(base)
    fail(memory, [summary_reply(RULE)], embeddings={RULE: at_angle(base, basis(8, 1), 0.5)})
    assert list(memory.epm) == ["e-1", "e-2"]
    assert memory.epm["e-1"].bad_cases == (BadCase("old q", "A", "B", "old ref"),)


def test_threshold_is_strict():
    base = basis(8, 0)
    memory = with_pattern(base)
    # exactly at the gate: cos = 0.7 is not "similar"
    vec = np.zeros(8)
    vec[0], vec[1] = 0.7, np.sqrt(1 - 0.49)
    fail(memory, [summary_reply(RULE)], embeddings={RULE: vec}, params=EngineParams(theta_error=float(vec[0] / np.sqrt((vec * vec).sum()))))
    assert len(memory.epm) == 2


def test_best_match_refined_only():
    base = basis(8, 0)
    memory = MemoryState()
    for pid, cos in [("e-1", 0.8), ("e-2", 0.95)]:
        memory.put_pattern(create_error_pattern(f"rule {pid}", BadCase("q", "A", "B"), 0, id=pid), at_angle(base, basis(8, 2), cos))
    memory.pattern_seq = 2
    delta, provider = fail(memory, [summary_reply(RULE), revision_reply(False, "x")], embeddings={RULE: base})
    assert delta.pattern_cases == ["e-2"]
    assert len(memory.epm["e-1"].bad_cases) == 1


def test_unparseable_summary_keeps_failure_signal():
    memory = MemoryState()
    delta, _ = fail(memory, ["junk", "junk"], reflections=["check the sign"])
    assert memory.epm["e-1"].pattern_text == "check the sign"
    assert delta.skipped == ["error_summarize: unparseable reply"]


def test_unparseable_revision_adds_new_pattern():
    base = basis(8, 0)
    memory = with_pattern(base)
    fail(memory, [summary_reply(RULE), "?", "?"], embeddings={RULE: base})
    assert [p.pattern_text for p in memory.epm.values()] == ["Old rule.", RULE]


def test_failure_without_reflections():
    memory = MemoryState()
    fail(memory, [summary_reply(RULE)], reflections=())
    assert memory.epm["e-1"].bad_cases[0].reflection == ""


def test_failure_needs_attempts():
    with pytest.raises(ValueError):
        update_after_failure(ITEM, [], [], MemoryState(), make_gateway(ScriptedProvider()), EngineParams())


def test_failure_stage_retries_stalled_consolidation():
    memory = seeded(31, dim=8)
    delta, _ = fail(memory, [summary_reply(RULE), merge_reply((["t-1", "t-2"], "m", "m"))])
    assert len(memory.ctm) == 30 and delta.ctm_size == 30
