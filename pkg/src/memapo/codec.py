"""Meta-prompt rendering and structured-reply parsing.

The seven prompt texts live in ``memapo/prompts/*.txt`` and can be
overridden by pointing a :class:`PromptLibrary` at a directory holding files
with the same names. Placeholders are ``{slot_name}``; JSON braces in the
prompt bodies never match that pattern, so no escaping is needed.
"""

from __future__ import annotations

import json
import re
from dataclasses import dataclass
from enum import Enum
from importlib import resources
from pathlib import Path
from typing import Iterable, Mapping, Sequence

from .errors import MissingBinding, NoJsonFound, SchemaViolation, UnknownPlaceholder
from .memory import ErrorPattern, Template


class PromptKind(str, Enum):
    ANSWER = "answer"
    REFLECT = "reflect"
    TEMPLATE_CREATE = "template_create"
    TEMPLATE_UPDATE = "template_update"
    TEMPLATE_MERGE = "template_merge"
    ERROR_SUMMARIZE = "error_summarize"
    ERROR_UPDATE = "error_update"


SLOTS: dict[PromptKind, frozenset[str]] = {
    PromptKind.ANSWER: frozenset(
        {"init_instruction", "rules", "templates", "reflections", "question", "output_format"}
    ),
    PromptKind.REFLECT: frozenset({"question", "rules", "templates", "reflections", "wrong_pred"}),
    PromptKind.TEMPLATE_CREATE: frozenset(
        {"question", "reflections", "correct_pred", "reflections_block"}
    ),
    PromptKind.TEMPLATE_UPDATE: frozenset(
        {"recalled_templates", "question", "correct_pred", "reflections_block"}
    ),
    PromptKind.TEMPLATE_MERGE: frozenset({"all_templates", "total", "limit", "target"}),
    PromptKind.ERROR_SUMMARIZE: frozenset({"question", "correct_pred", "failed_attempts"}),
    PromptKind.ERROR_UPDATE: frozenset(
        {
            "current_pattern",
            "historical_bad_cases",
            "new_question",
            "new_ground_truth",
            "new_wrong_pred",
            "new_reflection",
        }
    ),
}

# slots whose whole section disappears when bound to an empty string
OPTIONAL: dict[PromptKind, frozenset[str]] = {
    PromptKind.ANSWER: frozenset({"reflections"}),
    PromptKind.TEMPLATE_CREATE: frozenset({"reflections_block"}),
    PromptKind.TEMPLATE_UPDATE: frozenset({"reflections_block"}),
}

PLACEHOLDER = re.compile(r"\{([a-z_]+)\}")
_OPEN_TAG = re.compile(r"^<([A-Za-z_]+)>$")

NONE_TEXT = "(none)"
DEFAULT_INSTRUCTION = "Let's solve the problem"
DEFAULT_OUTPUT_FORMAT = (
    'After your reasoning, end with a final line of the form "Answer: (X)", '
    "where X is the letter of the chosen option."
)


class PromptLibrary:
    """Stored meta-prompt texts, optionally overridden from a directory."""

    def __init__(self, override_dir: str | Path | None = None):
        self.override_dir = Path(override_dir) if override_dir else None
        self._texts: dict[PromptKind, str] = {}

    def text(self, kind: PromptKind) -> str:
        kind = PromptKind(kind)
        if kind not in self._texts:
            name = f"{kind.value}.txt"
            if self.override_dir and (self.override_dir / name).is_file():
                raw = (self.override_dir / name).read_text(encoding="utf-8")
            else:
                raw = resources.files("memapo").joinpath("prompts", name).read_text(encoding="utf-8")
            self._texts[kind] = raw.rstrip("\n")
        return self._texts[kind]

    def render(self, kind: PromptKind, bindings: Mapping[str, str]) -> str:
        kind = PromptKind(kind)
        template = self.text(kind)
        found = set(PLACEHOLDER.findall(template))
        unknown = found - SLOTS[kind]
        if unknown:
            raise UnknownPlaceholder(f"{kind.value}: unexpected placeholders {sorted(unknown)}")
        missing = sorted(SLOTS[kind] - set(bindings))
        if missing:
            raise MissingBinding(f"{kind.value}: missing bindings {missing}")
        for slot in OPTIONAL.get(kind, ()):
            if not str(bindings[slot]).strip():
                template = _drop_section(template, slot)
        return PLACEHOLDER.sub(lambda m: str(bindings[m.group(1)]), template)


def _drop_section(template: str, slot: str) -> str:
    """Remove the line holding ``{slot}``, or its whole tagged paragraph.

    A paragraph is a run of non-blank lines. When the paragraph opens with
    ``<TAG>`` and closes with ``</TAG>`` it goes entirely, along with the
    blank line that separates it from the previous paragraph.
    """
    lines = template.split("\n")
    marker = "{" + slot + "}"
    for i, line in enumerate(lines):
        if marker in line:
            break
    else:
        return template
    start = i
    while start > 0 and lines[start - 1].strip():
        start -= 1
    end = i
    while end + 1 < len(lines) and lines[end + 1].strip():
        end += 1
    opened = _OPEN_TAG.match(lines[start].strip())
    if opened and lines[end].strip().lower() == f"</{opened.group(1).lower()}>":
        if start > 0 and not lines[start - 1].strip():
            start -= 1
        del lines[start:end + 1]
    else:
        del lines[i]
    return "\n".join(lines)


_default_library = PromptLibrary()


def render(kind: PromptKind, bindings: Mapping[str, str], library: PromptLibrary | None = None) -> str:
    return (library or _default_library).render(kind, bindings)


# --------------------------------------------------------------------------
# block formatting


def format_templates_block(templates: Iterable[Template]) -> str:
    blocks = []
    for t in templates:
        case = t.latest_case
        blocks.append(
            f"[{t.id}] WHEN TO USE: {t.index_text}\n"
            f"STRATEGY: {t.strategy_text}\n"
            f"EXAMPLE:\nQuestion: {case.question}\nAnswer: {case.answer}"
        )
    return "\n\n".join(blocks) if blocks else NONE_TEXT


def format_rules(patterns: Iterable[ErrorPattern]) -> str:
    lines = [f"{n}. {p.pattern_text}" for n, p in enumerate(patterns, 1)]
    return "\n".join(lines) if lines else NONE_TEXT


def format_reflections(reflections: Sequence[str], empty: str = "") -> str:
    lines = [f"{n}. {r}" for n, r in enumerate(reflections, 1)]
    return "\n".join(lines) if lines else empty


def format_bad_cases(pattern: ErrorPattern) -> str:
    out = []
    for n, bc in enumerate(pattern.bad_cases, 1):
        out.append(
            f"[{n}]\nquestion: {bc.question}\ncorrect_answer: {bc.gold_answer}\n"
            f"wrong_answer: {bc.wrong_answer}\nreflection: {bc.reflection or NONE_TEXT}"
        )
    return "\n\n".join(out) if out else NONE_TEXT


def format_failed_attempts(attempts: Sequence[tuple[str, str]]) -> str:
    """``attempts`` holds (answer text, reflection) pairs; reflection may be ''."""
    out = []
    for n, (answer, reflection) in enumerate(attempts, 1):
        out.append(f"Attempt {n}:\n{answer}\nReflection: {reflection or NONE_TEXT}")
    return "\n\n".join(out) if out else NONE_TEXT


# --------------------------------------------------------------------------
# structured replies


@dataclass(frozen=True)
class Reflection:
    analysis: str
    reflection: str


@dataclass(frozen=True)
class TemplateDraft:
    when_to_use: str
    strategy: str


@dataclass(frozen=True)
class TemplateAction:
    action: str
    template_id: str | None = None
    when_to_use: str | None = None
    strategy: str | None = None


@dataclass(frozen=True)
class ActionPlan:
    actions: tuple[TemplateAction, ...]


@dataclass(frozen=True)
class MergeGroup:
    template_ids: tuple[str, ...]
    reason: str
    merged_when_to_use: str
    merged_strategy: str


@dataclass(frozen=True)
class MergePlan:
    groups: tuple[MergeGroup, ...]


@dataclass(frozen=True)
class ErrorSummary:
    root_cause: str
    reflection: str


@dataclass(frozen=True)
class PatternRevision:
    analysis: str
    updated: bool
    pattern: str


def extract_json_object(text: str) -> dict:
    """Return the first balanced ``{...}`` in ``text`` that decodes to an object."""
    start = text.find("{")
    while start != -1:
        end = _matching_brace(text, start)
        if end is not None:
            try:
                value = json.loads(text[start:end + 1])
            except ValueError:
                pass
            else:
                if isinstance(value, dict):
                    return value
        start = text.find("{", start + 1)
    raise NoJsonFound("reply contains no JSON object")


def _matching_brace(text: str, start: int) -> int | None:
    depth = 0
    in_str = False
    escaped = False
    for j in range(start, len(text)):
        ch = text[j]
        if in_str:
            if escaped:
                escaped = False
            elif ch == "\\":
                escaped = True
            elif ch == '"':
                in_str = False
        elif ch == '"':
            in_str = True
        elif ch == "{":
            depth += 1
        elif ch == "}":
            depth -= 1
            if depth == 0:
                return j
    return None


def _keys(obj: dict, required: set[str], optional: set[str] = frozenset(), where: str = "reply"):
    keys = set(obj)
    missing = required - keys
    extra = keys - required - set(optional)
    if missing:
        raise SchemaViolation(f"{where}: missing fields {sorted(missing)}")
    if extra:
        raise SchemaViolation(f"{where}: unexpected fields {sorted(extra)}")


def _text(obj: dict, key: str, *, nonempty: bool = True, where: str = "reply") -> str:
    value = obj[key]
    if not isinstance(value, str):
        raise SchemaViolation(f"{where}: {key!r} must be a string")
    if nonempty and not value.strip():
        raise SchemaViolation(f"{where}: {key!r} is empty")
    return value.strip()


def _optional_text(obj: dict, key: str, where: str) -> str | None:
    value = obj.get(key)
    if value is None:
        return None
    if not isinstance(value, str):
        raise SchemaViolation(f"{where}: {key!r} must be a string or null")
    value = value.strip()
    if not value or value.lower() == "null":
        return None
    return value


def _flag(value) -> bool:
    if isinstance(value, bool):
        return value
    if isinstance(value, str) and value.strip().lower() in ("true", "false"):
        return value.strip().lower() == "true"
    raise SchemaViolation(f"'updated' must be a boolean, got {value!r}")


ACTIONS = ("none", "update", "delete", "add")


def _parse_action(obj, recalled: frozenset[str], n: int) -> TemplateAction:
    where = f"actions[{n}]"
    if not isinstance(obj, dict):
        raise SchemaViolation(f"{where}: not an object")
    verb = obj.get("action")
    if not isinstance(verb, str) or verb.strip().lower() not in ACTIONS:
        raise SchemaViolation(f"{where}: unknown action {verb!r}")
    verb = verb.strip().lower()
    if verb in ("none", "delete"):
        _keys(obj, {"action", "template_id"}, where=where)
        tid = obj["template_id"]
    elif verb == "update":
        _keys(obj, {"action", "template_id"}, {"when_to_use", "strategy"}, where=where)
        tid = obj["template_id"]
    else:
        _keys(obj, {"action", "when_to_use", "strategy"}, {"template_id"}, where=where)
        if obj.get("template_id") is not None:
            raise SchemaViolation(f"{where}: add must not carry a template_id")
        return TemplateAction(
            "add",
            when_to_use=_text(obj, "when_to_use", where=where),
            strategy=_text(obj, "strategy", where=where),
        )
    if not isinstance(tid, str) or tid not in recalled:
        raise SchemaViolation(f"{where}: template_id {tid!r} was not recalled")
    if verb == "update":
        return TemplateAction(
            "update",
            tid,
            _optional_text(obj, "when_to_use", where),
            _optional_text(obj, "strategy", where),
        )
    return TemplateAction(verb, tid)


def _parse_plan(obj: dict, recalled_ids: Iterable[str]) -> ActionPlan:
    recalled = list(recalled_ids)
    _keys(obj, {"actions"})
    if not isinstance(obj["actions"], list):
        raise SchemaViolation("'actions' must be a list")
    allowed = frozenset(recalled)
    actions = tuple(_parse_action(a, allowed, n) for n, a in enumerate(obj["actions"]))
    seen = sorted(a.template_id for a in actions if a.action != "add")
    if seen != sorted(recalled):
        raise SchemaViolation(
            f"each recalled template must appear exactly once; expected {sorted(recalled)}, got {seen}"
        )
    return ActionPlan(actions)


def _parse_merge(obj: dict) -> MergePlan:
    _keys(obj, {"merge_groups"})
    groups = obj["merge_groups"]
    if not isinstance(groups, list):
        raise SchemaViolation("'merge_groups' must be a list")
    out = []
    for n, g in enumerate(groups):
        where = f"merge_groups[{n}]"
        if not isinstance(g, dict):
            raise SchemaViolation(f"{where}: not an object")
        _keys(g, {"template_ids", "reason", "merged_when_to_use", "merged_strategy"}, where=where)
        ids = g["template_ids"]
        if not isinstance(ids, list) or not all(isinstance(i, str) for i in ids):
            raise SchemaViolation(f"{where}: template_ids must be a list of strings")
        out.append(
            MergeGroup(
                tuple(ids),
                _text(g, "reason", nonempty=False, where=where),
                _text(g, "merged_when_to_use", where=where),
                _text(g, "merged_strategy", where=where),
            )
        )
    return MergePlan(tuple(out))


def parse(kind: PromptKind, reply_text: str, *, recalled_ids: Iterable[str] | None = None):
    """Decode a meta-prompt reply into its typed form.

    ``recalled_ids`` is required for TEMPLATE_UPDATE: the plan must mention
    every recalled id exactly once across none/update/delete actions.
    """
    kind = PromptKind(kind)
    if kind is PromptKind.ANSWER:
        raise ValueError("answer replies are free text")
    obj = extract_json_object(reply_text)
    if kind is PromptKind.REFLECT:
        _keys(obj, {"analysis", "reflection"})
        return Reflection(_text(obj, "analysis", nonempty=False), _text(obj, "reflection"))
    if kind is PromptKind.TEMPLATE_CREATE:
        _keys(obj, {"when_to_use", "strategy"})
        return TemplateDraft(_text(obj, "when_to_use"), _text(obj, "strategy"))
    if kind is PromptKind.TEMPLATE_UPDATE:
        if recalled_ids is None:
            raise ValueError("recalled_ids is required to validate an action plan")
        return _parse_plan(obj, recalled_ids)
    if kind is PromptKind.TEMPLATE_MERGE:
        return _parse_merge(obj)
    if kind is PromptKind.ERROR_SUMMARIZE:
        _keys(obj, {"root_cause", "reflection"})
        return ErrorSummary(_text(obj, "root_cause", nonempty=False), _text(obj, "reflection"))
    _keys(obj, {"analysis", "updated", "pattern"})
    updated = _flag(obj["updated"])
    return PatternRevision(
        _text(obj, "analysis", nonempty=False),
        updated,
        _text(obj, "pattern", nonempty=updated),
    )
