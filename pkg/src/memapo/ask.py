"""Send a meta-prompt and decode the structured reply, re-asking once on failure."""

from __future__ import annotations

import logging
from dataclasses import dataclass
from typing import Mapping

from .codec import PromptKind, PromptLibrary, parse, render
from .errors import ReplyParseError
from .gateway import Gateway, Usage

log = logging.getLogger(__name__)


@dataclass(frozen=True)
class TranscriptEntry:
    kind: str
    prompt: str
    reply: str
    usage: Usage


def ask(
    gateway: Gateway,
    kind: PromptKind,
    bindings: Mapping[str, str],
    *,
    temperature: float = 0.0,
    transcript: list[TranscriptEntry] | None = None,
    library: PromptLibrary | None = None,
    **parse_kw,
):
    """Render, send, parse. Returns None when both tries fail to parse."""
    prompt = render(kind, bindings, library)
    for attempt in (1, 2):
        result = gateway.complete(prompt, temperature=temperature)
        if transcript is not None:
            transcript.append(TranscriptEntry(kind.value, prompt, result.text, result.usage))
        try:
            return parse(kind, result.text, **parse_kw)
        except ReplyParseError as exc:
            log.warning("%s reply unusable (try %d): %s", kind.value, attempt, exc)
    return None
