"""Durable JSON snapshots of the dual memory.

A snapshot is one self-describing JSON document; vectors are stored as
number arrays next to the record they embed. Python's float repr round-trips
exactly, so a save/load cycle preserves every vector bit pattern.
"""

from __future__ import annotations

import hashlib
import json
import math
import os
import tempfile
from dataclasses import dataclass, field
from pathlib import Path

from .errors import IntegrityError, VersionUnsupported
from .memory import BadCase, Case, ErrorPattern, MemoryState, Template

FORMAT_VERSION = 1
SUFFIX = ".memapo.json"


@dataclass
class MemorySnapshot:
    memory: MemoryState = field(default_factory=MemoryState)
    embedding_model: str = ""
    config_fingerprint: str = ""
    format_version: int = FORMAT_VERSION

    @property
    def embedding_dim(self) -> int | None:
        return self.memory.template_index.dim or self.memory.pattern_index.dim

    def to_dict(self) -> dict:
        m = self.memory
        templates = []
        for t in m.ctm.values():
            if t.id not in m.template_index:
                raise IntegrityError(f"template {t.id} has no vector")
            templates.append(
                {
                    "id": t.id,
                    "index_text": t.index_text,
                    "strategy_text": t.strategy_text,
                    "cases": [{"question": c.question, "answer": c.answer} for c in t.cases],
                    "created_at": t.created_at,
                    "updated_at": t.updated_at,
                    "vector": m.template_index.get(t.id).tolist(),
                }
            )
        patterns = []
        for p in m.epm.values():
            if p.id not in m.pattern_index:
                raise IntegrityError(f"error pattern {p.id} has no vector")
            patterns.append(
                {
                    "id": p.id,
                    "pattern_text": p.pattern_text,
                    "bad_cases": [
                        {
                            "question": b.question,
                            "gold_answer": b.gold_answer,
                            "wrong_answer": b.wrong_answer,
                            "reflection": b.reflection,
                        }
                        for b in p.bad_cases
                    ],
                    "created_at": p.created_at,
                    "updated_at": p.updated_at,
                    "vector": m.pattern_index.get(p.id).tolist(),
                }
            )
        return {
            "format_version": self.format_version,
            "embedding_model": self.embedding_model,
            "embedding_dim": self.embedding_dim,
            "config_fingerprint": self.config_fingerprint,
            "step": m.step,
            "template_seq": m.template_seq,
            "pattern_seq": m.pattern_seq,
            "templates": templates,
            "error_patterns": patterns,
        }

    def dumps(self) -> str:
        return json.dumps(self.to_dict(), indent=1, ensure_ascii=False) + "\n"

    @classmethod
    def from_dict(cls, doc: dict) -> "MemorySnapshot":
        if not isinstance(doc, dict):
            raise IntegrityError("snapshot root must be an object")
        version = doc.get("format_version")
        if not isinstance(version, int):
            raise IntegrityError("snapshot has no integer format_version")
        if version > FORMAT_VERSION or version < 1:
            raise VersionUnsupported(f"snapshot format {version} (supported: {FORMAT_VERSION})")
        try:
            dim = doc["embedding_dim"]
            memory = MemoryState(
                step=int(doc["step"]),
                template_seq=int(doc["template_seq"]),
                pattern_seq=int(doc["pattern_seq"]),
            )
            for rec in doc["templates"]:
                _check_vector(rec, dim)
                t = Template(
                    id=rec["id"],
                    index_text=rec["index_text"],
                    strategy_text=rec["strategy_text"],
                    cases=tuple(Case(c["question"], c["answer"]) for c in rec["cases"]),
                    created_at=int(rec["created_at"]),
                    updated_at=int(rec["updated_at"]),
                )
                if t.id in memory.ctm:
                    raise IntegrityError(f"duplicate template id {t.id}")
                if not t.cases:
                    raise IntegrityError(f"template {t.id} has no cases")
                memory.put_template(t, rec["vector"])
            for rec in doc["error_patterns"]:
                _check_vector(rec, dim)
                p = ErrorPattern(
                    id=rec["id"],
                    pattern_text=rec["pattern_text"],
                    bad_cases=tuple(
                        BadCase(b["question"], b["gold_answer"], b["wrong_answer"], b.get("reflection", ""))
                        for b in rec["bad_cases"]
                    ),
                    created_at=int(rec["created_at"]),
                    updated_at=int(rec["updated_at"]),
                )
                if p.id in memory.epm:
                    raise IntegrityError(f"duplicate error-pattern id {p.id}")
                memory.put_pattern(p, rec["vector"])
            return cls(
                memory=memory,
                embedding_model=str(doc["embedding_model"]),
                config_fingerprint=str(doc.get("config_fingerprint", "")),
                format_version=version,
            )
        except IntegrityError:
            raise
        except (KeyError, TypeError, ValueError) as exc:
            raise IntegrityError(f"malformed snapshot: {exc!r}") from exc

    @classmethod
    def loads(cls, text: str) -> "MemorySnapshot":
        try:
            doc = json.loads(text)
        except ValueError as exc:
            raise IntegrityError(f"snapshot is not valid JSON: {exc}") from exc
        return cls.from_dict(doc)

    def save(self, path: str | os.PathLike) -> None:
        """Write atomically: temp file in the target directory, then rename."""
        path = Path(path)
        text = self.dumps()
        fd, tmp = tempfile.mkstemp(prefix=path.name + ".", suffix=".tmp", dir=path.parent or ".")
        try:
            with os.fdopen(fd, "w", encoding="utf-8") as fh:
                fh.write(text)
            os.replace(tmp, path)
        except BaseException:
            if os.path.exists(tmp):
                os.unlink(tmp)
            raise

    @classmethod
    def load(cls, path: str | os.PathLike) -> "MemorySnapshot":
        return cls.loads(Path(path).read_text(encoding="utf-8"))


def _check_vector(rec: dict, dim) -> None:
    vec = rec["vector"]
    if not isinstance(vec, list) or not vec:
        raise IntegrityError(f"{rec.get('id')}: vector missing")
    if dim is not None and len(vec) != dim:
        raise IntegrityError(f"{rec.get('id')}: vector has {len(vec)} dims, snapshot says {dim}")
    if not all(isinstance(v, (int, float)) and not isinstance(v, bool) and math.isfinite(v) for v in vec):
        raise IntegrityError(f"{rec.get('id')}: vector has non-finite or non-numeric entries")


def save_memory(
    state: MemoryState,
    path: str | os.PathLike,
    *,
    embedding_model: str = "",
    config_fingerprint: str = "",
) -> None:
    MemorySnapshot(state, embedding_model, config_fingerprint).save(path)


def load_memory(path: str | os.PathLike) -> MemoryState:
    return MemorySnapshot.load(path).memory


def state_digest(state: MemoryState) -> str:
    """Content hash of a memory state (ids, texts, cases, vectors, counters)."""
    return hashlib.sha256(MemorySnapshot(state).dumps().encode("utf-8")).hexdigest()
