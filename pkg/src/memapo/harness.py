"""Dataset ingestion plus the training and evaluation drivers."""

from __future__ import annotations

import json
import logging
import random
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path
from typing import Callable, Iterable, Sequence

from .codec import PromptLibrary
from .config import EngineParams
from .errors import DuplicateQuestion, EmbeddingModelMismatch, EmptyDataset, ParseError, ProviderError
from .gateway import Gateway
from .memory import MemoryState
from .reflection import AttemptOutcome, QueryItem, run_inference, run_training_attempt
from .snapshot import MemorySnapshot
from .update import MemoryDelta, update_after_failure, update_after_success

log = logging.getLogger(__name__)

SPLITS = ("train", "dev", "test")


@dataclass(frozen=True)
class Dataset:
    name: str
    items: tuple[QueryItem, ...]
    split: str = "train"

    def __len__(self) -> int:
        return len(self.items)


def normalize_label(raw) -> str:
    """'(B)', ' b ', 'B' -> 'B'. Raises ValueError for anything but one letter."""
    if not isinstance(raw, str):
        raise ValueError(f"answer must be text, got {type(raw).__name__}")
    s = raw.strip()
    while len(s) >= 2 and s[0] in "([" and s[-1] in ")]":
        s = s[1:-1].strip()
    if len(s) != 1 or not ("A" <= s.upper() <= "Z"):
        raise ValueError(f"answer {raw!r} is not a single option letter")
    return s.upper()


def load_dataset(
    path: str | Path,
    format: str = "jsonl",
    *,
    name: str | None = None,
    split: str = "train",
    instruction: str | None = None,
) -> Dataset:
    """Read a JSONL file of ``{"question", "options"?, "answer"}`` objects.

    Any bad line fails the whole load; item ids are ``<name>:<line>``.
    """
    if format != "jsonl":
        raise ValueError(f"unsupported dataset format {format!r}")
    if split not in SPLITS:
        raise ValueError(f"split must be one of {SPLITS}")
    path = Path(path)
    name = name or path.name.split(".")[0]
    items = []
    first_seen: dict[str, int] = {}
    with path.open(encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, 1):
            if not line.strip():
                continue
            try:
                obj = json.loads(line)
            except ValueError as exc:
                raise ParseError(lineno, f"invalid JSON ({exc})") from exc
            if not isinstance(obj, dict):
                raise ParseError(lineno, "expected a JSON object")
            question = obj.get("question")
            if not isinstance(question, str) or not question.strip():
                raise ParseError(lineno, "missing or empty 'question'")
            if "answer" not in obj:
                raise ParseError(lineno, "missing 'answer'")
            options = obj.get("options") or []
            if not isinstance(options, list) or not all(isinstance(o, str) for o in options):
                raise ParseError(lineno, "'options' must be a list of strings")
            try:
                gold = normalize_label(obj["answer"])
            except ValueError as exc:
                raise ParseError(lineno, str(exc)) from exc
            if options and ord(gold) - ord("A") >= len(options):
                raise ParseError(lineno, f"answer {gold} is outside the {len(options)} options")
            if question in first_seen:
                raise DuplicateQuestion(lineno, first_seen[question])
            first_seen[question] = lineno
            items.append(
                QueryItem(
                    question=question,
                    gold=gold,
                    options=tuple(options),
                    id=f"{name}:{lineno}",
                    dataset=name,
                    instruction=instruction,
                )
            )
    if not items:
        raise EmptyDataset(f"{path} holds no items")
    return Dataset(name, tuple(items), split)


# --------------------------------------------------------------------------
# reports


@dataclass(frozen=True)
class ItemRecord:
    id: str
    dataset: str
    predicted: str | None
    gold: str
    correct: bool
    attempts: int = 0
    reflections: int = 0
    error: str | None = None


@dataclass
class RunReport:
    mode: str
    items: list[ItemRecord] = field(default_factory=list)
    cost: dict = field(default_factory=dict)
    chat_calls: int = 0
    ctm_size: int = 0
    epm_size: int = 0
    merges: int = 0
    verification_failures: int = 0
    wall_time_s: float = 0.0

    @property
    def total(self) -> int:
        return len(self.items)

    @property
    def correct(self) -> int:
        return sum(r.correct for r in self.items)

    @property
    def accuracy(self) -> float:
        return self.correct / self.total if self.items else 0.0

    def per_dataset(self) -> dict[str, dict]:
        out: dict[str, dict] = {}
        for r in self.items:
            d = out.setdefault(r.dataset, {"total": 0, "correct": 0})
            d["total"] += 1
            d["correct"] += int(r.correct)
        for d in out.values():
            d["accuracy"] = d["correct"] / d["total"]
        return dict(sorted(out.items()))

    def to_dict(self, *, timing: bool = True) -> dict:
        doc = {
            "mode": self.mode,
            "accuracy": self.accuracy,
            "total": self.total,
            "correct": self.correct,
            "datasets": self.per_dataset(),
            "cost": self.cost,
            "chat_calls": self.chat_calls,
            "memory": {
                "templates": self.ctm_size,
                "error_patterns": self.epm_size,
                "merges": self.merges,
                "verification_failures": self.verification_failures,
            },
            "items": [asdict(r) for r in self.items],
        }
        if timing:
            doc["wall_time_s"] = self.wall_time_s
        return doc

    def to_json(self, *, timing: bool = True) -> str:
        return json.dumps(self.to_dict(timing=timing), indent=2, ensure_ascii=False) + "\n"

    def format_table(self) -> str:
        lines = [f"accuracy {self.accuracy:.3f} ({self.correct}/{self.total})"]
        for name, d in self.per_dataset().items():
            lines.append(f"  {name:<28} {d['accuracy']:.3f} ({d['correct']}/{d['total']})")
        lines.append("")
        lines.append(f"{'model':<28} {'calls':>7} {'tokens (M)':>11} {'cost ($)':>10}")
        for model, t in self.cost.get("models", {}).items():
            tokens = (t["prompt_tokens"] + t["completion_tokens"]) / 1e6
            lines.append(f"{model:<28} {t['calls']:>7} {tokens:>11.4f} {t['dollars']:>10.4f}")
        total_tokens = (self.cost.get("prompt_tokens", 0) + self.cost.get("completion_tokens", 0)) / 1e6
        lines.append(
            f"{'total':<28} {self.cost.get('calls', 0):>7} {total_tokens:>11.4f} {self.cost.get('dollars', 0.0):>10.4f}"
        )
        if self.mode == "train":
            lines.append("")
            lines.append(
                f"memory: {self.ctm_size} templates, {self.epm_size} error patterns, "
                f"{self.merges} merges, {self.verification_failures} verification failures"
            )
        lines.append(f"wall time {self.wall_time_s:.1f}s")
        return "\n".join(lines)


def _record(item: QueryItem, outcome: AttemptOutcome | None, error: str | None = None) -> ItemRecord:
    if outcome is None:
        return ItemRecord(item.id, item.dataset, None, item.gold, False, error=error)
    return ItemRecord(
        item.id,
        item.dataset,
        outcome.extracted_label,
        item.gold,
        outcome.success,
        outcome.attempts_used,
        len(outcome.reflections),
        outcome.error or error,
    )


# --------------------------------------------------------------------------
# drivers


def _tagged(datasets: Iterable[Dataset]) -> list[QueryItem]:
    # hand-built items carry no dataset name; reports group by it
    return [it if it.dataset else replace(it, dataset=ds.name) for ds in datasets for it in ds.items]


def training_order(datasets: Iterable[Dataset], seed: int) -> list[QueryItem]:
    """Seeded shuffle of the merged stream; independent of dataset/file order."""
    items = sorted(_tagged(datasets), key=lambda it: it.id)
    random.Random(seed).shuffle(items)
    return items


Observer = Callable[[QueryItem, AttemptOutcome, MemoryDelta], None]


def train(
    datasets: Sequence[Dataset],
    params: EngineParams,
    gateway: Gateway,
    *,
    memory: MemoryState | None = None,
    library: PromptLibrary | None = None,
    limit: int | None = None,
    observer: Observer | None = None,
    snapshot_path: str | Path | None = None,
    clock: Callable[[], float] = time.perf_counter,
) -> tuple[MemorySnapshot, RunReport]:
    """Run the retrieve / attempt / update loop over every training item in turn."""
    datasets = list(datasets)
    if not datasets:
        raise EmptyDataset("train needs at least one dataset")
    items = training_order(datasets, params.seed)
    if limit is not None:
        items = items[:limit]
    if not items:
        raise EmptyDataset("no training items")
    memory = memory if memory is not None else MemoryState()
    rng = random.Random(params.seed)
    report = RunReport(mode="train")
    started = clock()
    for item in items:
        memory.step += 1
        try:
            outcome, recalled = run_training_attempt(item, memory, gateway, params, library=library)
        except ProviderError as exc:
            log.warning("skipping %s: %s", item.id, exc)
            report.items.append(_record(item, None, str(exc)))
            continue
        report.items.append(_record(item, outcome))
        try:
            if outcome.success:
                delta = update_after_success(
                    item,
                    outcome.final_answer,
                    outcome.reflections,
                    recalled,
                    memory,
                    gateway,
                    params,
                    rng=rng,
                    failed_attempts=outcome.failed_attempts,
                    library=library,
                )
            else:
                delta = update_after_failure(
                    item, outcome.reflections, outcome.failed_attempts, memory, gateway, params, library=library
                )
        except ProviderError as exc:
            log.warning("memory update for %s abandoned: %s", item.id, exc)
            continue
        report.merges += len(delta.merge_events)
        report.verification_failures += delta.verification_failures
        if observer is not None:
            observer(item, outcome, delta)
    report.wall_time_s = clock() - started
    report.ctm_size = len(memory.ctm)
    report.epm_size = len(memory.epm)
    report.chat_calls = gateway.chat_calls
    report.cost = gateway.ledger.as_dict()
    snapshot = MemorySnapshot(memory, gateway.embedding_model, params.fingerprint())
    if snapshot_path is not None:
        snapshot.save(snapshot_path)
    return snapshot, report


def evaluate(
    datasets: Dataset | Sequence[Dataset],
    snapshot: MemorySnapshot,
    params: EngineParams,
    gateway: Gateway,
    *,
    library: PromptLibrary | None = None,
    limit: int | None = None,
    clock: Callable[[], float] = time.perf_counter,
) -> RunReport:
    """Single-pass inference over every item; memory is only read."""
    if isinstance(datasets, Dataset):
        datasets = [datasets]
    if snapshot.embedding_model and snapshot.embedding_model != gateway.embedding_model:
        raise EmbeddingModelMismatch(
            f"snapshot was embedded with {snapshot.embedding_model!r}, "
            f"configured embedding model is {gateway.embedding_model!r}"
        )
    items = _tagged(datasets)
    if limit is not None:
        items = items[:limit]
    if not items:
        raise EmptyDataset("no evaluation items")
    memory = snapshot.memory
    report = RunReport(mode="eval")
    started = clock()

    def one(item: QueryItem) -> AttemptOutcome:
        return run_inference(item, memory, gateway, params, library=library)

    if gateway.concurrent and len(items) > 1:
        with ThreadPoolExecutor(max_workers=gateway.max_inflight) as pool:
            outcomes = list(pool.map(one, items))
    else:
        outcomes = [one(it) for it in items]
    report.items = [_record(it, out) for it, out in zip(items, outcomes)]
    report.wall_time_s = clock() - started
    report.ctm_size = len(memory.ctm)
    report.epm_size = len(memory.epm)
    report.chat_calls = gateway.chat_calls
    report.cost = gateway.ledger.as_dict()
    return report
