"""Train and evaluate offline against a rule-based stand-in model.

    python3 demos/offline_run.py

No network. The stand-in answers fraction questions correctly, misses
date questions, and answers every meta-prompt in the expected JSON schema,
so one run creates templates, appends cases and records an error rule.
"""

import json
import re
import tempfile
from pathlib import Path

import numpy as np

from memapo.config import EngineParams
from memapo.gateway import CostLedger, Gateway, ScriptedProvider, hash_embedding
from memapo.harness import Dataset, evaluate, train
from memapo.reflection import QueryItem

GOLD = {}


def item(n: int, question: str, gold: str) -> QueryItem:
    q = QueryItem(question, gold, options=("(A) first", "(B) second", "(C) both", "(D) neither"), id=f"demo:{n}")
    GOLD[q.prompt_text] = gold
    return q


TRAIN = Dataset("demo", tuple(
    item(n, q, g)
    for n, (q, g) in enumerate([
        ("Fractions: which is larger, 3/7 or 4/9?", "B"),
        ("Fractions: which is larger, 5/8 or 3/5?", "A"),
        ("Fractions: which is larger, 2/3 or 4/6?", "C"),
        ("Dates: is 2100 a leap year, and is 2000?", "B"),
        ("Dates: which month follows the 31st of July?", "A"),
    ])
))
TEST = Dataset("demo-test", (item(90, "Fractions: which is larger, 7/9 or 4/5?", "B"),), split="test")


TOPICS = ("fraction", "date", "calendar", "leap", "month")


class TopicEmbedder(ScriptedProvider):
    """Texts mentioning fractions land near axis 0, calendar texts near axis 1."""

    def embed(self, texts, model):
        out = []
        for text in texts:
            v = 0.3 * hash_embedding(text, self.embedding_dim)
            lowered = text.lower()
            v[0] += "fraction" in lowered
            v[1] += any(word in lowered for word in TOPICS[1:])
            out.append(v / np.linalg.norm(v))
        return out


def stand_in(request):
    prompt = request.prompt_text
    if "<OUTPUT_FORMAT>" in prompt:
        question = prompt.split("<QUESTION>")[1].split("</QUESTION>")[0].strip()
        letter = GOLD[question] if question.startswith("Fractions") else "D"
        return f"Comparing carefully.\nAnswer: ({letter})"
    if "self-reflection assistant" in prompt:
        return json.dumps({"analysis": "picked a letter without checking the calendar",
                           "reflection": "Check the calendar rule before answering."})
    if "abstracting reusable problem-solving templates" in prompt:
        return json.dumps({"when_to_use": "comparing two fractions", "strategy": "Cross-multiply and compare."})
    if "<RECALLED_TEMPLATES>" in prompt:
        recalled = re.findall(r"^\[(t-\d+)\] WHEN TO USE:", prompt, re.M)
        return json.dumps({"actions": [{"action": "none", "template_id": t} for t in recalled]})
    if "<CURRENT_PATTERN>" in prompt:
        return json.dumps({"analysis": "same slip", "updated": False, "pattern": "unused"})
    if "<ALL_TEMPLATES>" in prompt:
        return json.dumps({"merges": []})
    return json.dumps({"root_cause": "calendar rules ignored",
                       "reflection": "Apply the full leap-year rule and month lengths."})


def gateway() -> Gateway:
    return Gateway(
        TopicEmbedder(responder=stand_in, embedding_dim=32),
        chat_model="stand-in", embedding_model="stand-in-embed",
        ledger=CostLedger({"stand-in": (0.15, 0.60), "stand-in-embed": (0.02, 0.0)}),
    )


def main():
    params = EngineParams(max_retries=1)
    out = Path(tempfile.mkdtemp()) / "demo.memapo.json"
    snapshot, report = train([TRAIN], params, gateway(), snapshot_path=out)
    print(report.format_table())
    print(f"\nsnapshot: {out}")
    for t in snapshot.memory.ctm.values():
        print(f"  {t.id}  {t.index_text!r}  cases={len(t.cases)}")
    for e in snapshot.memory.epm.values():
        print(f"  {e.id}  {e.pattern_text!r}  bad_cases={len(e.bad_cases)}")
    print()
    print(evaluate([TEST], snapshot, params, gateway()).format_table())


if __name__ == "__main__":
    main()
