"""Exact cosine retrieval over a small template memory.

    python3 demos/retrieval.py

Vectors are written by hand so the scores are easy to check.
"""

from memapo.config import EngineParams
from memapo.gateway import CostLedger, Gateway, ScriptedProvider
from memapo.index import VectorIndex, cosine_similarity
from memapo.memory import BadCase, Case, MemoryState, create_error_pattern, create_template
from memapo.retrieval import retrieve

print("cosine([1,2,3], [4,5,6]) =", round(cosine_similarity([1, 2, 3], [4, 5, 6]), 4))

index = VectorIndex()
for id_, vec in {"t-1": [1, 0], "t-2": [0.9, 0.436], "t-3": [0.7, 0.714], "t-4": [0.5, 0.866]}.items():
    index.upsert(id_, vec)
print("top 3 at threshold 0.3:", [(h.id, round(h.score, 3)) for h in index.top_k([1, 0], 3, 0.3)])
print("top 3 at threshold 0.95:", index.top_k([1, 0], 3, 0.95))

# the same thing through memory and a gateway, with embeddings pinned per text
memory = MemoryState()
embeddings = {
    "fraction comparisons": [1.0, 0.0, 0.0],
    "angle sums in polygons": [0.0, 1.0, 0.0],
    "Count days inclusively.": [0.0, 0.0, 1.0],
    "Fractions: is 5/8 larger than 3/5?": [0.95, 0.2, 0.0],
}
for text, strategy in [("fraction comparisons", "Cross-multiply."), ("angle sums in polygons", "Use (n-2)*180.")]:
    t = create_template(text, strategy, Case(f"example for {text}", "Answer: (A)"), 0, id=memory.next_template_id())
    memory.put_template(t, embeddings[text])
rule = create_error_pattern("Count days inclusively.", BadCase("Dates: q?", "A", "B"), 0, id=memory.next_pattern_id())
memory.put_pattern(rule, embeddings[rule.pattern_text])

gateway = Gateway(ScriptedProvider(embeddings=embeddings, embedding_dim=3), chat_model="none", embedding_model="pinned",
                  ledger=CostLedger({"pinned": (0.0, 0.0)}))
# the angle template scores about 0.21: below the training threshold, above the inference one
for mode in ("train", "infer"):
    result = retrieve("Fractions: is 5/8 larger than 3/5?", memory, gateway, EngineParams(), mode=mode)
    hits = [(t.id, t.index_text, round(s, 3)) for t, s in result.templates]
    print(f"{mode}: templates {hits}; rules {[p.id for p in result.error_patterns]}")
