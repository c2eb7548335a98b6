from __future__ import annotations

import json
import socket

import numpy as np
import pytest

from memapo.config import EngineParams
from memapo.gateway import CostLedger, Gateway, ScriptedProvider


class NetworkBlocked(RuntimeError):
    pass


@pytest.fixture(autouse=True)
def no_network(request, monkeypatch):
    """Every test runs with sockets disabled unless marked ``live``."""
    if request.node.get_closest_marker("live"):
        yield
        return

    def refuse(*args, **kwargs):
        raise NetworkBlocked("network access attempted during an offline test")

    monkeypatch.setattr(socket.socket, "connect", refuse)
    monkeypatch.setattr(socket.socket, "connect_ex", refuse)
    monkeypatch.setattr(socket, "create_connection", refuse)
    yield


@pytest.fixture
def params() -> EngineParams:
    return EngineParams()


def make_gateway(provider: ScriptedProvider, prices=None, **kw) -> Gateway:
    return Gateway(
        provider,
        chat_model=kw.pop("chat_model", "chat-m"),
        embedding_model=kw.pop("embedding_model", "embed-m"),
        ledger=CostLedger(prices or {}),
        **kw,
    )


def unit(*values) -> np.ndarray:
    v = np.array(values, dtype=float)
    return v / np.sqrt((v * v).sum())


def at_angle(base: np.ndarray, other: np.ndarray, cos: float) -> np.ndarray:
    """Unit vector whose cosine with unit ``base`` is exactly-ish ``cos``; ``other`` sets the plane."""
    o = other - (other @ base) * base
    o = o / np.sqrt((o * o).sum())
    return cos * base + np.sqrt(1 - cos * cos) * o


def basis(dim: int, i: int) -> np.ndarray:
    v = np.zeros(dim)
    v[i] = 1.0
    return v


# reply builders --------------------------------------------------------------

def reflect_reply(reflection: str = "check the units", analysis: str = "slipped") -> str:
    return json.dumps({"analysis": analysis, "reflection": reflection})


def create_reply(when: str, strategy: str) -> str:
    return json.dumps({"when_to_use": when, "strategy": strategy})


def plan_reply(*actions: dict) -> str:
    return json.dumps({"actions": list(actions)})


def merge_reply(*groups) -> str:
    return json.dumps(
        {
            "merge_groups": [
                {
                    "template_ids": list(ids),
                    "reason": "overlap",
                    "merged_when_to_use": when,
                    "merged_strategy": strategy,
                }
                for ids, when, strategy in groups
            ]
        }
    )


def summary_reply(rule: str, root: str = "misread") -> str:
    return json.dumps({"root_cause": root, "reflection": rule})


def revision_reply(updated, pattern: str, analysis: str = "same family") -> str:
    return json.dumps({"analysis": analysis, "updated": updated, "pattern": pattern})


# acceptance reporting ---------------------------------------------------------
# Tests marked ``acceptance(criterion=N, title=...)`` get one summary line each.

_criteria: dict[str, tuple[int, str]] = {}
_outcomes: dict[str, str] = {}


def pytest_collection_modifyitems(items):
    for item in items:
        marker = item.get_closest_marker("acceptance")
        if marker is not None:
            _criteria[item.nodeid] = (marker.kwargs["criterion"], marker.kwargs["title"])


def pytest_runtest_logreport(report):
    if report.nodeid not in _criteria:
        return
    if report.skipped:
        _outcomes[report.nodeid] = "SKIP"
    elif report.failed:
        _outcomes[report.nodeid] = "FAIL"
    elif report.when == "call":
        _outcomes.setdefault(report.nodeid, "PASS")


def pytest_terminal_summary(terminalreporter):
    if not _outcomes:
        return
    # a parametrized criterion passes only if every case passed
    rank = {"FAIL": 2, "SKIP": 1, "PASS": 0}
    summary: dict[int, tuple[str, str]] = {}
    for nodeid, (number, title) in _criteria.items():
        if nodeid in _outcomes:
            outcome = _outcomes[nodeid]
            prev = summary.get(number)
            if prev is None or rank[outcome] > rank[prev[0]]:
                summary[number] = (outcome, title)
    terminalreporter.section("acceptance criteria")
    for number in sorted(summary):
        outcome, title = summary[number]
        terminalreporter.write_line(f"criterion {number:>2} {outcome:<4} {title}")
