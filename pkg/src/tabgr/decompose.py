"""LLM-judged subgraph extraction over an attributed table graph.

Anchors come from exact value matches plus LLM-selected columns. The loop
then alternates a sufficiency judgement with whole-column expansion for at
most ``max_rounds`` rounds.
"""

from __future__ import annotations

import ast
import logging
import re
from dataclasses import dataclass, field
from typing import Any

from tabgr.atg import AtgGraph, Triple, render_triple
from tabgr.errors import LlmUnavailable
from tabgr.llm import LlmClient, render
from tabgr.qgppr import exact_match_triples, format_sample_row, llm_select_columns

logger = logging.getLogger(__name__)

UNKNOWN = "unknown"
SUFFICIENT = "sufficient"
BUDGET_EXHAUSTED = "budget_exhausted"

_FINISHED_RE = re.compile(r"finished\s*:\s*\**\s*(true|false)\b", re.IGNORECASE)
_BARE_BOOL_RE = re.compile(r"^\W*(true|false)\W*$", re.IGNORECASE)
_SELECTED_RE = re.compile(r"SELECTED_RELATIONS\s*:", re.IGNORECASE)


class ParseError(ValueError):
    pass


@dataclass
class Subgraph:
    triple_ids: list[int] = field(default_factory=list)
    selected_headers: set[str] = field(default_factory=set)
    expansion_rounds: int = 0
    sufficiency: str = UNKNOWN

    def __len__(self) -> int:
        return len(self.triple_ids)

    def add(self, ids) -> int:
        """Merge ``ids``, keeping ascending id order. Returns how many were new."""
        current = set(self.triple_ids)
        fresh = [i for i in ids if i not in current]
        if fresh:
            self.triple_ids = sorted(current.union(fresh))
        return len(fresh)

    def triples(self, graph: AtgGraph) -> list[Triple]:
        return [graph.triples[i] for i in self.triple_ids]


@dataclass
class DecompositionTrace:
    anchors: list[int] = field(default_factory=list)
    anchor_columns: list[str] = field(default_factory=list)
    anchor_llm_degraded: bool = False
    rounds: list[dict[str, Any]] = field(default_factory=list)
    sufficiency: str = UNKNOWN
    llm_calls: int = 0
    fallback_full_graph: bool = False

    def to_dict(self) -> dict[str, Any]:
        return {
            "anchors": list(self.anchors),
            "anchor_columns": list(self.anchor_columns),
            "anchor_llm_degraded": self.anchor_llm_degraded,
            "rounds": [dict(r) for r in self.rounds],
            "sufficiency": self.sufficiency,
            "llm_calls": self.llm_calls,
            "fallback_full_graph": self.fallback_full_graph,
        }


def _column_ids(graph: AtgGraph, header: str) -> list[int]:
    j = graph.col_index(header)
    if j is None:
        return []
    return [t.id for t in graph.triples_of_col(j)]


def anchor_triples(
    question: str,
    graph: AtgGraph,
    llm: LlmClient | None,
    question_id: str | None = None,
    trace: DecompositionTrace | None = None,
) -> Subgraph:
    sub = Subgraph()
    sub.add(t.id for t in exact_match_triples(question, graph.triples))
    columns: list[str] = []
    degraded = llm is None
    if llm is not None:
        try:
            columns, _ = llm_select_columns(question, graph, llm, question_id)
            if trace is not None:
                trace.llm_calls += 1
        except LlmUnavailable as exc:
            logger.warning("anchor column selection unavailable: %s", exc)
            degraded = True
    for h in columns:
        sub.add(_column_ids(graph, h))
        sub.selected_headers.add(h)
    if trace is not None:
        trace.anchors = list(sub.triple_ids)
        trace.anchor_columns = list(columns)
        trace.anchor_llm_degraded = degraded
    return sub


def parse_finished(reply: str) -> bool:
    """Read the trailing ``Finished: True/False`` verdict; raise ParseError."""
    hits = _FINISHED_RE.findall(reply)
    if hits:
        return hits[-1].lower() == "true"
    m = _BARE_BOOL_RE.match(reply.strip())
    if m:
        return m.group(1).lower() == "true"
    raise ParseError(f"no True/False verdict in {reply[:80]!r}")


def render_paths(triples) -> str:
    return "\n".join(render_triple(t) for t in triples)


def judge_sufficiency(
    question: str,
    subgraph: Subgraph,
    graph: AtgGraph,
    llm: LlmClient,
    question_id: str | None = None,
) -> bool:
    if not subgraph.triple_ids:
        return False
    prompt = render("sufficiency", {
        "title": graph.title,
        "question": question,
        "reasoning_paths": render_paths(subgraph.triples(graph)),
    })
    reply = llm.ask(prompt, "sufficiency", question_id)
    try:
        return parse_finished(reply)
    except ParseError as exc:
        logger.warning("sufficiency reply unparseable, treating as insufficient: %s", exc)
        return False


def parse_selected_relations(reply: str) -> list[str]:
    """Extract the list literal after ``SELECTED_RELATIONS:``; raise ParseError."""
    m = _SELECTED_RE.search(reply)
    text = reply[m.end():] if m else reply
    start = text.find("[")
    end = text.find("]", start)
    if start < 0 or end < 0:
        raise ParseError(f"no relation list in {reply[:80]!r}")
    try:
        value = ast.literal_eval(text[start:end + 1])
    except (ValueError, SyntaxError) as exc:
        raise ParseError(f"bad relation list {text[start:end + 1]!r}") from exc
    if not isinstance(value, (list, tuple)):
        raise ParseError("relation selection is not a list")
    return [str(v).strip() for v in value]


def expand(
    question: str,
    subgraph: Subgraph,
    graph: AtgGraph,
    llm: LlmClient,
    question_id: str | None = None,
) -> tuple[Subgraph, dict[str, Any]]:
    """One expansion round. Mutates and returns ``subgraph`` plus a round record."""
    available = [h for h in graph.headers if h not in subgraph.selected_headers]
    record: dict[str, Any] = {"available": list(available), "selected": [], "added": 0,
                              "llm_called": False, "parse_error": None}
    if not available:
        subgraph.sufficiency = BUDGET_EXHAUSTED
        return subgraph, record
    prompt = render("edge_select", {
        "title": graph.title,
        "question": question,
        "reasoning_paths": render_paths(subgraph.triples(graph)),
        "available_relations": "\n".join(available),
        "sample_row": format_sample_row(graph),
    })
    reply = llm.ask(prompt, "edge_select", question_id)
    record["llm_called"] = True
    try:
        names = parse_selected_relations(reply)
    except ParseError as exc:
        logger.warning("relation selection unparseable, no expansion this round: %s", exc)
        record["parse_error"] = str(exc)
        return subgraph, record
    added = 0
    for name in names:
        if name in available and name not in subgraph.selected_headers:
            subgraph.selected_headers.add(name)
            added += subgraph.add(_column_ids(graph, name))
            record["selected"].append(name)
    record["added"] = added
    return subgraph, record


def decompose(
    question: str,
    graph: AtgGraph,
    llm: LlmClient | None,
    max_rounds: int = 3,
    question_id: str | None = None,
    trace: DecompositionTrace | None = None,
) -> Subgraph:
    """Anchors, then up to ``max_rounds`` of judge -> (stop | expand)."""
    trace = trace if trace is not None else DecompositionTrace()
    sub = anchor_triples(question, graph, llm, question_id, trace)
    if llm is None:
        if not sub.triple_ids:
            raise LlmUnavailable("no exact-match anchors and no LLM configured")
        trace.sufficiency = sub.sufficiency
        return sub
    try:
        while sub.expansion_rounds < max_rounds:
            verdict = None
            if sub.triple_ids:
                verdict = judge_sufficiency(question, sub, graph, llm, question_id)
                trace.llm_calls += 1
                if verdict:
                    sub.sufficiency = SUFFICIENT
                    trace.rounds.append({"round": sub.expansion_rounds + 1, "verdict": True})
                    break
            sub, record = expand(question, sub, graph, llm, question_id)
            trace.llm_calls += int(record["llm_called"])
            trace.rounds.append({"round": sub.expansion_rounds + 1, "verdict": verdict, **record})
            if not record["llm_called"]:
                break
            sub.expansion_rounds += 1
    except LlmUnavailable:
        if not sub.triple_ids:
            raise
        logger.warning("LLM lost during decomposition; keeping the partial subgraph")
    if sub.sufficiency != SUFFICIENT:
        sub.sufficiency = BUDGET_EXHAUSTED
    trace.sufficiency = sub.sufficiency
    return sub
