"""End-to-end question answering in full-graph or decomposed mode."""

from __future__ import annotations

import time
from dataclasses import dataclass, field
from typing import Any

from tabgr.atg import AtgGraph, Triple, build_atg
from tabgr.decompose import DecompositionTrace, decompose
from tabgr.llm import LlmClient
from tabgr.qgppr import PprConfig, ScoredEvidence, build_key_sets, default_config, score_evidence
from tabgr.reasoner import PathVerdict, ReasoningResult, generate_answer, grounded_fraction, validate_path
from tabgr.table import Table, forward_fill

MODES = ("full", "decomposed")
TASKS = ("qa", "fv")

FV_QUESTION = "Is the following statement true or false? {statement}"


@dataclass(frozen=True)
class PipelineConfig:
    mode: str = "full"
    task: str = "qa"
    ppr: PprConfig = field(default_factory=PprConfig)
    max_rounds: int = 3
    fallback_full_graph: bool = False
    use_llm_key_sets: bool = True
    forward_fill_cols: tuple[int, ...] = ()

    def __post_init__(self) -> None:
        if self.mode not in MODES:
            raise ValueError(f"mode must be one of {MODES}, got {self.mode!r}")
        if self.task not in TASKS:
            raise ValueError(f"task must be one of {TASKS}, got {self.task!r}")
        if self.max_rounds < 0:
            raise ValueError("max_rounds must be >= 0")

    @classmethod
    def for_mode(cls, mode: str = "full", task: str = "qa", **kwargs: Any) -> PipelineConfig:
        kwargs.setdefault("ppr", default_config(mode, task))
        return cls(mode=mode, task=task, **kwargs)


@dataclass
class QuestionOutcome:
    question_id: str | None
    question: str
    mode: str
    graph: AtgGraph
    evidence: list[Triple]
    scored: ScoredEvidence
    result: ReasoningResult
    verdicts: list[PathVerdict]
    trace: DecompositionTrace | None = None
    build_seconds: float = 0.0

    @property
    def grounded_fraction(self) -> float | None:
        return grounded_fraction(self.verdicts)


def prepare_table(table: Table, config: PipelineConfig) -> Table:
    cols = [j for j in config.forward_fill_cols if j < table.n_cols]
    return forward_fill(table, cols) if cols else table


def answer_prompt_question(question: str, task: str) -> str:
    return FV_QUESTION.format(statement=question) if task == "fv" else question


def select_evidence(
    question: str,
    graph: AtgGraph,
    llm: LlmClient | None,
    config: PipelineConfig,
    question_id: str | None = None,
) -> tuple[ScoredEvidence, DecompositionTrace | None]:
    """Key sets, optional decomposition, and QG-PPR ranking for one question."""
    key_llm = llm if config.use_llm_key_sets else None
    if config.mode == "full":
        keys = build_key_sets(question, graph, key_llm, config.ppr, question_id)
        return score_evidence(question, graph, keys, config.ppr), None

    if llm is None:
        raise ValueError("decomposed mode needs an LLM client")
    trace = DecompositionTrace()
    sub = decompose(question, graph, llm, config.max_rounds, question_id, trace)
    # the anchor step already asked for key columns; reuse that answer
    keys = build_key_sets(question, graph, None, config.ppr, question_id,
                          selected=trace.anchor_columns)
    triples = sub.triples(graph)
    if not triples or (config.fallback_full_graph and sub.sufficiency != "sufficient"):
        trace.fallback_full_graph = True
        triples = list(graph.triples)
    return score_evidence(question, graph, keys, config.ppr, triples), trace


def answer_question(
    question: str,
    table: Table,
    llm: LlmClient,
    config: PipelineConfig | None = None,
    question_id: str | None = None,
) -> QuestionOutcome:
    config = config or PipelineConfig()
    table = prepare_table(table, config)
    started = time.perf_counter()
    graph = build_atg(table)
    build_seconds = time.perf_counter() - started
    scored, trace = select_evidence(question, graph, llm, config, question_id)
    result = generate_answer(
        answer_prompt_question(question, config.task), graph.title, graph.headers,
        scored.ranked, llm, question_id,
    )
    verdicts = validate_path(result, scored.triples)
    return QuestionOutcome(question_id, question, config.mode, graph, scored.triples,
                           scored, result, verdicts, trace, build_seconds)
