"""Question-guided personalized PageRank over table triples.

Pipeline: key headers/values for the question -> restart distribution ``p0``
-> row/column propagation matrix -> fixed-count power iteration -> row-level
then cell-level reranking.
"""

from __future__ import annotations

import logging
import math
import re
import unicodedata
from dataclasses import dataclass, field, replace
from typing import Iterable, Sequence

import numpy as np
import scipy.sparse as sp

from tabgr.atg import AtgGraph, Triple
from tabgr.errors import DimensionMismatch, EmptyGraph, LlmUnavailable
from tabgr.llm import LlmClient, render

logger = logging.getLogger(__name__)

DEFAULT_ORDER_TRIGGERS = (
    "first", "last", "previous", "next", "above", "below", "top", "bottom",
    "earliest listed", "consecutive", "in order", "before", "after",
)
ORDER_MODES = ("auto", "always_preserve", "never_preserve")
MIN_MATCH_LEN = 2
# scores equal after rounding to this many decimals count as tied
TIE_DECIMALS = 12


@dataclass(frozen=True)
class PprConfig:
    alpha: float = 0.35
    iterations: int = 20
    w_row: float = 0.6
    w_col: float = 0.4
    v_col: float = 1.0
    v_val: float = 2.0
    use_idf: bool = True
    order_sensitive_mode: str = "auto"
    order_triggers: tuple[str, ...] = DEFAULT_ORDER_TRIGGERS
    llm_values: bool = False

    def __post_init__(self) -> None:
        if not 0.0 < self.alpha < 1.0:
            raise ValueError(f"alpha must lie in (0, 1), got {self.alpha}")
        if self.iterations < 1:
            raise ValueError(f"iterations must be >= 1, got {self.iterations}")
        if self.w_row < 0 or self.w_col < 0 or abs(self.w_row + self.w_col - 1.0) > 1e-12:
            raise ValueError(f"need w_row, w_col >= 0 with w_row + w_col = 1, got {self.w_row}, {self.w_col}")
        if self.v_col < 0 or self.v_val < 0:
            raise ValueError("initial-score weights must be non-negative")
        if self.order_sensitive_mode not in ORDER_MODES:
            raise ValueError(f"order_sensitive_mode must be one of {ORDER_MODES}")

    def with_w_row(self, w_row: float) -> PprConfig:
        return replace(self, w_row=w_row, w_col=1.0 - w_row)


def default_config(mode: str = "full", task: str = "qa") -> PprConfig:
    """Defaults per reasoning mode; decomposition mode tunes ``w_row`` per task."""
    if mode == "full":
        return PprConfig(alpha=0.35, w_row=0.6, w_col=0.4)
    if mode == "decomposed":
        w_row = 0.7 if task == "fv" else 0.3
        return PprConfig(alpha=0.15, w_row=w_row, w_col=round(1.0 - w_row, 12))
    raise ValueError(f"unknown mode {mode!r}")


# -- key sets ---------------------------------------------------------------

def normalize_text(text: str) -> str:
    """Lowercase, collapse whitespace, strip leading/trailing punctuation."""
    text = " ".join(text.lower().split())
    start, end = 0, len(text)
    while start < end and _is_punct(text[start]):
        start += 1
    while end > start and _is_punct(text[end - 1]):
        end -= 1
    return text[start:end].strip()


def _is_punct(ch: str) -> bool:
    return ch.isspace() or unicodedata.category(ch).startswith("P")


@dataclass(frozen=True)
class KeySets:
    """Key headers and key ``(header, value)`` cells for one question.

    Cells are keyed by header text rather than column index; headers are
    unique per table, so this is equivalent and survives column shuffles.
    """

    headers: frozenset[str] = frozenset()
    values: frozenset[tuple[str, str]] = frozenset()
    llm_headers: frozenset[str] = frozenset()
    llm_degraded: bool = False
    notes: tuple[str, ...] = field(default=(), compare=False)

    def union(self, other: KeySets) -> KeySets:
        return KeySets(
            self.headers | other.headers,
            self.values | other.values,
            self.llm_headers | other.llm_headers,
            self.llm_degraded or other.llm_degraded,
            self.notes + other.notes,
        )


def exact_match_headers(question: str, headers: Iterable[str]) -> set[str]:
    q = normalize_text(question)
    out = set()
    for h in headers:
        nh = normalize_text(h)
        if len(nh) >= MIN_MATCH_LEN and nh in q:
            out.add(h)
    return out


def exact_match_triples(question: str, triples: Iterable[Triple]) -> list[Triple]:
    """Triples whose normalized value occurs inside the normalized question."""
    q = normalize_text(question)
    cache: dict[str, bool] = {}
    out = []
    for t in triples:
        hit = cache.get(t.value)
        if hit is None:
            nv = normalize_text(t.value)
            hit = len(nv) >= MIN_MATCH_LEN and nv in q
            cache[t.value] = hit
        if hit:
            out.append(t)
    return out


def exact_match_key_sets(question: str, graph: AtgGraph) -> KeySets:
    headers = exact_match_headers(question, graph.headers)
    values = {(t.header, t.value) for t in exact_match_triples(question, graph.triples)}
    return KeySets(frozenset(headers), frozenset(values))


def format_sample_row(graph: AtgGraph, row: int = 0) -> str:
    if graph.n_rows == 0:
        return ""
    return " | ".join(f"{t.header}: {t.value}" for t in graph.triples_of_row(row))


def parse_column_list(reply: str, headers: Sequence[str]) -> list[str]:
    """Headers named in a comma-separated reply, in table order.

    Names not present in the table are dropped. Matching is exact first,
    then on normalized text.
    """
    text = reply.strip()
    if text.lower().startswith("answer:"):
        text = text[len("answer:"):]
    items = []
    for line in text.splitlines():
        for part in line.split(","):
            part = part.strip().strip("'\"`[]").strip()
            if part:
                items.append(part)
    by_norm: dict[str, str] = {}
    for h in headers:
        by_norm.setdefault(normalize_text(h), h)
    chosen = set()
    for item in items:
        if item in headers:
            chosen.add(item)
        elif normalize_text(item) in by_norm:
            chosen.add(by_norm[normalize_text(item)])
    # headers that themselves contain commas cannot survive the split
    for h in headers:
        if "," in h and h in text:
            chosen.add(h)
    return [h for h in headers if h in chosen]


def llm_select_columns(
    question: str, graph: AtgGraph, llm: LlmClient, question_id: str | None = None
) -> tuple[list[str], str]:
    """Ask the LLM for relevant columns. Returns (headers, raw reply)."""
    prompt = render("column_select", {
        "title": graph.title,
        "question": question,
        "candidate_col": ", ".join(graph.headers),
        "sample_row": format_sample_row(graph),
    })
    reply = llm.ask(prompt, "column_select", question_id)
    return parse_column_list(reply, graph.headers), reply


def _values_named_in(reply: str, graph: AtgGraph) -> set[tuple[str, str]]:
    items = {normalize_text(p) for line in reply.splitlines() for p in line.split(",")}
    items.discard("")
    return {(t.header, t.value) for t in graph.triples if normalize_text(t.value) in items}


def build_key_sets(
    question: str,
    graph: AtgGraph,
    llm: LlmClient | None,
    config: PprConfig | None = None,
    question_id: str | None = None,
    selected: Sequence[str] | None = None,
) -> KeySets:
    """Exact-match key sets, widened with LLM-selected columns.

    ``selected`` short-circuits the LLM call when the column selection is
    already known (decomposition mode reuses its anchor-step reply).
    """
    if not question.strip():
        raise ValueError("question must be non-empty")
    config = config or PprConfig()
    keys = exact_match_key_sets(question, graph)
    if selected is not None:
        llm_headers = frozenset(h for h in selected if h in graph.headers)
        return keys.union(KeySets(llm_headers, frozenset(), llm_headers))
    if llm is None:
        return replace(keys, notes=("llm disabled: exact-match key sets only",))
    try:
        chosen, reply = llm_select_columns(question, graph, llm, question_id)
    except LlmUnavailable as exc:
        logger.warning("column selection unavailable, using exact matches only: %s", exc)
        return replace(keys, llm_degraded=True, notes=(f"llm unavailable: {exc}",))
    llm_keys = KeySets(frozenset(chosen), frozenset(), frozenset(chosen))
    if config.llm_values:
        llm_keys = replace(llm_keys, values=frozenset(_values_named_in(reply, graph)))
    return keys.union(llm_keys)


# -- personalization and propagation ---------------------------------------

def idf(df: int, n: int) -> float:
    """``ln(1 + n / (1 + df))`` with ``n`` the table's row count."""
    if n < 1 or not 0 <= df <= n:
        raise ValueError(f"need n >= 1 and 0 <= df <= n, got df={df}, n={n}")
    return math.log(1.0 + n / (1.0 + df))


def raw_personalization(
    triples: Sequence[Triple], key_sets: KeySets, graph: AtgGraph, config: PprConfig
) -> np.ndarray:
    raw = np.zeros(len(triples))
    for k, t in enumerate(triples):
        score = 0.0
        if t.header in key_sets.headers:
            score += config.v_col
        if (t.header, t.value) in key_sets.values:
            weight = config.v_val
            if config.use_idf:
                weight *= idf(graph.doc_freq(t.col, t.value), max(graph.n_rows, 1))
            score += weight
        raw[k] = score
    return raw


def normalize_scores(raw: np.ndarray) -> np.ndarray:
    total = float(raw.sum())
    if total <= 0.0:
        return np.full(len(raw), 1.0 / len(raw))
    return raw / total


def build_personalization(
    triples: Sequence[Triple], key_sets: KeySets, graph: AtgGraph, config: PprConfig
) -> np.ndarray:
    """Restart distribution over ``triples``; uniform when nothing matches."""
    if not triples:
        raise EmptyGraph("no triples to score")
    return normalize_scores(raw_personalization(triples, key_sets, graph, config))


def build_propagation(triples: Sequence[Triple] | AtgGraph, config: PprConfig) -> sp.csr_matrix:
    """Row-stochastic triple-to-triple transition matrix.

    A triple sends ``w_row / |row set|`` to each triple of its row and
    ``w_col / |column set|`` to each triple of its column, itself included
    in both, so every row sums to ``w_row + w_col = 1``. Set sizes are taken
    over ``triples``, which may be a subgraph.
    """
    if isinstance(triples, AtgGraph):
        triples = triples.triples
    n = len(triples)
    if n == 0:
        raise EmptyGraph("cannot build a propagation matrix over zero triples")
    by_row: dict[int, list[int]] = {}
    by_col: dict[int, list[int]] = {}
    for k, t in enumerate(triples):
        by_row.setdefault(t.row, []).append(k)
        by_col.setdefault(t.col, []).append(k)

    src, dst, data = [], [], []
    for groups, weight in ((by_row, config.w_row), (by_col, config.w_col)):
        if weight == 0.0:
            continue
        for members in groups.values():
            idx = np.asarray(members)
            m = len(idx)
            src.append(np.repeat(idx, m))
            dst.append(np.tile(idx, m))
            data.append(np.full(m * m, weight / m))
    if not data:
        raise ValueError("propagation weights are both zero")
    mat = sp.coo_matrix(
        (np.concatenate(data), (np.concatenate(src), np.concatenate(dst))), shape=(n, n)
    ).tocsr()
    mat.sum_duplicates()
    return mat


# -- power iteration --------------------------------------------------------

@dataclass(frozen=True)
class SalienceVector:
    scores: np.ndarray
    residual: float
    iterations: int
    residuals: tuple[float, ...] = ()


def run_qgppr(p0: np.ndarray, a_hat: sp.spmatrix | np.ndarray, config: PprConfig) -> SalienceVector:
    """``s <- alpha * p0 + (1 - alpha) * A^T s`` from uniform ``s``, K times."""
    p0 = np.asarray(p0, dtype=float)
    n = p0.shape[0]
    if a_hat.shape != (n, n):
        raise DimensionMismatch(f"p0 has length {n} but A is {a_hat.shape}")
    if n == 0:
        raise EmptyGraph("cannot run PageRank over zero triples")
    a_t = a_hat.T.tocsr() if sp.issparse(a_hat) else np.asarray(a_hat).T
    alpha = config.alpha
    s = np.full(n, 1.0 / n)
    residuals = []
    for _ in range(config.iterations):
        nxt = alpha * p0 + (1.0 - alpha) * (a_t @ s)
        residuals.append(float(np.max(np.abs(nxt - s))))
        s = nxt
    return SalienceVector(s, residuals[-1], config.iterations, tuple(residuals))


# -- reranking --------------------------------------------------------------

def detect_order_sensitive(question: str, triggers: Sequence[str] = DEFAULT_ORDER_TRIGGERS) -> bool:
    q = " ".join(question.lower().split())
    return any(re.search(rf"\b{re.escape(term)}\b", q) for term in triggers)


def is_order_sensitive(question: str, config: PprConfig) -> bool:
    if config.order_sensitive_mode == "always_preserve":
        return True
    if config.order_sensitive_mode == "never_preserve":
        return False
    return detect_order_sensitive(question, config.order_triggers)


def rank(triples: Sequence[Triple], scores: Sequence[float], order_sensitive: bool = False) -> list[Triple]:
    """Order rows by summed salience, then cells within a row by salience.

    Ties (after rounding to ``TIE_DECIMALS``) fall back to ascending triple
    id at both levels. Order-sensitive questions keep table order.
    """
    if len(triples) != len(scores):
        raise DimensionMismatch(f"{len(triples)} triples but {len(scores)} scores")
    if order_sensitive:
        return sorted(triples, key=lambda t: t.id)
    rows: dict[int, list[tuple[Triple, float]]] = {}
    for t, s in zip(triples, scores):
        rows.setdefault(t.row, []).append((t, float(s)))
    row_keys = []
    for row, members in rows.items():
        total = math.fsum(s for _, s in members)
        first_id = min(t.id for t, _ in members)
        row_keys.append((-round(total, TIE_DECIMALS), first_id, row))
    out = []
    for _, _, row in sorted(row_keys):
        members = sorted(rows[row], key=lambda ts: (-round(ts[1], TIE_DECIMALS), ts[0].id))
        out.extend(t for t, _ in members)
    return out


@dataclass
class ScoredEvidence:
    triples: list[Triple]
    key_sets: KeySets
    p0: np.ndarray
    salience: SalienceVector
    ranked: list[Triple]
    order_sensitive: bool

    def score_of(self) -> dict[int, float]:
        return {t.id: float(s) for t, s in zip(self.triples, self.salience.scores)}


def score_evidence(
    question: str,
    graph: AtgGraph,
    key_sets: KeySets,
    config: PprConfig,
    triples: Sequence[Triple] | None = None,
) -> ScoredEvidence:
    """Run personalization, propagation, iteration and ranking over ``triples``."""
    triples = list(graph.triples if triples is None else triples)
    p0 = build_personalization(triples, key_sets, graph, config)
    a_hat = build_propagation(triples, config)
    salience = run_qgppr(p0, a_hat, config)
    order_sensitive = is_order_sensitive(question, config)
    ranked = rank(triples, salience.scores, order_sensitive)
    return ScoredEvidence(triples, key_sets, p0, salience, ranked, order_sensitive)
