"""Answer generation over ranked triples and parsing of the structured reply.

Expected reply grammar::

    <think> <paths> t1 → t2 → ... </paths> free text </think>
    <answer> text </answer>

Replies that deviate are repaired only by the rules listed in ``REPAIRS``;
anything else is ``failed``. Parsing never raises.
"""

from __future__ import annotations

import logging
import re
from dataclasses import dataclass, field
from typing import Any, Iterable, Sequence

from tabgr.atg import Triple, parse_rendered_triple, render_triple
from tabgr.llm import LlmClient, render

logger = logging.getLogger(__name__)

CLEAN = "clean"
REPAIRED = "repaired"
FAILED = "failed"

REPAIRS = {
    "missing_answer_close": "single <answer> with trailing text and no </answer>",
    "multiple_answers": "several complete <answer> blocks; the last one is used",
    "missing_think_open": "no <think> tag; reasoning starts at the beginning",
    "missing_think_close": "no </think>; reasoning ends at <answer>",
    "missing_paths_open": "no <paths>; path starts at the reasoning start",
    "missing_paths_close": "no </paths>; path is the leading run of triple lines",
    "missing_paths": "no <paths> section; empty path",
    "extraneous_text": "text outside the sections is ignored",
    "path_split": "several triples on one segment were split apart",
    "ascii_arrow": "'->' used as the path separator",
    "dropped_path_entries": "path segments that are not triples were dropped",
}

ANSWER_PRIMER = "<think>\n<paths>"

_TAG_RE = {name: re.compile(re.escape(name), re.IGNORECASE)
           for name in ("<answer>", "</answer>", "<think>", "</think>", "<paths>", "</paths>")}
_ANSWER_BLOCK_RE = re.compile(r"<answer>(.*?)</answer>", re.IGNORECASE | re.DOTALL)
_MULTI_TRIPLE_RE = re.compile(r"(?<=\))\s*[,;]?\s*(?=\(\s*row\s*\d+\s*;)", re.IGNORECASE)


@dataclass
class ReasoningResult:
    path: list[str] = field(default_factory=list)
    cot: str = ""
    answer: str = ""
    parse_status: str = FAILED
    raw: str = ""
    repairs: list[str] = field(default_factory=list)

    def to_dict(self) -> dict[str, Any]:
        return {
            "path": list(self.path),
            "cot": self.cot,
            "answer": self.answer,
            "parse_status": self.parse_status,
            "repairs": list(self.repairs),
        }


@dataclass(frozen=True)
class PathVerdict:
    entry: str
    grounded: bool
    triple_id: int | None = None


def _positions(tag: str, text: str) -> list[int]:
    return [m.start() for m in _TAG_RE[tag].finditer(text)]


def _is_triple(entry: str) -> bool:
    return parse_rendered_triple(entry) is not None


def _split_path(text: str, repairs: list[str]) -> list[str]:
    if "->" in text:
        repairs.append("ascii_arrow")
        text = text.replace("->", "→")
    entries = []
    dropped = False
    for line in text.splitlines():
        for seg in line.split("→"):
            seg = seg.strip()
            if not seg:
                continue
            parts = [p.strip() for p in _MULTI_TRIPLE_RE.split(seg) if p.strip()]
            if len(parts) > 1 and all(_is_triple(p) for p in parts):
                repairs.append("path_split")
                entries.extend(parts)
            elif _is_triple(seg):
                entries.append(seg)
            else:
                dropped = True
    if dropped:
        repairs.append("dropped_path_entries")
    return entries


def _leading_triple_lines(text: str) -> tuple[str, str]:
    """Split at the first non-empty line that carries no triple."""
    lines = text.splitlines(keepends=True)
    cut = 0
    for k, line in enumerate(lines):
        stripped = line.strip()
        if not stripped:
            cut = k + 1
            continue
        segs = [s.strip() for s in stripped.replace("->", "→").split("→") if s.strip()]
        if segs and all(_is_triple(s) or len(_MULTI_TRIPLE_RE.split(s)) > 1 for s in segs):
            cut = k + 1
        else:
            break
    return "".join(lines[:cut]), "".join(lines[cut:])


def _failed(raw: str, reason: str) -> ReasoningResult:
    return ReasoningResult(parse_status=FAILED, raw=raw, repairs=[reason])


def parse_output(raw: str) -> ReasoningResult:
    """Split a reply into path, chain of thought and answer."""
    if not isinstance(raw, str):
        raw = "" if raw is None else str(raw)
    text = raw
    repairs: list[str] = []

    opens, closes = _positions("<answer>", text), _positions("</answer>", text)
    if not opens:
        return _failed(raw, "no_answer")
    blocks = list(_ANSWER_BLOCK_RE.finditer(text))
    if len(opens) == len(closes) and len(blocks) == len(opens):
        if len(blocks) > 1:
            repairs.append("multiple_answers")
        answer = blocks[-1].group(1).strip()
        if text[blocks[-1].end():].strip():
            repairs.append("extraneous_text")
    elif len(opens) == 1 and not closes:
        answer = text[opens[0] + len("<answer>"):].strip()
        if not answer:
            return _failed(raw, "empty_unclosed_answer")
        repairs.append("missing_answer_close")
    else:
        return _failed(raw, "unbalanced_answer_tags")

    region = text[:opens[0]]
    think_opens, think_closes = _positions("<think>", region), _positions("</think>", region)
    if len(think_opens) > 1 or len(think_closes) > 1:
        return _failed(raw, "repeated_think_tags")
    start = 0
    if think_opens:
        if region[:think_opens[0]].strip():
            repairs.append("extraneous_text")
        start = think_opens[0] + len("<think>")
    else:
        repairs.append("missing_think_open")
    if think_closes:
        if think_closes[0] < start:
            return _failed(raw, "think_close_before_open")
        body = region[start:think_closes[0]]
        if region[think_closes[0] + len("</think>"):].strip():
            repairs.append("extraneous_text")
    else:
        repairs.append("missing_think_close")
        body = region[start:]

    p_opens, p_closes = _positions("<paths>", body), _positions("</paths>", body)
    if len(p_opens) > 1 or len(p_closes) > 1:
        return _failed(raw, "repeated_paths_tags")
    if p_opens and p_closes:
        if p_closes[0] < p_opens[0]:
            return _failed(raw, "paths_close_before_open")
        before = body[:p_opens[0]]
        path_text = body[p_opens[0] + len("<paths>"):p_closes[0]]
        after = body[p_closes[0] + len("</paths>"):]
        if before.strip():
            repairs.append("extraneous_text")
        cot = (before.strip() + "\n" + after.strip()).strip()
    elif p_opens:
        repairs.append("missing_paths_close")
        path_text, cot = _leading_triple_lines(body[p_opens[0] + len("<paths>"):])
        cot = (body[:p_opens[0]].strip() + "\n" + cot.strip()).strip()
    elif p_closes:
        repairs.append("missing_paths_open")
        path_text = body[:p_closes[0]]
        cot = body[p_closes[0] + len("</paths>"):].strip()
    else:
        repairs.append("missing_paths")
        path_text, cot = "", body.strip()

    path = _split_path(path_text, repairs)
    repairs = list(dict.fromkeys(repairs))
    status = REPAIRED if repairs else CLEAN
    if repairs:
        logger.info("reply repaired: %s", ", ".join(repairs))
    return ReasoningResult(path, cot, answer, status, raw, repairs)


def format_output(result: ReasoningResult) -> str:
    """Render a result in the grammar that :func:`parse_output` reads."""
    return (f"<think><paths>{' → '.join(result.path)}</paths>{result.cot}</think>"
            f"<answer>{result.answer}</answer>")


def with_primer(reply: str) -> str:
    """Re-attach the ``<think>\\n<paths>`` opener the prompt ended with."""
    lowered = reply.lower()
    if "<think>" in lowered:
        return reply
    if "<paths>" in lowered:
        return "<think>\n" + reply
    return ANSWER_PRIMER + reply


def generate_answer(
    question: str,
    title: str,
    headers: Sequence[str],
    ranked_triples: Sequence[Triple],
    llm: LlmClient,
    question_id: str | None = None,
) -> ReasoningResult:
    if not ranked_triples:
        raise ValueError("answer generation needs at least one triple")
    prompt = render("answer_gen", {
        "title": title,
        "question": question,
        "header": " | ".join(headers),
        "reasoning_paths": "\n".join(render_triple(t) for t in ranked_triples),
    })
    reply = llm.ask(prompt, "answer_gen", question_id)
    result = parse_output(with_primer(reply))
    result.raw = reply
    return result


def validate_path(result: ReasoningResult, evidence: Iterable[Triple]) -> list[PathVerdict]:
    """Check each path entry against the evidence triples it was given."""
    index: dict[tuple[int, str, str], int] = {}
    for t in evidence:
        index.setdefault((t.row, t.header.strip(), t.value.strip()), t.id)
    verdicts = []
    for entry in result.path:
        parsed = parse_rendered_triple(entry)
        tid = None
        if parsed is not None:
            row, header, value = parsed
            tid = index.get((row, header.strip(), value.strip()))
        verdicts.append(PathVerdict(entry, tid is not None, tid))
    return verdicts


def grounded_fraction(verdicts: Sequence[PathVerdict]) -> float | None:
    if not verdicts:
        return None
    return sum(v.grounded for v in verdicts) / len(verdicts)
