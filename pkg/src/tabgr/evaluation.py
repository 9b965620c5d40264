"""Datasets, answer scoring and experiment protocols.

QA answers are compared with denotation-style normalization (diacritics,
quotes, dashes, trailing citations/parentheticals, number canonicalization);
multi-part answers separated by ``|`` compare as multisets.
"""

from __future__ import annotations

import json
import logging
import math
import re
import threading
import time
import unicodedata
import zlib
from concurrent.futures import ThreadPoolExecutor
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Any, Callable, Iterable, Mapping, Sequence

from tabgr.atg import render_triple, build_atg
from tabgr.errors import LlmError, MalformedRecord, MissingTable, TabgrError
from tabgr.llm import LlmClient, count_tokens
from tabgr.pipeline import PipelineConfig, answer_question, prepare_table
from tabgr.qgppr import detect_order_sensitive, is_order_sensitive
from tabgr.reasoner import FAILED
from tabgr.table import Table, parse_table, permute, random_swap_permutation

logger = logging.getLogger(__name__)

SMALL, MEDIUM, LARGE = "small", "medium", "large"
BUCKETS = (SMALL, MEDIUM, LARGE)
SMALL_MAX = 1000
MEDIUM_MAX = 4000

FV_TRUE = frozenset({"true", "yes", "entailed", "supported"})
FV_FALSE = frozenset({"false", "no", "refuted"})


@dataclass(frozen=True)
class Example:
    id: str
    table_id: str
    question: str
    task: str
    gold: tuple[str, ...] | bool

    def __post_init__(self) -> None:
        if self.task == "qa":
            if isinstance(self.gold, bool) or not self.gold:
                raise MalformedRecord(f"qa example {self.id} needs a non-empty answer list")
        elif self.task == "fv":
            if not isinstance(self.gold, bool):
                raise MalformedRecord(f"fv example {self.id} needs a boolean label")
        else:
            raise MalformedRecord(f"unknown task {self.task!r}")

    def gold_json(self) -> Any:
        return self.gold if isinstance(self.gold, bool) else list(self.gold)


# -- loading ----------------------------------------------------------------

def _read_jsonl(path: str | Path) -> Iterable[tuple[int, Any]]:
    with open(path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, 1):
            if not line.strip():
                continue
            try:
                yield lineno, json.loads(line)
            except json.JSONDecodeError as exc:
                raise MalformedRecord(f"{path}:{lineno}: {exc}") from exc


def load_tables(path: str | Path) -> dict[str, Table]:
    tables: dict[str, Table] = {}
    for lineno, record in _read_jsonl(path):
        try:
            table = parse_table(record)
        except TabgrError as exc:
            raise MalformedRecord(f"{path}:{lineno}: {exc}") from exc
        if not table.source_id:
            raise MalformedRecord(f"{path}:{lineno}: table record without 'id'")
        tables[table.source_id] = table
    return tables


def _parse_label(value: Any, where: str) -> bool:
    if isinstance(value, bool):
        return value
    if isinstance(value, int) and value in (0, 1):
        return bool(value)
    if isinstance(value, str):
        parsed = parse_fv(value)
        if parsed is not None:
            return parsed
    raise MalformedRecord(f"{where}: unreadable label {value!r}")


def parse_example(record: Mapping[str, Any], task: str, where: str = "") -> Example:
    try:
        qid, table_id, question = str(record["id"]), str(record["table_id"]), str(record["question"])
    except KeyError as exc:
        raise MalformedRecord(f"{where}: missing field {exc}") from exc
    if task == "qa":
        answers = record.get("answers", record.get("answer"))
        if answers is None:
            raise MalformedRecord(f"{where}: qa record without 'answers'")
        if isinstance(answers, (str, int, float)):
            answers = [answers]
        gold: tuple[str, ...] | bool = tuple(str(a) for a in answers)
    else:
        if "label" not in record:
            raise MalformedRecord(f"{where}: fv record without 'label'")
        gold = _parse_label(record["label"], where)
    return Example(qid, table_id, question, task, gold)


def load_dataset(
    questions_path: str | Path, tables_path: str | Path, task: str = "qa"
) -> tuple[list[Example], dict[str, Table]]:
    """Read question and table JSON Lines files; every table id must resolve."""
    tables = load_tables(tables_path)
    examples = []
    for lineno, record in _read_jsonl(questions_path):
        ex = parse_example(record, task, f"{questions_path}:{lineno}")
        if ex.table_id not in tables:
            raise MissingTable(ex.table_id)
        examples.append(ex)
    logger.info("loaded %d examples over %d tables", len(examples), len(tables))
    return examples, tables


# -- scoring ----------------------------------------------------------------

def normalize_answer(text: str) -> str:
    text = "".join(c for c in unicodedata.normalize("NFKD", str(text))
                   if unicodedata.category(c) != "Mn")
    text = re.sub(r"[‘’´`]", "'", text)
    text = re.sub(r"[“”]", '"', text)
    text = re.sub("[\u2010\u2011\u2012\u2013\u2014\u2212]", "-", text)
    while True:
        old = text
        text = re.sub(r"((?<!^)\[[^\]]*\]|\[\d+\]|[•♦†‡*#+])*$", "", text.strip())
        text = re.sub(r"(?<!^)( \([^)]*\))*$", "", text.strip())
        text = re.sub(r'^"([^"]*)"$', r"\1", text.strip())
        text = re.sub(r"^'([^']*)'$", r"\1", text.strip())
        if text == old:
            break
    if text.endswith("."):
        text = text[:-1]
    return re.sub(r"\s+", " ", text).lower().strip()


_GROUPED_NUMBER_RE = re.compile(r"^[+-]?\d{1,3}(,\d{3})+(\.\d+)?$")


def parse_number(text: str) -> float | None:
    if _GROUPED_NUMBER_RE.match(text):
        text = text.replace(",", "")
    try:
        value = float(text)
    except ValueError:
        return None
    if math.isnan(value) or math.isinf(value):
        return None
    return value


@dataclass(frozen=True)
class AnswerValue:
    text: str
    number: float | None

    @classmethod
    def of(cls, raw: str) -> AnswerValue:
        norm = normalize_answer(raw)
        return cls(norm, parse_number(norm))

    def matches(self, other: AnswerValue) -> bool:
        if self.number is not None and other.number is not None:
            return abs(self.number - other.number) < 1e-6
        return self.text == other.text


def _values(answer: str) -> list[AnswerValue]:
    return [AnswerValue.of(part) for part in str(answer).split("|")]


def _multiset_match(pred: list[AnswerValue], gold: list[AnswerValue]) -> bool:
    if len(pred) != len(gold):
        return False
    remaining = list(pred)
    for g in gold:
        for k, p in enumerate(remaining):
            if p.matches(g):
                del remaining[k]
                break
        else:
            return False
    return True


def score_qa(predicted: str, gold: Sequence[str]) -> bool:
    """True iff the prediction denotes the same answer as any gold entry."""
    pred = _values(predicted)
    return any(_multiset_match(pred, _values(g)) for g in gold)


def parse_fv(text: str) -> bool | None:
    """Map a verdict to a boolean; None when it is missing or contradictory."""
    t = str(text).lower()
    if re.search(r"\bnot\s+(?:supported|entailed|true)\b", t):
        return False
    if re.search(r"\bnot\s+(?:refuted|false)\b", t):
        return True
    tokens = set(re.findall(r"[a-z]+", t))
    pos, neg = bool(tokens & FV_TRUE), bool(tokens & FV_FALSE)
    if pos == neg:
        return None
    return pos


def score_fv(predicted: str, gold: bool) -> bool:
    parsed = parse_fv(predicted)
    return parsed is not None and parsed == gold


def bucket_for_tokens(n_tokens: int) -> str:
    if n_tokens < SMALL_MAX:
        return SMALL
    if n_tokens <= MEDIUM_MAX:
        return MEDIUM
    return LARGE


def table_tokens(table: Table, tokenizer: Callable[[str], int] = count_tokens) -> int:
    return tokenizer("\n".join(render_triple(t) for t in build_atg(table).triples))


def bucket_of(table: Table, tokenizer: Callable[[str], int] = count_tokens) -> str:
    """Size bucket from the token count of the table's triple rendering."""
    return bucket_for_tokens(table_tokens(table, tokenizer))


# -- running ----------------------------------------------------------------

def evaluate_example(
    example: Example,
    table: Table,
    llm: LlmClient,
    config: PipelineConfig,
    ledger_key: str | None = None,
) -> dict[str, Any]:
    """Run one question end to end and return its result record."""
    key = ledger_key or example.id
    started = time.perf_counter()
    record: dict[str, Any] = {
        "id": example.id,
        "table_id": example.table_id,
        "question": example.question,
        "task": example.task,
        "mode": config.mode,
        "gold": example.gold_json(),
        "bucket": bucket_of(prepare_table(table, config)),
        "order_sensitive": is_order_sensitive(example.question, config.ppr),
    }
    try:
        outcome = answer_question(example.question, table, llm, config, key)
    except (TabgrError, ValueError) as exc:
        logger.warning("question %s failed: %s", example.id, exc)
        record.update({
            "status": "error", "error": f"{type(exc).__name__}: {exc}",
            "answer": "", "correct": False, "parse_status": None, "parse_miss": False,
            "path": [], "grounded_fraction": None, "trace": None,
            "external_error": isinstance(exc, LlmError),
        })
        record["usage"] = llm.ledger.question(key)
        record["timing"] = {"atg_build_s": None, "total_s": time.perf_counter() - started}
        return record

    result = outcome.result
    if example.task == "qa":
        correct = result.parse_status != FAILED and score_qa(result.answer, example.gold)
        parse_miss = result.parse_status == FAILED
    else:
        verdict = parse_fv(result.answer) if result.parse_status != FAILED else None
        correct = verdict is not None and verdict == example.gold
        parse_miss = verdict is None
    record.update({
        "status": "ok",
        "error": None,
        "answer": result.answer,
        "correct": bool(correct),
        "parse_status": result.parse_status,
        "parse_miss": parse_miss,
        "repairs": list(result.repairs),
        "path": list(result.path),
        "grounded_fraction": outcome.grounded_fraction,
        "n_evidence": len(outcome.evidence),
        "trace": outcome.trace.to_dict() if outcome.trace is not None else None,
        "usage": llm.ledger.question(key),
        "timing": {"atg_build_s": outcome.build_seconds, "total_s": time.perf_counter() - started},
    })
    return record


class RecordWriter:
    """Append-only JSON Lines writer shared by worker threads."""

    def __init__(self, path: str | Path | None) -> None:
        self.path = Path(path) if path is not None else None
        self._lock = threading.Lock()

    def write(self, record: Mapping[str, Any]) -> None:
        if self.path is None:
            return
        line = json.dumps(record, ensure_ascii=False, sort_keys=True)
        with self._lock, open(self.path, "a", encoding="utf-8") as fh:
            fh.write(line + "\n")


def read_records(path: str | Path) -> dict[str, dict[str, Any]]:
    """Existing per-question records keyed by id; a torn last line is ignored."""
    records: dict[str, dict[str, Any]] = {}
    p = Path(path)
    if not p.exists():
        return records
    for line in p.read_text(encoding="utf-8").splitlines():
        if not line.strip():
            continue
        try:
            rec = json.loads(line)
        except json.JSONDecodeError:
            logger.warning("skipping torn record line in %s", p)
            continue
        records.setdefault(rec["id"], rec)
    return records


@dataclass
class EvalReport:
    n_examples: int = 0
    n_correct: int = 0
    n_incorrect: int = 0
    n_failed: int = 0
    accuracy: float = 0.0
    parse_misses: int = 0
    order_sensitive: int = 0
    buckets: dict[str, dict[str, Any]] = field(default_factory=dict)
    tokens: dict[str, Any] = field(default_factory=dict)
    grounding: dict[str, Any] = field(default_factory=dict)
    config: dict[str, Any] = field(default_factory=dict)
    permutation: dict[str, Any] | None = None

    def to_dict(self) -> dict[str, Any]:
        return asdict(self)


def _mean(values: Sequence[float]) -> float | None:
    return math.fsum(values) / len(values) if values else None


def summarize(records: Sequence[Mapping[str, Any]], config: Mapping[str, Any] | None = None,
              token_basis: str | None = None) -> EvalReport:
    """Aggregate per-question records (in dataset order) into a report."""
    n = len(records)
    correct = sum(1 for r in records if r["correct"])
    failed = sum(1 for r in records if r["status"] != "ok" or r.get("parse_status") == FAILED)
    buckets = {}
    for name in BUCKETS:
        members = [r for r in records if r["bucket"] == name]
        hits = sum(1 for r in members if r["correct"])
        buckets[name] = {"n": len(members), "correct": hits,
                         "accuracy": hits / len(members) if members else None}
    inputs = [r["usage"]["input_tokens"] for r in records]
    outputs = [r["usage"]["output_tokens"] for r in records]
    calls_by_type: dict[str, int] = {}
    for r in records:
        for k, v in r["usage"].get("calls_by_type", {}).items():
            calls_by_type[k] = calls_by_type.get(k, 0) + v
    grounded = [r["grounded_fraction"] for r in records if r.get("grounded_fraction") is not None]
    return EvalReport(
        n_examples=n,
        n_correct=correct,
        n_incorrect=n - correct - failed,
        n_failed=failed,
        accuracy=correct / n if n else 0.0,
        parse_misses=sum(1 for r in records if r.get("parse_miss")),
        order_sensitive=sum(1 for r in records if r.get("order_sensitive")),
        buckets=buckets,
        tokens={
            "basis": token_basis or "approx:ceil(chars/4)",
            "input_total": sum(inputs),
            "output_total": sum(outputs),
            "input_mean": _mean(inputs),
            "output_mean": _mean(outputs),
            "calls": sum(r["usage"]["calls"] for r in records),
            "calls_by_type": dict(sorted(calls_by_type.items())),
        },
        grounding={"n_with_path": len(grounded), "mean_grounded_fraction": _mean(grounded)},
        config=dict(config or {}),
    )


def timing_summary(records: Sequence[Mapping[str, Any]]) -> dict[str, Any]:
    builds = [r["timing"]["atg_build_s"] for r in records if r["timing"].get("atg_build_s") is not None]
    totals = [r["timing"]["total_s"] for r in records]
    return {
        "atg_build_mean_s": _mean(builds),
        "atg_build_max_s": max(builds) if builds else None,
        "atg_build_total_s": math.fsum(builds),
        "question_mean_s": _mean(totals),
    }


def _evaluate(
    examples: Sequence[Example],
    table_for: Callable[[Example], Table],
    llm: LlmClient,
    config: PipelineConfig,
    *,
    workers: int = 1,
    label: str = "",
    done: Mapping[str, Mapping[str, Any]] | None = None,
    writer: RecordWriter | None = None,
) -> list[dict[str, Any]]:
    done = done or {}
    todo = [ex for ex in examples if ex.id not in done]

    def run(ex: Example) -> dict[str, Any]:
        key = f"{label}/{ex.id}" if label else ex.id
        rec = evaluate_example(ex, table_for(ex), llm, config, key)
        if writer is not None:
            writer.write(rec)
        return rec

    if workers > 1 and len(todo) > 1:
        with ThreadPoolExecutor(max_workers=workers) as pool:
            fresh = list(pool.map(run, todo))
    else:
        fresh = [run(ex) for ex in todo]
    by_id = {**{k: dict(v) for k, v in done.items()}, **{r["id"]: r for r in fresh}}
    return [by_id[ex.id] for ex in examples if ex.id in by_id]


def run_eval(
    examples: Sequence[Example],
    tables: Mapping[str, Table],
    config: PipelineConfig,
    llm: LlmClient,
    *,
    workers: int = 1,
    records_path: str | Path | None = None,
    resume: bool = False,
    config_snapshot: Mapping[str, Any] | None = None,
) -> tuple[EvalReport, list[dict[str, Any]]]:
    """Evaluate every example; failures are recorded and the run continues."""
    done = read_records(records_path) if (resume and records_path) else {}
    if records_path is not None:
        # rewrite so a torn line from an interrupted run cannot swallow the next record
        Path(records_path).write_text(
            "".join(json.dumps(r, ensure_ascii=False, sort_keys=True) + "\n" for r in done.values()),
            encoding="utf-8",
        )
    records = _evaluate(examples, lambda ex: tables[ex.table_id], llm, config,
                        workers=workers, done=done, writer=RecordWriter(records_path))
    basis = ",".join(sorted(llm.ledger.token_bases)) or None
    return summarize(records, config_snapshot, basis), records


def table_seed(seed: int, table_id: str) -> int:
    return zlib.crc32(f"{seed}:{table_id}".encode("utf-8"))


def shuffled_table(table: Table, seed: int, shuffle_cols: bool) -> Table:
    perm = random_swap_permutation(table.n_rows, table.n_cols, table_seed(seed, table.source_id),
                                   shuffle_cols=shuffle_cols)
    return permute(table, perm)


SHUFFLE_MODES = {"row": False, "row_col": True}


def run_permutation_experiment(
    examples: Sequence[Example],
    tables: Mapping[str, Table],
    seeds: Sequence[int],
    config: PipelineConfig,
    llm: LlmClient,
    *,
    workers: int = 1,
    baseline: Sequence[Mapping[str, Any]] | None = None,
) -> dict[str, Any]:
    """Accuracy change under row and row+column shuffles, averaged over seeds.

    Order-sensitive questions keep their original table.
    """
    if not seeds:
        raise ValueError("at least one seed is required")
    if baseline is None:
        baseline = _evaluate(examples, lambda ex: tables[ex.table_id], llm, config,
                             workers=workers, label="base")
    base_acc = summarize(baseline).accuracy
    skipped = [ex.id for ex in examples if detect_order_sensitive(ex.question, config.ppr.order_triggers)]
    skip = set(skipped)
    out: dict[str, Any] = {"baseline_accuracy": base_acc, "seeds": list(seeds),
                           "order_sensitive_kept": len(skipped), "modes": {}}
    for mode, shuffle_cols in SHUFFLE_MODES.items():
        per_seed = []
        for seed in seeds:
            cache: dict[str, Table] = {}

            def table_for(ex: Example, seed=seed, cache=cache, shuffle_cols=shuffle_cols) -> Table:
                table = tables[ex.table_id]
                if ex.id in skip:
                    return table
                if ex.table_id not in cache:
                    cache[ex.table_id] = shuffled_table(table, seed, shuffle_cols)
                return cache[ex.table_id]

            # fill the cache up front so worker threads only read it
            for ex in examples:
                table_for(ex)
            recs = _evaluate(examples, table_for, llm, config, workers=workers,
                             label=f"{mode}:{seed}")
            acc = summarize(recs).accuracy
            per_seed.append({
                "seed": seed,
                "accuracy": acc,
                "delta": acc - base_acc,
                "relative_change_pct": 100.0 * (acc - base_acc) / base_acc if base_acc else None,
            })
        rel = [p["relative_change_pct"] for p in per_seed if p["relative_change_pct"] is not None]
        out["modes"][mode] = {
            "per_seed": per_seed,
            "mean_delta": _mean([p["delta"] for p in per_seed]),
            "mean_relative_change_pct": _mean(rel),
        }
    return out


def write_report(out_dir: str | Path, report: EvalReport, records: Sequence[Mapping[str, Any]]) -> None:
    """``summary.json`` holds only deterministic fields; wall-clock data goes to ``timings.json``."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    (out / "summary.json").write_text(
        json.dumps(report.to_dict(), indent=2, sort_keys=True, ensure_ascii=False) + "\n",
        encoding="utf-8",
    )
    (out / "timings.json").write_text(
        json.dumps(timing_summary(records), indent=2, sort_keys=True) + "\n", encoding="utf-8"
    )
