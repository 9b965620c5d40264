"""Command-line entry point.

Settings resolve as built-in defaults < YAML config file < command-line flags.
Exit codes: 0 success, 2 input error, 3 LLM/service error, 4 config error.
"""

from __future__ import annotations

import argparse
import json
import logging
import sys
import time
from dataclasses import asdict, dataclass, field, fields, replace
from pathlib import Path
from typing import Any, Sequence

import yaml

from tabgr.atg import build_atg, dump_edges, render_triple, triples_to_json
from tabgr.errors import ConfigError, LlmError, MissingTable, TableError, TabgrError
from tabgr.evaluation import (
    load_dataset,
    load_tables,
    run_eval,
    run_permutation_experiment,
    write_report,
)
from tabgr.llm import LlmClient, MockClient, RemoteClient
from tabgr.pipeline import MODES, TASKS, PipelineConfig, answer_question, prepare_table, select_evidence
from tabgr.qgppr import default_config
from tabgr.table import Table

logger = logging.getLogger("tabgr")

EXIT_OK, EXIT_INPUT, EXIT_LLM, EXIT_CONFIG = 0, 2, 3, 4

# run-specific fields left out of the config snapshot embedded in reports
_SNAPSHOT_EXCLUDE = ("out", "resume")


@dataclass
class RunConfig:
    mode: str = "full"
    task: str = "qa"
    alpha: float | None = None
    w_row: float | None = None
    iterations: int = 20
    max_rounds: int = 3
    fallback_full_graph: bool = False
    forward_fill_cols: list[int] = field(default_factory=list)
    dataset: str | None = None
    tables: str | None = None
    llm_base_url: str | None = None
    llm_model: str | None = None
    mock_script: str | None = None
    temperature: float = 0.0
    timeout: float = 60.0
    workers: int = 1
    out: str | None = None
    seeds: list[int] = field(default_factory=lambda: [0, 1])
    resume: bool = False

    def validate(self, needs_llm: bool) -> None:
        if self.mode not in MODES:
            raise ConfigError(f"mode must be one of {MODES}, got {self.mode!r}")
        if self.task not in TASKS:
            raise ConfigError(f"task must be one of {TASKS}, got {self.task!r}")
        if self.workers < 1:
            raise ConfigError("workers must be >= 1")
        if self.llm_base_url and self.mock_script:
            raise ConfigError("configure either a remote LLM or a mock script, not both")
        if self.llm_base_url and not self.llm_model:
            raise ConfigError("--llm-model is required with --llm-base-url")
        if (needs_llm or self.mode == "decomposed") and not (self.llm_base_url or self.mock_script):
            raise ConfigError("this run needs an LLM: pass --llm-base-url/--llm-model or --mock-script")

    def pipeline(self) -> PipelineConfig:
        ppr = default_config(self.mode, self.task)
        try:
            if self.w_row is not None:
                ppr = ppr.with_w_row(self.w_row)
            if self.alpha is not None:
                ppr = replace(ppr, alpha=self.alpha)
            ppr = replace(ppr, iterations=self.iterations)
            return PipelineConfig(
                mode=self.mode, task=self.task, ppr=ppr, max_rounds=self.max_rounds,
                fallback_full_graph=self.fallback_full_graph,
                forward_fill_cols=tuple(self.forward_fill_cols),
            )
        except ValueError as exc:
            raise ConfigError(str(exc)) from exc

    def snapshot(self) -> dict[str, Any]:
        data = asdict(self)
        for key in _SNAPSHOT_EXCLUDE:
            data.pop(key, None)
        ppr = self.pipeline().ppr
        data.update(alpha=ppr.alpha, w_row=ppr.w_row, w_col=ppr.w_col,
                    v_col=ppr.v_col, v_val=ppr.v_val, use_idf=ppr.use_idf,
                    order_sensitive_mode=ppr.order_sensitive_mode)
        return data


_CONFIG_KEYS = {f.name for f in fields(RunConfig)}


def load_config_file(path: str | None) -> dict[str, Any]:
    if not path:
        return {}
    try:
        data = yaml.safe_load(Path(path).read_text(encoding="utf-8")) or {}
    except (OSError, yaml.YAMLError) as exc:
        raise ConfigError(f"cannot read config {path}: {exc}") from exc
    if not isinstance(data, dict):
        raise ConfigError(f"config {path} must be a mapping")
    data = {k.replace("-", "_"): v for k, v in data.items()}
    unknown = sorted(set(data) - _CONFIG_KEYS)
    if unknown:
        raise ConfigError(f"unknown config keys: {', '.join(unknown)}")
    return data


def resolve_config(args: argparse.Namespace) -> RunConfig:
    values = load_config_file(getattr(args, "config", None))
    for name in _CONFIG_KEYS:
        flag = getattr(args, name, None)
        if flag is not None and flag is not False:
            values[name] = flag
    try:
        return RunConfig(**values)
    except TypeError as exc:
        raise ConfigError(str(exc)) from exc


def make_client(config: RunConfig) -> LlmClient | None:
    if config.mock_script:
        try:
            return MockClient.from_file(config.mock_script)
        except (OSError, yaml.YAMLError, KeyError, TypeError, ValueError) as exc:
            raise ConfigError(f"bad mock script {config.mock_script}: {exc}") from exc
    if config.llm_base_url:
        return RemoteClient(config.llm_base_url, config.llm_model or "",
                            temperature=config.temperature, timeout=config.timeout)
    return None


def write_config(config: RunConfig, out_dir: Path) -> None:
    out_dir.mkdir(parents=True, exist_ok=True)
    (out_dir / "config.yaml").write_text(yaml.safe_dump(asdict(config), sort_keys=True), encoding="utf-8")


def _read_table(path: str, table_id: str | None) -> Table:
    tables = load_tables(path)
    if not tables:
        raise TableError(f"{path}: no tables")
    if table_id is None:
        return next(iter(tables.values()))
    if table_id not in tables:
        raise MissingTable(table_id)
    return tables[table_id]


def _print_json(obj: Any) -> None:
    print(json.dumps(obj, indent=2, ensure_ascii=False, sort_keys=True))


# -- commands ---------------------------------------------------------------

def cmd_build_graph(args: argparse.Namespace) -> int:
    table = _read_table(args.table_file, args.table_id)
    started = time.perf_counter()
    graph = build_atg(table)
    elapsed = time.perf_counter() - started
    print(f"nodes={len(graph.nodes)} edges={len(graph.edges)} triples={len(graph.triples)}")
    print(f"build_ms={elapsed * 1000:.3f}")
    if args.export_triples:
        Path(args.export_triples).write_text(triples_to_json(graph.triples) + "\n", encoding="utf-8")
    if args.export_edges:
        Path(args.export_edges).write_text(dump_edges(graph) + "\n", encoding="utf-8")
    return EXIT_OK


def cmd_score(args: argparse.Namespace) -> int:
    config = resolve_config(args)
    config.validate(needs_llm=False)
    pipe = config.pipeline()
    if args.no_llm:
        pipe = replace(pipe, use_llm_key_sets=False)
        llm = None
        if pipe.mode == "decomposed":
            raise ConfigError("--no-llm cannot be combined with decomposed mode")
    else:
        llm = make_client(config)
    table = prepare_table(_read_table(args.tables, args.table_id), pipe)
    graph = build_atg(table)
    scored, _ = select_evidence(args.question, graph, llm, pipe, "score")
    scores = scored.score_of()
    for k, t in enumerate(scored.ranked, 1):
        print(f"{k}\t{scores[t.id]:.10f}\t{render_triple(t)}")
    return EXIT_OK


def cmd_answer(args: argparse.Namespace) -> int:
    config = resolve_config(args)
    config.validate(needs_llm=True)
    pipe = config.pipeline()
    llm = make_client(config)
    table = _read_table(args.tables, args.table_id)
    outcome = answer_question(args.question, table, llm, pipe, "answer")
    record = outcome.result.to_dict()
    record.update(
        question=args.question,
        mode=pipe.mode,
        grounded_fraction=outcome.grounded_fraction,
        grounded=[v.grounded for v in outcome.verdicts],
        n_evidence=len(outcome.evidence),
        usage=llm.ledger.question("answer"),
    )
    if outcome.trace is not None:
        record["trace"] = outcome.trace.to_dict()
    _print_json(record)
    return EXIT_OK


def _eval_setup(args: argparse.Namespace):
    config = resolve_config(args)
    config.validate(needs_llm=True)
    if not config.dataset or not config.tables:
        raise ConfigError("--dataset and --tables are required")
    if not config.out:
        raise ConfigError("--out is required")
    pipe = config.pipeline()
    examples, tables = load_dataset(config.dataset, config.tables, config.task)
    out = Path(config.out)
    write_config(config, out)
    return config, pipe, examples, tables, out


def cmd_eval(args: argparse.Namespace) -> int:
    config, pipe, examples, tables, out = _eval_setup(args)
    llm = make_client(config)
    report, records = run_eval(examples, tables, pipe, llm, workers=config.workers,
                               records_path=out / "records.jsonl", resume=config.resume,
                               config_snapshot=config.snapshot())
    write_report(out, report, records)
    print(f"accuracy={report.accuracy:.4f} correct={report.n_correct} "
          f"incorrect={report.n_incorrect} failed={report.n_failed} n={report.n_examples}")
    return EXIT_OK


def cmd_shuffle_eval(args: argparse.Namespace) -> int:
    config, pipe, examples, tables, out = _eval_setup(args)
    if not config.seeds:
        raise ConfigError("at least one seed is required")
    llm = make_client(config)
    report, records = run_eval(examples, tables, pipe, llm, workers=config.workers,
                               records_path=out / "records.jsonl", resume=config.resume,
                               config_snapshot=config.snapshot())
    report.permutation = run_permutation_experiment(
        examples, tables, config.seeds, pipe, llm, workers=config.workers, baseline=records)
    write_report(out, report, records)
    for mode, section in report.permutation["modes"].items():
        print(f"{mode}: mean_delta={section['mean_delta']:+.4f}")
    return EXIT_OK


# -- parser -----------------------------------------------------------------

def _add_run_options(p: argparse.ArgumentParser) -> None:
    p.add_argument("--config", help="YAML run config; flags override its values")
    p.add_argument("--mode", choices=MODES)
    p.add_argument("--task", choices=TASKS)
    p.add_argument("--alpha", type=float)
    p.add_argument("--w-row", dest="w_row", type=float)
    p.add_argument("--iterations", type=int)
    p.add_argument("--max-rounds", dest="max_rounds", type=int)
    p.add_argument("--llm-base-url", dest="llm_base_url")
    p.add_argument("--llm-model", dest="llm_model")
    p.add_argument("--mock-script", dest="mock_script")
    p.add_argument("--workers", type=int)


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="tabgr", description=__doc__.splitlines()[0])
    parser.add_argument("-v", "--verbose", action="count", default=0)
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("build-graph", help="build the table graph and print its size")
    p.add_argument("table_file")
    p.add_argument("--table-id", dest="table_id")
    p.add_argument("--export-triples", dest="export_triples")
    p.add_argument("--export-edges", dest="export_edges")
    p.set_defaults(func=cmd_build_graph)

    for name, func, helptext in (("score", cmd_score, "print ranked triples with salience"),
                                 ("answer", cmd_answer, "answer one question")):
        p = sub.add_parser(name, help=helptext)
        _add_run_options(p)
        p.add_argument("--tables", required=True)
        p.add_argument("--table-id", dest="table_id")
        p.add_argument("--question", required=True)
        if name == "score":
            p.add_argument("--no-llm", dest="no_llm", action="store_true",
                           help="exact-match key sets only")
        p.set_defaults(func=func)

    for name, func, helptext in (("eval", cmd_eval, "evaluate a dataset"),
                                 ("shuffle-eval", cmd_shuffle_eval, "row/column shuffle robustness")):
        p = sub.add_parser(name, help=helptext)
        _add_run_options(p)
        p.add_argument("--dataset")
        p.add_argument("--tables")
        p.add_argument("--out")
        p.add_argument("--seeds", type=int, nargs="+")
        p.add_argument("--resume", action="store_true")
        p.set_defaults(func=func)
    return parser


def main(argv: Sequence[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    level = logging.WARNING - 10 * min(args.verbose, 2)
    logging.basicConfig(level=level, format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except LlmError as exc:
        print(f"LLM error: {exc}", file=sys.stderr)
        return EXIT_LLM
    except (TabgrError, OSError, ValueError) as exc:
        print(f"input error: {exc}", file=sys.stderr)
        return EXIT_INPUT


if __name__ == "__main__":
    sys.exit(main())
