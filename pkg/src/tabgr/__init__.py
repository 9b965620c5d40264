"""Table reasoning over attributed table graphs with question-guided PageRank."""

from tabgr.atg import AtgGraph, Triple, build_atg, render_triple
from tabgr.pipeline import PipelineConfig, answer_question
from tabgr.qgppr import PprConfig, idf, rank, run_qgppr
from tabgr.table import Table, parse_table

__all__ = [
    "AtgGraph", "PipelineConfig", "PprConfig", "Table", "Triple", "answer_question",
    "build_atg", "idf", "parse_table", "rank", "render_triple", "run_qgppr",
]
__version__ = "0.1.0"
