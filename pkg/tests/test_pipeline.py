from __future__ import annotations

import pytest

from tabgr.llm import MockClient
from tabgr.pipeline import PipelineConfig, answer_question
from tabgr.table import Table

KIT = Table("kit", ("Year", "Kit Manufacturer", "Shirt Sponsor"), (
    ("1977–1978", "", "National Express"),
    ("1982–1985", "Umbro", ""),
    ("1985–1986", "Umbro", "Whitbread"),
))
Q = "During what time period was there no shirt sponsors?"
REPLY = "(row2; Shirt Sponsor; ) → (row2; Year; 1982–1985)\n</paths>\nok\n</think>\n<answer>1982–1985</answer>"


def test_full_mode_defaults():
    cfg = PipelineConfig.for_mode("full")
    assert (cfg.ppr.alpha, cfg.ppr.w_row) == (0.35, 0.6)
    dec = PipelineConfig.for_mode("decomposed", "fv")
    assert (dec.ppr.alpha, dec.ppr.w_row) == (0.15, 0.7)
    with pytest.raises(ValueError):
        PipelineConfig(mode="other")


def test_decomposed_mode_records_trace():
    llm = MockClient({"Select the column names": "Shirt Sponsor",
                      "Decide if the provided paths are sufficient": ["Finished: False", "Finished: True"],
                      "MINIMAL SUFFICIENT": "SELECTED_RELATIONS: ['Year']",
                      "OUTPUT FORMAT": REPLY})
    out = answer_question(Q, KIT, llm, PipelineConfig.for_mode("decomposed"), "q")
    assert out.result.answer == "1982–1985"
    assert out.trace.sufficiency == "sufficient" and out.trace.llm_calls == 4
    assert sorted(t.header for t in out.evidence) == ["Shirt Sponsor"] * 3 + ["Year"] * 3
    assert out.grounded_fraction == 1.0
    # one column selection serves both anchoring and key sets
    assert llm.ledger.question("q")["calls_by_type"]["column_select"] == 1


def test_decomposed_fallback_to_full_graph():
    llm = MockClient({"Select the column names": "Year",
                      "Decide if the provided paths are sufficient": "Finished: False",
                      "MINIMAL SUFFICIENT": "SELECTED_RELATIONS: []",
                      "OUTPUT FORMAT": REPLY})
    cfg = PipelineConfig.for_mode("decomposed", fallback_full_graph=True)
    out = answer_question(Q, KIT, llm, cfg)
    assert out.trace.fallback_full_graph and len(out.evidence) == 9


def test_forward_fill_option():
    t = Table("t", ("Group", "Item"), (("A", "x"), ("", "y")))
    llm = MockClient({"OUTPUT FORMAT": "</paths></think><answer>A</answer>"}, default="")
    out = answer_question("group of y?", t, llm, PipelineConfig(forward_fill_cols=(0,)))
    assert out.graph.doc_freq(0, "A") == 2
