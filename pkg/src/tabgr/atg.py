"""Attributed table graph: root, row anchors and column-scoped value nodes.

Every table cell becomes one triple ``(row, header, value)`` whose id is its
row-major position, so row and column membership can be enumerated without
search.
"""

from __future__ import annotations

import json
import re
from dataclasses import dataclass
from typing import Iterable, Sequence

from tabgr.errors import IndexOutOfRange
from tabgr.table import Table

ROOT = "root"
ROW = "row"
VALUE = "value"


@dataclass(frozen=True, slots=True)
class Node:
    id: int
    kind: str
    row: int | None = None
    col: int | None = None
    value: str | None = None
    ordinal: int | None = None
    label: str = ""


@dataclass(frozen=True, slots=True)
class Edge:
    source: int
    target: int
    attribute: str | None = None


@dataclass(frozen=True, slots=True)
class Triple:
    id: int
    row: int
    col: int
    header: str
    value: str


@dataclass(frozen=True)
class AtgGraph:
    title: str
    headers: tuple[str, ...]
    n_rows: int
    n_cols: int
    nodes: tuple[Node, ...]
    edges: tuple[Edge, ...]
    triples: tuple[Triple, ...]
    # df[j][value] = number of rows whose column-j cell equals value
    df: tuple[dict[str, int], ...]
    # value_node[j][value] = node id of the column-scoped value node
    value_node: tuple[dict[str, int], ...]

    def doc_freq(self, col: int, value: str) -> int:
        return self.df[col].get(value, 0)

    def triples_of_row(self, i: int) -> list[Triple]:
        if not 0 <= i < self.n_rows:
            raise IndexOutOfRange(f"row {i} out of range [0, {self.n_rows})")
        start = i * self.n_cols
        return list(self.triples[start:start + self.n_cols])

    def triples_of_col(self, j: int) -> list[Triple]:
        if not 0 <= j < self.n_cols:
            raise IndexOutOfRange(f"column {j} out of range [0, {self.n_cols})")
        return list(self.triples[j::self.n_cols])

    def col_index(self, header: str) -> int | None:
        try:
            return self.headers.index(header)
        except ValueError:
            return None


def build_atg(table: Table) -> AtgGraph:
    n_rows, n_cols = table.n_rows, table.n_cols
    headers = table.headers
    nodes: list[Node] = [Node(0, ROOT, label=table.title)]
    edges: list[Edge] = []
    for i in range(n_rows):
        nodes.append(Node(1 + i, ROW, row=i, label=f"row{i + 1}"))
        edges.append(Edge(0, 1 + i))

    value_node: list[dict[str, int]] = [{} for _ in range(n_cols)]
    df: list[dict[str, int]] = [{} for _ in range(n_cols)]
    triples: list[Triple] = []
    tid = 0
    for i, row in enumerate(table.rows):
        anchor = 1 + i
        for j, value in enumerate(row):
            col_nodes = value_node[j]
            nid = col_nodes.get(value)
            if nid is None:
                nid = len(nodes)
                nodes.append(Node(nid, VALUE, col=j, value=value,
                                  ordinal=len(col_nodes), label=value))
                col_nodes[value] = nid
                df[j][value] = 1
            else:
                df[j][value] += 1
            edges.append(Edge(anchor, nid, headers[j]))
            triples.append(Triple(tid, i, j, headers[j], value))
            tid += 1

    return AtgGraph(
        title=table.title,
        headers=tuple(headers),
        n_rows=n_rows,
        n_cols=n_cols,
        nodes=tuple(nodes),
        edges=tuple(edges),
        triples=tuple(triples),
        df=tuple(df),
        value_node=tuple(value_node),
    )


def render_triple(triple: Triple) -> str:
    return f"(row{triple.row + 1}; {triple.header}; {triple.value})"


_TRIPLE_RE = re.compile(r"^\(\s*(.*?)\s*;\s*(.*?)\s*;\s*(.*?)\s*\)$", re.DOTALL)
_ROW_TOKEN_RE = re.compile(r"^row\s*(\d+)$", re.IGNORECASE)


def parse_rendered_triple(text: str) -> tuple[int, str, str] | None:
    """Inverse of :func:`render_triple`: ``(row_index, header, value)``.

    Accepts the reversed orientation ``(value; header; rowK)`` as well. Returns
    None when ``text`` is not in triple surface form. Headers containing
    ``";"`` do not round-trip; values may contain it.
    """
    m = _TRIPLE_RE.match(text.strip())
    if m is None:
        return None
    first, header, last = m.groups()
    rm = _ROW_TOKEN_RE.match(first)
    if rm is not None:
        value = last
    else:
        rm = _ROW_TOKEN_RE.match(last)
        if rm is None:
            return None
        value = first
    row = int(rm.group(1)) - 1
    if row < 0:
        return None
    return row, header, value


def dump_edges(graph: AtgGraph) -> str:
    """One line per edge, ``(source -> target [attribute])``."""
    lines = []
    for e in graph.edges:
        src = _node_name(graph.nodes[e.source])
        dst = _node_name(graph.nodes[e.target])
        attr = f" [{e.attribute}]" if e.attribute is not None else ""
        lines.append(f"({src} → {dst}{attr})")
    return "\n".join(lines)


def _node_name(node: Node) -> str:
    if node.kind == ROOT:
        return f"root:{node.label}"
    if node.kind == ROW:
        return node.label
    return f"c{node.col}#{node.ordinal}:{node.value}"


def triples_to_json(triples: Iterable[Triple]) -> str:
    return json.dumps(
        [{"id": t.id, "row": t.row, "col": t.col, "header": t.header, "value": t.value}
         for t in triples],
        ensure_ascii=False,
    )


def render_triples(triples: Sequence[Triple]) -> str:
    return "\n".join(render_triple(t) for t in triples)
