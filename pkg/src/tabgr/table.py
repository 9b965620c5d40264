"""Canonical table representation and structural transforms.

Cell text is stored verbatim. Matching-time normalization happens in the
scoring and decomposition code, never here.
"""

from __future__ import annotations

import logging
import random
from collections import Counter
from dataclasses import dataclass
from typing import Any, Iterable, Mapping, Sequence

from tabgr.errors import DimensionMismatch, EmptyHeader, MalformedRecord, WidthMismatch

logger = logging.getLogger(__name__)

HEADER_SEPARATOR = "-"


@dataclass(frozen=True)
class Table:
    title: str
    headers: tuple[str, ...]
    rows: tuple[tuple[str, ...], ...]
    source_id: str = ""

    def __post_init__(self) -> None:
        if not self.headers:
            raise EmptyHeader("table has zero columns")
        width = len(self.headers)
        for i, row in enumerate(self.rows):
            if len(row) != width:
                raise WidthMismatch(f"row {i} has {len(row)} cells, expected {width}")

    @property
    def n_rows(self) -> int:
        return len(self.rows)

    @property
    def n_cols(self) -> int:
        return len(self.headers)

    def column(self, j: int) -> list[str]:
        return [row[j] for row in self.rows]

    def to_record(self) -> dict[str, Any]:
        return {
            "id": self.source_id,
            "title": self.title,
            "header": list(self.headers),
            "rows": [list(r) for r in self.rows],
        }


@dataclass(frozen=True)
class CellRef:
    row: int
    col: int


@dataclass(frozen=True)
class Permutation:
    """Row and column reorderings: output index ``i`` takes input ``row_map[i]``."""

    row_map: tuple[int, ...]
    col_map: tuple[int, ...]
    seed: int | None = None

    def __post_init__(self) -> None:
        for name, m in (("row_map", self.row_map), ("col_map", self.col_map)):
            if sorted(m) != list(range(len(m))):
                raise ValueError(f"{name} is not a bijection: {m!r}")

    @classmethod
    def identity(cls, n_rows: int, n_cols: int) -> Permutation:
        return cls(tuple(range(n_rows)), tuple(range(n_cols)))

    def inverse(self) -> Permutation:
        return Permutation(_invert(self.row_map), _invert(self.col_map), self.seed)

    def map_cell(self, cell: CellRef) -> CellRef:
        """Position of input ``cell`` after the permutation is applied."""
        return CellRef(self.row_map.index(cell.row), self.col_map.index(cell.col))


def _invert(m: Sequence[int]) -> tuple[int, ...]:
    inv = [0] * len(m)
    for out_idx, in_idx in enumerate(m):
        inv[in_idx] = out_idx
    return tuple(inv)


def _cell_text(value: Any) -> str:
    if value is None:
        return ""
    if isinstance(value, str):
        return value
    return str(value)


def dedupe_headers(headers: Iterable[str]) -> list[str]:
    """Rename repeated headers ``h`` to ``h_2``, ``h_3``, ... by occurrence.

    Blank headers become ``Column{j+1}`` so every triple keys on a real name.
    """
    cleaned = []
    for j, h in enumerate(headers):
        h = h.strip()
        cleaned.append(h if h else f"Column{j + 1}")
    taken = set(cleaned)
    seen: Counter[str] = Counter()
    out = []
    for h in cleaned:
        seen[h] += 1
        if seen[h] == 1:
            out.append(h)
            continue
        k = seen[h]
        candidate = f"{h}_{k}"
        while candidate in taken:
            k += 1
            candidate = f"{h}_{k}"
        taken.add(candidate)
        out.append(candidate)
    return out


def flatten_headers(levels: Sequence[Sequence[str]]) -> list[str]:
    """Merge multi-level column headers top-down into ``parent-child`` paths.

    Horizontal spans are expected as repeated parent text. Empty components
    are skipped, and a component equal to the one directly above it (a
    vertical span) is not repeated.

    >>> flatten_headers([["Region", "Region"], ["North", "South"]])
    ['Region-North', 'Region-South']
    """
    if not levels:
        raise WidthMismatch("at least one header level is required")
    width = len(levels[0])
    for depth, level in enumerate(levels):
        if len(level) != width:
            raise WidthMismatch(
                f"header level {depth} has width {len(level)}, expected {width}"
            )
    out = []
    for j in range(width):
        parts: list[str] = []
        for level in levels:
            text = _cell_text(level[j]).strip()
            if text and (not parts or parts[-1] != text):
                parts.append(text)
        out.append(HEADER_SEPARATOR.join(parts))
    return out


def parse_table(raw: Mapping[str, Any]) -> Table:
    """Build a :class:`Table` from a structured record.

    Expected fields: ``header`` (list of strings, or list of header levels),
    ``rows`` (list of string lists), optional ``title`` and ``id``.
    """
    if not isinstance(raw, Mapping):
        raise MalformedRecord(f"table record must be an object, got {type(raw).__name__}")
    header = raw.get("header", raw.get("headers"))
    rows = raw.get("rows")
    if header is None or rows is None:
        raise MalformedRecord("table record needs 'header' and 'rows'")
    if not isinstance(header, list) or not isinstance(rows, list):
        raise MalformedRecord("'header' and 'rows' must be arrays")
    if not header:
        raise EmptyHeader("table has zero columns")

    if all(isinstance(h, list) for h in header):
        names = flatten_headers([[_cell_text(x) for x in level] for level in header])
    elif any(isinstance(h, list) for h in header):
        raise MalformedRecord("'header' mixes strings and header levels")
    else:
        names = [_cell_text(h) for h in header]
    if not names:
        raise EmptyHeader("table has zero columns")
    headers = dedupe_headers(names)
    width = len(headers)

    grid = []
    for i, row in enumerate(rows):
        if not isinstance(row, list):
            raise MalformedRecord(f"row {i} is not an array")
        cells = [_cell_text(c) for c in row]
        if len(cells) > width:
            logger.warning(
                "table %s row %d has %d cells for %d headers; extra cells dropped",
                raw.get("id", "?"), i, len(cells), width,
            )
            cells = cells[:width]
        cells.extend([""] * (width - len(cells)))
        grid.append(tuple(cells))

    return Table(
        title=_cell_text(raw.get("title", "")),
        headers=tuple(headers),
        rows=tuple(grid),
        source_id=_cell_text(raw.get("id", "")),
    )


def forward_fill(table: Table, cols: Iterable[int]) -> Table:
    """Fill empty cells in ``cols`` from the nearest non-empty cell above."""
    cols = set(cols)
    if not cols:
        return table
    for j in cols:
        if not 0 <= j < table.n_cols:
            raise IndexError(f"column {j} out of range for {table.n_cols} columns")
    last: dict[int, str] = {}
    grid = []
    for row in table.rows:
        cells = list(row)
        for j in cols:
            if cells[j] == "":
                if j in last:
                    cells[j] = last[j]
            else:
                last[j] = cells[j]
        grid.append(tuple(cells))
    return Table(table.title, table.headers, tuple(grid), table.source_id)


def permute(table: Table, perm: Permutation) -> Table:
    if len(perm.row_map) != table.n_rows or len(perm.col_map) != table.n_cols:
        raise DimensionMismatch(
            f"permutation is {len(perm.row_map)}x{len(perm.col_map)}, "
            f"table is {table.n_rows}x{table.n_cols}"
        )
    headers = tuple(table.headers[j] for j in perm.col_map)
    rows = tuple(
        tuple(table.rows[i][j] for j in perm.col_map) for i in perm.row_map
    )
    return Table(table.title, headers, rows, table.source_id)


def _swap_shuffle(n: int, rng: random.Random) -> tuple[int, ...]:
    # Swap every position with a uniformly chosen position (not Fisher-Yates
    # proper, so the result is not uniform over bijections for n >= 3).
    order = list(range(n))
    for i in range(n):
        k = rng.randrange(n)
        order[i], order[k] = order[k], order[i]
    return tuple(order)


def random_swap_permutation(
    n_rows: int, n_cols: int, seed: int, *, shuffle_rows: bool = True, shuffle_cols: bool = True
) -> Permutation:
    """Seeded permutation in which each row/column swaps with a random one.

    Rows are drawn before columns from one stream, so the row map for a seed
    is the same whether or not columns are shuffled as well.
    """
    if n_rows < 0 or n_cols < 0:
        raise ValueError("dimensions must be non-negative")
    rng = random.Random(seed)
    rows = _swap_shuffle(n_rows, rng) if shuffle_rows else tuple(range(n_rows))
    cols = _swap_shuffle(n_cols, rng) if shuffle_cols else tuple(range(n_cols))
    return Permutation(rows, cols, seed)
