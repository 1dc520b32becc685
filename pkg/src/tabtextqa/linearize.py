"""Table rows rendered as template sentences, and the unified candidate pool."""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import Sequence

NARRATIVE, ROW = "sentence", "row"


@dataclass
class Table:
    """Column names (first row) plus rows whose first cell is the row header."""

    columns: list[str]
    rows: list[list[str]] = field(default_factory=list)

    def __post_init__(self):
        for i, row in enumerate(self.rows):
            if len(row) != len(self.columns):
                raise ValueError(f"table row {i} has {len(row)} cells, expected {len(self.columns)}")

    @classmethod
    def from_grid(cls, grid: Sequence[Sequence[str]]) -> Table:
        if not grid:
            return cls(columns=[], rows=[])
        return cls(columns=[str(c) for c in grid[0]], rows=[[str(c) for c in r] for r in grid[1:]])

    def to_grid(self) -> list[list[str]]:
        return [list(self.columns)] + [list(r) for r in self.rows] if self.columns else []

    def row_index(self, header: str) -> int:
        """Index of the first row whose header matches (case- and space-insensitive)."""
        key = " ".join(header.lower().split())
        for i, row in enumerate(self.rows):
            if " ".join(row[0].lower().split()) == key:
                return i
        raise KeyError(header)


@dataclass
class CellSpan:
    column: str
    row_header: str
    row: int
    col: int
    start: int
    end: int


@dataclass
class CandidateSentence:
    """One member of the retrieval pool.

    ``origin`` is ``(NARRATIVE, sentence index)`` or ``(ROW, row index)``.
    Row sentences carry the character spans of every cell value and of every
    occurrence of the row header.
    """

    id: int
    text: str
    origin: tuple[str, int]
    cells: list[CellSpan] = field(default_factory=list)
    header_spans: list[tuple[int, int]] = field(default_factory=list)
    row_header: str | None = None

    @property
    def is_row(self) -> bool:
        return self.origin[0] == ROW


def linearize_row(table: Table, row: int, cand_id: int = 0) -> CandidateSentence:
    """``"the <row header> of <column> is <value> ;"`` for each non-empty cell, left to right."""
    if not 0 <= row < len(table.rows):
        raise IndexError(f"row {row} out of range for a table of {len(table.rows)} rows")
    cells = table.rows[row]
    header = " ".join(cells[0].split())
    parts: list[str] = []
    spans: list[CellSpan] = []
    header_spans: list[tuple[int, int]] = []
    pos = 0
    for col in range(1, len(cells)):
        value = " ".join(cells[col].split())
        if not value:
            continue
        column = " ".join(table.columns[col].split())
        prefix = f"the {header} of {column} is "
        start = pos + len(prefix)
        header_spans.append((pos + 4, pos + 4 + len(header)))
        spans.append(CellSpan(column, header, row, col, start, start + len(value)))
        clause = f"{prefix}{value} ;"
        parts.append(clause)
        pos += len(clause) + 1
    return CandidateSentence(
        id=cand_id,
        text=" ".join(parts),
        origin=(ROW, row),
        cells=spans,
        header_spans=header_spans,
        row_header=header,
    )


def build_candidate_pool(sentences: Sequence[str], table: Table | None) -> list[CandidateSentence]:
    """Narrative sentences get ids 1..n, row sentences n+1..n+r."""
    pool = [CandidateSentence(id=i + 1, text=s, origin=(NARRATIVE, i)) for i, s in enumerate(sentences)]
    n = len(pool)
    if table is not None:
        pool += [linearize_row(table, r, cand_id=n + r + 1) for r in range(len(table.rows))]
    return pool
