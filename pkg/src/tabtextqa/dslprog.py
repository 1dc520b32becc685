"""Arithmetic program DSL: tokens, parser, serializer, executor and equivalences.

Wire format: steps joined by ``", "``, each ``op(arg1, arg2)``; memory is
``#<int>``; table operators take a row header and ``none``; numbers carry
no thousands separators.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Union

from .linearize import Table
from .textenc import is_number, normalize_number, parse_number

MATH_OPERATORS = ("add", "subtract", "multiply", "divide", "exp", "greater")
TABLE_OPERATORS = ("table_sum", "table_average", "table_max", "table_min")
OPERATORS = MATH_OPERATORS + TABLE_OPERATORS
CONSTANTS = {
    "const_1": 1.0,
    "const_2": 2.0,
    "const_100": 100.0,
    "const_1000": 1000.0,
    "const_1000000": 1000000.0,
    "const_m1": -1.0,
}

OPERATOR, CONSTANT, MEMORY, NUMERIC, ROW_HEADER, EOF, NONE = (
    "operator",
    "constant",
    "memory",
    "numeric",
    "row-header",
    "EOF",
    "NONE",
)

Answer = Union[float, str]


@dataclass(frozen=True)
class DslToken:
    kind: str
    text: str
    value: float | None = None
    index: int | None = None

    def __str__(self) -> str:
        return self.text

    @classmethod
    def numeric(cls, surface: str) -> DslToken:
        return cls(NUMERIC, normalize_number(surface), parse_number(surface))

    @classmethod
    def memory(cls, i: int) -> DslToken:
        if i < 0:
            raise ValueError(f"memory index must be non-negative, got {i}")
        return cls(MEMORY, f"#{i}", index=i)

    @classmethod
    def constant(cls, name: str) -> DslToken:
        return cls(CONSTANT, name, CONSTANTS[name])

    @classmethod
    def row_header(cls, header: str) -> DslToken:
        return cls(ROW_HEADER, " ".join(header.split()))

    @classmethod
    def operator(cls, name: str) -> DslToken:
        if name not in OPERATORS:
            raise ValueError(f"unknown operator {name!r}")
        return cls(OPERATOR, name)


NONE_TOKEN = DslToken(NONE, "none")
EOF_TOKEN = DslToken(EOF, "EOF")


@dataclass
class Program:
    steps: list[tuple[str, DslToken, DslToken]] = field(default_factory=list)

    def __len__(self) -> int:
        return len(self.steps)

    def __str__(self) -> str:
        return serialize_program(self)

    def numeric_args(self) -> list[DslToken]:
        return [a for _, a1, a2 in self.steps for a in (a1, a2) if a.kind in (NUMERIC, ROW_HEADER)]

    def tokens(self) -> list[DslToken]:
        """Flat decoder target: op, arg1, arg2 per step, then EOF."""
        out: list[DslToken] = []
        for op, a1, a2 in self.steps:
            out += [DslToken.operator(op), a1, a2]
        return out + [EOF_TOKEN]


class ProgramParseError(ValueError):
    def __init__(self, message: str, position: int):
        super().__init__(f"{message} (at character {position})")
        self.position = position


class ExecutionError(ArithmeticError):
    """Program failed to run; ``code`` is one of the ERROR_CODES."""

    def __init__(self, code: str, message: str):
        super().__init__(f"{code}: {message}")
        self.code = code


ERROR_CODES = (
    "empty_program",
    "division_by_zero",
    "unknown_row",
    "non_numeric_cell",
    "empty_row",
    "greater_not_final",
    "invalid_result",
    "bad_memory",
)


def _split_args(text: str, start: int, offset: int) -> tuple[list[tuple[str, int]], int]:
    """Arguments between the parenthesis at ``start`` and its match; returns them and the index after ')'."""
    depth = 0
    args: list[tuple[str, int]] = []
    arg_start = start + 1
    for i in range(start, len(text)):
        ch = text[i]
        if ch == "(":
            depth += 1
        elif ch == ")":
            depth -= 1
            if depth == 0:
                args.append((text[arg_start:i], offset + arg_start))
                return args, i + 1
        elif ch == "," and depth == 1:
            args.append((text[arg_start:i], offset + arg_start))
            arg_start = i + 1
    raise ProgramParseError("unbalanced parenthesis", offset + start)


def _parse_arg(raw: str, pos: int, step: int) -> DslToken:
    s = " ".join(raw.split())
    low = s.lower()
    if not s:
        raise ProgramParseError("empty argument", pos)
    if low.startswith("#"):
        if not low[1:].isdigit():
            raise ProgramParseError(f"malformed memory token {s!r}", pos)
        idx = int(low[1:])
        if idx >= step:
            raise ProgramParseError(f"step {step} refers forward to #{idx}", pos)
        return DslToken.memory(idx)
    if low == "none":
        return NONE_TOKEN
    if low.startswith("const_"):
        if low not in CONSTANTS:
            raise ProgramParseError(f"unknown constant {s!r}", pos)
        return DslToken.constant(low)
    if is_number(s):
        return DslToken.numeric(s)
    return DslToken.row_header(s)


def parse_program(text: str) -> Program:
    """Parse ``"op(a, b), op(a, b), ..."``; a trailing ``EOF`` is tolerated."""
    prog = Program()
    i, n = 0, len(text)
    while True:
        while i < n and text[i] in " \t\n,":
            i += 1
        if i >= n:
            return prog
        j = i
        while j < n and (text[j].isalnum() or text[j] == "_"):
            j += 1
        name = text[i:j].lower()
        if name == "eof" and not text[j:].strip(" ,"):
            return prog
        if not name:
            raise ProgramParseError(f"expected an operator, found {text[i]!r}", i)
        if name not in OPERATORS:
            raise ProgramParseError(f"unknown operator {name!r}", i)
        while j < n and text[j] == " ":
            j += 1
        if j >= n or text[j] != "(":
            raise ProgramParseError(f"expected '(' after {name}", j)
        args, end = _split_args(text, j, 0)
        if len(args) != 2:
            raise ProgramParseError(f"{name} takes 2 arguments, got {len(args)}", j)
        step = len(prog.steps)
        a1, a2 = (_parse_arg(raw, pos, step) for raw, pos in args)
        if name in TABLE_OPERATORS:
            if a1.kind != ROW_HEADER or a2.kind != NONE:
                raise ProgramParseError(f"{name} needs a row header and none", j)
        else:
            for a, (_, pos) in zip((a1, a2), args):
                if a.kind not in (NUMERIC, CONSTANT, MEMORY):
                    raise ProgramParseError(f"{name} needs numeric arguments, got {a.text!r}", pos)
        prog.steps.append((name, a1, a2))
        i = end
        while i < n and text[i] == " ":
            i += 1
        if i < n and text[i] != ",":
            raise ProgramParseError(f"expected ',' between steps, found {text[i]!r}", i)


def serialize_program(p: Program) -> str:
    return ", ".join(f"{op}({a1.text}, {a2.text})" for op, a1, a2 in p.steps)


def _row_values(table: Table, header: str) -> list[float]:
    try:
        row = table.rows[table.row_index(header)]
    except KeyError:
        raise ExecutionError("unknown_row", f"no table row named {header!r}") from None
    values = []
    for cell in row[1:]:
        if not cell.strip():
            continue
        if not is_number(cell):
            raise ExecutionError("non_numeric_cell", f"cell {cell!r} in row {header!r} is not numeric")
        values.append(parse_number(cell))
    if not values:
        raise ExecutionError("empty_row", f"row {header!r} has no numeric cells")
    return values


def execute(p: Program, table: Table | None = None) -> Answer:
    """Run the steps in order, storing step i's result as ``#i``; returns the last result."""
    if not p.steps:
        raise ExecutionError("empty_program", "nothing to execute")
    for i, (op, _, _) in enumerate(p.steps[:-1]):
        if op == "greater":
            raise ExecutionError("greater_not_final", f"greater at step {i} of {len(p.steps)}")
    table = table if table is not None else Table(columns=[], rows=[])
    memory: list[Answer] = []

    def value(tok: DslToken) -> float:
        if tok.kind == MEMORY:
            if tok.index >= len(memory):
                raise ExecutionError("bad_memory", f"#{tok.index} read before it was computed")
            v = memory[tok.index]
            if isinstance(v, str):
                raise ExecutionError("bad_memory", f"#{tok.index} holds a yes/no answer")
            return v
        if tok.kind in (NUMERIC, CONSTANT):
            return tok.value
        raise ExecutionError("bad_memory", f"{tok.text!r} is not a numeric argument")

    for i, (op, a1, a2) in enumerate(p.steps):
        if op in TABLE_OPERATORS:
            vals = _row_values(table, a1.text)
            if op == "table_sum":
                res = 0.0
                for v in vals:
                    res += v
            elif op == "table_average":
                res = 0.0
                for v in vals:
                    res += v
                res = res / len(vals)
            elif op == "table_max":
                res = max(vals)
            else:
                res = min(vals)
        else:
            x, y = value(a1), value(a2)
            if op == "add":
                res = x + y
            elif op == "subtract":
                res = x - y
            elif op == "multiply":
                res = x * y
            elif op == "divide":
                if y == 0:
                    raise ExecutionError("division_by_zero", f"step {i} divides by zero")
                res = x / y
            elif op == "exp":
                try:
                    res = x**y
                except ZeroDivisionError:
                    raise ExecutionError("division_by_zero", f"step {i} raises zero to a negative power") from None
                except OverflowError:
                    raise ExecutionError("invalid_result", f"step {i} overflows") from None
                if isinstance(res, complex):
                    raise ExecutionError("invalid_result", f"step {i} has a complex result")
            else:
                memory.append("yes" if x > y else "no")
                continue
        if not math.isfinite(res):
            raise ExecutionError("invalid_result", f"step {i} produced {res!r}")
        memory.append(float(res))
    return memory[-1]


def _same_arg(a: DslToken, b: DslToken) -> bool:
    if a.kind != b.kind:
        return False
    if a.kind == NUMERIC:
        return a.value == b.value
    if a.kind == ROW_HEADER:
        return a.text.lower() == b.text.lower()
    return a.text == b.text


def program_equal(pred: Program, gold: Program) -> bool:
    """Step-wise exact match; numbers compare by parsed value, argument order matters."""
    if len(pred.steps) != len(gold.steps):
        return False
    return all(
        po == go and _same_arg(p1, g1) and _same_arg(p2, g2)
        for (po, p1, p2), (go, g1, g2) in zip(pred.steps, gold.steps)
    )


def answers_equal(a: Answer | None, b: Answer | None, abs_tol: float = 1e-5, rel_tol: float = 1e-4) -> bool:
    if a is None or b is None:
        return False
    if isinstance(a, str) or isinstance(b, str):
        return isinstance(a, str) and isinstance(b, str) and a.lower() == b.lower()
    return abs(a - b) <= max(abs_tol, rel_tol * abs(b))


def parse_answer(raw) -> Answer:
    """Gold answers arrive as numbers, numeric strings or yes/no."""
    if isinstance(raw, (int, float)) and not isinstance(raw, bool):
        return float(raw)
    s = str(raw).strip().lower()
    if s in ("yes", "no"):
        return s
    return parse_number(s)
