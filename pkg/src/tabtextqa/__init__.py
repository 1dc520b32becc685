"""Question answering over a table plus text: a late-interaction retriever,
an LSTM program generator with a per-step sentence reranker, and a small
program executor, all on a numpy autodiff core."""

from .config import RunConfig
from .data import Example, SynthSpec, load_dataset, save_dataset, synthesize_dataset
from .dslprog import Program, answers_equal, execute, parse_program, program_equal, serialize_program
from .linearize import Table, build_candidate_pool, linearize_row

__all__ = [
    "Example",
    "Program",
    "RunConfig",
    "SynthSpec",
    "Table",
    "answers_equal",
    "build_candidate_pool",
    "execute",
    "linearize_row",
    "load_dataset",
    "parse_program",
    "program_equal",
    "save_dataset",
    "serialize_program",
    "synthesize_dataset",
]
__version__ = "0.1.0"
