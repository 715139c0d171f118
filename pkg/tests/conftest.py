from __future__ import annotations

from pathlib import Path
from typing import List, Optional

import pytest

from rubricloop.confusion import all_modes
from rubricloop.metrics import report
from rubricloop.models import ClassDistribution, ConfusionMatrix, GradedResponse, ModeContext
from rubricloop.prompts import render_global_summary

DATA = Path(__file__).parent / "data"
AGENT_OUTPUTS = DATA / "agent_outputs"

# Proportional-reasoning batch: 64 responses, 3 levels.
PROPORTIONAL = [[6, 25, 7], [0, 9, 10], [0, 0, 7]]
# Five-level batch before and after four rounds of rule edits.
FIVE_LEVEL_START = [[2, 1, 0, 0, 1], [7, 41, 0, 0, 0], [1, 24, 0, 0, 0], [0, 8, 2, 0, 0], [0, 1, 0, 0, 0]]
FIVE_LEVEL_END = [[2, 1, 0, 0, 1], [3, 40, 5, 0, 0], [0, 4, 21, 0, 0], [0, 0, 9, 1, 0], [0, 0, 1, 0, 0]]


def graded(
    response_id: str,
    true_label: Optional[int],
    predicted: int,
    k: int = 3,
    top: float = 0.9,
    misconfidence: float = 0.0,
    reasoning: str = "",
) -> GradedResponse:
    rest = (1.0 - top) / (k - 1)
    probs = [top if c == predicted else rest for c in range(k)]
    return GradedResponse(
        response_id=response_id,
        true_label=true_label,
        predicted_label=predicted,
        distribution=ClassDistribution(probs=probs),
        misconfidence=misconfidence,
        reasoning=reasoning,
    )


def graded_from_matrix(rows: List[List[int]], prefix: str = "r") -> List[GradedResponse]:
    """One graded response per matrix count, ids in row-major order."""
    out: List[GradedResponse] = []
    n = 0
    k = len(rows)
    for i, row in enumerate(rows):
        for j, count in enumerate(row):
            for _ in range(count):
                out.append(graded(f"{prefix}{n:03d}", i, j, k=k))
                n += 1
    return out


@pytest.fixture
def data_dir() -> Path:
    return DATA


@pytest.fixture
def agent_outputs_dir() -> Path:
    return AGENT_OUTPUTS


@pytest.fixture
def proportional() -> ConfusionMatrix:
    return ConfusionMatrix.from_rows(PROPORTIONAL)


@pytest.fixture
def five_level_start() -> ConfusionMatrix:
    return ConfusionMatrix.from_rows(FIVE_LEVEL_START)


@pytest.fixture
def five_level_end() -> ConfusionMatrix:
    return ConfusionMatrix.from_rows(FIVE_LEVEL_END)


ERROR_TEXT = (
    "They understand it partially because I understand what they are doing but I would show "
    "them that setting it up as a proportion makes more sense."
)
LIMITED_TEXT = "Student A has a limited understanding because he based his answer on the dollar amount."
UNIT_RATE_TEXT = "The student looked at price versus amount to find the unit rate."


def proportional_context() -> ModeContext:
    """The 0 → 1 mode of the proportional batch with one error and two contrastive examples."""
    matrix = ConfusionMatrix.from_rows(PROPORTIONAL)
    modes = all_modes(matrix)
    return ModeContext(
        mode=modes[0],
        error_examples=[
            graded("e1", 0, 1, misconfidence=0.4, reasoning="Acknowledges partial understanding.")
        ],
        contrastive_i=[graded("c0", 0, 0)],
        contrastive_j=[graded("c1", 1, 1)],
        global_summary=render_global_summary(matrix, report(matrix), modes, modes[0].key),
        texts={"e1": ERROR_TEXT, "c0": LIMITED_TEXT, "c1": UNIT_RATE_TEXT},
    )
