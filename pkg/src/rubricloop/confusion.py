from __future__ import annotations

from typing import Dict, Iterable, List, Optional, Sequence

import numpy as np

from .errors import InputError
from .metrics import report
from .models import ConfusionMatrix, ErrorMode, GradedResponse, ModeContext, ScoreScale
from .prompts import render_global_summary


def build_confusion(graded: Iterable[GradedResponse], scale: ScoreScale) -> ConfusionMatrix:
    counts = np.zeros((scale.num_classes, scale.num_classes), dtype=np.int64)
    for g in graded:
        if g.true_label is None or not scale.contains(g.true_label):
            raise InputError(f"Response '{g.response_id}' has no true label within the scale")
        if not scale.contains(g.predicted_label):
            raise InputError(f"Response '{g.response_id}' predicts a label outside the scale")
        counts[g.true_label, g.predicted_label] += 1
    return ConfusionMatrix(counts=counts.tolist(), scale=scale)


def top_k_modes(matrix: ConfusionMatrix, k: int) -> List[ErrorMode]:
    """Off-diagonal cells by count descending, ties by (i, j) ascending."""
    if k < 1:
        raise InputError("k must be at least 1")
    errors = matrix.off_diagonal
    cells = [
        (count, i, j)
        for i, row in enumerate(matrix.counts)
        for j, count in enumerate(row)
        if i != j and count > 0
    ]
    cells.sort(key=lambda cell: (-cell[0], cell[1], cell[2]))
    return [
        ErrorMode(true_class=i, predicted_class=j, count=count, share=count / errors)
        for count, i, j in cells[:k]
    ]


def all_modes(matrix: ConfusionMatrix) -> List[ErrorMode]:
    k = matrix.scale.num_classes
    return top_k_modes(matrix, k * k)


def _by_misconfidence(items: Iterable[GradedResponse]) -> List[GradedResponse]:
    return sorted(items, key=lambda g: (-g.misconfidence, g.response_id))


def extract_error_set(
    graded: Iterable[GradedResponse], mode: ErrorMode, cap: int
) -> List[GradedResponse]:
    matching = [
        g
        for g in graded
        if g.true_label == mode.true_class and g.predicted_label == mode.predicted_class
    ]
    return _by_misconfidence(matching)[:cap]


def contrastive_correct(
    graded: Iterable[GradedResponse], class_label: int, n: int
) -> List[GradedResponse]:
    """Correct predictions of ``class_label`` the grader was least sure about."""
    pool = [g for g in graded if g.correct and g.true_label == class_label]
    return _by_misconfidence(pool)[:n]


def top_misconfident(graded: Iterable[GradedResponse], m: int) -> List[GradedResponse]:
    labeled = [g for g in graded if g.true_label is not None]
    return _by_misconfidence(labeled)[:m]


def build_mode_context(
    graded: Sequence[GradedResponse],
    mode: ErrorMode,
    matrix: ConfusionMatrix,
    texts: Optional[Dict[str, str]] = None,
    error_cap: int = 8,
    contrastive_n: int = 2,
) -> ModeContext:
    errors = extract_error_set(graded, mode, error_cap)
    contrastive_i = contrastive_correct(graded, mode.true_class, contrastive_n)
    contrastive_j = contrastive_correct(graded, mode.predicted_class, contrastive_n)
    wanted = {g.response_id for g in (*errors, *contrastive_i, *contrastive_j)}
    return ModeContext(
        mode=mode,
        error_examples=errors,
        contrastive_i=contrastive_i,
        contrastive_j=contrastive_j,
        global_summary=render_global_summary(matrix, report(matrix), all_modes(matrix), mode.key),
        texts={rid: text for rid, text in (texts or {}).items() if rid in wanted},
    )
