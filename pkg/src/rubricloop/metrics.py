"""Agreement and uncertainty metrics used throughout the optimizer.

Cohen's kappa follows the usual observed/expected agreement split::

    kappa = (p_o - p_e) / (1 - p_e)

where ``p_o`` is the diagonal mass and ``p_e`` the chance agreement implied by
the row and column marginals.
"""

from __future__ import annotations

import math
from typing import List, Sequence

import numpy as np

from .errors import InputError
from .models import EPSILON, ClassDistribution, ConfusionMatrix, MetricReport


def _counts(matrix: ConfusionMatrix) -> np.ndarray:
    data = matrix.to_array()
    if data.sum() <= 0:
        raise InputError("confusion matrix is empty")
    return data


def observed(data: np.ndarray) -> float:
    """Observed agreement p_o."""
    return float(np.trace(data)) / float(data.sum())


def expected(data: np.ndarray) -> float:
    """Chance agreement p_e from the true/predicted marginals."""
    total = float(data.sum())
    rows = data.sum(axis=1) / total
    cols = data.sum(axis=0) / total
    return float(np.dot(rows, cols))


def accuracy(matrix: ConfusionMatrix) -> float:
    return observed(_counts(matrix))


def cohen_kappa(matrix: ConfusionMatrix) -> float:
    data = _counts(matrix)
    p_o = observed(data)
    p_e = expected(data)
    if math.isclose(p_e, 1.0, rel_tol=0.0, abs_tol=1e-15):
        return 0.0
    kappa = (p_o - p_e) / (1.0 - p_e)
    return min(1.0, max(-1.0, kappa))


def report(matrix: ConfusionMatrix, parse_failures: int = 0) -> MetricReport:
    """Accuracy and kappa of a matrix; an empty matrix reports zeros."""
    n = matrix.total
    if n == 0:
        return MetricReport(accuracy=0.0, kappa=0.0, n=0, parse_failures=parse_failures)
    return MetricReport(
        accuracy=accuracy(matrix), kappa=cohen_kappa(matrix), n=n, parse_failures=parse_failures
    )


def _clamp(p: float) -> float:
    return min(1.0 - EPSILON, max(EPSILON, p))


def misconfidence(dist: ClassDistribution, predicted: int, true_label: int) -> float:
    """Uncertainty of one prediction.

    Correct predictions score ``-log p(pred)``; wrong ones score
    ``|log p(pred) / log p(true)|``. Probabilities are clamped to
    ``[1e-6, 1 - 1e-6]`` first, so the result is always finite.
    """
    k = len(dist)
    if not (0 <= predicted < k and 0 <= true_label < k):
        raise InputError(f"class index outside 0..{k - 1}")
    p_hat = _clamp(dist[predicted])
    if predicted == true_label:
        return -math.log(p_hat)
    return abs(math.log(p_hat) / math.log(_clamp(dist[true_label])))


def min_max_normalize(values: Sequence[float]) -> List[float]:
    if len(values) == 0:
        raise InputError("cannot normalize an empty list")
    arr = np.asarray(values, dtype=float)
    low, high = float(arr.min()), float(arr.max())
    if high == low:
        return [0.5] * len(arr)
    return [float(v) for v in (arr - low) / (high - low)]
