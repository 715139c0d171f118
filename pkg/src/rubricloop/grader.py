from __future__ import annotations

import re
from concurrent.futures import ThreadPoolExecutor
from typing import List, Optional, Sequence, Tuple, Union

from pydantic import BaseModel, Field, field_validator

from .confusion import build_confusion
from .errors import BatchAbortedError, GradingParseError, InputError, ParseError
from .gateway import Gateway
from .logging_config import get_logger
from .metrics import misconfidence, report
from .models import (
    ClassDistribution,
    ConfusionMatrix,
    GradedResponse,
    GradingFailure,
    LabeledResponse,
    MetricReport,
    ProbabilityMode,
    RubricCandidate,
    ScoreScale,
)
from .prompts import render_grade_prompt, render_reprompt

logger = get_logger(__name__)

# "score" followed by optional separators (":", "=", "-", "**", "[", "is") and an integer.
# A minus sign directly before the digits is a negative score, not a separator.
DEFAULT_SCORE_PATTERN = r"\bscore\b(?:\s+is)?[\s*_:=\-\[\(]*(?<!-)(\d+)"

_CONFIDENCE_LINE = re.compile(r"^[\s*_#>-]*confidence[\s*_]*[:=][\s*_]*(.+)$", re.IGNORECASE)
_REASONING_LABEL = re.compile(r"^[\s*_#>-]*reasoning[\s*_]*[:=]?[\s*_]*", re.IGNORECASE)
_NUMBER = re.compile(r"\d*\.?\d+(?:[eE]-?\d+)?")

# Mixing weight that moves the argmax onto the parsed score.
_REPEAK_WEIGHT = 0.6


class GraderConfig(BaseModel):
    temperature: float = 0.0
    score_pattern: str = DEFAULT_SCORE_PATTERN
    num_classes: int = Field(ge=2)
    probability_mode: ProbabilityMode = ProbabilityMode.SELF_REPORT
    abort_ratio: float = 0.2

    @field_validator("temperature")
    @classmethod
    def greedy_only(cls, value: float) -> float:
        if value != 0:
            raise ValueError("grading always runs at temperature 0")
        return value

    @property
    def scale(self) -> ScoreScale:
        return ScoreScale(num_classes=self.num_classes)


class Evaluation(BaseModel):
    """A rubric candidate graded over one batch."""

    graded: List[GradedResponse]
    failures: List[GradingFailure] = Field(default_factory=list)
    matrix: ConfusionMatrix
    report: MetricReport


def parse_score(
    text: str, num_classes: int, pattern: str = DEFAULT_SCORE_PATTERN
) -> Tuple[int, str]:
    """Return ``(score, reasoning)`` from a grading reply; the last score mention wins."""
    matches = list(re.finditer(pattern, text, re.IGNORECASE))
    if not matches:
        raise ParseError("no score found in grading reply", raw=text)
    last = matches[-1]
    score = int(last.group(1))
    if score >= num_classes:
        raise ParseError(f"score {score} outside 0..{num_classes - 1}", raw=text)

    line_start = text.rfind("\n", 0, last.start()) + 1
    line_end = text.find("\n", last.end())
    remaining = text[:line_start] + (text[line_end:] if line_end != -1 else "")
    lines = [line for line in remaining.splitlines() if not _CONFIDENCE_LINE.match(line)]
    reasoning = _REASONING_LABEL.sub("", "\n".join(lines).strip(), count=1).strip()
    return score, reasoning


def parse_confidence(text: str, num_classes: int) -> Optional[List[float]]:
    """Probabilities from a ``Confidence: p0, p1, ...`` line, or None."""
    for line in reversed(text.splitlines()):
        match = _CONFIDENCE_LINE.match(line)
        if not match:
            continue
        values = [float(v) for v in _NUMBER.findall(match.group(1))]
        if len(values) == num_classes and sum(values) > 0:
            return values
        return None
    return None


def build_distribution(
    score: int,
    confidence: Optional[List[float]],
    num_classes: int,
    mode: ProbabilityMode,
) -> ClassDistribution:
    if mode == ProbabilityMode.ONE_HOT or confidence is None:
        return ClassDistribution.one_hot(score, num_classes)
    dist = ClassDistribution(probs=confidence)
    if dist.argmax() == score:
        return dist
    peaked = [
        (1 - _REPEAK_WEIGHT) * p + (_REPEAK_WEIGHT if k == score else 0.0)
        for k, p in enumerate(dist.probs)
    ]
    return ClassDistribution(probs=peaked)


class Grader:
    """Grades responses under a rubric candidate through the gateway."""

    def __init__(self, gateway: Gateway, config: GraderConfig) -> None:
        self.gateway = gateway
        self.config = config

    def grade(
        self,
        rubric: RubricCandidate,
        response_id: str,
        text: str,
        true_label: Optional[int] = None,
    ) -> GradedResponse:
        if not text.strip():
            raise InputError(f"Response '{response_id}' is empty")
        k = self.config.num_classes
        system = rubric.prompt_text
        first = self.gateway.complete(
            self.gateway.grade_request(
                system, render_grade_prompt(text, k, self.config.probability_mode)
            )
        ).text
        try:
            score, reasoning = parse_score(first, k, self.config.score_pattern)
            confidence = parse_confidence(first, k)
        except ParseError:
            logger.warning("Unparseable grade for %s, re-prompting once", response_id)
            retry = self.gateway.complete(
                self.gateway.grade_request(system, render_reprompt(text, first, k), attempt=1)
            ).text
            try:
                score, _ = parse_score(retry, k, self.config.score_pattern)
            except ParseError as exc:
                raise GradingParseError(
                    f"Response '{response_id}': no usable score after re-prompt", raw=retry
                ) from exc
            reasoning = first.strip()
            confidence = parse_confidence(first, k) or parse_confidence(retry, k)

        dist = build_distribution(score, confidence, k, self.config.probability_mode)
        return GradedResponse(
            response_id=response_id,
            true_label=true_label,
            predicted_label=score,
            distribution=dist,
            reasoning=reasoning,
            misconfidence=misconfidence(dist, score, true_label) if true_label is not None else 0.0,
        )

    def _grade_item(
        self, rubric: RubricCandidate, item: LabeledResponse
    ) -> Union[GradedResponse, GradingFailure]:
        if not item.text.strip():
            return GradingFailure(response_id=item.response_id, message="empty response")
        try:
            return self.grade(rubric, item.response_id, item.text, item.label)
        except GradingParseError as exc:
            return GradingFailure(response_id=item.response_id, message=str(exc), raw=exc.raw)

    def grade_batch(
        self, rubric: RubricCandidate, batch: Sequence[LabeledResponse]
    ) -> Tuple[List[GradedResponse], List[GradingFailure]]:
        """Grade every item concurrently; results sorted by response id."""
        with ThreadPoolExecutor(max_workers=self.gateway.concurrency) as pool:
            outcomes = list(pool.map(lambda item: self._grade_item(rubric, item), batch))
        graded = sorted(
            (o for o in outcomes if isinstance(o, GradedResponse)), key=lambda g: g.response_id
        )
        failures = sorted(
            (o for o in outcomes if isinstance(o, GradingFailure)), key=lambda f: f.response_id
        )
        return graded, failures

    def evaluate_candidate(
        self, rubric: RubricCandidate, batch: Sequence[LabeledResponse]
    ) -> Evaluation:
        if not batch:
            raise InputError("Cannot evaluate a candidate on an empty batch")
        graded, failures = self.grade_batch(rubric, batch)
        if len(failures) > self.config.abort_ratio * len(batch):
            raise BatchAbortedError(len(failures), len(batch))
        if failures:
            logger.warning(
                "%d of %d items of candidate %s failed to parse",
                len(failures),
                len(batch),
                rubric.id,
            )
        matrix = build_confusion(
            (g for g in graded if g.true_label is not None), self.config.scale
        )
        return Evaluation(
            graded=graded,
            failures=failures,
            matrix=matrix,
            report=report(matrix, parse_failures=len(failures)),
        )
