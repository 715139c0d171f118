from __future__ import annotations

from enum import Enum
from typing import Dict, List, Optional, Tuple

import numpy as np
from pydantic import BaseModel, ConfigDict, Field, field_validator, model_validator

EPSILON = 1e-6

CONSOLIDATED = "CONSOLIDATED"
AGGREGATE = "AGGREGATE"

RULES_OPEN = "<rules>"
RULES_CLOSE = "</rules>"


def mode_key(true_class: int, predicted_class: int) -> str:
    """Stable string tag for the confusion cell (i, j), e.g. ``"0->1"``."""
    return f"{true_class}->{predicted_class}"


def parse_mode_key(key: str) -> Tuple[int, int]:
    left, _, right = key.partition("->")
    return int(left), int(right)


def mode_label(key: Optional[str]) -> str:
    """Human form used in prompts and reports: ``"0 → 1"``."""
    if key is None:
        return "-"
    if "->" not in key:
        return key
    i, j = parse_mode_key(key)
    return f"{i} → {j}"


class CallTag(str, Enum):
    GRADE = "grade"
    REFLECT = "reflect"
    REFINE = "refine"
    CONSOLIDATE = "consolidate"


class ProbabilityMode(str, Enum):
    SELF_REPORT = "self_report"
    ONE_HOT = "one_hot"


class EditBudget(str, Enum):
    """How many new rules a Refiner may write for one mode."""

    SMALL = "small"
    MEDIUM = "medium"
    LARGE = "large"

    @property
    def bounds(self) -> Tuple[int, int]:
        return {"small": (1, 1), "medium": (2, 3), "large": (4, 5)}[self.value]

    @property
    def upper(self) -> int:
        return self.bounds[1]

    def describe(self) -> str:
        low, high = self.bounds
        if low == high:
            return f"{low} new rule" if low == 1 else f"{low} new rules"
        return f"{low}–{high} new rules"


class CandidateKind(str, Enum):
    ROOT = "root"
    PER_MODE = "per_mode"
    CONSOLIDATED = "consolidated"
    AGGREGATE = "aggregate"


class ScoreScale(BaseModel):
    """Ordinal score scale 0..K-1."""

    model_config = ConfigDict(frozen=True)

    num_classes: int = Field(ge=2)

    @property
    def labels(self) -> List[int]:
        return list(range(self.num_classes))

    def contains(self, label: int) -> bool:
        return 0 <= label < self.num_classes


class ClassDistribution(BaseModel):
    """Class probabilities, renormalized on construction."""

    model_config = ConfigDict(frozen=True)

    probs: List[float]

    @field_validator("probs")
    @classmethod
    def normalize(cls, value: List[float]) -> List[float]:
        """Renormalize; entries below ``EPSILON`` are lifted to it at the others' expense."""
        if not value:
            raise ValueError("distribution needs at least one class")
        arr = np.asarray(value, dtype=float)
        if not np.all(np.isfinite(arr)) or np.any(arr < 0):
            raise ValueError("probabilities must be finite and non-negative")
        total = float(arr.sum())
        if total <= 0:
            raise ValueError("probabilities sum to zero")
        arr = arr / total
        low = arr < EPSILON
        if low.any() and not low.all():
            scale = (1.0 - EPSILON * int(low.sum())) / float(arr[~low].sum())
            arr = np.where(low, EPSILON, arr * scale)
        return [float(p) for p in arr]

    @classmethod
    def one_hot(cls, label: int, num_classes: int, eps: float = EPSILON) -> "ClassDistribution":
        """Mass ``eps`` on every other class, the rest on ``label``."""
        return cls(
            probs=[1.0 - eps * (num_classes - 1) if k == label else eps for k in range(num_classes)]
        )

    def argmax(self) -> int:
        # np.argmax returns the first maximal index.
        return int(np.argmax(np.asarray(self.probs)))

    def __len__(self) -> int:
        return len(self.probs)

    def __getitem__(self, index: int) -> float:
        return self.probs[index]


class GradedResponse(BaseModel):
    """One response graded under one rubric."""

    response_id: str
    true_label: Optional[int] = None
    predicted_label: int
    distribution: ClassDistribution
    reasoning: str = ""
    misconfidence: float = Field(default=0.0, ge=0.0)

    @model_validator(mode="after")
    def check_argmax(self) -> "GradedResponse":
        if self.predicted_label != self.distribution.argmax():
            raise ValueError(
                f"{self.response_id}: predicted {self.predicted_label} is not the distribution argmax"
            )
        return self

    @property
    def correct(self) -> bool:
        return self.true_label is not None and self.true_label == self.predicted_label


class GradingFailure(BaseModel):
    response_id: str
    message: str
    raw: Optional[str] = None


class MetricReport(BaseModel):
    model_config = ConfigDict(frozen=True)

    accuracy: float = Field(ge=0.0, le=1.0)
    kappa: float = Field(ge=-1.0, le=1.0)
    n: int = Field(ge=0)
    parse_failures: int = 0


class ConfusionMatrix(BaseModel):
    """K×K counts; rows are true labels, columns predictions."""

    model_config = ConfigDict(frozen=True)

    counts: List[List[int]]
    scale: ScoreScale

    @model_validator(mode="after")
    def check_shape(self) -> "ConfusionMatrix":
        k = self.scale.num_classes
        if len(self.counts) != k or any(len(row) != k for row in self.counts):
            raise ValueError(f"counts must be {k}x{k}")
        if any(c < 0 for row in self.counts for c in row):
            raise ValueError("counts must be non-negative")
        return self

    @classmethod
    def from_rows(cls, rows: List[List[int]]) -> "ConfusionMatrix":
        return cls(counts=rows, scale=ScoreScale(num_classes=len(rows)))

    @classmethod
    def zeros(cls, scale: ScoreScale) -> "ConfusionMatrix":
        k = scale.num_classes
        return cls(counts=[[0] * k for _ in range(k)], scale=scale)

    def to_array(self) -> np.ndarray:
        return np.asarray(self.counts, dtype=np.int64)

    @property
    def total(self) -> int:
        return int(self.to_array().sum())

    @property
    def off_diagonal(self) -> int:
        arr = self.to_array()
        return int(arr.sum() - np.trace(arr))

    def __add__(self, other: "ConfusionMatrix") -> "ConfusionMatrix":
        if other.scale != self.scale:
            raise ValueError("cannot add matrices over different scales")
        summed = self.to_array() + other.to_array()
        return ConfusionMatrix(counts=summed.tolist(), scale=self.scale)


class ErrorMode(BaseModel):
    model_config = ConfigDict(frozen=True)

    true_class: int
    predicted_class: int
    count: int = Field(ge=1)
    share: float

    @model_validator(mode="after")
    def check_off_diagonal(self) -> "ErrorMode":
        if self.true_class == self.predicted_class:
            raise ValueError("an error mode must be off-diagonal")
        return self

    @property
    def key(self) -> str:
        return mode_key(self.true_class, self.predicted_class)

    @property
    def label(self) -> str:
        return mode_label(self.key)


class ModeContext(BaseModel):
    """Everything the Reflector sees about one confusion cell."""

    mode: ErrorMode
    error_examples: List[GradedResponse] = Field(default_factory=list)
    contrastive_i: List[GradedResponse] = Field(default_factory=list)
    contrastive_j: List[GradedResponse] = Field(default_factory=list)
    global_summary: str = ""
    texts: Dict[str, str] = Field(default_factory=dict)

    @model_validator(mode="after")
    def check_examples(self) -> "ModeContext":
        i, j = self.mode.true_class, self.mode.predicted_class
        for g in self.error_examples:
            if (g.true_label, g.predicted_label) != (i, j):
                raise ValueError(f"{g.response_id} is not a {self.mode.label} error")
        for label, group in ((i, self.contrastive_i), (j, self.contrastive_j)):
            for g in group:
                if not g.correct or g.true_label != label:
                    raise ValueError(f"{g.response_id} is not a correct class-{label} example")
        return self


class LabeledResponse(BaseModel):
    response_id: str
    text: str
    label: Optional[int] = None
    split: Optional[str] = None

    @field_validator("split")
    @classmethod
    def known_split(cls, value: Optional[str]) -> Optional[str]:
        if value is None:
            return None
        value = value.strip().lower()
        if value not in {"train", "val", "test"}:
            raise ValueError(f"unknown split '{value}'")
        return value


class Dataset(BaseModel):
    items: List[LabeledResponse]
    scale: ScoreScale
    source: Optional[str] = None
    format: Optional[str] = None

    @model_validator(mode="after")
    def check_items(self) -> "Dataset":
        seen: set[str] = set()
        for item in self.items:
            if item.response_id in seen:
                raise ValueError(f"duplicate response id '{item.response_id}'")
            seen.add(item.response_id)
            if item.label is not None and not self.scale.contains(item.label):
                raise ValueError(f"label {item.label} of '{item.response_id}' is outside the scale")
        return self

    @property
    def labeled(self) -> bool:
        return all(item.label is not None for item in self.items)

    def __len__(self) -> int:
        return len(self.items)


class RubricCandidate(BaseModel):
    """A full grading prompt with one delimited, mutable rules section."""

    id: str
    prompt_text: str
    parent_id: Optional[str] = None
    patch_id: Optional[str] = None
    lineage: List[str] = Field(default_factory=list)
    target_mode: Optional[str] = None
    kind: CandidateKind = CandidateKind.ROOT
    round: int = 0
    cached: Dict[str, MetricReport] = Field(default_factory=dict)

    @field_validator("prompt_text")
    @classmethod
    def single_rules_section(cls, value: str) -> str:
        opens, closes = value.count(RULES_OPEN), value.count(RULES_CLOSE)
        if opens != 1 or closes != 1 or value.index(RULES_OPEN) > value.index(RULES_CLOSE):
            raise ValueError("prompt must contain exactly one <rules>...</rules> section")
        return value

    @classmethod
    def root(cls, text: str, candidate_id: str = "p0") -> "RubricCandidate":
        """Wrap an initial rubric, appending an empty rules section if it has none."""
        if RULES_OPEN not in text:
            text = text.rstrip() + f"\n\n{RULES_OPEN}\n{RULES_CLOSE}\n"
        return cls(id=candidate_id, prompt_text=text)

    @property
    def rules_section(self) -> str:
        start = self.prompt_text.index(RULES_OPEN) + len(RULES_OPEN)
        end = self.prompt_text.index(RULES_CLOSE)
        return self.prompt_text[start:end].strip("\n")

    def with_rules(self, rules: str) -> str:
        """Prompt text with the rules section replaced."""
        head, _, rest = self.prompt_text.partition(RULES_OPEN)
        _, _, tail = rest.partition(RULES_CLOSE)
        body = f"\n{rules.strip()}\n" if rules.strip() else "\n"
        return f"{head}{RULES_OPEN}{body}{RULES_CLOSE}{tail}"


class ModeDiagnosis(BaseModel):
    mode: str
    root_cause: str
    misleading_patterns: List[str] = Field(default_factory=list)
    boundary_rationale: str = ""
    proposed_fixes: List[str]
    safety_check: str = ""

    @model_validator(mode="after")
    def check_required(self) -> "ModeDiagnosis":
        if not self.root_cause.strip():
            raise ValueError("diagnosis has no root cause")
        if not any(fix.strip() for fix in self.proposed_fixes):
            raise ValueError("diagnosis proposes no fixes")
        return self


class PriorityBlock(BaseModel):
    priority: int = Field(ge=1)
    mode: str
    count: int = 0
    rules: List[str]


class RulePatch(BaseModel):
    id: str
    mode: str
    rules: List[str]
    priority: int = Field(default=1, ge=1)
    tie_breakers: List[str] = Field(default_factory=list)
    edit_budget: EditBudget = EditBudget.MEDIUM
    blocks: List[PriorityBlock] = Field(default_factory=list)
    truncated_from: Optional[int] = None

    @property
    def consolidated(self) -> bool:
        return self.mode == CONSOLIDATED


class CandidateScore(BaseModel):
    candidate_id: str
    mean_kappa: float = 0.0
    accuracy: float = 0.0
    chunks: int = 0
    items: int = 0
    ucb: Optional[float] = None
    normalized: float = 0.0


class CandidatePool(BaseModel):
    round: int
    candidates: List[RubricCandidate]
    scores: Dict[str, CandidateScore] = Field(default_factory=dict)

    def get(self, candidate_id: str) -> RubricCandidate:
        for candidate in self.candidates:
            if candidate.id == candidate_id:
                return candidate
        raise KeyError(candidate_id)


class CompletionRequest(BaseModel):
    model_config = ConfigDict(frozen=True)

    system_prompt: str
    user_prompt: str
    temperature: float = Field(default=0.0, ge=0.0)
    max_tokens: int = Field(default=512, ge=1)
    tag: CallTag
    attempt: int = Field(default=0, ge=0)

    @model_validator(mode="after")
    def grading_is_greedy(self) -> "CompletionRequest":
        if self.tag == CallTag.GRADE and self.temperature != 0:
            raise ValueError("grading requests must use temperature 0")
        return self


class CompletionResult(BaseModel):
    text: str
    input_tokens: int = Field(ge=0)
    output_tokens: int = Field(ge=0)
    latency_ms: int = Field(default=0, ge=0)
    provider_id: str


class RoundUsage(BaseModel):
    calls: Dict[str, int] = Field(default_factory=dict)
    retries: int = 0
    input_tokens: int = 0
    output_tokens: int = 0

    @property
    def total_calls(self) -> int:
        return sum(self.calls.values())


class RunLedger(BaseModel):
    calls: Dict[str, int] = Field(default_factory=dict)
    retries: int = 0
    input_tokens: int = 0
    output_tokens: int = 0
    cost_usd: float = 0.0
    rounds: Dict[int, RoundUsage] = Field(default_factory=dict)

    @property
    def total_calls(self) -> int:
        return sum(self.calls.values())


class CandidateReport(BaseModel):
    candidate_id: str
    kind: CandidateKind
    target_mode: Optional[str] = None
    report: MetricReport


class RoundRecord(BaseModel):
    round: int
    minibatch_ids: List[str]
    beam_reports: List[CandidateReport]
    best_candidate_id: str
    matrix: ConfusionMatrix
    modes: List[ErrorMode] = Field(default_factory=list)
    diagnoses: List[ModeDiagnosis] = Field(default_factory=list)
    patches: List[RulePatch] = Field(default_factory=list)
    consolidated: Optional[RulePatch] = None
    pool_scores: List[CandidateScore] = Field(default_factory=list)
    ucb_items: int = 0
    beam: List[RubricCandidate] = Field(default_factory=list)
    anchors: List[GradedResponse] = Field(default_factory=list)
    validation: Optional[MetricReport] = None
    usage: RoundUsage = Field(default_factory=RoundUsage)
    converged: bool = False
    skipped_modes: List[str] = Field(default_factory=list)

    @property
    def anchor_ids(self) -> List[str]:
        return [g.response_id for g in self.anchors]

    @property
    def best_report(self) -> MetricReport:
        for entry in self.beam_reports:
            if entry.candidate_id == self.best_candidate_id:
                return entry.report
        raise KeyError(self.best_candidate_id)

    @property
    def leading_kind(self) -> CandidateKind:
        """Kind of the top candidate of the newly selected beam."""
        return self.beam[0].kind if self.beam else CandidateKind.ROOT


class OptimizationResult(BaseModel):
    best_prompt: RubricCandidate
    rounds: List[RoundRecord] = Field(default_factory=list)
    ledger: RunLedger = Field(default_factory=RunLedger)
    initial_report: Optional[MetricReport] = None
    val_reports: Dict[str, MetricReport] = Field(default_factory=dict)
    test_report: Optional[MetricReport] = None
    stopped_early: bool = False

    @property
    def val_report(self) -> Optional[MetricReport]:
        return self.val_reports.get(self.best_prompt.id)
