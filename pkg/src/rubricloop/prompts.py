"""Prompt templates and the plain-text renderers that feed them.

Templates live in ``rubricloop/templates`` as versioned ``*_vN.txt`` files
with ``str.format`` fields. Every renderer here is a pure function: the same
input always yields the same bytes, which the fingerprinting mock relies on.
"""

from __future__ import annotations

from functools import lru_cache
from importlib import resources
from string import Formatter
from typing import Dict, Iterable, List, Optional, Sequence

from .models import (
    ConfusionMatrix,
    EditBudget,
    ErrorMode,
    GradedResponse,
    MetricReport,
    ModeContext,
    ModeDiagnosis,
    ProbabilityMode,
    PriorityBlock,
    RulePatch,
    mode_label,
)

NONE_AVAILABLE = "(none available)"
NO_OTHER_MODES = "(no other active modes)"

REFLECTOR_SYSTEM = (
    "You are the Reflector of a rubric optimizer. You diagnose why an LLM grader confuses "
    "two score levels and propose precise rule fixes."
)
REFINER_SYSTEM = (
    "You are the Refiner of a rubric optimizer. You turn a diagnosis into concise, "
    "checkable grading rules."
)
CONSOLIDATOR_SYSTEM = (
    "You are the Consolidator of a rubric optimizer. You merge rule patches into one "
    "priority-ordered ruleset with explicit conflict resolution."
)


class PromptTemplate:
    """Template with ``{field}`` placeholders."""

    def __init__(self, template: str, name: str = "") -> None:
        self.template = template
        self.name = name
        self._formatter = Formatter()

    def render(self, data: Dict[str, object]) -> str:
        return self.template.format(**data)

    def get_fields(self) -> List[str]:
        return [
            field_name
            for _, field_name, _, _ in self._formatter.parse(self.template)
            if field_name is not None
        ]


@lru_cache(maxsize=None)
def load_template(name: str) -> PromptTemplate:
    text = resources.files("rubricloop").joinpath("templates", f"{name}.txt").read_text(
        encoding="utf-8"
    )
    return PromptTemplate(text, name=name)


def render_matrix(matrix: ConfusionMatrix) -> str:
    k = matrix.scale.num_classes
    lines = ["True\\Pred | " + " ".join(str(j) for j in range(k))]
    for i, row in enumerate(matrix.counts):
        lines.append(f"{i} | " + " ".join(str(c) for c in row))
    return "\n".join(lines)


def render_error_distribution(modes: Sequence[ErrorMode], focus: Optional[str] = None) -> str:
    total = sum(m.count for m in modes)
    if not modes:
        return "Error distribution: no errors"
    lines = [f"Error distribution ({total} errors):"]
    for m in modes:
        marker = " <- CURRENT FOCUS" if m.key == focus else ""
        lines.append(f"- {m.label}: {m.count} errors ({m.share * 100:.1f}%){marker}")
    return "\n".join(lines)


def render_global_summary(
    matrix: ConfusionMatrix,
    metrics: MetricReport,
    modes: Sequence[ErrorMode],
    focus: Optional[str] = None,
) -> str:
    return "\n".join(
        [
            f"Accuracy: {metrics.accuracy:.3f}  Kappa: {metrics.kappa:.3f}  (n={metrics.n})",
            "Confusion matrix (rows = true score, columns = predicted score):",
            render_matrix(matrix),
            "",
            render_error_distribution(modes, focus),
        ]
    )


def render_mode_list(modes: Iterable[str]) -> str:
    labels = [f"({mode_label(m)})" for m in modes]
    return ", ".join(labels) if labels else NO_OTHER_MODES


def _quote(text: str) -> str:
    return '"' + " ".join(text.split()) + '"'


def render_examples(examples: Sequence[GradedResponse], texts: Dict[str, str]) -> str:
    if not examples:
        return NONE_AVAILABLE
    blocks = []
    for n, g in enumerate(examples, start=1):
        reasoning = " ".join(g.reasoning.split()) or "(no reasoning given)"
        blocks.append(
            f"Example {n}: {_quote(texts.get(g.response_id, g.response_id))}\n"
            f"True: {g.true_label}  Pred: {g.predicted_label}  Reasoning: {reasoning}"
        )
    return "\n\n".join(blocks)


def render_contrastive(ctx: ModeContext) -> str:
    parts = []
    for label, group in (
        (ctx.mode.true_class, ctx.contrastive_i),
        (ctx.mode.predicted_class, ctx.contrastive_j),
    ):
        parts.append(f"Correctly classified as {label}:")
        if group:
            parts.extend(f"- {_quote(ctx.texts.get(g.response_id, g.response_id))}" for g in group)
        else:
            parts.append(NONE_AVAILABLE)
    return "\n".join(parts)


def _bullets(items: Sequence[str]) -> str:
    return "\n".join(f"- {item}" for item in items) if items else NONE_AVAILABLE


def render_grade_prompt(response: str, num_classes: int, mode: ProbabilityMode) -> str:
    confidence_line = ""
    if mode == ProbabilityMode.SELF_REPORT:
        confidence_line = (
            f"Confidence: <{num_classes} comma-separated probabilities for scores "
            f"0..{num_classes - 1}>\n"
        )
    return load_template("grade_v1").render(
        {"response": response, "confidence_line": confidence_line, "max_score": num_classes - 1}
    )


def render_reprompt(response: str, previous: str, num_classes: int) -> str:
    return load_template("reprompt_v1").render(
        {"response": response, "previous": previous.strip(), "max_score": num_classes - 1}
    )


def render_strict(original: str, hint: str) -> str:
    return load_template("strict_v1").render({"original": original, "hint": hint})


def render_rules(rules: str) -> str:
    return rules.strip() or NONE_AVAILABLE


def render_priority_skeleton(blocks: Sequence[PriorityBlock]) -> str:
    lines: List[str] = []
    for block in blocks:
        lines.append(f"Priority {block.priority} | mode {mode_label(block.mode)} | {block.count} errors")
        lines.extend(f"- {rule}" for rule in block.rules)
    return "\n".join(lines)


def render_patch_rules(patch: RulePatch) -> str:
    """Text a patch contributes to a rules section."""
    if patch.blocks:
        lines: List[str] = []
        for block in patch.blocks:
            suffix = ", check first" if block.priority == 1 else ""
            lines.append(f"Priority {block.priority} ({mode_label(block.mode)}{suffix}):")
            lines.extend(f"- {rule}" for rule in block.rules)
        if patch.tie_breakers:
            lines.append("Conflict resolution:")
            lines.extend(f"- {tb}" for tb in patch.tie_breakers)
        return "\n".join(lines)
    header = "Aggregate fix" if patch.mode == "AGGREGATE" else f"Fix for {mode_label(patch.mode)}"
    return "\n".join([f"{header}:", *(f"- {rule}" for rule in patch.rules)])


def render_diagnosis_fields(diagnosis: ModeDiagnosis) -> Dict[str, str]:
    return {
        "root_cause": " ".join(diagnosis.root_cause.split()),
        "patterns": _bullets(diagnosis.misleading_patterns),
        "rationale": " ".join(diagnosis.boundary_rationale.split()) or NONE_AVAILABLE,
        "fixes": _bullets(diagnosis.proposed_fixes),
        "safety": " ".join(diagnosis.safety_check.split()) or NONE_AVAILABLE,
    }


def budget_fields(budget: EditBudget) -> Dict[str, str]:
    return {"budget": budget.value, "budget_rules": budget.describe()}
