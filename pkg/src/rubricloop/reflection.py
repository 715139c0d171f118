"""Reflector, Refiner and Consolidator: prompt builders, parsers and the agent wrapper."""

from __future__ import annotations

import hashlib
import re
from typing import Callable, Dict, List, Optional, Sequence, TypeVar

from .errors import ParseError
from .gateway import Gateway
from .logging_config import get_logger
from .models import (
    AGGREGATE,
    CONSOLIDATED,
    CallTag,
    ConfusionMatrix,
    EditBudget,
    GradedResponse,
    MetricReport,
    ModeContext,
    ModeDiagnosis,
    PriorityBlock,
    RulePatch,
    mode_label,
    parse_mode_key,
)
from .prompts import (
    CONSOLIDATOR_SYSTEM,
    REFINER_SYSTEM,
    REFLECTOR_SYSTEM,
    budget_fields,
    load_template,
    render_contrastive,
    render_diagnosis_fields,
    render_examples,
    render_mode_list,
    render_priority_skeleton,
    render_rules,
    render_strict,
)

logger = get_logger(__name__)

T = TypeVar("T")

PRIORITY_ONE_MAX_RULES = 3

_BULLET = re.compile(r"^\s*(?:[-*•▪◦·+]|\d+[.)]|\(\d+\)|[❶-❿①-⑩➀-➉➊-➓])\s*")
_SECTION = re.compile(
    r"^[\s#>*_]*(?:\d+[.)]\s*)?"
    r"(?P<label>root\s+causes?|misleading\s+patterns?|why\s+these\s+(?:scores\s+)?are\b[^:\n]*"
    r"|proposed\s+(?:rule\s+)?fix(?:es)?|safety\s+checks?)"
    r"[\s*_]*(?::[\s*_]*(?P<rest>.*)|$)",
    re.IGNORECASE,
)
_SAFETY_TAIL = re.compile(r"^[\s#>*_]*safety(?:\s+checks?)?[\s*_]*(?::|$)", re.IGNORECASE)
_PRIORITY_HEADER = re.compile(r"^[\s#>*_]*priority\s*(\d+)\b", re.IGNORECASE)
_CONFLICT_HEADER = re.compile(
    r"^[\s#>*_]*(?:conflict\s+resolution|tie[-\s]?breakers?)[\s*_]*:?[\s*_]*(?P<rest>.*)$",
    re.IGNORECASE,
)
_HEADER_LIKE = re.compile(r"^[\s#>*_]*(?:rules?|output|\[.*\])[\s\w()→>-]*:?[\s*_]*$", re.IGNORECASE)

DEFAULT_TIE_BREAKER = (
    "If Priority 1 criteria suggest one score but a lower-priority rule suggests another, "
    "assign the Priority 1 score unless the response explicitly satisfies the lower-priority rule."
)


def _strip_bullet(line: str) -> str:
    return _BULLET.sub("", line, count=1).strip()


def _section_kind(label: str) -> str:
    first = label.split()[0].lower()
    return {
        "root": "root_cause",
        "misleading": "patterns",
        "why": "rationale",
        "proposed": "fixes",
        "safety": "safety",
    }[first]


def _stable_id(prefix: str, *parts: str) -> str:
    digest = hashlib.sha256("\x1f".join(parts).encode("utf-8")).hexdigest()[:10]
    return f"{prefix}-{digest}"


def _patch_prefix(mode: str) -> str:
    return mode.lower().replace("->", "to")


# --- Reflector -------------------------------------------------------------------------


def build_reflector_prompt(rules: str, ctx: ModeContext, active_modes: Sequence[str]) -> str:
    """User prompt for one mode: global context, local errors, contrastive examples, task."""
    others = [m for m in active_modes if m != ctx.mode.key]
    return load_template("reflect_v1").render(
        {
            "rules": render_rules(rules),
            "global_summary": ctx.global_summary,
            "error_examples": render_examples(ctx.error_examples, ctx.texts),
            "contrastive": render_contrastive(ctx),
            "mode": ctx.mode.label,
            "other_modes": render_mode_list(others),
            "true_class": ctx.mode.true_class,
            "predicted_class": ctx.mode.predicted_class,
        }
    )


def build_aggregate_reflector_prompt(
    rules: str,
    errors: Sequence[GradedResponse],
    texts: Dict[str, str],
    metrics: MetricReport,
) -> str:
    """User prompt over a mixed error sample with no mode separation."""
    performance = (
        f"Accuracy: {metrics.accuracy:.3f}  Kappa: {metrics.kappa:.3f}  (n={metrics.n})\n"
        f"Misclassified examples shown: {len(errors)}"
    )
    return load_template("aggregate_reflect_v1").render(
        {
            "rules": render_rules(rules),
            "performance": performance,
            "error_examples": render_examples(errors, texts),
        }
    )


def parse_diagnosis(text: str, mode: str) -> ModeDiagnosis:
    """Read the labeled sections of a Reflector reply, in any order."""
    sections: Dict[str, List[str]] = {}
    current: Optional[str] = None
    for raw in text.splitlines():
        match = _SECTION.match(raw)
        if match:
            current = _section_kind(match.group("label"))
            sections.setdefault(current, [])
            rest = (match.group("rest") or "").strip().strip("*_ ").strip()
            if rest:
                sections[current].append(rest)
            continue
        if current is not None and raw.strip():
            sections[current].append(raw.strip())

    def as_text(kind: str) -> str:
        return " ".join(_strip_bullet(line) for line in sections.get(kind, [])).strip()

    def as_list(kind: str) -> List[str]:
        items = [_strip_bullet(line) for line in sections.get(kind, [])]
        return [item for item in items if item]

    root_cause = as_text("root_cause")
    fixes = as_list("fixes")
    if not root_cause or not fixes:
        missing = "root cause" if not root_cause else "proposed fixes"
        raise ParseError(f"diagnosis for {mode_label(mode)} has no {missing}", raw=text)
    return ModeDiagnosis(
        mode=mode,
        root_cause=root_cause,
        misleading_patterns=as_list("patterns"),
        boundary_rationale=as_text("rationale"),
        proposed_fixes=fixes,
        safety_check=as_text("safety"),
    )


# --- Refiner ---------------------------------------------------------------------------


def build_refiner_prompt(
    rules: str,
    diagnosis: ModeDiagnosis,
    errors: Sequence[GradedResponse],
    texts: Dict[str, str],
    other_modes: Sequence[str],
    budget: EditBudget,
) -> str:
    if diagnosis.mode == AGGREGATE:
        mode_text, target = "all observed errors", "all observed errors"
    else:
        mode_text = mode_label(diagnosis.mode)
        target = f"{mode_text} confusion specifically"
    return load_template("refine_v1").render(
        {
            "rules": render_rules(rules),
            "mode": mode_text,
            "target": target,
            "error_examples": render_examples(errors, texts),
            "other_modes": render_mode_list(other_modes),
            **render_diagnosis_fields(diagnosis),
            **budget_fields(budget),
        }
    )


def parse_rule_patch(text: str, mode: str, budget: EditBudget) -> RulePatch:
    """Enumerated rule sentences of a Refiner reply, capped by the edit budget."""
    lines: List[str] = []
    for raw in text.splitlines():
        if _SAFETY_TAIL.match(raw):
            break
        if _HEADER_LIKE.match(raw):
            continue
        lines.append(raw)

    rules: List[str] = []
    if any(_BULLET.match(line) and _strip_bullet(line) for line in lines):
        for line in lines:
            if not line.strip():
                continue
            if _BULLET.match(line):
                content = _strip_bullet(line)
                if content:
                    rules.append(content)
            elif rules and not line.rstrip().endswith(":"):
                rules[-1] = f"{rules[-1]} {line.strip()}"
    else:
        rules = [line.strip() for line in lines if line.strip() and not line.rstrip().endswith(":")]

    if not rules:
        raise ParseError(f"no rules found for {mode_label(mode)}", raw=text)
    truncated_from = None
    if len(rules) > budget.upper:
        logger.warning(
            "Patch for %s has %d rules, keeping %d (%s budget)",
            mode_label(mode),
            len(rules),
            budget.upper,
            budget.value,
        )
        truncated_from = len(rules)
        rules = rules[: budget.upper]
    return RulePatch(
        id=_stable_id(_patch_prefix(mode), mode, *rules),
        mode=mode,
        rules=rules,
        priority=1,
        edit_budget=budget,
        truncated_from=truncated_from,
    )


# --- Consolidator ----------------------------------------------------------------------


def priority_skeleton(patches: Sequence[RulePatch], matrix: ConfusionMatrix) -> List[PriorityBlock]:
    """Patches ordered by their mode's count (desc), ties by (i, j) ascending."""

    def count(patch: RulePatch) -> int:
        i, j = parse_mode_key(patch.mode)
        return matrix.counts[i][j]

    ordered = sorted(patches, key=lambda p: (-count(p), *parse_mode_key(p.mode)))
    return [
        PriorityBlock(priority=n, mode=p.mode, count=count(p), rules=list(p.rules))
        for n, p in enumerate(ordered, start=1)
    ]


def build_consolidator_prompt(rules: str, skeleton: Sequence[PriorityBlock], limit: int) -> str:
    return load_template("consolidate_v1").render(
        {
            "rules": render_rules(rules),
            "skeleton": render_priority_skeleton(skeleton),
            "priority_one_limit": limit,
        }
    )


def parse_consolidation(
    text: str, skeleton: Sequence[PriorityBlock], budget: EditBudget, limit: int
) -> RulePatch:
    """Map a Consolidator reply onto the fixed priority skeleton."""
    parsed: Dict[int, List[str]] = {}
    tie_breakers: List[str] = []
    current: Optional[object] = None
    for raw in text.splitlines():
        if not raw.strip():
            continue
        header = _PRIORITY_HEADER.match(raw)
        if header:
            current = int(header.group(1))
            parsed.setdefault(int(header.group(1)), [])
            continue
        conflict = _CONFLICT_HEADER.match(raw)
        if conflict:
            current = "tie"
            rest = conflict.group("rest").strip()
            if rest:
                tie_breakers.append(_strip_bullet(rest))
            continue
        content = _strip_bullet(raw)
        if not content:
            continue
        if current == "tie":
            tie_breakers.append(content)
        elif isinstance(current, int):
            parsed[current].append(content)

    if not parsed.get(1):
        raise ParseError("consolidation reply has no Priority 1 rules", raw=text)

    blocks: List[PriorityBlock] = []
    for block in skeleton:
        cap = limit if block.priority == 1 else 1
        rules = parsed.get(block.priority) or []
        if not rules:
            logger.warning(
                "Consolidation dropped priority %d (%s); keeping its first rule",
                block.priority,
                mode_label(block.mode),
            )
            rules = block.rules[:1]
        blocks.append(block.model_copy(update={"rules": rules[:cap]}))

    if len(blocks) > 1 and not tie_breakers:
        logger.warning("Consolidation reply has no conflict resolution; using the default directive")
        tie_breakers = [DEFAULT_TIE_BREAKER]
    flat = [rule for block in blocks for rule in block.rules]
    return RulePatch(
        id=_stable_id("consolidated", *flat, *tie_breakers),
        mode=CONSOLIDATED,
        rules=flat,
        priority=1,
        tie_breakers=tie_breakers,
        edit_budget=budget,
        blocks=blocks,
    )


# --- Agents ----------------------------------------------------------------------------


class ReflectionAgents:
    """The three optimizer agents behind one gateway.

    Every call is retried once with a stricter format reminder when its reply
    cannot be parsed; a second failure raises :class:`ParseError`.
    """

    def __init__(self, gateway: Gateway, budget: EditBudget = EditBudget.MEDIUM) -> None:
        self.gateway = gateway
        self.budget = budget

    def _ask(
        self,
        tag: CallTag,
        system: str,
        user: str,
        parse: Callable[[str], T],
        hint: str,
    ) -> T:
        reply = self.gateway.complete(self.gateway.agent_request(tag, system, user)).text
        try:
            return parse(reply)
        except ParseError as exc:
            logger.warning("%s reply unparseable (%s), re-prompting once", tag.value, exc)
        strict = render_strict(user, hint)
        reply = self.gateway.complete(self.gateway.agent_request(tag, system, strict, attempt=1)).text
        return parse(reply)

    def diagnose(self, rules: str, ctx: ModeContext, active_modes: Sequence[str]) -> ModeDiagnosis:
        return self._ask(
            CallTag.REFLECT,
            REFLECTOR_SYSTEM,
            build_reflector_prompt(rules, ctx, active_modes),
            lambda text: parse_diagnosis(text, ctx.mode.key),
            "A 'Root Cause:' section and a 'Proposed Rule Fix:' list are required.",
        )

    def refine(
        self,
        rules: str,
        diagnosis: ModeDiagnosis,
        ctx: ModeContext,
        other_modes: Sequence[str],
    ) -> RulePatch:
        return self._ask(
            CallTag.REFINE,
            REFINER_SYSTEM,
            build_refiner_prompt(
                rules, diagnosis, ctx.error_examples, ctx.texts, other_modes, self.budget
            ),
            lambda text: parse_rule_patch(text, diagnosis.mode, self.budget),
            "List the new rules under 'Rules:' as a numbered list.",
        )

    def consolidate(
        self, rules: str, patches: Sequence[RulePatch], matrix: ConfusionMatrix
    ) -> Optional[RulePatch]:
        """Merge per-mode patches; None when the reply stays unparseable."""
        if not patches:
            return None
        skeleton = priority_skeleton(patches, matrix)
        lead = next(p for p in patches if p.mode == skeleton[0].mode)
        limit = min(PRIORITY_ONE_MAX_RULES, lead.edit_budget.upper)
        if len(skeleton) == 1:
            block = skeleton[0].model_copy(update={"rules": skeleton[0].rules[:limit]})
            return RulePatch(
                id=_stable_id("consolidated", *block.rules),
                mode=CONSOLIDATED,
                rules=block.rules,
                priority=1,
                edit_budget=lead.edit_budget,
                blocks=[block],
            )
        try:
            return self._ask(
                CallTag.CONSOLIDATE,
                CONSOLIDATOR_SYSTEM,
                build_consolidator_prompt(rules, skeleton, limit),
                lambda text: parse_consolidation(text, skeleton, self.budget, limit),
                "Start each block with 'Priority <n>:' and end with 'Conflict Resolution:'.",
            )
        except ParseError as exc:
            logger.warning("Consolidation skipped this round: %s", exc)
            return None

    def aggregate_diagnose(
        self,
        rules: str,
        errors: Sequence[GradedResponse],
        texts: Dict[str, str],
        metrics: MetricReport,
    ) -> ModeDiagnosis:
        return self._ask(
            CallTag.REFLECT,
            REFLECTOR_SYSTEM,
            build_aggregate_reflector_prompt(rules, errors, texts, metrics),
            lambda text: parse_diagnosis(text, AGGREGATE),
            "A 'Root Cause:' section and a 'Proposed Rule Fix:' list are required.",
        )

    def aggregate_refine(
        self,
        rules: str,
        diagnosis: ModeDiagnosis,
        errors: Sequence[GradedResponse],
        texts: Dict[str, str],
    ) -> RulePatch:
        return self._ask(
            CallTag.REFINE,
            REFINER_SYSTEM,
            build_refiner_prompt(rules, diagnosis, errors, texts, [], self.budget),
            lambda text: parse_rule_patch(text, AGGREGATE, self.budget),
            "List the new rules under 'Rules:' as a numbered list.",
        )
