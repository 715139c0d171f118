from typing import List

import pytest
import yaml
from conftest import AGENT_OUTPUTS, PROPORTIONAL, proportional_context

from rubricloop.errors import ParseError
from rubricloop.gateway import Gateway
from rubricloop.models import (
    AGGREGATE,
    CONSOLIDATED,
    CompletionRequest,
    CompletionResult,
    ConfusionMatrix,
    EditBudget,
    ModeDiagnosis,
    RulePatch,
)
from rubricloop.reflection import (
    DEFAULT_TIE_BREAKER,
    ReflectionAgents,
    parse_consolidation,
    parse_diagnosis,
    parse_rule_patch,
    priority_skeleton,
)

MATRIX = ConfusionMatrix.from_rows(PROPORTIONAL)


class ScriptedReplies:
    """Answers requests in order and remembers them."""

    provider_id = "sequence"

    def __init__(self, replies: List[str]) -> None:
        self.replies = list(replies)
        self.requests: List[CompletionRequest] = []

    def complete(self, request: CompletionRequest) -> CompletionResult:
        self.requests.append(request)
        return CompletionResult(
            text=self.replies.pop(0), input_tokens=10, output_tokens=5, provider_id=self.provider_id
        )


def _patch(mode: str, rules: List[str], budget: EditBudget = EditBudget.MEDIUM) -> RulePatch:
    return RulePatch(id=f"p-{mode}", mode=mode, rules=rules, edit_budget=budget)


# --- diagnoses -------------------------------------------------------------------------


def test_parse_full_reflector_reply(data_dir):
    text = (data_dir / "reflector_reply_proportional.txt").read_text(encoding="utf-8")
    diagnosis = parse_diagnosis(text, "0->1")
    assert diagnosis.root_cause.startswith("The classifier misinterprets")
    assert diagnosis.misleading_patterns == [
        'Positive language ("some understanding", "valid reasoning")',
        "Missing specific evidence from student work",
        "Vague acknowledgments without multiplicative analysis",
    ]
    assert diagnosis.boundary_rationale.startswith("Per rubric: Score 0")
    assert diagnosis.proposed_fixes == [
        "Responses acknowledging partial understanding must include specific examples "
        "demonstrating multiplicative relationships.",
        "Vague acknowledgments without detailed analysis ⇒ Score 0.",
    ]
    assert "Will not increase other error modes." in diagnosis.safety_check


def test_parse_markdown_labels_and_inline_values():
    text = (
        "**Root Cause:** Vague praise is read as analysis.\n"
        "**Misleading Patterns:**\n"
        '- "valid reasoning"\n'
        "**Proposed Rule Fix:**\n"
        "1. Require a quoted calculation.\n"
        "2) Praise alone is Score 0.\n"
        "**Safety Check:** Neutral."
    )
    diagnosis = parse_diagnosis(text, "0->1")
    assert diagnosis.root_cause == "Vague praise is read as analysis."
    assert diagnosis.misleading_patterns == ['"valid reasoning"']
    assert diagnosis.proposed_fixes == ["Require a quoted calculation.", "Praise alone is Score 0."]
    assert diagnosis.safety_check == "Neutral."


def test_parse_numbered_headings_in_any_order():
    text = (
        "## 1. Proposed Rule Fixes\n"
        "(1) Check relevance first.\n"
        "## 2. Root Cause\n"
        "Off-topic answers look fluent.\n"
        "## 3. Safety Check\n"
        "None."
    )
    diagnosis = parse_diagnosis(text, "0->1")
    assert diagnosis.proposed_fixes == ["Check relevance first."]
    assert diagnosis.root_cause == "Off-topic answers look fluent."


def test_aggregate_rationale_heading():
    text = (
        "Root Cause: Scores ignore the steps.\n"
        "Why These Scores Are Wrong: The rubric scores steps.\n"
        "Proposed Rule Fix:\n"
        "- Tie scores to steps."
    )
    diagnosis = parse_diagnosis(text, AGGREGATE)
    assert diagnosis.boundary_rationale == "The rubric scores steps."


@pytest.mark.parametrize(
    "text",
    [
        "Misleading Patterns:\n- tone\nProposed Rule Fix:\n1. Be strict.",
        "Root Cause: something\nSafety Check: fine",
        "I think the grader is confused.",
        "",
    ],
)
def test_diagnosis_without_required_sections_fails(text):
    with pytest.raises(ParseError):
        parse_diagnosis(text, "0->1")


def test_diagnosis_model_requires_fixes():
    with pytest.raises(ValueError):
        ModeDiagnosis(mode="0->1", root_cause="x", proposed_fixes=[])


# --- refiner patches -------------------------------------------------------------------


def test_parse_circled_numerals(agent_outputs_dir):
    text = (agent_outputs_dir / "refine_0to1_circled.txt").read_text(encoding="utf-8")
    patch = parse_rule_patch(text, "0->1", EditBudget.MEDIUM)
    assert len(patch.rules) == 3
    assert patch.rules[2] == "Must explicitly connect to proportional reasoning"
    assert patch.truncated_from is None
    assert patch.id.startswith("0to1-")


def test_rule_that_starts_with_safety_is_kept():
    text = (
        "Rules:\n"
        "* Safety-first: check the tax step.\n"
        "* Keep Score 3 for a missing coupon.\n"
        "Safety Check: fine"
    )
    patch = parse_rule_patch(text, "4->3", EditBudget.MEDIUM)
    assert patch.rules == ["Safety-first: check the tax step.", "Keep Score 3 for a missing coupon."]


def test_budget_truncates_with_record():
    text = "Rules:\n1. First.\n2. Second.\n3. Third.\nSafety: fine"
    patch = parse_rule_patch(text, "0->2", EditBudget.SMALL)
    assert patch.rules == ["First."]
    assert patch.truncated_from == 3


def test_continuation_lines_and_safety_cut():
    text = (
        "Rules:\n"
        "1. Apply partial-step-credit: a response with at least one correct\n"
        "   intermediate step earns Score 2.\n"
        "2. Judge steps first.\n"
        "**Safety:** only verifiable steps move up.\n"
        "3. This line is after the safety note.\n"
    )
    patch = parse_rule_patch(text, "2->1", EditBudget.LARGE)
    assert patch.rules == [
        "Apply partial-step-credit: a response with at least one correct intermediate step earns Score 2.",
        "Judge steps first.",
    ]


def test_unnumbered_rules_fall_back_to_lines():
    text = "Rules:\nRequire a numeric step before step credit.\nDescriptions stay at Score 1.\n"
    patch = parse_rule_patch(text, "1->2", EditBudget.MEDIUM)
    assert patch.rules == [
        "Require a numeric step before step credit.",
        "Descriptions stay at Score 1.",
    ]


def test_patch_without_rules_fails():
    with pytest.raises(ParseError):
        parse_rule_patch("Rules:\nSafety: nothing to add", "0->1", EditBudget.MEDIUM)


def test_patch_ids_are_stable():
    text = "1. Same rule."
    assert parse_rule_patch(text, "0->1", EditBudget.MEDIUM).id == parse_rule_patch(
        text, "0->1", EditBudget.MEDIUM
    ).id
    assert parse_rule_patch(text, "0->1", EditBudget.MEDIUM).id != parse_rule_patch(
        text, "1->2", EditBudget.MEDIUM
    ).id


# --- consolidation ---------------------------------------------------------------------


def test_priority_skeleton_orders_by_count_then_cell():
    patches = [_patch("0->2", ["c"]), _patch("1->2", ["b"]), _patch("0->1", ["a"])]
    skeleton = priority_skeleton(patches, MATRIX)
    assert [(b.priority, b.mode, b.count) for b in skeleton] == [
        (1, "0->1", 25),
        (2, "1->2", 10),
        (3, "0->2", 7),
    ]
    tied = ConfusionMatrix.from_rows([[1, 4, 0], [4, 1, 0], [0, 0, 1]])
    order = [b.mode for b in priority_skeleton([_patch("1->0", ["x"]), _patch("0->1", ["y"])], tied)]
    assert order == ["0->1", "1->0"]


def test_parse_consolidation_reply(data_dir):
    text = (data_dir / "consolidator_reply_proportional.txt").read_text(encoding="utf-8")
    skeleton = priority_skeleton([_patch("0->1", ["a"]), _patch("1->2", ["b"])], MATRIX)
    merged = parse_consolidation(text, skeleton, EditBudget.MEDIUM, limit=3)
    assert merged.mode == CONSOLIDATED
    assert merged.consolidated
    assert [len(b.rules) for b in merged.blocks] == [2, 1]
    assert merged.blocks[1].rules == ["Procedural description only ⇒ Score 1"]
    assert merged.tie_breakers[0].startswith("If Priority 1 criteria suggest Score 0")
    assert len(merged.rules) == 3


def test_consolidation_caps_priority_one_and_fills_gaps():
    skeleton = priority_skeleton([_patch("0->1", ["a"]), _patch("1->2", ["keep me"])], MATRIX)
    text = "Priority 1: guard\n- r1\n- r2\n- r3\n- r4\n"
    merged = parse_consolidation(text, skeleton, EditBudget.MEDIUM, limit=3)
    assert merged.blocks[0].rules == ["r1", "r2", "r3"]
    assert merged.blocks[1].rules == ["keep me"]
    assert merged.tie_breakers == [DEFAULT_TIE_BREAKER]


def test_consolidation_without_priority_one_fails():
    skeleton = priority_skeleton([_patch("0->1", ["a"]), _patch("1->2", ["b"])], MATRIX)
    with pytest.raises(ParseError):
        parse_consolidation("Conflict Resolution:\n- prefer 0", skeleton, EditBudget.MEDIUM, 3)


# --- captured replies ------------------------------------------------------------------

CAPTURED = yaml.safe_load((AGENT_OUTPUTS / "expected.yaml").read_text(encoding="utf-8"))


def _parse_captured(name: str, case: dict):
    text = (AGENT_OUTPUTS / name).read_text(encoding="utf-8")
    if case["agent"] == "reflect":
        return lambda: parse_diagnosis(text, case["mode"])
    if case["agent"] == "refine":
        return lambda: parse_rule_patch(text, case["mode"], EditBudget(case["budget"]))
    patches = [_patch(mode, [f"{mode} first", f"{mode} second"]) for mode in case["modes"]]
    skeleton = priority_skeleton(patches, MATRIX)
    return lambda: parse_consolidation(text, skeleton, EditBudget.MEDIUM, case["limit"])


def test_every_captured_reply_has_an_expectation():
    names = sorted(path.name for path in AGENT_OUTPUTS.glob("*.txt"))
    assert names == sorted(CAPTURED)
    assert len(names) >= 20


@pytest.mark.parametrize("name", sorted(CAPTURED))
def test_captured_reply(name):
    case = CAPTURED[name]
    parse = _parse_captured(name, case)
    if case.get("error"):
        with pytest.raises(ParseError):
            parse()
        return
    parsed = parse()
    if case["agent"] == "reflect":
        assert parsed.root_cause == case["root_cause"]
        assert parsed.misleading_patterns == case["patterns"]
        assert parsed.proposed_fixes == case["fixes"]
        assert parsed.safety_check == case["safety"]
    elif case["agent"] == "refine":
        assert parsed.rules == case["rules"]
        assert parsed.truncated_from == case.get("truncated_from")
    else:
        assert [block.rules for block in parsed.blocks] == case["blocks"]
        expected_ties = case["tie_breakers"]
        assert parsed.tie_breakers == (
            [DEFAULT_TIE_BREAKER] if expected_ties == "default" else expected_ties
        )


# --- agents ----------------------------------------------------------------------------


def test_agents_reprompt_once_with_format_reminder(data_dir):
    good = (data_dir / "reflector_reply_proportional.txt").read_text(encoding="utf-8")
    provider = ScriptedReplies(["I am not sure.", good])
    gateway = Gateway(provider)
    agents = ReflectionAgents(gateway)
    diagnosis = agents.diagnose("", proportional_context(), ["0->1", "1->2"])
    assert diagnosis.mode == "0->1"
    assert [r.attempt for r in provider.requests] == [0, 1]
    assert "[FORMAT REMINDER]" in provider.requests[1].user_prompt
    assert provider.requests[0].temperature == pytest.approx(0.3)
    assert gateway.ledger_snapshot().retries == 1


def test_agents_raise_after_second_failure():
    agents = ReflectionAgents(Gateway(ScriptedReplies(["nope", "still nope"])))
    with pytest.raises(ParseError):
        agents.diagnose("", proportional_context(), ["0->1"])


def test_refine_uses_the_edit_budget():
    provider = ScriptedReplies(["Rules:\n1. a\n2. b\n3. c\nSafety: ok"])
    agents = ReflectionAgents(Gateway(provider), budget=EditBudget.SMALL)
    diagnosis = ModeDiagnosis(mode="0->1", root_cause="x", proposed_fixes=["y"])
    patch = agents.refine("", diagnosis, proportional_context(), ["1->2"])
    assert patch.rules == ["a"]
    assert "Edit budget: small (1 new rule)" in provider.requests[0].user_prompt


def test_single_patch_consolidates_without_a_call():
    provider = ScriptedReplies([])
    agents = ReflectionAgents(Gateway(provider))
    merged = agents.consolidate("", [_patch("0->1", ["a", "b", "c", "d"], EditBudget.LARGE)], MATRIX)
    assert merged is not None
    assert merged.rules == ["a", "b", "c"]
    assert provider.requests == []


def test_unparseable_consolidation_is_skipped(data_dir):
    provider = ScriptedReplies(["no structure", "still none"])
    agents = ReflectionAgents(Gateway(provider))
    patches = [_patch("0->1", ["a"]), _patch("1->2", ["b"])]
    assert agents.consolidate("", patches, MATRIX) is None
    assert agents.consolidate("", [], MATRIX) is None


def test_consolidation_prompt_lists_the_skeleton(data_dir):
    provider = ScriptedReplies(
        [(data_dir / "consolidator_reply_proportional.txt").read_text(encoding="utf-8")]
    )
    agents = ReflectionAgents(Gateway(provider))
    merged = agents.consolidate("", [_patch("1->2", ["b"]), _patch("0->1", ["a"])], MATRIX)
    assert merged is not None
    prompt = provider.requests[0].user_prompt
    assert prompt.index("Priority 1 | mode 0 → 1 | 25 errors") < prompt.index(
        "Priority 2 | mode 1 → 2 | 10 errors"
    )
    assert "at most 3 detailed rules" in prompt
