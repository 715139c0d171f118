"""Deterministic grading environments for closed-loop runs without a live model.

A scenario is a YAML asset under ``rubricloop/scenarios/``::

    name: falcon
    num_classes: 5
    rubric: |            # initial grading prompt
      ...
    rule_keys: [partial-step-credit, ...]
    split_cycle: [train, train, ..., val, test, test]
    confidence: {correct: 0.9, boundary: 0.6, wrong_predicted: 0.45, wrong_true: 0.35}
    kinds:
      partial:
        label: 2
        count: 20
        default: 1                       # prediction when no clause matches
        rules:                           # first matching clause wins
          - {when_all: [partial-step-credit], when_none: [strict-sequence-only], predict: 2}
        texts: [...]
    agents:
      reflect: {"2->1": [{reply: ...}], AGGREGATE: [...], default: [...]}
      refine:  {...}

Grading replies follow the behavior table of the item's kind given which
rule keys appear in the candidate's rules section. Reflector and Refiner
replies are looked up by the mode named in the prompt and filtered by the
keys present in the current rules. Consolidator replies are assembled from
the priority skeleton in the prompt.
"""

from __future__ import annotations

import re
from functools import lru_cache
from importlib import resources
from typing import Dict, List, Optional, Sequence, Tuple

import yaml
from pydantic import BaseModel, Field, ValidationError, model_validator

from .config import ProviderSettings
from .errors import InputError, MockScriptError
from .gateway import Gateway, estimate_tokens, fingerprint
from .ledger import UsageLedger
from .logging_config import get_logger
from .models import (
    AGGREGATE,
    RULES_CLOSE,
    RULES_OPEN,
    CallTag,
    ClassDistribution,
    CompletionRequest,
    CompletionResult,
    Dataset,
    LabeledResponse,
    ScoreScale,
    mode_key,
)

logger = get_logger(__name__)

_RESPONSE_BLOCK = re.compile(r"<response>\n(.*?)\n</response>", re.DOTALL)
_RULES_BLOCK = re.compile(re.escape(RULES_OPEN) + r"(.*?)" + re.escape(RULES_CLOSE), re.DOTALL)
_REFLECT_MODE = re.compile(r"Analyze WHY the (\d+) → (\d+) confusion")
_REFINE_MODE = re.compile(r"Fix must target (\d+) → (\d+) confusion")
_SKELETON_HEADER = re.compile(r"^Priority (\d+) \| mode (\d+ → \d+) \| (\d+) errors$")
_PRIORITY_LIMIT = re.compile(r"keeps at most (\d+) detailed rules")

DEFAULT_TIE_BREAK = (
    "If Priority 1 criteria suggest score X but Priority 2 criteria suggest score Y, "
    "assign score X unless the response explicitly shows the evidence the Priority 2 rule asks for."
)


class Clause(BaseModel):
    when_all: List[str] = Field(default_factory=list)
    when_none: List[str] = Field(default_factory=list)

    def holds(self, present: Sequence[str]) -> bool:
        return all(k in present for k in self.when_all) and not any(
            k in present for k in self.when_none
        )


class BehaviorClause(Clause):
    predict: int


class ScriptedReply(Clause):
    reply: str


class ScenarioKind(BaseModel):
    label: int
    count: int = Field(ge=1)
    default: int
    boundary: bool = False
    reasoning: str = ""
    rules: List[BehaviorClause] = Field(default_factory=list)
    texts: List[str] = Field(min_length=1)

    def predict(self, present: Sequence[str]) -> int:
        for clause in self.rules:
            if clause.holds(present):
                return clause.predict
        return self.default


class ConfidenceProfile(BaseModel):
    correct: float = 0.9
    boundary: float = 0.6
    wrong_predicted: float = 0.45
    wrong_true: float = 0.35


class ScriptedGrade(BaseModel):
    label: int
    reasoning: str
    distribution: ClassDistribution

    @property
    def text(self) -> str:
        probs = ", ".join(f"{p:.4f}" for p in self.distribution.probs)
        return f"Reasoning: {self.reasoning}\nConfidence: {probs}\nScore: {self.label}"


class Scenario(BaseModel):
    name: str
    description: str = ""
    num_classes: int = Field(ge=2)
    rubric: str
    rule_keys: List[str]
    split_cycle: List[str] = Field(min_length=1)
    confidence: ConfidenceProfile = Field(default_factory=ConfidenceProfile)
    kinds: Dict[str, ScenarioKind]
    agents: Dict[str, Dict[str, List[ScriptedReply]]] = Field(default_factory=dict)

    @model_validator(mode="after")
    def check_tables(self) -> "Scenario":
        scale = ScoreScale(num_classes=self.num_classes)
        known = set(self.rule_keys)
        for name, kind in self.kinds.items():
            labels = [kind.label, kind.default, *(c.predict for c in kind.rules)]
            if not all(scale.contains(label) for label in labels):
                raise ValueError(f"kind '{name}' uses a label outside 0..{self.num_classes - 1}")
            clauses: List[Clause] = list(kind.rules)
            for clause in clauses:
                unknown = set(clause.when_all + clause.when_none) - known
                if unknown:
                    raise ValueError(f"kind '{name}' refers to unknown keys {sorted(unknown)}")
        for tag in self.agents:
            if tag not in (CallTag.REFLECT.value, CallTag.REFINE.value):
                raise ValueError(f"scripted agent replies are only supported for reflect/refine, not '{tag}'")
        return self

    @property
    def scale(self) -> ScoreScale:
        return ScoreScale(num_classes=self.num_classes)

    def items(self) -> List[Tuple[str, LabeledResponse]]:
        """``(kind, item)`` pairs; texts are unique across the scenario."""
        out: List[Tuple[str, LabeledResponse]] = []
        serial = 100
        for name, kind in self.kinds.items():
            for n in range(kind.count):
                serial += 1
                phrase = kind.texts[n % len(kind.texts)]
                out.append(
                    (
                        name,
                        LabeledResponse(
                            response_id=f"{name}-{n + 1:02d}",
                            text=f"{phrase} Final answer: {serial}.",
                            label=kind.label,
                            split=self.split_cycle[n % len(self.split_cycle)],
                        ),
                    )
                )
        return out

    def dataset(self) -> Dataset:
        return Dataset(
            items=[item for _, item in self.items()],
            scale=self.scale,
            source=f"scenario:{self.name}",
            format="scenario",
        )

    def present_keys(self, rules_text: str) -> List[str]:
        lowered = rules_text.lower()
        return [key for key in self.rule_keys if key.lower() in lowered]


def behavior_grade(scenario: Scenario, rules_text: str, item: LabeledResponse) -> ScriptedGrade:
    """The pseudo-grader's verdict on ``item`` under the given rules section."""
    kinds = {i.response_id: k for k, i in scenario.items()}
    if item.response_id not in kinds:
        raise InputError(f"'{item.response_id}' is not an item of scenario '{scenario.name}'")
    return _grade_kind(scenario, kinds[item.response_id], item.label, rules_text)


def _grade_kind(
    scenario: Scenario, kind_name: str, true_label: Optional[int], rules_text: str
) -> ScriptedGrade:
    kind = scenario.kinds[kind_name]
    present = scenario.present_keys(rules_text)
    label = kind.predict(present)
    k = scenario.num_classes
    conf = scenario.confidence
    if label == true_label or true_label is None:
        top = conf.boundary if kind.boundary else conf.correct
        rest = (1.0 - top) / (k - 1)
        probs = [top if c == label else rest for c in range(k)]
    else:
        rest = (1.0 - conf.wrong_predicted - conf.wrong_true) / max(1, k - 2)
        probs = [
            conf.wrong_predicted if c == label else conf.wrong_true if c == true_label else rest
            for c in range(k)
        ]
    applied = ", ".join(present) if present else "none"
    reasoning = f"{kind.reasoning or 'Graded against the rubric.'} Rules applied: {applied}."
    return ScriptedGrade(label=label, reasoning=reasoning, distribution=ClassDistribution(probs=probs))


class ScenarioProvider:
    """Provider whose replies are computed from a scenario; no network, no state."""

    def __init__(self, scenario: Scenario) -> None:
        self.scenario = scenario
        self.provider_id = f"scenario:{scenario.name}"
        self._by_text = {item.text: (kind, item) for kind, item in scenario.items()}

    def _rules(self, prompt: str) -> str:
        match = _RULES_BLOCK.search(prompt)
        return match.group(1) if match else ""

    def _grade(self, request: CompletionRequest) -> str:
        match = _RESPONSE_BLOCK.search(request.user_prompt)
        entry = self._by_text.get(match.group(1)) if match else None
        if entry is None:
            raise MockScriptError(request.tag.value, fingerprint(request))
        kind, item = entry
        return _grade_kind(self.scenario, kind, item.label, self._rules(request.system_prompt)).text

    def _agent(self, request: CompletionRequest, mode: Optional[str]) -> str:
        table = self.scenario.agents.get(request.tag.value, {})
        present = self.scenario.present_keys(self._rules(request.user_prompt))
        for key in (mode, "default"):
            for entry in table.get(key or "", []):
                if entry.holds(present):
                    return entry.reply
        raise MockScriptError(request.tag.value, fingerprint(request))

    def _consolidate(self, request: CompletionRequest) -> str:
        limit_match = _PRIORITY_LIMIT.search(request.user_prompt)
        limit = int(limit_match.group(1)) if limit_match else 3
        blocks: List[Tuple[int, str, List[str]]] = []
        for line in request.user_prompt.splitlines():
            header = _SKELETON_HEADER.match(line)
            if header:
                blocks.append((int(header.group(1)), header.group(2), []))
            elif blocks and line.startswith("- "):
                blocks[-1][2].append(line[2:])
            elif blocks and not line.strip():
                break
        if not blocks:
            raise MockScriptError(request.tag.value, fingerprint(request))
        lines: List[str] = []
        for priority, mode, rules in blocks:
            keep = rules[:limit] if priority == 1 else rules[:1]
            title = "dominant confusion" if priority == 1 else "guard"
            lines.append(f"Priority {priority}: {mode} {title}")
            lines.extend(f"- {rule}" for rule in keep)
        if len(blocks) > 1:
            lines.extend(["Conflict Resolution:", f"- {DEFAULT_TIE_BREAK}"])
        return "\n".join(lines)

    def complete(self, request: CompletionRequest) -> CompletionResult:
        if request.tag == CallTag.GRADE:
            text = self._grade(request)
        elif request.tag == CallTag.CONSOLIDATE:
            text = self._consolidate(request)
        else:
            text = self._agent(request, self._mode_of(request))
        return CompletionResult(
            text=text,
            input_tokens=estimate_tokens(request.system_prompt) + estimate_tokens(request.user_prompt),
            output_tokens=estimate_tokens(text),
            latency_ms=0,
            provider_id=self.provider_id,
        )

    @staticmethod
    def _mode_of(request: CompletionRequest) -> Optional[str]:
        prompt = request.user_prompt
        if request.tag == CallTag.REFLECT:
            if "[MIXED ERROR EXAMPLES]" in prompt:
                return AGGREGATE
            match = _REFLECT_MODE.search(prompt)
        else:
            if "Fix must target all observed errors" in prompt:
                return AGGREGATE
            match = _REFINE_MODE.search(prompt)
        return mode_key(int(match.group(1)), int(match.group(2))) if match else None


def available_scenarios() -> List[str]:
    folder = resources.files("rubricloop").joinpath("scenarios")
    return sorted(entry.name[: -len(".yaml")] for entry in folder.iterdir() if entry.name.endswith(".yaml"))


@lru_cache(maxsize=None)
def _read_scenario(name: str) -> Scenario:
    if name not in available_scenarios():
        raise InputError(
            f"Unknown scenario '{name}' (available: {', '.join(available_scenarios())})"
        )
    text = resources.files("rubricloop").joinpath("scenarios", f"{name}.yaml").read_text(encoding="utf-8")
    try:
        return Scenario.model_validate(yaml.safe_load(text))
    except (yaml.YAMLError, ValidationError) as exc:
        raise InputError(f"Scenario '{name}' is malformed: {exc}") from exc


def load_scenario(
    name: str, settings: Optional[ProviderSettings] = None
) -> Tuple[Scenario, Gateway]:
    """The named scenario plus a fresh gateway wired to its provider and ledger."""
    scenario = _read_scenario(name)
    settings = settings or ProviderSettings(kind="scenario")
    gateway = Gateway(
        ScenarioProvider(scenario),
        UsageLedger(settings.price_in_per_million, settings.price_out_per_million),
        concurrency=settings.concurrency,
        agent_temperature=settings.agent_temperature,
        agent_max_tokens=settings.agent_max_tokens,
        grade_max_tokens=settings.grade_max_tokens,
    )
    logger.debug("Loaded scenario %s (%d items)", name, sum(k.count for k in scenario.kinds.values()))
    return scenario, gateway
