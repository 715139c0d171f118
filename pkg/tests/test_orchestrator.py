import json

import pytest

from rubricloop.config import RunConfig
from rubricloop.errors import InputError, MockScriptError, RunStoreError
from rubricloop.gateway import Gateway
from rubricloop.grader import Grader, GraderConfig
from rubricloop.ledger import UsageLedger
from rubricloop.models import AGGREGATE, CallTag, CandidateKind, MetricReport, RubricCandidate
from rubricloop.orchestrator import OUTSIDE_LOOP, Optimizer, infer, run_optimization, select_final
from rubricloop.run_store import RunStore
from rubricloop.testbed import ScenarioProvider, load_scenario


def _falcon_run(tmp_path=None, resume_at=None, **overrides):
    scenario, gateway = load_scenario("falcon")
    config = RunConfig(seed=7, **overrides)
    store = RunStore(tmp_path) if tmp_path is not None else None
    result = run_optimization(
        config,
        scenario.dataset(),
        gateway,
        store=store,
        resume_at=resume_at,
        initial_rubric=scenario.rubric,
    )
    return result, gateway


def _metrics(kappa: float, accuracy: float) -> MetricReport:
    return MetricReport(kappa=kappa, accuracy=accuracy, n=10)


def test_select_final_ranking():
    beam = [
        RubricCandidate(id="b", prompt_text="a longer prompt"),
        RubricCandidate(id="a", prompt_text="a longer prompt"),
        RubricCandidate(id="c", prompt_text="short"),
        RubricCandidate(id="d", prompt_text="x"),
    ]
    known = {
        "a": _metrics(0.6, 0.7),
        "b": _metrics(0.6, 0.7),
        "c": _metrics(0.6, 0.7),
        "d": _metrics(0.6, 0.6),
    }
    best, reports = select_final(None, beam, [], known)
    assert best.id == "c"
    assert reports == known

    known["a"] = _metrics(0.61, 0.5)
    best, _ = select_final(None, beam, [], known)
    assert best.id == "a"


def test_select_final_tie_on_everything_goes_to_id():
    beam = [RubricCandidate(id="z", prompt_text="same"), RubricCandidate(id="y", prompt_text="same")]
    known = {"z": _metrics(0.5, 0.5), "y": _metrics(0.5, 0.5)}
    assert select_final(None, beam, [], known)[0].id == "y"


def test_select_final_empty_beam():
    with pytest.raises(InputError):
        select_final(None, [], [])


def test_infer_on_held_out_items():
    scenario, gateway = load_scenario("falcon")
    grader = Grader(gateway, GraderConfig(num_classes=5))
    root = RubricCandidate.root(scenario.rubric)
    test = [item for item in scenario.dataset().items if item.split == "test"]
    labeled = infer(grader, root, test)
    assert len(labeled.graded) == 20
    assert labeled.report.accuracy == pytest.approx(0.5)

    unlabeled = infer(grader, root, [item.model_copy(update={"label": None}) for item in test])
    assert unlabeled.report is None
    assert all(g.true_label is None for g in unlabeled.graded)
    assert infer(grader, root, []).graded == []


def test_zero_rounds_returns_initial_rubric():
    scenario, _ = load_scenario("falcon")
    result, gateway = _falcon_run(rounds=0)
    assert result.rounds == []
    assert result.best_prompt.id == "p0"
    assert result.best_prompt.prompt_text == RubricCandidate.root(scenario.rubric).prompt_text
    assert result.initial_report.accuracy == pytest.approx(0.5)
    assert result.val_report == result.initial_report
    assert result.test_report.accuracy == pytest.approx(0.5)
    ledger = gateway.ledger_snapshot()
    # 10 validation items plus 20 test items, nothing else
    assert ledger.calls == {CallTag.GRADE.value: 30}
    assert list(ledger.rounds) == [OUTSIDE_LOOP]


def test_closed_loop_improves_validation_kappa():
    result, _ = _falcon_run(rounds=2)
    assert len(result.rounds) == 2
    assert result.initial_report.accuracy == pytest.approx(0.5)
    assert result.val_report.accuracy >= 0.9
    assert result.val_report.kappa > result.initial_report.kappa + 0.3
    assert result.test_report.accuracy > 0.5
    assert result.best_prompt.id.startswith("r")
    assert result.best_prompt.lineage[0] == "p0"

    first = result.rounds[0]
    assert first.best_candidate_id == "p0"
    assert "2->1" in [m.key for m in first.modes]
    assert first.consolidated is not None
    assert CandidateKind.CONSOLIDATED in {c.kind for c in first.beam}
    assert len(first.beam) == 4


def test_round_call_accounting():
    result, _ = _falcon_run(rounds=2)
    for record in result.rounds:
        expected = (
            len(record.beam_reports) * len(record.minibatch_ids)
            + len(record.diagnoses)
            + len(record.patches)
            + (1 if len(record.patches) >= 2 else 0)
            + record.ucb_items
        )
        assert record.usage.total_calls == expected
        assert record.usage.retries == 0
        assert result.ledger.rounds[record.round] == record.usage
    total = sum(usage.total_calls for usage in result.ledger.rounds.values())
    assert total == result.ledger.total_calls
    assert result.ledger.cost_usd > 0


def test_aggregate_feedback_round():
    result, _ = _falcon_run(rounds=1, baseline_mode=True)
    record = result.rounds[0]
    assert [d.mode for d in record.diagnoses] == [AGGREGATE]
    assert len(record.patches) == 1
    assert record.consolidated is None
    assert {c.kind for c in record.beam} == {CandidateKind.AGGREGATE}
    assert record.usage.calls[CallTag.REFLECT.value] == 1
    assert record.usage.calls[CallTag.REFINE.value] == 1
    assert CallTag.CONSOLIDATE.value not in record.usage.calls


def test_patience_stops_early():
    result, _ = _falcon_run(rounds=6, patience=1)
    assert result.stopped_early
    assert len(result.rounds) < 6


def test_run_is_saved(tmp_path):
    result, _ = _falcon_run(tmp_path, rounds=1)
    for name in ("config.yaml", "ledger.json", "result.json", "test_predictions.jsonl"):
        assert (tmp_path / name).exists(), name
    assert (tmp_path / "rounds" / "round_01.json").exists()
    assert (tmp_path / "graded" / "round_01.jsonl").exists()
    assert (tmp_path / "prompts" / f"{result.best_prompt.id}.txt").read_text(
        encoding="utf-8"
    ) == result.best_prompt.prompt_text

    loaded = RunStore(tmp_path).load_result()
    assert loaded.best_prompt == result.best_prompt
    assert [r.round for r in loaded.rounds] == [1]
    assert len((tmp_path / "test_predictions.jsonl").read_text(encoding="utf-8").splitlines()) == 20


def test_resume_matches_uninterrupted_run(tmp_path):
    straight, _ = _falcon_run(tmp_path / "straight", rounds=2)

    resumed_dir = tmp_path / "resumed"
    _falcon_run(resumed_dir, rounds=1)
    resumed, _ = _falcon_run(resumed_dir, resume_at=2, rounds=2)

    assert resumed.best_prompt.id == straight.best_prompt.id
    assert [r.best_candidate_id for r in resumed.rounds] == [
        r.best_candidate_id for r in straight.rounds
    ]
    assert resumed.rounds[1].minibatch_ids == straight.rounds[1].minibatch_ids
    assert resumed.ledger.calls == straight.ledger.calls


def test_resume_beyond_saved_rounds(tmp_path):
    _falcon_run(tmp_path, rounds=1)
    with pytest.raises(RunStoreError, match="only 1 rounds are saved"):
        _falcon_run(tmp_path, resume_at=3, rounds=3)


def test_failed_round_still_saves_ledger(tmp_path):
    scenario, _ = load_scenario("falcon")
    silent = ScenarioProvider(scenario.model_copy(update={"agents": {}}))
    gateway = Gateway(silent, UsageLedger())
    with pytest.raises(MockScriptError):
        run_optimization(
            RunConfig(rounds=1, seed=7),
            scenario.dataset(),
            gateway,
            store=RunStore(tmp_path),
            initial_rubric=scenario.rubric,
        )
    saved = json.loads((tmp_path / "ledger.json").read_text(encoding="utf-8"))
    assert saved["calls"][CallTag.GRADE.value] == 32
    assert not (tmp_path / "result.json").exists()


def test_labels_required_for_training():
    scenario, gateway = load_scenario("falcon")
    items = [item.model_copy(update={"label": None}) for item in scenario.dataset().items]
    dataset = scenario.dataset().model_copy(update={"items": items})
    with pytest.raises(InputError, match="need labels"):
        run_optimization(RunConfig(rounds=1), dataset, gateway, initial_rubric=scenario.rubric)


def test_full_run_reaches_target_and_repeats_exactly():
    first, _ = _falcon_run()
    assert len(first.rounds) == 6
    assert first.test_report.accuracy >= 0.8
    again, _ = _falcon_run()
    assert again.best_prompt == first.best_prompt
    assert again.test_report == first.test_report
    assert again.ledger == first.ledger


def test_aggregate_feedback_regresses_where_per_mode_does_not():
    aggregate, _ = _falcon_run(rounds=2, baseline_mode=True, track_validation=True)
    val = [r.validation.accuracy for r in aggregate.rounds]
    assert val == pytest.approx([0.6, 0.5])

    per_mode, _ = _falcon_run(rounds=3, track_validation=True)
    val = [r.validation.accuracy for r in per_mode.rounds]
    assert all(later >= earlier for earlier, later in zip(val, val[1:]))
    assert val[-1] >= 0.9


def test_best_beam_validation_kappa_never_drops():
    result, _ = _falcon_run(track_validation=True)
    kappas = [r.validation.kappa for r in result.rounds]
    assert len(kappas) == 6
    assert all(later >= earlier for earlier, later in zip(kappas, kappas[1:]))
    assert kappas[-1] > 0.5


def test_beam_members_are_graded_side_by_side():
    scenario, gateway = load_scenario("falcon")
    optimizer = Optimizer(RunConfig(seed=7), gateway, scenario.scale)
    root = RubricCandidate.root(scenario.rubric)
    credit = RubricCandidate(
        id="credit", prompt_text=root.with_rules("Apply partial-step-credit to unfinished work.")
    )
    partial = [item for kind, item in scenario.items() if kind == "partial"]
    evaluations = optimizer._evaluate_beam([root, credit], partial)
    assert list(evaluations) == ["p0", "credit"]
    assert evaluations["p0"].report.accuracy == 0.0
    assert evaluations["credit"].report.accuracy == 1.0
    assert gateway.ledger_snapshot().calls == {"grade": 40}
