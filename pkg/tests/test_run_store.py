import pytest
import yaml
from conftest import PROPORTIONAL, graded

from rubricloop.config import ProviderSettings, RunConfig
from rubricloop.errors import RunStoreError
from rubricloop.models import (
    CandidateKind,
    CandidateReport,
    ConfusionMatrix,
    MetricReport,
    OptimizationResult,
    RoundRecord,
    RoundUsage,
    RubricCandidate,
    RunLedger,
)
from rubricloop.run_store import RunStore

ROOT = RubricCandidate.root("Grade 0, 1 or 2.")
CHILD = RubricCandidate(
    id="r1-abc",
    prompt_text="Grade 0, 1 or 2.\n\n<rules>\nCheck the ratio.\n</rules>\n",
    parent_id="p0",
    lineage=["p0"],
    target_mode="0->1",
    kind=CandidateKind.PER_MODE,
    round=1,
)


def _record(round_index: int) -> RoundRecord:
    return RoundRecord(
        round=round_index,
        minibatch_ids=["a", "b"],
        beam_reports=[
            CandidateReport(
                candidate_id="p0",
                kind=CandidateKind.ROOT,
                report=MetricReport(accuracy=0.5, kappa=0.1, n=2),
            )
        ],
        best_candidate_id="p0",
        matrix=ConfusionMatrix.from_rows(PROPORTIONAL),
        beam=[CHILD],
        anchors=[graded("a", 0, 1, misconfidence=0.4)],
        usage=RoundUsage(calls={"grade": 4}, input_tokens=40, output_tokens=8),
    )


def test_init_writes_config_without_credentials(tmp_path):
    config = RunConfig(rounds=2, provider=ProviderSettings(api_key="sk-secret"))
    RunStore(tmp_path).init(config)
    text = (tmp_path / "config.yaml").read_text(encoding="utf-8")
    assert "sk-secret" not in text
    assert yaml.safe_load(text)["T"] == 2
    assert RunStore(tmp_path).load_config().rounds == 2


def test_rounds_round_trip(tmp_path):
    store = RunStore(tmp_path)
    store.save_round(_record(1), [graded("a", 0, 1), graded("b", 1, 1)])
    store.save_round(_record(2))
    loaded = store.load_rounds()
    assert [r.round for r in loaded] == [1, 2]
    assert loaded[0].model_dump(exclude={"anchors"}) == _record(1).model_dump(exclude={"anchors"})
    assert loaded[0].anchor_ids == ["a"]
    assert (store.prompts_dir / "r1-abc.txt").read_text(encoding="utf-8") == CHILD.prompt_text
    assert [g.response_id for g in store.load_round_graded(1)] == ["a", "b"]


def test_gap_in_rounds(tmp_path):
    store = RunStore(tmp_path)
    store.save_round(_record(1))
    store.save_round(_record(3))
    with pytest.raises(RunStoreError, match="not contiguous"):
        store.load_rounds()


def test_corrupt_round(tmp_path):
    store = RunStore(tmp_path)
    store.rounds_dir.mkdir(parents=True)
    (store.rounds_dir / "round_01.json").write_text("{not json", encoding="utf-8")
    with pytest.raises(RunStoreError, match="Corrupt round record"):
        store.load_rounds()


def test_missing_run_directory(tmp_path):
    store = RunStore(tmp_path / "missing")
    with pytest.raises(RunStoreError, match="not found"):
        store.load_rounds()
    with pytest.raises(RunStoreError):
        store.load_result()


def test_unfinished_run_has_no_result(tmp_path):
    store = RunStore(tmp_path)
    store.save_round(_record(1))
    with pytest.raises(RunStoreError, match="did not finish"):
        store.load_result()


def test_result_round_trip(tmp_path):
    store = RunStore(tmp_path)
    store.save_round(_record(1))
    ledger = RunLedger(calls={"grade": 4}, input_tokens=40, output_tokens=8, rounds={1: RoundUsage()})
    result = OptimizationResult(
        best_prompt=CHILD,
        rounds=[_record(1)],
        ledger=ledger,
        val_reports={"r1-abc": MetricReport(accuracy=0.8, kappa=0.6, n=10)},
    )
    store.save_result(result, [graded("t1", 2, 2)])
    loaded = store.load_result()
    assert loaded.best_prompt == CHILD
    assert loaded.ledger == ledger
    assert [r.round for r in loaded.rounds] == [1]
    assert loaded.val_report.kappa == 0.6
    assert (tmp_path / "test_predictions.jsonl").exists()
    assert RunLedger.model_validate_json((tmp_path / "ledger.json").read_text(encoding="utf-8")) == ledger


def test_load_state_for_resume(tmp_path):
    store = RunStore(tmp_path)
    for t in (1, 2, 3):
        store.save_round(_record(t))
    assert [r.round for r in store.load_state(3)] == [1, 2]
    assert store.load_state(1) == []
    assert len(store.load_state(4)) == 3
    with pytest.raises(RunStoreError, match="only 3 rounds"):
        store.load_state(5)


def test_root_prompt_saved(tmp_path):
    path = RunStore(tmp_path).save_prompt(ROOT)
    assert path.name == "p0.txt"
    assert "<rules>" in path.read_text(encoding="utf-8")
