"""On-disk layout of one optimization run.

::

    <run_dir>/
      config.yaml              RunConfig snapshot (no credentials)
      rounds/round_01.json     one RoundRecord per round
      prompts/<id>.txt         prompt text of every beam member and the final pick
      graded/round_01.jsonl    per-item grading of the round's best member
      ledger.json              call, token and cost totals
      result.json              final selection, validation and test reports
      test_predictions.jsonl   per-item test grading with reasoning
"""

from __future__ import annotations

import json
from pathlib import Path
from threading import Lock
from typing import List, Optional, Sequence

import yaml
from pydantic import ValidationError

from .config import RunConfig
from .datasets import read_graded_records, write_graded_records
from .errors import RunStoreError
from .logging_config import get_logger
from .models import GradedResponse, OptimizationResult, RoundRecord, RubricCandidate, RunLedger

logger = get_logger(__name__)


class RunStore:
    def __init__(self, root: Path) -> None:
        self.root = Path(root)
        self._lock = Lock()

    @property
    def rounds_dir(self) -> Path:
        return self.root / "rounds"

    @property
    def prompts_dir(self) -> Path:
        return self.root / "prompts"

    @property
    def graded_dir(self) -> Path:
        return self.root / "graded"

    def _write(self, path: Path, text: str) -> None:
        with self._lock:
            path.parent.mkdir(parents=True, exist_ok=True)
            path.write_text(text, encoding="utf-8")

    def init(self, config: RunConfig) -> None:
        self._write(
            self.root / "config.yaml",
            yaml.safe_dump(config.snapshot(), sort_keys=False, allow_unicode=True),
        )

    def save_prompt(self, candidate: RubricCandidate) -> Path:
        path = self.prompts_dir / f"{candidate.id}.txt"
        self._write(path, candidate.prompt_text)
        return path

    def save_round(self, record: RoundRecord, graded: Sequence[GradedResponse] = ()) -> None:
        self._write(self.rounds_dir / f"round_{record.round:02d}.json", record.model_dump_json(indent=2))
        for candidate in record.beam:
            self.save_prompt(candidate)
        if graded:
            with self._lock:
                write_graded_records(self.graded_dir / f"round_{record.round:02d}.jsonl", graded)
        logger.debug("Saved round %d to %s", record.round, self.root)

    def save_ledger(self, ledger: RunLedger) -> None:
        self._write(self.root / "ledger.json", ledger.model_dump_json(indent=2))

    def save_result(
        self, result: OptimizationResult, test_graded: Optional[Sequence[GradedResponse]] = None
    ) -> None:
        self.save_prompt(result.best_prompt)
        self.save_ledger(result.ledger)
        self._write(self.root / "result.json", result.model_dump_json(indent=2, exclude={"rounds"}))
        if test_graded is not None:
            with self._lock:
                write_graded_records(self.root / "test_predictions.jsonl", test_graded)
        logger.info("Run saved to %s", self.root)

    def _require_root(self) -> None:
        if not self.root.is_dir():
            raise RunStoreError(f"Run directory not found: {self.root}")

    def load_config(self) -> RunConfig:
        self._require_root()
        path = self.root / "config.yaml"
        try:
            data = yaml.safe_load(path.read_text(encoding="utf-8")) or {}
            return RunConfig.model_validate(data)
        except (OSError, yaml.YAMLError, ValidationError) as exc:
            raise RunStoreError(f"Unreadable run config {path}: {exc}") from exc

    def load_rounds(self) -> List[RoundRecord]:
        self._require_root()
        records = []
        for path in sorted(self.rounds_dir.glob("round_*.json")):
            try:
                records.append(RoundRecord.model_validate_json(path.read_text(encoding="utf-8")))
            except (OSError, ValidationError) as exc:
                raise RunStoreError(f"Corrupt round record {path}: {exc}") from exc
        expected = list(range(1, len(records) + 1))
        if [r.round for r in records] != expected:
            raise RunStoreError(f"Round records in {self.rounds_dir} are not contiguous from 1")
        return records

    def load_round_graded(self, round_index: int) -> List[GradedResponse]:
        try:
            return read_graded_records(self.graded_dir / f"round_{round_index:02d}.jsonl")
        except (OSError, ValidationError) as exc:
            raise RunStoreError(f"Corrupt grading records for round {round_index}: {exc}") from exc

    def load_result(self) -> OptimizationResult:
        self._require_root()
        path = self.root / "result.json"
        if not path.exists():
            raise RunStoreError(f"No result.json in {self.root}; the run did not finish")
        try:
            data = json.loads(path.read_text(encoding="utf-8"))
            result = OptimizationResult.model_validate(data)
        except (OSError, ValueError) as exc:
            raise RunStoreError(f"Corrupt result file {path}: {exc}") from exc
        return result.model_copy(update={"rounds": self.load_rounds()})

    def load_state(self, upto: int) -> List[RoundRecord]:
        """Records of rounds ``1..upto-1``, the starting point of a resumed run."""
        records = self.load_rounds()
        if upto - 1 > len(records):
            raise RunStoreError(
                f"Cannot resume at round {upto}: only {len(records)} rounds are saved in {self.root}"
            )
        return records[: max(0, upto - 1)]
