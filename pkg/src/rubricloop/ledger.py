"""Thread-safe token and cost accounting for one optimization run."""

from __future__ import annotations

from threading import Lock
from typing import Dict, Optional

from .models import CallTag, RoundUsage, RunLedger

DEFAULT_PRICE_IN = 0.15
DEFAULT_PRICE_OUT = 0.60


class UsageLedger:
    """Accumulates per-tag call counts, tokens and cost, split by round.

    Prices are USD per one million tokens. Cost is derived from the token
    totals on every snapshot so it equals ``tokens × price`` exactly.
    """

    def __init__(
        self,
        price_in_per_million: float = DEFAULT_PRICE_IN,
        price_out_per_million: float = DEFAULT_PRICE_OUT,
    ) -> None:
        self.price_in = price_in_per_million / 1_000_000
        self.price_out = price_out_per_million / 1_000_000
        self._lock = Lock()
        self._round = 0
        self._total = RoundUsage()
        self._rounds: Dict[int, RoundUsage] = {}

    def begin_round(self, round_index: int) -> None:
        with self._lock:
            self._round = round_index

    @property
    def current_round(self) -> int:
        return self._round

    def record(
        self,
        tag: CallTag,
        input_tokens: int,
        output_tokens: int,
        attempt: int = 0,
        round_index: Optional[int] = None,
    ) -> None:
        with self._lock:
            key = self._round if round_index is None else round_index
            bucket = self._rounds.setdefault(key, RoundUsage())
            for usage in (self._total, bucket):
                usage.calls[tag.value] = usage.calls.get(tag.value, 0) + 1
                usage.input_tokens += input_tokens
                usage.output_tokens += output_tokens
                if attempt > 0:
                    usage.retries += 1

    def restore(self, round_index: int, usage: RoundUsage) -> None:
        """Book a round recorded by an earlier process (resumed runs)."""
        with self._lock:
            self._rounds[round_index] = usage.model_copy(deep=True)
            for tag, count in usage.calls.items():
                self._total.calls[tag] = self._total.calls.get(tag, 0) + count
            self._total.retries += usage.retries
            self._total.input_tokens += usage.input_tokens
            self._total.output_tokens += usage.output_tokens

    def cost(self, input_tokens: int, output_tokens: int) -> float:
        return input_tokens * self.price_in + output_tokens * self.price_out

    def round_usage(self, round_index: int) -> RoundUsage:
        with self._lock:
            return self._rounds.get(round_index, RoundUsage()).model_copy(deep=True)

    def snapshot(self) -> RunLedger:
        """Consistent point-in-time copy."""
        with self._lock:
            total = self._total.model_copy(deep=True)
            return RunLedger(
                calls=total.calls,
                retries=total.retries,
                input_tokens=total.input_tokens,
                output_tokens=total.output_tokens,
                cost_usd=self.cost(total.input_tokens, total.output_tokens),
                rounds={k: v.model_copy(deep=True) for k, v in sorted(self._rounds.items())},
            )
