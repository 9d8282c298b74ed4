"""Per-run decision parsing and the six multi-run aggregation strategies."""

from __future__ import annotations

import math
from collections import Counter
from dataclasses import dataclass
from enum import Enum
from typing import Any, Sequence

from .inference import RunOutput

TAIL_TOKENS = 10
_STRIP = "\"'`.,;:!?()[]{}<>*_-“”‘’«»"


class Decision(str, Enum):
    INCLUSION = "Inclusion"
    EXCLUSION = "Exclusion"
    UNPARSED = "Unparsed"


class Label(str, Enum):
    INCLUSION = "Inclusion"
    EXCLUSION = "Exclusion"
    ABSTAIN = "Abstain"

    @property
    def binary(self) -> int | None:
        return {Label.INCLUSION: 1, Label.EXCLUSION: 0}.get(self)


class Strategy(str, Enum):
    FIRST = "first"
    SELF_CONSISTENCY = "self_consistency"
    MAX_PROB = "max_prob"
    SHORTEST = "shortest"
    LONGEST = "longest"
    NO_INCONSISTENT = "no_inconsistent"


ALL_STRATEGIES = tuple(Strategy)


class AggregationError(ValueError):
    pass


@dataclass(frozen=True)
class AggregateDecision:
    label: Label
    strategy: Strategy
    chosen_run: int | None = None
    failsafe_applied: bool = False

    def to_dict(self) -> dict[str, Any]:
        return {
            "strategy": self.strategy.value,
            "label": self.label.value,
            "chosen_run": self.chosen_run,
            "failsafe_applied": self.failsafe_applied,
        }

    @classmethod
    def from_dict(cls, d: dict[str, Any]) -> AggregateDecision:
        return cls(Label(d["label"]), Strategy(d["strategy"]), d.get("chosen_run"), bool(d.get("failsafe_applied")))


def parse_decision(run: RunOutput) -> Decision:
    """Find the last standalone YES/NO among the final ten tokens.

    Surrounding punctuation is stripped and matching is case-insensitive.
    Failed runs and tails without a keyword are ``Unparsed``.
    """
    if not run.ok:
        return Decision.UNPARSED
    for text in reversed(run.token_texts[-TAIL_TOKENS:]):
        word = text.strip().strip(_STRIP).casefold()
        if word == "yes":
            return Decision.INCLUSION
        if word == "no":
            return Decision.EXCLUSION
    return Decision.UNPARSED


def avg_logprob(run: RunOutput) -> float:
    """Mean per-token log-probability of a run."""
    if not run.logprobs:
        raise AggregationError(f"run {run.run_index} of {run.record!r} has no tokens")
    return math.fsum(run.logprobs) / len(run.logprobs)


_TO_LABEL = {Decision.INCLUSION: Label.INCLUSION, Decision.EXCLUSION: Label.EXCLUSION}
_FAILSAFE = Label.INCLUSION


def aggregate(strategy: Strategy | str, runs: Sequence[RunOutput]) -> AggregateDecision:
    """Resolve one record's runs into a single label under ``strategy``.

    Unparsed runs never enter a selection pool. When nothing usable remains,
    and on majority ties, the label falls back to Inclusion with
    ``failsafe_applied`` set: a missed test costs more than an extra one.
    """
    strategy = Strategy(strategy)
    if not runs:
        raise AggregationError("aggregation needs at least one run")
    runs = sorted(runs, key=lambda r: r.run_index)
    parsed = [(r, parse_decision(r)) for r in runs]
    pool = [(r, d) for r, d in parsed if d is not Decision.UNPARSED]

    if strategy is Strategy.FIRST:
        run, decision = parsed[0]
        if decision is Decision.UNPARSED:
            return AggregateDecision(_FAILSAFE, strategy, run.run_index, True)
        return AggregateDecision(_TO_LABEL[decision], strategy, run.run_index)

    if strategy is Strategy.SELF_CONSISTENCY:
        votes = Counter(d for _, d in pool)
        inc, exc = votes[Decision.INCLUSION], votes[Decision.EXCLUSION]
        if inc == exc:
            return AggregateDecision(_FAILSAFE, strategy, None, True)
        return AggregateDecision(Label.INCLUSION if inc > exc else Label.EXCLUSION, strategy)

    if strategy is Strategy.NO_INCONSISTENT:
        values = {d for _, d in parsed}
        if len(values) == 1 and Decision.UNPARSED not in values:
            return AggregateDecision(_TO_LABEL[values.pop()], strategy)
        return AggregateDecision(Label.ABSTAIN, strategy)

    if not pool:
        # Nothing to select from; point at the first run so provenance stays present.
        return AggregateDecision(_FAILSAFE, strategy, runs[0].run_index, True)
    if strategy is Strategy.MAX_PROB:
        key = lambda item: -avg_logprob(item[0])  # noqa: E731
    elif strategy is Strategy.SHORTEST:
        key = lambda item: item[0].completion_token_count  # noqa: E731
    else:
        key = lambda item: -item[0].completion_token_count  # noqa: E731
    # min() keeps the first minimum, i.e. the lowest run index on ties.
    run, decision = min(pool, key=key)
    return AggregateDecision(_TO_LABEL[decision], strategy, run.run_index)


def decision_row(record: str, strategy: Strategy, runs: Sequence[RunOutput]) -> dict[str, Any]:
    """One line of the per-record decisions JSONL."""
    result = aggregate(strategy, runs)
    ordered = sorted(runs, key=lambda r: r.run_index)
    per_run = [
        {
            "run_index": r.run_index,
            "decision": parse_decision(r).value,
            "avg_logprob": round(avg_logprob(r), 6) if r.logprobs else None,
            "completion_tokens": r.completion_token_count,
        }
        for r in ordered
    ]
    return {"record": record, **result.to_dict(), "per_run": per_run}
