"""Structured patient facts consumed by the guideline engine."""

from __future__ import annotations

import datetime as dt
import re
from dataclasses import dataclass, field
from typing import Any

ATC_PATTERN = re.compile(r"^[A-Z][0-9]{2}[A-Z0-9]*$")


class FactsError(ValueError):
    """Raised when patient facts violate their invariants."""


def parse_date(value: Any) -> dt.date:
    if isinstance(value, dt.datetime):
        return value.date()
    if isinstance(value, dt.date):
        return value
    try:
        return dt.date.fromisoformat(str(value))
    except ValueError as exc:
        raise FactsError(f"not an ISO-8601 date: {value!r}") from exc


@dataclass(frozen=True)
class ICEvent:
    code: int
    date: dt.date
    exclusion_present: bool = False

    def __post_init__(self) -> None:
        if not isinstance(self.code, int) or not 1 <= self.code <= 36:
            raise FactsError(f"unknown indicator condition code: {self.code!r}")


@dataclass(frozen=True)
class VirologyResult:
    marker: str
    positive: bool
    date: dt.date

    def __post_init__(self) -> None:
        if not self.marker:
            raise FactsError("virology marker must be non-empty")


@dataclass(frozen=True)
class Medication:
    atc_code: str
    date: dt.date

    def __post_init__(self) -> None:
        if not ATC_PATTERN.match(self.atc_code):
            raise FactsError(f"malformed ATC code: {self.atc_code!r}")


@dataclass(frozen=True)
class HIVTest:
    date: dt.date
    result: str  # "positive" | "negative"

    def __post_init__(self) -> None:
        if self.result not in ("positive", "negative"):
            raise FactsError(f"HIV test result must be positive/negative, got {self.result!r}")

    @property
    def positive(self) -> bool:
        return self.result == "positive"


@dataclass(frozen=True)
class PatientFacts:
    ic_events: tuple[ICEvent, ...] = ()
    virology: tuple[VirologyResult, ...] = ()
    medications: tuple[Medication, ...] = ()
    immunosuppressive_diseases: tuple[str, ...] = ()
    hiv_tests: tuple[HIVTest, ...] = ()

    def __post_init__(self) -> None:
        # accept lists from callers but store tuples so facts stay hashable
        for name in ("ic_events", "virology", "medications", "immunosuppressive_diseases", "hiv_tests"):
            object.__setattr__(self, name, tuple(getattr(self, name)))

    def is_empty(self) -> bool:
        return not (self.ic_events or self.virology or self.medications
                    or self.immunosuppressive_diseases or self.hiv_tests)

    def to_dict(self) -> dict[str, Any]:
        return {
            "ic_events": [
                {"code": e.code, "date": e.date.isoformat(), "exclusion_present": e.exclusion_present}
                for e in self.ic_events
            ],
            "virology": [
                {"marker": v.marker, "positive": v.positive, "date": v.date.isoformat()}
                for v in self.virology
            ],
            "medications": [{"atc_code": m.atc_code, "date": m.date.isoformat()} for m in self.medications],
            "immunosuppressive_diseases": list(self.immunosuppressive_diseases),
            "hiv_tests": [{"date": t.date.isoformat(), "result": t.result} for t in self.hiv_tests],
        }

    @classmethod
    def from_dict(cls, data: dict[str, Any]) -> PatientFacts:
        try:
            return cls(
                ic_events=[
                    ICEvent(int(e["code"]), parse_date(e["date"]), bool(e.get("exclusion_present", False)))
                    for e in data.get("ic_events", [])
                ],
                virology=[
                    VirologyResult(str(v["marker"]), bool(v["positive"]), parse_date(v["date"]))
                    for v in data.get("virology", [])
                ],
                medications=[
                    Medication(str(m["atc_code"]), parse_date(m["date"])) for m in data.get("medications", [])
                ],
                immunosuppressive_diseases=[str(d) for d in data.get("immunosuppressive_diseases", [])],
                hiv_tests=[HIVTest(parse_date(t["date"]), str(t["result"])) for t in data.get("hiv_tests", [])],
            )
        except KeyError as exc:
            raise FactsError(f"missing field {exc.args[0]!r}") from exc


@dataclass(frozen=True)
class GuidelineDecision:
    recommend: bool
    primary_ic: int | None
    rule: str
    trace: tuple[tuple[str, str], ...] = field(default=())

    def to_dict(self) -> dict[str, Any]:
        return {
            "recommend": self.recommend,
            "primary_ic": self.primary_ic,
            "rule": self.rule,
            "trace": [list(t) for t in self.trace],
        }
