"""Rule engine for the EuroTEST-based HIV test recommendation procedure.

The engine walks the nine steps of the complex prompt deterministically over
:class:`PatientFacts`: indicator-condition detection, virology overrides,
immunosuppression filters with the exemption list, prioritisation, HIV test
history and the final decision rules. Rule tables come from ``rules.json``.
"""

from __future__ import annotations

import datetime as dt
import json
from dataclasses import dataclass
from functools import cache
from importlib import resources
from typing import Any, Iterable

from .facts import GuidelineDecision, HIVTest, PatientFacts


class GuidelineError(ValueError):
    """Raised for facts the rule tables cannot interpret."""


@dataclass(frozen=True)
class IndicatorCondition:
    code: int
    name: str
    aids_defining: bool
    exempt: bool
    acute: bool
    association_rank: int


@dataclass(frozen=True)
class RuleTables:
    version: str
    conditions: dict[int, IndicatorCondition]
    atc_prefixes: dict[str, str]
    disease_aliases: dict[str, str]  # normalised alias -> catalog key
    virology_overrides: tuple[tuple[int, tuple[frozenset[str], ...]], ...]
    hiv_markers: frozenset[str]
    one_year_days: int

    @classmethod
    def from_dict(cls, doc: dict[str, Any]) -> RuleTables:
        conditions = {
            int(c["code"]): IndicatorCondition(
                code=int(c["code"]),
                name=c["name"],
                aids_defining=bool(c["aids_defining"]),
                exempt=bool(c["exempt"]),
                acute=bool(c["acute"]),
                association_rank=int(c["association_rank"]),
            )
            for c in doc["indicator_conditions"]
        }
        if sorted(conditions) != list(range(1, 37)):
            raise GuidelineError("rule tables must define indicator conditions 1..36 exactly")
        aliases = {}
        for key, names in doc["immunosuppressive_diseases"].items():
            for name in [key, *names]:
                aliases[_norm(name)] = key
        overrides = tuple(
            (int(o["code"]), tuple(frozenset(_norm(m) for m in combo) for combo in o["any_of"]))
            for o in doc["virology_overrides"]
        )
        return cls(
            version=doc["version"],
            conditions=conditions,
            atc_prefixes={p["prefix"]: p["name"] for p in doc["immunosuppressive_atc_prefixes"]},
            disease_aliases=aliases,
            virology_overrides=overrides,
            hiv_markers=frozenset(_norm(m) for m in doc["hiv_test_markers"]),
            one_year_days=int(doc.get("one_year_days", 365)),
        )


def _norm(text: str) -> str:
    return " ".join(text.casefold().split())


@cache
def load_rules() -> RuleTables:
    """Load the packaged rule tables (cached; the tables are immutable)."""
    raw = resources.files("hivscreen.guideline").joinpath("rules.json").read_text(encoding="utf-8")
    return RuleTables.from_dict(json.loads(raw))


@dataclass(frozen=True)
class Candidate:
    code: int
    date: dt.date  # earliest supporting evidence
    latest: dt.date
    override: bool


def _gather(facts: PatientFacts, rules: RuleTables) -> tuple[dict[int, Candidate], list[int]]:
    """Collect surviving step-1 events and step-2 overrides keyed by code."""
    found: dict[int, Candidate] = {}
    excluded: list[int] = []

    def add(code: int, date: dt.date, override: bool) -> None:
        prev = found.get(code)
        if prev is None:
            found[code] = Candidate(code, date, date, override)
        else:
            found[code] = Candidate(
                code, min(prev.date, date), max(prev.latest, date), prev.override or override
            )

    for event in facts.ic_events:
        if event.code not in rules.conditions:
            raise GuidelineError(f"unknown indicator condition code: {event.code}")
        if event.exclusion_present:
            excluded.append(event.code)
        else:
            add(event.code, event.date, False)
    for code, date in _virology_hits(facts, rules):
        add(code, date, True)
    return found, excluded


def _virology_hits(facts: PatientFacts, rules: RuleTables) -> list[tuple[int, dt.date]]:
    positives: dict[str, dt.date] = {}
    for result in facts.virology:
        if result.positive:
            key = _norm(result.marker)
            positives[key] = min(positives.get(key, result.date), result.date)
    hits = []
    for code, combos in rules.virology_overrides:
        dates = [max(positives[m] for m in combo) for combo in combos if combo <= positives.keys()]
        if dates:
            hits.append((code, min(dates)))
    return hits


def _by_recency(cands: Iterable[Candidate]) -> list[int]:
    return [c.code for c in sorted(cands, key=lambda c: c.latest, reverse=True)]


def detect_candidate_ics(facts: PatientFacts) -> list[int]:
    """Codes of non-excluded IC events plus virology-derived codes, newest first."""
    found, _ = _gather(facts, load_rules())
    return _by_recency(found.values())


def virology_overrides(facts: PatientFacts) -> list[int]:
    """Hepatitis A/B/C codes implied by positive virology marker combinations."""
    return [code for code, _ in _virology_hits(facts, load_rules())]


def immunosuppressive_medications(facts: PatientFacts) -> list[str]:
    prefixes = load_rules().atc_prefixes
    return [m.atc_code for m in facts.medications if m.atc_code[:5] in prefixes]


def immunosuppressive_diseases(facts: PatientFacts) -> list[str]:
    aliases = load_rules().disease_aliases
    keys = []
    for disease in facts.immunosuppressive_diseases:
        key = aliases.get(_norm(disease))
        if key is None:
            raise GuidelineError(f"unknown immunosuppressive disease: {disease!r}")
        keys.append(key)
    return keys


def apply_immunosuppression_filters(
    facts: PatientFacts, codes: Iterable[int], overrides: Iterable[int] | None = None
) -> list[int]:
    """Drop non-exempt, non-override codes when immunosuppression is documented.

    ``overrides`` defaults to the virology-derived codes of ``facts``.
    """
    rules = load_rules()
    codes = list(codes)
    if not (immunosuppressive_medications(facts) or immunosuppressive_diseases(facts)):
        return codes
    protected = set(virology_overrides(facts) if overrides is None else overrides)
    return [c for c in codes if rules.conditions[c].exempt or c in protected]


def prioritize(codes: Iterable[int]) -> list[int]:
    """Order codes by association with HIV: AIDS-defining first, ties by code."""
    conditions = load_rules().conditions
    return sorted(codes, key=lambda c: (conditions[c].association_rank, c))


def hiv_test_history(facts: PatientFacts) -> list[HIVTest]:
    """Documented HIV tests from test records and HIV virology markers, by date."""
    markers = load_rules().hiv_markers
    tests = list(facts.hiv_tests)
    for result in facts.virology:
        if _norm(result.marker) in markers:
            tests.append(HIVTest(result.date, "positive" if result.positive else "negative"))
    return sorted(tests, key=lambda t: t.date)


def _fmt(codes: Iterable[int]) -> str:
    codes = list(codes)
    return "[" + ", ".join(str(c) for c in codes) + "]" if codes else "none"


def decide(facts: PatientFacts) -> GuidelineDecision:
    """Run steps 1-9 and return the recommendation with a per-step trace."""
    rules = load_rules()
    trace: list[tuple[str, str]] = []

    found, excluded = _gather(facts, rules)
    from_text = [c for c in _by_recency(found.values()) if not found[c].override]
    trace.append(("step1", f"indicator conditions {_fmt(from_text)}; excluded by criteria {_fmt(excluded)}"))
    override_codes = sorted(c for c, cand in found.items() if cand.override)
    trace.append(("step2", f"virology-confirmed conditions {_fmt(override_codes)}"))

    meds = immunosuppressive_medications(facts)
    trace.append(("step3", f"immunosuppressive medication {', '.join(meds) if meds else 'none'}"))
    diseases = immunosuppressive_diseases(facts)
    trace.append(("step4", f"immunosuppressive disease {', '.join(diseases) if diseases else 'none'}"))

    candidates = _by_recency(found.values())
    surviving = apply_immunosuppression_filters(facts, candidates, override_codes)
    removed = [c for c in candidates if c not in surviving]
    trace.append(("step5", f"retained {_fmt(surviving)}; removed for immunosuppression {_fmt(removed)}"))

    ordered = prioritize(surviving)
    trace.append(("step6", f"reported conditions {_fmt(ordered)}"))

    tests = hiv_test_history(facts)
    n_pos = sum(t.positive for t in tests)
    trace.append(("step7", f"{len(tests)} HIV test(s) documented, {n_pos} positive"))

    recommend, rule, detail = _step8(surviving, found, tests, rules)
    trace.append(("step8", f"{rule}: {detail}"))
    trace.append(("step9", "YES" if recommend else "NO"))
    primary = ordered[0] if ordered else None
    return GuidelineDecision(recommend=recommend, primary_ic=primary, rule=rule, trace=tuple(trace))


def _step8(
    surviving: list[int], found: dict[int, Candidate], tests: list[HIVTest], rules: RuleTables
) -> tuple[bool, str, str]:
    year = rules.one_year_days
    positives = [t for t in tests if t.positive]
    if not surviving:
        return False, "R3_no_ic", "no indicator condition confirmed"
    ic_date = min(found[c].date for c in surviving)
    if any(t.date < ic_date for t in positives):
        return False, "R2_known_positive", f"positive HIV result predates indicator condition ({ic_date})"
    if not tests:
        return True, "R4_no_test", "no HIV test documented"
    latest = tests[-1]
    if (ic_date - latest.date).days > year:
        return True, "R4_stale_test", f"most recent HIV test {latest.date} is more than one year before {ic_date}"
    for code in surviving:
        if rules.conditions[code].acute:
            acute_date = found[code].date
            if not any(t.date >= acute_date for t in tests):
                return True, "R4_acute_no_followup", (
                    f"acute condition {code} on {acute_date} with no HIV test afterward"
                )
    for t in tests:
        if not t.positive and 0 <= (ic_date - t.date).days <= year:
            return False, "R5_recent_negative", f"negative HIV test {t.date} within one year before {ic_date}"
    return False, "R4_not_met", "HIV test already documented at or after the indicator condition"
