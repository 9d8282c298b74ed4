"""Deterministic guideline engine and the patient-facts model it consumes."""

from .engine import (
    GuidelineError,
    IndicatorCondition,
    RuleTables,
    apply_immunosuppression_filters,
    decide,
    detect_candidate_ics,
    hiv_test_history,
    load_rules,
    prioritize,
    virology_overrides,
)
from .facts import (
    FactsError,
    GuidelineDecision,
    HIVTest,
    ICEvent,
    Medication,
    PatientFacts,
    VirologyResult,
    parse_date,
)

__all__ = [
    "FactsError",
    "GuidelineDecision",
    "GuidelineError",
    "HIVTest",
    "ICEvent",
    "IndicatorCondition",
    "Medication",
    "PatientFacts",
    "RuleTables",
    "VirologyResult",
    "apply_immunosuppression_filters",
    "decide",
    "detect_candidate_ics",
    "hiv_test_history",
    "load_rules",
    "parse_date",
    "prioritize",
    "virology_overrides",
]
