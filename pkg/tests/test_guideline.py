import datetime as dt
import json
from pathlib import Path

import pytest
from hypothesis import given, settings, strategies as st

from hivscreen.guideline import (
    GuidelineError, HIVTest, ICEvent, Medication, PatientFacts, VirologyResult,
    apply_immunosuppression_filters, decide, detect_candidate_ics, load_rules, prioritize, virology_overrides,
)
from hivscreen.guideline.facts import FactsError

GOLDEN = sorted((Path(__file__).parent / "golden").glob("*.json"))
D = dt.date.fromisoformat
STEP8_RULES = {"R2_known_positive", "R3_no_ic", "R4_no_test", "R4_stale_test", "R4_acute_no_followup",
               "R5_recent_negative", "R4_not_met"}
EXEMPT = {4, 5, 6, 7, 9, 10, 11, 12, 15, 16, 17, 18, 20, 21, 25, 26, 27, 28, 29, 30, 31}


def facts(**kw):
    return PatientFacts(**kw)


def tb(date="2022-03-01", excl=False):
    return ICEvent(31, D(date), excl)


# --- rule tables -------------------------------------------------------------------


def test_rule_tables_shape():
    rules = load_rules()
    assert sorted(rules.conditions) == list(range(1, 37))
    assert {c for c, ic in rules.conditions.items() if ic.exempt} == EXEMPT
    assert {c for c, ic in rules.conditions.items() if ic.acute} == {19, 30}
    ranks = {c: ic.association_rank for c, ic in rules.conditions.items() if ic.association_rank < 20}
    assert ranks == {23: 1, 16: 2, 31: 3, 4: 4, 5: 5, 12: 6, 11: 7, 19: 8, 30: 9, 15: 10}
    assert all(len(p) == 5 for p in rules.atc_prefixes)
    assert {"H02AB", "L04AX", "L01XC"} <= rules.atc_prefixes.keys()


def test_fact_validation():
    with pytest.raises(FactsError):
        ICEvent(37, D("2022-01-01"))
    with pytest.raises(FactsError):
        HIVTest(D("2022-01-01"), "unknown")
    with pytest.raises(FactsError):
        Medication("h02ab", D("2022-01-01"))
    with pytest.raises(FactsError):
        PatientFacts.from_dict({"ic_events": [{"code": 3, "date": "01-03-2022"}]})


def test_facts_json_round_trip():
    f = facts(ic_events=[tb()], virology=[VirologyResult("HBsAg", True, D("2022-01-02"))],
              medications=[Medication("H02AB06", D("2022-01-03"))], immunosuppressive_diseases=["leukemia"],
              hiv_tests=[HIVTest(D("2021-01-01"), "negative")])
    assert PatientFacts.from_dict(json.loads(json.dumps(f.to_dict()))) == f


# --- step operations -----------------------------------------------------------


def test_detect_single_tb():
    assert detect_candidate_ics(facts(ic_events=[tb()])) == [31]


def test_detect_excluded_event():
    assert detect_candidate_ics(facts(ic_events=[ICEvent(3, D("2022-03-01"), True)])) == []


def test_detect_empty():
    assert detect_candidate_ics(facts()) == []


def test_detect_dedup_and_recency_order():
    f = facts(ic_events=[ICEvent(12, D("2021-01-01")), tb("2022-01-01"), ICEvent(12, D("2020-01-01"))])
    assert detect_candidate_ics(f) == [31, 12]


def test_detect_includes_virology_codes():
    f = facts(virology=[VirologyResult("anti-HCV", True, D("2022-01-01"))])
    assert detect_candidate_ics(f) == [12]


def test_overrides_hep_b_combination():
    f = facts(virology=[VirologyResult("HBsAg", True, D("2022-01-01")),
                        VirologyResult("anti-HBc", True, D("2022-01-01"))])
    assert virology_overrides(f) == [11]


def test_overrides_hep_a():
    assert virology_overrides(facts(virology=[VirologyResult("IgM anti-HAV", True, D("2022-01-01"))])) == [10]


def test_overrides_negative_marker():
    assert virology_overrides(facts(virology=[VirologyResult("HBsAg", False, D("2022-01-01"))])) == []


def test_overrides_case_insensitive_marker():
    assert virology_overrides(facts(virology=[VirologyResult("hcv-rna", True, D("2022-01-01"))])) == [12]


def test_filter_oral_candida_with_glucocorticoid():
    f = facts(medications=[Medication("H02AB01", D("2022-01-01"))])
    assert apply_immunosuppression_filters(f, [3]) == []


def test_filter_hep_b_exempt():
    f = facts(medications=[Medication("H02AB01", D("2022-01-01"))])
    assert apply_immunosuppression_filters(f, [11]) == [11]


def test_filter_tb_with_rheumatoid_arthritis():
    assert apply_immunosuppression_filters(facts(immunosuppressive_diseases=["rheumatoid arthritis"]), [31]) == [31]


def test_filter_without_immunosuppression_keeps_everything():
    assert apply_immunosuppression_filters(facts(), [3, 13, 36]) == [3, 13, 36]


def test_unknown_disease_is_an_error():
    with pytest.raises(GuidelineError):
        decide(facts(ic_events=[tb()], immunosuppressive_diseases=["sarcoidosis"]))


@pytest.mark.parametrize("code", sorted(EXEMPT))
def test_every_exempt_code_survives_immunosuppression(code):
    f = facts(ic_events=[ICEvent(code, D("2022-03-01"))], medications=[Medication("L04AX03", D("2022-01-01"))],
              immunosuppressive_diseases=["multiple myeloma"])
    d = decide(f)
    assert d.recommend and d.primary_ic == code and d.rule == "R4_no_test"


@pytest.mark.parametrize("code", sorted(set(range(1, 37)) - EXEMPT))
def test_every_non_exempt_code_removed(code):
    f = facts(ic_events=[ICEvent(code, D("2022-03-01"))], medications=[Medication("H02AB06", D("2022-01-01"))])
    assert decide(f).rule == "R3_no_ic"


@pytest.mark.parametrize("prefix", sorted(load_rules().atc_prefixes))
def test_every_atc_prefix_excludes(prefix):
    f = facts(ic_events=[ICEvent(36, D("2022-03-01"))], medications=[Medication(prefix + "01", D("2022-01-01"))])
    d = decide(f)
    assert d.rule == "R3_no_ic" and prefix in dict(d.trace)["step3"]


def test_prioritize_examples():
    assert prioritize([12, 31]) == [31, 12]
    assert prioritize([12, 11]) == [12, 11]
    assert prioritize([]) == []
    assert prioritize([36, 1, 23, 16]) == [23, 16, 1, 36]


@given(st.lists(st.integers(1, 36), max_size=12))
def test_prioritize_is_permutation(codes):
    assert sorted(prioritize(codes)) == sorted(codes)


# --- decide --------------------------------------------------------------------


def test_decide_tb_no_tests():
    d = decide(facts(ic_events=[tb()]))
    assert d.recommend and d.primary_ic == 31


def test_decide_recent_negative():
    assert not decide(facts(ic_events=[tb()], hiv_tests=[HIVTest(D("2021-11-01"), "negative")])).recommend


def test_decide_positive_predates():
    d = decide(facts(ic_events=[tb()], hiv_tests=[HIVTest(D("2020-01-01"), "positive")]))
    assert not d.recommend and d.rule == "R2_known_positive"


def test_decide_acute_sti():
    d = decide(facts(ic_events=[ICEvent(30, D("2022-03-01"))], hiv_tests=[HIVTest(D("2022-01-01"), "negative")]))
    assert d.recommend and d.rule == "R4_acute_no_followup"


def test_trace_has_nine_steps():
    d = decide(facts(ic_events=[tb()]))
    assert [s for s, _ in d.trace] == [f"step{i}" for i in range(1, 10)]
    assert d.trace[-1] == ("step9", "YES")


@pytest.mark.parametrize("path", GOLDEN, ids=[p.stem for p in GOLDEN])
def test_golden_case(path):
    doc = json.loads(path.read_text(encoding="utf-8"))
    d = decide(PatientFacts.from_dict(doc["facts"]))
    expected = doc["expected"]
    assert (d.recommend, d.rule, d.primary_ic) == (expected["recommend"], expected["rule"], expected["primary_ic"])
    assert dict(d.trace)["step8"].startswith(expected["rule"] + ":")


def test_golden_suite_coverage():
    docs = [json.loads(p.read_text(encoding="utf-8")) for p in GOLDEN]
    assert len(docs) >= 30
    assert {d["expected"]["rule"] for d in docs} == STEP8_RULES


# --- properties ----------------------------------------------------------------------

_dates = st.dates(dt.date(2019, 1, 1), dt.date(2023, 12, 31))
_markers = st.sampled_from(["HBsAg", "anti-HBc", "IgM anti-HAV", "PCR HAV", "anti-HCV", "HIV Combo", "CMV IgM"])
_facts = st.builds(
    PatientFacts,
    ic_events=st.lists(st.builds(ICEvent, st.integers(1, 36), _dates, st.booleans()), max_size=4),
    virology=st.lists(st.builds(VirologyResult, _markers, st.booleans(), _dates), max_size=4),
    medications=st.lists(st.builds(Medication, st.sampled_from(["H02AB06", "J01CA04", "L04AX03", "N02BE01"]),
                                   _dates), max_size=3),
    immunosuppressive_diseases=st.lists(st.sampled_from(["leukemia", "lymphoma", "rheumatoid arthritis"]),
                                        max_size=1),
    hiv_tests=st.lists(st.builds(HIVTest, _dates, st.sampled_from(["positive", "negative"])), max_size=3),
)


@settings(max_examples=300)
@given(_facts)
def test_decide_is_pure(f):
    assert decide(f) == decide(PatientFacts.from_dict(f.to_dict()))


@settings(max_examples=300)
@given(_facts)
def test_recommend_implies_primary_ic_and_surviving_condition(f):
    d = decide(f)
    if d.recommend:
        assert d.primary_ic is not None
        assert d.rule in {"R4_no_test", "R4_stale_test", "R4_acute_no_followup"}
        assert "retained none" not in dict(d.trace)["step5"]


@settings(max_examples=300)
@given(_facts)
def test_adding_immunosuppression_keeps_exempt_and_override_codes(f):
    before = detect_candidate_ics(f)
    protected = {c for c in before if c in EXEMPT} | set(virology_overrides(f))
    survivors_before = set(apply_immunosuppression_filters(f, before)) & protected
    g = PatientFacts(f.ic_events, f.virology, (*f.medications, Medication("H02AB06", D("2022-01-01"))),
                     f.immunosuppressive_diseases, f.hiv_tests)
    assert survivors_before <= set(apply_immunosuppression_filters(g, before))


@settings(max_examples=300)
@given(_facts)
def test_no_conditions_never_recommends(f):
    g = PatientFacts((), tuple(v for v in f.virology if not v.positive), f.medications,
                     f.immunosuppressive_diseases, f.hiv_tests)
    assert not decide(g).recommend
