import datetime as dt
import json

import pytest
from hypothesis import given, settings, strategies as st

from hivscreen.corpus import stratified_split
from hivscreen.guideline import HIVTest, ICEvent, Medication, PatientFacts, VirologyResult, decide
from hivscreen.synth import SynthConfig, SynthError, TagError, format_tag, generate_corpus, generate_note, parse_tags

D = dt.date.fromisoformat


def test_parse_ic_tag():
    f = parse_tags("lorem [[IC:31 excl=0 d=2022-03-01]] ipsum")
    assert f.ic_events == (ICEvent(31, D("2022-03-01"), False),)


def test_parse_med_tag():
    assert parse_tags("[[MED:H02AB01 d=2022-01-01]]").medications == (Medication("H02AB01", D("2022-01-01")),)


def test_parse_hivtest_tag():
    assert parse_tags("[[HIVTEST:neg d=2021-11-01]]").hiv_tests == (HIVTest(D("2021-11-01"), "negative"),)


def test_parse_quoted_payloads():
    f = parse_tags('x [[VIR:"IgM anti-HAV" pos=1 d=2022-01-01]] y [[DIS:"rheumatoid arthritis"]]')
    assert f.virology == (VirologyResult("IgM anti-HAV", True, D("2022-01-01")),)
    assert f.immunosuppressive_diseases == ("rheumatoid arthritis",)


def test_parse_ignores_plain_text():
    assert parse_tags("geen tags hier [ niet ] ook niet").is_empty()


@pytest.mark.parametrize("text, offset", [
    ("ab [[IC:31 d=2022-03-01]]", 3),            # missing excl attribute
    ("é [[IC:31 excl=0 d=2022-13-01]]", 3),      # invalid date; offset counts UTF-8 bytes
    ("[[FOO:1]]", 0),                            # unknown kind
    ("ok [[IC:31 excl=0 d=2022-03-01", 3),       # unterminated
    ("[[HIVTEST:maybe d=2021-01-01]]", 0),
    ("[[IC:99 excl=0 d=2022-03-01]]", 0),        # code out of range
])
def test_malformed_tags_report_byte_offset(text, offset):
    with pytest.raises(TagError) as err:
        parse_tags(text)
    assert err.value.offset == offset


def test_format_parse_round_trip():
    facts = [ICEvent(30, D("2022-03-01"), True), Medication("L04AX03", D("2021-02-02")),
             VirologyResult("HCV-RNA", False, D("2020-05-05")), HIVTest(D("2020-01-01"), "positive"), "leukemia"]
    f = parse_tags(" ".join(format_tag(x) for x in facts))
    assert f == PatientFacts(facts[0:1], facts[2:3], facts[1:2], ["leukemia"], facts[3:4])


def test_corpus_class_mix_and_labels():
    notes = generate_corpus(SynthConfig(n=100, inclusion_fraction=0.10, seed=7))
    assert len(notes) == 100 and sum(n.label for n in notes) == 10


def test_corpus_deterministic_bytes():
    cfg = SynthConfig(n=60, seed=3)
    dump = lambda ns: json.dumps([(n.pseudonym, n.text, n.label) for n in ns])  # noqa: E731
    assert dump(generate_corpus(cfg)) == dump(generate_corpus(cfg))
    assert dump(generate_corpus(cfg)) != dump(generate_corpus(SynthConfig(n=60, seed=4)))


def test_corpus_round_trip_invariant():
    for note in generate_corpus(SynthConfig(n=400, inclusion_fraction=0.3, seed=11)):
        assert parse_tags(note.text) == note.facts
        assert decide(note.facts).recommend == (note.label == 1)


def test_corpus_covers_every_step8_rule():
    rules = {decide(n.facts).rule for n in generate_corpus(SynthConfig(n=600, inclusion_fraction=0.3, seed=2))}
    assert rules == {"R2_known_positive", "R3_no_ic", "R4_no_test", "R4_stale_test", "R4_acute_no_followup",
                     "R5_recent_negative", "R4_not_met"}


def test_paper_scale_corpus_split():
    notes = generate_corpus(SynthConfig(n=10626, inclusion_fraction=1055 / 10626, seed=1))
    split = stratified_split([n.to_record() for n in notes], 0.10, seed=1)
    labels = [r.label for r in split.test]
    assert (labels.count(1), labels.count(0)) == (106, 957)


def test_generation_per_record_independent_of_corpus_size():
    small = generate_corpus(SynthConfig(n=20, inclusion_fraction=0.5, seed=5))
    assert generate_note(SynthConfig(n=20, inclusion_fraction=0.5, seed=5), 3, small[3].label) == small[3]


def test_config_validation():
    with pytest.raises(SynthError):
        SynthConfig(n=0)
    with pytest.raises(SynthError):
        SynthConfig(n=5, inclusion_fraction=0.01)  # rounds to zero inclusions
    with pytest.raises(SynthError):
        SynthConfig(filler_sentences_per_note=(5, 2))


def test_retry_exhaustion_names_the_class():
    with pytest.raises(SynthError, match="Inclusion"):
        generate_note(SynthConfig(n=10, max_retries=0), 0, 1)


@settings(max_examples=25, deadline=None)
@given(st.integers(0, 10_000))
def test_any_seed_round_trips(seed):
    for note in generate_corpus(SynthConfig(n=12, inclusion_fraction=0.25, seed=seed)):
        assert parse_tags(note.text) == note.facts
