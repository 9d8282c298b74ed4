"""Seeded synthetic corpora of tagged pseudo-Dutch notes with oracle labels.

Facts are embedded in the note as machine-readable tags::

    [[IC:31 excl=0 d=2022-03-01]]
    [[MED:H02AB06 d=2022-01-01]]
    [[VIR:"IgM anti-HAV" pos=1 d=2022-02-11]]
    [[DIS:"rheumatoid arthritis"]]
    [[HIVTEST:neg d=2021-11-01]]

A payload containing spaces is double-quoted. Everything outside a tag is
filler and carries no facts. Labels come from :func:`guideline.decide`.
"""

from __future__ import annotations

import datetime as dt
import math
import random
import re
from dataclasses import dataclass
from typing import Callable

from .corpus import INCLUSION, EXCLUSION, PatientRecord, round_half_away
from .guideline import (
    HIVTest,
    ICEvent,
    Medication,
    PatientFacts,
    VirologyResult,
    decide,
    load_rules,
)
from .guideline.facts import FactsError


class SynthError(ValueError):
    pass


class TagError(ValueError):
    def __init__(self, message: str, offset: int):
        super().__init__(f"{message} at byte offset {offset}")
        self.offset = offset


@dataclass(frozen=True)
class SynthConfig:
    n: int = 500
    inclusion_fraction: float = 0.1
    seed: int = 0
    filler_sentences_per_note: tuple[int, int] = (3, 12)
    tag_density: float = 0.25
    max_retries: int = 64

    def __post_init__(self) -> None:
        if self.n < 1:
            raise SynthError("n must be at least 1")
        if not 0 < self.inclusion_fraction < 1:
            raise SynthError("inclusion_fraction must lie in (0, 1)")
        k = self.n_inclusion
        if k < 1 or k > self.n - 1:
            raise SynthError(f"n={self.n} with fraction {self.inclusion_fraction} leaves a class empty")
        lo, hi = self.filler_sentences_per_note
        if not 0 <= lo <= hi:
            raise SynthError("filler_sentences_per_note must be an ordered non-negative range")
        if not 0 < self.tag_density <= 1:
            raise SynthError("tag_density must lie in (0, 1]")

    @property
    def n_inclusion(self) -> int:
        return round_half_away(self.n * self.inclusion_fraction)


@dataclass(frozen=True)
class TaggedNote:
    pseudonym: str
    text: str
    facts: PatientFacts
    label: int

    def to_record(self) -> PatientRecord:
        return PatientRecord(self.pseudonym, self.text, self.label)


# --- tag grammar ----------------------------------------------------------

_KINDS = ("IC", "MED", "VIR", "DIS", "HIVTEST")
_TAG_RE = re.compile(
    r'\[\[(?P<kind>[A-Z]+):(?P<payload>"[^"\]\[]*"|[^\s"\]\[]+)(?P<attrs>(?: [a-z]+=[^\s\]\[]+)*)\]\]'
)
_REQUIRED = {"IC": {"excl", "d"}, "MED": {"d"}, "VIR": {"pos", "d"}, "DIS": set(), "HIVTEST": {"d"}}


def _quote(payload: str) -> str:
    return f'"{payload}"' if " " in payload else payload


def format_tag(fact: ICEvent | Medication | VirologyResult | HIVTest | str) -> str:
    if isinstance(fact, ICEvent):
        return f"[[IC:{fact.code} excl={int(fact.exclusion_present)} d={fact.date.isoformat()}]]"
    if isinstance(fact, Medication):
        return f"[[MED:{fact.atc_code} d={fact.date.isoformat()}]]"
    if isinstance(fact, VirologyResult):
        return f"[[VIR:{_quote(fact.marker)} pos={int(fact.positive)} d={fact.date.isoformat()}]]"
    if isinstance(fact, HIVTest):
        return f"[[HIVTEST:{'pos' if fact.positive else 'neg'} d={fact.date.isoformat()}]]"
    return f"[[DIS:{_quote(fact)}]]"


def _byte_offset(text: str, index: int) -> int:
    return len(text[:index].encode("utf-8"))


def parse_tags(text: str) -> PatientFacts:
    """Recover the facts embedded in ``text``; non-tag content is ignored.

    Raises:
        TagError: for a ``[[`` that does not open a well-formed tag.
    """
    found: dict[str, list] = {k: [] for k in _KINDS}
    pos = text.find("[[")
    while pos != -1:
        m = _TAG_RE.match(text, pos)
        if m is None:
            raise TagError("malformed tag", _byte_offset(text, pos))
        kind = m["kind"]
        if kind not in found:
            raise TagError(f"unknown tag kind {kind!r}", _byte_offset(text, pos))
        attrs = dict(a.split("=", 1) for a in m["attrs"].split())
        missing = _REQUIRED[kind] - attrs.keys()
        if missing:
            raise TagError(f"{kind} tag lacks {sorted(missing)}", _byte_offset(text, pos))
        payload = m["payload"].strip('"')
        try:
            found[kind].append(_build_fact(kind, payload, attrs))
        except (ValueError, FactsError) as exc:
            raise TagError(f"invalid {kind} tag ({exc})", _byte_offset(text, pos)) from None
        pos = text.find("[[", m.end())
    return PatientFacts(
        ic_events=found["IC"],
        virology=found["VIR"],
        medications=found["MED"],
        immunosuppressive_diseases=found["DIS"],
        hiv_tests=found["HIVTEST"],
    )


def _flag(value: str) -> bool:
    if value not in ("0", "1"):
        raise ValueError(f"flag must be 0 or 1, got {value!r}")
    return value == "1"


def _build_fact(kind: str, payload: str, attrs: dict[str, str]):
    date = dt.date.fromisoformat(attrs["d"]) if "d" in attrs else None
    if kind == "IC":
        return ICEvent(int(payload), date, _flag(attrs["excl"]))
    if kind == "MED":
        return Medication(payload, date)
    if kind == "VIR":
        return VirologyResult(payload, _flag(attrs["pos"]), date)
    if kind == "HIVTEST":
        if payload not in ("pos", "neg"):
            raise ValueError(f"HIV test result must be pos/neg, got {payload!r}")
        return HIVTest(date, "positive" if payload == "pos" else "negative")
    return payload


# --- fact scenarios -------------------------------------------------------

COHORT_START = dt.date(2020, 1, 1)
COHORT_END = dt.date(2023, 7, 31)
IMMUNOSUPPRESSIVE_MEDS = ("H02AB06", "H02AB02", "L04AX01", "L01BA01", "L04AD02", "L04AB02")
BENIGN_MEDS = ("J01CA04", "N02BE01", "C10AA05", "A02BC01", "C07AB02", "B01AC06")
NEGATIVE_MARKERS = ("HBsAg", "anti-HCV", "IgM anti-HAV", "CMV IgM", "EBV VCA IgM")
HEPATITIS_COMBOS = ((10, ("IgM anti-HAV",)), (10, ("PCR HAV",)), (11, ("HBsAg", "anti-HBc")),
                    (12, ("anti-HCV",)), (12, ("HCV-RNA",)), (12, ("TMA-K HCV",)))
ALL_CODES = tuple(range(1, 37))


def _day(rng: random.Random, lo: dt.date = COHORT_START, hi: dt.date = COHORT_END) -> dt.date:
    return lo + dt.timedelta(days=rng.randint(0, (hi - lo).days))


def _shift(date: dt.date, days: int) -> dt.date:
    return date + dt.timedelta(days=days)


def _codes(pred: Callable) -> tuple[int, ...]:
    conditions = load_rules().conditions
    return tuple(c for c in ALL_CODES if pred(conditions[c]))


def _inclusion_facts(rng: random.Random) -> dict:
    exempt = _codes(lambda c: c.exempt)
    acute = _codes(lambda c: c.acute)
    ic_date = _day(rng)
    kind = rng.randrange(5)
    facts: dict = {"ic_events": [], "virology": [], "medications": [], "immunosuppressive_diseases": [],
                   "hiv_tests": []}
    if kind == 0:  # no prior test
        facts["ic_events"].append(ICEvent(rng.choice(ALL_CODES), ic_date))
    elif kind == 1:  # stale negative test
        facts["ic_events"].append(ICEvent(rng.choice(ALL_CODES), ic_date))
        facts["hiv_tests"].append(HIVTest(_shift(ic_date, -rng.randint(366, 1500)), "negative"))
    elif kind == 2:  # acute condition without follow-up test
        facts["ic_events"].append(ICEvent(rng.choice(acute), ic_date))
        facts["hiv_tests"].append(HIVTest(_shift(ic_date, -rng.randint(1, 365)), "negative"))
    elif kind == 3:  # virology override despite immunosuppression
        code, markers = rng.choice(HEPATITIS_COMBOS)
        facts["virology"].extend(VirologyResult(m, True, ic_date) for m in markers)
        facts["medications"].append(Medication(rng.choice(IMMUNOSUPPRESSIVE_MEDS), _shift(ic_date, -30)))
    else:  # exempt condition under immunosuppression
        facts["ic_events"].append(ICEvent(rng.choice(exempt), ic_date))
        if rng.random() < 0.5:
            facts["medications"].append(Medication(rng.choice(IMMUNOSUPPRESSIVE_MEDS), _shift(ic_date, -60)))
        else:
            facts["immunosuppressive_diseases"].append(rng.choice(sorted(_disease_keys())))
    return facts


def _exclusion_facts(rng: random.Random) -> dict:
    non_exempt = _codes(lambda c: not c.exempt)
    non_acute = _codes(lambda c: not c.acute)
    ic_date = _day(rng)
    kind = rng.randrange(6)
    facts: dict = {"ic_events": [], "virology": [], "medications": [], "immunosuppressive_diseases": [],
                   "hiv_tests": []}
    if kind == 0:  # nothing indicative
        pass
    elif kind == 1:  # indicator condition ruled out by its exclusion criteria
        facts["ic_events"].append(ICEvent(rng.choice(ALL_CODES), ic_date, exclusion_present=True))
    elif kind == 2:  # explained by immunosuppression
        facts["ic_events"].append(ICEvent(rng.choice(non_exempt), ic_date))
        if rng.random() < 0.5:
            facts["medications"].append(Medication(rng.choice(IMMUNOSUPPRESSIVE_MEDS), _shift(ic_date, -45)))
        else:
            facts["immunosuppressive_diseases"].append(rng.choice(sorted(_disease_keys())))
    elif kind == 3:  # recent negative test
        facts["ic_events"].append(ICEvent(rng.choice(non_acute), ic_date))
        facts["hiv_tests"].append(HIVTest(_shift(ic_date, -rng.randint(0, 365)), "negative"))
    elif kind == 4:  # known HIV diagnosis
        facts["ic_events"].append(ICEvent(rng.choice(ALL_CODES), ic_date))
        facts["hiv_tests"].append(HIVTest(_shift(ic_date, -rng.randint(30, 2000)), "positive"))
    else:  # already tested after the condition
        facts["ic_events"].append(ICEvent(rng.choice(ALL_CODES), ic_date))
        facts["hiv_tests"].append(HIVTest(_shift(ic_date, rng.randint(0, 90)), "negative"))
    return facts


def _disease_keys() -> set[str]:
    return set(load_rules().disease_aliases.values())


def _add_noise(rng: random.Random, facts: dict) -> None:
    for _ in range(rng.randint(0, 2)):
        facts["medications"].append(Medication(rng.choice(BENIGN_MEDS), _day(rng)))
    for _ in range(rng.randint(0, 2)):
        facts["virology"].append(VirologyResult(rng.choice(NEGATIVE_MARKERS), False, _day(rng)))


# --- filler text ----------------------------------------------------------

_FILLER = (
    "Patiënt meldt zich op de polikliniek voor controle.",
    "Lichamelijk onderzoek toont geen afwijkingen.",
    "Bloeddruk {a}/{b} mmHg, pols {c} per minuut.",
    "Temperatuur {t} graden Celsius.",
    "Beleid: afwachten en controle over {w} weken.",
    "Anamnese: klachten van vermoeidheid sinds {d} dagen.",
    "Voorgeschiedenis: appendectomie in {y}.",
    "Medicatie wordt ongewijzigd voortgezet.",
    "Laboratorium: Hb {hb} mmol/l, leukocyten {l} x10^9/l.",
    "Echo abdomen zonder bijzonderheden.",
    "Familieanamnese blanco.",
    "Rookt niet, alcohol sociaal.",
    "Patiënt wordt terugverwezen naar de huisarts.",
    "Overleg gehad met de supervisor.",
    "Conclusie: stabiel klinisch beeld.",
    "Patiënte is goed aanspreekbaar en oriënteert zich adequaat.",
    "Klachten van hoesten en dyspnoe bij inspanning.",
    "Gewicht {kg} kg, lengte {cm} cm.",
    "Uitslagen besproken met patiënt en partner.",
    "Afspraak gemaakt voor de dagbehandeling.",
)
_LEADS = {
    ICEvent: ("Diagnose: {}.", "Werkdiagnose {}.", "In de voorgeschiedenis {}."),
    Medication: ("Medicatie: {}.", "Gestart met {}."),
    VirologyResult: ("Virologie: {}.", "Serologie {}."),
    HIVTest: ("HIV-diagnostiek: {}.", "Eerder laboratoriumonderzoek {}."),
    str: ("Bekend met {}.", "Comorbiditeit: {}."),
}


def _filler(rng: random.Random) -> str:
    template = rng.choice(_FILLER)
    return template.format(
        a=rng.randint(100, 170), b=rng.randint(60, 100), c=rng.randint(55, 110),
        t=f"{rng.uniform(36.2, 39.8):.1f}", w=rng.randint(2, 12), d=rng.randint(2, 60),
        y=rng.randint(1975, 2019), hb=f"{rng.uniform(6.0, 10.0):.1f}", l=f"{rng.uniform(2.0, 14.0):.1f}",
        kg=rng.randint(45, 120), cm=rng.randint(150, 200),
    )


def _render(rng: random.Random, items: list, cfg: SynthConfig) -> str:
    lo, hi = cfg.filler_sentences_per_note
    n_filler = rng.randint(lo, hi)
    if items:
        # keep the tag share of sentences at or below tag_density
        n_filler = max(n_filler, math.ceil(len(items) * (1 - cfg.tag_density) / cfg.tag_density))
    slots = sorted(rng.randint(0, n_filler) for _ in items)
    sentences: list[str] = []
    pending = iter(zip(slots, items))
    nxt = next(pending, None)
    for i in range(n_filler + 1):
        while nxt is not None and nxt[0] == i:
            sentences.append(rng.choice(_LEADS[type(nxt[1])]).format(format_tag(nxt[1])))
            nxt = next(pending, None)
        if i < n_filler:
            sentences.append(_filler(rng))
    return " ".join(sentences)


def _draw(rng: random.Random, target: int, cfg: SynthConfig) -> tuple[str, PatientFacts]:
    facts = _inclusion_facts(rng) if target == INCLUSION else _exclusion_facts(rng)
    _add_noise(rng, facts)
    items = [*facts["ic_events"], *facts["virology"], *facts["medications"],
             *facts["immunosuppressive_diseases"], *facts["hiv_tests"]]
    rng.shuffle(items)
    text = _render(rng, items, cfg)
    ordered = PatientFacts(
        ic_events=[i for i in items if isinstance(i, ICEvent)],
        virology=[i for i in items if isinstance(i, VirologyResult)],
        medications=[i for i in items if isinstance(i, Medication)],
        immunosuppressive_diseases=[i for i in items if isinstance(i, str)],
        hiv_tests=[i for i in items if isinstance(i, HIVTest)],
    )
    return text, ordered


def generate_note(cfg: SynthConfig, index: int, target: int) -> TaggedNote:
    rng = random.Random(f"{cfg.seed}:{index}")
    for _ in range(cfg.max_retries):
        text, facts = _draw(rng, target, cfg)
        if int(decide(facts).recommend) == target:
            return TaggedNote(f"SYN{index:06d}", text, facts, target)
    name = "Inclusion" if target == INCLUSION else "Exclusion"
    raise SynthError(f"record {index}: could not draw facts for class {name} in {cfg.max_retries} tries")


def generate_corpus(cfg: SynthConfig) -> list[TaggedNote]:
    """Generate ``cfg.n`` notes with exactly ``round(n * fraction)`` inclusions."""
    inclusion = set(random.Random(cfg.seed).sample(range(cfg.n), cfg.n_inclusion))
    return [generate_note(cfg, i, INCLUSION if i in inclusion else EXCLUSION) for i in range(cfg.n)]
