"""Ingest raw EHR exports into labeled per-patient records and dataset splits.

Free-text notes are cleaned, merged per pseudonym newest-first, joined to the
metadata decision flag and extended with a rendered medication/virology block.
Input CSV headers follow the export field names (``Pseudoniem``, ``authored``,
``section_text``, ``start_date``, ``icd10_code``, ``specialism``,
``HIV_indicator_HIVteam``, ``code5_ATC_code``, ``code_text``, ``hix_code``,
``valueString``).
"""

from __future__ import annotations

import csv
import datetime as dt
import json
import logging
import random
import re
import unicodedata
from collections import defaultdict
from dataclasses import dataclass, field
from decimal import ROUND_HALF_UP, Decimal
from pathlib import Path
from typing import Iterable, Iterator

from .guideline.facts import ATC_PATTERN

logger = logging.getLogger(__name__)

NOTE_SEPARATOR = "\n\n"
EXCLUSION, INCLUSION = 0, 1


class CorpusError(ValueError):
    """Raised for malformed raw entries or impossible dataset operations."""


# Characters whose UTF-8 bytes commonly get decoded as Latin-1/cp1252 in
# Dutch EHR exports. The replacement table is derived from this list.
_MOJIBAKE_TARGETS = (
    "àáâãäåæçèéêëìíîïñòóôõöøùúûüýÿ"
    "ÀÁÂÄÇÈÉÊËÍÎÏÑÓÔÖØÚÜß"
    "°±²³µ·×÷€‘’‚“”„–—…•©®ÃÂ"
)


def _build_mojibake_table() -> dict[str, str]:
    table = {}
    for ch in _MOJIBAKE_TARGETS:
        raw = ch.encode("utf-8")
        for codec in ("cp1252", "latin-1"):
            try:
                broken = raw.decode(codec)
            except UnicodeDecodeError:
                continue
            if broken != ch:
                table[broken] = ch
    return table


MOJIBAKE_TABLE: dict[str, str] = _build_mojibake_table()
_MOJIBAKE_RE = re.compile("|".join(re.escape(k) for k in sorted(MOJIBAKE_TABLE, key=len, reverse=True)))
_ESCAPE_RE = re.compile(r"\\[nrtfv]")
_SPACE_RE = re.compile(r"\s+")


def clean_text(raw: str) -> str:
    """Remove escape sequences and control characters and repair mojibake.

    Repair runs to a fixpoint so doubly mis-decoded text is also restored.
    Escapes and control characters become spaces; whitespace runs collapse to
    one space and the result is stripped.

    >>> clean_text("coÃ¶rdinatie\\nregel2")
    'coördinatie regel2'
    """
    text = raw
    while True:
        repaired = _MOJIBAKE_RE.sub(lambda m: MOJIBAKE_TABLE[m.group(0)], text)
        if repaired == text:
            break
        text = repaired
    text = _ESCAPE_RE.sub(" ", text)
    text = "".join(" " if unicodedata.category(c) == "Cc" else c for c in text)
    return _SPACE_RE.sub(" ", text).strip()


@dataclass(frozen=True)
class RawNoteEntry:
    pseudonym: str
    authored: str
    section_text: str


@dataclass(frozen=True)
class RawMetadataEntry:
    pseudonym: str
    start_date: str
    icd10_code: str
    specialism: str
    decision_flag: int

    def __post_init__(self) -> None:
        if self.decision_flag not in (0, 1, 2):
            raise CorpusError(f"decision flag must be 0, 1 or 2, got {self.decision_flag!r}")


@dataclass(frozen=True)
class MedicationEntry:
    pseudonym: str
    atc_code: str
    code_text: str

    def __post_init__(self) -> None:
        if not ATC_PATTERN.match(self.atc_code):
            raise CorpusError(f"malformed ATC code {self.atc_code!r}")


@dataclass(frozen=True)
class VirologyEntry:
    pseudonym: str
    hix_code: str
    value_string: str

    def __post_init__(self) -> None:
        if not self.hix_code:
            raise CorpusError("hix_code must be non-empty")


@dataclass(frozen=True)
class PatientRecord:
    pseudonym: str
    text: str
    label: int

    def __post_init__(self) -> None:
        if not self.text:
            raise CorpusError(f"record {self.pseudonym}: empty text")
        if self.label not in (EXCLUSION, INCLUSION):
            raise CorpusError(f"record {self.pseudonym}: label must be 0 or 1")

    def to_dict(self) -> dict:
        return {"pseudonym": self.pseudonym, "text": self.text, "label": self.label}


@dataclass
class DatasetSplit:
    train: list[PatientRecord]
    test: list[PatientRecord]
    seed: int
    fraction: float = 0.1

    def manifest(self) -> dict:
        return {
            "seed": self.seed,
            "fraction": self.fraction,
            "test_pseudonyms": [r.pseudonym for r in self.test],
        }


@dataclass
class BuildReport:
    records: list[PatientRecord]
    dropped_not_selected: int = 0
    skipped_without_notes: list[str] = field(default_factory=list)


def round_half_away(value: Decimal | float) -> int:
    return int(Decimal(str(value)).quantize(Decimal(1), rounding=ROUND_HALF_UP))


def aggregate_notes(entries: Iterable[RawNoteEntry]) -> dict[str, str]:
    """Concatenate each patient's cleaned note sections newest-first.

    Entries sharing a date keep their input order.
    """
    grouped: dict[str, list[tuple[dt.date, int, str]]] = defaultdict(list)
    for index, entry in enumerate(entries):
        try:
            authored = dt.date.fromisoformat(entry.authored[:10])
        except (ValueError, TypeError) as exc:
            raise CorpusError(f"note entry {index}: unparseable authored date {entry.authored!r}") from exc
        grouped[entry.pseudonym].append((authored, index, entry.section_text))
    merged = {}
    for pseudonym, items in grouped.items():
        items.sort(key=lambda item: (-item[0].toordinal(), item[1]))
        merged[pseudonym] = NOTE_SEPARATOR.join(text for _, _, text in items)
    return merged


def render_structured(meds: Iterable[MedicationEntry], vir: Iterable[VirologyEntry]) -> str:
    """Render medication and virology rows as the two labeled text sections."""
    med_lines = [f"{m.code_text} (ATC {m.atc_code})" for m in meds]
    vir_lines = [f"{v.hix_code}: {v.value_string}" for v in vir]
    parts = []
    for title, lines in (("Medicatie:", med_lines), ("Virologie:", vir_lines)):
        parts.append("\n".join([title, *lines]) if lines else f"{title} None")
    return "\n".join(parts)


def build_records(
    notes: Iterable[RawNoteEntry],
    metadata: Iterable[RawMetadataEntry],
    meds: Iterable[MedicationEntry] = (),
    vir: Iterable[VirologyEntry] = (),
) -> BuildReport:
    """Join aggregated notes to metadata flags and append the structured block.

    When a patient has several metadata rows the flag of the most recent
    ``start_date`` wins. Patients flagged 2 are dropped; patients with a flag but
    no notes are skipped and counted.
    """
    merged = aggregate_notes(notes)
    flags: dict[str, tuple[str, int]] = {}
    for entry in metadata:
        prev = flags.get(entry.pseudonym)
        if prev is None or entry.start_date >= prev[0]:
            flags[entry.pseudonym] = (entry.start_date, entry.decision_flag)
    meds_by: dict[str, list[MedicationEntry]] = defaultdict(list)
    for m in meds:
        meds_by[m.pseudonym].append(m)
    vir_by: dict[str, list[VirologyEntry]] = defaultdict(list)
    for v in vir:
        vir_by[v.pseudonym].append(v)

    report = BuildReport(records=[])
    for pseudonym, (_, flag) in flags.items():
        if flag == 2:
            report.dropped_not_selected += 1
            continue
        text = merged.get(pseudonym)
        if not text:
            report.skipped_without_notes.append(pseudonym)
            continue
        block = render_structured(meds_by.get(pseudonym, []), vir_by.get(pseudonym, []))
        report.records.append(PatientRecord(pseudonym, text + NOTE_SEPARATOR + block, flag))
    if report.skipped_without_notes:
        logger.warning("%d pseudonym(s) with metadata but no notes skipped", len(report.skipped_without_notes))
    return report


def _by_label(records: Iterable[PatientRecord]) -> dict[int, list[int]]:
    groups: dict[int, list[int]] = {EXCLUSION: [], INCLUSION: []}
    for index, record in enumerate(records):
        groups[record.label].append(index)
    return groups


def stratified_split(records: list[PatientRecord], fraction: float, seed: int) -> DatasetSplit:
    """Hold out ``fraction`` of each class, rounded half away from zero."""
    if not 0 < fraction < 1:
        raise CorpusError(f"fraction must lie in (0, 1), got {fraction}")
    groups = _by_label(records)
    rng = random.Random(seed)
    held_out: set[int] = set()
    for label in (EXCLUSION, INCLUSION):
        members = groups[label]
        if not members:
            raise CorpusError(f"class {label} has no records; stratified split impossible")
        k = round_half_away(Decimal(str(fraction)) * len(members))
        held_out.update(rng.sample(members, k))
    test = [r for i, r in enumerate(records) if i in held_out]
    train = [r for i, r in enumerate(records) if i not in held_out]
    return DatasetSplit(train=train, test=test, seed=seed, fraction=fraction)


def downsample_balanced(records: list[PatientRecord], seed: int) -> list[PatientRecord]:
    """Under-sample the majority class to the minority class size."""
    groups = _by_label(records)
    if not groups[EXCLUSION] or not groups[INCLUSION]:
        raise CorpusError("downsampling needs both classes present")
    minority, majority = sorted(groups.values(), key=len)
    keep = set(minority) | set(random.Random(seed).sample(majority, len(minority)))
    return [r for i, r in enumerate(records) if i in keep]


# --- file formats ---------------------------------------------------------


def _read_csv(path: Path) -> Iterator[dict[str, str]]:
    with open(path, newline="", encoding="utf-8-sig") as fh:
        yield from csv.DictReader(fh)


def read_notes_csv(path: Path) -> list[RawNoteEntry]:
    return [
        RawNoteEntry(row["Pseudoniem"], row["authored"], clean_text(row["section_text"] or ""))
        for row in _read_csv(path)
    ]


def read_metadata_csv(path: Path) -> list[RawMetadataEntry]:
    out = []
    for i, row in enumerate(_read_csv(path)):
        try:
            flag = int(row["HIV_indicator_HIVteam"])
        except ValueError as exc:
            raise CorpusError(f"metadata row {i}: non-integer decision flag") from exc
        out.append(RawMetadataEntry(row["Pseudoniem"], row["start_date"], row.get("icd10_code", ""),
                                    row.get("specialism", ""), flag))
    return out


def read_medication_csv(path: Path) -> list[MedicationEntry]:
    return [
        MedicationEntry(row["Pseudoniem"], row["code5_ATC_code"].strip(), clean_text(row["code_text"] or ""))
        for row in _read_csv(path)
    ]


def read_virology_csv(path: Path) -> list[VirologyEntry]:
    return [
        VirologyEntry(row["Pseudoniem"], row["hix_code"].strip(), clean_text(row["valueString"] or ""))
        for row in _read_csv(path)
    ]


def read_records_jsonl(path: Path) -> list[PatientRecord]:
    records = []
    with open(path, encoding="utf-8") as fh:
        for line in fh:
            if not line.strip():
                continue
            obj = json.loads(line)
            if "_meta" in obj:
                continue
            records.append(PatientRecord(str(obj["pseudonym"]), obj["text"], int(obj["label"])))
    return records
