"""EMR ingestion: clinical notes, prescriptions, patients, and cohort assembly.

Notes and prescriptions arrive as JSONL or CSV (UTF-8). Tokenization is
whitespace splitting with edge punctuation stripped; byte spans always
reconstruct the original substring. A cohort restricts each patient's notes
to the treatment follow-up window spanning the first checkpoint-inhibitor
administration through a configurable number of days after the last one.
"""

from __future__ import annotations

import csv
import json
import logging
import re
import unicodedata
from dataclasses import dataclass, field
from datetime import date, timedelta
from pathlib import Path
from typing import Iterable, Iterator, Sequence

from .errors import ConfigError, DataFormatError

log = logging.getLogger(__name__)

DRUG_CLASS_ICI = "ici"
DRUG_CLASS_CORTICOSTEROID = "corticosteroid"
DRUG_CLASS_OTHER = "other"

DEFAULT_ICI_DRUGS = (
    "atezolizumab",
    "avelumab",
    "durvalumab",
    "pembrolizumab",
    "nivolumab",
    "ipilimumab",
)

DEFAULT_CORTICOSTEROIDS = (
    "prednisone",
    "methylprednisolone",
    "hydrocortisone",
    "dexamethasone",
    "budesonide",
)

DEFAULT_REGIMENS = (
    "atezolizumab",
    "avelumab",
    "durvalumab",
    "pembrolizumab",
    "nivolumab",
    "ipilimumab+nivolumab",
)


def default_drug_classes() -> dict[str, str]:
    """Drug name -> drug class table used when a record omits drug_class."""
    table = {name: DRUG_CLASS_ICI for name in DEFAULT_ICI_DRUGS}
    table.update({name: DRUG_CLASS_CORTICOSTEROID for name in DEFAULT_CORTICOSTEROIDS})
    return table


# ---------------------------------------------------------------------------
# Record types
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class ClinicalNote:
    note_id: str
    patient_id: str
    date: date
    source: str
    text: str


@dataclass(frozen=True)
class PrescriptionRecord:
    patient_id: str
    drug_name: str
    drug_class: str
    date: date
    dose_mg_per_kg_day: float | None = None


@dataclass(frozen=True)
class Patient:
    patient_id: str
    regimen: str
    age: float | None = None
    sex: str | None = None
    malignancy: str | None = None


@dataclass(frozen=True)
class Token:
    surface: str
    byte_start: int
    byte_end: int


@dataclass(frozen=True)
class TokenizedNote:
    note: ClinicalNote
    tokens: tuple[Token, ...]


@dataclass(frozen=True)
class FollowupWindow:
    start: date
    end: date


@dataclass
class Cohort:
    """Per-patient view of the EMR restricted to ICI follow-up windows.

    Note lists are date-sorted with ties broken by note_id so every
    downstream stage observes the same deterministic order.
    """

    patients: dict[str, Patient]
    notes_by_patient: dict[str, list[ClinicalNote]]
    prescriptions_by_patient: dict[str, list[PrescriptionRecord]]
    followup: dict[str, FollowupWindow]
    excluded_notes: int = 0
    excluded_patients: tuple[str, ...] = field(default_factory=tuple)

    def patient_ids(self) -> list[str]:
        return sorted(self.patients)

    def iter_notes(self) -> Iterator[tuple[str, ClinicalNote]]:
        """Yield (patient_id, note) in (patient_id, date, note_id) order."""
        for pid in self.patient_ids():
            for note in self.notes_by_patient.get(pid, []):
                yield pid, note

    def ici_administrations(self, patient_id: str) -> list[date]:
        return [
            rx.date
            for rx in self.prescriptions_by_patient.get(patient_id, [])
            if rx.drug_class == DRUG_CLASS_ICI
        ]

    def note_count(self) -> int:
        return sum(len(notes) for notes in self.notes_by_patient.values())


# ---------------------------------------------------------------------------
# Loading
# ---------------------------------------------------------------------------

_NOTE_FIELDS = ("note_id", "patient_id", "date", "source", "text")


def _record_error(path: Path, line_no: int, message: str) -> DataFormatError:
    return DataFormatError(f"{path}: line {line_no}: {message}")


def _parse_date(raw: object, path: Path, line_no: int, fieldname: str) -> date:
    if not isinstance(raw, str):
        raise _record_error(path, line_no, f"field {fieldname!r} must be an ISO-8601 date string")
    try:
        return date.fromisoformat(raw)
    except ValueError as exc:
        raise _record_error(path, line_no, f"field {fieldname!r}: {exc}") from None


def _iter_records(path: Path, fmt: str) -> Iterator[tuple[int, dict]]:
    """Yield (line_no, record) streaming one record at a time."""
    if fmt == "jsonl":
        with path.open("r", encoding="utf-8") as handle:
            for line_no, line in enumerate(handle, start=1):
                if not line.strip():
                    continue
                try:
                    record = json.loads(line)
                except json.JSONDecodeError as exc:
                    raise _record_error(path, line_no, f"invalid JSON ({exc.msg})") from None
                if not isinstance(record, dict):
                    raise _record_error(path, line_no, "record must be a JSON object")
                yield line_no, record
    elif fmt == "csv":
        with path.open("r", encoding="utf-8", newline="") as handle:
            reader = csv.DictReader(handle)
            for line_no, record in enumerate(reader, start=2):
                yield line_no, {k: v for k, v in record.items() if v not in (None, "")}
    else:
        raise ConfigError(f"unknown input format {fmt!r} (expected 'jsonl' or 'csv')")


def load_notes(path: str | Path, fmt: str = "jsonl") -> list[ClinicalNote]:
    """Load clinical notes, preserving input order.

    Raises DataFormatError naming the offending line and field for malformed
    records, and for duplicate note_id values.
    """
    path = Path(path)
    notes: list[ClinicalNote] = []
    seen: set[str] = set()
    for line_no, record in _iter_records(path, fmt):
        for fieldname in _NOTE_FIELDS:
            if fieldname not in record:
                raise _record_error(path, line_no, f"missing field {fieldname!r}")
        note_id = str(record["note_id"])
        if note_id in seen:
            raise _record_error(path, line_no, f"duplicate note_id {note_id!r}")
        seen.add(note_id)
        text = str(record["text"])
        if not text.strip():
            raise _record_error(path, line_no, "field 'text' is empty after whitespace trim")
        notes.append(
            ClinicalNote(
                note_id=note_id,
                patient_id=str(record["patient_id"]),
                date=_parse_date(record["date"], path, line_no, "date"),
                source=str(record["source"]),
                text=text,
            )
        )
    return notes


def load_prescriptions(
    path: str | Path,
    fmt: str = "jsonl",
    drug_classes: dict[str, str] | None = None,
) -> list[PrescriptionRecord]:
    """Load prescription records, inferring drug_class from the drug table when absent."""
    path = Path(path)
    table = default_drug_classes() if drug_classes is None else drug_classes
    ici_names = {name for name, cls in table.items() if cls == DRUG_CLASS_ICI}
    records: list[PrescriptionRecord] = []
    for line_no, record in _iter_records(path, fmt):
        for fieldname in ("patient_id", "drug_name", "date"):
            if fieldname not in record:
                raise _record_error(path, line_no, f"missing field {fieldname!r}")
        drug_name = str(record["drug_name"]).strip().lower()
        drug_class = record.get("drug_class")
        if drug_class is None:
            drug_class = table.get(drug_name, DRUG_CLASS_OTHER)
        drug_class = str(drug_class)
        if drug_class not in (DRUG_CLASS_ICI, DRUG_CLASS_CORTICOSTEROID, DRUG_CLASS_OTHER):
            raise _record_error(path, line_no, f"unknown drug_class {drug_class!r}")
        if drug_class == DRUG_CLASS_ICI and drug_name not in ici_names:
            raise _record_error(
                path, line_no, f"drug_class 'ici' but {drug_name!r} is not a configured ICI name"
            )
        dose_raw = record.get("dose_mg_per_kg_day")
        dose: float | None = None
        if dose_raw not in (None, "", "-"):
            try:
                dose = float(dose_raw)
            except (TypeError, ValueError):
                raise _record_error(
                    path, line_no, f"field 'dose_mg_per_kg_day' is not a number: {dose_raw!r}"
                ) from None
            if dose < 0:
                raise _record_error(path, line_no, "field 'dose_mg_per_kg_day' must be >= 0")
        if drug_class == DRUG_CLASS_CORTICOSTEROID and dose is None:
            raise _record_error(
                path, line_no, "corticosteroid record requires 'dose_mg_per_kg_day'"
            )
        records.append(
            PrescriptionRecord(
                patient_id=str(record["patient_id"]),
                drug_name=drug_name,
                drug_class=drug_class,
                date=_parse_date(record["date"], path, line_no, "date"),
                dose_mg_per_kg_day=dose,
            )
        )
    return records


def load_patients(
    path: str | Path,
    fmt: str = "jsonl",
    regimens: Sequence[str] = DEFAULT_REGIMENS,
) -> list[Patient]:
    """Load patient records; regimen labels are validated against the configured set."""
    path = Path(path)
    allowed = set(regimens)
    patients: list[Patient] = []
    seen: set[str] = set()
    for line_no, record in _iter_records(path, fmt):
        for fieldname in ("patient_id", "regimen"):
            if fieldname not in record:
                raise _record_error(path, line_no, f"missing field {fieldname!r}")
        patient_id = str(record["patient_id"])
        if patient_id in seen:
            raise _record_error(path, line_no, f"duplicate patient_id {patient_id!r}")
        seen.add(patient_id)
        regimen = str(record["regimen"])
        if regimen not in allowed:
            raise _record_error(path, line_no, f"unknown regimen {regimen!r}")
        age = record.get("age")
        patients.append(
            Patient(
                patient_id=patient_id,
                regimen=regimen,
                age=float(age) if age is not None else None,
                sex=record.get("sex"),
                malignancy=record.get("malignancy"),
            )
        )
    return patients


# ---------------------------------------------------------------------------
# Serialization (round-trip counterpart of the loaders)
# ---------------------------------------------------------------------------


def _dump_jsonl(path: Path, records: Iterable[dict]) -> None:
    with path.open("w", encoding="utf-8") as handle:
        for record in records:
            handle.write(json.dumps(record, ensure_ascii=False) + "\n")


def save_notes(notes: Iterable[ClinicalNote], path: str | Path) -> None:
    _dump_jsonl(
        Path(path),
        (
            {
                "note_id": n.note_id,
                "patient_id": n.patient_id,
                "date": n.date.isoformat(),
                "source": n.source,
                "text": n.text,
            }
            for n in notes
        ),
    )


def save_prescriptions(records: Iterable[PrescriptionRecord], path: str | Path) -> None:
    def encode(r: PrescriptionRecord) -> dict:
        out = {
            "patient_id": r.patient_id,
            "drug_name": r.drug_name,
            "drug_class": r.drug_class,
            "date": r.date.isoformat(),
        }
        if r.dose_mg_per_kg_day is not None:
            out["dose_mg_per_kg_day"] = r.dose_mg_per_kg_day
        return out

    _dump_jsonl(Path(path), (encode(r) for r in records))


def save_patients(patients: Iterable[Patient], path: str | Path) -> None:
    def encode(p: Patient) -> dict:
        out: dict = {"patient_id": p.patient_id, "regimen": p.regimen}
        if p.age is not None:
            out["age"] = p.age
        if p.sex is not None:
            out["sex"] = p.sex
        if p.malignancy is not None:
            out["malignancy"] = p.malignancy
        return out

    _dump_jsonl(Path(path), (encode(p) for p in patients))


# ---------------------------------------------------------------------------
# Tokenization
# ---------------------------------------------------------------------------

_TOKEN_RE = re.compile(r"\S+")

# ASCII characters whose Unicode category is punctuation (P*); symbols such
# as $ + < = > ^ ` | ~ are deliberately kept.
_ASCII_PUNCT = frozenset(
    ch for ch in map(chr, range(128)) if unicodedata.category(ch).startswith("P")
)


def _is_punct(ch: str) -> bool:
    if ch in _ASCII_PUNCT:
        return True
    return not ch.isascii() and unicodedata.category(ch).startswith("P")


def tokenize_text(text: str) -> tuple[Token, ...]:
    """Split on Unicode whitespace, strip edge punctuation, keep byte spans.

    Byte offsets index the UTF-8 encoding of the input; each token's span
    covers exactly its stripped core, so the surface can be reconstructed
    from the raw bytes. Tokens that are entirely punctuation are dropped.
    """
    tokens: list[Token] = []
    ascii_text = text.isascii()
    char_pos = 0
    byte_pos = 0
    for match in _TOKEN_RE.finditer(text):
        raw = match.group()
        start = match.start()
        lo, hi = 0, len(raw)
        while lo < hi and _is_punct(raw[lo]):
            lo += 1
        while hi > lo and _is_punct(raw[hi - 1]):
            hi -= 1
        if ascii_text:
            if lo < hi:
                tokens.append(Token(raw[lo:hi], start + lo, start + hi))
            continue
        byte_pos += len(text[char_pos:start].encode("utf-8"))
        char_pos = match.end()
        raw_bytes = len(raw.encode("utf-8"))
        if lo < hi:
            byte_start = byte_pos + len(raw[:lo].encode("utf-8"))
            byte_end = byte_start + len(raw[lo:hi].encode("utf-8"))
            tokens.append(Token(raw[lo:hi], byte_start, byte_end))
        byte_pos += raw_bytes
    return tuple(tokens)


def tokenize(note: ClinicalNote) -> TokenizedNote:
    return TokenizedNote(note=note, tokens=tokenize_text(note.text))


# ---------------------------------------------------------------------------
# Cohort assembly
# ---------------------------------------------------------------------------


def build_cohort(
    patients: Sequence[Patient],
    notes: Sequence[ClinicalNote],
    prescriptions: Sequence[PrescriptionRecord],
    followup_days: int = 90,
    boundary_inclusive: bool = True,
) -> Cohort:
    """Group records per patient and restrict notes to the follow-up window.

    The window runs from the first ICI administration through
    ``followup_days`` after the last one, both endpoints included by
    default. Patients without any ICI administration are excluded with a
    warning since no window is definable for them.
    """
    if followup_days < 0:
        raise ConfigError("followup_days must be >= 0")
    known = {p.patient_id for p in patients}
    unknown_note_patients = sorted({n.patient_id for n in notes} - known)
    unknown_rx_patients = sorted({r.patient_id for r in prescriptions} - known)
    if unknown_note_patients or unknown_rx_patients:
        offenders = ", ".join(unknown_note_patients + unknown_rx_patients)
        raise DataFormatError(f"records reference unknown patients: {offenders}")

    rx_by_patient: dict[str, list[PrescriptionRecord]] = {p.patient_id: [] for p in patients}
    for rx in prescriptions:
        rx_by_patient[rx.patient_id].append(rx)
    for rx_list in rx_by_patient.values():
        rx_list.sort(key=lambda r: (r.date, r.drug_name))

    followup: dict[str, FollowupWindow] = {}
    excluded_patients: list[str] = []
    kept_patients: dict[str, Patient] = {}
    for patient in patients:
        ici_dates = [
            rx.date
            for rx in rx_by_patient[patient.patient_id]
            if rx.drug_class == DRUG_CLASS_ICI
        ]
        if not ici_dates:
            excluded_patients.append(patient.patient_id)
            continue
        start = min(ici_dates)
        end = max(ici_dates) + timedelta(days=followup_days)
        followup[patient.patient_id] = FollowupWindow(start=start, end=end)
        kept_patients[patient.patient_id] = patient
    if excluded_patients:
        log.warning(
            "excluded %d patient(s) without ICI administrations: %s",
            len(excluded_patients),
            ", ".join(sorted(excluded_patients)[:10]),
        )

    notes_by_patient: dict[str, list[ClinicalNote]] = {pid: [] for pid in kept_patients}
    excluded_notes = 0
    for note in notes:
        window = followup.get(note.patient_id)
        if window is None:
            excluded_notes += 1
            continue
        if boundary_inclusive:
            in_window = window.start <= note.date <= window.end
        else:
            in_window = window.start < note.date < window.end
        if in_window:
            notes_by_patient[note.patient_id].append(note)
        else:
            excluded_notes += 1
    for note_list in notes_by_patient.values():
        note_list.sort(key=lambda n: (n.date, n.note_id))

    return Cohort(
        patients=kept_patients,
        notes_by_patient=notes_by_patient,
        prescriptions_by_patient={pid: rx_by_patient[pid] for pid in kept_patients},
        followup=followup,
        excluded_notes=excluded_notes,
        excluded_patients=tuple(sorted(excluded_patients)),
    )
