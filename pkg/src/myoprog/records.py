"""Ingestion and validation of vision-screening records.

One row of the input CSV is one screening visit for one eye. Rows are
validated field by field, grouped into per-eye chronological histories,
and anything that cannot be used downstream is reported with its source
row number instead of being silently dropped.

CSV schema (header required, column order free, UTF-8, comma-delimited):
    subject_id,eye,check_date,school_age_group,gender,age,correction_method,
    uva,sphere,cylinder,axis,k1,k2,axial_length,myopia,degree,se
with check_date as ISO `YYYY-MM-DD` and eye as `L`/`R`.
"""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass
from datetime import date
from pathlib import Path
from typing import Iterable, TextIO

# One quarter, in days, for interval bucketing.
QUARTER_DAYS = 91

# Lens steps are 0.25 D; allow half a step of disagreement between the
# reported SE and sphere + cylinder/2.
SE_TOLERANCE = 0.13

# Observed ranges for the continuous fields. Violations are warnings,
# not rejections: these are statistics of screening data, not physical
# limits.
SOFT_RANGES = {
    "uva": (4.0, 5.3),
    "sphere": (-11.25, 8.75),
    "cylinder": (-6.75, 0.0),
    "k1": (37.05, 48.63),
    "k2": (37.58, 50.0),
    "axial_length": (18.59, 29.86),
    "se": (-12.63, 8.25),
}

AGE_RANGE = (6, 20)

DEGREE_LABELS = {0: "none", 1: "low", 2: "moderate", 3: "high"}

CSV_COLUMNS = [
    "subject_id",
    "eye",
    "check_date",
    "school_age_group",
    "gender",
    "age",
    "correction_method",
    "uva",
    "sphere",
    "cylinder",
    "axis",
    "k1",
    "k2",
    "axial_length",
    "myopia",
    "degree",
    "se",
]


class SchemaError(ValueError):
    """The input stream does not match the documented CSV schema."""


@dataclass(frozen=True)
class VisionRecord:
    """One screening visit for one eye."""

    subject_id: str
    eye: str  # "L" or "R"
    check_date: date
    school_age_group: int  # 1 elementary, 2 middle, 3 high
    gender: int  # 0 female, 1 male
    age: int  # years, 6..20
    correction_method: int  # 0 uncorrected, 1 spectacles
    uva: float  # uncorrected visual acuity, log chart units
    sphere: float  # diopters
    cylinder: float  # diopters, <= 0
    axis: float  # degrees, 0..180
    k1: float  # flat corneal curvature, diopters
    k2: float  # steep corneal curvature, diopters
    axial_length: float  # millimeters
    myopia: int  # 0/1
    degree: int  # 0 none, 1 low, 2 moderate, 3 high
    se: float  # spherical equivalent, diopters


@dataclass(frozen=True)
class EyeHistory:
    """Chronologically sorted visits of one eye of one subject."""

    subject_id: str
    eye: str
    records: tuple[VisionRecord, ...]

    def __len__(self) -> int:
        return len(self.records)


@dataclass(frozen=True)
class ReportEntry:
    row: int
    reason: str


@dataclass
class ParseResult:
    records: list[VisionRecord]
    row_numbers: list[int]  # source CSV row of each record (header = row 1)
    errors: list[ReportEntry]
    warnings: list[ReportEntry]


@dataclass
class GroupResult:
    histories: list[EyeHistory]
    skipped: list[ReportEntry]  # eyes with < 2 usable records
    warnings: list[ReportEntry]  # e.g. duplicate same-day records


def classify_myopia(se: float) -> int:
    """Grade an SE value: 0 none, 1 low, 2 moderate, 3 high.

    Boundary values belong to the more myopic class: -0.5 is low,
    -3.0 is moderate, -6.0 is high.
    """
    if not math.isfinite(se):
        raise ValueError(f"se must be finite, got {se!r}")
    if se <= -6.0:
        return 3
    if se <= -3.0:
        return 2
    if se <= -0.5:
        return 1
    return 0


def compute_se(sphere: float, cylinder: float) -> float:
    """Spherical equivalent from lens powers: sphere + cylinder / 2."""
    return sphere + cylinder / 2.0


def compute_interval(date_earlier: date, date_later: date) -> int:
    """Bucketed elapsed time in quarters: bucket i covers [i-1, i) quarters.

    Same-day pairs give 1. Raises ValueError if dates are out of order.
    """
    days = (date_later - date_earlier).days
    if days < 0:
        raise ValueError(
            f"date_later {date_later} precedes date_earlier {date_earlier}"
        )
    return days // QUARTER_DAYS + 1


def _parse_int(raw: str) -> int:
    try:
        return int(raw)
    except ValueError:
        value = float(raw)
        if not value.is_integer():
            raise ValueError(f"not an integer: {raw!r}")
        return int(value)


def _parse_float(raw: str) -> float:
    value = float(raw)
    if not math.isfinite(value):
        raise ValueError(f"not finite: {raw!r}")
    return value


def _parse_row(row: dict[str, str]) -> tuple[VisionRecord, list[str]]:
    """Build one record; returns (record, soft_warnings). Raises ValueError."""
    for column in CSV_COLUMNS:
        if row.get(column) is None or row[column].strip() == "":
            raise ValueError(f"missing value for {column}")

    subject_id = row["subject_id"].strip()
    eye = row["eye"].strip().upper()
    if eye not in ("L", "R"):
        raise ValueError(f"eye must be L or R, got {row['eye']!r}")
    check_date = date.fromisoformat(row["check_date"].strip())

    school_age_group = _parse_int(row["school_age_group"])
    if school_age_group not in (1, 2, 3):
        raise ValueError(f"school_age_group out of {{1,2,3}}: {school_age_group}")
    gender = _parse_int(row["gender"])
    if gender not in (0, 1):
        raise ValueError(f"gender out of {{0,1}}: {gender}")
    age = _parse_int(row["age"])
    if not AGE_RANGE[0] <= age <= AGE_RANGE[1]:
        raise ValueError(f"age out of [{AGE_RANGE[0]},{AGE_RANGE[1]}]: {age}")
    correction_method = _parse_int(row["correction_method"])
    if correction_method not in (0, 1):
        raise ValueError(f"correction_method out of {{0,1}}: {correction_method}")

    uva = _parse_float(row["uva"])
    sphere = _parse_float(row["sphere"])
    cylinder = _parse_float(row["cylinder"])
    if cylinder > 0:
        raise ValueError(f"cylinder must be <= 0: {cylinder}")
    axis = _parse_float(row["axis"])
    if not 0.0 <= axis <= 180.0:
        raise ValueError(f"axis out of [0,180]: {axis}")
    k1 = _parse_float(row["k1"])
    k2 = _parse_float(row["k2"])
    axial_length = _parse_float(row["axial_length"])

    myopia = _parse_int(row["myopia"])
    if myopia not in (0, 1):
        raise ValueError(f"myopia out of {{0,1}}: {myopia}")
    degree = _parse_int(row["degree"])
    if degree not in (0, 1, 2, 3):
        raise ValueError(f"degree out of {{0,1,2,3}}: {degree}")
    se = _parse_float(row["se"])

    expected_degree = classify_myopia(se)
    if degree != expected_degree:
        raise ValueError(
            f"degree {degree} inconsistent with se {se} (expected {expected_degree})"
        )
    expected_flag = 1 if se <= -0.5 else 0
    if myopia != expected_flag:
        raise ValueError(
            f"myopia flag {myopia} inconsistent with se {se} (expected {expected_flag})"
        )

    warnings: list[str] = []
    if abs(se - compute_se(sphere, cylinder)) > SE_TOLERANCE:
        warnings.append(
            f"se {se} disagrees with sphere+cylinder/2 = {compute_se(sphere, cylinder):.3f}"
        )
    values = {
        "uva": uva,
        "sphere": sphere,
        "cylinder": cylinder,
        "k1": k1,
        "k2": k2,
        "axial_length": axial_length,
        "se": se,
    }
    for name, (lo, hi) in SOFT_RANGES.items():
        value = values[name]
        if not lo <= value <= hi:
            warnings.append(f"{name} {value} outside observed range [{lo},{hi}]")

    record = VisionRecord(
        subject_id=subject_id,
        eye=eye,
        check_date=check_date,
        school_age_group=school_age_group,
        gender=gender,
        age=age,
        correction_method=correction_method,
        uva=uva,
        sphere=sphere,
        cylinder=cylinder,
        axis=axis,
        k1=k1,
        k2=k2,
        axial_length=axial_length,
        myopia=myopia,
        degree=degree,
        se=se,
    )
    return record, warnings


def parse_records(source: str | Path | TextIO | Iterable[str]) -> ParseResult:
    """Parse a screening CSV into validated records.

    Malformed rows are collected as errors with their row number and do
    not abort the parse unless nothing parses at all. A missing required
    column raises SchemaError immediately.
    """
    if isinstance(source, (str, Path)):
        with open(source, newline="", encoding="utf-8") as handle:
            return parse_records(handle)

    reader = csv.DictReader(source)
    if reader.fieldnames is None:
        raise SchemaError("input has no header row")
    header = [name.strip() for name in reader.fieldnames]
    missing = [column for column in CSV_COLUMNS if column not in header]
    if missing:
        raise SchemaError(f"missing required columns: {', '.join(missing)}")

    result = ParseResult(records=[], row_numbers=[], errors=[], warnings=[])
    row_number = 1  # header
    total = 0
    for raw in reader:
        row_number += 1
        total += 1
        cleaned = {k.strip(): (v if v is not None else "") for k, v in raw.items() if k}
        try:
            record, soft = _parse_row(cleaned)
        except (ValueError, KeyError) as exc:
            result.errors.append(ReportEntry(row_number, str(exc)))
            continue
        result.records.append(record)
        result.row_numbers.append(row_number)
        for reason in soft:
            result.warnings.append(ReportEntry(row_number, reason))
    if total > 0 and not result.records:
        raise SchemaError(f"all {total} rows failed validation")
    return result


def group_histories(
    records: Iterable[VisionRecord],
    row_numbers: Iterable[int] | None = None,
    min_records: int = 2,
) -> GroupResult:
    """Group records by (subject_id, eye) and sort each group by date.

    Duplicate (subject, eye, date) entries keep the first occurrence with
    a warning. Groups shorter than `min_records` go to the skip report.
    Every input record lands either in a history, the duplicate warnings,
    or the skip report, so counts are conserved.
    """
    records = list(records)
    if row_numbers is None:
        rows = list(range(1, len(records) + 1))
    else:
        rows = list(row_numbers)
        if len(rows) != len(records):
            raise ValueError("row_numbers length does not match records")

    groups: dict[tuple[str, str], list[tuple[VisionRecord, int, int]]] = {}
    for position, (record, row) in enumerate(zip(records, rows)):
        groups.setdefault((record.subject_id, record.eye), []).append(
            (record, row, position)
        )

    result = GroupResult(histories=[], skipped=[], warnings=[])
    for (subject_id, eye), members in sorted(groups.items()):
        members.sort(key=lambda item: (item[0].check_date, item[2]))
        kept: list[tuple[VisionRecord, int, int]] = []
        for member in members:
            if kept and member[0].check_date == kept[-1][0].check_date:
                result.warnings.append(
                    ReportEntry(
                        member[1],
                        f"duplicate visit for {subject_id}/{eye} on "
                        f"{member[0].check_date}, keeping first",
                    )
                )
                continue
            kept.append(member)
        if len(kept) < min_records:
            result.skipped.append(
                ReportEntry(
                    kept[0][1],
                    f"{subject_id}/{eye} has {len(kept)} usable record(s), "
                    f"need at least {min_records}",
                )
            )
            continue
        result.histories.append(
            EyeHistory(subject_id, eye, tuple(item[0] for item in kept))
        )
    return result


def write_records_csv(records: Iterable[VisionRecord], path: str | Path) -> None:
    """Write records in the documented CSV schema. Floats use repr so the
    file round-trips value-exactly."""
    with open(path, "w", newline="", encoding="utf-8") as handle:
        writer = csv.writer(handle)
        writer.writerow(CSV_COLUMNS)
        for r in records:
            writer.writerow(
                [
                    r.subject_id,
                    r.eye,
                    r.check_date.isoformat(),
                    r.school_age_group,
                    r.gender,
                    r.age,
                    r.correction_method,
                    repr(float(r.uva)),
                    repr(float(r.sphere)),
                    repr(float(r.cylinder)),
                    repr(float(r.axis)),
                    repr(float(r.k1)),
                    repr(float(r.k2)),
                    repr(float(r.axial_length)),
                    r.myopia,
                    r.degree,
                    repr(float(r.se)),
                ]
            )


def write_report_csv(entries: Iterable[ReportEntry], path: str | Path) -> None:
    """Write a skip/warning report as `row,reason` CSV."""
    with open(path, "w", newline="", encoding="utf-8") as handle:
        writer = csv.writer(handle)
        writer.writerow(["row", "reason"])
        for entry in entries:
            writer.writerow([entry.row, entry.reason])
