"""Seeded synthetic screening cohorts with irregular visit schedules.

The trajectory parameters are test fixtures, not epidemiology: they are
tuned only so the marginals of a generated cohort resemble real screening
data closely enough to exercise the full pipeline. SE follows a per-eye
random walk

    se[t+1] = se[t] - rate(age) * gap_quarters + noise,
    noise ~ Normal(0, noise_sd^2 * gap_quarters),

a drift-plus-diffusion process: uncertainty accumulates with elapsed
time, so predictions over longer horizons are intrinsically harder. The
progression rate is frozen at the subject's baseline age,
rate(age) = max(0, r0 * (age_max - age) / age_span) diopters per quarter.
Axial length is co-generated so elongation mirrors SE drift
(al[t+1] = al[t] - d_se / 2.5), and the myopia flag and degree are always
derived from the emitted SE, so generated records pass ingestion
validation by construction.

Seeds derive per entity from (seed, stream, index), so generation order
never affects the output and equal seeds give byte-identical CSVs.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from datetime import date, timedelta

import numpy as np

from .records import classify_myopia, SOFT_RANGES, VisionRecord

# Eye counts by visit count for the reference screening cohort mix
# (75,172 eyes total). reference_composition() scales these.
REFERENCE_EYE_COUNTS = {2: 27015, 3: 18732, 4: 25109, 5: 4314, 6: 2}

COHORT_START = date(2020, 1, 1)

VISIT_COUNT_RANGE = (2, 6)


class SpecError(ValueError):
    pass


def _default_counts() -> dict[int, int]:
    # ~200-eye cohort with the reference proportions.
    return reference_composition(200 / sum(REFERENCE_EYE_COUNTS.values())).eyes_per_visit_count


@dataclass
class CohortSpec:
    """What to generate; every field has a usable default."""

    eyes_per_visit_count: dict[int, int] = field(default_factory=_default_counts)
    first_visit_window_days: int = 180
    gap_days: tuple[int, int] = (60, 400)
    age_range: tuple[int, int] = (6, 20)
    baseline_se_intercept: float = 0.5  # SE mean at age 6
    baseline_se_age_slope: float = -0.25  # per year of baseline age
    baseline_se_sd: float = 1.0
    rate_per_quarter: float = 0.08  # r0: D/quarter at the youngest age
    rate_age_max: float = 16.0  # rate reaches 0 here
    rate_age_span: float = 10.0
    noise_sd: float = 0.1  # SE diffusion, diopters per sqrt(quarter)
    seed: int = 0

    @property
    def n_eyes(self) -> int:
        return sum(self.eyes_per_visit_count.values())

    @property
    def n_subjects(self) -> int:
        return (self.n_eyes + 1) // 2  # two eyes per subject, last may be single

    def validate(self) -> None:
        if not self.eyes_per_visit_count or self.n_eyes <= 0:
            raise SpecError("cohort needs at least one eye")
        for visits, count in self.eyes_per_visit_count.items():
            if not VISIT_COUNT_RANGE[0] <= visits <= VISIT_COUNT_RANGE[1]:
                raise SpecError(
                    f"visit counts must lie in {VISIT_COUNT_RANGE}, got {visits}"
                )
            if count < 0:
                raise SpecError(f"negative eye count for {visits} visits")
        if self.gap_days[0] < 1 or self.gap_days[1] < self.gap_days[0]:
            raise SpecError(f"bad gap range {self.gap_days}")
        if not (6 <= self.age_range[0] <= self.age_range[1] <= 20):
            raise SpecError(f"age range must sit inside [6, 20], got {self.age_range}")
        if self.noise_sd < 0:
            raise SpecError("noise_sd must be >= 0")
        if self.first_visit_window_days < 0:
            raise SpecError("first_visit_window_days must be >= 0")
        if self.rate_age_span <= 0:
            raise SpecError("rate_age_span must be > 0")


def reference_composition(scale: float) -> CohortSpec:
    """Cohort spec whose per-visit-count eye counts are the reference mix
    scaled by `scale` (rounded up per class, so any positive scale keeps
    every class represented). scale = 1 reproduces the mix exactly."""
    if not 0.0 < scale <= 1.0:
        raise SpecError(f"scale must be in (0, 1], got {scale}")
    counts = {
        visits: math.ceil(scale * count)
        for visits, count in REFERENCE_EYE_COUNTS.items()
    }
    return CohortSpec(eyes_per_visit_count=counts)


def progression_rate(spec: CohortSpec, age: float) -> float:
    """Quarterly SE drop for a subject of the given (baseline) age."""
    return max(
        0.0,
        spec.rate_per_quarter * (spec.rate_age_max - age) / spec.rate_age_span,
    )


def _school_group(age: int) -> int:
    if age <= 11:
        return 1
    if age <= 14:
        return 2
    return 3


def _clip(value: float, bounds: tuple[float, float]) -> float:
    return min(max(value, bounds[0]), bounds[1])


def generate(spec: CohortSpec) -> list[VisionRecord]:
    """Generate the cohort; deterministic in spec.seed."""
    spec.validate()
    seed = spec.seed

    visit_counts: list[int] = []
    for visits in sorted(spec.eyes_per_visit_count):
        visit_counts.extend([visits] * spec.eyes_per_visit_count[visits])
    assign_rng = np.random.default_rng([seed, 1])
    assign_rng.shuffle(visit_counts)

    records: list[VisionRecord] = []
    for eye_index, n_visits in enumerate(visit_counts):
        subject_index = eye_index // 2
        eye = "L" if eye_index % 2 == 0 else "R"
        subject_id = f"S{subject_index:06d}"

        subj_rng = np.random.default_rng([seed, 2, subject_index])
        age0 = int(subj_rng.integers(spec.age_range[0], spec.age_range[1] + 1))
        gender = int(subj_rng.integers(0, 2))

        rng = np.random.default_rng([seed, 3, eye_index])
        first_date = COHORT_START + timedelta(
            days=int(rng.integers(0, spec.first_visit_window_days + 1))
        )
        gaps = [
            int(rng.integers(spec.gap_days[0], spec.gap_days[1] + 1))
            for _ in range(n_visits - 1)
        ]

        se = _clip(
            spec.baseline_se_intercept
            + spec.baseline_se_age_slope * (age0 - 6)
            + spec.baseline_se_sd * rng.standard_normal(),
            SOFT_RANGES["se"],
        )
        rate = progression_rate(spec, age0)
        axial_length = _clip(
            23.99 - (se - (-1.57)) / 2.5 + 0.3 * rng.standard_normal(),
            SOFT_RANGES["axial_length"],
        )
        k1 = _clip(42.54 + 1.36 * rng.standard_normal(), SOFT_RANGES["k1"])
        k2 = _clip(k1 + abs(1.3 + 0.5 * rng.standard_normal()), SOFT_RANGES["k2"])
        cylinder = _clip(-abs(0.5 + 0.4 * rng.standard_normal()), SOFT_RANGES["cylinder"])
        glasses_threshold = rng.uniform(-2.0, -0.5)
        axis = float(rng.uniform(0.0, 180.0))

        visit_date = first_date
        for visit in range(n_visits):
            if visit > 0:
                gap = gaps[visit - 1]
                visit_date = visit_date + timedelta(days=gap)
                quarters = gap / 91.0
                drift = rate * quarters
                noise = (
                    spec.noise_sd * math.sqrt(quarters) * rng.standard_normal()
                    if spec.noise_sd
                    else 0.0
                )
                new_se = se - drift + noise
                axial_length = axial_length - (new_se - se) / 2.5
                se = new_se
            age = min(age0 + int((visit_date - first_date).days / 365.25), 20)
            uva = _clip(
                4.9 + 0.12 * se + 0.08 * rng.standard_normal(), SOFT_RANGES["uva"]
            )
            records.append(
                VisionRecord(
                    subject_id=subject_id,
                    eye=eye,
                    check_date=visit_date,
                    school_age_group=_school_group(age),
                    gender=gender,
                    age=age,
                    correction_method=1 if se <= glasses_threshold else 0,
                    uva=float(uva),
                    sphere=float(se - cylinder / 2.0),
                    cylinder=float(cylinder),
                    axis=float(axis),
                    k1=float(k1),
                    k2=float(k2),
                    axial_length=float(axial_length),
                    myopia=1 if se <= -0.5 else 0,
                    degree=classify_myopia(se),
                    se=float(se),
                )
            )
    return records


def spec_from_kv(kv: dict[str, str]) -> CohortSpec:
    """Build a CohortSpec from flat key = value text.

    `composition = reference` with `scale = X` loads the scaled reference
    mix; alternatively `eyes_2 .. eyes_6` set explicit per-class counts.
    Remaining keys override individual fields."""
    kv = dict(kv)
    composition = kv.pop("composition", None)
    scale = kv.pop("scale", None)
    if composition is not None and composition != "reference":
        raise SpecError(f"unknown composition {composition!r}")
    if composition == "reference":
        spec = reference_composition(float(scale) if scale is not None else 1.0)
    else:
        if scale is not None:
            raise SpecError("scale requires composition = reference")
        spec = CohortSpec()
        counts = {}
        for visits in range(VISIT_COUNT_RANGE[0], VISIT_COUNT_RANGE[1] + 1):
            key = f"eyes_{visits}"
            if key in kv:
                counts[visits] = int(kv.pop(key))
        if counts:
            spec.eyes_per_visit_count = counts

    casts = {
        "first_visit_window_days": int,
        "gap_min_days": int,
        "gap_max_days": int,
        "age_min": int,
        "age_max": int,
        "baseline_se_intercept": float,
        "baseline_se_age_slope": float,
        "baseline_se_sd": float,
        "rate_per_quarter": float,
        "rate_age_max": float,
        "rate_age_span": float,
        "noise_sd": float,
        "seed": int,
    }
    for key, raw in kv.items():
        if key not in casts:
            raise SpecError(f"unknown cohort key {key!r}")
        value = casts[key](raw)
        if key == "gap_min_days":
            spec.gap_days = (value, spec.gap_days[1])
        elif key == "gap_max_days":
            spec.gap_days = (spec.gap_days[0], value)
        elif key == "age_min":
            spec.age_range = (value, spec.age_range[1])
        elif key == "age_max":
            spec.age_range = (spec.age_range[0], value)
        else:
            setattr(spec, key, value)
    spec.validate()
    return spec
