"""From histories to model-ready samples.

A history of r visits expands into every (input subsequence, later label)
pair: for each label position k and each nonempty order-preserving subset
of the earlier records, one sample. Intervals are the bucketed gaps
between consecutive chosen records, with the gap to the label record last
- that final entry is the prediction horizon the network conditions on.

Feature layout (16 dims, fixed):
    0  school_age_group        8  cylinder
    1  gender male slot        9  axis
    2  gender female slot     10  k1
    3  age                    11  k2
    4  correction uncorrected 12  axial_length
    5  correction spectacles  13  myopia flag
    6  uva                    14  myopia degree
    7  sphere                 15  se
"""

from __future__ import annotations

import itertools
import json
import logging
from dataclasses import dataclass
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

from .records import QUARTER_DAYS, EyeHistory, VisionRecord

log = logging.getLogger(__name__)

FEATURE_DIM = 16
SE_INDEX = 15

FEATURE_NAMES = [
    "school_age_group",
    "gender_male",
    "gender_female",
    "age",
    "correction_uncorrected",
    "correction_spectacles",
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

# Sequences longer than this are emitted by augment() but never trained on.
MAX_TRAIN_LENGTH = 4

SPLIT_MODES = ("per_subject", "per_sample")


def encode(record: VisionRecord) -> np.ndarray:
    """Map a validated record to its 16-dimensional feature vector.

    Gender and correction method are one-hot (male = (1,0), female = (0,1);
    uncorrected = (1,0), spectacles = (0,1)); ordered fields stay numeric.
    """
    v = np.empty(FEATURE_DIM, dtype=np.float64)
    v[0] = record.school_age_group
    v[1] = 1.0 if record.gender == 1 else 0.0
    v[2] = 1.0 if record.gender == 0 else 0.0
    v[3] = record.age
    v[4] = 1.0 if record.correction_method == 0 else 0.0
    v[5] = 1.0 if record.correction_method == 1 else 0.0
    v[6] = record.uva
    v[7] = record.sphere
    v[8] = record.cylinder
    v[9] = record.axis
    v[10] = record.k1
    v[11] = record.k2
    v[12] = record.axial_length
    v[13] = record.myopia
    v[14] = record.degree
    v[15] = record.se
    return v


@dataclass
class Standardizer:
    """Per-dimension (x - mean) / std, fitted on training inputs only.

    Zero-variance dimensions are flagged and passed through unscaled
    (std treated as 1). The SE dimension's statistics also standardize
    labels and un-standardize predictions.
    """

    mean: np.ndarray
    std: np.ndarray
    zero_variance: np.ndarray

    def transform(self, x: np.ndarray) -> np.ndarray:
        x = np.asarray(x, dtype=np.float64)
        if x.shape[-1] != self.mean.shape[0]:
            raise ValueError(
                f"dimension mismatch: vector has {x.shape[-1]}, "
                f"standardizer has {self.mean.shape[0]}"
            )
        return (x - self.mean) / self.std

    def inverse(self, x: np.ndarray) -> np.ndarray:
        x = np.asarray(x, dtype=np.float64)
        if x.shape[-1] != self.mean.shape[0]:
            raise ValueError("dimension mismatch")
        return x * self.std + self.mean

    def se_to_standard(self, se):
        return (np.asarray(se, dtype=np.float64) - self.mean[SE_INDEX]) / self.std[
            SE_INDEX
        ]

    def se_from_standard(self, value):
        return np.asarray(value, dtype=np.float64) * self.std[SE_INDEX] + self.mean[
            SE_INDEX
        ]

    def save(self, path: str | Path) -> None:
        with open(path, "w", encoding="utf-8") as handle:
            handle.write("myoprog standardizer v1\n")
            handle.write("names " + " ".join(FEATURE_NAMES[: len(self.mean)]) + "\n")
            handle.write("mean " + " ".join(repr(float(v)) for v in self.mean) + "\n")
            handle.write("std " + " ".join(repr(float(v)) for v in self.std) + "\n")
            handle.write(
                "zero_variance "
                + " ".join(str(int(v)) for v in self.zero_variance)
                + "\n"
            )

    @classmethod
    def load(cls, path: str | Path) -> "Standardizer":
        with open(path, encoding="utf-8") as handle:
            lines = handle.read().splitlines()
        if not lines or lines[0] != "myoprog standardizer v1":
            raise ValueError(f"{path}: not a standardizer file")
        fields = {}
        for line in lines[1:]:
            if not line.strip():
                continue
            key, _, rest = line.partition(" ")
            fields[key] = rest.split()
        return cls(
            mean=np.array([float(v) for v in fields["mean"]]),
            std=np.array([float(v) for v in fields["std"]]),
            zero_variance=np.array([bool(int(v)) for v in fields["zero_variance"]]),
        )


def fit_standardizer(vectors: np.ndarray | Iterable[np.ndarray]) -> Standardizer:
    """Fit means and population standard deviations per dimension.

    Dimensions whose variance is (numerically) zero are flagged and left
    unscaled so constant features survive the transform unchanged.
    """
    matrix = np.asarray(
        vectors if isinstance(vectors, np.ndarray) else np.stack(list(vectors)),
        dtype=np.float64,
    )
    if matrix.ndim != 2 or matrix.shape[0] == 0:
        raise ValueError("need a nonempty (n, dim) training matrix")
    mean = matrix.mean(axis=0)
    std = matrix.std(axis=0)  # population (ddof=0)
    zero_variance = std < 1e-12 * np.maximum(1.0, np.abs(mean))
    if zero_variance.any():
        flagged = [FEATURE_NAMES[i] if i < len(FEATURE_NAMES) else str(i)
                   for i in np.flatnonzero(zero_variance)]
        log.debug("zero-variance dimensions passed through: %s", ", ".join(flagged))
    std = np.where(zero_variance, 1.0, std)
    return Standardizer(mean=mean, std=std, zero_variance=zero_variance)


@dataclass(frozen=True)
class Sample:
    """One training/evaluation unit from an eye history.

    `inputs` holds the raw (unstandardized) feature vectors of the chosen
    records as a (T, 16) matrix. `intervals` has T entries: the bucketed
    quarter gaps between consecutive chosen records, ending with the gap
    to the label record (the prediction horizon). `label_se` is in raw
    diopters.
    """

    subject_id: str
    eye: str
    inputs: np.ndarray
    intervals: tuple[int, ...]
    label_se: float
    input_indices: tuple[int, ...]  # positions within the source history
    label_index: int

    @property
    def length(self) -> int:
        return len(self.intervals)

    @property
    def horizon(self) -> int:
        return self.intervals[-1]

    @property
    def excluded_from_training(self) -> bool:
        return self.length > MAX_TRAIN_LENGTH


def augment(history: EyeHistory) -> list[Sample]:
    """Expand one history into all (subsequence, later label) samples.

    For every label position k (2..r) and every nonempty order-preserving
    subset of the records before it, emit one sample. A history of r
    records yields exactly 2^r - r - 1 samples, C(r, L+1) of input
    length L. Input subsets need not be contiguous.
    """
    r = len(history.records)
    if r < 2:
        raise ValueError(f"history needs at least 2 records, has {r}")
    encoded = [encode(record) for record in history.records]
    days = [record.check_date.toordinal() for record in history.records]

    samples: list[Sample] = []
    for k in range(1, r):
        for size in range(1, k + 1):
            for combo in itertools.combinations(range(k), size):
                chain = combo + (k,)
                intervals = tuple(
                    (days[chain[j + 1]] - days[chain[j]]) // QUARTER_DAYS + 1
                    for j in range(size)
                )
                samples.append(
                    Sample(
                        subject_id=history.subject_id,
                        eye=history.eye,
                        inputs=np.stack([encoded[i] for i in combo]),
                        intervals=intervals,
                        label_se=history.records[k].se,
                        input_indices=combo,
                        label_index=k,
                    )
                )
    return samples


@dataclass
class LayerSplit:
    train: list[Sample]
    test: list[Sample]


@dataclass
class SplitDataset:
    """Samples layered by input length (1..4), each layer split train/test.

    Samples longer than MAX_TRAIN_LENGTH are kept in `excluded` and never
    reach training or evaluation.
    """

    layers: dict[int, LayerSplit]
    excluded: list[Sample]

    def train_samples(self) -> list[Sample]:
        return [s for layer in self.layers.values() for s in layer.train]

    def test_samples(self) -> list[Sample]:
        return [s for layer in self.layers.values() for s in layer.test]


def split(
    samples: Sequence[Sample],
    ratio: float = 0.8,
    seed: int = 0,
    mode: str = "per_subject",
) -> SplitDataset:
    """Layer samples by input length and split each layer ~ratio/(1-ratio).

    per_sample: each layer is shuffled and cut independently, giving an
    exact 80/20 within every layer (to one sample).
    per_subject (default): whole subjects land on one side in all layers,
    so overlapping subsequences of one adolescent never straddle the
    split; layer ratios then hold only approximately.
    """
    if not 0.0 < ratio < 1.0:
        raise ValueError(f"ratio must be in (0,1), got {ratio}")
    if mode not in SPLIT_MODES:
        raise ValueError(f"mode must be one of {SPLIT_MODES}, got {mode!r}")

    eligible = [s for s in samples if not s.excluded_from_training]
    excluded = [s for s in samples if s.excluded_from_training]
    by_length: dict[int, list[Sample]] = {}
    for sample in eligible:
        by_length.setdefault(sample.length, []).append(sample)

    rng = np.random.default_rng(seed)
    layers: dict[int, LayerSplit] = {}

    if mode == "per_sample":
        for length in sorted(by_length):
            members = by_length[length]
            n = len(members)
            if n == 0:
                log.warning("layer %d is empty, skipping", length)
                continue
            n_train = int(round(n * ratio))
            order = rng.permutation(n)
            test_idx = set(order[n_train:].tolist())
            layers[length] = LayerSplit(
                train=[s for i, s in enumerate(members) if i not in test_idx],
                test=[s for i, s in enumerate(members) if i in test_idx],
            )
        return SplitDataset(layers=layers, excluded=excluded)

    # per_subject: seeded shuffle of subjects, then fill the test quota
    # subject by subject so both eyes and every subsequence of a subject
    # stay together.
    subjects = sorted({s.subject_id for s in eligible})
    order = rng.permutation(len(subjects))
    per_subject_counts = {subject: 0 for subject in subjects}
    for sample in eligible:
        per_subject_counts[sample.subject_id] += 1
    quota = (1.0 - ratio) * len(eligible)
    test_subjects: set[str] = set()
    taken = 0
    for position in order:
        if taken >= quota:
            break
        subject = subjects[position]
        test_subjects.add(subject)
        taken += per_subject_counts[subject]
    for length in sorted(by_length):
        members = by_length[length]
        if not members:
            log.warning("layer %d is empty, skipping", length)
            continue
        layers[length] = LayerSplit(
            train=[s for s in members if s.subject_id not in test_subjects],
            test=[s for s in members if s.subject_id in test_subjects],
        )
    return SplitDataset(layers=layers, excluded=excluded)


def training_matrix(dataset: SplitDataset) -> np.ndarray:
    """Stack every input vector of every training sample: the matrix the
    standardizer is fitted on."""
    blocks = [s.inputs for layer in dataset.layers.values() for s in layer.train]
    if not blocks:
        raise ValueError("dataset has no training samples")
    return np.concatenate(blocks, axis=0)


# -- sample dump format ------------------------------------------------------
#
# One sample per line as self-describing JSON: provenance, the raw T x 16
# input matrix, the interval list, the raw label, and (when the file was
# written after splitting) which side of the split the sample landed on.


def dump_samples(
    path: str | Path,
    samples: Sequence[Sample],
    dataset: SplitDataset | None = None,
) -> None:
    side_of: dict[int, str] = {}
    if dataset is not None:
        for layer in dataset.layers.values():
            for s in layer.train:
                side_of[id(s)] = "train"
            for s in layer.test:
                side_of[id(s)] = "test"
        for s in dataset.excluded:
            side_of[id(s)] = "excluded"
    with open(path, "w", encoding="utf-8") as handle:
        for sample in samples:
            entry = {
                "subject_id": sample.subject_id,
                "eye": sample.eye,
                "record_indices": list(sample.input_indices),
                "label_index": sample.label_index,
                "inputs": [[float(v) for v in row] for row in sample.inputs],
                "intervals": list(sample.intervals),
                "label_se": float(sample.label_se),
            }
            if dataset is not None:
                entry["split"] = side_of.get(id(sample), "excluded")
            handle.write(json.dumps(entry) + "\n")


def load_samples(path: str | Path) -> tuple[list[Sample], list[str | None]]:
    """Read a sample dump; returns (samples, split side per sample)."""
    samples: list[Sample] = []
    sides: list[str | None] = []
    with open(path, encoding="utf-8") as handle:
        for line_number, line in enumerate(handle, 1):
            if not line.strip():
                continue
            try:
                entry = json.loads(line)
                sample = Sample(
                    subject_id=entry["subject_id"],
                    eye=entry["eye"],
                    inputs=np.array(entry["inputs"], dtype=np.float64),
                    intervals=tuple(int(v) for v in entry["intervals"]),
                    label_se=float(entry["label_se"]),
                    input_indices=tuple(int(v) for v in entry["record_indices"]),
                    label_index=int(entry["label_index"]),
                )
            except (KeyError, ValueError, TypeError) as exc:
                raise ValueError(f"{path}:{line_number}: bad sample line ({exc})")
            if sample.inputs.ndim != 2 or sample.inputs.shape[0] != sample.length:
                raise ValueError(
                    f"{path}:{line_number}: inputs/intervals shape mismatch"
                )
            samples.append(sample)
            sides.append(entry.get("split"))
    return samples, sides


def dataset_from_sides(
    samples: Sequence[Sample], sides: Sequence[str | None]
) -> SplitDataset:
    """Rebuild a SplitDataset from dumped samples and their split sides."""
    layers: dict[int, LayerSplit] = {}
    excluded: list[Sample] = []
    for sample, side in zip(samples, sides):
        if side is None:
            raise ValueError("sample dump carries no split information")
        if side == "excluded" or sample.excluded_from_training:
            excluded.append(sample)
            continue
        layer = layers.setdefault(sample.length, LayerSplit(train=[], test=[]))
        if side == "train":
            layer.train.append(sample)
        elif side == "test":
            layer.test.append(sample)
        else:
            raise ValueError(f"unknown split side {side!r}")
    return SplitDataset(layers=layers, excluded=excluded)
