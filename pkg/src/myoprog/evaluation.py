"""Mean absolute error in diopters, stratified by prediction duration and
input sequence length.

Every evaluated sample lands in exactly one cell, keyed by (duration
bucket, sequence length) where the bucket is the sample's final interval
entry - the horizon it was predicted over. Cells report mean +/-
population standard deviation of the absolute errors with the sample
count, and cells under 100 samples carry a small-sample flag. A
prediction within 0.75 D counts as clinically acceptable and the overall
acceptable fraction is reported alongside the table.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Sequence

import numpy as np

from . import tlstm
from .preprocess import Sample, SplitDataset, Standardizer
from .tlstm import DEFAULT_DECAY, TlstmParams

SMALL_SAMPLE_COUNT = 100
CLINICAL_THRESHOLD_D = 0.75


def mae(y: Sequence[float], y_hat: Sequence[float]) -> float:
    """Mean absolute error (1/m) sum |y_i - y_hat_i|."""
    y = np.asarray(y, dtype=np.float64)
    y_hat = np.asarray(y_hat, dtype=np.float64)
    if y.shape != y_hat.shape:
        raise ValueError(f"length mismatch: {y.shape} vs {y_hat.shape}")
    if y.size == 0:
        raise ValueError("mae of empty sequences")
    return float(np.mean(np.abs(y - y_hat)))


@dataclass(frozen=True)
class CellStats:
    mean: float
    std: float  # population standard deviation of absolute errors
    count: int

    @property
    def small_sample(self) -> bool:
        return self.count < SMALL_SAMPLE_COUNT


@dataclass
class StratifiedMetrics:
    """MAE table cells keyed by (duration bucket, sequence length)."""

    cells: dict[tuple[int, int], CellStats]
    overall: CellStats
    acceptable_fraction: float  # |error| <= CLINICAL_THRESHOLD_D

    def durations(self) -> list[int]:
        present = {key[0] for key in self.cells}
        top = max(10, max(present, default=10))
        return list(range(1, top + 1))

    def lengths(self) -> list[int]:
        present = {key[1] for key in self.cells}
        top = max(4, max(present, default=4))
        return list(range(1, top + 1))


def _cell_stats(errors: np.ndarray) -> CellStats:
    return CellStats(
        mean=float(errors.mean()),
        std=float(errors.std()),  # ddof=0
        count=int(errors.size),
    )


def aggregate_errors(
    buckets: Sequence[int],
    lengths: Sequence[int],
    errors: Sequence[float],
) -> StratifiedMetrics:
    """Build the stratified table from per-sample (bucket, length, |error|)."""
    buckets = np.asarray(buckets, dtype=np.int64)
    lengths = np.asarray(lengths, dtype=np.int64)
    errors = np.asarray(errors, dtype=np.float64)
    if not (buckets.shape == lengths.shape == errors.shape) or errors.size == 0:
        raise ValueError("need equal-length nonempty bucket/length/error vectors")
    cells: dict[tuple[int, int], CellStats] = {}
    for key in sorted({(int(b), int(l)) for b, l in zip(buckets, lengths)}):
        mask = (buckets == key[0]) & (lengths == key[1])
        cells[key] = _cell_stats(errors[mask])
    return StratifiedMetrics(
        cells=cells,
        overall=_cell_stats(errors),
        acceptable_fraction=float(np.mean(errors <= CLINICAL_THRESHOLD_D)),
    )


def evaluate(
    dataset: SplitDataset | dict[int, list[Sample]],
    params: TlstmParams,
    standardizer: Standardizer,
    kind: str = DEFAULT_DECAY,
    chunk_size: int = 512,
) -> StratifiedMetrics:
    """Predict every test sample and aggregate absolute errors per cell.

    Pure: identical inputs give identical tables. Raises on an empty
    test set."""
    if isinstance(dataset, SplitDataset):
        test_layers = {
            length: layer.test for length, layer in dataset.layers.items()
        }
    else:
        test_layers = dataset

    buckets: list[int] = []
    sample_lengths: list[int] = []
    all_errors: list[float] = []
    for length in sorted(test_layers):
        samples = test_layers[length]
        if not samples:
            continue
        for start in range(0, len(samples), chunk_size):
            batch = samples[start : start + chunk_size]
            x = np.stack([standardizer.transform(s.inputs) for s in batch])
            deltas = np.array([s.intervals for s in batch], dtype=np.float64)
            predictions = standardizer.se_from_standard(
                tlstm.forward_batch(x, deltas, params, kind)
            )
            labels = np.array([s.label_se for s in batch])
            all_errors.extend(np.abs(predictions - labels).tolist())
            buckets.extend(s.horizon for s in batch)
            sample_lengths.extend(s.length for s in batch)

    if not all_errors:
        raise ValueError("empty test set")
    return aggregate_errors(buckets, sample_lengths, all_errors)


def render_table(metrics: StratifiedMetrics, fmt: str = "markdown") -> str:
    """Render the stratified table.

    markdown: a duration x length grid, cells as `mean +/- std (n)` with a
    `*` prefix on small-sample cells and blanks where no samples fell.
    csv: long form `duration,length,mean,std,count,flag` (full-precision
    floats) plus overall and acceptable-fraction summary rows."""
    if fmt == "csv":
        lines = ["duration,length,mean,std,count,flag"]
        for (duration, length), cell in sorted(metrics.cells.items()):
            lines.append(
                f"{duration},{length},{cell.mean!r},{cell.std!r},"
                f"{cell.count},{int(cell.small_sample)}"
            )
        o = metrics.overall
        lines.append(f"overall,,{o.mean!r},{o.std!r},{o.count},{int(o.small_sample)}")
        lines.append(
            f"within_{CLINICAL_THRESHOLD_D},,{metrics.acceptable_fraction!r},,{o.count},"
        )
        return "\n".join(lines) + "\n"

    if fmt != "markdown":
        raise ValueError(f"unknown format {fmt!r}, expected csv or markdown")

    lengths = metrics.lengths()
    header = "| Duration | " + " | ".join(str(l) for l in lengths) + " |"
    rule = "|---:|" + "|".join("---" for _ in lengths) + "|"
    lines = [header, rule]
    for duration in metrics.durations():
        row = [str(duration)]
        for length in lengths:
            cell = metrics.cells.get((duration, length))
            if cell is None:
                row.append("")
            else:
                flag = "*" if cell.small_sample else ""
                row.append(
                    f"{flag}{cell.mean:.3f} ± {cell.std:.3f} ({cell.count})"
                )
        lines.append("| " + " | ".join(row) + " |")
    o = metrics.overall
    lines.append("")
    lines.append(f"Overall: {o.mean:.3f} ± {o.std:.3f} ({o.count})")
    lines.append(
        f"Within {CLINICAL_THRESHOLD_D} D: {metrics.acceptable_fraction:.1%}"
    )
    return "\n".join(lines) + "\n"
