"""Acceptance suite: one test per criterion, each printing a PASS line
with its measured value (run with -s to see them inline).

The long pole is the noise-floor end-to-end run (shared by criteria 7 and
8); everything else finishes in seconds. Expected wall time for the whole
module is a few minutes single-threaded.
"""

import math
import time
from datetime import date, timedelta

import numpy as np
import pytest
from scipy import stats

from myoprog import cli, evaluation, preprocess, records, synthgen, tlstm
from myoprog.evaluation import aggregate_errors, mae
from myoprog.preprocess import LayerSplit, SplitDataset, augment, fit_standardizer, split
from myoprog.records import group_histories
from myoprog.synthgen import CohortSpec, generate, reference_composition
from myoprog.training import TrainConfig, mse, train


def _make_history(dates, subject="S1", eye="L"):
    from test_preprocess import make_history

    return make_history(dates, subject=subject, eye=eye)


# --------------------------------------------------------------------------
# criterion 1: augmentation exactness at full reference scale


def test_criterion_01_augmentation_exactness():
    started = time.perf_counter()
    spec = reference_composition(1.0)
    spec.seed = 1
    cohort = generate(spec)
    grouped = group_histories(cohort)
    assert len(grouped.histories) == 75172

    total = 0
    by_length: dict[int, int] = {}
    for history in grouped.histories:
        for sample in augment(history):
            total += 1
            by_length[sample.length] = by_length.get(sample.length, 0) + 1

    assert total == 490420
    assert by_length == {1: 277035, 2: 162348, 3: 46709, 4: 4326, 5: 2}
    elapsed = time.perf_counter() - started
    print(
        f"\nPASS criterion 1: 490,420 samples "
        f"(277035/162348/46709/4326/2 by length) in {elapsed:.1f}s"
    )


# --------------------------------------------------------------------------
# criterion 2: the 4-record expansion table, tuple for tuple


def test_criterion_02_four_record_table_fidelity():
    d0 = date(2021, 3, 1)
    dates = [
        d0,
        d0 + timedelta(days=120),  # a-b: bucket 2
        d0 + timedelta(days=250),  # a-c: 3, b-c: 2
        d0 + timedelta(days=460),  # a-d: 6, b-d: 4, c-d: 3
    ]
    history = _make_history(dates)
    samples = augment(history)
    assert len(samples) == 11

    ab, ac, ad = 2, 3, 6
    bc, bd, cd = 2, 4, 3
    expected = {
        ((0,), 1, (ab,)),
        ((0,), 2, (ac,)),
        ((0,), 3, (ad,)),
        ((1,), 2, (bc,)),
        ((1,), 3, (bd,)),
        ((2,), 3, (cd,)),
        ((0, 1), 2, (ab, bc)),
        ((0, 1), 3, (ab, bd)),
        ((0, 2), 3, (ac, cd)),
        ((1, 2), 3, (bc, cd)),
        ((0, 1, 2), 3, (ab, bc, cd)),
    }
    got = {(s.input_indices, s.label_index, s.intervals) for s in samples}
    assert got == expected
    # labels are the SE of the label record, inputs the chosen records
    for s in samples:
        assert s.label_se == history.records[s.label_index].se
        np.testing.assert_array_equal(
            s.inputs, np.stack([preprocess.encode(history.records[i]) for i in s.input_indices])
        )
    print("\nPASS criterion 2: all 11 (input, label, interval) tuples exact")


# --------------------------------------------------------------------------
# criterion 3: gradient correctness over the seed/size/length grid


def test_criterion_03_gradient_correctness():
    started = time.perf_counter()
    worst = tlstm.gradcheck_network(
        n_seeds=10, hidden_dims=(1, 4, 64), lengths=(1, 2, 3, 4), h=1e-5
    )
    elapsed = time.perf_counter() - started
    assert worst < 1e-4
    print(f"\nPASS criterion 3: max relative error {worst:.2e} < 1e-4 in {elapsed:.0f}s")


# --------------------------------------------------------------------------
# criterion 4: decay-free network equals the independent LSTM evaluator


def test_criterion_04_lstm_equivalence_oracle():
    rng = np.random.default_rng(42)
    worst = 0.0
    for draw in range(1000):
        hidden = int(rng.integers(1, 9))
        steps = int(rng.integers(1, 5))
        params = tlstm.random_params(hidden, seed=draw)
        inputs = rng.normal(size=(steps, preprocess.FEATURE_DIM))
        intervals = [int(d) for d in rng.integers(1, 11, size=steps)]
        got = tlstm.forward(inputs, intervals, params, "none")
        want = tlstm.lstm_forward(inputs, params)
        worst = max(worst, abs(got - want))
    assert worst < 1e-12
    print(f"\nPASS criterion 4: 1000 draws, max |difference| {worst:.2e} < 1e-12")


# --------------------------------------------------------------------------
# criterion 5: standardization identities


def test_criterion_05_standardization():
    rng = np.random.default_rng(7)
    worst_mean = worst_var = worst_round = 0.0
    for trial in range(20):
        n = int(rng.integers(10, 400))
        d = int(rng.integers(1, 20))
        matrix = rng.normal(rng.normal(), abs(rng.normal()) + 0.1, size=(n, d))
        s = fit_standardizer(matrix)
        z = s.transform(matrix)
        keep = ~s.zero_variance
        worst_mean = max(worst_mean, np.abs(z.mean(axis=0)[keep]).max())
        worst_var = max(worst_var, np.abs(z.var(axis=0)[keep] - 1.0).max())
        probe = rng.normal(size=(50, d))
        worst_round = max(worst_round, np.abs(s.inverse(s.transform(probe)) - probe).max())
    # and on a pipeline-realistic matrix
    cohort = generate(CohortSpec(eyes_per_visit_count={2: 40, 3: 20}, seed=3))
    grouped = group_histories(cohort)
    matrix = np.stack(
        [preprocess.encode(r) for h in grouped.histories for r in h.records]
    )
    s = fit_standardizer(matrix)
    z = s.transform(matrix)
    keep = ~s.zero_variance
    worst_mean = max(worst_mean, np.abs(z.mean(axis=0)[keep]).max())
    worst_var = max(worst_var, np.abs(z.var(axis=0)[keep] - 1.0).max())

    assert worst_mean < 1e-9
    assert worst_var < 1e-6
    assert worst_round < 1e-12
    print(
        f"\nPASS criterion 5: |mean| {worst_mean:.1e} < 1e-9, "
        f"|var-1| {worst_var:.1e} < 1e-6, round-trip {worst_round:.1e} < 1e-12"
    )


# --------------------------------------------------------------------------
# criterion 6: overfit sanity on 32 samples with default training settings


def test_criterion_06_overfit_sanity():
    started = time.perf_counter()
    spec = CohortSpec(
        eyes_per_visit_count={2: 5, 3: 4, 4: 1}, noise_sd=0.0, seed=11
    )
    cohort = generate(spec)
    grouped = group_histories(cohort)
    samples = [s for h in grouped.histories for s in augment(h)]
    assert len(samples) == 32
    layers: dict[int, LayerSplit] = {}
    for s in samples:
        layers.setdefault(s.length, LayerSplit(train=[], test=[])).train.append(s)
    dataset = SplitDataset(layers=layers, excluded=[])

    config = TrainConfig(seed=3)  # defaults: 1000 epochs, H=64, adam 1e-3
    assert config.epochs == 1000
    result = train(dataset, config)
    trace = result.trace.mse
    tenth = max(1, len(trace) // 10)
    first, last = float(np.mean(trace[:tenth])), float(np.mean(trace[-tenth:]))
    elapsed = time.perf_counter() - started

    assert trace[-1] < 1e-2
    assert last < first
    print(
        f"\nPASS criterion 6: final mse {trace[-1]:.2e} < 1e-2; "
        f"last-10% mean {last:.2e} < first-10% mean {first:.2e}; {elapsed:.0f}s"
    )


# --------------------------------------------------------------------------
# criteria 7 + 8 share one end-to-end noise-floor run


@pytest.fixture(scope="module")
def noise_floor_metrics():
    started = time.perf_counter()
    spec = CohortSpec(
        eyes_per_visit_count={2: 719, 3: 499, 4: 668, 5: 114},  # 2,000 eyes
        noise_sd=0.1,
        seed=7,
    )
    cohort = generate(spec)
    grouped = group_histories(cohort)
    samples = [s for h in grouped.histories for s in augment(h)]
    dataset = split(samples, ratio=0.8, seed=7, mode="per_subject")
    config = TrainConfig(epochs=80, hidden_dim=64, seed=7)
    result = train(dataset, config)
    metrics = evaluation.evaluate(
        dataset, result.params, result.standardizer, config.decay_kind
    )
    return metrics, time.perf_counter() - started


def test_criterion_07_noise_floor_learning(noise_floor_metrics):
    metrics, elapsed = noise_floor_metrics
    assert elapsed < 15 * 60
    assert metrics.overall.mean <= 0.25
    assert metrics.acceptable_fraction >= 0.95
    print(
        f"\nPASS criterion 7: test MAE {metrics.overall.mean:.3f} D <= 0.25; "
        f"{metrics.acceptable_fraction:.1%} within 0.75 D; {elapsed:.0f}s end to end"
    )


def test_criterion_08_error_grows_with_duration(noise_floor_metrics):
    metrics, _ = noise_floor_metrics
    checked = []
    for length in (1, 2, 3, 4):
        cells = [
            (duration, cell.mean)
            for (duration, l), cell in sorted(metrics.cells.items())
            if l == length and cell.count >= 100
        ]
        if len(cells) < 2:
            continue
        rho = stats.spearmanr(
            [d for d, _ in cells], [m for _, m in cells]
        ).statistic
        checked.append((length, rho, len(cells)))
        assert rho > 0, f"length {length}: spearman {rho} with cells {cells}"
    assert checked, "no column had two or more cells with >= 100 samples"
    summary = ", ".join(f"L{l}: rho {r:.2f} over {n} cells" for l, r, n in checked)
    print(f"\nPASS criterion 8: {summary}")


# --------------------------------------------------------------------------
# criterion 9: byte-identical pipeline reruns


def test_criterion_09_pipeline_determinism(tmp_path):
    outputs = []
    for name in ("first", "second"):
        base = tmp_path / name
        base.mkdir()
        spec = base / "spec.txt"
        spec.write_text(
            "eyes_2 = 40\neyes_3 = 25\neyes_4 = 20\nnoise_sd = 0.1\n"
        )
        cohort = base / "cohort.csv"
        assert cli.main(["synth", "--spec", str(spec), "--seed", "21",
                         "--out", str(cohort)]) == 0
        ingested = base / "ingested"
        assert cli.main(["ingest", "--input", str(cohort), "--out", str(ingested)]) == 0
        samples = base / "samples.jsonl"
        assert cli.main([
            "augment", "--histories", str(ingested / "records.csv"),
            "--out", str(samples), "--seed", "21", "--threads", "1",
        ]) == 0
        model = base / "model"
        assert cli.main([
            "train", "--samples", str(samples), "--out", str(model),
            "--epochs", "5", "--hidden", "8", "--seed", "21", "--threads", "1",
        ]) == 0
        metrics = base / "metrics"
        assert cli.main([
            "evaluate", "--samples", str(samples),
            "--model", str(model / "model.txt"),
            "--out", str(metrics), "--threads", "1",
        ]) == 0
        outputs.append(
            {
                "metrics.csv": (metrics / "metrics.csv").read_bytes(),
                "metrics.md": (metrics / "metrics.md").read_bytes(),
                "model.txt": (model / "model.txt").read_bytes(),
                "samples.jsonl": samples.read_bytes(),
                "cohort.csv": cohort.read_bytes(),
            }
        )
    for key in outputs[0]:
        assert outputs[0][key] == outputs[1][key], f"{key} differs between runs"
    print("\nPASS criterion 9: metrics, model, samples, cohort byte-identical")


# --------------------------------------------------------------------------
# criterion 10: metrics against naive reimplementations


def _naive_mean(values):
    total = 0.0
    for v in values:
        total += v
    return total / len(values)


def _naive_mae(y, y_hat):
    return _naive_mean([abs(a - b) for a, b in zip(y, y_hat)])


def _naive_mse(y, y_hat):
    return _naive_mean([(a - b) ** 2 for a, b in zip(y, y_hat)])


def _naive_std(values):
    mu = _naive_mean(values)
    return math.sqrt(_naive_mean([(v - mu) ** 2 for v in values]))


def test_criterion_10_metrics_oracle():
    rng = np.random.default_rng(99)
    worst = 0.0
    for _ in range(1000):
        n = int(rng.integers(1, 40))
        y = rng.normal(size=n)
        y_hat = rng.normal(size=n)
        worst = max(worst, abs(mae(y, y_hat) - _naive_mae(y, y_hat)))
        worst = max(worst, abs(mse(y, y_hat) - _naive_mse(y, y_hat)))
    assert worst < 1e-12

    # stratified aggregation vs a dict-of-lists reimplementation
    worst_cells = 0.0
    for trial in range(50):
        n = int(rng.integers(5, 500))
        buckets = rng.integers(1, 11, size=n)
        lengths = rng.integers(1, 5, size=n)
        errors = np.abs(rng.normal(size=n))
        metrics = aggregate_errors(buckets, lengths, errors)
        naive: dict[tuple[int, int], list[float]] = {}
        for b, l, e in zip(buckets, lengths, errors):
            naive.setdefault((int(b), int(l)), []).append(float(e))
        assert set(metrics.cells) == set(naive)
        for key, values in naive.items():
            cell = metrics.cells[key]
            assert cell.count == len(values)
            worst_cells = max(worst_cells, abs(cell.mean - _naive_mean(values)))
            worst_cells = max(worst_cells, abs(cell.std - _naive_std(values)))
        assert metrics.overall.count == n
        worst_cells = max(
            worst_cells, abs(metrics.overall.mean - _naive_mean(list(errors)))
        )
    assert worst_cells < 1e-12

    # the small-sample flag fires exactly below 100
    for count, flagged in ((99, True), (100, False), (101, False)):
        metrics = aggregate_errors([1] * count, [1] * count, [0.1] * count)
        assert metrics.cells[(1, 1)].small_sample is flagged
    print(
        f"\nPASS criterion 10: mae/mse max |diff| {worst:.1e}, "
        f"stratified cells max |diff| {worst_cells:.1e}, flag fires at < 100"
    )
