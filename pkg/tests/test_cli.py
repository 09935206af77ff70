import json

import numpy as np
import pytest

from myoprog import cli, tlstm
from myoprog.preprocess import fit_standardizer, FEATURE_DIM


def run(argv, capsys):
    code = cli.main(argv)
    captured = capsys.readouterr()
    return code, captured.out, captured.err


@pytest.fixture
def pipeline_dir(tmp_path, capsys):
    """synth -> ingest -> augment at a small scale; returns paths."""
    cohort = tmp_path / "cohort.csv"
    spec = tmp_path / "spec.txt"
    spec.write_text("eyes_2 = 20\neyes_3 = 12\neyes_4 = 8\nnoise_sd = 0.05\n")
    code, out, err = run(
        ["synth", "--spec", str(spec), "--seed", "5", "--out", str(cohort)], capsys
    )
    assert code == 0, err
    ingest_dir = tmp_path / "ingested"
    code, out, err = run(
        ["ingest", "--input", str(cohort), "--out", str(ingest_dir)], capsys
    )
    assert code == 0, err
    samples = tmp_path / "samples.jsonl"
    code, out, err = run(
        [
            "augment",
            "--histories",
            str(ingest_dir / "records.csv"),
            "--out",
            str(samples),
            "--split",
            "per_subject",
            "--seed",
            "5",
        ],
        capsys,
    )
    assert code == 0, err
    return {"cohort": cohort, "ingest": ingest_dir, "samples": samples, "root": tmp_path}


class TestSynthIngestAugment:
    def test_counts_match_closed_form(self, pipeline_dir, tmp_path, capsys):
        # 20 eyes of 2 records, 12 of 3, 8 of 4 expand to
        # 20*1 + 12*4 + 8*11 = 156 samples; per length:
        # L1 = 20 + 12*C(3,2) + 8*C(4,2) = 20 + 36 + 48 = 104
        # L2 = 12*C(3,3) + 8*C(4,3) = 12 + 32 = 44
        # L3 = 8*C(4,4) = 8
        code, out, err = run(
            [
                "augment",
                "--histories",
                str(pipeline_dir["ingest"] / "records.csv"),
                "--out",
                str(tmp_path / "again.jsonl"),
                "--seed",
                "1",
            ],
            capsys,
        )
        assert code == 0
        assert "156 samples" in out
        assert "L1:104" in out
        assert "L2:44" in out
        assert "L3:8" in out

    def test_manifests_written(self, pipeline_dir):
        manifest = json.loads(
            (pipeline_dir["ingest"] / "manifest.json").read_text()
        )
        assert manifest["tool"] == "myoprog"
        assert manifest["subcommand"] == "ingest"
        assert manifest["inputs"]
        sidecar = pipeline_dir["samples"].with_name("samples.jsonl.manifest.json")
        assert sidecar.exists()

    def test_ingest_reports_and_canonical_csv(self, pipeline_dir):
        report = (pipeline_dir["ingest"] / "report.csv").read_text().splitlines()
        assert report[0] == "row,reason"
        records_csv = (pipeline_dir["ingest"] / "records.csv").read_text().splitlines()
        assert records_csv[0].startswith("subject_id,eye,check_date")


class TestTrainEvaluatePredict:
    @pytest.fixture
    def model_dir(self, pipeline_dir, tmp_path, capsys):
        out = tmp_path / "model"
        config = tmp_path / "train.cfg"
        config.write_text("epochs = 4\nhidden_dim = 6\nseed = 3\n# comment\n")
        code, _, err = run(
            [
                "train",
                "--samples",
                str(pipeline_dir["samples"]),
                "--config",
                str(config),
                "--out",
                str(out),
            ],
            capsys,
        )
        assert code == 0, err
        return out

    def test_train_artifacts(self, model_dir):
        assert (model_dir / "model.txt").exists()
        assert (model_dir / "standardizer.txt").exists()
        loss = (model_dir / "loss.csv").read_text().splitlines()
        assert loss[0] == "epoch,mse,seconds"
        assert len(loss) == 5  # header + 4 epochs

    def test_flag_overrides_config(self, pipeline_dir, tmp_path, capsys):
        out = tmp_path / "model2"
        config = tmp_path / "train.cfg"
        config.write_text("epochs = 9\nhidden_dim = 6\n")
        code, _, _ = run(
            [
                "train",
                "--samples",
                str(pipeline_dir["samples"]),
                "--config",
                str(config),
                "--epochs",
                "2",
                "--out",
                str(out),
            ],
            capsys,
        )
        assert code == 0
        assert len((out / "loss.csv").read_text().splitlines()) == 3

    def test_evaluate_writes_metrics(self, pipeline_dir, model_dir, tmp_path, capsys):
        metrics_dir = tmp_path / "metrics"
        code, out, err = run(
            [
                "evaluate",
                "--samples",
                str(pipeline_dir["samples"]),
                "--model",
                str(model_dir / "model.txt"),
                "--out",
                str(metrics_dir),
            ],
            capsys,
        )
        assert code == 0, err
        assert "MAE" in out
        csv_text = (metrics_dir / "metrics.csv").read_text()
        assert csv_text.startswith("duration,length,mean,std,count,flag")
        assert (metrics_dir / "metrics.md").read_text().startswith("| Duration |")

    def test_predict_horizon_sensitivity(self, pipeline_dir, model_dir, tmp_path, capsys):
        history = pipeline_dir["cohort"]
        outs = []
        for horizon in ("2", "6"):
            code, out, _ = run(
                [
                    "predict",
                    "--model",
                    str(model_dir / "model.txt"),
                    "--history",
                    str(history),
                    "--horizon",
                    horizon,
                ],
                capsys,
            )
            assert code == 0
            outs.append(out)

        def parse(text):
            table = {}
            for line in text.splitlines():
                subject, eye, horizon, se, label = line.split(",")
                float(se)
                assert label in ("none", "low", "moderate", "high")
                table[(subject, eye)] = se
            return table

        first, second = parse(outs[0]), parse(outs[1])
        assert first.keys() == second.keys()
        assert any(first[k] != second[k] for k in first)

    def test_gradcheck_ok(self, capsys):
        code, out, _ = run(["gradcheck", "--seeds", "1", "--tolerance", "1e-4"], capsys)
        assert code == 0
        assert "max relative error" in out


class TestExitCodes:
    def test_missing_file(self, tmp_path, capsys):
        code, _, err = run(
            ["ingest", "--input", str(tmp_path / "nope.csv"), "--out", str(tmp_path / "o")],
            capsys,
        )
        assert code == cli.EXIT_MISSING_FILE
        assert "code=3" in err

    def test_schema_error(self, tmp_path, capsys):
        bad = tmp_path / "bad.csv"
        bad.write_text("a,b\n1,2\n")
        code, _, err = run(
            ["ingest", "--input", str(bad), "--out", str(tmp_path / "o")], capsys
        )
        assert code == cli.EXIT_SCHEMA
        assert "code=4" in err

    def test_missing_model(self, tmp_path, capsys):
        samples = tmp_path / "s.jsonl"
        samples.write_text("")
        code, _, err = run(
            [
                "evaluate",
                "--samples",
                str(samples),
                "--model",
                str(tmp_path / "missing.txt"),
                "--out",
                str(tmp_path / "m"),
            ],
            capsys,
        )
        assert code == cli.EXIT_MODEL
        assert "code=5" in err

    def test_model_without_standardizer_is_model_error(self, tmp_path, capsys):
        model = tmp_path / "model.txt"
        params = tlstm.random_params(2, seed=0)
        tlstm.save_checkpoint(model, params, "none")  # no standardizer
        samples = tmp_path / "s.jsonl"
        samples.write_text("")
        code, _, err = run(
            [
                "evaluate",
                "--samples",
                str(samples),
                "--model",
                str(model),
                "--out",
                str(tmp_path / "m"),
            ],
            capsys,
        )
        assert code == cli.EXIT_MODEL

    def test_unknown_flag(self, capsys):
        code = cli.main(["synth", "--bogus", "x", "--out", "y"])
        captured = capsys.readouterr()
        assert code == cli.EXIT_USAGE

    def test_unknown_subcommand(self, capsys):
        assert cli.main(["transmogrify"]) == cli.EXIT_USAGE

    def test_bad_threads(self, tmp_path, capsys):
        code, _, err = run(
            [
                "augment",
                "--histories",
                str(tmp_path / "x.csv"),
                "--out",
                str(tmp_path / "y"),
                "--threads",
                "0",
            ],
            capsys,
        )
        assert code == cli.EXIT_USAGE

    def test_gradcheck_failure_exit_code(self, capsys):
        code, _, err = run(
            ["gradcheck", "--seeds", "1", "--tolerance", "1e-12"], capsys
        )
        assert code == cli.EXIT_NUMERIC
        assert "code=6" in err


class TestDeterminism:
    def test_pipeline_metrics_byte_identical(self, tmp_path, capsys):
        outputs = []
        for run_dir in ("run_a", "run_b"):
            base = tmp_path / run_dir
            base.mkdir()
            cohort = base / "cohort.csv"
            spec = base / "spec.txt"
            spec.write_text("eyes_2 = 14\neyes_3 = 8\neyes_4 = 4\n")
            assert cli.main(["synth", "--spec", str(spec), "--seed", "9",
                             "--out", str(cohort)]) == 0
            ingest_dir = base / "ing"
            assert cli.main(["ingest", "--input", str(cohort), "--out", str(ingest_dir)]) == 0
            samples = base / "samples.jsonl"
            assert cli.main([
                "augment", "--histories", str(ingest_dir / "records.csv"),
                "--out", str(samples), "--seed", "9", "--threads", "1",
            ]) == 0
            model = base / "model"
            assert cli.main([
                "train", "--samples", str(samples), "--out", str(model),
                "--epochs", "3", "--hidden", "4", "--seed", "9", "--threads", "1",
            ]) == 0
            metrics = base / "metrics"
            assert cli.main([
                "evaluate", "--samples", str(samples),
                "--model", str(model / "model.txt"), "--out", str(metrics),
                "--threads", "1",
            ]) == 0
            capsys.readouterr()
            outputs.append(
                {
                    "cohort": cohort.read_bytes(),
                    "samples": samples.read_bytes(),
                    "model": (model / "model.txt").read_bytes(),
                    "metrics": (metrics / "metrics.csv").read_bytes(),
                }
            )
        assert outputs[0]["cohort"] == outputs[1]["cohort"]
        assert outputs[0]["samples"] == outputs[1]["samples"]
        assert outputs[0]["model"] == outputs[1]["model"]
        assert outputs[0]["metrics"] == outputs[1]["metrics"]
