import io
import json
import logging
from types import SimpleNamespace

import numpy as np
import pandas as pd
import pytest

import app
from conftest import REFERENCE_CONFUSION, REFERENCE_PREDICTIONS
from modules.evaluation import parse_report
from modules.neuralnet import ModelArchitecture, build_model, save_model
from modules.signals import FEATURE_COLUMNS, DatasetSpec, StateLabel, encode_pcm, synth_dataset
from modules.stream import encode_message

SMALL = ["--frame-len", "256", "--nominal", "20", "--current", "20", "--defective", "20"]


@pytest.fixture(autouse=True)
def _drop_cli_log_handler():
    yield
    root = logging.getLogger()
    for handler in root.handlers[:]:
        if type(handler) is logging.StreamHandler:
            root.removeHandler(handler)


def _synth(out_dir, *extra):
    return app.main(["synth", "--out-dir", str(out_dir), "--seed", "5", *SMALL, *extra])


@pytest.fixture(scope="module")
def trained_run(tmp_path_factory):
    out_dir = tmp_path_factory.mktemp("run")
    assert _synth(out_dir) == 0
    code = app.main([
        "train", "--dataset", str(out_dir / "dataset.csv"), "--out-dir", str(out_dir),
        "--epochs", "1", "--hidden", "16", "--batch-size", "8", "--seed", "2",
    ])
    assert code == 0
    return out_dir


class TestSynth:
    def test_writes_dataset_and_manifest(self, tmp_path):
        assert _synth(tmp_path) == 0
        df = pd.read_csv(tmp_path / "dataset.csv")
        assert list(df.columns) == FEATURE_COLUMNS + ["label"]
        assert df["label"].value_counts().to_dict() == {"nominal": 20, "current": 20, "defective": 20}
        manifest = json.loads((tmp_path / "manifest.json").read_text())
        assert manifest["written"] == {"nominal": 20, "current": 20, "defective": 20}
        assert manifest["synthesis"]["seed"] == 5

    def test_zero_counts_give_header_only(self, tmp_path):
        code = app.main(["synth", "--out-dir", str(tmp_path), "--nominal", "0", "--current", "0", "--defective", "0"])
        assert code == 0
        assert (tmp_path / "dataset.csv").read_text().splitlines() == [",".join(FEATURE_COLUMNS + ["label"])]

    def test_same_seed_is_byte_identical(self, tmp_path):
        assert _synth(tmp_path / "a") == 0
        assert _synth(tmp_path / "b") == 0
        assert (tmp_path / "a" / "dataset.csv").read_bytes() == (tmp_path / "b" / "dataset.csv").read_bytes()

    def test_frame_len_must_be_power_of_two(self, tmp_path):
        assert app.main(["synth", "--out-dir", str(tmp_path), "--frame-len", "1000"]) == 2


class TestTrain:
    def test_outputs(self, trained_run, capsys):
        history = pd.read_csv(trained_run / "history.csv")
        assert len(history) == 1
        assert (trained_run / "model.json").exists()
        assert len(pd.read_csv(trained_run / "test.csv")) == 12
        log = pd.read_csv(trained_run / "run_log.csv")
        assert "Output: model" in log["action"].tolist()

    def test_config_file_sets_epochs(self, trained_run, tmp_path):
        config = tmp_path / "run.conf"
        config.write_text("epochs = 2\nhidden = 8\nbatch_size = 8\n")
        code = app.main([
            "train", "--config", str(config), "--dataset", str(trained_run / "dataset.csv"), "--out-dir", str(tmp_path),
        ])
        assert code == 0
        assert len(pd.read_csv(tmp_path / "history.csv")) == 2

    def test_eleven_column_dataset(self, tmp_path):
        path = tmp_path / "bad.csv"
        path.write_text(",".join(FEATURE_COLUMNS[:11] + ["label"]) + "\n" + ",".join(["0.1"] * 11 + ["nominal"]) + "\n")
        assert app.main(["train", "--dataset", str(path), "--out-dir", str(tmp_path)]) == 3

    def test_missing_dataset_flag(self, tmp_path, capsys):
        assert app.main(["train", "--out-dir", str(tmp_path)]) == 2
        assert "train finished with exit code 2: 2 events, 1 errors" in capsys.readouterr().err


@pytest.mark.slow
def test_default_dataset_end_to_end(tmp_path, capsys):
    assert app.main(["synth", "--out-dir", str(tmp_path)]) == 0
    code = app.main([
        "train", "--dataset", str(tmp_path / "dataset.csv"), "--out-dir", str(tmp_path),
        "--split", "reference", "--epochs", "20", "--batch-size", "32",
    ])
    assert code == 0
    assert len(pd.read_csv(tmp_path / "history.csv")) == 20
    assert len(pd.read_csv(tmp_path / "test.csv")) == 1475
    capsys.readouterr()
    code = app.main([
        "evaluate", "--model", str(tmp_path / "model.json"), "--test", str(tmp_path / "test.csv"),
        "--out-dir", str(tmp_path),
    ])
    assert code == 0
    accuracy, support = parse_report(capsys.readouterr().out)["accuracy"]
    assert support == 1475
    assert accuracy >= 0.95


class TestEvaluate:
    def test_reference_predictions(self, tmp_path, capsys):
        code = app.main(["evaluate", "--predictions", str(REFERENCE_PREDICTIONS), "--out-dir", str(tmp_path)])
        assert code == 0
        parsed = parse_report(capsys.readouterr().out)
        assert parsed["defective"] == (0.9091, 0.7273, 0.8081, 55)
        assert parsed["macro avg"] == (0.9648, 0.9078, 0.9329, 1475)
        assert parsed["accuracy"] == (0.9871, 1475)
        confusion = pd.read_csv(tmp_path / "confusion.csv", index_col=0)
        assert confusion.values.tolist() == REFERENCE_CONFUSION

    def test_json_report(self, tmp_path, capsys):
        code = app.main([
            "evaluate", "--predictions", str(REFERENCE_PREDICTIONS), "--out-dir", str(tmp_path), "--report-format", "json",
        ])
        assert code == 0
        document = json.loads(capsys.readouterr().out)
        assert document["accuracy"] == pytest.approx(1456 / 1475)
        assert document["nominal"]["support"] == 410

    def test_model_on_test_split(self, trained_run, tmp_path, capsys):
        code = app.main([
            "evaluate", "--model", str(trained_run / "model.json"), "--test", str(trained_run / "test.csv"),
            "--out-dir", str(tmp_path),
        ])
        assert code == 0
        assert parse_report(capsys.readouterr().out)["accuracy"][1] == 12

    def test_needs_an_input(self, tmp_path):
        assert app.main(["evaluate", "--out-dir", str(tmp_path)]) == 2


class TestAnalyze:
    def test_defective_synthetic_frame(self, tmp_path, capsys):
        assert app.main(["analyze", "--state", "defective", "--out-dir", str(tmp_path), "--seed", "3"]) == 0
        summary = pd.read_csv(tmp_path / "summary.csv", index_col=0)
        assert abs(summary.loc["std", "acoustic"] - 0.303) <= 0.05 * 0.303

        esd = pd.read_csv(tmp_path / "acoustic" / "esd.csv")
        wave = pd.read_csv(tmp_path / "acoustic" / "waveform.csv")
        bin_width = esd["freq_hz"].iloc[1] - esd["freq_hz"].iloc[0]
        ts = wave["time_s"].iloc[1]
        assert esd["value"].sum() * bin_width == pytest.approx(ts * np.sum(wave["value"] ** 2), rel=1e-9)

        acf = pd.read_csv(tmp_path / "vibration" / "acf.csv")
        assert len(acf) == 101 and acf["value"].iloc[0] == 1.0
        for name in ["qq", "hist", "box"]:
            assert (tmp_path / "vibration" / f"{name}.csv").exists()
        lines = capsys.readouterr().out.splitlines()
        assert [line.split(":")[0] for line in lines] == ["acoustic", "vibration"]

    def test_pcm_input(self, tmp_path):
        rng = np.random.default_rng(0)
        path = tmp_path / "mono.pcm"
        path.write_bytes(encode_pcm(rng.normal(0, 0.2, 8192)))
        code = app.main(["analyze", "--input", str(path), "--channel", "vibration", "--out-dir", str(tmp_path)])
        assert code == 0
        assert list(pd.read_csv(tmp_path / "summary.csv", index_col=0).columns) == ["vibration"]

    def test_zero_length_input(self, tmp_path):
        path = tmp_path / "empty.pcm"
        path.write_bytes(b"")
        assert app.main(["analyze", "--input", str(path), "--out-dir", str(tmp_path)]) == 3

    def test_input_shorter_than_a_frame(self, tmp_path):
        path = tmp_path / "short.pcm"
        path.write_bytes(encode_pcm(np.zeros(100)))
        assert app.main(["analyze", "--input", str(path), "--out-dir", str(tmp_path)]) == 3


class TestPredict:
    def test_dataset_row(self, trained_run, capsys):
        code = app.main([
            "predict", "--model", str(trained_run / "model.json"), "--dataset", str(trained_run / "test.csv"),
            "--row", "3", "--out-dir", str(trained_run),
        ])
        assert code == 0
        result = json.loads(capsys.readouterr().out)
        assert result["label"] in {s.text for s in StateLabel}
        assert sum(result["probs"]) == pytest.approx(1.0)

    def test_interleaved_pcm(self, trained_run, tmp_path, capsys):
        pair = synth_dataset(DatasetSpec(frame_len=256, counts={StateLabel.CURRENT: 1}, seed=8))[0]
        interleaved = np.column_stack([pair.acoustic.samples, pair.vibration.samples]).ravel()
        path = tmp_path / "pair.pcm"
        path.write_bytes(encode_pcm(interleaved))
        code = app.main([
            "predict", "--model", str(trained_run / "model.json"), "--input", str(path),
            "--frame-len", "256", "--out-dir", str(tmp_path),
        ])
        assert code == 0
        assert "label" in json.loads(capsys.readouterr().out)

    def test_row_out_of_range(self, trained_run):
        code = app.main([
            "predict", "--model", str(trained_run / "model.json"), "--dataset", str(trained_run / "test.csv"),
            "--row", "500", "--out-dir", str(trained_run),
        ])
        assert code == 2

    def test_missing_model_file(self, tmp_path):
        code = app.main(["predict", "--model", str(tmp_path / "none.json"), "--dataset", "x.csv", "--out-dir", str(tmp_path)])
        assert code == 3

    def _predict_with(self, model_path, trained_run, tmp_path):
        return app.main([
            "predict", "--model", str(model_path), "--dataset", str(trained_run / "test.csv"), "--out-dir", str(tmp_path),
        ])

    def test_model_file_not_utf8(self, trained_run, tmp_path, capsys):
        path = tmp_path / "bad.json"
        path.write_bytes(b"\xff\xfe\x00garbage")
        assert self._predict_with(path, trained_run, tmp_path) == 3
        assert "not a valid model document" in capsys.readouterr().err

    def test_model_layers_not_a_list(self, trained_run, tmp_path, capsys):
        document = json.loads((trained_run / "model.json").read_text())
        document["layers"] = 5
        path = tmp_path / "bad.json"
        path.write_text(json.dumps(document))
        assert self._predict_with(path, trained_run, tmp_path) == 3
        assert "layers must be a list" in capsys.readouterr().err


class TestStream:
    def test_stdin_to_ndjson(self, tmp_path, monkeypatch, capsys):
        model_path = save_model(build_model(ModelArchitecture(hidden=(8,)), seed=1), tmp_path / "model.json")
        pairs = synth_dataset(DatasetSpec(frame_len=64, counts={StateLabel.NOMINAL: 2}, seed=4))
        data = encode_message(pairs[0]) + b"??" + encode_message(pairs[1])
        monkeypatch.setattr("sys.stdin", SimpleNamespace(buffer=io.BytesIO(data)))
        assert app.main(["stream", "--model", str(model_path), "--out-dir", str(tmp_path)]) == 0
        records = [json.loads(line) for line in capsys.readouterr().out.splitlines()]
        assert [r.get("label") is not None for r in records] == [True, False, True]
        assert records[1] == {"frame": None, "error": "bad_magic", "offset": len(encode_message(pairs[0]))}

    def test_bad_listen_address(self, tmp_path):
        assert app.main(["stream", "--model", "m.json", "--listen", "nowhere", "--out-dir", str(tmp_path)]) == 2


def test_unknown_command():
    with pytest.raises(SystemExit) as info:
        app.main(["calibrate"])
    assert info.value.code == 2
