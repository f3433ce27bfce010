"""Command line for the gas pumping unit vibroacoustic diagnosis toolkit.

    python app.py synth    --out-dir run
    python app.py train    --dataset run/dataset.csv --out-dir run
    python app.py evaluate --model run/model.json --test run/test.csv
    python app.py analyze  --state defective --out-dir run/analysis
    python app.py predict  --model run/model.json --input frame.pcm
    python app.py stream   --model run/model.json < frames.bin

Exit codes: 0 success, 2 usage/parameter error, 3 data/IO error, 4 numeric failure.
"""

import argparse
import json
import logging
import sys
from dataclasses import asdict
from pathlib import Path

import numpy as np
import pandas as pd

from modules.config import REPORT_FORMATS, load_config_file, resolve_config
from modules.dsp import (
    CHANNEL_SETS,
    acf,
    box_stats,
    dft_spectrum,
    energy,
    esd,
    esd_energy,
    extract_features,
    histogram,
    qq_points,
    shapiro_wilk,
    summary_table,
    waveform,
)
from modules.errors import DiagnosisError, InsufficientDataError, ParameterError
from modules.evaluation import (
    build_report,
    confusion_matrix,
    read_predictions_csv,
    render_report,
    report_to_dict,
)
from modules.neuralnet import BN_ORDERS, build_model, load_model, predict, predict_batch, save_model, train
from modules.run_log import RunLog
from modules.signals import (
    Channel,
    FramePair,
    LabeledExample,
    StateLabel,
    examples_to_arrays,
    frame_pcm,
    ingest_pcm,
    ingest_pcm_pair,
    iter_dataset,
    read_dataset_csv,
    split_dataset,
    synth_frame,
    write_dataset_csv,
)
from modules.stream import StreamClassifier, serve_stdin, serve_tcp

logger = logging.getLogger("gpu_diagnosis")

ASSETS_DIR = Path(__file__).resolve().parent / "assets"
REFERENCE_PREDICTIONS = ASSETS_DIR / "reference_predictions.csv"
# Longest prefix handed to the normality test and the Q-Q plot
NORMALITY_SAMPLES = 5000
EXIT_IO = 3


def _out_dir(config):
    path = Path(config.out_dir)
    path.mkdir(parents=True, exist_ok=True)
    return path


def _required(config, name, command):
    value = getattr(config, name)
    if value is None:
        raise ParameterError(f"{command} needs --{name.replace('_', '-')}")
    return value


def _first_frame(signal, frame_len):
    frames = frame_pcm(signal, frame_len)
    if not frames:
        raise InsufficientDataError(
            f"{signal.channel.value} signal has {len(signal)} samples, fewer than one {frame_len}-sample frame"
        )
    return frames[0]


def run_synth(config, run_log):
    """Generate a labeled feature dataset and its manifest"""
    spec = config.dataset_spec()
    out_dir = _out_dir(config)
    dataset_path = Path(config.dataset) if config.dataset else out_dir / "dataset.csv"

    examples = [LabeledExample(extract_features(pair).components, pair.label) for pair in iter_dataset(spec)]
    write_dataset_csv(examples, dataset_path)
    run_log.log_output("dataset", dataset_path, len(examples))

    written = {state.text: sum(1 for e in examples if e.label == state) for state in StateLabel}
    manifest_path = run_log.write_manifest(
        out_dir / "manifest.json", synthesis=spec.to_dict(), dataset=str(dataset_path), written=written
    )
    logger.info("Wrote %d examples to %s (manifest %s)", len(examples), dataset_path, manifest_path)
    print(f"{len(examples)} examples -> {dataset_path}")


def run_train(config, run_log):
    """Train a model on a dataset CSV; write model, history, held-out test split and run log"""
    dataset = _required(config, "dataset", "train")
    out_dir = _out_dir(config)

    examples = read_dataset_csv(dataset)
    run_log.log_action("Read dataset", f"Path: {dataset}, Rows: {len(examples)}")
    split = split_dataset(examples, config.split_ratios, config.seed)
    run_log.log_action("Split", "train/val/test = {}/{}/{}".format(*split.sizes))

    model = build_model(config.architecture(), seed=config.seed)
    total, trainable, non_trainable = model.param_counts()
    run_log.log_action(
        "Build model", f"{total} parameters ({trainable} trainable, {non_trainable} non-trainable)"
    )

    model, history = train(model, split, config.train_config())
    run_log.log_action("Train", f"{len(history)} epochs, {history.steps} optimizer steps")

    model_path = Path(config.model) if config.model else out_dir / "model.json"
    save_model(model, model_path)
    run_log.log_output("model", model_path)

    history_path = out_dir / "history.csv"
    history.to_frame().to_csv(history_path, index=False)
    run_log.log_output("history", history_path, len(history))

    test_path = Path(config.test) if config.test else out_dir / "test.csv"
    write_dataset_csv(split.test, test_path)
    run_log.log_output("test split", test_path, len(split.test))
    run_log.export_csv(model_path.with_name("run_log.csv"))

    final = history.final
    print(
        f"epochs={len(history)} train_loss={final.train_loss:.4f} train_acc={final.train_accuracy:.4f} "
        f"{final.validation_text()}"
    )


def run_evaluate(config, run_log):
    """Confusion matrix and classification report for a model on a test set, or a predictions file"""
    out_dir = _out_dir(config)
    if config.predictions:
        truths, predictions = read_predictions_csv(config.predictions)
        run_log.log_action("Read predictions", f"Path: {config.predictions}, Rows: {len(truths)}")
    elif config.model and config.test:
        model = load_model(config.model)
        X, truths = examples_to_arrays(read_dataset_csv(config.test))
        if truths.size == 0:
            raise InsufficientDataError(f"{config.test} has no examples to evaluate")
        predictions, _ = predict_batch(model, X)
        run_log.log_action("Predict", f"Model: {config.model}, Rows: {truths.size}")
    else:
        raise ParameterError("evaluate needs --predictions, or --model together with --test")

    cm = confusion_matrix(truths, predictions)
    report = build_report(cm)
    confusion_path = out_dir / "confusion.csv"
    cm.to_frame().to_csv(confusion_path)
    run_log.log_output("confusion", confusion_path)

    if config.report_format == "json":
        print(json.dumps(report_to_dict(report), indent=2))
    else:
        print(render_report(report), end="")


def _analysis_signals(config):
    """Signals to analyse, keyed by channel: from a PCM file or one synthetic frame pair"""
    if config.input:
        data = Path(config.input).read_bytes()
        if config.interleaved:
            pair = ingest_pcm_pair(data, config.sample_rate, config.full_scale_volts)
            return {Channel.ACOUSTIC: pair.acoustic, Channel.VIBRATION: pair.vibration}
        channel = Channel(config.channel)
        return {channel: ingest_pcm(data, channel, config.sample_rate, config.full_scale_volts)}

    spec = config.dataset_spec().validate()
    state = StateLabel.parse(config.state or StateLabel.NOMINAL)
    rng = np.random.default_rng(config.seed)
    return {
        channel: synth_frame(
            spec.stats[(state, channel)], channel, spec.frame_len, spec.sample_rate,
            spec.amplitudes_for(state, channel), rng, spec.fundamental,
        )
        for channel in Channel
    }


def run_analyze(config, run_log):
    """Per-channel statistics, ACF, ESD, Q-Q, histogram, box and waveform CSVs"""
    out_dir = _out_dir(config)
    signals = _analysis_signals(config)

    for channel, signal in signals.items():
        frame = _first_frame(signal, config.frame_len)
        channel_dir = out_dir / channel.value
        channel_dir.mkdir(exist_ok=True)

        series = acf(frame, config.max_lag)
        pd.DataFrame({"lag": series.lags, "value": series.values}).to_csv(channel_dir / "acf.csv", index=False)

        density = esd(dft_spectrum(frame))
        pd.DataFrame({"freq_hz": density.frequencies, "value": density.values}).to_csv(
            channel_dir / "esd.csv", index=False
        )
        logger.info(
            "%s energy: time domain %.6g, spectral %.6g", channel.value, energy(frame), esd_energy(density)
        )

        head = signal.samples[:NORMALITY_SAMPLES]
        qq = qq_points(head)
        pd.DataFrame({"theoretical": qq.theoretical, "sample": qq.sample}).to_csv(
            channel_dir / "qq.csv", index=False
        )
        histogram(signal, config.hist_bins).to_csv(channel_dir / "hist.csv", index=False)
        pd.DataFrame([asdict(box_stats(signal))]).to_csv(channel_dir / "box.csv", index=False)
        waveform(frame).to_csv(channel_dir / "waveform.csv", index=False)
        run_log.log_output(f"{channel.value} analysis", channel_dir)

        normality = shapiro_wilk(head)
        print(f"{channel.value}: n={head.size} W={normality.w_statistic:.6f} p={normality.p_value:.6g}")

    table = summary_table({channel.value: signal for channel, signal in signals.items()})
    table.to_csv(out_dir / "summary.csv")
    run_log.log_output("summary", out_dir / "summary.csv")


def run_predict(config, run_log):
    """Classify one interleaved PCM frame pair or one dataset row"""
    model = load_model(_required(config, "model", "predict"))
    if config.input:
        pair = ingest_pcm_pair(Path(config.input).read_bytes(), config.sample_rate, config.full_scale_volts)
        pair = FramePair(
            _first_frame(pair.acoustic, config.frame_len), _first_frame(pair.vibration, config.frame_len)
        )
        features = extract_features(pair).components
        source = config.input
    elif config.dataset:
        examples = read_dataset_csv(config.dataset)
        row = config.row or 0
        if row >= len(examples):
            raise ParameterError(f"row {row} is out of range; {config.dataset} has {len(examples)} rows")
        features = examples[row].features
        source = f"{config.dataset}[{row}]"
    else:
        raise ParameterError("predict needs --input, or --dataset with an optional --row")

    label, probs = predict(model, features)
    run_log.log_action("Predict", f"{source}: {label.text}")
    print(json.dumps({"label": label.text, "probs": [float(p) for p in probs]}))


def run_stream(config, run_log):
    """Classify framed PCM from stdin or a TCP listener, one NDJSON line per message"""
    model = load_model(_required(config, "model", "stream"))
    classifier = StreamClassifier(model, config.sample_rate, config.full_scale_volts, config.max_frame_len)
    address = config.listen_address
    if address is None:
        serve_stdin(classifier, sys.stdin.buffer, sys.stdout)
    else:
        serve_tcp(classifier, *address, sys.stdout, max_connections=config.max_connections)


HANDLERS = {
    "synth": run_synth,
    "train": run_train,
    "evaluate": run_evaluate,
    "analyze": run_analyze,
    "predict": run_predict,
    "stream": run_stream,
}


def build_parser():
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="key = value settings file; flags override it")
    common.add_argument("--log-level", default="INFO", choices=["DEBUG", "INFO", "WARNING", "ERROR"])
    common.add_argument("--seed", type=int)
    common.add_argument("--out-dir")
    common.add_argument("--frame-len", type=int)
    common.add_argument("--sample-rate", type=float)
    common.add_argument("--full-scale-volts", type=float)

    synthesis = argparse.ArgumentParser(add_help=False)
    synthesis.add_argument("--nominal", type=int, help="frames of nominal state")
    synthesis.add_argument("--current", type=int, help="frames of current state")
    synthesis.add_argument("--defective", type=int, help="frames of defective state")
    synthesis.add_argument("--harmonics", action=argparse.BooleanOptionalAction, default=None)
    synthesis.add_argument("--harmonic-scale", type=float)
    synthesis.add_argument("--fundamental", type=float, help="rotor frequency, Hz")

    parser = argparse.ArgumentParser(
        prog="app.py", description="Vibroacoustic technical-state diagnosis of gas pumping units"
    )
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("synth", parents=[common, synthesis], help="generate a labeled feature dataset")
    p.add_argument("--dataset", help="output CSV (default OUT_DIR/dataset.csv)")

    p = sub.add_parser("train", parents=[common], help="train the classifier")
    p.add_argument("--dataset")
    p.add_argument("--model", help="output model (default OUT_DIR/model.json)")
    p.add_argument("--test", help="output test split (default OUT_DIR/test.csv)")
    p.add_argument("--epochs", type=int)
    p.add_argument("--batch-size", type=int)
    p.add_argument("--learning-rate", type=float)
    p.add_argument("--beta1", type=float)
    p.add_argument("--beta2", type=float)
    p.add_argument("--adam-epsilon", type=float)
    p.add_argument("--shuffle", action=argparse.BooleanOptionalAction, default=None)
    p.add_argument("--bn-epsilon", type=float)
    p.add_argument("--bn-momentum", type=float)
    p.add_argument("--bn-order", choices=BN_ORDERS)
    p.add_argument("--channels", choices=CHANNEL_SETS)
    p.add_argument("--hidden", help="comma-separated hidden widths, e.g. 256,128")
    p.add_argument("--split", help="train,val,test ratios or a preset (default, reference)")

    p = sub.add_parser("evaluate", parents=[common], help="confusion matrix and classification report")
    p.add_argument("--model")
    p.add_argument("--test")
    p.add_argument("--predictions", help=f"truth,prediction CSV, e.g. {REFERENCE_PREDICTIONS.name}")
    p.add_argument("--report-format", choices=REPORT_FORMATS)

    p = sub.add_parser("analyze", parents=[common, synthesis], help="signal statistics and plot data")
    p.add_argument("--input", help="headerless int16 PCM; omit to analyse a synthetic frame")
    p.add_argument("--channel", choices=[c.value for c in Channel])
    p.add_argument("--interleaved", action=argparse.BooleanOptionalAction, default=None)
    p.add_argument("--state", choices=[s.text for s in StateLabel])
    p.add_argument("--max-lag", type=int)
    p.add_argument("--hist-bins", type=int)

    p = sub.add_parser("predict", parents=[common], help="classify one frame pair or dataset row")
    p.add_argument("--model")
    p.add_argument("--input", help="interleaved int16 PCM, acoustic first")
    p.add_argument("--dataset")
    p.add_argument("--row", type=int)

    p = sub.add_parser("stream", parents=[common], help="classify framed PCM in real time")
    p.add_argument("--model")
    p.add_argument("--listen", help="host:port; omit to read standard input")
    p.add_argument("--max-frame-len", type=int)
    p.add_argument("--max-connections", type=int)

    return parser


def _fail(run_log, error, code):
    run_log.log_error(type(error).__name__, str(error))
    print(f"error: {error}", file=sys.stderr)
    return code


def main(argv=None):
    args = build_parser().parse_args(argv)
    logging.basicConfig(
        level=args.log_level,
        stream=sys.stderr,
        format="%(asctime)s %(levelname)s %(name)s: %(message)s",
        force=True,
    )
    flags = {k: v for k, v in vars(args).items() if k not in ("command", "config", "log_level")}
    run_log = RunLog(args.command)

    try:
        file_values = load_config_file(args.config) if args.config else {}
        config = resolve_config(file_values, flags)
        run_log.log_action("Start", f"seed={config.seed}")
        HANDLERS[args.command](config, run_log)
    except DiagnosisError as e:
        code = _fail(run_log, e, e.exit_code)
    except OSError as e:
        code = _fail(run_log, e, EXIT_IO)
    else:
        code = 0
    summary = run_log.get_summary()
    logger.info(
        "%s finished with exit code %d: %d events, %d errors",
        args.command, code, summary["total_events"], summary["errors"],
    )
    return code


if __name__ == "__main__":
    sys.exit(main())
