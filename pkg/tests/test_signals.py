import math
from collections import Counter

import numpy as np
import pytest

from modules.errors import FormatError, ParameterError
from modules.signals import (
    DEFAULT_COUNTS,
    FEATURE_COLUMNS,
    REFERENCE_SPLIT_RATIOS,
    STATE_STATS,
    Channel,
    ChannelStats,
    DatasetSpec,
    FramePair,
    LabeledExample,
    SignalFrame,
    StateLabel,
    encode_pcm,
    frame_pcm,
    ingest_pcm,
    ingest_pcm_pair,
    iter_dataset,
    one_hot,
    read_dataset_csv,
    split_dataset,
    synth_dataset,
    synth_frame,
    write_dataset_csv,
)


def _examples(sizes):
    """Feature-free examples in label order: {state: count}"""
    examples = []
    for state, count in sizes.items():
        examples.extend(LabeledExample(np.full(12, float(i)), state) for i in range(count))
    return examples


class TestStateLabel:
    def test_parse_accepts_names_indices_and_members(self):
        assert StateLabel.parse("defective") is StateLabel.DEFECTIVE
        assert StateLabel.parse(" Current ") is StateLabel.CURRENT
        assert StateLabel.parse(0) is StateLabel.NOMINAL
        assert StateLabel.parse(StateLabel.CURRENT) is StateLabel.CURRENT

    @pytest.mark.parametrize("value", ["broken", 3, -1, None])
    def test_parse_rejects_unknown(self, value):
        with pytest.raises(ParameterError):
            StateLabel.parse(value)

    def test_one_hot(self):
        assert one_hot("nominal").tolist() == [1, 0, 0]
        assert one_hot("current").tolist() == [0, 1, 0]
        assert one_hot("defective").tolist() == [0, 0, 1]


class TestSynthFrame:
    def test_defective_acoustic_std_within_five_percent(self):
        stats = STATE_STATS[(StateLabel.DEFECTIVE, Channel.ACOUSTIC)]
        frame = synth_frame(stats, Channel.ACOUSTIC, 4096, rng_state=11)
        assert len(frame) == 4096
        assert abs(np.std(frame.samples, ddof=1) - 0.303) <= 0.05 * 0.303

    def test_harmonics_keep_total_std(self):
        stats = STATE_STATS[(StateLabel.CURRENT, Channel.VIBRATION)]
        tones = np.full(5, 0.2 * stats.std)
        frame = synth_frame(stats, Channel.VIBRATION, 65536, harmonics=tones, rng_state=2)
        assert abs(np.std(frame.samples, ddof=1) - stats.std) <= 0.02 * stats.std

    def test_zero_std_gives_constant_frame(self):
        stats = ChannelStats(0.5, 0.0, 0.5, 0.5, 0.5, 0.5, 0.5)
        frame = synth_frame(stats, Channel.ACOUSTIC, 64, rng_state=0)
        assert np.all(frame.samples == 0.5)

    def test_empirical_mean_within_three_standard_errors(self):
        stats = STATE_STATS[(StateLabel.NOMINAL, Channel.VIBRATION)]
        n = 65536
        frame = synth_frame(stats, Channel.VIBRATION, n, rng_state=5)
        mean = math.fsum(frame.samples.tolist()) / n
        assert abs(mean - (-0.0002)) <= 3 * stats.std / math.sqrt(n)

    def test_harmonic_above_nyquist_is_rejected(self):
        stats = ChannelStats.gaussian(0.0, 0.1)
        with pytest.raises(ParameterError):
            synth_frame(stats, Channel.ACOUSTIC, 64, sample_rate=1000.0, harmonics=np.ones(5), fundamental=150.0)

    def test_short_frame_is_rejected(self):
        with pytest.raises(ParameterError):
            synth_frame(ChannelStats.gaussian(0.0, 1.0), Channel.ACOUSTIC, 1)


class TestSynthDataset:
    def test_reference_counts(self):
        spec = DatasetSpec(
            frame_len=64,
            counts={StateLabel.NOMINAL: 410, StateLabel.CURRENT: 1010, StateLabel.DEFECTIVE: 55},
            seed=1,
        )
        pairs = synth_dataset(spec)
        assert len(pairs) == 1475
        assert Counter(p.label for p in pairs) == {
            StateLabel.NOMINAL: 410,
            StateLabel.CURRENT: 1010,
            StateLabel.DEFECTIVE: 55,
        }

    def test_empty_counts(self):
        spec = DatasetSpec(frame_len=64, counts={state: 0 for state in StateLabel})
        assert list(iter_dataset(spec)) == []

    def test_same_seed_is_bitwise_identical(self):
        spec = DatasetSpec(frame_len=128, counts={state: 3 for state in StateLabel}, seed=42)
        first = [np.concatenate([p.acoustic.samples, p.vibration.samples]) for p in iter_dataset(spec)]
        second = [np.concatenate([p.acoustic.samples, p.vibration.samples]) for p in iter_dataset(spec)]
        assert all(a.tobytes() == b.tobytes() for a, b in zip(first, second))

    def test_different_seeds_differ(self):
        a = synth_dataset(DatasetSpec(frame_len=64, counts={StateLabel.NOMINAL: 1}, seed=1))
        b = synth_dataset(DatasetSpec(frame_len=64, counts={StateLabel.NOMINAL: 1}, seed=2))
        assert not np.array_equal(a[0].acoustic.samples, b[0].acoustic.samples)

    def test_non_power_of_two_frame_len_is_rejected(self):
        with pytest.raises(ParameterError):
            DatasetSpec(frame_len=1000).validate()

    def test_default_counts_scale_reference_mix(self):
        assert {s: round(c * 0.2) for s, c in DEFAULT_COUNTS.items()} == {
            StateLabel.NOMINAL: 410,
            StateLabel.CURRENT: 1010,
            StateLabel.DEFECTIVE: 55,
        }

    @pytest.mark.slow
    @pytest.mark.parametrize("harmonics", [False, True])
    def test_thousand_frame_calibration(self, harmonics):
        spec = DatasetSpec(counts={state: 1000 for state in StateLabel}, harmonics=harmonics, seed=11)
        n = spec.frame_len
        calibrated = Counter()
        for pair in iter_dataset(spec):
            for frame in (pair.acoustic, pair.vibration):
                stats = STATE_STATS[(pair.label, frame.channel)]
                std_ok = abs(np.std(frame.samples, ddof=1) - stats.std) <= 0.05 * stats.std
                mean_ok = abs(frame.samples.mean() - stats.mean) <= 3 * stats.std / math.sqrt(n)
                calibrated[(pair.label, frame.channel)] += int(std_ok and mean_ok)
        assert len(calibrated) == 6
        assert min(calibrated.values()) >= 990


class TestPcm:
    def test_scale_points(self):
        raw = np.array([0, 16384, -32768], dtype="<i2").tobytes()
        frame = ingest_pcm(raw, Channel.ACOUSTIC)
        assert frame.samples[0] == 0.0
        assert frame.samples[1] == pytest.approx(0.868, abs=1e-12)
        assert frame.samples[2] == pytest.approx(-1.736, abs=1e-12)

    def test_empty_input(self):
        with pytest.raises(FormatError):
            ingest_pcm(b"", Channel.ACOUSTIC)

    def test_odd_length(self):
        with pytest.raises(FormatError) as info:
            ingest_pcm(b"\x00\x01\x02", Channel.VIBRATION)
        assert info.value.offset == 2

    def test_interleaved_pair_is_acoustic_first(self):
        raw = np.array([1, -1, 2, -2, 3, -3, 4, -4], dtype="<i2").tobytes()
        pair = ingest_pcm_pair(raw)
        scale = 1.736 / 32768
        assert np.allclose(pair.acoustic.samples, np.array([1, 2, 3, 4]) * scale)
        assert np.allclose(pair.vibration.samples, np.array([-1, -2, -3, -4]) * scale)

    def test_encode_inverts_ingest(self):
        raw = np.array([0, 1, -1, 12345, -32768, 32767], dtype="<i2").tobytes()
        assert encode_pcm(ingest_pcm(raw, Channel.ACOUSTIC)) == raw

    def test_encode_clips_out_of_range(self):
        data = encode_pcm(np.array([10.0, -10.0]))
        assert np.frombuffer(data, dtype="<i2").tolist() == [32767, -32768]

    def test_frame_pcm_drops_tail(self):
        signal = SignalFrame(Channel.ACOUSTIC, np.arange(10.0))
        frames = frame_pcm(signal, 4)
        assert [f.samples.tolist() for f in frames] == [[0, 1, 2, 3], [4, 5, 6, 7]]

    def test_pair_lengths_must_match(self):
        with pytest.raises(ParameterError):
            FramePair(SignalFrame(Channel.ACOUSTIC, np.zeros(4)), SignalFrame(Channel.VIBRATION, np.zeros(8)))


class TestSplit:
    def test_exact_division(self):
        split = split_dataset(_examples({StateLabel.CURRENT: 100}), seed=3)
        assert split.sizes == (70, 10, 20)

    def test_partition_is_disjoint_and_complete(self):
        sizes = {StateLabel.NOMINAL: 7238, StateLabel.CURRENT: 1034, StateLabel.DEFECTIVE: 102}
        examples = _examples(sizes)
        split = split_dataset(examples, seed=9)
        ids = [[id(e) for e in part] for part in (split.train, split.validation, split.test)]
        assert sum(len(part) for part in ids) == len(examples)
        assert set().union(*map(set, ids)) == {id(e) for e in examples}
        assert len(set(ids[0]) & set(ids[1])) == len(set(ids[0]) & set(ids[2])) == len(set(ids[1]) & set(ids[2])) == 0
        for state, n in sizes.items():
            per_split = [sum(1 for e in part if e.label == state) for part in (split.train, split.validation, split.test)]
            assert sum(per_split) == n
            for got, ratio in zip(per_split, (0.7, 0.1, 0.2)):
                assert abs(got - ratio * n) <= 1

    def test_validation_cut_is_its_own_floor(self):
        split = split_dataset(_examples({StateLabel.NOMINAL: 7238}), seed=0)
        assert split.sizes == (5068, 723, 1447)

    def test_reference_ratios_give_reference_sizes(self):
        split = split_dataset(_examples(DEFAULT_COUNTS), REFERENCE_SPLIT_RATIOS, seed=0)
        assert split.sizes == (5310, 590, 1475)

    def test_seed_changes_assignment_but_not_sizes(self):
        examples = _examples({StateLabel.NOMINAL: 50})
        a = split_dataset(examples, seed=1)
        b = split_dataset(examples, seed=2)
        assert a.sizes == b.sizes
        assert [id(e) for e in a.test] != [id(e) for e in b.test]

    @pytest.mark.parametrize("ratios", [(0.5, 0.5, 0.5), (0.7, 0.3, 0.0), (1.0,)])
    def test_invalid_ratios(self, ratios):
        with pytest.raises(ParameterError):
            split_dataset(_examples({StateLabel.NOMINAL: 10}), ratios)


class TestDatasetCsv:
    def test_write_then_read(self, tmp_path):
        examples = [LabeledExample(np.linspace(0, 1, 12) * (i + 1), StateLabel(i % 3)) for i in range(6)]
        path = write_dataset_csv(examples, tmp_path / "data.csv")
        header = path.read_text().splitlines()[0]
        assert header == ",".join(FEATURE_COLUMNS + ["label"])
        loaded = read_dataset_csv(path)
        assert [e.label for e in loaded] == [e.label for e in examples]
        assert all(np.array_equal(a.features, b.features) for a, b in zip(loaded, examples))

    def test_wrong_header(self, tmp_path):
        path = tmp_path / "bad.csv"
        path.write_text(",".join(FEATURE_COLUMNS[:11] + ["label"]) + "\n" + ",".join(["1"] * 11 + ["nominal"]) + "\n")
        with pytest.raises(FormatError) as info:
            read_dataset_csv(path)
        assert info.value.row == 1

    def test_bad_row_reports_line_number(self, tmp_path):
        path = tmp_path / "bad.csv"
        rows = [",".join(FEATURE_COLUMNS + ["label"]), ",".join(["1"] * 12 + ["nominal"]), ",".join(["x"] * 12 + ["current"])]
        path.write_text("\n".join(rows) + "\n")
        with pytest.raises(FormatError) as info:
            read_dataset_csv(path)
        assert info.value.row == 3

    def test_unknown_label(self, tmp_path):
        path = tmp_path / "bad.csv"
        path.write_text(",".join(FEATURE_COLUMNS + ["label"]) + "\n" + ",".join(["1"] * 12 + ["broken"]) + "\n")
        with pytest.raises(FormatError):
            read_dataset_csv(path)


def test_channel_stats_reject_unordered_quantiles():
    with pytest.raises(ParameterError):
        ChannelStats(0.0, 1.0, 0.0, 0.5, 0.4, 0.6, 1.0)
