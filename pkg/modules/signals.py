"""Two-channel signal sources: calibrated synthesis, PCM ingestion, datasets."""

import logging
import math
from dataclasses import dataclass, field
from enum import Enum, IntEnum

import numpy as np
import pandas as pd

from modules.errors import FormatError, ParameterError

logger = logging.getLogger(__name__)

DEFAULT_SAMPLE_RATE = 44100.0
DEFAULT_FRAME_LEN = 4096
FULL_SCALE_VOLTS = 1.736
PCM_FULL_SCALE = 32768
ROTOR_RPM = 4670
FUNDAMENTAL_HZ = ROTOR_RPM / 60.0
N_HARMONICS = 5
DEFAULT_HARMONIC_SCALE = 0.2
DEFAULT_SPLIT_RATIOS = (0.70, 0.10, 0.20)
# Splits the default counts into 5,310/590/1,475 train/val/test frames
REFERENCE_SPLIT_RATIOS = (0.72, 0.08, 0.20)
N_FEATURES = 12
FEATURE_COLUMNS = [f"f{i}" for i in range(1, N_FEATURES + 1)]


class StateLabel(IntEnum):
    """Technical state of the unit; the integer value is the class index"""

    NOMINAL = 0
    CURRENT = 1
    DEFECTIVE = 2

    @property
    def text(self):
        return self.name.lower()

    @classmethod
    def parse(cls, value):
        """Accept a StateLabel, its index or its lowercase name"""
        if isinstance(value, cls):
            return value
        if isinstance(value, str):
            key = value.strip().strip('"').upper()
            if key in cls.__members__:
                return cls[key]
            raise ParameterError(f"Unknown state label: {value!r}")
        try:
            return cls(int(value))
        except (TypeError, ValueError):
            raise ParameterError(f"Unknown state label: {value!r}") from None


class Channel(str, Enum):
    ACOUSTIC = "acoustic"
    VIBRATION = "vibration"


@dataclass(frozen=True)
class ChannelStats:
    """Reference statistics of one channel in one state, volts"""

    mean: float
    std: float
    min: float
    q25: float
    q50: float
    q75: float
    max: float

    def __post_init__(self):
        values = (self.mean, self.std, self.min, self.q25, self.q50, self.q75, self.max)
        if not all(math.isfinite(v) for v in values):
            raise ParameterError(f"Channel statistics must be finite: {values}")
        if self.std < 0:
            raise ParameterError(f"Standard deviation must be >= 0, got {self.std}")
        if not (self.min <= self.q25 <= self.q50 <= self.q75 <= self.max):
            raise ParameterError("Quantiles must satisfy min <= q25 <= q50 <= q75 <= max")

    @classmethod
    def gaussian(cls, mean, std):
        """Stats of an ideal normal channel (quartiles at +-0.6745 std, range +-4 std)"""
        q = 0.6744897501960817 * std
        return cls(mean, std, mean - 4 * std, mean - q, mean, mean + q, mean + 4 * std)


STATE_STATS = {
    (StateLabel.NOMINAL, Channel.ACOUSTIC): ChannelStats(-0.0002, 0.0247, -0.0966, -0.0167, -0.0001, 0.0162, 0.094),
    (StateLabel.NOMINAL, Channel.VIBRATION): ChannelStats(-0.0002, 0.0202, -0.0704, -0.0135, 0.0002, 0.0138, 0.0594),
    (StateLabel.CURRENT, Channel.ACOUSTIC): ChannelStats(-0.0006, 0.1601, -0.6952, -0.1051, 0.0031, 0.1087, 0.7219),
    (StateLabel.CURRENT, Channel.VIBRATION): ChannelStats(-0.0015, 0.2209, -0.8825, -0.1523, -0.0007, 0.1505, 0.7928),
    (StateLabel.DEFECTIVE, Channel.ACOUSTIC): ChannelStats(-0.0093, 0.303, -0.9822, -0.2073, -0.0077, 0.188, 2.2995),
    (StateLabel.DEFECTIVE, Channel.VIBRATION): ChannelStats(-0.0064, 0.5514, -1.6656, -0.3638, -0.0056, 0.3284, 8.4175),
}

# Reference test-set class mix times five, so a 20 % test cut yields 410/1,010/55
DEFAULT_COUNTS = {
    StateLabel.NOMINAL: 2050,
    StateLabel.CURRENT: 5050,
    StateLabel.DEFECTIVE: 275,
}


def is_power_of_two(n):
    return n >= 1 and (n & (n - 1)) == 0


@dataclass
class SignalFrame:
    """Fixed-length window of voltage samples from one channel"""

    channel: Channel
    samples: np.ndarray
    sample_rate: float = DEFAULT_SAMPLE_RATE

    def __post_init__(self):
        self.channel = Channel(self.channel)
        self.samples = np.asarray(self.samples, dtype=np.float64).reshape(-1)
        if self.samples.size < 1:
            raise ParameterError("A signal frame needs at least one sample")
        if not self.sample_rate > 0:
            raise ParameterError(f"Sample rate must be positive, got {self.sample_rate}")

    def __len__(self):
        return self.samples.size

    @property
    def ts(self):
        """Sampling interval, seconds"""
        return 1.0 / self.sample_rate

    @property
    def duration(self):
        return self.samples.size * self.ts


@dataclass
class FramePair:
    """Acoustic and vibration frames captured over the same window"""

    acoustic: SignalFrame
    vibration: SignalFrame
    label: StateLabel = None

    def __post_init__(self):
        if len(self.acoustic) != len(self.vibration):
            raise ParameterError(
                f"Frame lengths differ: acoustic {len(self.acoustic)}, vibration {len(self.vibration)}"
            )
        if self.acoustic.sample_rate != self.vibration.sample_rate:
            raise ParameterError("Acoustic and vibration frames must share one sample rate")
        if self.label is not None:
            self.label = StateLabel.parse(self.label)


@dataclass
class DatasetSpec:
    """Everything needed to regenerate a synthetic corpus bit-for-bit"""

    frame_len: int = DEFAULT_FRAME_LEN
    counts: dict = field(default_factory=lambda: dict(DEFAULT_COUNTS))
    stats: dict = field(default_factory=lambda: dict(STATE_STATS))
    harmonics: bool = True
    harmonic_scale: float = DEFAULT_HARMONIC_SCALE
    # Optional override: (state, channel) -> five amplitudes in volts
    harmonic_amplitudes: dict = field(default_factory=dict)
    fundamental: float = FUNDAMENTAL_HZ
    sample_rate: float = DEFAULT_SAMPLE_RATE
    seed: int = 0

    def validate(self):
        if not is_power_of_two(int(self.frame_len)) or self.frame_len < 2:
            raise ParameterError(f"frame_len must be a power of two >= 2, got {self.frame_len}")
        if not self.sample_rate > 0:
            raise ParameterError(f"sample_rate must be positive, got {self.sample_rate}")
        if not 0 < self.fundamental < self.sample_rate / 2:
            raise ParameterError(f"fundamental must lie in (0, {self.sample_rate / 2}) Hz")
        for state in StateLabel:
            if int(self.counts.get(state, 0)) < 0:
                raise ParameterError(f"Negative frame count for {state.text}")
            for channel in Channel:
                if (state, channel) not in self.stats:
                    raise ParameterError(f"Missing statistics for {state.text}/{channel.value}")
        if self.harmonic_scale < 0:
            raise ParameterError("harmonic_scale must be >= 0")
        if int(self.seed) < 0:
            raise ParameterError("seed must be an unsigned integer")
        return self

    def amplitudes_for(self, state, channel):
        """Harmonic amplitudes for one state/channel, or None when harmonics are off"""
        if not self.harmonics:
            return None
        override = self.harmonic_amplitudes.get((state, channel))
        if override is not None:
            return np.asarray(override, dtype=np.float64)
        std = self.stats[(state, channel)].std
        return np.full(N_HARMONICS, self.harmonic_scale * std)

    @property
    def total(self):
        return sum(int(self.counts.get(state, 0)) for state in StateLabel)

    def to_dict(self):
        """Plain-data description for run manifests"""
        return {
            "frame_len": int(self.frame_len),
            "sample_rate": float(self.sample_rate),
            "fundamental_hz": float(self.fundamental),
            "harmonics": bool(self.harmonics),
            "harmonic_scale": float(self.harmonic_scale),
            "seed": int(self.seed),
            "counts": {state.text: int(self.counts.get(state, 0)) for state in StateLabel},
            "stats": {
                f"{state.text}/{channel.value}": vars(self.stats[(state, channel)]).copy()
                for state in StateLabel
                for channel in Channel
            },
        }


@dataclass
class LabeledExample:
    features: np.ndarray
    label: StateLabel

    def __post_init__(self):
        self.features = np.asarray(self.features, dtype=np.float64).reshape(-1)
        if self.features.size != N_FEATURES:
            raise ParameterError(f"Expected {N_FEATURES} features, got {self.features.size}")
        if not np.all(np.isfinite(self.features)):
            raise ParameterError("Feature vector contains non-finite values")
        self.label = StateLabel.parse(self.label)


@dataclass
class DataSplit:
    train: list = field(default_factory=list)
    validation: list = field(default_factory=list)
    test: list = field(default_factory=list)

    @property
    def sizes(self):
        return len(self.train), len(self.validation), len(self.test)


def _as_rng(rng_state):
    if isinstance(rng_state, np.random.Generator):
        return rng_state
    return np.random.default_rng(rng_state)


def synth_frame(stats, channel, frame_len, sample_rate=DEFAULT_SAMPLE_RATE, harmonics=None,
                rng_state=None, fundamental=FUNDAMENTAL_HZ):
    """Draw one Gaussian frame calibrated to ``stats``, optionally with rotor harmonics.

    ``harmonics`` holds the amplitude (volts) of the k-th multiple of
    ``fundamental``. When present, the noise variance is reduced by the tone
    power so the frame's total standard deviation still targets ``stats.std``.
    """
    if frame_len < 2:
        raise ParameterError(f"frame_len must be >= 2, got {frame_len}")
    if not isinstance(stats, ChannelStats):
        raise ParameterError("stats must be a ChannelStats")
    rng = _as_rng(rng_state)

    noise_std = stats.std
    amplitudes = None
    if harmonics is not None:
        amplitudes = np.asarray(harmonics, dtype=np.float64).reshape(-1)
        if not np.all(np.isfinite(amplitudes)):
            raise ParameterError("Harmonic amplitudes must be finite")
        top = amplitudes.size * fundamental
        if amplitudes.size and top >= sample_rate / 2:
            raise ParameterError(f"Harmonic at {top:.1f} Hz exceeds the Nyquist frequency")
        tone_power = float(np.sum(amplitudes ** 2)) / 2.0
        noise_std = math.sqrt(max(stats.std ** 2 - tone_power, 0.0))

    samples = rng.normal(stats.mean, noise_std, size=int(frame_len))

    if amplitudes is not None and amplitudes.size:
        phases = rng.uniform(0.0, 2.0 * np.pi, size=amplitudes.size)
        t = np.arange(int(frame_len)) / sample_rate
        k = np.arange(1, amplitudes.size + 1)
        tones = amplitudes[:, None] * np.cos(2.0 * np.pi * fundamental * k[:, None] * t[None, :] + phases[:, None])
        samples = samples + tones.sum(axis=0)

    return SignalFrame(channel, samples, sample_rate)


def iter_dataset(spec):
    """Yield labeled frame pairs state by state; one generator drives every draw"""
    spec.validate()
    rng = np.random.default_rng(int(spec.seed))
    for state in StateLabel:
        acoustic_stats = spec.stats[(state, Channel.ACOUSTIC)]
        vibration_stats = spec.stats[(state, Channel.VIBRATION)]
        acoustic_tones = spec.amplitudes_for(state, Channel.ACOUSTIC)
        vibration_tones = spec.amplitudes_for(state, Channel.VIBRATION)
        for _ in range(int(spec.counts.get(state, 0))):
            acoustic = synth_frame(acoustic_stats, Channel.ACOUSTIC, spec.frame_len, spec.sample_rate,
                                   acoustic_tones, rng, spec.fundamental)
            vibration = synth_frame(vibration_stats, Channel.VIBRATION, spec.frame_len, spec.sample_rate,
                                    vibration_tones, rng, spec.fundamental)
            yield FramePair(acoustic, vibration, state)


def synth_dataset(spec):
    """Generate the full labeled corpus described by ``spec``"""
    pairs = list(iter_dataset(spec))
    logger.info("Synthesised %d frame pairs (frame_len=%d, seed=%d)", len(pairs), spec.frame_len, spec.seed)
    return pairs


def ingest_pcm(data, channel, sample_rate=DEFAULT_SAMPLE_RATE, full_scale_volts=FULL_SCALE_VOLTS):
    """Decode headerless signed 16-bit little-endian mono PCM into volts"""
    data = bytes(data)
    if len(data) == 0:
        raise FormatError("PCM input is empty", offset=0)
    if len(data) % 2:
        raise FormatError(f"PCM input has odd length {len(data)}", offset=len(data) - 1)
    raw = np.frombuffer(data, dtype="<i2").astype(np.float64)
    return SignalFrame(channel, raw * (full_scale_volts / PCM_FULL_SCALE), sample_rate)


def ingest_pcm_pair(data, sample_rate=DEFAULT_SAMPLE_RATE, full_scale_volts=FULL_SCALE_VOLTS, label=None):
    """Decode interleaved two-channel PCM (acoustic first) into a frame pair"""
    data = bytes(data)
    if len(data) == 0:
        raise FormatError("PCM input is empty", offset=0)
    if len(data) % 4:
        raise FormatError(f"Interleaved PCM length {len(data)} is not a multiple of 4", offset=len(data))
    raw = np.frombuffer(data, dtype="<i2").astype(np.float64).reshape(-1, 2)
    scale = full_scale_volts / PCM_FULL_SCALE
    return FramePair(
        SignalFrame(Channel.ACOUSTIC, raw[:, 0] * scale, sample_rate),
        SignalFrame(Channel.VIBRATION, raw[:, 1] * scale, sample_rate),
        label,
    )


def encode_pcm(frame, full_scale_volts=FULL_SCALE_VOLTS):
    """Quantise a frame (or volt array) back to int16 little-endian bytes"""
    samples = frame.samples if isinstance(frame, SignalFrame) else np.asarray(frame, dtype=np.float64)
    counts = np.rint(samples * (PCM_FULL_SCALE / full_scale_volts))
    return np.clip(counts, -PCM_FULL_SCALE, PCM_FULL_SCALE - 1).astype("<i2").tobytes()


def frame_pcm(frame, frame_len):
    """Cut a long recording into consecutive frames; a short tail is dropped"""
    if frame_len < 1:
        raise ParameterError("frame_len must be >= 1")
    count = len(frame) // frame_len
    return [
        SignalFrame(frame.channel, frame.samples[i * frame_len:(i + 1) * frame_len], frame.sample_rate)
        for i in range(count)
    ]


def one_hot(label):
    vector = np.zeros(len(StateLabel))
    vector[int(StateLabel.parse(label))] = 1.0
    return vector


def split_dataset(examples, ratios=DEFAULT_SPLIT_RATIOS, seed=0):
    """Stratified train/validation/test split.

    Each class is shuffled with the seeded generator; test takes floor(n*test),
    validation takes floor(n*val) and what is left goes to training.
    """
    ratios = tuple(float(r) for r in ratios)
    if len(ratios) != 3 or any(not r > 0 for r in ratios):
        raise ParameterError(f"Split ratios must be three positive numbers, got {ratios}")
    if abs(sum(ratios) - 1.0) > 1e-9:
        raise ParameterError(f"Split ratios must sum to 1, got {sum(ratios)}")

    examples = list(examples)
    split = DataSplit()
    if not examples:
        return split

    _, val_ratio, test_ratio = ratios
    rng = np.random.default_rng(int(seed))
    for state in StateLabel:
        members = [i for i, example in enumerate(examples) if example.label == state]
        if not members:
            continue
        order = rng.permutation(np.asarray(members))
        n = order.size
        test_end = math.floor(n * test_ratio + 1e-9)
        val_end = test_end + math.floor(n * val_ratio + 1e-9)
        split.test.extend(examples[i] for i in order[:test_end])
        split.validation.extend(examples[i] for i in order[test_end:val_end])
        split.train.extend(examples[i] for i in order[val_end:])

    logger.info("Split %d examples into train/val/test = %s", len(examples), split.sizes)
    return split


def examples_to_arrays(examples):
    """Stack examples into a feature matrix and an integer label vector"""
    examples = list(examples)
    if not examples:
        return np.zeros((0, N_FEATURES)), np.zeros(0, dtype=np.int64)
    X = np.vstack([example.features for example in examples])
    y = np.array([int(example.label) for example in examples], dtype=np.int64)
    return X, y


def write_dataset_csv(examples, path):
    """Write the labeled feature file: header f1..f12,label"""
    X, y = examples_to_arrays(examples)
    df = pd.DataFrame(X, columns=FEATURE_COLUMNS)
    df["label"] = [StateLabel(int(v)).text for v in y]
    df.to_csv(path, index=False)
    return path


def read_dataset_csv(path):
    """Read and validate a labeled feature file"""
    try:
        df = pd.read_csv(path, dtype=str, keep_default_na=False)
    except pd.errors.EmptyDataError:
        raise FormatError(f"{path}: file is empty", row=1) from None
    except pd.errors.ParserError as e:
        raise FormatError(f"{path}: {e}") from None

    expected = FEATURE_COLUMNS + ["label"]
    if list(df.columns) != expected:
        raise FormatError(
            f"{path}: expected header {','.join(expected)}, got {','.join(map(str, df.columns))}", row=1
        )

    examples = []
    for i, row in enumerate(df.itertuples(index=False)):
        line = i + 2
        values = list(row)
        try:
            features = np.array([float(v) for v in values[:N_FEATURES]])
            example = LabeledExample(features, values[N_FEATURES])
        except (ValueError, ParameterError) as e:
            raise FormatError(f"{path}: row {line}: {e}", row=line) from None
        examples.append(example)
    return examples
