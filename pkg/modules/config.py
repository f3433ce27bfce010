"""Run configuration: defaults, optional key = value file, command-line flags.

Precedence is flag > config file > default. Everything is validated before a
command starts work, so a bad value never surfaces halfway through a run.
"""

import logging
from dataclasses import dataclass, fields

from modules.dsp import CHANNEL_SETS, feature_width
from modules.errors import ParameterError
from modules.neuralnet import BN_ORDERS, ModelArchitecture, TrainConfig
from modules.signals import (
    DEFAULT_COUNTS,
    DEFAULT_FRAME_LEN,
    DEFAULT_HARMONIC_SCALE,
    DEFAULT_SAMPLE_RATE,
    FULL_SCALE_VOLTS,
    FUNDAMENTAL_HZ,
    REFERENCE_SPLIT_RATIOS,
    Channel,
    DatasetSpec,
    StateLabel,
    is_power_of_two,
)

logger = logging.getLogger(__name__)

_TRUE = {"1", "true", "yes", "on"}
_FALSE = {"0", "false", "no", "off"}
SPLIT_PRESETS = {"default": "0.70,0.10,0.20", "reference": ",".join(f"{r:.2f}" for r in REFERENCE_SPLIT_RATIOS)}
REPORT_FORMATS = ("text", "json")


@dataclass
class RunConfig:
    # synthesis
    seed: int = 0
    frame_len: int = DEFAULT_FRAME_LEN
    sample_rate: float = DEFAULT_SAMPLE_RATE
    nominal: int = DEFAULT_COUNTS[StateLabel.NOMINAL]
    current: int = DEFAULT_COUNTS[StateLabel.CURRENT]
    defective: int = DEFAULT_COUNTS[StateLabel.DEFECTIVE]
    harmonics: bool = True
    harmonic_scale: float = DEFAULT_HARMONIC_SCALE
    fundamental: float = FUNDAMENTAL_HZ
    full_scale_volts: float = FULL_SCALE_VOLTS

    # paths
    dataset: str = None
    out_dir: str = "."
    model: str = None
    test: str = None
    predictions: str = None
    input: str = None

    # training
    epochs: int = 20
    batch_size: int = 32
    learning_rate: float = 0.001
    beta1: float = 0.9
    beta2: float = 0.999
    adam_epsilon: float = 1e-7
    shuffle: bool = True
    bn_epsilon: float = 1e-3
    bn_momentum: float = 0.99
    bn_order: str = "post_activation"
    channels: str = "both"
    hidden: str = "256,128"
    split: str = "0.70,0.10,0.20"

    # analysis and prediction
    channel: str = Channel.ACOUSTIC.value
    interleaved: bool = False
    state: str = None
    max_lag: int = 100
    hist_bins: int = 50
    row: int = None
    report_format: str = "text"

    # streaming
    listen: str = None
    max_frame_len: int = DEFAULT_FRAME_LEN
    max_connections: int = None

    @classmethod
    def keys(cls):
        return [f.name for f in fields(cls)]

    @property
    def split_ratios(self):
        text = SPLIT_PRESETS.get(self.split, self.split)
        try:
            ratios = tuple(float(part) for part in text.split(","))
        except ValueError:
            raise ParameterError(f"split must be three comma-separated ratios, got {self.split!r}") from None
        if len(ratios) != 3 or any(not r > 0 for r in ratios) or abs(sum(ratios) - 1.0) > 1e-9:
            raise ParameterError(f"split ratios must be three positive numbers summing to 1, got {self.split!r}")
        return ratios

    @property
    def hidden_sizes(self):
        try:
            sizes = tuple(int(part) for part in self.hidden.split(",") if part.strip())
        except ValueError:
            raise ParameterError(f"hidden must be comma-separated integers, got {self.hidden!r}") from None
        if any(size < 1 for size in sizes):
            raise ParameterError(f"hidden layer widths must be positive, got {self.hidden!r}")
        return sizes

    @property
    def listen_address(self):
        if self.listen is None:
            return None
        host, sep, port = self.listen.rpartition(":")
        if not sep or not port.isdigit() or not 0 <= int(port) <= 65535:
            raise ParameterError(f"listen must be host:port, got {self.listen!r}")
        return host or "127.0.0.1", int(port)

    def dataset_spec(self):
        return DatasetSpec(
            frame_len=self.frame_len,
            counts={
                StateLabel.NOMINAL: self.nominal,
                StateLabel.CURRENT: self.current,
                StateLabel.DEFECTIVE: self.defective,
            },
            harmonics=self.harmonics,
            harmonic_scale=self.harmonic_scale,
            fundamental=self.fundamental,
            sample_rate=self.sample_rate,
            seed=self.seed,
        )

    def architecture(self):
        return ModelArchitecture(
            input_dim=feature_width(self.channels),
            hidden=self.hidden_sizes,
            bn_order=self.bn_order,
            bn_epsilon=self.bn_epsilon,
            bn_momentum=self.bn_momentum,
            channels=self.channels,
        )

    def train_config(self):
        return TrainConfig(
            epochs=self.epochs,
            batch_size=self.batch_size,
            seed=self.seed,
            shuffle=self.shuffle,
            learning_rate=self.learning_rate,
            beta1=self.beta1,
            beta2=self.beta2,
            adam_epsilon=self.adam_epsilon,
        )

    def validate(self):
        """Check every value against the preconditions of the module that uses it"""
        if self.seed < 0:
            raise ParameterError(f"seed must be >= 0, got {self.seed}")
        if min(self.nominal, self.current, self.defective) < 0:
            raise ParameterError("class counts must be >= 0")
        if not self.full_scale_volts > 0:
            raise ParameterError("full_scale_volts must be positive")
        if self.channel not in {c.value for c in Channel}:
            raise ParameterError(f"channel must be acoustic or vibration, got {self.channel!r}")
        if self.channels not in CHANNEL_SETS:
            raise ParameterError(f"channels must be one of {CHANNEL_SETS}, got {self.channels!r}")
        if self.bn_order not in BN_ORDERS:
            raise ParameterError(f"bn_order must be one of {BN_ORDERS}, got {self.bn_order!r}")
        if self.state is not None:
            StateLabel.parse(self.state)
        if not 0 <= self.max_lag < self.frame_len:
            raise ParameterError(f"max_lag must lie in [0, {self.frame_len}), got {self.max_lag}")
        if self.hist_bins < 1:
            raise ParameterError("hist_bins must be >= 1")
        if self.row is not None and self.row < 0:
            raise ParameterError("row must be >= 0")
        if self.report_format not in REPORT_FORMATS:
            raise ParameterError(f"report_format must be one of {REPORT_FORMATS}, got {self.report_format!r}")
        if not is_power_of_two(self.max_frame_len) or self.max_frame_len < 2:
            raise ParameterError(f"max_frame_len must be a power of two >= 2, got {self.max_frame_len}")
        if self.max_connections is not None and self.max_connections < 1:
            raise ParameterError("max_connections must be >= 1")
        # both properties raise on malformed text
        self.split_ratios
        self.listen_address
        self.dataset_spec().validate()
        self.architecture().validate()
        self.train_config().validate()
        return self


def _coerce(name, kind, value):
    if value is None or isinstance(value, kind) and not (kind is int and isinstance(value, bool)):
        return value
    text = str(value).strip()
    try:
        if kind is bool:
            if text.lower() in _TRUE:
                return True
            if text.lower() in _FALSE:
                return False
            raise ValueError(text)
        if kind is int:
            return int(text)
        if kind is float:
            return float(text)
    except ValueError:
        raise ParameterError(f"{name}: cannot interpret {value!r} as {kind.__name__}") from None
    return text


def load_config_file(path):
    """Parse UTF-8 ``key = value`` lines; ``#`` starts a comment"""
    values = {}
    try:
        with open(path, encoding="utf-8") as f:
            lines = f.readlines()
    except UnicodeDecodeError as e:
        raise ParameterError(f"{path}: config file is not UTF-8 text ({e.reason} at byte {e.start})") from None
    for number, line in enumerate(lines, start=1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        key, sep, value = line.partition("=")
        if not sep or not key.strip():
            raise ParameterError(f"{path}:{number}: expected 'key = value', got {line!r}")
        values[key.strip().replace("-", "_")] = value.strip()
    logger.debug("Loaded %d settings from %s", len(values), path)
    return values


def resolve_config(file_values=None, flags=None):
    """Merge flag > file > default, coerce types and validate"""
    known = {f.name: f.type for f in fields(RunConfig)}
    merged = {}
    for source in (file_values or {}, flags or {}):
        for key, value in source.items():
            key = key.replace("-", "_")
            if key not in known:
                raise ParameterError(f"Unknown setting: {key}")
            if value is not None:
                merged[key] = _coerce(key, known[key], value)
    return RunConfig(**merged).validate()
