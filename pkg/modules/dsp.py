"""Statistics, autocorrelation, spectra, normality tests and feature assembly."""

import logging
from dataclasses import dataclass
from functools import lru_cache

import numpy as np
import pandas as pd
from scipy.stats import norm

from modules.errors import (
    DegenerateSignalError,
    InsufficientDataError,
    ParameterError,
    ShapeError,
)
from modules.signals import N_FEATURES, is_power_of_two

logger = logging.getLogger(__name__)

N_PEAKS = 5
SUMMARY_ROWS = ["mean", "std", "min", "25%", "50%", "75%", "max"]
CHANNEL_SETS = ("both", "acoustic", "vibration")


@dataclass(frozen=True)
class DescriptiveSummary:
    count: int
    mean: float
    std: float
    min: float
    q25: float
    q50: float
    q75: float
    max: float

    def as_dict(self):
        """Values keyed by the summary row labels"""
        return {
            "mean": self.mean, "std": self.std, "min": self.min,
            "25%": self.q25, "50%": self.q50, "75%": self.q75, "max": self.max,
        }


@dataclass(frozen=True)
class AcfSeries:
    values: np.ndarray

    @property
    def lags(self):
        return np.arange(self.values.size)


@dataclass(frozen=True)
class Spectrum:
    """Amplitude density S_x(kF), V/Hz, for k = 0..N-1"""

    bins: np.ndarray
    bin_width: float
    ts: float

    @property
    def n(self):
        return self.bins.size

    @property
    def frequencies(self):
        return np.arange(self.n) * self.bin_width


@dataclass(frozen=True)
class EsdSeries:
    values: np.ndarray
    bin_width: float

    @property
    def frequencies(self):
        return np.arange(self.values.size) * self.bin_width


@dataclass(frozen=True)
class FeatureVector:
    """Network input: 5 peaks + std for acoustic, then the same for vibration"""

    components: np.ndarray

    @property
    def acoustic_peaks(self):
        return self.components[:N_PEAKS]

    @property
    def acoustic_std(self):
        return float(self.components[N_PEAKS])

    @property
    def vibration_peaks(self):
        return self.components[N_PEAKS + 1:2 * N_PEAKS + 1]

    @property
    def vibration_std(self):
        return float(self.components[-1])


@dataclass(frozen=True)
class NormalityResult:
    w_statistic: float
    p_value: float


@dataclass(frozen=True)
class QqSeries:
    theoretical: np.ndarray
    sample: np.ndarray

    @property
    def points(self):
        return list(zip(self.theoretical.tolist(), self.sample.tolist()))


@dataclass(frozen=True)
class BoxStats:
    q1: float
    median: float
    q3: float
    whisker_low: float
    whisker_high: float
    n_outliers: int


def _samples(values):
    if hasattr(values, "samples"):
        values = values.samples
    return np.asarray(values, dtype=np.float64).reshape(-1)


def describe(samples):
    """Count, mean, N-1 std and linearly interpolated quartiles"""
    x = _samples(samples)
    if x.size < 2:
        raise InsufficientDataError(f"describe needs at least 2 samples, got {x.size}")
    stats = pd.Series(x).describe()
    return DescriptiveSummary(
        count=int(stats["count"]),
        mean=float(stats["mean"]),
        std=float(stats["std"]),
        min=float(stats["min"]),
        q25=float(stats["25%"]),
        q50=float(stats["50%"]),
        q75=float(stats["75%"]),
        max=float(stats["max"]),
    )


def summary_table(columns):
    """One column per (state/channel) name, one row per statistic"""
    table = pd.DataFrame(
        {name: describe(values).as_dict() for name, values in columns.items()},
        index=SUMMARY_ROWS,
    )
    table.index.name = "statistic"
    return table


def acf(samples, max_lag):
    """Autocorrelation estimate normalised by N times the population variance"""
    x = _samples(samples)
    n = x.size
    if n < 2:
        raise InsufficientDataError(f"acf needs at least 2 samples, got {n}")
    if not 0 <= max_lag <= n - 2:
        raise ParameterError(f"max_lag must lie in [0, {n - 2}], got {max_lag}")

    centered = x - x.mean()
    var_pop = float(np.mean(centered ** 2))
    if var_pop == 0.0:
        raise DegenerateSignalError("acf is undefined for a constant signal")

    full = np.correlate(centered, centered, mode="full")
    values = full[n - 1:n + max_lag] / (n * var_pop)
    values[0] = 1.0
    return AcfSeries(values)


@lru_cache(maxsize=32)
def _bit_reversal(n):
    bits = n.bit_length() - 1
    index = np.arange(n)
    reversed_index = np.zeros(n, dtype=np.int64)
    for b in range(bits):
        reversed_index |= ((index >> b) & 1) << (bits - 1 - b)
    reversed_index.setflags(write=False)
    return reversed_index


@lru_cache(maxsize=32)
def _twiddles(size):
    w = np.exp(-2j * np.pi * np.arange(size // 2) / size)
    w.setflags(write=False)
    return w


def fft_radix2(x):
    """Iterative decimation-in-time radix-2 transform (unscaled)"""
    x = np.asarray(x, dtype=np.complex128).reshape(-1)
    n = x.size
    if n < 2 or not is_power_of_two(n):
        raise ShapeError(f"Radix-2 transform needs a power-of-two length >= 2, got {n}")

    x = x[_bit_reversal(n)]
    size = 2
    while size <= n:
        half = size // 2
        blocks = x.reshape(-1, size)
        even = blocks[:, :half]
        odd = blocks[:, half:] * _twiddles(size)
        x = np.concatenate([even + odd, even - odd], axis=1).reshape(-1)
        size *= 2
    return x


def dft_spectrum(frame):
    """Amplitude density S(kF) = Ts * sum x(nTs) exp(-j2pi nk/N)"""
    x = _samples(frame)
    ts = frame.ts if hasattr(frame, "ts") else 1.0
    bins = ts * fft_radix2(x)
    return Spectrum(bins=bins, bin_width=1.0 / (x.size * ts), ts=ts)


def esd(spectrum):
    """Energy spectral density |S(kF)|^2"""
    values = spectrum.bins.real ** 2 + spectrum.bins.imag ** 2
    return EsdSeries(values=values, bin_width=spectrum.bin_width)


def energy(frame):
    """Time-domain energy Ts * sum x^2"""
    x = _samples(frame)
    ts = frame.ts if hasattr(frame, "ts") else 1.0
    return ts * float(np.dot(x, x))


def esd_energy(series):
    return series.bin_width * float(np.sum(series.values))


def top_peaks(spectrum, k=N_PEAKS):
    """The k largest one-sided magnitudes (DC excluded), descending, lower index first on ties"""
    half = spectrum.n // 2
    if not 1 <= k <= half:
        raise ParameterError(f"k must lie in [1, {half}], got {k}")
    magnitudes = np.abs(spectrum.bins[1:half + 1])
    order = np.argsort(-magnitudes, kind="stable")[:k]
    return magnitudes[order]


def sample_std(samples):
    """Same value as describe(samples).std without building the full summary"""
    x = _samples(samples)
    if x.size < 2:
        raise InsufficientDataError(f"std needs at least 2 samples, got {x.size}")
    return float(np.std(x, ddof=1))


def extract_features(pair):
    """Assemble the 12-component feature vector of one frame pair"""
    components = np.empty(N_FEATURES)
    components[:N_PEAKS] = top_peaks(dft_spectrum(pair.acoustic), N_PEAKS)
    components[N_PEAKS] = sample_std(pair.acoustic)
    components[N_PEAKS + 1:2 * N_PEAKS + 1] = top_peaks(dft_spectrum(pair.vibration), N_PEAKS)
    components[-1] = sample_std(pair.vibration)
    return FeatureVector(components)


def feature_width(channels="both"):
    if channels not in CHANNEL_SETS:
        raise ParameterError(f"channels must be one of {CHANNEL_SETS}, got {channels!r}")
    return N_FEATURES if channels == "both" else N_FEATURES // 2


def select_channels(features, channels="both"):
    """Keep the feature columns of one channel (or both) for ablation runs"""
    feature_width(channels)
    features = np.asarray(features, dtype=np.float64)
    if channels == "acoustic":
        return features[..., :N_FEATURES // 2]
    if channels == "vibration":
        return features[..., N_FEATURES // 2:]
    return features


# Royston (1995) polynomial coefficients, highest power first
_C1 = [-2.706056, 4.434685, -2.07119, -0.147981, 0.221157, 0.0]
_C2 = [-3.582633, 5.682633, -1.752461, -0.293762, 0.042981, 0.0]
_C3 = [-0.0006714, 0.025054, -0.39978, 0.544]
_C4 = [-0.0020322, 0.062767, -0.77857, 1.3822]
_C5 = [0.0038915, -0.083751, -0.31082, -1.5861]
_C6 = [0.0030302, -0.082676, -0.4803]
_G = [0.459, -2.273]
_SMALL = 1e-19


def _shapiro_coefficients(n):
    """Normalised coefficients a_1..a_{n//2} for the largest-minus-smallest differences"""
    half = n // 2
    if n == 3:
        return np.array([np.sqrt(0.5)])
    m = norm.ppf((np.arange(1, half + 1) - 0.375) / (n + 0.25))
    summ2 = 2.0 * np.sum(m ** 2)
    ssumm2 = np.sqrt(summ2)
    rsn = 1.0 / np.sqrt(n)
    a1 = np.polyval(_C1, rsn) - m[0] / ssumm2
    a = -m.copy()
    if n > 5:
        a2 = -m[1] / ssumm2 + np.polyval(_C2, rsn)
        fac = np.sqrt((summ2 - 2 * m[0] ** 2 - 2 * m[1] ** 2) / (1 - 2 * a1 ** 2 - 2 * a2 ** 2))
        a /= fac
        a[0], a[1] = a1, a2
    else:
        fac = np.sqrt((summ2 - 2 * m[0] ** 2) / (1 - 2 * a1 ** 2))
        a /= fac
        a[0] = a1
    return a


def shapiro_wilk(samples):
    """Shapiro-Wilk W and p-value using Royston's approximation (algorithm AS R94)"""
    x = np.sort(_samples(samples))
    n = x.size
    if not 3 <= n <= 5000:
        raise ParameterError(f"Shapiro-Wilk needs 3 <= n <= 5000, got {n}")
    if x[-1] - x[0] < _SMALL * max(1.0, abs(x[-1])):
        raise DegenerateSignalError("Shapiro-Wilk is undefined for a constant sample")

    a = _shapiro_coefficients(n)
    half = a.size
    diffs = x[::-1][:half] - x[:half]
    centered = x - x.mean()
    w = float(np.dot(a, diffs) ** 2 / np.dot(centered, centered))
    w = min(w, 1.0)

    if n == 3:
        p = 6.0 / np.pi * (np.arcsin(np.sqrt(w)) - np.arcsin(np.sqrt(0.75)))
        return NormalityResult(w, float(min(max(p, 0.0), 1.0)))

    w1 = 1.0 - w
    if w1 <= 0.0:
        return NormalityResult(w, 1.0)
    y = np.log(w1)
    if n <= 11:
        gamma = np.polyval(_G, n)
        if y >= gamma:
            return NormalityResult(w, _SMALL)
        y = -np.log(gamma - y)
        m = np.polyval(_C3, n)
        s = np.exp(np.polyval(_C4, n))
    else:
        log_n = np.log(n)
        m = np.polyval(_C5, log_n)
        s = np.exp(np.polyval(_C6, log_n))
    p = float(norm.sf((y - m) / s))
    return NormalityResult(w, p)


def qq_points(samples):
    """Normal Q-Q pairs using Blom plotting positions"""
    x = np.sort(_samples(samples))
    n = x.size
    if n < 3:
        raise InsufficientDataError(f"Q-Q plot needs at least 3 samples, got {n}")
    positions = (np.arange(1, n + 1) - 0.375) / (n + 0.25)
    return QqSeries(theoretical=norm.ppf(positions), sample=x)


def histogram(samples, bins=50):
    """Amplitude histogram rows with the fitted normal density at each bin centre"""
    x = _samples(samples)
    if x.size < 2:
        raise InsufficientDataError(f"histogram needs at least 2 samples, got {x.size}")
    if int(bins) < 1:
        raise ParameterError(f"bins must be >= 1, got {bins}")
    counts, edges = np.histogram(x, bins=int(bins))
    centres = (edges[:-1] + edges[1:]) / 2.0
    scale = x.std(ddof=1)
    density = norm.pdf(centres, loc=x.mean(), scale=scale) if scale > 0 else np.zeros_like(centres)
    return pd.DataFrame(
        {"bin_left": edges[:-1], "bin_right": edges[1:], "count": counts, "normal_density": density}
    )


def box_stats(samples):
    """Quartiles, 1.5*IQR whiskers and the number of points beyond them"""
    x = _samples(samples)
    if x.size < 2:
        raise InsufficientDataError(f"box plot needs at least 2 samples, got {x.size}")
    q1, median, q3 = np.quantile(x, [0.25, 0.5, 0.75])
    iqr = q3 - q1
    inside = x[(x >= q1 - 1.5 * iqr) & (x <= q3 + 1.5 * iqr)]
    return BoxStats(
        q1=float(q1),
        median=float(median),
        q3=float(q3),
        whisker_low=float(inside.min()),
        whisker_high=float(inside.max()),
        n_outliers=int(x.size - inside.size),
    )


def waveform(frame):
    x = _samples(frame)
    ts = frame.ts if hasattr(frame, "ts") else 1.0
    return pd.DataFrame({"time_s": np.arange(x.size) * ts, "value": x})
