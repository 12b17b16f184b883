"""Signal-processing primitives: convolution, fractional delays, minimum-phase
high-pass design, Welch PSD and one-third octave band integration."""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from importlib import resources
from pathlib import Path

import numpy as np
import scipy.signal

from .errors import InvalidArgument

__all__ = [
    "Signal",
    "ImpulseResponse",
    "PsdEstimate",
    "ThirdOctaveBands",
    "convolve",
    "fractional_delay_fir",
    "minimum_phase",
    "min_phase_highpass",
    "welch_psd",
    "third_octave_power",
    "load_band_importance",
    "save_taps",
    "load_taps",
]

# direct summation below this many multiply-adds, FFT above
_DIRECT_CONV_LIMIT = 2_000_000


@dataclass(frozen=True)
class Signal:
    """Real-valued, finite sample sequence at a fixed rate."""

    samples: np.ndarray
    sample_rate_hz: int

    def __post_init__(self) -> None:
        samples = np.asarray(self.samples, dtype=float)
        if samples.ndim != 1:
            raise InvalidArgument("Signal samples must be one-dimensional")
        if not np.all(np.isfinite(samples)):
            raise InvalidArgument("Signal contains NaN or Inf")
        if int(self.sample_rate_hz) != self.sample_rate_hz or self.sample_rate_hz <= 0:
            raise InvalidArgument(f"invalid sample rate {self.sample_rate_hz!r}")
        object.__setattr__(self, "samples", samples)
        object.__setattr__(self, "sample_rate_hz", int(self.sample_rate_hz))

    def __len__(self) -> int:
        return self.samples.shape[0]

    def energy(self) -> float:
        return float(np.dot(self.samples, self.samples))


@dataclass(frozen=True)
class ImpulseResponse:
    """Causal FIR taps with the rate they were designed for."""

    taps: np.ndarray
    sample_rate_hz: int

    def __post_init__(self) -> None:
        taps = np.asarray(self.taps, dtype=float)
        if taps.ndim != 1 or taps.size == 0:
            raise InvalidArgument("ImpulseResponse needs a non-empty 1-D tap array")
        if not np.all(np.isfinite(taps)):
            raise InvalidArgument("ImpulseResponse contains NaN or Inf")
        object.__setattr__(self, "taps", taps)

    def __len__(self) -> int:
        return self.taps.shape[0]


def _conv(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    if a.size * b.size <= _DIRECT_CONV_LIMIT:
        return np.convolve(a, b)
    return scipy.signal.fftconvolve(a, b)


def convolve(a: Signal | np.ndarray, b: np.ndarray) -> Signal | np.ndarray:
    """Full linear convolution of a signal with a tap sequence.

    Returns a :class:`Signal` at ``a``'s rate when ``a`` is a Signal, a plain
    array otherwise. Output length is ``len(a) + len(b) - 1``.
    """
    b = np.asarray(b, dtype=float)
    raw = a.samples if isinstance(a, Signal) else np.asarray(a, dtype=float)
    if raw.size == 0 or b.size == 0:
        raise InvalidArgument("convolve requires non-empty operands")
    out = _conv(raw, b)
    if isinstance(a, Signal):
        return Signal(out, a.sample_rate_hz)
    return out


def fractional_delay_fir(delay_samples: float, half_width: int = 16) -> np.ndarray:
    """Hann-windowed sinc delaying by ``delay_samples + half_width`` samples.

    The kernel has ``2*half_width + 1 + ceil(delay_samples)`` taps and unit
    DC gain. Integer delays give an exact unit impulse.
    """
    if delay_samples < 0 or not math.isfinite(delay_samples):
        raise InvalidArgument(f"delay must be a nonnegative finite number, got {delay_samples}")
    if half_width < 4:
        raise InvalidArgument("half_width must be at least 4")
    n_taps = 2 * half_width + 1 + math.ceil(delay_samples)
    center = half_width + delay_samples
    t = np.arange(n_taps) - center
    window = np.where(np.abs(t) < half_width + 1, 0.5 * (1.0 + np.cos(np.pi * t / (half_width + 1))), 0.0)
    taps = np.sinc(t) * window
    return taps / taps.sum()


def minimum_phase(taps: np.ndarray, n_fft: int | None = None) -> np.ndarray:
    """Minimum-phase FIR with the same magnitude response and length.

    Uses real-cepstrum folding on an ``n_fft``-point grid. Spectral nulls are
    floored far below any realistic stopband so the logarithm stays finite.
    """
    taps = np.asarray(taps, dtype=float)
    n = taps.size
    if n_fft is None:
        n_fft = 1 << max(16, int(math.ceil(math.log2(64 * n))))
    mag = np.abs(np.fft.rfft(taps, n_fft))
    floor = 1e-13 * mag.max()
    log_mag = np.log(np.maximum(mag, floor))
    cep = np.fft.irfft(log_mag, n_fft)
    fold = np.zeros(n_fft)
    fold[0] = cep[0]
    fold[1 : n_fft // 2] = 2.0 * cep[1 : n_fft // 2]
    fold[n_fft // 2] = cep[n_fft // 2]
    spectrum = np.exp(np.fft.rfft(fold))
    return np.fft.irfft(spectrum, n_fft)[:n]


def _linear_phase_highpass(cutoff_hz: float, order: int, sample_rate_hz: int) -> np.ndarray:
    """Kaiser-window linear-phase high-pass whose zero-phase amplitude is positive.

    The centre tap is lifted by 1.5x the stopband ripple, which keeps the
    filter linear-phase but moves every zero off the unit circle. Without this
    the cepstrum decays like 1/n and minimum-phase folding is not idempotent.
    """
    beta = scipy.signal.kaiser_beta(55.0)
    taps = scipy.signal.firwin(
        order + 1, cutoff_hz, window=("kaiser", beta), pass_zero=False, fs=sample_rate_hz
    )
    n_fft = 1 << max(16, int(math.ceil(math.log2(16 * (order + 1)))))
    k = np.arange(n_fft // 2 + 1)
    amplitude = np.real(np.fft.rfft(taps, n_fft) * np.exp(2j * np.pi * k * (order // 2) / n_fft))
    ripple = max(-amplitude.min(), 0.0)
    taps[order // 2] += 1.5 * ripple
    return taps


def min_phase_highpass(cutoff_hz: float, order: int = 512, sample_rate_hz: int = 16000) -> np.ndarray:
    """Minimum-phase FIR high-pass of length ``order + 1``.

    The linear-phase prototype is converted with :func:`minimum_phase`, which
    preserves its magnitude response and therefore its energy.
    """
    if sample_rate_hz <= 0:
        raise InvalidArgument("sample rate must be positive")
    if not 0 < cutoff_hz < sample_rate_hz / 2:
        raise InvalidArgument(f"cutoff {cutoff_hz} Hz outside (0, Nyquist)")
    if order <= 0 or order % 2:
        raise InvalidArgument("order must be a positive even integer")
    return minimum_phase(_linear_phase_highpass(cutoff_hz, order, sample_rate_hz))


@dataclass(frozen=True)
class PsdEstimate:
    """One-sided power spectral density on a uniform grid from 0 to Nyquist.

    Each bin is taken to represent a rectangle of width ``resolution_hz``
    centred on its frequency, clipped to ``[0, Nyquist]``. All integrals below
    use that rule, so band powers always sum to at most :meth:`total_power`.
    """

    frequencies_hz: np.ndarray
    power: np.ndarray
    resolution_hz: float

    @property
    def nyquist_hz(self) -> float:
        return float(self.frequencies_hz[-1])

    def _bin_edges(self) -> tuple[np.ndarray, np.ndarray]:
        half = 0.5 * self.resolution_hz
        lo = np.maximum(self.frequencies_hz - half, 0.0)
        hi = np.minimum(self.frequencies_hz + half, self.nyquist_hz)
        return lo, hi

    def integrate(self, low_hz: float, high_hz: float) -> float:
        lo, hi = self._bin_edges()
        overlap = np.clip(np.minimum(hi, high_hz) - np.maximum(lo, low_hz), 0.0, None)
        return float(np.dot(self.power, overlap))

    def total_power(self) -> float:
        lo, hi = self._bin_edges()
        return float(np.dot(self.power, hi - lo))


def welch_psd(s: Signal, segment_len: int = 512, overlap_fraction: float = 0.5) -> PsdEstimate:
    """Welch PSD estimate with a Hann window (density scaling, mean removed)."""
    if not 0 <= overlap_fraction < 1:
        raise InvalidArgument("overlap_fraction must lie in [0, 1)")
    if segment_len <= 0 or len(s) < segment_len:
        raise InvalidArgument(f"segment length {segment_len} exceeds signal length {len(s)}")
    noverlap = int(round(overlap_fraction * segment_len))
    freqs, power = scipy.signal.welch(
        s.samples,
        fs=s.sample_rate_hz,
        window="hann",
        nperseg=segment_len,
        noverlap=noverlap,
        scaling="density",
    )
    return PsdEstimate(freqs, np.maximum(power, 0.0), s.sample_rate_hz / segment_len)


@dataclass(frozen=True)
class ThirdOctaveBands:
    """Contiguous band table with importance weights normalised to sum 1."""

    center_hz: np.ndarray
    edges_hz: np.ndarray
    importance: np.ndarray = field(repr=False)

    def __post_init__(self) -> None:
        center = np.asarray(self.center_hz, dtype=float)
        edges = np.asarray(self.edges_hz, dtype=float).reshape(-1, 2)
        importance = np.asarray(self.importance, dtype=float)
        if not (center.size == edges.shape[0] == importance.size) or center.size == 0:
            raise InvalidArgument("band table columns have inconsistent lengths")
        if np.any(edges[:, 1] <= edges[:, 0]):
            raise InvalidArgument("band edges must satisfy low < high")
        if np.any(np.abs(edges[1:, 0] - edges[:-1, 1]) > 1e-6 * edges[1:, 0]):
            raise InvalidArgument("bands must be contiguous and non-overlapping")
        if np.any(importance < 0) or importance.sum() <= 0:
            raise InvalidArgument("importance weights must be nonnegative with positive sum")
        object.__setattr__(self, "center_hz", center)
        object.__setattr__(self, "edges_hz", edges)
        object.__setattr__(self, "importance", importance / importance.sum())

    def __len__(self) -> int:
        return self.center_hz.size

    def clipped(self, nyquist_hz: float) -> "ThirdOctaveBands":
        """Truncate bands at Nyquist; bands starting at or above it are dropped."""
        keep = self.edges_hz[:, 0] < nyquist_hz
        edges = self.edges_hz[keep].copy()
        edges[:, 1] = np.minimum(edges[:, 1], nyquist_hz)
        return ThirdOctaveBands(self.center_hz[keep], edges, self.importance[keep])

    def subset(self, mask: np.ndarray) -> "ThirdOctaveBands":
        """Bands selected by ``mask``; weights renormalised. Contiguity is not required."""
        mask = np.asarray(mask, dtype=bool)
        obj = object.__new__(ThirdOctaveBands)
        importance = self.importance[mask]
        object.__setattr__(obj, "center_hz", self.center_hz[mask])
        object.__setattr__(obj, "edges_hz", self.edges_hz[mask])
        object.__setattr__(obj, "importance", importance / importance.sum())
        return obj


def load_band_importance(path: str | Path | None = None) -> ThirdOctaveBands:
    """Read a ``center_hz low_hz high_hz importance`` table ('#' comments allowed).

    Without a path the bundled speech-intelligibility table is used.
    """
    if path is None:
        text = resources.files("ssanc").joinpath("data/sii_third_octave.txt").read_text()
    else:
        text = Path(path).read_text()
    rows = []
    for lineno, line in enumerate(text.splitlines(), 1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        parts = line.split()
        if len(parts) != 4:
            raise InvalidArgument(f"band table line {lineno}: expected 4 columns, got {len(parts)}")
        rows.append([float(p) for p in parts])
    if not rows:
        raise InvalidArgument("band table is empty")
    table = np.array(rows)
    return ThirdOctaveBands(table[:, 0], table[:, 1:3], table[:, 3])


def third_octave_power(psd: PsdEstimate, bands: ThirdOctaveBands) -> np.ndarray:
    """Integrate ``psd`` over each band's ``[low, high)`` interval."""
    if np.any(bands.edges_hz[:, 1] > psd.nyquist_hz * (1 + 1e-12)):
        raise InvalidArgument(
            f"band edge {bands.edges_hz[:, 1].max():.1f} Hz above Nyquist {psd.nyquist_hz:.1f} Hz"
        )
    return np.array([psd.integrate(lo, hi) for lo, hi in bands.edges_hz])


def save_taps(path: str | Path, taps: np.ndarray, header: str | None = None) -> None:
    """Write one tap per line with 17 significant digits."""
    lines = [f"# {header}"] if header else []
    lines += [f"{t:.17g}" for t in np.asarray(taps, dtype=float)]
    Path(path).write_text("\n".join(lines) + "\n")


def load_taps(path: str | Path) -> np.ndarray:
    values = []
    for line in Path(path).read_text().splitlines():
        line = line.split("#", 1)[0].strip()
        if line:
            values.append(float(line))
    if not values:
        raise InvalidArgument(f"{path}: no taps found")
    return np.array(values)
