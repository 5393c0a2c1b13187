"""Spectra, target-frequency detection and the zero-phase band-pass filter."""

from __future__ import annotations

from dataclasses import dataclass, field
from functools import lru_cache

import numpy as np
from scipy import signal

from .traces import Trace, TraceSet

DEFAULT_ORDER = 4
DEFAULT_BANDWIDTH_FRACTION = 0.01
SETTLING_FLOOR = 1e-8
# Padding on each side of a forward-backward pass, in settling lengths.
PAD_SETTLING_MULTIPLE = 3


class SpectralError(ValueError):
    """No usable target frequency, or an unrealizable filter."""


@dataclass(frozen=True, eq=False)
class Spectrum:
    magnitudes: np.ndarray
    bin_hz: float
    sample_rate_hz: float

    @property
    def frequencies(self) -> np.ndarray:
        return np.arange(self.magnitudes.size) * self.bin_hz


def magnitude_spectrum(samples: np.ndarray) -> np.ndarray:
    """One-sided |DFT| scaled by 1/n, so the DC bin is the sample mean."""
    x = np.asarray(samples, dtype=np.float64)
    return np.abs(np.fft.rfft(x, axis=-1)) / x.shape[-1]


def mean_magnitude_spectrum(ts: TraceSet) -> Spectrum:
    if len(ts) == 0:
        raise ValueError("empty trace set")
    n = ts.common_length
    acc = np.zeros(n // 2 + 1)
    for tr in ts.traces:
        acc += magnitude_spectrum(tr.samples)
    fs = ts.sample_rate_hz
    return Spectrum(acc / len(ts), fs / n, fs)


def default_dc_exclusion_hz(spec: Spectrum) -> float:
    return max(2 * spec.bin_hz, 1000.0)


def detect_target_frequency(spec: Spectrum, dc_exclusion_hz: float | None = None) -> float:
    """Frequency of the strongest bin above ``dc_exclusion_hz``.

    DC is always the tallest line of a power trace, so this picks the
    second-highest peak of the full spectrum.
    """
    if dc_exclusion_hz is None:
        dc_exclusion_hz = default_dc_exclusion_hz(spec)
    freqs = spec.frequencies
    keep = freqs > dc_exclusion_hz
    if not keep.any():
        raise SpectralError(
            f"no spectral bins above the DC exclusion of {dc_exclusion_hz} Hz"
        )
    cand = spec.magnitudes[keep]
    k = int(np.argmax(cand))
    scale = float(spec.magnitudes.max())
    if scale == 0 or cand[k] - float(np.median(cand)) <= 1e-9 * scale:
        raise SpectralError("no spectral peak above the DC exclusion: spectrum is flat")
    return float(freqs[keep][k])


@dataclass(frozen=True, eq=False)
class FilterSpec:
    """Butterworth band-pass design; ``sos`` is derived from the parameters."""

    center_hz: float
    bandwidth_fraction: float
    order: int
    sample_rate_hz: float
    sos: np.ndarray = field(repr=False, default=None)

    @property
    def band_hz(self) -> tuple[float, float]:
        return (
            self.center_hz * (1 - self.bandwidth_fraction),
            self.center_hz * (1 + self.bandwidth_fraction),
        )

    def params(self) -> dict:
        return {
            "center_hz": self.center_hz,
            "bandwidth_fraction": self.bandwidth_fraction,
            "order": self.order,
            "sample_rate_hz": self.sample_rate_hz,
        }

    @property
    def settling_length(self) -> int:
        return _settling_length(self.center_hz, self.bandwidth_fraction, self.order, self.sample_rate_hz)

    @property
    def pad_length(self) -> int:
        return PAD_SETTLING_MULTIPLE * self.settling_length

    def gain(self, freq_hz) -> np.ndarray:
        """Single-pass |H| of the realized digital filter."""
        _, h = signal.sosfreqz(self.sos, worN=np.atleast_1d(freq_hz), fs=self.sample_rate_hz)
        return np.abs(h)


def design_bandpass(
    center_hz: float,
    bandwidth_fraction: float = DEFAULT_BANDWIDTH_FRACTION,
    order: int = DEFAULT_ORDER,
    sample_rate_hz: float = 2e6,
) -> FilterSpec:
    """Second-order-section Butterworth band-pass with -3 dB points at the band edges."""
    if int(order) != order or order < 1:
        raise SpectralError(f"filter order must be a positive integer, got {order}")
    if not (center_hz > 0 and bandwidth_fraction > 0 and sample_rate_hz > 0):
        raise SpectralError("center, bandwidth fraction and sample rate must be positive")
    lo, hi = center_hz * (1 - bandwidth_fraction), center_hz * (1 + bandwidth_fraction)
    nyq = sample_rate_hz / 2
    if not (0 < lo < hi < nyq):
        raise SpectralError(
            f"passband [{lo:.6g}, {hi:.6g}] Hz must lie strictly inside (0, {nyq:.6g}) Hz"
        )
    sos = _design_sos(float(center_hz), float(bandwidth_fraction), int(order), float(sample_rate_hz))
    return FilterSpec(float(center_hz), float(bandwidth_fraction), int(order), float(sample_rate_hz), sos.copy())


@lru_cache(maxsize=64)
def _design_sos(center_hz, bandwidth_fraction, order, sample_rate_hz) -> np.ndarray:
    lo, hi = center_hz * (1 - bandwidth_fraction), center_hz * (1 + bandwidth_fraction)
    # scipy prewarps both band edges before the bilinear transform.
    sos = signal.butter(order, [lo, hi], btype="bandpass", fs=sample_rate_hz, output="sos")
    poles = np.concatenate([np.roots(sec[3:]) for sec in sos])
    if np.any(np.abs(poles) >= 1):
        raise SpectralError("band-pass realization is unstable")
    return sos


@lru_cache(maxsize=64)
def _settling_length(center_hz, bandwidth_fraction, order, sample_rate_hz) -> int:
    """Samples until the impulse response stays below SETTLING_FLOOR of its peak."""
    sos = _design_sos(center_hz, bandwidth_fraction, order, sample_rate_hz)
    # Envelope time constant is ~1/(pi * bandwidth); start with a generous window.
    bw = 2 * center_hz * bandwidth_fraction
    n = max(1024, int(40 * order * sample_rate_hz / bw))
    while True:
        imp = np.zeros(n)
        imp[0] = 1.0
        h = np.abs(signal.sosfilt(sos.copy(), imp))
        above = np.nonzero(h > SETTLING_FLOOR * h.max())[0]
        last = int(above[-1]) + 1
        if last < 0.8 * n:
            return last
        n *= 2


def apply_zero_phase(filt: FilterSpec, trace: Trace) -> Trace:
    """Forward-backward filtering with reflect padding; output length equals input."""
    if trace.sample_rate_hz != filt.sample_rate_hz:
        raise SpectralError(
            f"trace sampled at {trace.sample_rate_hz} Hz but filter designed for {filt.sample_rate_hz} Hz"
        )
    pad = filt.pad_length
    if len(trace) <= pad:
        raise SpectralError(
            f"trace of {len(trace)} samples too short for zero-phase filtering; "
            f"need more than {pad} ({PAD_SETTLING_MULTIPLE}x settling length {filt.settling_length})"
        )
    y = signal.sosfiltfilt(filt.sos, trace.samples, padtype="even", padlen=pad)
    return Trace(y, trace.sample_rate_hz, trace.markers, trace.meta)


def filter_set(filt: FilterSpec, ts: TraceSet) -> TraceSet:
    return TraceSet(tuple(apply_zero_phase(filt, t) for t in ts.traces), ts.meta)
