"""Trace containers, trace-set file I/O, ADC quantization and averaging.

Binary trace-set layout (all little-endian)::

    b"MCH1" | version u16 | trace count u32 | samples per trace u32 |
    sample_rate_hz f64 | metadata length u32 | metadata (UTF-8 JSON) |
    trace_count * sample_count float32 samples, trace-major

The metadata blob carries set-level ``meta`` plus per-trace ``meta`` and
``markers``. CSV sets store one trace per row with a ``<stem>.meta.json``
sidecar holding the same metadata blob and the sample rate.
"""

from __future__ import annotations

import csv
import json
import math
import struct
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Iterable, Sequence

import numpy as np

MAGIC = b"MCH1"
FORMAT_VERSION = 1
_HEADER = struct.Struct("<4sHIIdI")


class TraceFormatError(ValueError):
    """Raised for malformed or inconsistent trace files and sets."""


@dataclass(frozen=True)
class Marker:
    label: str
    start: int
    end: int

    def to_json(self) -> list:
        return [self.label, self.start, self.end]

    @classmethod
    def from_json(cls, obj: Sequence) -> "Marker":
        label, start, end = obj
        return cls(str(label), int(start), int(end))


@dataclass(frozen=True, eq=False)
class Trace:
    """One uniformly sampled voltage-drop waveform.

    ``samples`` is stored as a read-only float64 array.
    """

    samples: np.ndarray
    sample_rate_hz: float
    markers: tuple[Marker, ...] = ()
    meta: dict[str, Any] = field(default_factory=dict)

    def __post_init__(self):
        arr = np.array(self.samples, dtype=np.float64, copy=True).reshape(-1)
        if arr.size == 0:
            raise ValueError("trace must contain at least one sample")
        if not np.all(np.isfinite(arr)):
            raise ValueError("trace contains non-finite samples")
        if not (self.sample_rate_hz > 0 and math.isfinite(self.sample_rate_hz)):
            raise ValueError(f"sample_rate_hz must be positive, got {self.sample_rate_hz}")
        arr.setflags(write=False)
        object.__setattr__(self, "samples", arr)
        object.__setattr__(self, "sample_rate_hz", float(self.sample_rate_hz))
        markers = tuple(m if isinstance(m, Marker) else Marker(*m) for m in self.markers)
        for m in markers:
            if not (0 <= m.start < m.end <= arr.size):
                raise ValueError(
                    f"marker {m.label!r} [{m.start}, {m.end}) outside trace of length {arr.size}"
                )
        object.__setattr__(self, "markers", markers)
        object.__setattr__(self, "meta", dict(self.meta))

    def __len__(self) -> int:
        return self.samples.size

    def marker(self, label: str) -> Marker:
        for m in self.markers:
            if m.label == label:
                return m
        known = ", ".join(m.label for m in self.markers) or "none"
        raise KeyError(f"no marker labelled {label!r} (known: {known})")


@dataclass(frozen=True, eq=False)
class TraceSet:
    """A non-empty list of equal-length, equal-rate traces."""

    traces: tuple[Trace, ...]
    meta: dict[str, Any] = field(default_factory=dict)

    def __post_init__(self):
        traces = tuple(self.traces)
        if not traces:
            raise TraceFormatError("trace set must be non-empty")
        n = len(traces[0])
        fs = traces[0].sample_rate_hz
        for i, tr in enumerate(traces):
            if len(tr) != n:
                raise TraceFormatError(
                    f"inconsistent trace lengths: trace 0 has {n} samples, trace {i} has {len(tr)}"
                )
            if tr.sample_rate_hz != fs:
                raise TraceFormatError(
                    f"inconsistent sample rates: {fs} Hz vs {tr.sample_rate_hz} Hz (trace {i})"
                )
        object.__setattr__(self, "traces", traces)
        object.__setattr__(self, "meta", dict(self.meta))

    @property
    def common_length(self) -> int:
        return len(self.traces[0])

    @property
    def sample_rate_hz(self) -> float:
        return self.traces[0].sample_rate_hz

    def __len__(self) -> int:
        return len(self.traces)

    def __iter__(self):
        return iter(self.traces)

    def __getitem__(self, idx):
        if isinstance(idx, slice):
            return TraceSet(self.traces[idx], self.meta)
        return self.traces[idx]

    def matrix(self) -> np.ndarray:
        """Samples as a (n_traces, common_length) float64 array."""
        return np.stack([t.samples for t in self.traces])


def _metadata_blob(ts: TraceSet) -> dict:
    return {
        "meta": ts.meta,
        "traces": [
            {"meta": t.meta, "markers": [m.to_json() for m in t.markers]} for t in ts.traces
        ],
    }


def _build_set(rows: np.ndarray, sample_rate_hz: float, blob: dict) -> TraceSet:
    per_trace = blob.get("traces") or [{}] * len(rows)
    if len(per_trace) != len(rows):
        raise TraceFormatError(
            f"metadata lists {len(per_trace)} traces but file holds {len(rows)}"
        )
    traces = []
    for row, info in zip(rows, per_trace):
        if not np.all(np.isfinite(row)):
            raise TraceFormatError("non-finite sample in trace file")
        markers = tuple(Marker.from_json(m) for m in info.get("markers", []))
        traces.append(Trace(row, sample_rate_hz, markers, info.get("meta", {})))
    return TraceSet(tuple(traces), blob.get("meta", {}))


def sidecar_path(path: str | Path) -> Path:
    path = Path(path)
    return path.with_name(path.stem + ".meta.json")


def store_traces(ts: TraceSet, path: str | Path, format: str = "binary") -> None:
    path = Path(path)
    if format == "binary":
        meta = json.dumps(_metadata_blob(ts), sort_keys=True).encode("utf-8")
        header = _HEADER.pack(
            MAGIC, FORMAT_VERSION, len(ts), ts.common_length, ts.sample_rate_hz, len(meta)
        )
        with open(path, "wb") as fh:
            fh.write(header)
            fh.write(meta)
            fh.write(ts.matrix().astype("<f4").tobytes())
    elif format == "csv":
        with open(path, "w", newline="") as fh:
            writer = csv.writer(fh)
            for tr in ts.traces:
                writer.writerow([repr(float(x)) for x in tr.samples])
        blob = _metadata_blob(ts)
        blob["sample_rate_hz"] = ts.sample_rate_hz
        sidecar_path(path).write_text(json.dumps(blob, sort_keys=True, indent=1))
    else:
        raise ValueError(f"unknown trace format {format!r}; expected 'binary' or 'csv'")


def load_traces(path: str | Path, format: str = "binary") -> TraceSet:
    path = Path(path)
    if format == "binary":
        return _load_binary(path)
    if format == "csv":
        return _load_csv(path)
    raise ValueError(f"unknown trace format {format!r}; expected 'binary' or 'csv'")


def _load_binary(path: Path) -> TraceSet:
    data = path.read_bytes()
    if len(data) < _HEADER.size:
        raise TraceFormatError(f"{path}: truncated header")
    magic, version, count, n, fs, meta_len = _HEADER.unpack_from(data)
    if magic != MAGIC:
        raise TraceFormatError(f"{path}: bad magic {magic!r}, expected {MAGIC.decode()!r}")
    if version != FORMAT_VERSION:
        raise TraceFormatError(f"{path}: unsupported format version {version}")
    if count == 0 or n == 0:
        raise TraceFormatError(f"{path}: empty trace set")
    off = _HEADER.size
    try:
        blob = json.loads(data[off : off + meta_len].decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise TraceFormatError(f"{path}: unreadable metadata blob: {exc}") from exc
    off += meta_len
    expected = count * n * 4
    if len(data) - off != expected:
        raise TraceFormatError(
            f"{path}: expected {expected} sample bytes for {count}x{n} traces, found {len(data) - off}"
        )
    rows = np.frombuffer(data, dtype="<f4", count=count * n, offset=off).reshape(count, n)
    return _build_set(rows.astype(np.float64), fs, blob)


def _load_csv(path: Path) -> TraceSet:
    side = sidecar_path(path)
    if not side.exists():
        raise TraceFormatError(f"{path}: missing sidecar metadata {side.name}")
    blob = json.loads(side.read_text())
    rows = []
    with open(path, newline="") as fh:
        for lineno, row in enumerate(csv.reader(fh), start=1):
            if not row:
                continue
            if rows and len(row) != len(rows[0]):
                raise TraceFormatError(
                    f"{path}:{lineno}: inconsistent trace length ({len(row)} vs {len(rows[0])} columns)"
                )
            try:
                rows.append([float(x) for x in row])
            except ValueError as exc:
                raise TraceFormatError(f"{path}:{lineno}: {exc}") from exc
    if not rows:
        raise TraceFormatError(f"{path}: no traces")
    return _build_set(np.asarray(rows, dtype=np.float64), float(blob["sample_rate_hz"]), blob)


def average_traces(ts: TraceSet | Iterable[Trace]) -> Trace:
    """Sample-wise arithmetic mean; markers are dropped."""
    traces = ts.traces if isinstance(ts, TraceSet) else tuple(ts)
    if not traces:
        raise ValueError("cannot average an empty trace set")
    if not isinstance(ts, TraceSet):
        TraceSet(traces)  # validates lengths and rates
    # math.fsum per column would be exact but slow; sorted stacking keeps the
    # result independent of input order.
    mat = np.stack([t.samples for t in traces])
    mat.sort(axis=0)
    return Trace(mat.mean(axis=0), traces[0].sample_rate_hz, (), {"averaged": len(traces)})


def quantize(trace: Trace, adc_bits: int, full_scale_volts: float) -> Trace:
    """Round every sample to the nearest of ``2**adc_bits`` levels on [0, full scale].

    Ties round half-up.
    """
    if not (1 <= int(adc_bits) <= 24) or int(adc_bits) != adc_bits:
        raise ValueError(f"adc_bits must be an integer in [1, 24], got {adc_bits}")
    if not full_scale_volts > 0:
        raise ValueError("full_scale_volts must be positive")
    x = trace.samples
    lo, hi = float(x.min()), float(x.max())
    if lo < 0 or hi > full_scale_volts:
        raise ValueError(
            f"samples span [{lo}, {hi}] V, outside ADC range [0, {full_scale_volts}] V"
        )
    steps = (1 << int(adc_bits)) - 1
    codes = np.minimum(np.floor(x * (steps / full_scale_volts) + 0.5), steps)
    volts = np.minimum(codes * (full_scale_volts / steps), full_scale_volts)
    return Trace(volts, trace.sample_rate_hz, trace.markers, trace.meta)


def extract_segment(trace: Trace, label: str) -> Trace:
    m = trace.marker(label)
    meta = dict(trace.meta, segment=label)
    return Trace(trace.samples[m.start : m.end], trace.sample_rate_hz, (), meta)


def extract_segments(ts: TraceSet, label: str | None) -> TraceSet:
    """Apply :func:`extract_segment` to every trace; ``None`` keeps whole traces."""
    if label is None:
        return ts
    return TraceSet(tuple(extract_segment(t, label) for t in ts.traces), ts.meta)
