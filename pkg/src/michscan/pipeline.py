"""Pre-deployment template bundles and runtime integrity verdicts."""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import Mapping, Sequence

import numpy as np

from . import spectral
from .stats import MIN_VALID_GROUP, SimilaritySample, UTestResult, mann_whitney, pearson
from .traces import Trace, TraceSet, extract_segments

BUNDLE_FORMAT_VERSION = 1
DEFAULT_P_THRESHOLD = 1e-5
EPOCH = "1970-01-01T00:00:00Z"


class PipelineError(ValueError):
    pass


@dataclass(frozen=True)
class PredeployConfig:
    n_traces: int = 500
    dc_exclusion_hz: float | None = None
    bandwidth_fraction: float = spectral.DEFAULT_BANDWIDTH_FRACTION
    filter_order: int = spectral.DEFAULT_ORDER
    template_selection_seed: int = 0
    layer_label: str | None = None

    def __post_init__(self):
        if self.n_traces < MIN_VALID_GROUP + 1:
            raise PipelineError(
                f"n_traces must be >= {MIN_VALID_GROUP + 1} (one template plus "
                f"{MIN_VALID_GROUP} similarity values), got {self.n_traces}"
            )
        if self.bandwidth_fraction <= 0 or self.filter_order < 1:
            raise PipelineError("bandwidth_fraction must be > 0 and filter_order >= 1")


@dataclass(frozen=True)
class RuntimeConfig:
    n_ra: int = 5
    p_threshold: float = DEFAULT_P_THRESHOLD
    layer_label: str | None = None

    def __post_init__(self):
        if self.n_ra < 1:
            raise PipelineError("n_ra must be >= 1")
        if not 0 < self.p_threshold <= 1:
            raise PipelineError(f"p_threshold must lie in (0, 1], got {self.p_threshold}")

    @property
    def warnings(self) -> list[str]:
        if self.n_ra < MIN_VALID_GROUP:
            return [f"n_ra={self.n_ra} is below {MIN_VALID_GROUP}; the U-test is not statistically valid"]
        return []


@dataclass(frozen=True, eq=False)
class TemplateBundle:
    golden_template: Trace
    filter: spectral.FilterSpec
    target_frequency_hz: float
    similarity_sample: SimilaritySample
    test_input_id: str
    device_id: str
    created_at: str
    predeploy_config: dict
    format_version: int = BUNDLE_FORMAT_VERSION

    def __post_init__(self):
        n = self.predeploy_config.get("n_traces")
        if n is not None and len(self.similarity_sample) != n - 1:
            raise PipelineError(
                f"similarity sample has {len(self.similarity_sample)} values, expected n_traces - 1 = {n - 1}"
            )
        if self.similarity_sample.source != "pre_deployment":
            raise PipelineError("bundle similarity sample must come from pre-deployment")

    @property
    def layer_label(self) -> str | None:
        return self.predeploy_config.get("layer_label")

    def to_json(self) -> dict:
        return {
            "format_version": self.format_version,
            "device_id": self.device_id,
            "test_input_id": self.test_input_id,
            "created_at": self.created_at,
            "target_frequency_hz": self.target_frequency_hz,
            "filter": self.filter.params(),
            "golden_template": {
                "sample_rate_hz": self.golden_template.sample_rate_hz,
                "samples": self.golden_template.samples.tolist(),
            },
            "similarity_sample": list(self.similarity_sample.values),
            "predeploy_config": self.predeploy_config,
        }

    @classmethod
    def from_json(cls, obj: Mapping) -> "TemplateBundle":
        if obj.get("format_version") != BUNDLE_FORMAT_VERSION:
            raise PipelineError(f"unsupported bundle format version {obj.get('format_version')!r}")
        f = obj["filter"]
        filt = spectral.design_bandpass(
            f["center_hz"], f["bandwidth_fraction"], f["order"], f["sample_rate_hz"]
        )
        gt = obj["golden_template"]
        return cls(
            golden_template=Trace(gt["samples"], gt["sample_rate_hz"]),
            filter=filt,
            target_frequency_hz=float(obj["target_frequency_hz"]),
            similarity_sample=SimilaritySample(obj["similarity_sample"], "pre_deployment"),
            test_input_id=obj["test_input_id"],
            device_id=obj["device_id"],
            created_at=obj["created_at"],
            predeploy_config=dict(obj["predeploy_config"]),
        )

    def dumps(self) -> str:
        # repr-based float output is the shortest string that round-trips exactly
        return json.dumps(self.to_json(), indent=None, separators=(",", ":")) + "\n"

    def save(self, path: str | Path) -> None:
        Path(path).write_text(self.dumps())

    @classmethod
    def load(cls, path: str | Path) -> "TemplateBundle":
        return cls.from_json(json.loads(Path(path).read_text()))


@dataclass(frozen=True)
class Verdict:
    p_value: float
    threshold: float
    violation_detected: bool
    test_result: UTestResult
    test_similarities: SimilaritySample
    warnings: tuple[str, ...] = field(default=())

    def to_json(self) -> dict:
        return {
            "p_value": self.p_value,
            "threshold": self.threshold,
            "violation_detected": self.violation_detected,
            "test_result": self.test_result.to_json(),
            "test_similarities": list(self.test_similarities.values),
            "warnings": list(self.warnings),
        }


def resolve_layer(ts: TraceSet, requested: str | None) -> str | None:
    """Requested layer, else the last marked layer, else ``None`` (whole trace)."""
    first = ts.traces[0]
    if requested is not None:
        for tr in ts.traces:
            tr.marker(requested)
        return requested
    if not first.markers:
        return None
    return max(first.markers, key=lambda m: m.start).label


def _similarities(template: Trace, filtered: Sequence[Trace]) -> list[float]:
    return [pearson(template.samples, t.samples) for t in filtered]


def predeploy(
    benign: TraceSet,
    config: PredeployConfig = PredeployConfig(),
    *,
    test_input_id: str = "",
    device_id: str = "",
    created_at: str = EPOCH,
) -> TemplateBundle:
    """Golden template and similarity sample from N known-benign traces."""
    if len(benign) != config.n_traces:
        raise PipelineError(f"expected {config.n_traces} benign traces, got {len(benign)}")
    layer = resolve_layer(benign, config.layer_label)
    seg = extract_segments(benign, layer)

    spec = spectral.mean_magnitude_spectrum(seg)
    dc_excl = config.dc_exclusion_hz if config.dc_exclusion_hz is not None else spectral.default_dc_exclusion_hz(spec)
    target = spectral.detect_target_frequency(spec, dc_excl)
    filt = spectral.design_bandpass(target, config.bandwidth_fraction, config.filter_order, seg.sample_rate_hz)

    rng = np.random.default_rng(config.template_selection_seed)
    t_idx = int(rng.integers(len(seg)))
    template = spectral.apply_zero_phase(filt, seg[t_idx])
    rest = [spectral.apply_zero_phase(filt, t) for i, t in enumerate(seg.traces) if i != t_idx]
    sims = _similarities(template, rest)

    record = {
        "n_traces": config.n_traces,
        "dc_exclusion_hz": dc_excl,
        "bandwidth_fraction": config.bandwidth_fraction,
        "filter_order": config.filter_order,
        "template_selection_seed": config.template_selection_seed,
        "template_index": t_idx,
        "layer_label": layer,
    }
    return TemplateBundle(
        golden_template=Trace(template.samples, template.sample_rate_hz),
        filter=filt,
        target_frequency_hz=target,
        similarity_sample=SimilaritySample(sims, "pre_deployment"),
        test_input_id=test_input_id,
        device_id=device_id,
        created_at=created_at,
        predeploy_config=record,
    )


def runtime_similarities(bundle: TemplateBundle, test_traces: TraceSet, layer: str | None) -> list[float]:
    seg = extract_segments(test_traces, layer)
    tmpl = bundle.golden_template
    if seg.sample_rate_hz != tmpl.sample_rate_hz:
        raise PipelineError(
            f"test traces sampled at {seg.sample_rate_hz} Hz, bundle at {tmpl.sample_rate_hz} Hz"
        )
    if seg.common_length != len(tmpl):
        raise PipelineError(
            f"test segment length {seg.common_length} does not match golden template length {len(tmpl)}"
        )
    # re-derive coefficients from design parameters, never trust serialized ones
    filt = spectral.design_bandpass(**bundle.filter.params())
    return _similarities(tmpl, [spectral.apply_zero_phase(filt, t) for t in seg.traces])


def runtime_check(
    bundle: TemplateBundle, test_traces: TraceSet, config: RuntimeConfig = RuntimeConfig()
) -> Verdict:
    if len(test_traces) != config.n_ra:
        raise PipelineError(f"expected n_ra={config.n_ra} test traces, got {len(test_traces)}")
    layer = config.layer_label if config.layer_label is not None else bundle.layer_label
    if bundle.layer_label is not None and layer != bundle.layer_label:
        raise PipelineError(f"bundle built for layer {bundle.layer_label!r}, check requested {layer!r}")
    sims = runtime_similarities(bundle, test_traces, layer)
    res = mann_whitney(sims, bundle.similarity_sample.values, "two_sided", "auto")
    warns = tuple(config.warnings)
    return Verdict(
        p_value=res.p_value,
        threshold=config.p_threshold,
        violation_detected=res.p_value < config.p_threshold,
        test_result=res,
        test_similarities=SimilaritySample(sims, "runtime"),
        warnings=warns,
    )


SEVERITIES = ("single_layer", "single_parameter", "single_bit")


def severity_sweep(
    bundle_per_layer: Sequence[TemplateBundle],
    attacked_trace_sets: Mapping[str, TraceSet],
    config: RuntimeConfig = RuntimeConfig(),
) -> list[dict]:
    """Per-layer, per-severity verdicts; rows follow the bundles' layer order."""
    for sev in attacked_trace_sets:
        if sev not in SEVERITIES:
            raise PipelineError(f"unknown severity {sev!r}; expected one of {SEVERITIES}")
    rows = []
    for bundle in bundle_per_layer:
        layer = bundle.layer_label
        for sev, ts in attacked_trace_sets.items():
            if layer is not None and any(m.label == layer for m in ts.traces[0].markers) is False:
                raise PipelineError(f"trace set for {sev!r} has no layer {layer!r}")
            v = runtime_check(bundle, ts, RuntimeConfig(config.n_ra, config.p_threshold, layer))
            rows.append(
                {
                    "layer": layer,
                    "severity": sev,
                    "p_value": v.p_value,
                    "violation_detected": v.violation_detected,
                }
            )
    return rows
