"""Simulation and sweep configurations, and the end-to-end detection sweep."""

from __future__ import annotations

import hashlib
import json
import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field, fields
from typing import Any, Mapping, Sequence

import numpy as np

from . import powersim as ps
from .pipeline import DEFAULT_P_THRESHOLD, PredeployConfig, RuntimeConfig, TemplateBundle, predeploy, runtime_check
from .stats import MIN_VALID_GROUP
from .traces import TraceSet


class ConfigError(ValueError):
    pass


def _check_keys(obj: Mapping, allowed: Sequence[str], where: str) -> None:
    if not isinstance(obj, Mapping):
        raise ConfigError(f"{where}: expected a JSON object, got {type(obj).__name__}")
    extra = sorted(set(obj) - set(allowed))
    if extra:
        raise ConfigError(f"{where}: unknown keys {extra}; allowed {sorted(allowed)}")


def config_digest(obj: Mapping) -> str:
    canon = json.dumps(obj, sort_keys=True, separators=(",", ":"))
    return "sha256:" + hashlib.sha256(canon.encode("utf-8")).hexdigest()


def _device(obj: Mapping | None) -> ps.DeviceModel:
    obj = obj or {}
    _check_keys(obj, [f.name for f in fields(ps.DeviceModel)], "device")
    try:
        return ps.DeviceModel(**obj)
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"device: {exc}") from exc


def _network(obj: Mapping | None) -> tuple[ps.SurrogateNet, dict]:
    """``{"seed": s}`` draws the default surrogate; ``{"layers": [...]}`` is explicit."""
    obj = dict(obj or {"seed": 0})
    _check_keys(obj, ["seed", "architecture", "layers"], "network")
    if "layers" in obj:
        if len(obj) > 1:
            raise ConfigError("network: 'layers' cannot be combined with 'seed' or 'architecture'")
        try:
            net = ps.SurrogateNet.from_json(obj)
        except (TypeError, ValueError, KeyError) as exc:
            raise ConfigError(f"network: {exc}") from exc
        return net, net.to_json()
    seed = int(obj.get("seed", 0))
    arch = obj.get("architecture", [dict(a) for a in ps.DEFAULT_ARCHITECTURE])
    try:
        net = ps.make_surrogate(seed, arch)
    except (TypeError, ValueError, KeyError) as exc:
        raise ConfigError(f"network: {exc}") from exc
    return net, {"seed": seed, "architecture": [dict(a) for a in arch]}


def _test_input(obj, width: int) -> tuple[np.ndarray, Any]:
    """``{"seed": s}`` draws a random input; a list is used verbatim."""
    if obj is None:
        obj = {"seed": 1}
    if isinstance(obj, Mapping):
        _check_keys(obj, ["seed"], "test_input")
        x = ps.draw_input(width, int(obj.get("seed", 1)))
        return x, {"seed": int(obj.get("seed", 1))}
    x = np.asarray(obj)
    if x.ndim != 1 or x.size != width or not np.issubdtype(x.dtype, np.integer):
        raise ConfigError(f"test_input: expected {width} integers, got {obj!r:.60}")
    return x.astype(np.int64), x.astype(int).tolist()


def _attacks(objs: Sequence | None, net: ps.SurrogateNet) -> tuple[ps.AttackSpec, ...]:
    out = []
    for i, obj in enumerate(objs or []):
        _check_keys(obj, [f.name for f in fields(ps.AttackSpec)], f"attacks[{i}]")
        try:
            spec = ps.AttackSpec.from_json(obj)
        except (TypeError, ValueError) as exc:
            raise ConfigError(f"attacks[{i}]: {exc}") from exc
        if spec.target_layer is not None and spec.target_layer not in net.labels:
            raise ConfigError(f"attacks[{i}]: unknown layer {spec.target_layer!r}; network has {net.labels}")
        out.append(spec)
    labels = [a.label for a in out]
    if len(set(labels)) != len(labels):
        raise ConfigError(f"attack labels must be unique (set 'name' to disambiguate): {labels}")
    if {"predeploy", "benign"} & set(labels):
        raise ConfigError("attack labels 'predeploy' and 'benign' are reserved")
    return tuple(out)


DEFAULT_ATTACKS = (
    {"kind": "trojan_retrain"},
    {"kind": "poison_final_layer"},
    {"kind": "bit_flip", "magnitude": 4},
)


@dataclass(frozen=True, eq=False)
class SimulationConfig:
    device: ps.DeviceModel
    network: ps.SurrogateNet
    test_input: np.ndarray
    attacks: tuple[ps.AttackSpec, ...]
    counts: ps.DatasetCounts
    master_seed: int
    effective: dict = field(repr=False)

    @classmethod
    def from_json(cls, obj: Mapping, master_seed: int | None = None) -> "SimulationConfig":
        _check_keys(obj, ["device", "network", "test_input", "attacks", "counts", "master_seed"], "config")
        device = _device(obj.get("device"))
        net, net_json = _network(obj.get("network"))
        x, x_json = _test_input(obj.get("test_input"), net.input_width)
        attacks = _attacks(obj.get("attacks", DEFAULT_ATTACKS), net)
        counts_obj = obj.get("counts") or {}
        _check_keys(counts_obj, ["predeploy", "runtime"], "counts")
        try:
            counts = ps.DatasetCounts(**counts_obj)
        except ValueError as exc:
            raise ConfigError(f"counts: {exc}") from exc
        seed = int(obj.get("master_seed", 0) if master_seed is None else master_seed)
        effective = {
            "device": device.to_json(),
            "network": net_json,
            "test_input": x_json,
            "attacks": [a.to_json() for a in attacks],
            "counts": {"predeploy": counts.predeploy, "runtime": counts.runtime},
            "master_seed": seed,
        }
        return cls(device, net, x, attacks, counts, seed, effective)

    def generate(self) -> dict[str, TraceSet]:
        return ps.generate_dataset(
            self.device, self.network, self.attacks, self.test_input, self.counts, self.master_seed
        )


def default_simulation_config() -> dict:
    return SimulationConfig.from_json({}).effective


@dataclass(frozen=True, eq=False)
class SweepConfig:
    """Trials of every condition (benign plus each attack) at each ``n_ra``.

    Each trial draws a fresh attack instance (attack seed + trial) and fresh
    runtime noise. Detection uses ``detect_layer`` (default: the final layer);
    P-values for every layer go to the per-layer table.
    """

    device: ps.DeviceModel
    network: ps.SurrogateNet
    test_input: np.ndarray
    attacks: tuple[ps.AttackSpec, ...]
    n_ra: tuple[int, ...]
    trials: int
    p_threshold: float
    predeploy: PredeployConfig
    detect_layer: str
    master_seed: int
    effective: dict = field(repr=False)

    @classmethod
    def from_json(cls, obj: Mapping, master_seed: int | None = None) -> "SweepConfig":
        _check_keys(
            obj,
            ["device", "network", "test_input", "attacks", "n_ra", "trials", "p_threshold",
             "predeploy", "detect_layer", "master_seed"],
            "sweep config",
        )
        device = _device(obj.get("device"))
        net, net_json = _network(obj.get("network"))
        x, x_json = _test_input(obj.get("test_input"), net.input_width)
        attacks = _attacks(obj.get("attacks", DEFAULT_ATTACKS), net)
        n_ra = tuple(int(n) for n in obj.get("n_ra", [5, 10]))
        if not n_ra or min(n_ra) < 1 or len(set(n_ra)) != len(n_ra):
            raise ConfigError(f"n_ra must be a non-empty list of distinct positive integers, got {list(n_ra)}")
        trials = obj.get("trials", 100)
        if int(trials) != trials or trials < 1:
            raise ConfigError(f"trials must be a positive integer, got {trials!r}")
        p_th = float(obj.get("p_threshold", DEFAULT_P_THRESHOLD))
        if not 0 < p_th <= 1:
            raise ConfigError(f"p_threshold must lie in (0, 1], got {p_th}")
        pre_obj = dict(obj.get("predeploy") or {})
        _check_keys(pre_obj, [f.name for f in fields(PredeployConfig)], "predeploy")
        if "layer_label" in pre_obj:
            raise ConfigError("predeploy.layer_label is set per layer by the sweep; use detect_layer")
        try:
            pre = PredeployConfig(**pre_obj)
        except ValueError as exc:
            raise ConfigError(f"predeploy: {exc}") from exc
        layer = obj.get("detect_layer") or net.labels[-1]
        if layer not in net.labels:
            raise ConfigError(f"detect_layer {layer!r} not in network layers {net.labels}")
        seed = int(obj.get("master_seed", 0) if master_seed is None else master_seed)
        effective = {
            "device": device.to_json(),
            "network": net_json,
            "test_input": x_json,
            "attacks": [a.to_json() for a in attacks],
            "n_ra": list(n_ra),
            "trials": int(trials),
            "p_threshold": p_th,
            "predeploy": {
                "n_traces": pre.n_traces,
                "dc_exclusion_hz": pre.dc_exclusion_hz,
                "bandwidth_fraction": pre.bandwidth_fraction,
                "filter_order": pre.filter_order,
                "template_selection_seed": pre.template_selection_seed,
            },
            "detect_layer": layer,
            "master_seed": seed,
        }
        return cls(device, net, x, attacks, n_ra, int(trials), p_th, pre, layer, seed, effective)

    @property
    def conditions(self) -> list[str]:
        return ["benign"] + [a.label for a in self.attacks]


def default_sweep_config() -> dict:
    return SweepConfig.from_json({}).effective


@dataclass(frozen=True)
class SweepReport:
    rows: tuple[dict, ...]
    config_digest: str
    pvalue_rows: tuple[dict, ...] = field(default=(), repr=False)

    def __post_init__(self):
        for r in self.rows:
            if not 0 <= r["detections"] <= r["trials"]:
                raise ValueError(f"detections {r['detections']} outside [0, {r['trials']}]")

    def to_json(self) -> dict:
        return {"rows": [dict(r) for r in self.rows], "config_digest": self.config_digest}

    def row(self, condition: str, n_ra: int) -> dict:
        for r in self.rows:
            if r["condition"] == condition and r["n_ra"] == n_ra:
                return r
        raise KeyError((condition, n_ra))


PVALUE_COLUMNS = ("condition", "trial", "n_ra", "layer", "p_value", "violation_detected")


def build_bundles(cfg: SweepConfig) -> dict[str, TemplateBundle]:
    """One bundle per layer from a single benign pre-deployment capture."""
    wave = ps.clean_waveform(cfg.device, cfg.network, cfg.test_input)
    n = cfg.predeploy.n_traces
    seeds = [ps.trace_seed(cfg.master_seed, 0, i) for i in range(n)]
    pre = ps.render_many(cfg.device, wave, seeds, [{}] * n)
    out = {}
    for label in cfg.network.labels:
        pc = PredeployConfig(**{**cfg.effective["predeploy"], "layer_label": label})
        out[label] = predeploy(pre, pc, device_id="simulated", test_input_id=str(cfg.effective["test_input"]))
    return out


def _trial(cfg: SweepConfig, bundles, cond_idx: int, trial: int) -> list[dict]:
    if cond_idx == 0:
        net = cfg.network
    else:
        spec = cfg.attacks[cond_idx - 1]
        net = ps.apply_attack(cfg.network, spec.with_seed(spec.seed + trial))
    wave = ps.clean_waveform(cfg.device, net, cfg.test_input)
    n_max = max(cfg.n_ra)
    seeds = [ps.trace_seed(cfg.master_seed, 1 + cond_idx, trial * n_max + i) for i in range(n_max)]
    ts = ps.render_many(cfg.device, wave, seeds, [{}] * n_max, workers=1)
    rows = []
    for n_ra in cfg.n_ra:
        sub = ts[:n_ra]
        for label, bundle in bundles.items():
            v = runtime_check(bundle, sub, RuntimeConfig(n_ra, cfg.p_threshold, label))
            rows.append(
                {
                    "condition": cfg.conditions[cond_idx],
                    "trial": trial,
                    "n_ra": n_ra,
                    "layer": label,
                    "p_value": v.p_value,
                    "violation_detected": v.violation_detected,
                }
            )
    return rows


def run_sweep(cfg: SweepConfig, bundles: Mapping[str, TemplateBundle] | None = None) -> SweepReport:
    bundles = dict(bundles) if bundles is not None else build_bundles(cfg)
    jobs = [(c, t) for c in range(len(cfg.conditions)) for t in range(cfg.trials)]
    workers = ps.thread_count()
    if workers > 1:
        with ThreadPoolExecutor(workers) as pool:
            results = list(pool.map(lambda j: _trial(cfg, bundles, *j), jobs))
    else:
        results = [_trial(cfg, bundles, *j) for j in jobs]
    ptable = tuple(r for rows in results for r in rows)

    summary = []
    for cond in cfg.conditions:
        for n_ra in cfg.n_ra:
            ps_ = [r for r in ptable if r["condition"] == cond and r["n_ra"] == n_ra and r["layer"] == cfg.detect_layer]
            row = {
                "condition": cond,
                "n_ra": n_ra,
                "trials": len(ps_),
                "detections": sum(r["violation_detected"] for r in ps_),
                "mean_log10_p": float(np.mean([math.log10(r["p_value"]) for r in ps_])),
            }
            if n_ra < MIN_VALID_GROUP:
                row["warning"] = f"n_ra={n_ra} below {MIN_VALID_GROUP}: U-test not statistically valid"
            summary.append(row)
    return SweepReport(tuple(summary), config_digest(cfg.effective), ptable)
