"""Deterministic power-trace simulator for fixed-point surrogate networks.

Every multiply-accumulate (MAC) occupies one clock period. Its switching
activity, ``HW(weight byte) + HW(low accumulator bits)``, sets the amplitude
of one period of a sinusoid at the clock frequency riding on a DC level.
Gaussian noise is added per sample and the result goes through an ADC model.
"""

from __future__ import annotations

import os
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, replace
from typing import Any, Mapping, Sequence

import numpy as np

from .traces import Marker, Trace, TraceSet, quantize

HW8 = np.array([bin(i).count("1") for i in range(256)], dtype=np.int64)
HW16 = (HW8[:, None] + HW8[None, :]).reshape(-1)

ATTACK_KINDS = (
    "trojan_retrain",
    "poison_final_layer",
    "bit_flip",
    "layer_rewrite",
    "parameter_rewrite",
)
WEIGHT_SIGMA = 40.0
INPUT_MAX = 127


@dataclass(frozen=True)
class DeviceModel:
    sample_rate_hz: float = 2e6
    clock_hz: float = 225e3
    dc_volts: float = 0.5
    hw_gain_volts_per_bit: float = 0.01
    noise_sigma_volts: float = 0.0015
    adc_bits: int = 10
    adc_full_scale_volts: float = 1.0
    acc_leak_bits: int = 16

    def __post_init__(self):
        if not self.sample_rate_hz > 0:
            raise ValueError("sample_rate_hz must be positive")
        if not 0 < self.clock_hz < self.sample_rate_hz / 2:
            raise ValueError(
                f"clock carrier {self.clock_hz} Hz is above Nyquist "
                f"({self.sample_rate_hz / 2} Hz for {self.sample_rate_hz} S/s)"
            )
        if self.dc_volts <= 0 or self.hw_gain_volts_per_bit <= 0:
            raise ValueError("dc_volts and hw_gain_volts_per_bit must be positive")
        if self.noise_sigma_volts < 0:
            raise ValueError("noise_sigma_volts must be non-negative")
        if not 1 <= self.adc_bits <= 24:
            raise ValueError("adc_bits must lie in [1, 24]")
        if self.adc_full_scale_volts <= 0:
            raise ValueError("adc_full_scale_volts must be positive")
        if self.acc_leak_bits not in (8, 16, 32):
            raise ValueError("acc_leak_bits must be 8, 16 or 32")

    @property
    def samples_per_mac(self) -> float:
        return self.sample_rate_hz / self.clock_hz

    def to_json(self) -> dict:
        return dict(self.__dict__)

    @classmethod
    def from_json(cls, obj: Mapping[str, Any]) -> "DeviceModel":
        return cls(**obj)


@dataclass(frozen=True, eq=False)
class Layer:
    """Dense int8 weights ``(out, in)`` applied at ``positions`` input positions.

    ``positions > 1`` models a pointwise convolution: the same weights are
    reused at every position, so the MAC stream is ``positions * out * in``.
    """

    label: str
    weights: np.ndarray
    activation: str = "relu"
    positions: int = 1
    shift: int = 0

    def __post_init__(self):
        w = np.asarray(self.weights)
        if w.ndim != 2:
            raise ValueError(f"layer {self.label!r}: weights must be 2-D, got shape {w.shape}")
        if not np.all(np.isfinite(w)) or w.min() < -128 or w.max() > 127 or np.any(w != np.round(w)):
            raise ValueError(f"layer {self.label!r}: weights must be signed 8-bit integers")
        w = w.astype(np.int8)
        w.setflags(write=False)
        object.__setattr__(self, "weights", w)
        if self.activation not in ("relu", "none"):
            raise ValueError(f"layer {self.label!r}: unknown activation {self.activation!r}")
        if self.positions < 1 or self.shift < 0:
            raise ValueError(f"layer {self.label!r}: positions must be >= 1 and shift >= 0")

    @property
    def n_out(self) -> int:
        return self.weights.shape[0]

    @property
    def n_in(self) -> int:
        return self.weights.shape[1]

    @property
    def input_width(self) -> int:
        return self.positions * self.n_in

    @property
    def output_width(self) -> int:
        return self.positions * self.n_out

    @property
    def mac_count(self) -> int:
        return self.positions * self.n_out * self.n_in

    def with_weights(self, weights: np.ndarray) -> "Layer":
        return replace(self, weights=weights)

    def to_json(self) -> dict:
        return {
            "label": self.label,
            "weights": self.weights.astype(int).tolist(),
            "activation": self.activation,
            "positions": self.positions,
            "shift": self.shift,
        }


@dataclass(frozen=True, eq=False)
class SurrogateNet:
    layers: tuple[Layer, ...]

    def __post_init__(self):
        layers = tuple(self.layers)
        if not layers:
            raise ValueError("network needs at least one layer")
        labels = [l.label for l in layers]
        if len(set(labels)) != len(labels):
            raise ValueError(f"duplicate layer labels in {labels}")
        for a, b in zip(layers, layers[1:]):
            if a.output_width != b.input_width:
                raise ValueError(
                    f"layer {a.label!r} emits {a.output_width} values but {b.label!r} expects {b.input_width}"
                )
        object.__setattr__(self, "layers", layers)

    @property
    def input_width(self) -> int:
        return self.layers[0].input_width

    @property
    def labels(self) -> list[str]:
        return [l.label for l in self.layers]

    def layer_index(self, label: str) -> int:
        try:
            return self.labels.index(label)
        except ValueError:
            raise KeyError(f"unknown layer {label!r}; network has {self.labels}") from None

    def replace_layer(self, idx: int, layer: Layer) -> "SurrogateNet":
        layers = list(self.layers)
        layers[idx] = layer
        return SurrogateNet(tuple(layers))

    def to_json(self) -> dict:
        return {"layers": [l.to_json() for l in self.layers]}

    @classmethod
    def from_json(cls, obj: Mapping[str, Any]) -> "SurrogateNet":
        return cls(tuple(Layer(**l) for l in obj["layers"]))


# Default surrogate: two pointwise "conv" layers and a dense head, each long
# enough (>= 2345 clock periods) to survive zero-phase padding of the 1%
# band-pass at any sample rate.
DEFAULT_ARCHITECTURE: tuple[dict, ...] = (
    {"label": "conv1", "positions": 16, "in": 10, "out": 15, "activation": "relu"},
    {"label": "conv2", "positions": 16, "in": 15, "out": 10, "activation": "relu"},
    {"label": "fc", "positions": 1, "in": 160, "out": 16, "activation": "none"},
)


def draw_weights(rng: np.random.Generator, shape) -> np.ndarray:
    return np.clip(np.rint(rng.normal(0.0, WEIGHT_SIGMA, size=shape)), -128, 127).astype(np.int8)


def draw_input(width: int, seed: int) -> np.ndarray:
    """A fixed test input: integers in [0, 127]."""
    return np.random.default_rng(seed).integers(0, INPUT_MAX + 1, size=width)


def _requant_shift(acc: np.ndarray, relu: bool) -> int:
    vals = np.maximum(acc, 0) if relu else np.abs(acc)
    ref = float(np.percentile(vals, 95))
    shift = 0
    while ref / (1 << shift) > 100:
        shift += 1
    return shift


def make_surrogate(seed: int = 0, architecture: Sequence[Mapping] = DEFAULT_ARCHITECTURE) -> SurrogateNet:
    """Draw a surrogate network; requantization shifts are fitted to random inputs."""
    rng = np.random.default_rng(seed)
    first = architecture[0]
    x = rng.integers(0, INPUT_MAX + 1, size=(8, first["positions"] * first["in"]))
    layers = []
    for spec in architecture:
        w = draw_weights(rng, (spec["out"], spec["in"]))
        relu = spec.get("activation", "relu") == "relu"
        layer = Layer(spec["label"], w, spec.get("activation", "relu"), spec.get("positions", 1), 0)
        accs = np.stack([_layer_acc(layer, xi) for xi in x])
        layer = replace(layer, shift=_requant_shift(accs, relu))
        x = np.stack([_requant(layer, a) for a in accs])
        layers.append(layer)
    return SurrogateNet(tuple(layers))


def _layer_acc(layer: Layer, x: np.ndarray) -> np.ndarray:
    xin = np.asarray(x, dtype=np.int64).reshape(layer.positions, layer.n_in)
    return xin @ layer.weights.astype(np.int64).T


def _requant(layer: Layer, acc: np.ndarray) -> np.ndarray:
    if layer.activation == "relu":
        return np.clip(np.maximum(acc, 0) >> layer.shift, 0, 127).reshape(-1)
    return np.clip(acc >> layer.shift, -128, 127).reshape(-1)


def _acc_hw(acc: np.ndarray, bits: int) -> np.ndarray:
    if bits == 8:
        return HW8[acc & 0xFF]
    lo = HW16[acc & 0xFFFF]
    if bits == 16:
        return lo
    return lo + HW16[(acc >> 16) & 0xFFFF]


def layer_activity(layer: Layer, x: np.ndarray, acc_leak_bits: int = 16) -> tuple[np.ndarray, np.ndarray]:
    """Per-MAC Hamming-weight activity and the layer's requantized output.

    Activity is ``HW(weight byte) + HW(low acc_leak_bits of the accumulator)``.
    MAC order: position, then output neuron, then input index.
    """
    xin = np.asarray(x, dtype=np.int64).reshape(layer.positions, layer.n_in)
    w = layer.weights.astype(np.int64)
    acc = np.cumsum(xin[:, None, :] * w[None, :, :], axis=2)
    hw = HW8[w & 0xFF][None, :, :] + _acc_hw(acc, acc_leak_bits)
    return hw.reshape(-1), _requant(layer, acc[:, :, -1])


def network_activity(net: SurrogateNet, x: Sequence[int], acc_leak_bits: int = 16) -> list[np.ndarray]:
    """Per-layer MAC activity for one inference on input ``x``."""
    x = np.asarray(x, dtype=np.int64).reshape(-1)
    if x.size != net.input_width:
        raise ValueError(f"input width {x.size} does not match network input width {net.input_width}")
    out = []
    for layer in net.layers:
        hw, x = layer_activity(layer, x, acc_leak_bits)
        out.append(hw)
    return out


def forward(net: SurrogateNet, x: Sequence[int]) -> np.ndarray:
    x = np.asarray(x, dtype=np.int64).reshape(-1)
    for layer in net.layers:
        _, x = layer_activity(layer, x)
    return x


@dataclass(frozen=True, eq=False)
class CleanWaveform:
    """Noise-free analog waveform plus layer markers for one (net, input) pair."""

    volts: np.ndarray
    markers: tuple[Marker, ...]


def clean_waveform(device: DeviceModel, net: SurrogateNet, x: Sequence[int]) -> CleanWaveform:
    activity = network_activity(net, x, device.acc_leak_bits)
    amp = np.concatenate(activity).astype(np.float64)
    n_macs = amp.size
    ratio = device.clock_hz / device.sample_rate_hz
    n = int(np.ceil(n_macs / ratio))
    cycles = np.arange(n) * ratio
    mac = np.minimum(np.floor(cycles).astype(np.int64), n_macs - 1)
    phase = cycles - np.floor(cycles)
    volts = device.dc_volts + device.hw_gain_volts_per_bit * amp[mac] * np.sin(2 * np.pi * phase)
    bounds = np.cumsum([0] + [a.size for a in activity])
    starts = np.searchsorted(mac, bounds[:-1], side="left")
    ends = np.r_[starts[1:], n]
    markers = tuple(Marker(l.label, int(s), int(e)) for l, s, e in zip(net.layers, starts, ends))
    return CleanWaveform(volts, markers)


def _noise_rng(noise_seed) -> np.random.Generator:
    if isinstance(noise_seed, np.random.SeedSequence):
        return np.random.default_rng(noise_seed)
    return np.random.default_rng(int(noise_seed))


def render_trace(device: DeviceModel, wave: CleanWaveform, noise_seed, meta=None) -> Trace:
    v = wave.volts
    if device.noise_sigma_volts > 0:
        v = v + _noise_rng(noise_seed).normal(0.0, device.noise_sigma_volts, size=v.size)
    # the ADC front end saturates at its rails
    v = np.clip(v, 0.0, device.adc_full_scale_volts)
    tr = quantize(Trace(v, device.sample_rate_hz), device.adc_bits, device.adc_full_scale_volts)
    # store at float32 precision so binary trace files round-trip exactly
    samples = tr.samples.astype(np.float32).astype(np.float64)
    return Trace(samples, device.sample_rate_hz, wave.markers, meta or {})


def simulate_inference_trace(
    device: DeviceModel, net: SurrogateNet, x: Sequence[int], noise_seed=0
) -> Trace:
    return render_trace(device, clean_waveform(device, net, x), noise_seed)


@dataclass(frozen=True)
class AttackSpec:
    """An integrity violation.

    ``magnitude`` is kind-specific: trojan reseed id, poison offset scale,
    bit-flip count, or ignored for the rewrite kinds. ``bit_policy``
    selects flipped positions (see :func:`flip_positions`).
    ``positions`` pins explicit ``(row, col, bit)`` flips.
    """

    kind: str
    target_layer: str | None = None
    magnitude: float | None = None
    seed: int = 0
    bit_policy: str = "vulnerable"
    positions: tuple[tuple[int, int, int], ...] | None = None
    name: str | None = None

    def __post_init__(self):
        if self.kind not in ATTACK_KINDS:
            raise ValueError(f"unknown attack kind {self.kind!r}; expected one of {ATTACK_KINDS}")
        if self.kind == "bit_flip":
            if self.positions is None and int(self.flip_count) < 1:
                raise ValueError("bit_flip count must be >= 1")
            if self.bit_policy not in ("vulnerable", "random", "msb"):
                raise ValueError(f"unknown bit policy {self.bit_policy!r}")
        if self.kind == "poison_final_layer" and self.poison_scale <= 0:
            raise ValueError("poison scale must be > 0")
        if self.positions is not None:
            object.__setattr__(self, "positions", tuple(tuple(int(v) for v in p) for p in self.positions))

    @property
    def flip_count(self) -> int:
        return 4 if self.magnitude is None else int(self.magnitude)

    @property
    def poison_scale(self) -> float:
        return 16.0 if self.magnitude is None else float(self.magnitude)

    @property
    def label(self) -> str:
        return self.name or self.kind

    def with_seed(self, seed: int) -> "AttackSpec":
        return replace(self, seed=seed)

    def to_json(self) -> dict:
        out = {k: v for k, v in self.__dict__.items() if v is not None}
        if self.positions is not None:
            out["positions"] = [list(p) for p in self.positions]
        return out

    @classmethod
    def from_json(cls, obj: Mapping[str, Any]) -> "AttackSpec":
        obj = dict(obj)
        if obj.get("positions") is not None:
            obj["positions"] = tuple(tuple(p) for p in obj["positions"])
        return cls(**obj)


def _attack_rng(spec: AttackSpec, salt: int = 0) -> np.random.Generator:
    return np.random.default_rng(np.random.SeedSequence([int(spec.seed), ATTACK_KINDS.index(spec.kind), salt]))


ATTACKER_BATCH = 32
# share of the most damaging flips a bit-flip attack draws from
VULNERABLE_FRACTION = 0.1


def _attacker_inputs(net: SurrogateNet, layer_idx: int, seed: int) -> np.ndarray:
    """(batch, positions, in) inputs reaching ``layer_idx`` for seeded random data."""
    rng = np.random.default_rng(np.random.SeedSequence([int(seed), 0xBF]))
    xs = rng.integers(0, INPUT_MAX + 1, size=(ATTACKER_BATCH, net.input_width))
    out = []
    for x in xs:
        for layer in net.layers[:layer_idx]:
            _, x = layer_activity(layer, x)
        out.append(np.asarray(x).reshape(net.layers[layer_idx].positions, -1))
    return np.stack(out)


def _forward_rows(layers: Sequence[Layer], rows: np.ndarray) -> np.ndarray:
    """Run a (rows, width) batch of activations through ``layers``."""
    for layer in layers:
        xin = rows.reshape(rows.shape[0], layer.positions, layer.n_in)
        acc = np.einsum("rpi,oi->rpo", xin, layer.weights.astype(np.int64))
        rows = _requant(layer, acc).reshape(rows.shape[0], -1)
    return rows


def edit_damage(net: SurrogateNet, layer_idx: int, seed: int, variants: Sequence[np.ndarray]) -> np.ndarray:
    """(out, in, variant) mean L1 change of the network output over an attacker batch.

    Each variant is a full replacement weight matrix; entry ``[o, i, v]``
    scores replacing only weight ``(o, i)`` with ``variants[v][o, i]``.
    """
    layer = net.layers[layer_idx]
    X = _attacker_inputs(net, layer_idx, seed)
    nb = X.shape[0]
    W = layer.weights.astype(np.int64)
    acc = np.einsum("bpi,oi->bpo", X, W)
    base_y = _requant(layer, acc).reshape(acc.shape)
    rest = net.layers[layer_idx + 1 :]
    base_out = _forward_rows(rest, base_y.reshape(nb, -1))
    Xc = np.moveaxis(X, 2, 0)
    damage = np.zeros((layer.n_out, layer.n_in, len(variants)))
    for v, alt in enumerate(variants):
        dw = np.asarray(alt, dtype=np.int64) - W
        for o in range(layer.n_out):
            # new output channel o for every input column i: (in, batch, positions)
            acc_o = acc[None, :, :, o] + dw[o][:, None, None] * Xc
            y = np.broadcast_to(base_y, (layer.n_in,) + base_y.shape).copy()
            y[..., o] = _requant(layer, acc_o).reshape(acc_o.shape)
            out = _forward_rows(rest, y.reshape(layer.n_in * nb, -1))
            diff = np.abs(out.reshape(layer.n_in, nb, -1) - base_out[None]).sum(axis=2)
            damage[o, :, v] = diff.mean(axis=1)
    return damage


def _most_damaging(damage: np.ndarray) -> np.ndarray:
    flat = damage.reshape(-1)
    k = max(1, int(round(VULNERABLE_FRACTION * flat.size)))
    cut = np.sort(flat)[::-1][k - 1]
    return (damage >= cut) & (damage > 0)


def vulnerable_flips(net: SurrogateNet, layer_idx: int, seed: int) -> np.ndarray:
    """Boolean (out, in, bit) mask of the most damaging single-bit flips."""
    raw = net.layers[layer_idx].weights.view(np.uint8)
    variants = [(raw ^ np.uint8(1 << b)).view(np.int8) for b in range(8)]
    return _most_damaging(edit_damage(net, layer_idx, seed, variants))


def flip_positions(net: SurrogateNet, spec: AttackSpec) -> list[tuple[int, int, int]]:
    """(row, col, bit) flips for a bit_flip attack; prefixes are nested across counts.

    Policies: ``vulnerable`` (default) draws among the flips that most
    change the network output on an attacker data batch, the flips a
    bit-flip attack searches for; ``random`` draws any bit of any weight; ``msb`` flips
    the sign bit of random weights. Flipped weights are always distinct.
    """
    idx = net.layer_index(spec.target_layer or net.labels[-1])
    layer = net.layers[idx]
    if spec.positions is not None:
        pos = list(spec.positions)
        if len(set(pos)) != len(pos):
            raise ValueError("duplicate bit positions requested")
        for r, c, b in pos:
            if not (0 <= r < layer.n_out and 0 <= c < layer.n_in and 0 <= b < 8):
                raise ValueError(f"bit position {(r, c, b)} outside layer {layer.label!r}")
        return pos
    count = spec.flip_count
    rng = _attack_rng(spec)
    if spec.bit_policy == "vulnerable":
        mask = vulnerable_flips(net, idx, spec.seed)
    else:
        mask = np.zeros((layer.n_out, layer.n_in, 8), dtype=bool)
        mask[:, :, 7 if spec.bit_policy == "msb" else slice(None)] = True
    cand = np.flatnonzero(mask.reshape(-1))
    picked, used = [], set()
    for k in cand[rng.permutation(cand.size)]:
        w = int(k) // 8
        if w in used:
            continue
        used.add(w)
        picked.append((w // layer.n_in, w % layer.n_in, int(k) % 8))
        if len(picked) == count:
            return picked
    raise ValueError(f"layer {layer.label!r} offers only {len(picked)} eligible weights, {count} flips requested")


def apply_attack(net: SurrogateNet, spec: AttackSpec) -> SurrogateNet:
    target = spec.target_layer or net.labels[-1]
    idx = net.layer_index(target)
    if spec.kind == "trojan_retrain":
        reseed = 0 if spec.magnitude is None else int(spec.magnitude)
        rng = _attack_rng(spec, salt=reseed)
        return SurrogateNet(tuple(l.with_weights(draw_weights(rng, l.weights.shape)) for l in net.layers))
    if spec.kind == "poison_final_layer":
        last = net.layers[-1]
        scale = int(round(spec.poison_scale))
        offsets = _attack_rng(spec).integers(-scale, scale + 1, size=last.weights.shape)
        w = np.clip(last.weights.astype(np.int64) + offsets, -128, 127)
        return net.replace_layer(len(net.layers) - 1, last.with_weights(w))
    layer = net.layers[idx]
    if spec.kind == "layer_rewrite":
        return net.replace_layer(idx, layer.with_weights(draw_weights(_attack_rng(spec), layer.weights.shape)))
    if spec.kind == "parameter_rewrite":
        # one weight, among the most damaging to rewrite, has all eight bits inverted
        w = layer.weights.copy()
        mask = _most_damaging(edit_damage(net, idx, spec.seed, [~w]))[:, :, 0]
        cand = np.flatnonzero(mask)
        k = int(cand[_attack_rng(spec).integers(cand.size)])
        r, c = divmod(k, layer.n_in)
        w[r, c] = ~w[r, c]
        return net.replace_layer(idx, layer.with_weights(w))
    # bit_flip
    raw = layer.weights.view(np.uint8).copy()
    for r, c, b in flip_positions(net, spec):
        raw[r, c] ^= np.uint8(1 << b)
    return net.replace_layer(idx, layer.with_weights(raw.view(np.int8)))


def trace_seed(master_seed: int, stream: int, index: int) -> np.random.SeedSequence:
    """Independent noise stream per (master seed, stream, trace index)."""
    return np.random.SeedSequence(entropy=int(master_seed), spawn_key=(int(stream), int(index)))


def thread_count() -> int:
    env = os.environ.get("MICHSCAN_THREADS")
    cpus = os.cpu_count() or 1
    if env:
        return max(1, min(int(env), cpus))
    return cpus


def render_many(device: DeviceModel, wave: CleanWaveform, seeds, metas, workers: int | None = None) -> TraceSet:
    jobs = list(zip(seeds, metas))
    workers = thread_count() if workers is None else workers
    if workers > 1 and len(jobs) > 1:
        with ThreadPoolExecutor(workers) as pool:
            traces = list(pool.map(lambda j: render_trace(device, wave, j[0], j[1]), jobs))
    else:
        traces = [render_trace(device, wave, s, m) for s, m in jobs]
    return TraceSet(tuple(traces))


@dataclass(frozen=True)
class DatasetCounts:
    predeploy: int = 500
    runtime: int = 5

    def __post_init__(self):
        if self.predeploy < 1 or self.runtime < 1:
            raise ValueError("dataset counts must be >= 1")


def generate_dataset(
    device: DeviceModel,
    benign: SurrogateNet,
    attacks: Sequence[AttackSpec],
    test_input: Sequence[int],
    counts: DatasetCounts = DatasetCounts(),
    master_seed: int = 0,
) -> dict[str, TraceSet]:
    """Benign pre-deployment set plus a runtime set per condition.

    Keys: ``"predeploy"``, ``"benign"``, then each attack's label. Stream 0
    seeds the pre-deployment traces, stream 1 the benign runtime traces and
    stream ``2 + k`` the k-th attack.
    """
    names = [a.label for a in attacks]
    if len(set(names)) != len(names) or {"predeploy", "benign"} & set(names):
        raise ValueError(f"attack labels must be unique and not 'predeploy'/'benign': {names}")
    x = np.asarray(test_input, dtype=np.int64)

    def run(net, stream, n, condition):
        wave = clean_waveform(device, net, x)
        seeds = [trace_seed(master_seed, stream, i) for i in range(n)]
        metas = [
            {"condition": condition, "master_seed": master_seed, "stream": stream, "index": i}
            for i in range(n)
        ]
        ts = render_many(device, wave, seeds, metas)
        return TraceSet(ts.traces, {"condition": condition, "master_seed": master_seed})

    out = {
        "predeploy": run(benign, 0, counts.predeploy, "predeploy"),
        "benign": run(benign, 1, counts.runtime, "benign"),
    }
    for k, spec in enumerate(attacks):
        out[spec.label] = run(apply_attack(benign, spec), 2 + k, counts.runtime, spec.label)
    return out
