"""The spiking decision-feedback equalizer.

Per decided symbol the network runs an episodic T-step schedule: the encoded
window drives the linear input layer (fc0) at the first step only, zeros
afterwards; fc1 feeds the LIF block, fc2 carries its recurrence, and the fc3
readout is accumulated over all steps before the argmax decision. Decided
classes are fed back into the next windows (true DFE); genie mode substitutes
the ground-truth classes for training and diagnostics.
"""

from __future__ import annotations

import json
from dataclasses import dataclass

import numpy as np

from .lif import LifParams
from .quant import QatConfig, fake_quantize, state_format

RX_LEVELS = 8  # received samples are one-hot coded over 8 amplitude bins

MODEL_FORMAT = "snndfe-model"
MODEL_VERSION = 1


def input_size(n_tap: int, m: int) -> int:
    """Input width for a given tap count: 8*(floor(n/2)+1) + 2^m*floor(n/2)."""
    if n_tap < 1 or n_tap % 2 == 0:
        raise ValueError("n_tap must be odd and >= 1")
    if m < 1:
        raise ValueError("m must be >= 1")
    half = n_tap // 2
    return RX_LEVELS * (half + 1) + (2 ** m) * half


def mac_count(n_hidden: int, n_input: int, n_steps: int, m: int = 2) -> int:
    """Multiply-accumulate operations per equalized symbol."""
    if min(n_hidden, n_input, n_steps, m) < 1:
        raise ValueError("all arguments must be >= 1")
    return n_hidden * (n_input + 2 * n_hidden + 2 ** m) * n_steps


@dataclass(frozen=True)
class TopologyConfig:
    """Equalizer dimensions: tap count, modulation order, hidden width, time steps."""

    n_tap: int = 17
    bits_per_symbol: int = 2
    hidden: int = 80
    steps: int = 10

    def __post_init__(self):
        input_size(self.n_tap, self.bits_per_symbol)  # validates n_tap/m
        if not 1 <= self.hidden <= 1024:
            raise ValueError("hidden must be in [1, 1024]")
        if self.steps < 1:
            raise ValueError("steps must be >= 1")

    @property
    def n_classes(self) -> int:
        return 2 ** self.bits_per_symbol

    @property
    def n_input(self) -> int:
        return input_size(self.n_tap, self.bits_per_symbol)

    @property
    def history(self) -> int:
        """Number of past received samples / fed-back decisions in the window."""
        return self.n_tap // 2

    def macs_per_symbol(self) -> int:
        return mac_count(self.hidden, self.n_input, self.steps, self.bits_per_symbol)


@dataclass(frozen=True)
class EncoderConfig:
    """Min-max calibration of the received amplitude binning."""

    rx_min: float
    rx_max: float

    def bin_indices(self, samples) -> np.ndarray:
        """Uniform 8-level quantizer, clamping out-of-range values to the edge bins."""
        samples = np.asarray(samples, dtype=float)
        span = self.rx_max - self.rx_min
        if span <= 0:
            return np.zeros(samples.shape, dtype=np.int64)
        t = (samples - self.rx_min) / span
        return np.clip(np.floor(t * RX_LEVELS).astype(np.int64), 0, RX_LEVELS - 1)


class DecisionBuffer:
    """Ring buffer of the last floor(n_tap/2) decided class indices."""

    def __init__(self, capacity: int, fill_class: int = 0):
        self.capacity = capacity
        self._buf = [fill_class] * capacity

    def push(self, decided_class: int):
        self._buf.append(int(decided_class))
        del self._buf[0]

    def contents(self) -> list:
        """Oldest decision first."""
        return list(self._buf)


def encode_window(received, decisions, encoder: EncoderConfig, m: int = 2) -> np.ndarray:
    """One-hot encode a window of history+1 received samples and history decisions.

    Layout: `history` past-received blocks of 8 (oldest first), `history`
    decision blocks of 2^m (oldest first), then the current-received block of
    8. Exactly one entry per block is nonzero.
    """
    received = np.asarray(received, dtype=float)
    decisions = np.asarray(decisions, dtype=np.int64)
    history = decisions.size
    if received.size != history + 1:
        raise ValueError("received window must hold history+1 samples")
    n_classes = 2 ** m
    bins = encoder.bin_indices(received)
    out = np.zeros(RX_LEVELS * (history + 1) + n_classes * history)
    for j in range(history):
        out[j * RX_LEVELS + bins[j]] = 1.0
    base = history * RX_LEVELS
    for j in range(history):
        out[base + j * n_classes + decisions[j]] = 1.0
    out[base + history * n_classes + bins[history]] = 1.0
    return out


@dataclass
class EqualizerModel:
    """Topology, LIF constants, encoder calibration and the four FC layers."""

    config: TopologyConfig
    lif: LifParams
    encoder: EncoderConfig
    w_fc0: np.ndarray
    b_fc0: np.ndarray
    w_fc1: np.ndarray
    b_fc1: np.ndarray
    w_fc2: np.ndarray  # recurrent, no bias
    w_fc3: np.ndarray
    b_fc3: np.ndarray
    qat: QatConfig | None = None

    PARAM_NAMES = ("w_fc0", "b_fc0", "w_fc1", "b_fc1", "w_fc2", "w_fc3", "b_fc3")

    def __post_init__(self):
        n_i, n_h, n_c = self.config.n_input, self.config.hidden, self.config.n_classes
        expected = {
            "w_fc0": (n_h, n_i), "b_fc0": (n_h,),
            "w_fc1": (n_h, n_h), "b_fc1": (n_h,),
            "w_fc2": (n_h, n_h),
            "w_fc3": (n_c, n_h), "b_fc3": (n_c,),
        }
        for name, shape in expected.items():
            arr = getattr(self, name)
            if arr.shape != shape:
                raise ValueError(f"{name} has shape {arr.shape}, expected {shape}")
            if not np.all(np.isfinite(arr)):
                raise ValueError(f"{name} contains non-finite values")

    @classmethod
    def initialize(cls, config: TopologyConfig, lif: LifParams, encoder: EncoderConfig,
                   rng: np.random.Generator, qat: QatConfig | None = None) -> "EqualizerModel":
        """Fresh model with uniform +/-1/sqrt(fan_in) weights and biases."""
        n_i, n_h, n_c = config.n_input, config.hidden, config.n_classes

        def uniform(shape, fan_in):
            bound = 1.0 / np.sqrt(fan_in)
            return rng.uniform(-bound, bound, size=shape)

        return cls(
            config=config, lif=lif, encoder=encoder,
            w_fc0=uniform((n_h, n_i), n_i), b_fc0=uniform((n_h,), n_i),
            w_fc1=uniform((n_h, n_h), n_h), b_fc1=uniform((n_h,), n_h),
            w_fc2=uniform((n_h, n_h), n_h),
            w_fc3=uniform((n_c, n_h), n_h), b_fc3=uniform((n_c,), n_h),
            qat=qat,
        )

    def parameters(self) -> dict:
        return {name: getattr(self, name) for name in self.PARAM_NAMES}

    def effective_weights(self) -> dict:
        """Weights as the forward pass sees them (fake-quantized under QAT)."""
        params = self.parameters()
        if self.qat is None:
            return params
        return {k: fake_quantize(v, self.qat.weight_bits) for k, v in params.items()}

    def make_decider(self):
        """Bind a per-window decision closure (weights resolved once)."""
        eff = self.effective_weights()
        cfg, lif, qat = self.config, self.lif, self.qat

        def decide(encoded: np.ndarray, stats=None) -> int:
            logits, _ = _forward_steps(encoded, eff, cfg, lif, qat)
            return int(np.argmax(logits))

        return decide

    def decide(self, encoded: np.ndarray) -> int:
        return self.make_decider()(encoded)


def _forward_steps(encoded: np.ndarray, weights: dict, config: TopologyConfig,
                   lif: LifParams, qat: QatConfig | None = None,
                   count_macs: bool = False, record_spikes: bool = False):
    """Reference T-step forward pass for one encoded window.

    Step 1 drives fc0 with the window, later steps with zeros (bias only).
    Per-step hidden drive is fc1(fc0 output) + fc2(previous spikes) + bias;
    fc3 readouts are summed over steps. With `qat` set, the drive and the LIF
    state are quantized onto the state grid each step, mirroring training.
    The MAC counter counts every multiply of the dense dataflow (bias adds and
    the argmax excluded).
    """
    n_h, n_steps = config.hidden, config.steps
    w0, b0 = weights["w_fc0"], weights["b_fc0"]
    w1, b1 = weights["w_fc1"], weights["b_fc1"]
    w2 = weights["w_fc2"]
    w3, b3 = weights["w_fc3"], weights["b_fc3"]
    if encoded.shape != (config.n_input,):
        raise ValueError(f"encoded window has shape {encoded.shape}, expected ({config.n_input},)")
    sgrid = state_format(qat.state_bits) if qat is not None else None

    macs = 0
    zeros_in = np.zeros_like(encoded)
    v = np.zeros(n_h)
    i = np.zeros(n_h)
    spikes = np.zeros(n_h)
    logits = np.zeros(config.n_classes)
    spike_log = np.zeros((n_steps, n_h)) if record_spikes else None
    for t in range(n_steps):
        x_t = encoded if t == 0 else zeros_in
        a_t = w0 @ x_t + b0
        drive = w1 @ a_t + b1 + w2 @ spikes
        macs += w0.size + w1.size + w2.size
        if sgrid is not None:
            drive = fake_quantize(drive, sgrid.total_bits, sgrid.scale)
        i = (1.0 - lif.alpha_i) * i + drive
        if sgrid is not None:
            i = fake_quantize(i, sgrid.total_bits, sgrid.scale)
        v_pre = v + lif.alpha_v * ((lif.v_leak - v) + i)
        spikes = (v_pre >= lif.v_th).astype(float)
        v = np.where(spikes > 0, lif.v_r, v_pre)
        if sgrid is not None:
            v = fake_quantize(v, sgrid.total_bits, sgrid.scale)
        logits += w3 @ spikes + b3
        macs += w3.size
        if record_spikes:
            spike_log[t] = spikes
    if record_spikes:
        return logits, macs, spike_log
    return logits, macs


def snn_forward(encoded: np.ndarray, model: EqualizerModel, count_macs: bool = False):
    """Accumulated logits for one window; optionally also the multiply count."""
    logits, macs = _forward_steps(
        encoded, model.effective_weights(), model.config, model.lif, model.qat
    )
    if count_macs:
        return logits, macs
    return logits


def equalize_stream(y, model, mode: str = "feedback", true_classes=None,
                    fill_class: int = 0, stats: dict | None = None) -> np.ndarray:
    """Equalize a symbol-rate stream; returns decisions for symbols history..N-1.

    The first `history` symbols have no fully-populated window: they are never
    decided, stand in the feedback buffer as `fill_class`, and are excluded
    from error accounting. In feedback mode each decision enters the buffer;
    in genie mode the ground-truth class does (teacher forcing).
    """
    y = np.asarray(getattr(y, "samples", y), dtype=float)
    cfg = model.config
    history = cfg.history
    if y.size < history + 1:
        raise ValueError(f"stream of {y.size} symbols is shorter than history+1 = {history + 1}")
    if mode not in ("feedback", "genie"):
        raise ValueError(f"unknown mode {mode!r}")
    if mode == "genie":
        if true_classes is None:
            raise ValueError("genie mode requires true_classes")
        true_classes = np.asarray(true_classes, dtype=np.int64)
        if true_classes.size != y.size:
            raise ValueError("true_classes must align with y")

    decide = model.make_decider()
    encoder, m = model.encoder, cfg.bits_per_symbol
    buffer = DecisionBuffer(history, fill_class)
    out = np.zeros(y.size - history, dtype=np.int64)
    for k in range(history, y.size):
        encoded = encode_window(y[k - history : k + 1], buffer.contents(), encoder, m)
        decided = decide(encoded, stats)
        out[k - history] = decided
        if history:
            buffer.push(decided if mode == "feedback" else true_classes[k])
    return out


def _encoder_to_dict(encoder: EncoderConfig) -> dict:
    return {"rx_min": encoder.rx_min, "rx_max": encoder.rx_max}


def _model_header(model: EqualizerModel) -> dict:
    cfg = model.config
    return {
        "format": MODEL_FORMAT,
        "version": MODEL_VERSION,
        "n_tap": cfg.n_tap,
        "bits_per_symbol": cfg.bits_per_symbol,
        "hidden": cfg.hidden,
        "steps": cfg.steps,
        "lif": {
            "alpha_v": model.lif.alpha_v, "alpha_i": model.lif.alpha_i,
            "v_th": model.lif.v_th, "v_r": model.lif.v_r,
            "v_leak": model.lif.v_leak, "r": model.lif.r,
        },
        "encoder": _encoder_to_dict(model.encoder),
        "qat": None if model.qat is None else {
            "weight_bits": model.qat.weight_bits, "state_bits": model.qat.state_bits,
        },
    }


def save_model(path, model: EqualizerModel):
    """Write the versioned model container (json header + row-major weights)."""
    arrays = {name: np.ascontiguousarray(arr) for name, arr in model.parameters().items()}
    np.savez(path, header=json.dumps(_model_header(model)), **arrays)


def _parse_header(data) -> dict:
    header = json.loads(str(data["header"]))
    if header.get("format") != MODEL_FORMAT:
        raise ValueError(f"not a {MODEL_FORMAT} file")
    if header.get("version") != MODEL_VERSION:
        raise ValueError(f"unsupported model version {header.get('version')}")
    return header


def load_model(path) -> EqualizerModel:
    with np.load(path, allow_pickle=False) as data:
        header = _parse_header(data)
        arrays = {name: data[name] for name in EqualizerModel.PARAM_NAMES}
    qat = header["qat"]
    return EqualizerModel(
        config=TopologyConfig(
            n_tap=header["n_tap"], bits_per_symbol=header["bits_per_symbol"],
            hidden=header["hidden"], steps=header["steps"],
        ),
        lif=LifParams(**header["lif"]),
        encoder=EncoderConfig(**header["encoder"]),
        qat=None if qat is None else QatConfig(**qat),
        **arrays,
    )
