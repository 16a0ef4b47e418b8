"""Bit-accurate integer inference engine.

Mirrors the hardware arithmetic decisions: power-of-two per-tensor scales,
shift-based LIF decay (alpha = 2^-k), ternary inputs so multiplies reduce to
add/subtract/skip, and 32-bit saturating accumulators. All rounding is pinned:
decay shifts are arithmetic shifts (floor, also for negatives), the one drive
requantization onto the state grid rounds half-up, and offline conversion
rounds to nearest-even. Identical inputs give identical outputs on any
platform.
"""

from __future__ import annotations

import json
import math
import warnings
from dataclasses import dataclass

import numpy as np

from .equalizer import EncoderConfig, EqualizerModel, TopologyConfig
from .lif import LifParams
from .quant import FxpFormat, QatConfig, pow2_scale, state_format

FXP_FORMAT = "snndfe-fxp-model"
FXP_VERSION = 1


class ConversionError(ValueError):
    """Float model cannot be represented in the requested formats."""


@dataclass(frozen=True)
class FxpFormats:
    """Bit widths for a conversion: weights/biases, LIF state, accumulators."""

    weight_bits: int = 8
    state_bits: int = 8
    acc_bits: int = 32

    def __post_init__(self):
        if self.weight_bits < 2 or self.state_bits < 4:
            raise ValueError("weight_bits >= 2 and state_bits >= 4 required")
        if self.acc_bits < 16:
            raise ValueError("acc_bits must be >= 16")


def _sat(x: np.ndarray, lo: int, hi: int, stats: dict | None,
         key: str = "saturations") -> np.ndarray:
    clipped = np.clip(x, lo, hi)
    if stats is not None:
        stats[key] = stats.get(key, 0) + int(np.sum(clipped != x))
    return clipped


@dataclass
class FxpModel:
    """Integer twin of an EqualizerModel.

    Weight tensors are int64 arrays on per-tensor power-of-two grids
    (value = int * 2^-frac); the LIF state lives on the state-format grid with
    decay shifts k_v/k_i. The export carries everything a hardware
    implementation needs to reproduce the arithmetic bit-for-bit.
    """

    config: TopologyConfig
    encoder: EncoderConfig
    lif: LifParams
    ints: dict
    fracs: dict
    state_fmt: FxpFormat
    k_v: int
    k_i: int
    v_th_int: int
    v_r_int: int
    weight_bits: int
    acc_bits: int = 32

    @property
    def acc_min(self) -> int:
        return -(2 ** (self.acc_bits - 1))

    @property
    def acc_max(self) -> int:
        return 2 ** (self.acc_bits - 1) - 1

    def dequant(self, name: str) -> np.ndarray:
        return self.ints[name].astype(float) * 2.0 ** (-self.fracs[name])

    def make_decider(self):
        def decide(encoded: np.ndarray, stats=None) -> int:
            return int(fxp_forward(encoded, self, stats=stats).decision)

        return decide

    def decide(self, encoded: np.ndarray) -> int:
        return self.make_decider()(encoded)


def _fit_frac(arr: np.ndarray, bits: int) -> int:
    """Fractional bits of the finest power-of-two grid that holds max|arr|."""
    max_abs = float(np.max(np.abs(arr))) if arr.size else 0.0
    scale = pow2_scale(max_abs, bits)
    frac = -int(round(math.log2(scale)))
    return frac


def _shift_exponent(alpha: float, name: str) -> int:
    k = -math.log2(alpha)
    if abs(k - round(k)) > 1e-12 or round(k) < 1:
        raise ConversionError(
            f"{name}={alpha} is not a power-of-two decay; train with shift-friendly "
            "LIF constants (e.g. LifParams.shift_friendly())"
        )
    return int(round(k))


def convert(model: EqualizerModel, formats: FxpFormats) -> FxpModel:
    """Round the float model to nearest-even onto per-tensor power-of-two grids.

    The fitted grids match the QAT fake-quantization grids, so a model trained
    with matching bit widths converts exactly (zero error); a warning is issued
    when the QAT setup does not match. Tensors whose pinned grid cannot hold a
    value raise ConversionError naming the offenders.
    """
    if model.qat is None:
        warnings.warn("converting a model that was not QAT-trained", stacklevel=2)
    elif model.qat.weight_bits != formats.weight_bits or model.qat.state_bits != formats.state_bits:
        warnings.warn(
            f"model QAT bits {model.qat} do not match conversion formats {formats}",
            stacklevel=2,
        )
    if model.lif.v_leak != 0.0:
        raise ConversionError("integer engine assumes v_leak = 0")
    k_v = _shift_exponent(model.lif.alpha_v, "alpha_v")
    k_i = _shift_exponent(model.lif.alpha_i, "alpha_i")

    ints, fracs, overflowed = {}, {}, []
    qmin, qmax = -(2 ** (formats.weight_bits - 1)), 2 ** (formats.weight_bits - 1) - 1
    for name, arr in model.parameters().items():
        frac = _fit_frac(arr, formats.weight_bits)
        q = np.rint(arr * 2.0 ** frac).astype(np.int64)
        if q.min(initial=0) < qmin or q.max(initial=0) > qmax:
            overflowed.append(name)
        ints[name] = np.clip(q, qmin, qmax)
        fracs[name] = frac
    if overflowed:
        raise ConversionError(f"tensors exceed the representable range: {overflowed}")

    fmt = state_format(formats.state_bits)
    v_th_int = int(round(model.lif.v_th * 2.0 ** fmt.frac_bits))
    v_r_int = int(round(model.lif.v_r * 2.0 ** fmt.frac_bits))
    if not fmt.min_int <= v_th_int <= fmt.max_int:
        raise ConversionError("v_th does not fit the state format")
    return FxpModel(
        config=model.config, encoder=model.encoder, lif=model.lif,
        ints=ints, fracs=fracs, state_fmt=fmt, k_v=k_v, k_i=k_i,
        v_th_int=v_th_int, v_r_int=v_r_int,
        weight_bits=formats.weight_bits, acc_bits=formats.acc_bits,
    )


@dataclass(frozen=True)
class FxpLifSpec:
    """Shift amounts, thresholds and clamp range of the integer LIF step."""

    k_v: int
    k_i: int
    v_th_int: int
    v_r_int: int
    state_min: int
    state_max: int


def fxp_lif_step(v: np.ndarray, i: np.ndarray, drive: np.ndarray, spec: FxpLifSpec,
                 stats: dict | None = None):
    """One integer LIF step with shift decays.

    i' = i - (i >> k_i) + drive; v' = v - (v >> k_v) + (i' >> k_v); spike on
    v' >= v_th_int, hard reset. Shifts are arithmetic (floor, also for
    negatives). States clamp to the state format on the way out; those clips
    are quantization semantics (mirrored by QAT), tracked under "state_clips",
    not accumulator saturation.
    """
    i_new = _sat(i - (i >> spec.k_i) + drive,
                 spec.state_min, spec.state_max, stats, key="state_clips")
    v_pre = _sat(v - (v >> spec.k_v) + (i_new >> spec.k_v),
                 spec.state_min, spec.state_max, stats, key="state_clips")
    spikes = v_pre >= spec.v_th_int
    v_new = np.where(spikes, spec.v_r_int, v_pre)
    return v_new, i_new, spikes.astype(np.int64)


def _rshift_round_half_up(x: np.ndarray, shift: int) -> np.ndarray:
    """Requantize down by 2^shift, rounding halves toward +inf."""
    if shift <= 0:
        return x << (-shift)
    return (x + (1 << (shift - 1))) >> shift


@dataclass(frozen=True)
class FxpResult:
    logits: np.ndarray  # integer, on the fc3 grid
    decision: int
    saturations: int


def fxp_forward(encoded, model: FxpModel, stats: dict | None = None) -> FxpResult:
    """Integer-exact forward pass over one ternary encoded window.

    The dataflow mirrors the float reference: fc0 sees the window at the first
    step only; the hidden drive is requantized onto the state grid (round
    half-up) before entering the current equation; fc3 readouts accumulate over
    steps; argmax ties break to the lowest class.
    """
    encoded = np.asarray(encoded)
    if encoded.shape != (model.config.n_input,):
        raise ValueError(f"encoded window has shape {encoded.shape}, "
                         f"expected ({model.config.n_input},)")
    enc = encoded.astype(np.int64)
    if np.any(np.abs(enc) > 1) or np.any(enc != encoded):
        raise ValueError("fxp_forward requires a ternary {-1, 0, 1} window")
    local_stats = {"saturations": 0} if stats is None else stats
    before = local_stats.get("saturations", 0)

    w = model.ints
    f = model.fracs
    fmt = model.state_fmt
    spec = FxpLifSpec(model.k_v, model.k_i, model.v_th_int, model.v_r_int,
                      fmt.min_int, fmt.max_int)
    acc_lo, acc_hi = model.acc_min, model.acc_max

    f_a = max(f["w_fc0"], f["b_fc0"])                 # fc0 accumulator grid
    f_h = max(f["w_fc1"] + f_a, f["w_fc2"], f["b_fc1"])  # hidden drive grid
    f_z = max(f["w_fc3"], f["b_fc3"])                 # logits grid

    # NB: << binds looser than + in Python; every shift is parenthesized
    a_bias = w["b_fc0"] << (f_a - f["b_fc0"])
    a_window = _sat(((w["w_fc0"] @ enc) << (f_a - f["w_fc0"])) + a_bias,
                    acc_lo, acc_hi, local_stats)
    b1_aligned = w["b_fc1"] << (f_h - f["b_fc1"])
    z_bias = w["b_fc3"] << (f_z - f["b_fc3"])

    n_h = model.config.hidden
    v = np.zeros(n_h, dtype=np.int64)
    i = np.zeros(n_h, dtype=np.int64)
    spikes = np.zeros(n_h, dtype=np.int64)
    logits = np.zeros(model.config.n_classes, dtype=np.int64)
    for t in range(model.config.steps):
        a_t = a_window if t == 0 else a_bias
        h = _sat(
            ((w["w_fc1"] @ a_t) << (f_h - f["w_fc1"] - f_a))
            + ((w["w_fc2"] @ spikes) << (f_h - f["w_fc2"]))
            + b1_aligned,
            acc_lo, acc_hi, local_stats,
        )
        drive = _sat(_rshift_round_half_up(h, f_h - fmt.frac_bits),
                     spec.state_min, spec.state_max, local_stats, key="state_clips")
        v, i, spikes = fxp_lif_step(v, i, drive, spec, local_stats)
        logits = _sat(
            logits + ((w["w_fc3"] @ spikes) << (f_z - f["w_fc3"])) + z_bias,
            acc_lo, acc_hi, local_stats,
        )
    return FxpResult(
        logits=logits,
        decision=int(np.argmax(logits)),
        saturations=local_stats.get("saturations", 0) - before,
    )


def save_fxp_model(path, model: FxpModel) -> None:
    """Integer model container: json header plus raw int64 tensors."""
    header = {
        "format": FXP_FORMAT,
        "version": FXP_VERSION,
        "n_tap": model.config.n_tap,
        "bits_per_symbol": model.config.bits_per_symbol,
        "hidden": model.config.hidden,
        "steps": model.config.steps,
        "encoder": {"rx_min": model.encoder.rx_min, "rx_max": model.encoder.rx_max},
        "lif": {
            "alpha_v": model.lif.alpha_v, "alpha_i": model.lif.alpha_i,
            "v_th": model.lif.v_th, "v_r": model.lif.v_r,
            "v_leak": model.lif.v_leak, "r": model.lif.r,
        },
        "fracs": model.fracs,
        "state_bits": model.state_fmt.total_bits,
        "state_frac_bits": model.state_fmt.frac_bits,
        "k_v": model.k_v, "k_i": model.k_i,
        "v_th_int": model.v_th_int, "v_r_int": model.v_r_int,
        "weight_bits": model.weight_bits,
        "acc_bits": model.acc_bits,
    }
    np.savez(path, header=json.dumps(header), **model.ints)


def load_fxp_model(path) -> FxpModel:
    with np.load(path, allow_pickle=False) as data:
        header = json.loads(str(data["header"]))
        if header.get("format") != FXP_FORMAT:
            raise ValueError(f"not a {FXP_FORMAT} file")
        if header.get("version") != FXP_VERSION:
            raise ValueError(f"unsupported fxp model version {header.get('version')}")
        ints = {name: data[name] for name in EqualizerModel.PARAM_NAMES}
    return FxpModel(
        config=TopologyConfig(
            n_tap=header["n_tap"], bits_per_symbol=header["bits_per_symbol"],
            hidden=header["hidden"], steps=header["steps"],
        ),
        encoder=EncoderConfig(**header["encoder"]),
        lif=LifParams(**header["lif"]),
        ints=ints,
        fracs={k: int(v) for k, v in header["fracs"].items()},
        state_fmt=FxpFormat(header["state_bits"], header["state_frac_bits"]),
        k_v=header["k_v"], k_i=header["k_i"],
        v_th_int=header["v_th_int"], v_r_int=header["v_r_int"],
        weight_bits=header["weight_bits"], acc_bits=header["acc_bits"],
    )
