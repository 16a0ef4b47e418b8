"""Surrogate-gradient training of the equalizer.

The T-step recurrence is unrolled by hand and differentiated with the fast
sigmoid surrogate standing in for the Heaviside derivative; the hard reset is
a stop-gradient branch. A smooth twin mode replaces the Heaviside by the
matching sigmoid in both passes so the whole backward chain can be checked
against central finite differences. Quantization-aware training fake-quantizes
weights, biases, the per-step drive and the LIF state with straight-through
gradients.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from .channel import ChannelConfig, PamAlphabet, bits_to_classes, simulate_link
from .equalizer import RX_LEVELS, EncoderConfig, EqualizerModel, TopologyConfig
from .lif import LifParams
from .quant import QatConfig, fake_quantize, fake_quantize_with_mask, state_format


class TrainingDiverged(RuntimeError):
    """Raised when the training loss stops being finite."""


@dataclass(frozen=True)
class TrainConfig:
    """Optimization settings. Defaults are the full-scale numbers; desk-scale
    runs override batch_size/batches_per_epoch (see README)."""

    learning_rate: float = 1e-3
    epochs: int = 5
    batches_per_epoch: int = 10000
    batch_size: int = 200000
    train_snr_db: float = 17.0
    surrogate_slope: float = 100.0
    qat: QatConfig | None = None
    seed: int = 0

    def __post_init__(self):
        if self.learning_rate < 0:
            raise ValueError("learning_rate must be >= 0")
        if self.batch_size < 1 or self.batches_per_epoch < 1 or self.epochs < 1:
            raise ValueError("epochs, batches_per_epoch and batch_size must be >= 1")
        if self.surrogate_slope <= 0:
            raise ValueError("surrogate_slope must be > 0")


@dataclass
class AdamState:
    """First/second moment accumulators with the optimizer's standard constants."""

    m: dict
    v: dict
    step: int = 0
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8

    @classmethod
    def init(cls, params: dict) -> "AdamState":
        return cls(
            m={k: np.zeros_like(p) for k, p in params.items()},
            v={k: np.zeros_like(p) for k, p in params.items()},
        )


def surrogate_grad(u, slope: float = 100.0):
    """Fast-sigmoid surrogate for the Heaviside derivative: 1/(1+slope*|u|)^2."""
    u = np.asarray(u, dtype=float)
    return 1.0 / (1.0 + slope * np.abs(u)) ** 2


def smooth_spike(u, slope: float = 100.0):
    """Sigmoid twin of the spike function and its exact derivative.

    s(u) = (1 + slope*u/(1+slope*|u|))/2 ranges over (0, 1), and
    s'(u) = slope/2 * surrogate_grad(u), so the smooth forward/backward pair
    is finite-difference-consistent.
    """
    u = np.asarray(u, dtype=float)
    denom = 1.0 + slope * np.abs(u)
    value = 0.5 * (1.0 + slope * u / denom)
    deriv = 0.5 * slope / denom ** 2
    return value, deriv


def adam_step(params: dict, grads: dict, state: AdamState, lr: float) -> None:
    """Bias-corrected Adam update, in place."""
    state.step += 1
    b1, b2 = state.beta1, state.beta2
    bc1 = 1.0 - b1 ** state.step
    bc2 = 1.0 - b2 ** state.step
    for key, p in params.items():
        g = grads[key]
        state.m[key] = b1 * state.m[key] + (1.0 - b1) * g
        state.v[key] = b2 * state.v[key] + (1.0 - b2) * g * g
        p -= lr * (state.m[key] / bc1) / (np.sqrt(state.v[key] / bc2) + state.eps)


def _effective_weights_with_masks(model: EqualizerModel, qat: QatConfig | None):
    if qat is None:
        params = model.parameters()
        return params, {k: None for k in params}
    eff, masks = {}, {}
    for key, p in model.parameters().items():
        eff[key], masks[key], _ = fake_quantize_with_mask(p, qat.weight_bits)
    return eff, masks


def loss_and_grads(windows: np.ndarray, labels: np.ndarray, model: EqualizerModel,
                   config: TrainConfig, spike_mode: str = "hard"):
    """Mean cross-entropy over a teacher-forced batch and its gradients.

    spike_mode "hard" is the production path: Heaviside forward, surrogate
    backward, stop-gradient through the reset. "smooth" swaps in the sigmoid
    twin in both passes (full reset gradient) for finite-difference checks.
    """
    labels = np.asarray(labels, dtype=np.int64)
    n_classes = model.config.n_classes
    if labels.min(initial=0) < 0 or labels.max(initial=0) >= n_classes:
        raise ValueError(f"labels must lie in [0, {n_classes})")
    if spike_mode not in ("hard", "smooth"):
        raise ValueError(f"unknown spike_mode {spike_mode!r}")
    qat = config.qat
    lif, slope = model.lif, config.surrogate_slope
    av, ai = lif.alpha_v, lif.alpha_i
    n_steps = model.config.steps
    batch = windows.shape[0]
    sgrid = state_format(qat.state_bits) if qat is not None else None

    eff, wmasks = _effective_weights_with_masks(model, qat)
    w0, b0 = eff["w_fc0"], eff["b_fc0"]
    w1, b1 = eff["w_fc1"], eff["b_fc1"]
    w2 = eff["w_fc2"]
    w3, b3 = eff["w_fc3"], eff["b_fc3"]

    def quantize_state(x):
        if sgrid is None:
            return x, None
        q, mask, _ = fake_quantize_with_mask(x, sgrid.total_bits, sgrid.scale)
        return q, mask

    # forward, storing what the backward chain needs
    a0 = windows @ w0.T + b0
    i = np.zeros((batch, model.config.hidden))
    v = np.zeros_like(i)
    s_prev = np.zeros_like(i)
    z = np.zeros((batch, n_classes))
    S = np.zeros((n_steps,) + i.shape)
    U = np.zeros_like(S)
    VP = np.zeros_like(S)
    MH = [None] * n_steps
    MI = [None] * n_steps
    MV = [None] * n_steps
    for t in range(n_steps):
        a_t = a0 if t == 0 else b0
        h = a_t @ w1.T + b1 + s_prev @ w2.T
        if sgrid is not None:
            h, MH[t] = quantize_state(h)
        i = (1.0 - ai) * i + h
        if sgrid is not None:
            i, MI[t] = quantize_state(i)
        vp = (1.0 - av) * v + av * i
        u = vp - lif.v_th
        if spike_mode == "hard":
            s = (u >= 0.0).astype(float)
        else:
            s, _ = smooth_spike(u, slope)
        v = vp - s * (vp - lif.v_r)
        if sgrid is not None:
            v, MV[t] = quantize_state(v)
        z += s @ w3.T + b3
        S[t], U[t], VP[t] = s, u, vp
        s_prev = s

    z_shift = z - z.max(axis=1, keepdims=True)
    log_norm = np.log(np.sum(np.exp(z_shift), axis=1))
    loss = float(np.mean(log_norm - z_shift[np.arange(batch), labels]))

    # backward
    dz = np.exp(z_shift - log_norm[:, None])
    dz[np.arange(batch), labels] -= 1.0
    dz /= batch

    grads = {k: np.zeros_like(p) for k, p in eff.items()}
    grads["w_fc3"] = dz.T @ S.sum(axis=0)
    grads["b_fc3"] = n_steps * dz.sum(axis=0)
    dz_w3 = dz @ w3

    carry_v = np.zeros_like(i)   # dL/d v_t (post-reset, post-quant)
    carry_i = np.zeros_like(i)   # dL/d i_t (post-quant), from step t+1
    ghq_next = np.zeros_like(i)  # dL/d h_{t+1} (post-quant)
    ga_rest_sum = np.zeros(model.config.hidden)
    ga0 = None
    for t in range(n_steps - 1, -1, -1):
        gv = carry_v if MV[t] is None else carry_v * MV[t]
        ds = dz_w3 + ghq_next @ w2
        if spike_mode == "hard":
            fprime = surrogate_grad(U[t], slope)
        else:
            _, fprime = smooth_spike(U[t], slope)
            ds = ds + gv * (lif.v_r - VP[t])  # reset branch differentiated
        du = ds * fprime
        gvp = du + gv * (1.0 - S[t])
        giq = gvp * av + carry_i
        gipre = giq if MI[t] is None else giq * MI[t]
        ghq = gipre
        gh = ghq if MH[t] is None else ghq * MH[t]

        if t == 0:
            grads["w_fc1"] += gh.T @ a0
        else:
            grads["w_fc1"] += np.outer(gh.sum(axis=0), b0)
        grads["b_fc1"] += gh.sum(axis=0)
        if t > 0:
            grads["w_fc2"] += gh.T @ S[t - 1]
        ga = gh @ w1
        if t == 0:
            ga0 = ga
        else:
            ga_rest_sum += ga.sum(axis=0)

        carry_v = (1.0 - av) * gvp
        carry_i = (1.0 - ai) * gipre
        ghq_next = ghq

    grads["w_fc0"] = ga0.T @ windows
    grads["b_fc0"] = ga0.sum(axis=0) + ga_rest_sum

    if qat is not None:
        for key in grads:
            grads[key] = grads[key] * wmasks[key]
    return loss, grads


def teacher_forced_windows(y_samples: np.ndarray, classes: np.ndarray,
                           encoder: EncoderConfig, config: TopologyConfig):
    """Vectorized window encoding with ground-truth feedback (genie mode).

    Returns (windows, labels) for symbol positions history..N-1.
    """
    y_samples = np.asarray(y_samples, dtype=float)
    classes = np.asarray(classes, dtype=np.int64)
    history, n_c = config.history, config.n_classes
    n = y_samples.size
    batch = n - history
    if batch < 1:
        raise ValueError("stream shorter than history+1 symbols")
    bins = encoder.bin_indices(y_samples)
    windows = np.zeros((batch, config.n_input))
    rows = np.arange(batch)
    for j in range(history):
        windows[rows, j * RX_LEVELS + bins[j : j + batch]] = 1.0
    base = history * RX_LEVELS
    for j in range(history):
        windows[rows, base + j * n_c + classes[j : j + batch]] = 1.0
    windows[rows, base + history * n_c + bins[history:]] = 1.0
    return windows, classes[history:]


def calibrate_encoder(channel_cfg: ChannelConfig, snr_db: float,
                      rng: np.random.Generator, n_symbols: int = 20000,
                      alphabet: PamAlphabet | None = None) -> EncoderConfig:
    """Min-max fit of the amplitude binning on a fresh channel realization."""
    alphabet = alphabet or PamAlphabet()
    bits = rng.integers(0, 2, alphabet.bits_per_symbol * n_symbols)
    _, y = simulate_link(bits, channel_cfg, snr_db, rng, alphabet)
    return EncoderConfig(float(np.min(y.samples)), float(np.max(y.samples)))


def train(channel_cfg: ChannelConfig, topology_cfg: TopologyConfig,
          train_cfg: TrainConfig, lif: LifParams | None = None,
          progress=None):
    """Train a fresh model on freshly simulated data.

    Each batch simulates a new frame at the training SNR, builds teacher-forced
    windows and applies one Adam step; LIF constants stay fixed. Returns the
    model and a log of (batch, loss, grad_norm) rows. Deterministic for a given
    seed. Raises TrainingDiverged if the loss stops being finite.
    """
    from .harness import derive_rng  # local import: harness owns the seeding policy

    if lif is None:
        lif = LifParams.shift_friendly() if train_cfg.qat is not None else LifParams()
    alphabet = PamAlphabet()
    m = topology_cfg.bits_per_symbol
    encoder = calibrate_encoder(
        channel_cfg, train_cfg.train_snr_db,
        derive_rng(train_cfg.seed, "calibration"),
        n_symbols=max(20000, min(train_cfg.batch_size, 200000)),
        alphabet=alphabet,
    )
    model = EqualizerModel.initialize(
        topology_cfg, lif, encoder, derive_rng(train_cfg.seed, "init"), qat=train_cfg.qat
    )
    params = model.parameters()
    adam = AdamState.init(params)
    log = []
    total = train_cfg.epochs * train_cfg.batches_per_epoch
    history = topology_cfg.history
    for batch_idx in range(total):
        rng = derive_rng(train_cfg.seed, f"batch:{batch_idx}")
        bits = rng.integers(0, 2, m * (train_cfg.batch_size + history))
        classes = bits_to_classes(bits, m)
        _, y = simulate_link(bits, channel_cfg, train_cfg.train_snr_db, rng, alphabet)
        windows, labels = teacher_forced_windows(y.samples, classes, encoder, topology_cfg)
        loss, grads = loss_and_grads(windows, labels, model, train_cfg)
        if not math.isfinite(loss):
            raise TrainingDiverged(f"loss became non-finite at batch {batch_idx}")
        grad_norm = math.sqrt(sum(float(np.sum(g * g)) for g in grads.values()))
        adam_step(params, grads, adam, train_cfg.learning_rate)
        log.append((batch_idx, loss, grad_norm))
        if progress is not None:
            progress(batch_idx, total, loss)
    return model, log
