"""Discrete-time leaky-integrate-and-fire layer (float reference path).

Explicit-Euler update per step: the synaptic current decays and integrates the
drive, the membrane voltage decays toward the leak potential and integrates
the current, a spike fires when the voltage reaches threshold, and the voltage
is hard-reset afterwards. Decay factors are expressed directly as per-step
rates, so 0.125 and 0.25 correspond to the shift-friendly hardware constants.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np


@dataclass(frozen=True)
class LifParams:
    """Neuron constants. alpha_v/alpha_i are per-step decay-and-gain rates."""

    alpha_v: float = 0.1
    alpha_i: float = 0.2
    v_th: float = 1.0
    v_r: float = 0.0
    v_leak: float = 0.0
    r: float = 1.0  # input resistance, folded into the weights; kept for completeness

    def __post_init__(self):
        if not 0.0 < self.alpha_v < 1.0:
            raise ValueError("alpha_v must be in (0, 1)")
        if not 0.0 < self.alpha_i < 1.0:
            raise ValueError("alpha_i must be in (0, 1)")
        if self.v_th <= self.v_r:
            raise ValueError("v_th must exceed v_r")

    @classmethod
    def shift_friendly(cls) -> "LifParams":
        """Constants whose decays are exact powers of two (alpha_v=2^-3, alpha_i=2^-2)."""
        return cls(alpha_v=0.125, alpha_i=0.25)


@dataclass
class LifState:
    """Per-neuron membrane voltage and synaptic current."""

    v: np.ndarray
    i: np.ndarray

    @classmethod
    def zeros(cls, n: int) -> "LifState":
        return cls(v=np.zeros(n), i=np.zeros(n))


@dataclass
class RecurrentLayerWeights:
    """Feedforward matrix, recurrent matrix and bias of one LIF layer."""

    w_in: np.ndarray
    w_rec: np.ndarray
    bias: np.ndarray


def lif_step(state: LifState, drive: np.ndarray, params: LifParams):
    """Advance one step given the already-summed synaptic drive.

    Returns the new state and the binary spike vector. Update order: current
    decays and integrates the drive, voltage decays and integrates the new
    current, threshold compare (ties spike), hard reset to v_r.
    """
    drive = np.asarray(drive, dtype=float)
    if drive.shape != state.v.shape:
        raise ValueError(f"drive shape {drive.shape} != state shape {state.v.shape}")
    i_new = (1.0 - params.alpha_i) * state.i + drive
    v_pre = state.v + params.alpha_v * ((params.v_leak - state.v) + i_new)
    spikes = (v_pre >= params.v_th).astype(float)
    v_new = np.where(spikes > 0, params.v_r, v_pre)
    return LifState(v=v_new, i=i_new), spikes


def lif_unroll(inputs: np.ndarray, weights: RecurrentLayerWeights, params: LifParams,
               record: bool = False):
    """Run the layer for T steps; inputs has shape (T, fan_in).

    The recurrent term at step t uses the layer's own spikes from step t-1
    (zeros at t=0). Returns (spikes (T, n), final state) and, when record is
    set, a trace dict with per-step v_pre, v, i arrays for plotting.
    """
    inputs = np.atleast_2d(np.asarray(inputs, dtype=float))
    t_steps = inputs.shape[0]
    if t_steps == 0:
        raise ValueError("lif_unroll needs T >= 1")
    n = weights.w_in.shape[0]
    state = LifState.zeros(n)
    spikes_prev = np.zeros(n)
    spikes_out = np.zeros((t_steps, n))
    trace = {"v_pre": np.zeros((t_steps, n)), "v": np.zeros((t_steps, n)),
             "i": np.zeros((t_steps, n))} if record else None
    for t in range(t_steps):
        drive = weights.w_in @ inputs[t] + weights.w_rec @ spikes_prev + weights.bias
        if record:
            i_new = (1.0 - params.alpha_i) * state.i + drive
            trace["v_pre"][t] = state.v + params.alpha_v * ((params.v_leak - state.v) + i_new)
        state, spikes_prev = lif_step(state, drive, params)
        spikes_out[t] = spikes_prev
        if record:
            trace["v"][t] = state.v
            trace["i"][t] = state.i
    if record:
        return spikes_out, state, trace
    return spikes_out, state


def burst_demo_pattern():
    """Canonical single-neuron demo: one isolated input spike plus two bursts.

    Returns (input spike train (T, 1), weights, params). The neuron ignores the
    isolated spike and fires exactly once per three-spike burst, resetting to
    v_r afterwards; used by the lif-trace CLI command.
    """
    t_steps = 130
    spike_steps = [10, 40, 41, 42, 90, 91, 92]
    inputs = np.zeros((t_steps, 1))
    inputs[spike_steps, 0] = 1.0
    weights = RecurrentLayerWeights(
        w_in=np.array([[1.3]]), w_rec=np.zeros((1, 1)), bias=np.zeros(1)
    )
    return inputs, weights, LifParams()
