import numpy as np
import pytest

from snndfe.equalizer import (
    EncoderConfig,
    EqualizerModel,
    TopologyConfig,
    encode_window,
    equalize_stream,
)
from snndfe.fxp import (
    ConversionError,
    FxpFormats,
    FxpLifSpec,
    convert,
    fxp_forward,
    fxp_lif_step,
    load_fxp_model,
    save_fxp_model,
)
from snndfe.lif import LifParams, LifState, lif_step
from snndfe.quant import QatConfig, fake_quantize


def make_float_model(n_tap=5, hidden=8, steps=3, seed=0, scale=3.0, qat_bits=8):
    cfg = TopologyConfig(n_tap=n_tap, hidden=hidden, steps=steps)
    model = EqualizerModel.initialize(
        cfg, LifParams.shift_friendly(), EncoderConfig(0.0, 1.0),
        np.random.default_rng(seed),
        qat=QatConfig(weight_bits=qat_bits, state_bits=qat_bits),
    )
    for name in model.PARAM_NAMES:
        getattr(model, name)[:] *= scale
    return model


def random_windows(model, n, seed=1):
    rng = np.random.default_rng(seed)
    cfg = model.config
    out = np.zeros((n, cfg.n_input))
    for k in range(n):
        out[k] = encode_window(
            rng.uniform(0.0, 1.0, cfg.history + 1),
            rng.integers(0, cfg.n_classes, cfg.history),
            model.encoder, cfg.bits_per_symbol,
        )
    return out


def float_twin_forward(encoded, fm):
    """Float64 simulation of the identical quantized arithmetic (oracle)."""
    deq = {k: fm.ints[k].astype(float) * 2.0 ** -fm.fracs[k] for k in fm.ints}
    f = fm.fracs
    f_a = max(f["w_fc0"], f["b_fc0"])
    f_h = max(f["w_fc1"] + f_a, f["w_fc2"], f["b_fc1"])
    f_z = max(f["w_fc3"], f["b_fc3"])
    fs = fm.state_fmt.frac_bits
    s_lo, s_hi = fm.state_fmt.min_int * 2.0 ** -fs, fm.state_fmt.max_int * 2.0 ** -fs

    def acc_clip(val, frac):
        return np.clip(val, fm.acc_min * 2.0 ** -frac, fm.acc_max * 2.0 ** -frac)

    def floor_shift(val, k):
        # states live on the 2^-fs grid; (int >> k) * 2^-fs
        return np.floor(val * 2.0 ** (fs - k)) * 2.0 ** -fs

    def requant_half_up(val):
        if f_h <= fs:
            return val
        return np.floor(val * 2.0 ** fs + 0.5) * 2.0 ** -fs

    a_bias = deq["b_fc0"]
    a_window = acc_clip(deq["w_fc0"] @ encoded + a_bias, f_a)
    v = np.zeros(fm.config.hidden)
    i = np.zeros_like(v)
    spikes = np.zeros_like(v)
    z = np.zeros(fm.config.n_classes)
    v_th = fm.v_th_int * 2.0 ** -fs
    v_r = fm.v_r_int * 2.0 ** -fs
    for t in range(fm.config.steps):
        a_t = a_window if t == 0 else a_bias
        h = acc_clip(deq["w_fc1"] @ a_t + deq["b_fc1"] + deq["w_fc2"] @ spikes, f_h)
        drive = np.clip(requant_half_up(h), s_lo, s_hi)
        i = np.clip(i - floor_shift(i, fm.k_i) + drive, s_lo, s_hi)
        v_pre = np.clip(v - floor_shift(v, fm.k_v) + floor_shift(i, fm.k_v), s_lo, s_hi)
        spikes = (v_pre >= v_th).astype(float)
        v = np.where(spikes > 0, v_r, v_pre)
        z = acc_clip(z + deq["w_fc3"] @ spikes + deq["b_fc3"], f_z)
    return z, int(np.argmax(z))


class TestConvert:
    def test_fake_quantized_model_converts_exactly(self):
        model = make_float_model(seed=2)
        for name in model.PARAM_NAMES:
            arr = getattr(model, name)
            arr[:] = fake_quantize(arr, 8)
        fm = convert(model, FxpFormats(weight_bits=8, state_bits=8))
        for name in model.PARAM_NAMES:
            np.testing.assert_array_equal(fm.dequant(name), getattr(model, name))

    def test_single_weight_rounding_example(self):
        model = make_float_model(n_tap=1, hidden=1, steps=1, scale=0.0)
        # max |w_fc0| = 1.5 pins the fc0 grid at 6 fractional bits
        model.w_fc0[0, :2] = [0.30, 1.5]
        fm = convert(model, FxpFormats(weight_bits=8, state_bits=8))
        assert fm.fracs["w_fc0"] == 6
        assert fm.ints["w_fc0"][0, 0] == 19
        err = abs(fm.dequant("w_fc0")[0, 0] - 0.30)
        assert err == pytest.approx(0.003125)
        assert err <= 2.0 ** -6 / 2

    def test_all_zero_model(self):
        model = make_float_model(scale=0.0)
        fm = convert(model, FxpFormats())
        for name in model.PARAM_NAMES:
            np.testing.assert_array_equal(fm.ints[name], np.zeros_like(fm.ints[name]))

    def test_warns_without_matching_qat(self):
        model = make_float_model()
        model.qat = None
        with pytest.warns(UserWarning, match="not QAT-trained"):
            convert(model, FxpFormats())
        model.qat = QatConfig(weight_bits=4, state_bits=4)
        with pytest.warns(UserWarning, match="do not match"):
            convert(model, FxpFormats(weight_bits=8, state_bits=8))

    def test_rejects_non_shift_decay(self):
        cfg = TopologyConfig(n_tap=3, hidden=2, steps=1)
        model = EqualizerModel.initialize(
            cfg, LifParams(alpha_v=0.1, alpha_i=0.2), EncoderConfig(0.0, 1.0),
            np.random.default_rng(0), qat=QatConfig(),
        )
        with pytest.raises(ConversionError, match="alpha_v"):
            convert(model, FxpFormats())


class TestFxpLifStep:
    SPEC = FxpLifSpec(k_v=3, k_i=2, v_th_int=32, v_r_int=0,
                      state_min=-128, state_max=127)

    def step(self, v, i, drive):
        return fxp_lif_step(
            np.array([v], dtype=np.int64), np.array([i], dtype=np.int64),
            np.array([drive], dtype=np.int64), self.SPEC,
        )

    def test_voltage_shift_decay(self):
        spec = FxpLifSpec(k_v=3, k_i=2, v_th_int=100, v_r_int=0,
                          state_min=-128, state_max=127)
        v, i, s = fxp_lif_step(np.array([64]), np.array([0]), np.array([0]), spec)
        assert v[0] == 64 - 8 and i[0] == 0 and s[0] == 0

    def test_current_shift_decay(self):
        _, i, _ = self.step(0, 4, 0)
        assert i[0] == 3

    def test_negative_floor_shift(self):
        spec = FxpLifSpec(k_v=3, k_i=2, v_th_int=100, v_r_int=0,
                          state_min=-128, state_max=127)
        v, _, _ = fxp_lif_step(np.array([-8]), np.array([0]), np.array([0]), spec)
        assert v[0] == -8 - (-8 >> 3) + 0  # -8 >> 3 == -1, so v' = -7
        assert v[0] == -7

    def test_shift_decay_matches_float_on_exact_multiples(self):
        # alpha = 2^-k float dynamics coincide with shifts when nothing rounds
        rng = np.random.default_rng(3)
        params = LifParams(alpha_v=0.125, alpha_i=0.25, v_th=96.0, v_r=0.0)
        spec = FxpLifSpec(k_v=3, k_i=2, v_th_int=96, v_r_int=0,
                          state_min=-(2 ** 20), state_max=2 ** 20 - 1)
        v = (rng.integers(-20, 20, 16) * 32).astype(np.int64)
        i = (rng.integers(-20, 20, 16) * 32).astype(np.int64)
        drive = (rng.integers(-4, 4, 16) * 8).astype(np.int64)
        vi, ii, si = fxp_lif_step(v, i, drive, spec)
        state = LifState(v=v.astype(float), i=i.astype(float))
        fstate, fs = lif_step(state, drive.astype(float), params)
        np.testing.assert_array_equal(ii.astype(float), fstate.i)
        np.testing.assert_array_equal(vi.astype(float), fstate.v)
        np.testing.assert_array_equal(si.astype(float), fs)


class TestFxpForward:
    @pytest.mark.parametrize("bits", [4, 6, 8])
    def test_matches_float_twin_bit_exactly(self, bits):
        model = make_float_model(n_tap=5, hidden=10, steps=4, seed=4, qat_bits=bits)
        fm = convert(model, FxpFormats(weight_bits=bits, state_bits=bits))
        windows = random_windows(model, 200, seed=5)
        f_z = max(fm.fracs["w_fc3"], fm.fracs["b_fc3"])
        for k in range(windows.shape[0]):
            res = fxp_forward(windows[k], fm)
            twin_logits, twin_cls = float_twin_forward(windows[k], fm)
            np.testing.assert_array_equal(res.logits.astype(float) * 2.0 ** -f_z,
                                          twin_logits)
            assert res.decision == twin_cls

    def test_zero_window_driven_by_biases_only(self):
        model = make_float_model(seed=6)
        fm = convert(model, FxpFormats())
        zero = np.zeros(model.config.n_input)
        res1 = fxp_forward(zero, fm)
        res2 = fxp_forward(zero, fm)
        np.testing.assert_array_equal(res1.logits, res2.logits)
        twin_logits, _ = float_twin_forward(zero, fm)
        f_z = max(fm.fracs["w_fc3"], fm.fracs["b_fc3"])
        np.testing.assert_array_equal(res1.logits.astype(float) * 2.0 ** -f_z, twin_logits)

    def test_fc3_rescaling_keeps_argmax(self):
        model = make_float_model(seed=7)
        fm = convert(model, FxpFormats())
        windows = random_windows(model, 50, seed=8)
        base = [fxp_forward(w, fm).decision for w in windows]
        fm.ints["w_fc3"] = fm.ints["w_fc3"] * 2
        fm.fracs["w_fc3"] = fm.fracs["w_fc3"] + 1
        rescaled = [fxp_forward(w, fm).decision for w in windows]
        assert base == rescaled

    def test_ternary_window_enforced(self):
        model = make_float_model()
        fm = convert(model, FxpFormats())
        with pytest.raises(ValueError, match="ternary"):
            fxp_forward(np.full(model.config.n_input, 0.5), fm)
        with pytest.raises(ValueError, match="shape"):
            fxp_forward(np.zeros(3), fm)

    def test_narrow_accumulator_saturates_and_counts(self):
        model = make_float_model(seed=9, scale=6.0)
        fm = convert(model, FxpFormats(acc_bits=16))
        stats = {}
        for w in random_windows(model, 20, seed=10):
            fxp_forward(w, fm, stats=stats)
        assert stats.get("saturations", 0) > 0

    def test_wide_accumulator_never_saturates_here(self):
        model = make_float_model(seed=11)
        fm = convert(model, FxpFormats())
        stats = {}
        for w in random_windows(model, 50, seed=12):
            fxp_forward(w, fm, stats=stats)
        assert stats.get("saturations", 0) == 0


class TestFxpStreamAndSerialization:
    def test_stream_dispatch_and_stats(self):
        model = make_float_model(n_tap=5, hidden=6, steps=2, seed=13)
        fm = convert(model, FxpFormats())
        y = np.random.default_rng(14).uniform(0.0, 1.0, 120)
        stats = {}
        out = equalize_stream(y, fm, stats=stats)
        assert out.shape == (120 - fm.config.history,)
        assert set(np.unique(out)).issubset(set(range(4)))
        assert stats.get("saturations", 0) == 0

    def test_roundtrip(self, tmp_path):
        model = make_float_model(seed=15)
        fm = convert(model, FxpFormats())
        path = tmp_path / "model_fxp.npz"
        save_fxp_model(path, fm)
        loaded = load_fxp_model(path)
        assert loaded.config == fm.config
        assert loaded.fracs == fm.fracs
        assert (loaded.k_v, loaded.k_i) == (fm.k_v, fm.k_i)
        assert (loaded.v_th_int, loaded.v_r_int) == (fm.v_th_int, fm.v_r_int)
        for name in fm.ints:
            np.testing.assert_array_equal(loaded.ints[name], fm.ints[name])
        for w in random_windows(model, 10, seed=16):
            assert fxp_forward(w, loaded).decision == fxp_forward(w, fm).decision
