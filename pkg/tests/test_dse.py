import numpy as np
import pytest

from snndfe.channel import ChannelConfig
from snndfe.dse import (
    DseSpace,
    TrialResult,
    TrialScale,
    load_results,
    pareto_front,
    run_trial,
    search,
    space_from_dict,
    trial_seed,
)
from snndfe.train import TrainingDiverged

CHANNEL = ChannelConfig()


def synthetic_trial(n_tap=3, hidden=4, steps=2, bits=None, mac=None, ber=None, seed=0):
    return TrialResult(
        n_tap=n_tap, hidden=hidden, steps=steps, bits=bits,
        mac=mac if mac is not None else hidden * 100,
        ber={17.0: 0.1} if ber is None else ber,
        seed=seed, wall_time_s=0.0,
    )


def stub_runner(config, channel_cfg, scale, seed):
    """Deterministic fake trial: BER is a decreasing function of cost."""
    from snndfe.equalizer import input_size, mac_count

    mac = mac_count(config["hidden"], input_size(config["n_tap"], 2), config["steps"])
    rng = np.random.default_rng(seed)
    ber = {float(s): float(1.0 / (mac ** 0.5) * (1 + 0.1 * rng.random()) / (1 + s))
           for s in scale.snrs_db}
    return TrialResult(
        n_tap=config["n_tap"], hidden=config["hidden"], steps=config["steps"],
        bits=config["bits"], mac=mac, ber=ber, seed=seed, wall_time_s=0.01,
    )


class TestPareto:
    def test_single_trial_is_its_own_front(self):
        t = synthetic_trial()
        assert pareto_front([t], 17.0) == [t]

    def test_strict_domination(self):
        a = synthetic_trial(mac=10, ber={17.0: 0.1})
        b = synthetic_trial(mac=20, ber={17.0: 0.2})
        assert pareto_front([a, b], 17.0) == [a]

    def test_ties_on_both_axes_kept(self):
        a = synthetic_trial(hidden=1, mac=10, ber={17.0: 0.1})
        b = synthetic_trial(hidden=2, mac=10, ber={17.0: 0.1})
        c = synthetic_trial(hidden=3, mac=10, ber={17.0: 0.2})
        front = pareto_front([a, b, c], 17.0)
        assert set(id(t) for t in front) == {id(a), id(b)}

    def test_missing_snr_named(self):
        t = synthetic_trial(ber={17.0: 0.1})
        with pytest.raises(ValueError, match="no BER at SNR 12"):
            pareto_front([t], 12.0)

    def test_agrees_with_brute_force_oracle(self):
        # O(n^2) domination check on 200 random trials
        rng = np.random.default_rng(42)
        trials = [
            synthetic_trial(hidden=k, mac=int(rng.integers(1, 50)) * 10,
                            ber={17.0: float(rng.choice([0.5, 0.2, 0.1, 0.05, 0.02]))})
            for k in range(200)
        ]

        def dominates(a, b):
            return (a.mac <= b.mac and a.ber[17.0] <= b.ber[17.0]
                    and (a.mac < b.mac or a.ber[17.0] < b.ber[17.0]))

        brute = [t for t in trials
                 if not any(dominates(o, t) for o in trials if o is not t)]
        fast = pareto_front(trials, 17.0)
        assert {id(t) for t in fast} == {id(t) for t in brute}
        macs = [t.mac for t in fast]
        assert macs == sorted(macs)

    def test_invariant_under_reordering(self):
        rng = np.random.default_rng(7)
        trials = [synthetic_trial(hidden=k, mac=int(rng.integers(1, 30)) * 5,
                                  ber={17.0: float(rng.random())})
                  for k in range(50)]
        front_a = {t.config_key() for t in pareto_front(trials, 17.0)}
        shuffled = list(trials)
        rng.shuffle(shuffled)
        front_b = {t.config_key() for t in pareto_front(shuffled, 17.0)}
        assert front_a == front_b


class TestSearch:
    SPACE = DseSpace(n_taps=(17,), hidden=(8, 16), steps=(2, 4),
                     scale=TrialScale(train_symbols=1000, eval_symbols=500,
                                      snrs_db=(17,), batch_size=250))

    def test_grid_enumeration_order(self):
        res = search(self.SPACE, CHANNEL, "grid", 4, seed=1, trial_runner=stub_runner)
        keys = [(t.hidden, t.steps) for t in res]
        assert keys == [(8, 2), (8, 4), (16, 2), (16, 4)]

    def test_grid_budget_bounded(self):
        with pytest.raises(ValueError, match="exceeds space size"):
            search(self.SPACE, CHANNEL, "grid", 5, seed=1, trial_runner=stub_runner)

    def test_random_same_seed_same_sequence(self):
        a = search(self.SPACE, CHANNEL, "random", 3, seed=5, trial_runner=stub_runner)
        b = search(self.SPACE, CHANNEL, "random", 3, seed=5, trial_runner=stub_runner)
        assert [t.config_key() for t in a] == [t.config_key() for t in b]

    def test_random_without_replacement(self):
        res = search(self.SPACE, CHANNEL, "random", 4, seed=6, trial_runner=stub_runner)
        keys = [t.config_key() for t in res]
        assert len(set(keys)) == 4

    def test_budget_one_front_is_that_trial(self):
        res = search(self.SPACE, CHANNEL, "grid", 1, seed=2, trial_runner=stub_runner)
        assert len(res) == 1
        assert pareto_front(res, 17.0) == res

    def test_resume_skips_completed(self, tmp_path):
        path = tmp_path / "results.jsonl"
        calls = []

        def counting_runner(config, channel_cfg, scale, seed):
            calls.append(config["hidden"])
            return stub_runner(config, channel_cfg, scale, seed)

        first = search(self.SPACE, CHANNEL, "grid", 2, seed=3,
                       results_path=path, trial_runner=counting_runner)
        assert len(first) == 2 and len(calls) == 2
        resumed = search(self.SPACE, CHANNEL, "grid", 4, seed=3,
                         results_path=path, trial_runner=counting_runner)
        assert len(resumed) == 4
        assert len(calls) == 4  # only the 2 new configs ran
        stored = load_results(path)
        assert {t.config_key() for t in stored} == {t.config_key() for t in resumed}

    def test_trial_seeds_schedule_independent(self):
        cfg = {"n_tap": 17, "hidden": 8, "steps": 2, "bits": None}
        assert trial_seed(9, cfg) == trial_seed(9, dict(reversed(list(cfg.items()))))
        assert trial_seed(9, cfg) != trial_seed(10, cfg)

    def test_failed_trial_recorded_and_continues(self, tmp_path, monkeypatch):
        import snndfe.dse as dse_mod

        def exploding_train(channel_cfg, topo, train_cfg, lif=None, progress=None):
            raise TrainingDiverged("loss became non-finite at batch 0")

        monkeypatch.setattr(dse_mod, "train", exploding_train)
        path = tmp_path / "results.jsonl"
        res = search(self.SPACE, CHANNEL, "grid", 2, seed=4, results_path=path)
        assert all(t.status == "failed" and t.ber is None for t in res)
        assert all("non-finite" in t.error for t in res)
        stored = load_results(path)
        assert len(stored) == 2

    def test_real_trial_smoke(self):
        # one genuinely trained micro trial end to end
        scale = TrialScale(train_symbols=2000, eval_symbols=600, snrs_db=(17,),
                           batch_size=500)
        cfg = {"n_tap": 5, "hidden": 6, "steps": 2, "bits": None}
        trial = run_trial(cfg, CHANNEL, scale, seed=11)
        assert trial.status == "ok"
        assert trial.mac == 6 * (input_size_of(cfg) + 12 + 4) * 2
        assert 0.0 <= trial.ber[17.0] <= 0.75
        again = run_trial(cfg, CHANNEL, scale, seed=11)
        assert again.ber == trial.ber


def input_size_of(cfg):
    from snndfe.equalizer import input_size

    return input_size(cfg["n_tap"], 2)


class TestSpaceParsing:
    def test_space_from_dict(self):
        space = space_from_dict({
            "n_taps": [17], "hidden": [8, 16], "steps": [2],
            "bits": [None, 8],
            "scale": {"train_symbols": 5000, "snrs_db": [12, 17]},
        })
        assert space.n_taps == (17,)
        assert space.bits == (None, 8)
        assert space.scale.snrs_db == (12, 17)
        assert len(space.enumerate()) == 4

    def test_unknown_keys_rejected(self):
        with pytest.raises(ValueError, match="unknown keys"):
            space_from_dict({"taps": [17]})

    def test_empty_range_rejected(self):
        with pytest.raises(ValueError, match="nonempty"):
            DseSpace(n_taps=())
