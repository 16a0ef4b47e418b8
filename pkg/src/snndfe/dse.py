"""Design-space exploration over (n_tap, hidden, steps): train, evaluate,
record MAC cost and BER, and extract the cost/performance Pareto front.

Search is seeded grid or random sampling without replacement; every finished
trial is appended to a JSON-lines results file immediately so long sweeps can
resume by skipping configurations that are already present. Per-trial seeds
derive from hash(master seed, config), making results schedule-independent.
"""

from __future__ import annotations

import json
import time
from dataclasses import dataclass, field

from .channel import ChannelConfig
from .equalizer import TopologyConfig, mac_count
from .fxp import FxpFormats, convert
from .harness import derive_seed, evaluate_ber
from .quant import QatConfig
from .train import TrainConfig, TrainingDiverged, train


@dataclass(frozen=True)
class TrialScale:
    """Per-trial training/evaluation budget, uniform across configurations."""

    train_symbols: int = 60_000
    eval_symbols: int = 20_000
    snrs_db: tuple = tuple(range(12, 22))
    batch_size: int = 500
    learning_rate: float = 1e-3
    train_snr_db: float = 17.0


@dataclass(frozen=True)
class DseSpace:
    """Candidate grid; `bits` entries of None evaluate the float model."""

    n_taps: tuple = tuple(range(3, 42, 2))
    hidden: tuple = tuple(range(1, 81))
    steps: tuple = tuple(range(1, 11))
    bits: tuple = (None,)
    scale: TrialScale = field(default_factory=TrialScale)

    def __post_init__(self):
        if not (self.n_taps and self.hidden and self.steps and self.bits):
            raise ValueError("DseSpace ranges must be nonempty")

    def enumerate(self) -> list:
        """Lexicographic (n_tap, hidden, steps, bits) order."""
        return [
            {"n_tap": n, "hidden": h, "steps": t, "bits": b}
            for n in self.n_taps for h in self.hidden
            for t in self.steps for b in self.bits
        ]


@dataclass
class TrialResult:
    n_tap: int
    hidden: int
    steps: int
    bits: int | None
    mac: int
    ber: dict | None  # snr_db -> ber; None for failed trials
    seed: int
    wall_time_s: float
    status: str = "ok"
    error: str | None = None

    def config_key(self) -> tuple:
        return (self.n_tap, self.hidden, self.steps, self.bits)

    def to_json(self) -> str:
        record = {
            "n_tap": self.n_tap, "hidden": self.hidden, "steps": self.steps,
            "bits": self.bits, "mac": self.mac,
            "ber": None if self.ber is None else {str(k): v for k, v in self.ber.items()},
            "seed": self.seed, "wall_time_s": round(self.wall_time_s, 3),
            "status": self.status, "error": self.error,
        }
        return json.dumps(record)

    @classmethod
    def from_json(cls, line: str) -> "TrialResult":
        rec = json.loads(line)
        ber = rec["ber"]
        return cls(
            n_tap=rec["n_tap"], hidden=rec["hidden"], steps=rec["steps"],
            bits=rec["bits"], mac=rec["mac"],
            ber=None if ber is None else {float(k): v for k, v in ber.items()},
            seed=rec["seed"], wall_time_s=rec["wall_time_s"],
            status=rec["status"], error=rec.get("error"),
        )


def trial_seed(master_seed: int, config: dict) -> int:
    label = "trial:" + json.dumps(config, sort_keys=True)
    return derive_seed(master_seed, label)


def run_trial(config: dict, channel_cfg: ChannelConfig, scale: TrialScale,
              seed: int) -> TrialResult:
    """Train one configuration at the training SNR and sweep its BER curve.

    A diverging training run marks the trial failed (no BER map) and the
    exploration continues.
    """
    topo = TopologyConfig(n_tap=config["n_tap"], hidden=config["hidden"],
                          steps=config["steps"])
    bits = config.get("bits")
    batches = max(1, scale.train_symbols // scale.batch_size)
    train_cfg = TrainConfig(
        learning_rate=scale.learning_rate, epochs=1, batches_per_epoch=batches,
        batch_size=scale.batch_size, train_snr_db=scale.train_snr_db,
        qat=None if bits is None else QatConfig(weight_bits=bits, state_bits=bits),
        seed=seed,
    )
    mac = topo.macs_per_symbol()
    start = time.perf_counter()
    try:
        model, _ = train(channel_cfg, topo, train_cfg)
        if bits is not None:
            model = convert(model, FxpFormats(weight_bits=bits, state_bits=bits))
        curve = evaluate_ber(model, channel_cfg, scale.snrs_db,
                             scale.eval_symbols, seed=seed)
    except TrainingDiverged as exc:
        return TrialResult(
            n_tap=topo.n_tap, hidden=topo.hidden, steps=topo.steps, bits=bits,
            mac=mac, ber=None, seed=seed,
            wall_time_s=time.perf_counter() - start,
            status="failed", error=str(exc),
        )
    ber = {float(p.snr_db): p.ber for p in curve.points}
    return TrialResult(
        n_tap=topo.n_tap, hidden=topo.hidden, steps=topo.steps, bits=bits,
        mac=mac, ber=ber, seed=seed,
        wall_time_s=time.perf_counter() - start,
    )


def load_results(path) -> list:
    trials = []
    try:
        with open(path) as fh:
            for line in fh:
                line = line.strip()
                if line:
                    trials.append(TrialResult.from_json(line))
    except FileNotFoundError:
        pass
    return trials


def search(space: DseSpace, channel_cfg: ChannelConfig, strategy: str, budget: int,
           seed: int, results_path=None, trial_runner=run_trial,
           progress=None) -> list:
    """Run `budget` trials; returns all results including resumed ones.

    Grid takes the lexicographic prefix of the space; random samples without
    replacement. With a results_path, completed configurations are skipped and
    new results are appended as they finish.
    """
    configs = space.enumerate()
    if budget < 1:
        raise ValueError("budget must be >= 1")
    if strategy == "grid":
        if budget > len(configs):
            raise ValueError(f"grid budget {budget} exceeds space size {len(configs)}")
        chosen = configs[:budget]
    elif strategy == "random":
        if budget > len(configs):
            raise ValueError(f"budget {budget} exceeds space size {len(configs)}")
        import numpy as np

        order = np.random.default_rng(seed).permutation(len(configs))[:budget]
        chosen = [configs[int(k)] for k in order]
    else:
        raise ValueError(f"unknown strategy {strategy!r}")

    done = load_results(results_path) if results_path else []
    done_keys = {t.config_key() for t in done}
    results = list(done)
    for config in chosen:
        key = (config["n_tap"], config["hidden"], config["steps"], config["bits"])
        if key in done_keys:
            continue
        trial = trial_runner(config, channel_cfg, space.scale,
                             trial_seed(seed, config))
        results.append(trial)
        done_keys.add(key)
        if results_path:
            with open(results_path, "a") as fh:
                fh.write(trial.to_json() + "\n")
        if progress is not None:
            progress(trial)
    return results


def pareto_front(trials, snr_db: float) -> list:
    """Non-dominated subset under minimize(mac, ber at snr_db), mac-ascending.

    Equal (mac, ber) ties are all kept. Trials missing the SNR point raise.
    """
    if not trials:
        raise ValueError("pareto_front needs at least one trial")
    pts = []
    for t in trials:
        if t.ber is None or float(snr_db) not in t.ber:
            raise ValueError(
                f"trial {t.config_key()} has no BER at SNR {snr_db}"
            )
        pts.append((t.mac, t.ber[float(snr_db)], t))
    pts.sort(key=lambda p: (p[0], p[1]))
    front = []
    best_ber = float("inf")
    idx = 0
    while idx < len(pts):
        group_mac = pts[idx][0]
        group = [p for p in pts if p[0] == group_mac]
        idx += len(group)
        group_best = min(p[1] for p in group)
        if group_best < best_ber:
            front.extend(t for mac, ber, t in group if ber == group_best)
            best_ber = group_best
    return front


def space_from_dict(raw: dict) -> DseSpace:
    """Build a DseSpace from the config file's `dse` section."""
    raw = dict(raw)
    scale_raw = raw.pop("scale", {})
    known_scale = set(TrialScale.__dataclass_fields__)
    unknown = set(scale_raw) - known_scale
    if unknown:
        raise ValueError(f"unknown keys in dse.scale: {sorted(unknown)}")
    if "snrs_db" in scale_raw:
        scale_raw["snrs_db"] = tuple(scale_raw["snrs_db"])
    known = set(DseSpace.__dataclass_fields__) - {"scale"}
    unknown = set(raw) - known - {"strategy", "budget"}
    if unknown:
        raise ValueError(f"unknown keys in dse section: {sorted(unknown)}")
    kwargs = {}
    for key in ("n_taps", "hidden", "steps", "bits"):
        if key in raw:
            kwargs[key] = tuple(raw[key])
    return DseSpace(scale=TrialScale(**scale_raw), **kwargs)
