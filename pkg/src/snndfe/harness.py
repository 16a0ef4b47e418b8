"""Experiment orchestration: seeding, Monte-Carlo BER evaluation, baselines.

Every stochastic site derives its own generator as hash(master_seed, label),
so results are independent of scheduling and any single output can be
reproduced from the run manifest alone.
"""

from __future__ import annotations

import hashlib
import json
import platform
import time
from dataclasses import dataclass

import numpy as np

from . import __version__
from .channel import ChannelConfig, bits_to_classes, classes_to_bits, simulate_link
from .equalizer import TopologyConfig, equalize_stream
from .lif import LifParams
from .quant import QatConfig
from .train import TrainConfig


class ConfigError(ValueError):
    """Invalid or incomplete experiment configuration."""


class CalibrationError(ValueError):
    """Baseline centroid fit asked for with too little pilot data."""


def derive_seed(master_seed: int, label: str) -> int:
    digest = hashlib.sha256(f"{master_seed}:{label}".encode()).digest()
    return int.from_bytes(digest[:8], "little")


def derive_rng(master_seed: int, label: str) -> np.random.Generator:
    """Independent, schedule-free random stream for one named site."""
    return np.random.default_rng(derive_seed(master_seed, label))


@dataclass(frozen=True)
class BerPoint:
    snr_db: float
    bit_errors: int
    bits_counted: int

    @property
    def ber(self) -> float:
        return self.bit_errors / self.bits_counted

    @property
    def reliable(self) -> bool:
        """Points with fewer than 10 counted errors are statistically shaky."""
        return self.bit_errors >= 10


@dataclass
class BerCurve:
    points: list

    def ber_at(self, snr_db: float) -> float:
        for p in self.points:
            if p.snr_db == snr_db:
                return p.ber
        raise KeyError(f"no BER point at SNR {snr_db}")

    def rows(self):
        for p in self.points:
            yield {
                "snr_db": p.snr_db, "bit_errors": p.bit_errors,
                "bits_counted": p.bits_counted, "ber": p.ber,
                "reliable": p.reliable,
            }


def count_bit_errors(true_classes, decided_classes, m: int) -> int:
    """Errored bits after Gray demapping two aligned class sequences."""
    true_bits = classes_to_bits(true_classes, m)
    decided_bits = classes_to_bits(decided_classes, m)
    return int(np.sum(true_bits != decided_bits))


def evaluate_ber(model, channel_cfg: ChannelConfig, snrs_db, symbols_per_snr: int,
                 seed: int, mode: str = "feedback", stats: dict | None = None) -> BerCurve:
    """Closed-loop BER curve over fresh per-SNR channel realizations.

    The comparison window excludes the warm-up symbols (the model's history
    length). Deterministic: every SNR point uses its own derived seed.
    """
    cfg = model.config
    m = cfg.bits_per_symbol
    history = cfg.history
    if symbols_per_snr < history + 2:
        raise ConfigError("symbols_per_snr too small for the model's history")
    points = []
    for snr_db in snrs_db:
        rng = derive_rng(seed, f"eval:snr={snr_db}")
        bits = rng.integers(0, 2, m * symbols_per_snr)
        classes = bits_to_classes(bits, m)
        _, y = simulate_link(bits, channel_cfg, snr_db, rng)
        decided = equalize_stream(y, model, mode=mode, true_classes=classes, stats=stats)
        errors = count_bit_errors(classes[history:], decided, m)
        points.append(BerPoint(snr_db, errors, m * (symbols_per_snr - history)))
    return BerCurve(points)


def fit_centroids(pilot_y, pilot_classes, n_classes: int) -> np.ndarray:
    """Per-class means of a pilot block; needs at least 4 symbols per class."""
    pilot_y = np.asarray(pilot_y, dtype=float)
    pilot_classes = np.asarray(pilot_classes, dtype=np.int64)
    if pilot_y.size < 4 * n_classes:
        raise CalibrationError(
            f"pilot of {pilot_y.size} symbols is shorter than {4 * n_classes}"
        )
    centroids = np.zeros(n_classes)
    for c in range(n_classes):
        mask = pilot_classes == c
        if not np.any(mask):
            raise CalibrationError(f"pilot contains no symbols of class {c}")
        centroids[c] = float(np.mean(pilot_y[mask]))
    return centroids


def baseline_hard_decision(y, calibration: np.ndarray) -> np.ndarray:
    """Minimum-distance decision against fitted per-class centroids."""
    y = np.asarray(getattr(y, "samples", y), dtype=float)
    return np.argmin(np.abs(y[:, None] - calibration[None, :]), axis=1)


def evaluate_baseline_ber(channel_cfg: ChannelConfig, m: int, snrs_db,
                          symbols_per_snr: int, seed: int, warmup: int = 0,
                          pilot_symbols: int = 4096) -> BerCurve:
    """BER of the unequalized hard-decision receiver on the same eval frames.

    Uses the same derived eval streams as evaluate_ber so comparisons are
    paired, and the same warm-up exclusion window.
    """
    n_classes = 2 ** m
    points = []
    for snr_db in snrs_db:
        pilot_rng = derive_rng(seed, f"pilot:snr={snr_db}")
        pilot_bits = pilot_rng.integers(0, 2, m * pilot_symbols)
        pilot_classes = bits_to_classes(pilot_bits, m)
        _, pilot_y = simulate_link(pilot_bits, channel_cfg, snr_db, pilot_rng)
        centroids = fit_centroids(pilot_y.samples, pilot_classes, n_classes)

        rng = derive_rng(seed, f"eval:snr={snr_db}")
        bits = rng.integers(0, 2, m * symbols_per_snr)
        classes = bits_to_classes(bits, m)
        _, y = simulate_link(bits, channel_cfg, snr_db, rng)
        decided = baseline_hard_decision(y, centroids)
        errors = count_bit_errors(classes[warmup:], decided[warmup:], m)
        points.append(BerPoint(snr_db, errors, m * (symbols_per_snr - warmup)))
    return BerCurve(points)


# --- experiment configuration ---------------------------------------------


@dataclass(frozen=True)
class EvalConfig:
    snrs_db: tuple = tuple(range(12, 22))
    symbols_per_snr: int = 100_000
    seed: int = 0

    def __post_init__(self):
        if not self.snrs_db:
            raise ConfigError("eval.snrs_db must be nonempty")
        # statistical floor: below 1e4 symbols the BER points mean little
        if self.symbols_per_snr < 10_000:
            raise ConfigError("eval.symbols_per_snr must be >= 10000")


def _build(cls, section: dict, name: str):
    fields = {f for f in cls.__dataclass_fields__}
    unknown = set(section) - fields
    if unknown:
        raise ConfigError(f"unknown keys in '{name}' section: {sorted(unknown)}")
    try:
        return cls(**section)
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"invalid '{name}' section: {exc}") from exc


@dataclass
class ExperimentConfig:
    """Parsed experiment file; raw dict retained for hashing and manifests."""

    channel: ChannelConfig
    topology: TopologyConfig
    lif: LifParams
    train: TrainConfig
    eval: EvalConfig
    dse_raw: dict | None
    model_path: str | None
    output_dir: str
    raw: dict

    @classmethod
    def from_dict(cls, raw: dict) -> "ExperimentConfig":
        known = {"channel", "topology", "lif", "train", "eval", "dse", "model", "output_dir"}
        unknown = set(raw) - known
        if unknown:
            raise ConfigError(f"unknown top-level config keys: {sorted(unknown)}")
        train_section = dict(raw.get("train", {}))
        if isinstance(train_section.get("qat"), dict):
            train_section["qat"] = _build(QatConfig, train_section["qat"], "train.qat")
        eval_section = dict(raw.get("eval", {}))
        if "snrs_db" in eval_section:
            eval_section["snrs_db"] = tuple(eval_section["snrs_db"])
        train_cfg = _build(TrainConfig, train_section, "train")
        if "lif" in raw:
            lif = _build(LifParams, raw["lif"], "lif")
        else:
            lif = LifParams.shift_friendly() if train_cfg.qat is not None else LifParams()
        return cls(
            channel=_build(ChannelConfig, raw.get("channel", {}), "channel"),
            topology=_build(TopologyConfig, raw.get("topology", {}), "topology"),
            lif=lif,
            train=train_cfg,
            eval=_build(EvalConfig, eval_section, "eval"),
            dse_raw=raw.get("dse"),
            model_path=raw.get("model"),
            output_dir=raw.get("output_dir", "."),
            raw=raw,
        )

    @classmethod
    def from_file(cls, path) -> "ExperimentConfig":
        with open(path) as fh:
            try:
                raw = json.load(fh)
            except json.JSONDecodeError as exc:
                raise ConfigError(f"config {path} is not valid JSON: {exc}") from exc
        return cls.from_dict(raw)


def config_hash(raw: dict) -> str:
    return hashlib.sha256(json.dumps(raw, sort_keys=True).encode()).hexdigest()


def run_manifest(command: str, raw_config: dict, seed: int) -> dict:
    """Everything needed to reproduce the run bit-for-bit on the same build."""
    return {
        "command": command,
        "config": raw_config,
        "config_sha256": config_hash(raw_config),
        "master_seed": seed,
        "versions": {
            "snndfe": __version__,
            "numpy": np.__version__,
            "python": platform.python_version(),
        },
        "timestamp": time.strftime("%Y-%m-%dT%H:%M:%S%z"),
    }


def write_manifest(path, command: str, raw_config: dict, seed: int) -> None:
    with open(path, "w") as fh:
        json.dump(run_manifest(command, raw_config, seed), fh, indent=2)
        fh.write("\n")
