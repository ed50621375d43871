"""Experiment configuration: a sectioned INI file with typed, validated fields.

Every field has a default, so ``--print-defaults`` emits a complete file.
All randomness descends from ``[run] seed`` through :func:`derive_seed`.
"""
from __future__ import annotations

import configparser
import io
import os
from dataclasses import dataclass, field
from pathlib import Path

from .experiment import E2EConfig, E2EFaultMix
from .kinematics import ConfigurationError, FeatureSubset, SlidingWindowSpec
from .simulator import OPERATOR_STYLES
from .utils import derive_seed, dumps, sha256_text

TASKS = ("block_transfer", "suturing")

# section -> ordered (key, default).  Tuples are written comma-separated.
DEFAULTS: dict[str, dict] = {
    "run": {
        "task": "block_transfer",
        "seed": 0,
        "output_dir": "runs",
        "data_dir": "",
    },
    "simulate": {
        "n_demos": 100,
        "operators": ("A", "B"),
        "sample_rate_hz": 100.0,
        "arm": "R",
    },
    "faults": {
        "theta": 0.005,
        "fault_fraction": 0.5,
        "p_blockdrop": 0.5,
        "p_dropoff": 0.5,
        "p_cartesian": 0.0,
        "measurement_noise": True,
        "n_per_cell": 20,
        "campaign_demos": 20,
        "dtw_calibration_demos": 20,
    },
    "gesture": {
        "subset": "All",
        "mode": "stateful",
        "window": 5,
        "lstm_units": (64, 32),
        "fc_units": 32,
        "lr": 3e-3,
        "batch_size": 4,
        "max_epochs": 30,
        "patience": 10,
        "persistence_k": 3,
    },
    "detector": {
        "subset": "CG",
        "window": 10,
        "stride": 1,
        "kind": "conv",
        "filters": (32, 16),
        "kernel": 5,
        "lstm_units": (16, 8),
        "fc_units": (16, 8),
        "dropout": 0.2,
        "lr": 1e-3,
        "batch_size": 64,
        "max_epochs": 30,
        "patience": 5,
        "class_weight": "none",
        "min_samples": 50,
        "boundary_margin": 0,
        "threshold": 0.5,
    },
    "diverge": {
        "min_samples": 30,
        "n_points": 200,
        "max_samples": 400,
    },
    "markov": {
        "n_sequences": 10000,
        "max_len": 100,
    },
}


class ConfigError(ConfigurationError):
    """Validation failure naming the offending ``section.key``."""

    def __init__(self, field_name, message):
        super().__init__(f"{field_name}: {message}")
        self.field = field_name


def _parse(raw: str, default, name):
    try:
        if isinstance(default, bool):
            v = raw.strip().lower()
            if v in ("1", "true", "yes", "on"):
                return True
            if v in ("0", "false", "no", "off"):
                return False
            raise ValueError(raw)
        if isinstance(default, int):
            return int(raw)
        if isinstance(default, float):
            return float(raw)
        if isinstance(default, tuple):
            parts = [p.strip() for p in raw.split(",") if p.strip()]
            kind = type(default[0]) if default else str
            return tuple(kind(p) for p in parts)
        return raw.strip()
    except ValueError:
        raise ConfigError(name, f"cannot parse {raw!r} as {type(default).__name__}") from None


def _fmt(v) -> str:
    if isinstance(v, tuple):
        return ", ".join(str(x) for x in v)
    if isinstance(v, bool):
        return "true" if v else "false"
    return str(v)


@dataclass
class ExperimentConfig:
    values: dict = field(default_factory=lambda: {s: dict(d) for s, d in DEFAULTS.items()})

    def __getitem__(self, section):
        return self.values[section]

    # -- io

    @classmethod
    def from_text(cls, text: str) -> "ExperimentConfig":
        cp = configparser.ConfigParser(interpolation=None)
        try:
            cp.read_string(text)
        except configparser.Error as exc:
            raise ConfigError("file", str(exc).splitlines()[0]) from None
        cfg = cls()
        for section in cp.sections():
            if section not in DEFAULTS:
                raise ConfigError(section, "unknown section")
            for key, raw in cp.items(section):
                if key not in DEFAULTS[section]:
                    raise ConfigError(f"{section}.{key}", "unknown key")
                cfg.values[section][key] = _parse(raw, DEFAULTS[section][key], f"{section}.{key}")
        cfg.validate()
        return cfg

    @classmethod
    def from_file(cls, path) -> "ExperimentConfig":
        p = Path(path)
        if not p.exists():
            raise ConfigError("config", f"file not found: {p}")
        return cls.from_text(p.read_text(encoding="utf-8"))

    def to_ini(self) -> str:
        cp = configparser.ConfigParser(interpolation=None)
        for s, d in self.values.items():
            cp[s] = {k: _fmt(v) for k, v in d.items()}
        buf = io.StringIO()
        cp.write(buf)
        return buf.getvalue()

    def to_dict(self) -> dict:
        return {s: {k: list(v) if isinstance(v, tuple) else v for k, v in d.items()} for s, d in self.values.items()}

    @property
    def hash(self) -> str:
        return sha256_text(dumps(self.to_dict()))

    # -- validation

    def validate(self, check_paths=True):
        v = self.values

        def need(cond, name, msg):
            if not cond:
                raise ConfigError(name, msg)

        need(v["run"]["task"] in TASKS, "run.task", f"must be one of {TASKS}")
        need(v["run"]["seed"] >= 0, "run.seed", "must be non-negative")
        if check_paths and v["run"]["data_dir"]:
            need(Path(v["run"]["data_dir"]).is_dir(), "run.data_dir", "directory does not exist")
        sim = v["simulate"]
        need(sim["n_demos"] >= 2, "simulate.n_demos", "must be at least 2")
        need(len(sim["operators"]) >= 1, "simulate.operators", "needs at least one operator")
        for op in sim["operators"]:
            need(op in OPERATOR_STYLES, "simulate.operators", f"unknown operator style {op!r}")
        need(sim["sample_rate_hz"] > 0, "simulate.sample_rate_hz", "must be positive")
        need(sim["arm"] in ("L", "R"), "simulate.arm", "must be L or R")
        f = v["faults"]
        need(f["theta"] > 0, "faults.theta", "must be positive")
        need(0 <= f["fault_fraction"] <= 1, "faults.fault_fraction", "must lie in [0, 1]")
        ps = (f["p_blockdrop"], f["p_dropoff"], f["p_cartesian"])
        need(all(p >= 0 for p in ps), "faults.p_blockdrop", "scenario probabilities must be non-negative")
        need(abs(sum(ps) - 1) < 1e-9, "faults.p_blockdrop", "scenario probabilities must sum to 1")
        for k in ("n_per_cell", "campaign_demos", "dtw_calibration_demos"):
            need(f[k] >= 1, f"faults.{k}", "must be at least 1")
        for sec in ("gesture", "detector"):
            d = v[sec]
            try:
                FeatureSubset.coerce(d["subset"])
            except ConfigurationError as exc:
                raise ConfigError(f"{sec}.subset", str(exc)) from None
            need(d["lr"] > 0, f"{sec}.lr", "must be positive")
            need(d["batch_size"] >= 1, f"{sec}.batch_size", "must be at least 1")
            need(d["max_epochs"] >= 1, f"{sec}.max_epochs", "must be at least 1")
            need(d["patience"] >= 1, f"{sec}.patience", "must be at least 1")
            need(d["window"] >= 1, f"{sec}.window", "must be at least 1")
        g = v["gesture"]
        need(g["mode"] in ("stateful", "windowed"), "gesture.mode", "must be stateful or windowed")
        need(g["persistence_k"] >= 1, "gesture.persistence_k", "must be at least 1")
        need(len(g["lstm_units"]) >= 1, "gesture.lstm_units", "needs at least one layer")
        d = v["detector"]
        need(d["kind"] in ("conv", "lstm"), "detector.kind", "must be conv or lstm")
        need(d["stride"] >= 1, "detector.stride", "must be at least 1")
        need(d["kernel"] >= 1 and d["kernel"] <= d["window"], "detector.kernel", "must lie in [1, window]")
        need(0 <= d["dropout"] < 1, "detector.dropout", "must lie in [0, 1)")
        need(0 < d["threshold"] < 1, "detector.threshold", "must lie in (0, 1)")
        need(d["class_weight"] in ("none", "balanced"), "detector.class_weight", "must be none or balanced")
        need(d["min_samples"] >= 1, "detector.min_samples", "must be at least 1")
        need(d["boundary_margin"] >= 0, "detector.boundary_margin", "must be non-negative")
        dv = v["diverge"]
        need(dv["min_samples"] >= 2, "diverge.min_samples", "must be at least 2")
        need(dv["n_points"] >= 10, "diverge.n_points", "must be at least 10")
        need(dv["max_samples"] >= dv["min_samples"], "diverge.max_samples", "must be >= min_samples")
        need(v["markov"]["n_sequences"] >= 1, "markov.n_sequences", "must be at least 1")
        need(v["markov"]["max_len"] >= 2, "markov.max_len", "must be at least 2")
        return self

    # -- derived objects

    def seed_for(self, *keys) -> int:
        return derive_seed(self["run"]["seed"], *keys)

    def output_root(self) -> Path:
        return Path(os.environ.get("CTXMON_OUTPUT_ROOT") or self["run"]["output_dir"])

    def detector_window(self) -> SlidingWindowSpec:
        return SlidingWindowSpec(self["detector"]["window"], self["detector"]["stride"])

    def gesture_params(self) -> dict:
        g = self["gesture"]
        return {"subset": g["subset"], "mode": g["mode"], "window": g["window"], "lstm_units": g["lstm_units"],
                "fc_units": g["fc_units"], "lr": g["lr"], "batch_size": g["batch_size"],
                "max_epochs": g["max_epochs"], "patience": g["patience"]}

    def detector_params(self) -> dict:
        d = self["detector"]
        return {"kind": d["kind"], "filters": d["filters"], "kernel": d["kernel"], "lstm_units": d["lstm_units"],
                "fc_units": d["fc_units"], "dropout": d["dropout"], "lr": d["lr"], "batch_size": d["batch_size"],
                "max_epochs": d["max_epochs"], "patience": d["patience"],
                "class_weight": None if d["class_weight"] == "none" else d["class_weight"]}

    def e2e_config(self) -> E2EConfig:
        f, d = self["faults"], self["detector"]
        mix = E2EFaultMix(p_blockdrop=f["p_blockdrop"], p_dropoff=f["p_dropoff"], p_cartesian=f["p_cartesian"],
                          theta=f["theta"], measurement_noise=f["measurement_noise"])
        return E2EConfig(
            n_demos=self["simulate"]["n_demos"], fault_fraction=f["fault_fraction"],
            operators=tuple(self["simulate"]["operators"]), seed=self["run"]["seed"],
            sample_rate_hz=self["simulate"]["sample_rate_hz"], arm=self["simulate"]["arm"], mix=mix,
            window=d["window"], detector_subset=d["subset"], gesture_subset=self["gesture"]["subset"],
            gesture_params=self.gesture_params(), detector_params=self.detector_params(),
            min_samples=d["min_samples"], boundary_margin=d["boundary_margin"], threshold=d["threshold"],
            dtw_calibration_demos=f["dtw_calibration_demos"], persistence_k=self["gesture"]["persistence_k"],
        )
