"""Experiment configuration and the precision x length measurement grid."""

from __future__ import annotations

import dataclasses
import json
import sys
import warnings
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from compenergy import __version__
from compenergy.analysis import (
    LengthSeries,
    capture,
    e_per_flop,
    fit_two_term,
    marginal_e_per_flop,
)
from compenergy.engine import WHOLE_MODEL, MeasurementPlan, run_profile
from compenergy.errors import ConfigError, ProfilerError
from compenergy.flops import FLOP_CONVENTION
from compenergy.meter import EnergyOracleConfig, SensorConfig, SimulatedMeter
from compenergy.model import ModelConfig, Precision, build_model
from compenergy.report import canonical

if sys.version_info >= (3, 11):
    import tomllib
else:
    import tomli as tomllib

SCHEMA_VERSION = "1.0"
DEFAULT_LENGTHS = (8, 32, 64, 96, 128)
SEED_MODULUS = 2**64


@dataclass(frozen=True)
class ExperimentConfig:
    model: ModelConfig = field(default_factory=ModelConfig)
    sensor: SensorConfig = field(default_factory=SensorConfig)
    oracle: EnergyOracleConfig = field(default_factory=EnergyOracleConfig)
    plan: MeasurementPlan = field(default_factory=MeasurementPlan)
    lengths: tuple[int, ...] = DEFAULT_LENGTHS
    precisions: tuple[Precision, ...] = (Precision.FP16, Precision.FP32)
    output_dir: str = "results"
    global_seed: int = 0

    def __post_init__(self):
        try:
            lengths = tuple(int(x) for x in self.lengths)
            precisions = tuple(Precision(p) for p in self.precisions)
        except (TypeError, ValueError) as exc:
            raise ConfigError(f"bad experiment grid: {exc}") from None
        object.__setattr__(self, "lengths", lengths)
        object.__setattr__(self, "precisions", precisions)
        if not lengths:
            raise ConfigError("lengths must be non-empty")
        bad = [x for x in lengths if not 1 <= x <= self.model.max_seq_len]
        if bad:
            raise ConfigError(f"lengths {bad} outside [1, {self.model.max_seq_len}]")
        if len(set(lengths)) != len(lengths):
            raise ConfigError("lengths must be distinct")
        if not precisions or len(set(precisions)) != len(precisions):
            raise ConfigError("precisions must be non-empty and distinct")
        seed = self.global_seed
        if not isinstance(seed, (int, np.integer)) or not 0 <= seed < SEED_MODULUS:
            raise ConfigError("global_seed must be an unsigned 64-bit integer")

    def to_dict(self, include_output_dir: bool = True) -> dict:
        experiment = {
            "lengths": list(self.lengths),
            "precisions": [p.value for p in self.precisions],
            "global_seed": int(self.global_seed),
        }
        if include_output_dir:
            experiment["output_dir"] = str(self.output_dir)
        return {
            "model": self.model.to_dict(),
            "sensor": self.sensor.to_dict(),
            "oracle": self.oracle.to_dict(),
            "plan": self.plan.to_dict(),
            "experiment": experiment,
        }

    @classmethod
    def from_dict(cls, data: dict) -> "ExperimentConfig":
        """Build from nested sections; any key left out keeps its default."""
        known = {"model", "sensor", "oracle", "plan", "experiment"}
        unknown = set(data) - known
        if unknown:
            raise ConfigError(f"unknown config sections: {sorted(unknown)}")
        try:
            model = ModelConfig(**data.get("model", {}))
            sensor = SensorConfig(**data.get("sensor", {}))
            plan = MeasurementPlan(**data.get("plan", {}))
            oracle = _oracle_from_dict(data.get("oracle", {}))
            return cls(model=model, sensor=sensor, oracle=oracle, plan=plan,
                       **data.get("experiment", {}))
        except TypeError as exc:
            raise ConfigError(f"bad config key: {exc}") from None

    def with_overrides(self, *, seed: int | None = None,
                       output_dir: str | None = None) -> "ExperimentConfig":
        changes = {}
        if seed is not None:
            changes["global_seed"] = seed
        if output_dir is not None:
            changes["output_dir"] = output_dir
        return dataclasses.replace(self, **changes)


def _oracle_from_dict(data: dict) -> EnergyOracleConfig:
    # per-kind tables merge over the defaults so a config can override one entry
    base = EnergyOracleConfig().to_dict()
    for key, value in data.items():
        if key not in base:
            raise ConfigError(f"unknown oracle key {key!r}")
        if key == "kappa":
            for kind, per_precision in value.items():
                if kind not in base["kappa"]:
                    raise ConfigError(f"unknown component kind {kind!r} in oracle.kappa")
                base["kappa"][kind].update(per_precision)
        elif isinstance(base[key], dict):
            unknown = set(value) - set(base[key])
            if unknown:
                raise ConfigError(f"unknown component kinds {sorted(unknown)} in oracle.{key}")
            base[key].update(value)
        else:
            base[key] = value
    return EnergyOracleConfig(**base)


def load_config(path: str | Path) -> ExperimentConfig:
    """Load a TOML config, or the provenance block of a JSON report."""
    path = Path(path)
    try:
        text = path.read_text()
    except OSError as exc:
        raise ConfigError(f"cannot read config {path}: {exc}") from None
    try:
        if path.suffix == ".json":
            data = json.loads(text)
            data = data.get("provenance", {}).get("config", data)
        else:
            data = tomllib.loads(text)
    except (ValueError, tomllib.TOMLDecodeError) as exc:
        raise ConfigError(f"cannot parse config {path}: {exc}") from None
    return ExperimentConfig.from_dict(data)


def cell_grid(config: ExperimentConfig) -> list[tuple[Precision, int]]:
    return [(p, n) for p in config.precisions for n in config.lengths]


def cell_seed(config: ExperimentConfig, index: int) -> int:
    return (config.global_seed + index) % SEED_MODULUS


def tokens_for(config: ExperimentConfig, length: int) -> np.ndarray:
    rng = np.random.default_rng([config.global_seed, length])
    return rng.integers(0, config.model.vocab_size, size=length)


def _record(precision, length, estimate) -> dict:
    flops = estimate.flops.total_flops
    return {
        "precision": precision.value,
        "length": length,
        "component": estimate.label,
        "mean_mj": estimate.mean,
        "std_mj": estimate.std,
        "rel_std_pct": estimate.rel_std,
        "total_flops": flops,
        "duration_s": estimate.duration,
        "e_per_flop": e_per_flop(estimate.mean, flops),
        "truth_mj": estimate.truth,
        "repetitions": estimate.n_used,
        "zero_reading_trials": estimate.zero_reading_trials,
    }


def run_cell(config: ExperimentConfig, precision: Precision, length: int,
             seed: int) -> list[dict]:
    model = build_model(dataclasses.replace(config.model, precision=precision))
    meter = SimulatedMeter(dataclasses.replace(config.sensor, seed=seed), config.oracle)
    profile = run_profile(meter, model, tokens_for(config, length), config.plan)
    return [_record(precision, length, e) for e in profile.estimates]


def run_experiment(config: ExperimentConfig) -> dict:
    """Measure every (precision, length) cell and summarize.

    A failing cell is recorded under ``errors`` and the rest of the grid still
    runs.  Records are ordered by grid index, then execution order.
    """
    records, errors, seeds = [], [], []
    for index, (precision, length) in enumerate(cell_grid(config)):
        seed = cell_seed(config, index)
        seeds.append({"index": index, "precision": precision.value, "length": length,
                      "meter_seed": seed})
        try:
            records.extend(run_cell(config, precision, length, seed))
        except ProfilerError as exc:
            errors.append({"precision": precision.value, "length": length,
                           "error": type(exc).__name__, "message": str(exc)})
    return {
        "schema_version": SCHEMA_VERSION,
        "records": records,
        "errors": errors,
        # summarize the serialized values so re-fitting a saved report matches
        "summary": summarize(canonical(records)),
        "provenance": {
            # where the files land must not change their bytes
            "config": config.to_dict(include_output_dir=False),
            "cell_seeds": seeds,
            "tool_version": __version__,
            "numpy_version": np.__version__,
            "flop_convention": FLOP_CONVENTION,
        },
    }


def summarize(records: list[dict]) -> dict:
    """Capture per cell, marginal series and two-term fits per component."""
    captures, marginals, fits, problems = [], [], [], []
    cells: dict[tuple[str, int], list[dict]] = {}
    for r in records:
        cells.setdefault((r["precision"], r["length"]), []).append(r)
    for (precision, length), rows in cells.items():
        parts = [r for r in rows if r["component"] != WHOLE_MODEL]
        whole = [r for r in rows if r["component"] == WHOLE_MODEL]
        if not whole:
            continue
        try:
            captured, pct = capture([_Mean(r["mean_mj"]) for r in parts],
                                    _Mean(whole[0]["mean_mj"]))
        except ProfilerError as exc:
            problems.append({"precision": precision, "length": length, "message": str(exc)})
            continue
        captures.append({"precision": precision, "length": length, "capture_mj": captured,
                         "model_mj": whole[0]["mean_mj"], "pct_capture": pct})

    series: dict[tuple[str, str], list[dict]] = {}
    for r in records:
        series.setdefault((r["precision"], r["component"]), []).append(r)
    for (precision, component), rows in series.items():
        rows = sorted(rows, key=lambda r: r["length"])
        if len(rows) < 2:
            continue
        s = LengthSeries([r["length"] for r in rows], [r["mean_mj"] for r in rows],
                         [r["total_flops"] for r in rows], component)
        try:
            for lo, hi, m in zip(rows, rows[1:], marginal_e_per_flop(s)):
                marginals.append({"precision": precision, "component": component,
                                  "length_lo": lo["length"], "length_hi": hi["length"],
                                  "marginal_e_per_flop": m})
            with warnings.catch_warnings():
                warnings.simplefilter("ignore")
                fit = fit_two_term(s)
        except ProfilerError as exc:
            problems.append({"precision": precision, "component": component,
                             "message": str(exc)})
            continue
        fits.append({"precision": precision, "component": component,
                     "e0_hat_mj": fit.e0_hat, "k_hat_mj_per_gflop": fit.k_hat,
                     "r_squared": fit.r_squared, "negative_intercept": fit.negative_intercept,
                     "residuals_mj": list(fit.residuals)})
    return {"captures": captures, "marginals": marginals, "fits": fits,
            "problems": problems}


@dataclass(frozen=True)
class _Mean:
    # minimal stand-in so report rows can feed capture()
    mean: float
