"""Energy meters: a simulated coarse sensor with a known ground truth.

:class:`SimulatedMeter` keeps a virtual clock and two cumulative counters:

* ``true_cumulative`` -- the exact integral of power, in millijoules;
* ``sensor_cumulative`` -- what a driver-level energy counter would report.
  It refreshes only at sample ticks ``phase + k * sample_period``; at each tick
  it takes the true value plus Gaussian read noise, floors it to a multiple of
  ``quantum`` and never decreases.

Refresh instants are jittered uniformly within +-``tick_jitter`` periods of
their nominal slot, so read-timing error is independent from one trial to the
next.  With ``tick_jitter = 0`` ticks are strictly periodic and the sensor lags
the true counter by at most one period of peak power; with jitter ``j`` the
longest gap between refreshes is ``(1 + 2j)`` periods.

Workloads are piecewise-constant power profiles.  Running one ``repeat`` times
back-to-back is advanced in closed form, so long amplified runs cost one call.
Power units are watts, energies millijoules, times seconds.
"""

from __future__ import annotations

import abc
import time
from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np

from compenergy.errors import ConfigError
from compenergy.flops import FlopCount
from compenergy.model import ComponentKind, Precision

PERIOD_RANGE = (0.020, 0.050)


@dataclass(frozen=True)
class SensorConfig:
    """Coarse energy sensor.  ``sample_period``/``phase`` of None are drawn from ``seed``."""

    sample_period: float | None = None
    quantum: float = 0.8
    idle_power: float = 15.0
    read_noise_sigma: float = 1.0
    seed: int = 0
    phase: float | None = None
    tick_jitter: float = 0.5

    def __post_init__(self):
        if self.sample_period is not None and not self.sample_period > 0:
            raise ConfigError("sample_period must be > 0")
        if not self.quantum > 0:
            raise ConfigError("quantum must be > 0")
        if not self.idle_power >= 0:
            raise ConfigError("idle_power must be >= 0")
        if not self.read_noise_sigma >= 0:
            raise ConfigError("read_noise_sigma must be >= 0")
        if self.phase is not None and self.phase < 0:
            raise ConfigError("phase must be >= 0")
        if not 0 <= self.tick_jitter <= 0.5:
            raise ConfigError("tick_jitter must lie in [0, 0.5]")
        if not 0 <= int(self.seed) < 2**64:
            raise ConfigError("seed must be an unsigned 64-bit integer")

    def to_dict(self) -> dict:
        return dict(self.__dict__)


def _per_kind(values: dict[str, float]) -> dict[str, float]:
    return {k.value: float(values[k.value]) for k in ComponentKind}


_NORMS = ("pre_attn_norm", "pre_mlp_norm", "final_norm")


def _default_e0():
    return _per_kind({"embedding": 2.0, "attention": 8.0, "mlp": 8.0, "lm_head": 6.0,
                      **dict.fromkeys(_NORMS, 1.5)})


def _default_kappa():
    # mJ per GFLOP.  Norms cost the same per FLOP in both precisions; their
    # FP16 premium comes from cast_penalty alone.
    fp16 = {"embedding": 1500.0, "attention": 4000.0, "mlp": 2500.0, "lm_head": 1500.0,
            **dict.fromkeys(_NORMS, 3000.0)}
    fp32 = {"embedding": 2000.0, "attention": 5000.0, "mlp": 3200.0, "lm_head": 2000.0,
            **dict.fromkeys(_NORMS, 3000.0)}
    return {k.value: {"fp16": fp16[k.value], "fp32": fp32[k.value]} for k in ComponentKind}


def _default_throughput():
    return _per_kind({"embedding": 200.0, "attention": 250.0, "mlp": 1000.0,
                      "lm_head": 1000.0, **dict.fromkeys(_NORMS, 200.0)})


@dataclass(frozen=True)
class EnergyOracleConfig:
    """Ground-truth cost model ``E = e0 + kappa * GFLOPs + cast_penalty * casts``.

    The shipped constants are synthetic inputs chosen for a desk-scale model,
    not measurements of any device.
    """

    e0: dict = field(default_factory=_default_e0)
    kappa: dict = field(default_factory=_default_kappa)
    throughput: dict = field(default_factory=_default_throughput)
    launch_overhead: float = 300e-6
    cast_penalty: float = 2e-5
    pass_overhead_energy: float = 3.0
    pass_overhead_duration: float = 100e-6

    def __post_init__(self):
        for name in ("e0", "kappa", "throughput"):
            table = getattr(self, name)
            missing = [k.value for k in ComponentKind if k.value not in table]
            if missing:
                raise ConfigError(f"oracle {name} lacks entries for {missing}")
        for kind in ComponentKind:
            if self.e0[kind.value] < 0:
                raise ConfigError(f"e0[{kind.value}] must be >= 0")
            if not self.throughput[kind.value] > 0:
                raise ConfigError(f"throughput[{kind.value}] must be > 0")
            for p in Precision:
                if self.kappa[kind.value].get(p.value, -1.0) < 0:
                    raise ConfigError(f"kappa[{kind.value}][{p.value}] missing or negative")
        for name in ("launch_overhead", "cast_penalty", "pass_overhead_energy",
                     "pass_overhead_duration"):
            if getattr(self, name) < 0:
                raise ConfigError(f"{name} must be >= 0")

    def to_dict(self) -> dict:
        return {"e0": dict(self.e0), "kappa": {k: dict(v) for k, v in self.kappa.items()},
                "throughput": dict(self.throughput), "launch_overhead": self.launch_overhead,
                "cast_penalty": self.cast_penalty,
                "pass_overhead_energy": self.pass_overhead_energy,
                "pass_overhead_duration": self.pass_overhead_duration}


def oracle_true_energy(oracle: EnergyOracleConfig, kind: ComponentKind | str,
                       precision: Precision | str, flops: FlopCount) -> tuple[float, float]:
    """Workload energy (mJ, idle draw excluded) and duration (s) of one execution."""
    kind = ComponentKind(kind).value
    precision = Precision(precision).value
    gflops = flops.total_flops * 1e-9
    energy = (oracle.e0[kind] + oracle.kappa[kind][precision] * gflops
              + oracle.cast_penalty * flops.casts)
    duration = oracle.launch_overhead + gflops / oracle.throughput[kind]
    return energy, duration


@dataclass(frozen=True)
class Segment:
    """A component execution costed by the oracle, or a fixed synthetic cost
    when ``energy`` (mJ, idle excluded) and ``duration`` (s) are given."""

    kind: ComponentKind | None
    flops: FlopCount
    energy: float | None = None
    duration: float | None = None


@dataclass(frozen=True)
class Workload:
    """One repetition: segments run back-to-back, optionally followed by the
    per-pass overhead (residual adds and launches outside profiled components).

    ``replay`` is the real computation; hardware meters call it, the simulated
    meter charges the oracle cost instead.
    """

    segments: tuple[Segment, ...]
    precision: Precision
    pass_overhead: bool = False
    replay: Callable[[], object] | None = None

    @classmethod
    def constant(cls, energy: float, duration: float,
                 precision: Precision = Precision.FP16) -> "Workload":
        """A synthetic workload of known energy and duration."""
        if energy < 0 or not duration > 0:
            raise ValueError("need energy >= 0 and duration > 0")
        return cls((Segment(None, FlopCount(), energy, duration),), Precision(precision))


class EnergyMeter(abc.ABC):
    """Cumulative energy counter plus the means to run work against it."""

    @abc.abstractmethod
    def read_energy(self) -> float:
        """Current counter value in millijoules; must not advance time."""

    @abc.abstractmethod
    def idle(self, duration: float) -> None:
        """Let ``duration`` seconds pass without running work."""

    @abc.abstractmethod
    def run(self, workload: Workload, repeat: int = 1) -> None:
        """Execute ``workload`` ``repeat`` times with no gaps."""

    @abc.abstractmethod
    def estimated_duration(self, workload: Workload) -> float:
        """Seconds one repetition of ``workload`` is expected to take."""


class HardwareMeter(EnergyMeter):
    """Base for adapters to real cumulative energy counters.

    Subclasses implement :meth:`read_energy` against a vendor API.  Work is run
    for real by calling ``workload.replay``.
    """

    def idle(self, duration: float) -> None:
        time.sleep(duration)

    def run(self, workload: Workload, repeat: int = 1) -> None:
        if workload.replay is None:
            raise ValueError("hardware measurement needs a replay callable")
        for _ in range(repeat):
            workload.replay()

    def estimated_duration(self, workload: Workload) -> float:
        start = time.perf_counter()
        self.run(workload, 1)
        return time.perf_counter() - start


class SimulatedMeter(EnergyMeter):
    def __init__(self, sensor: SensorConfig | None = None,
                 oracle: EnergyOracleConfig | None = None):
        self.sensor = sensor or SensorConfig()
        self.oracle = oracle or EnergyOracleConfig()
        setup_seq, noise_seq, jitter_seq = np.random.SeedSequence(int(self.sensor.seed)).spawn(3)
        setup = np.random.default_rng(setup_seq)
        self._noise = np.random.default_rng(noise_seq)
        self._jitter = np.random.default_rng(jitter_seq)
        # both draws always happen so the phase does not depend on whether
        # the period was given
        drawn_period = setup.uniform(*PERIOD_RANGE)
        drawn_phase_frac = setup.uniform(0.0, 1.0)
        self.sample_period = (self.sensor.sample_period if self.sensor.sample_period is not None
                              else drawn_period)
        self.phase = (self.sensor.phase if self.sensor.phase is not None
                      else drawn_phase_frac * self.sample_period)
        self.idle_power = self.sensor.idle_power
        self.quantum = self.sensor.quantum
        self.clock = 0.0
        self.true_cumulative = 0.0
        self.sensor_cumulative = 0.0
        self.last_sample_time: float | None = None
        self.peak_power = self.idle_power
        self.tick_count = 0
        self._pending = np.empty(0)
        self._next_k = 0
        self._take_ticks(0.0)  # ticks at or before t=0 never fire

    # -- ticks ---------------------------------------------------------------

    def _extend_ticks(self, n: int) -> None:
        ks = np.arange(self._next_k, self._next_k + n, dtype=np.float64)
        times = self.phase + ks * self.sample_period
        j = self.sensor.tick_jitter
        if j > 0:
            times = times + self._jitter.uniform(-j, j, size=n) * self.sample_period
        self._pending = np.concatenate((self._pending, times))
        self._next_k += n

    def _take_ticks(self, t: float) -> np.ndarray:
        """Remove and return the pending tick times <= t."""
        while not len(self._pending) or self._pending[-1] <= t:
            last = self._pending[-1] if len(self._pending) else self.clock
            self._extend_ticks(max(64, int((t - last) / self.sample_period) + 2))
        idx = int(np.searchsorted(self._pending, t, side="right"))
        due, self._pending = self._pending[:idx], self._pending[idx:]
        return due

    def next_tick_time(self) -> float:
        """Time of the next sensor refresh."""
        self._take_ticks(self.clock)
        return float(self._pending[0])

    # -- primitive advance -----------------------------------------------------

    def execute_profile(self, energies: Sequence[float], durations: Sequence[float],
                        repeat: int = 1) -> None:
        """Run a piecewise-constant power profile ``repeat`` times back-to-back.

        Segment ``i`` draws ``idle_power + energies[i] / durations[i]`` watts
        for ``durations[i]`` seconds.
        """
        energies = np.asarray(energies, dtype=np.float64)
        durations = np.asarray(durations, dtype=np.float64)
        if repeat < 0 or np.any(durations < 0) or np.any(energies < 0):
            raise ValueError("durations, energies and repeat must be non-negative")
        period = float(durations.sum())
        if repeat == 0 or period == 0.0:
            return
        seg_energy = energies + self.idle_power * durations * 1000.0
        active = durations > 0
        if active.any():
            powers = seg_energy[active] / (durations[active] * 1000.0)
            self.peak_power = max(self.peak_power, float(powers.max()))
        cum_t = np.concatenate(([0.0], np.cumsum(durations)))
        cum_e = np.concatenate(([0.0], np.cumsum(seg_energy)))
        pass_energy = float(cum_e[-1])

        t0 = self.clock
        t1 = t0 + repeat * period
        ticks = self._take_ticks(t1)
        if len(ticks):
            tau = np.clip(ticks - t0, 0.0, None)
            passes = np.minimum(np.floor(tau / period), repeat)
            rem = np.clip(tau - passes * period, 0.0, period)
            within = np.interp(rem, cum_t, cum_e)
            true_at_tick = self.true_cumulative + passes * pass_energy + within
            self._refresh(true_at_tick)
            self.last_sample_time = float(ticks[-1])
        self.clock = t1
        self.true_cumulative += repeat * pass_energy

    def _refresh(self, true_values: np.ndarray) -> None:
        sigma = self.sensor.read_noise_sigma
        values = true_values
        if sigma > 0:
            values = true_values + self._noise.normal(0.0, sigma, size=true_values.shape)
        readings = np.floor(values / self.quantum) * self.quantum
        readings = np.maximum.accumulate(np.maximum(readings, self.sensor_cumulative))
        self.sensor_cumulative = float(readings[-1])
        self.tick_count += len(readings)

    # -- public operations -----------------------------------------------------

    def advance_idle(self, duration: float) -> None:
        if duration < 0:
            raise ValueError("duration must be >= 0")
        self.execute_profile([0.0], [duration])

    def execute_workload(self, true_energy: float, duration: float, repeat: int = 1) -> None:
        """Run a constant-power workload; power is idle + true_energy/duration."""
        if true_energy < 0 or not duration > 0:
            raise ValueError("need true_energy >= 0 and duration > 0")
        self.execute_profile([true_energy], [duration], repeat)

    def read_energy(self) -> float:
        return self.sensor_cumulative

    def now(self) -> float:
        return self.clock

    # -- EnergyMeter -------------------------------------------------------------

    def profile_of(self, workload: Workload) -> tuple[list[float], list[float]]:
        energies, durations = [], []
        for seg in workload.segments:
            if seg.energy is not None:
                e, d = seg.energy, seg.duration
            else:
                e, d = oracle_true_energy(self.oracle, seg.kind, workload.precision, seg.flops)
            energies.append(e)
            durations.append(d)
        if workload.pass_overhead:
            energies.append(self.oracle.pass_overhead_energy)
            durations.append(self.oracle.pass_overhead_duration)
        return energies, durations

    def true_draw(self, workload: Workload) -> float:
        """Ground truth per repetition: workload energy plus idle draw while it runs."""
        energies, durations = self.profile_of(workload)
        return sum(energies) + self.idle_power * sum(durations) * 1000.0

    def estimated_duration(self, workload: Workload) -> float:
        return float(sum(self.profile_of(workload)[1]))

    def idle(self, duration: float) -> None:
        self.advance_idle(duration)

    def run(self, workload: Workload, repeat: int = 1) -> None:
        energies, durations = self.profile_of(workload)
        self.execute_profile(energies, durations, repeat)
