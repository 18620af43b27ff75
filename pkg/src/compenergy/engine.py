"""Amplified repeated-sampling measurement of components and whole passes.

Per trial: ``warmup_reps`` unmeasured replays, a counter read, ``N`` replays
back-to-back with no gap, a second read, then an idle pause so the next trial
starts from a settled sensor.  The per-execution estimate of a trial is the
counter delta divided by ``N``; trials are summarized by their mean and
population standard deviation.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from compenergy import ops
from compenergy.errors import AddressingError, BudgetError, ConfigError
from compenergy.flops import FlopCount, count_ops
from compenergy.meter import EnergyMeter, Segment, SimulatedMeter, Workload
from compenergy.model import (
    ActivationStore,
    ComponentId,
    Model,
    forward_and_cache,
    profiled_components,
    run_component,
)

WHOLE_MODEL = "model"


@dataclass(frozen=True)
class MeasurementPlan:
    repetitions: int = 10_000
    model_repetitions: int = 1_000
    trials: int = 20
    warmup_reps: int = 50
    pause_between_trials: float = 0.2
    budget_seconds: float = 600.0

    def __post_init__(self):
        if self.repetitions < 1 or self.model_repetitions < 1:
            raise ConfigError("repetitions must be >= 1")
        if self.trials < 1:
            raise ConfigError("trials must be >= 1")
        if self.warmup_reps < 0:
            raise ConfigError("warmup_reps must be >= 0")
        if self.pause_between_trials < 0:
            raise ConfigError("pause_between_trials must be >= 0")
        if not self.budget_seconds > 0:
            raise ConfigError("budget_seconds must be > 0")

    def to_dict(self) -> dict:
        return dict(self.__dict__)


@dataclass(frozen=True)
class EnergyEstimate:
    """Per-execution energy of one component (or the whole pass) over T trials.

    ``component`` is a ComponentId, or None for the whole model.  ``truth`` is
    the simulator's ground-truth draw per execution when known.
    """

    component: ComponentId | None
    per_trial: tuple[float, ...]
    n_used: int
    zero_reading_trials: int
    truth: float | None = None
    flops: FlopCount | None = None
    duration: float | None = None
    mean: float = field(init=False)
    std: float = field(init=False)

    def __post_init__(self):
        trials = np.asarray(self.per_trial, dtype=np.float64)
        object.__setattr__(self, "mean", float(trials.mean()))
        object.__setattr__(self, "std", float(trials.std()))

    @property
    def label(self) -> str:
        return WHOLE_MODEL if self.component is None else self.component.label

    @property
    def rel_std(self) -> float:
        """Relative standard deviation in percent."""
        return 100.0 * self.std / self.mean if self.mean else math.inf


def amplified_trials(meter: EnergyMeter, workload: Workload, repetitions: int,
                     plan: MeasurementPlan, replay=None) -> tuple[list[float], int]:
    """Run ``plan.trials`` amplified trials; returns per-trial estimates and the
    number of trials whose counter delta was exactly zero."""
    per_rep = meter.estimated_duration(workload)
    projected = plan.trials * ((plan.warmup_reps + repetitions) * per_rep
                               + plan.pause_between_trials)
    if projected > plan.budget_seconds:
        raise BudgetError(
            f"projected {projected:.1f} s of measurement exceeds the "
            f"{plan.budget_seconds:.1f} s budget")
    estimates, zeros = [], 0
    for _ in range(plan.trials):
        if replay is not None:
            replay()
        if plan.warmup_reps:
            meter.run(workload, plan.warmup_reps)
        start = meter.read_energy()
        meter.run(workload, repetitions)
        end = meter.read_energy()
        delta = end - start
        zeros += delta == 0
        estimates.append(delta / repetitions)
        meter.idle(plan.pause_between_trials)
    return estimates, zeros


def component_workload(model: Model, store: ActivationStore, cid: ComponentId) -> Workload:
    """Workload of one isolated replay, with its cost taken from a traced run."""
    x = store[cid]
    with ops.tracing() as trace:
        run_component(model, cid, x)
    return Workload((Segment(cid.kind, count_ops(trace)),), model.config.precision,
                    replay=lambda: run_component(model, cid, x))


def measure_component(meter: EnergyMeter, model: Model, store: ActivationStore,
                      cid: ComponentId, plan: MeasurementPlan) -> EnergyEstimate:
    if cid not in store:
        raise AddressingError(f"no cached activation for {cid}")
    workload = component_workload(model, store, cid)
    reference = store.outputs.get(cid)

    def replay():
        out = workload.replay()
        if reference is not None and not np.array_equal(out, reference):
            raise AssertionError(f"replay of {cid} diverged from the forward pass")

    trials, zeros = amplified_trials(meter, workload, plan.repetitions, plan, replay)
    return _estimate(meter, workload, cid, trials, plan.repetitions, zeros)


def model_workload(model: Model, tokens) -> Workload:
    """One full forward pass: every component in execution order plus pass overhead."""
    with ops.tracing() as trace:
        forward_and_cache(model, tokens)
    segments = tuple(
        Segment(cid.kind, count_ops(trace.restricted_to(cid.label)))
        for cid in profiled_components(model.config))
    return Workload(segments, model.config.precision, pass_overhead=True,
                    replay=lambda: forward_and_cache(model, tokens))


def measure_model(meter: EnergyMeter, model: Model, tokens,
                  plan: MeasurementPlan) -> EnergyEstimate:
    workload = model_workload(model, tokens)
    trials, zeros = amplified_trials(meter, workload, plan.model_repetitions, plan,
                                     workload.replay)
    return _estimate(meter, workload, None, trials, plan.model_repetitions, zeros)


def _estimate(meter, workload, cid, trials, n, zeros) -> EnergyEstimate:
    total = workload.segments[0].flops
    for seg in workload.segments[1:]:
        total = total + seg.flops
    truth = meter.true_draw(workload) if isinstance(meter, SimulatedMeter) else None
    return EnergyEstimate(cid, tuple(trials), n, int(zeros), truth=truth, flops=total,
                          duration=meter.estimated_duration(workload))


@dataclass
class Profile:
    estimates: list[EnergyEstimate]
    store: ActivationStore
    logits: np.ndarray

    @property
    def components(self) -> list[EnergyEstimate]:
        return [e for e in self.estimates if e.component is not None]

    @property
    def model(self) -> EnergyEstimate:
        return next(e for e in self.estimates if e.component is None)


def run_profile(meter: EnergyMeter, model: Model, tokens, plan: MeasurementPlan) -> Profile:
    """Cache activations once, measure every profiled component, then the whole pass."""
    logits, store = forward_and_cache(model, tokens)
    estimates = [measure_component(meter, model, store, cid, plan)
                 for cid in profiled_components(model.config)]
    estimates.append(measure_model(meter, model, tokens, plan))
    return Profile(estimates, store, logits)
