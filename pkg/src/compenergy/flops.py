"""Closed-form per-component operation counts and the trace-counting oracle.

Convention: one muladd is two FLOPs; exponentials and divisions are one FLOP
each; precision casts are reported but are not FLOPs.
"""

from __future__ import annotations

from dataclasses import dataclass

from compenergy import ops
from compenergy.model import (
    GELU_DIVS,
    GELU_EXPS,
    GELU_MULADDS,
    ComponentKind,
    ModelConfig,
    profiled_components,
)
from compenergy.errors import InputError

FLOP_CONVENTION = "1 muladd = 2 FLOPs; exp = 1; div = 1; casts excluded"


@dataclass(frozen=True)
class FlopCount:
    muladds: int = 0
    exps: int = 0
    divs: int = 0
    casts: int = 0

    @property
    def total_flops(self) -> int:
        return 2 * self.muladds + self.exps + self.divs

    @property
    def gflops(self) -> float:
        return self.total_flops * 1e-9

    def __add__(self, other: "FlopCount") -> "FlopCount":
        return FlopCount(self.muladds + other.muladds, self.exps + other.exps,
                         self.divs + other.divs, self.casts + other.casts)

    def to_dict(self) -> dict:
        return {"muladds": self.muladds, "exps": self.exps, "divs": self.divs,
                "casts": self.casts, "total_flops": self.total_flops}


def flops_of_component(config: ModelConfig, kind: ComponentKind | str,
                       seq_len: int) -> FlopCount:
    """Operation count of one execution of ``kind`` on ``seq_len`` tokens.

    Causal attention is charged the full dense score work because the executor
    computes masked entries before suppressing them.
    """
    kind = ComponentKind(kind)
    if not 1 <= seq_len <= config.max_seq_len:
        raise InputError(f"seq_len {seq_len} outside [1, {config.max_seq_len}]")
    t, d, h = seq_len, config.hidden_dim, config.num_heads
    f, v = config.ffn_dim, config.vocab_size

    if kind is ComponentKind.EMBEDDING:
        return FlopCount(muladds=t * d)
    if kind.is_norm:
        casts = 2 * t * d if config.half else 0
        return FlopCount(muladds=2 * t * d, divs=t * d, casts=casts)
    if kind is ComponentKind.ATTENTION:
        # Q, K, V, out projections + scores + weighted sum; scale and normalize divs
        return FlopCount(muladds=4 * t * d * d + 2 * t * t * d,
                         exps=h * t * t, divs=2 * h * t * t)
    if kind is ComponentKind.MLP:
        return FlopCount(muladds=2 * t * d * f + GELU_MULADDS * t * f,
                         exps=GELU_EXPS * t * f, divs=GELU_DIVS * t * f)
    if kind is ComponentKind.LM_HEAD:
        return FlopCount(muladds=config.lm_rows(t) * d * v)
    raise ValueError(f"unknown component kind {kind!r}")


def flops_of_model(config: ModelConfig, seq_len: int) -> FlopCount:
    total = FlopCount()
    for cid in profiled_components(config):
        total = total + flops_of_component(config, cid.kind, seq_len)
    return total


def count_ops(trace: ops.ExecutionTrace) -> FlopCount:
    """Tally the scalar operations recorded in an execution trace."""
    tally = dict.fromkeys(ops.OP_KINDS, 0)
    for _, op, count in trace.events:
        tally[op] += count
    return FlopCount(muladds=tally[ops.MULADD], exps=tally[ops.EXP],
                     divs=tally[ops.DIV], casts=tally[ops.CAST])
