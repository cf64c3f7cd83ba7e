"""Closed-form cost accounting and exact reconciliation against runtime
counters.

All formulas run in exact rational arithmetic (head and layer fractions are
exact) and reconcile with the executor's integer counters at zero
tolerance. Counters cover attention only: key rows visible to a head's
queries plus multiply-accumulates in the two attention matmuls; FFN and
projection costs are out of scope, as is retrieval search time (only pool
row counts are modeled).
"""

from __future__ import annotations

from dataclasses import dataclass
from fractions import Fraction

from .config import ModelConfig


@dataclass(frozen=True)
class CostInputs:
    total_tokens: int  # T
    segment_len: int  # S
    carry_len: int  # M
    prefix_len: int  # R
    alpha: Fraction  # |local heads| / H
    beta: Fraction  # |long layers| / L
    n_layers: int
    n_heads: int
    d_head: int

    def __post_init__(self):
        if min(self.segment_len, self.n_layers, self.n_heads, self.d_head) < 1:
            raise ValueError("cost inputs must be positive")
        if not (0 <= self.alpha <= 1 and 0 <= self.beta <= 1):
            raise ValueError("alpha and beta must lie in [0, 1]")

    @classmethod
    def from_config(cls, cfg: ModelConfig, total_tokens: int) -> "CostInputs":
        return cls(
            total_tokens=total_tokens,
            segment_len=cfg.segment_len,
            carry_len=cfg.carry_len,
            prefix_len=cfg.prefix_len,
            alpha=cfg.partition.alpha,
            beta=cfg.partition.beta,
            n_layers=cfg.n_layers,
            n_heads=cfg.n_heads,
            d_head=cfg.d_head,
        )


def effective_context(inp: CostInputs) -> Fraction:
    """Head/layer-weighted context rows per query: S + alpha*M + beta*(1-alpha)*R."""
    return (
        Fraction(inp.segment_len)
        + inp.alpha * inp.carry_len
        + inp.beta * (1 - inp.alpha) * inp.prefix_len
    )


def peak_kv_len(inp: CostInputs) -> dict:
    """Per head class peak attention-visible KV rows, plus their weighted
    mean (which equals the effective context)."""
    local = inp.segment_len + inp.carry_len
    long_enabled = inp.segment_len + inp.prefix_len
    long_other = inp.segment_len
    mean = (
        inp.alpha * local
        + inp.beta * (1 - inp.alpha) * long_enabled
        + (1 - inp.beta) * (1 - inp.alpha) * long_other
    )
    return {
        "local": local,
        "long_enabled": long_enabled,
        "long_other": long_other,
        "weighted_mean": mean,
    }


def attention_time_estimate(inp: CostInputs) -> Fraction:
    """Steady-state attention MACs over T tokens: 2*T*eff_ctx*d*L*H.

    Exactly linear in T; the first segment's shorter prefixes are handled by
    ``flops_total_with_warmup``.
    """
    return (
        2
        * inp.total_tokens
        * effective_context(inp)
        * inp.d_head
        * inp.n_layers
        * inp.n_heads
    )


def flops_total_with_warmup(inp: CostInputs) -> Fraction:
    """Total attention MACs including the first segment, whose carry and
    retrieval prefixes are empty. Matches the executor's counters exactly
    whenever T is a whole number of segments and T >= S."""
    s = inp.segment_len
    if inp.total_tokens < s:
        scaled = CostInputs(
            total_tokens=inp.total_tokens,
            segment_len=inp.total_tokens,
            carry_len=0,
            prefix_len=inp.prefix_len,
            alpha=inp.alpha,
            beta=Fraction(0),
            n_layers=inp.n_layers,
            n_heads=inp.n_heads,
            d_head=inp.d_head,
        )
        return attention_time_estimate(scaled)
    warmup = 2 * s * s * inp.d_head * inp.n_layers * inp.n_heads
    steady = CostInputs(
        total_tokens=inp.total_tokens - s,
        segment_len=s,
        carry_len=inp.carry_len,
        prefix_len=inp.prefix_len,
        alpha=inp.alpha,
        beta=inp.beta,
        n_layers=inp.n_layers,
        n_heads=inp.n_heads,
        d_head=inp.d_head,
    )
    return Fraction(warmup) + attention_time_estimate(steady)


def pool_growth(inp: CostInputs, total_tokens: int | None = None) -> int:
    """Pool rows after T tokens: one row per (long layer, long head, token)."""
    t = inp.total_tokens if total_tokens is None else total_tokens
    n_long_layers = int(inp.beta * inp.n_layers)
    n_long_heads = int((1 - inp.alpha) * inp.n_heads)
    return n_long_layers * n_long_heads * t


@dataclass
class Reconciliation:
    peak_ok: bool
    flops_ok: bool
    pool_ok: bool
    detail: dict

    @property
    def ok(self) -> bool:
        return self.peak_ok and self.flops_ok and self.pool_ok


def reconcile(cfg: ModelConfig, result) -> Reconciliation:
    """Zero-tolerance comparison of an inference run's counters against the
    closed forms. Peak checks apply from the first full-prefix segment
    onward (the first segment has empty prefixes by construction)."""
    total_tokens = sum(result.counters["segment_lens"])
    inp = CostInputs.from_config(cfg, total_tokens)
    part = cfg.partition
    peaks = peak_kv_len(inp)

    peak_ok = True
    detail = {"peak_mismatches": []}
    for seg_idx, kv in enumerate(result.per_segment_kv[1:], start=2):
        for (layer, head), seen in kv.items():
            if head in part.local_heads:
                want = peaks["local"]
            elif layer in part.long_layers:
                want = peaks["long_enabled"]
            else:
                want = peaks["long_other"]
            if seen != want:
                peak_ok = False
                detail["peak_mismatches"].append((seg_idx, layer, head, seen, want))

    model_total = flops_total_with_warmup(inp)
    measured_total = sum(result.per_segment_macs)
    flops_ok = model_total == measured_total
    steady = attention_time_estimate(
        CostInputs.from_config(cfg, cfg.segment_len)
    )
    for macs in result.per_segment_macs[1:]:
        flops_ok = flops_ok and (macs == steady)

    pool_ok = result.counters["pool_rows"] == pool_growth(inp)
    detail.update(
        flops_model=int(model_total),
        flops_measured=int(measured_total),
        pool_model=pool_growth(inp),
        pool_measured=result.counters["pool_rows"],
    )
    return Reconciliation(peak_ok, flops_ok, pool_ok, detail)


COST_CSV_HEADER = (
    "T,S,M,R,alpha,beta,eff_ctx,peak_kv_local,peak_kv_long_enabled,"
    "flops_model,flops_measured,pool_rows_model,pool_rows_measured"
)


def cost_report_row(cfg: ModelConfig, total_tokens: int, result=None) -> str:
    inp = CostInputs.from_config(cfg, total_tokens)
    peaks = peak_kv_len(inp)
    model_flops = flops_total_with_warmup(inp)
    measured_flops = sum(result.per_segment_macs) if result is not None else ""
    pool_measured = result.counters["pool_rows"] if result is not None else ""
    return ",".join(
        str(x)
        for x in (
            total_tokens,
            inp.segment_len,
            inp.carry_len,
            inp.prefix_len,
            float(inp.alpha),
            float(inp.beta),
            float(effective_context(inp)),
            peaks["local"],
            peaks["long_enabled"],
            int(model_flops),
            measured_flops,
            pool_growth(inp),
            pool_measured,
        )
    )
