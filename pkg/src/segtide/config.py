"""Model and execution configuration, presets, and the on-disk text format.

Configs serialize to a canonical ``key = value`` sections format (INI) used
both for experiment records and as the checkpoint header. Validation runs
before any compute and names the violated invariant in its message.
"""

from __future__ import annotations

import configparser
import io
from dataclasses import dataclass, field, replace

from .attention import HeadPartition


@dataclass(frozen=True)
class ModelConfig:
    n_layers: int
    n_heads: int
    d_model: int
    d_ff: int
    vocab: int
    segment_len: int  # S
    carry_len: int  # M
    prefix_len: int  # R
    partition: HeadPartition
    # retrieval knobs
    top_k: int = 4
    w_off: int = 1
    w_q: int = 2
    t_q: int = 2
    l_q: int = 4
    # which past segments retrieval may see: "prev" includes segment i-1,
    # "strict" stops at segment i-2
    retrieval_window: str = "prev"
    tbptt_depth: int = 1  # K
    seed: int = 0
    rope_base: float = 10000.0
    bos_id: int = 0

    @property
    def d_head(self) -> int:
        return self.d_model // self.n_heads

    @property
    def retrieval_enabled(self) -> bool:
        return len(self.partition.long_layers) > 0

    def validate(self):
        if self.d_model % self.n_heads != 0:
            raise ValueError(
                f"d_model ({self.d_model}) must be divisible by n_heads ({self.n_heads})"
            )
        if self.d_head % 2 != 0:
            raise ValueError(f"head dimension must be even for rotary, got {self.d_head}")
        if self.segment_len < self.carry_len:
            raise ValueError(
                f"segment length S ({self.segment_len}) must be >= carry length M "
                f"({self.carry_len})"
            )
        if self.carry_len < 0 or self.prefix_len < 1:
            raise ValueError("carry length must be >= 0 and prefix length >= 1")
        if self.partition.n_heads != self.n_heads or self.partition.n_layers != self.n_layers:
            raise ValueError(
                "head partition shape does not match model: "
                f"partition is {self.partition.n_heads} heads x {self.partition.n_layers} "
                f"layers, model is {self.n_heads} x {self.n_layers}"
            )
        if self.retrieval_window not in ("prev", "strict"):
            raise ValueError(f"retrieval_window must be 'prev' or 'strict', got {self.retrieval_window!r}")
        if self.tbptt_depth < 0:
            raise ValueError("tbptt depth K must be >= 0")
        if not (0 <= self.bos_id < self.vocab):
            raise ValueError(f"bos_id {self.bos_id} out of vocab range [0, {self.vocab})")
        if min(self.top_k, self.w_off + 1, self.w_q, self.t_q, self.l_q) < 1:
            raise ValueError("retrieval knobs (top_k, w_q, t_q, l_q) must be >= 1, w_off >= 0")
        return self

    # -- canonical text serialization ---------------------------------------

    def canonical_text(self) -> str:
        cp = configparser.ConfigParser()
        cp["model"] = {
            "n_layers": str(self.n_layers),
            "n_heads": str(self.n_heads),
            "d_model": str(self.d_model),
            "d_ff": str(self.d_ff),
            "vocab": str(self.vocab),
            "rope_base": repr(self.rope_base),
            "bos_id": str(self.bos_id),
        }
        cp["execution"] = {
            "segment_len": str(self.segment_len),
            "carry_len": str(self.carry_len),
            "prefix_len": str(self.prefix_len),
            "tbptt_depth": str(self.tbptt_depth),
            "seed": str(self.seed),
        }
        cp["partition"] = {
            "local_heads": _intset(self.partition.local_heads),
            "long_heads": _intset(self.partition.long_heads),
            "long_layers": _intset(self.partition.long_layers),
        }
        cp["retrieval"] = {
            "top_k": str(self.top_k),
            "w_off": str(self.w_off),
            "w_q": str(self.w_q),
            "t_q": str(self.t_q),
            "l_q": str(self.l_q),
            "window": self.retrieval_window,
        }
        buf = io.StringIO()
        cp.write(buf)
        return buf.getvalue()

    @classmethod
    def from_text(cls, text: str) -> "ModelConfig":
        cp = configparser.ConfigParser()
        cp.read_string(text)
        m, e, p, r = cp["model"], cp["execution"], cp["partition"], cp["retrieval"]
        partition = HeadPartition(
            n_heads=int(m["n_heads"]),
            n_layers=int(m["n_layers"]),
            local_heads=_parse_intset(p["local_heads"]),
            long_heads=_parse_intset(p["long_heads"]),
            long_layers=_parse_intset(p["long_layers"]),
        )
        return cls(
            n_layers=int(m["n_layers"]),
            n_heads=int(m["n_heads"]),
            d_model=int(m["d_model"]),
            d_ff=int(m["d_ff"]),
            vocab=int(m["vocab"]),
            rope_base=float(m["rope_base"]),
            bos_id=int(m["bos_id"]),
            segment_len=int(e["segment_len"]),
            carry_len=int(e["carry_len"]),
            prefix_len=int(e["prefix_len"]),
            tbptt_depth=int(e["tbptt_depth"]),
            seed=int(e["seed"]),
            top_k=int(r["top_k"]),
            w_off=int(r["w_off"]),
            w_q=int(r["w_q"]),
            t_q=int(r["t_q"]),
            l_q=int(r["l_q"]),
            retrieval_window=r["window"],
            partition=partition,
        ).validate()


def _intset(s) -> str:
    return ",".join(str(i) for i in sorted(s))


def _parse_intset(s: str) -> frozenset[int]:
    s = s.strip()
    if not s:
        return frozenset()
    return frozenset(int(tok) for tok in s.split(","))


def desk_config(**overrides) -> ModelConfig:
    """Small config sized so every check runs in seconds on a laptop."""
    partition = HeadPartition(
        n_heads=4,
        n_layers=4,
        local_heads=frozenset({2, 3}),
        long_heads=frozenset({0, 1}),
        long_layers=frozenset({1, 3}),
    )
    cfg = ModelConfig(
        n_layers=4,
        n_heads=4,
        d_model=32,
        d_ff=64,
        vocab=64,
        segment_len=8,
        carry_len=4,
        prefix_len=4,
        partition=partition,
        top_k=4,
        w_off=1,
        w_q=2,
        t_q=2,
        l_q=4,
        tbptt_depth=1,
        seed=0,
    )
    return _apply_overrides(cfg, overrides).validate()


PAPER_LONG_HEADS = frozenset(
    {0, 1, 2, 4, 9, 12, 14, 15, 16, 18, 19, 22, 23, 26, 29, 30}
)
PAPER_LONG_LAYERS = frozenset({6, 8, 11, 18})


def paper_config(**overrides) -> ModelConfig:
    """Full-scale configuration (7B-class backbone shape); used for the cost
    model and documentation, never trained here."""
    partition = HeadPartition(
        n_heads=32,
        n_layers=32,
        long_heads=PAPER_LONG_HEADS,
        local_heads=frozenset(range(32)) - PAPER_LONG_HEADS,
        long_layers=PAPER_LONG_LAYERS,
    )
    cfg = ModelConfig(
        n_layers=32,
        n_heads=32,
        d_model=4096,
        d_ff=11008,
        vocab=32000,
        segment_len=4096,
        carry_len=512,
        prefix_len=512,
        partition=partition,
        top_k=16,
        w_off=4,
        w_q=8,
        t_q=8,
        l_q=64,
        tbptt_depth=1,
        seed=0,
    )
    return _apply_overrides(cfg, overrides).validate()


PRESETS = {"desk": desk_config, "paper": paper_config}


def _apply_overrides(cfg: ModelConfig, overrides: dict) -> ModelConfig:
    if not overrides:
        return cfg
    part_fields = {"local_heads", "long_heads", "long_layers"}
    part_over = {k: frozenset(v) for k, v in overrides.items() if k in part_fields}
    plain = {k: v for k, v in overrides.items() if k not in part_fields}
    if part_over or "n_heads" in plain or "n_layers" in plain:
        partition = HeadPartition(
            n_heads=plain.get("n_heads", cfg.n_heads),
            n_layers=plain.get("n_layers", cfg.n_layers),
            local_heads=part_over.get("local_heads", cfg.partition.local_heads),
            long_heads=part_over.get("long_heads", cfg.partition.long_heads),
            long_layers=part_over.get("long_layers", cfg.partition.long_layers),
        )
        plain["partition"] = partition
    return replace(cfg, **plain)


def with_overrides(cfg: ModelConfig, overrides: dict) -> ModelConfig:
    return _apply_overrides(cfg, overrides).validate()


def load_config(path, preset: str = "desk", **overrides) -> ModelConfig:
    """Config file plus overrides; the file itself overrides the preset."""
    with open(path, "r", encoding="utf-8") as f:
        text = f.read()
    cfg = ModelConfig.from_text(text)
    return _apply_overrides(cfg, overrides).validate()
