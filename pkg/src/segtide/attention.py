"""Head- and layer-partitioned attention contexts.

Each head sees the within-segment KV plus at most one prefix: local heads
get the carried KV tail from the previous segment, long-range heads get the
retrieved prefix in enabled layers and nothing elsewhere. Prefixes are
stored un-rotated; rotary positions are re-indexed at consumption time so
the prefix occupies positions 0..P-1 and the segment P..P+m-1.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from fractions import Fraction

import numpy as np

from .tensor import MASK_SENTINEL, Tensor, concat, matmul, rope, scale, softmax_last

ROPE_BASE = 10000.0


@dataclass(frozen=True)
class HeadPartition:
    """Disjoint local / long-range head groups plus the enabled layer set."""

    n_heads: int
    n_layers: int
    local_heads: frozenset[int]
    long_heads: frozenset[int]
    long_layers: frozenset[int]

    def __post_init__(self):
        object.__setattr__(self, "local_heads", frozenset(self.local_heads))
        object.__setattr__(self, "long_heads", frozenset(self.long_heads))
        object.__setattr__(self, "long_layers", frozenset(self.long_layers))
        all_heads = set(range(self.n_heads))
        if self.local_heads & self.long_heads:
            raise ValueError(
                f"head groups overlap: {sorted(self.local_heads & self.long_heads)}"
            )
        if (self.local_heads | self.long_heads) != all_heads:
            raise ValueError(
                f"head groups must cover all {self.n_heads} heads, got "
                f"{sorted(self.local_heads | self.long_heads)}"
            )
        bad = [l for l in self.long_layers if l < 0 or l >= self.n_layers]
        if bad:
            raise ValueError(f"long-range layer index out of range [0, {self.n_layers}): {bad}")

    @property
    def alpha(self) -> Fraction:
        return Fraction(len(self.local_heads), self.n_heads)

    @property
    def beta(self) -> Fraction:
        return Fraction(len(self.long_layers), self.n_layers)

    def is_local(self, head: int) -> bool:
        if head in self.local_heads:
            return True
        if head in self.long_heads:
            return False
        raise ValueError(f"head {head} is in neither head group")

    def uses_retrieval(self, layer: int, head: int) -> bool:
        return (not self.is_local(head)) and layer in self.long_layers


@dataclass
class PrefixKV:
    """Un-rotated keys and values for one head's prefix or segment block."""

    keys: Tensor
    values: Tensor
    kind: str  # "carried" | "retrieved" | "within"
    positions: tuple[int, ...] = field(default=())  # source positions, informational

    def __post_init__(self):
        if self.keys.shape[0] != self.values.shape[0]:
            raise ValueError(
                f"prefix keys/values length mismatch: {self.keys.shape[0]} vs "
                f"{self.values.shape[0]}"
            )
        if self.kind not in ("carried", "retrieved", "within"):
            raise ValueError(f"unknown prefix kind: {self.kind}")

    def __len__(self):
        return self.keys.shape[0]


def assign_positions(prefix_len: int, seg_len: int) -> tuple[list[int], list[int]]:
    """Prefix occupies 0..P-1, the segment is shifted up by P."""
    if prefix_len < 0:
        raise ValueError("prefix length must be >= 0")
    if seg_len < 1:
        raise ValueError("segment length must be >= 1")
    return list(range(prefix_len)), list(range(prefix_len, prefix_len + seg_len))


def rope_rotate(x: Tensor, positions, base: float = ROPE_BASE) -> Tensor:
    return rope(x, positions, base)


def causal_prefix_mask(prefix_len: int, seg_len: int) -> np.ndarray:
    """Additive mask [m x (P+m)]: row t sees all of the prefix and columns
    j with j - P <= t inside the segment."""
    m = np.full((seg_len, prefix_len + seg_len), MASK_SENTINEL)
    m[:, :prefix_len] = 0.0
    seg = np.triu(np.full((seg_len, seg_len), MASK_SENTINEL), k=1)
    m[:, prefix_len:] = seg
    return m


def build_context(
    layer: int,
    head: int,
    within: PrefixKV,
    carried: PrefixKV | None,
    retrieved: PrefixKV | None,
    partition: HeadPartition,
) -> tuple[Tensor, Tensor, int]:
    """Select the head's context per its group: carried tail for local heads,
    retrieved prefix for long heads in enabled layers, within-segment only
    otherwise. Returns un-rotated (K_ctx, V_ctx) and the prefix length used."""
    local = partition.is_local(head)
    if carried is not None and not local:
        raise ValueError(f"carried prefix passed to long-range head {head}")
    if retrieved is not None and not partition.uses_retrieval(layer, head):
        raise ValueError(f"retrieved prefix passed to (layer {layer}, head {head})")

    if local:
        prefix = carried if carried is not None and len(carried) > 0 else None
    elif layer in partition.long_layers:
        prefix = retrieved if retrieved is not None and len(retrieved) > 0 else None
    else:
        prefix = None

    if prefix is None:
        return within.keys, within.values, 0
    k_ctx = concat([prefix.keys, within.keys], axis=0)
    v_ctx = concat([prefix.values, within.values], axis=0)
    return k_ctx, v_ctx, len(prefix)


def attend(q: Tensor, k_ctx: Tensor, v_ctx: Tensor, mask) -> Tensor:
    """Scaled dot-product attention over an already-rotated context.

    ``q`` must be rotated at segment positions and ``k_ctx`` at prefix-then-
    segment positions (see ``assign_positions``).
    """
    d = q.shape[1]
    if k_ctx.shape[1] != d:
        raise ValueError(f"attend: query dim {d} != key dim {k_ctx.shape[1]}")
    scores = scale(matmul(q, k_ctx, tb=True), 1.0 / math.sqrt(d))
    weights = softmax_last(scores, mask)
    return matmul(weights, v_ctx)
