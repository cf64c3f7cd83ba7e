"""Carried KV tail: the sole differentiable cross-segment state.

After each segment, the last M un-rotated key/value rows of every local
head are kept as the carry for the next segment. Detaching a carry makes
the values bit-identical constants, which is exactly the stop-gradient
boundary the truncated objective places between segments.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .attention import HeadPartition
from .tensor import Tape, Tensor, slice_axis


@dataclass
class CarriedState:
    """Per (layer, local head) key/value tails of length min(M, segment len)."""

    entries: dict[tuple[int, int], tuple[Tensor, Tensor]]
    tail_len: int
    segment_index: int
    differentiable: bool

    def __len__(self):
        if not self.entries:
            return 0
        return next(iter(self.entries.values()))[0].shape[0]

    def tensors(self):
        for (layer, head), (k, v) in sorted(self.entries.items()):
            yield (layer, head), k, v

    def node_ids(self) -> set[int]:
        ids = set()
        for _, k, v in self.tensors():
            if k.node is not None:
                ids.add(k.node)
            if v.node is not None:
                ids.add(v.node)
        return ids


def init_empty(partition: HeadPartition, head_dim: int, tail_len: int) -> CarriedState:
    """Zero-length tails for every (layer, local head); segment index 0."""
    entries = {}
    for layer in range(partition.n_layers):
        for head in sorted(partition.local_heads):
            entries[(layer, head)] = (
                Tensor(np.zeros((0, head_dim))),
                Tensor(np.zeros((0, head_dim))),
            )
    return CarriedState(entries, tail_len, 0, True)


def extract_carry(
    segment_kv: dict[tuple[int, int], tuple[Tensor, Tensor]],
    tail_len: int,
    partition: HeadPartition,
    segment_index: int,
) -> CarriedState:
    """Trailing min(M, m) key/value rows of every local head, still attached
    to whatever tape produced them."""
    entries = {}
    differentiable = False
    for layer in range(partition.n_layers):
        for head in sorted(partition.local_heads):
            k, v = segment_kv[(layer, head)]
            m = k.shape[0]
            lo = max(0, m - tail_len)
            kt = slice_axis(k, 0, lo, m)
            vt = slice_axis(v, 0, lo, m)
            if kt.node is not None:
                differentiable = True
            entries[(layer, head)] = (kt, vt)
    return CarriedState(entries, tail_len, segment_index, differentiable)


def detach_carry(carry: CarriedState) -> CarriedState:
    """Bit-identical values with every gradient path severed."""
    entries = {
        key: (k.detach(), v.detach()) for key, (k, v) in carry.entries.items()
    }
    return CarriedState(entries, carry.tail_len, carry.segment_index, False)


def cross_segment_edge_violations(
    tape: Tape,
    node_range: tuple[int, int],
    allowed_ids: set[int],
) -> list[tuple[int, int]]:
    """Edges from nodes inside ``node_range`` to earlier nodes that are not
    parameters and not in ``allowed_ids`` (the incoming carry).

    An empty result certifies that the carry is the only gradient-carrying
    state entering this segment's subgraph.
    """
    lo, hi = node_range
    ok = set(allowed_ids) | set(tape.param_ids)
    bad = []
    for nid in range(lo, hi):
        for iid in tape.nodes[nid].input_ids:
            if iid is not None and iid < lo and iid not in ok:
                bad.append((nid, iid))
    return bad
