"""Past-only KV pool and forward-only top-k retrieval.

The pool stores detached key/value rows (plus global token positions) for
long-range heads in enabled layers, append-only with no eviction. Retrieval
scores query summaries against pool keys, expands the best-scoring anchors
by a small offset window, and pads deterministically to a fixed prefix
length R. Everything returned is detached: the retrieved prefix conditions
the forward pass but never carries gradient.

Scoring uses un-rotated keys and un-rotated query summaries; rotary
re-indexing happens only when the prefix is consumed by attention.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass, field

import numpy as np

from .tensor import Tensor


@dataclass
class PoolEntry:
    keys: list[np.ndarray] = field(default_factory=list)
    values: list[np.ndarray] = field(default_factory=list)
    positions: list[int] = field(default_factory=list)


class KVPool:
    """Append-only store of detached KV rows per (long layer, long head)."""

    def __init__(self, long_layers, long_heads, head_dim: int):
        self.long_layers = tuple(sorted(long_layers))
        self.long_heads = tuple(sorted(long_heads))
        self.head_dim = head_dim
        self.entries: dict[tuple[int, int], PoolEntry] = {
            (l, h): PoolEntry() for l in self.long_layers for h in self.long_heads
        }
        self.high_water = 0  # last segment index whose KV is present

    def size(self, layer: int, head: int) -> int:
        return len(self.entries[(layer, head)].positions)

    def total_rows(self) -> int:
        return sum(len(e.positions) for e in self.entries.values())

    def rows(self, layer: int, head: int):
        e = self.entries[(layer, head)]
        if not e.positions:
            d = self.head_dim
            return np.zeros((0, d)), np.zeros((0, d)), np.zeros(0, dtype=np.int64)
        return (
            np.vstack(e.keys),
            np.vstack(e.values),
            np.asarray(e.positions, dtype=np.int64),
        )


def pool_append(pool: KVPool, segment_kv: dict, positions, segment_index: int) -> KVPool:
    """Append one segment's long-head KV rows, detached, in position order.

    ``segment_kv`` maps (layer, head) -> (keys, values) as Tensors or arrays;
    ``positions`` are the segment's global token positions.
    """
    if segment_index <= pool.high_water:
        raise ValueError(
            f"pool append out of order: segment {segment_index} <= "
            f"high-water mark {pool.high_water}"
        )
    positions = [int(p) for p in positions]
    for (layer, head), (k, v) in segment_kv.items():
        if (layer, head) not in pool.entries:
            continue
        karr = k.data if isinstance(k, Tensor) else np.asarray(k, dtype=np.float64)
        varr = v.data if isinstance(v, Tensor) else np.asarray(v, dtype=np.float64)
        if karr.shape[0] != len(positions):
            raise ValueError("pool append: row count does not match positions")
        entry = pool.entries[(layer, head)]
        for i in range(karr.shape[0]):
            entry.keys.append(karr[i].copy())
            entry.values.append(varr[i].copy())
            entry.positions.append(positions[i])
    pool.high_water = segment_index
    return pool


def build_query_summary(q_tail: np.ndarray, window: int, tail: int) -> np.ndarray:
    """Compact query set: mean-pooled windows of width/stride ``window`` over
    the tail rows, plus one mean over the final ``tail`` rows."""
    q = np.asarray(q_tail, dtype=np.float64)
    n = q.shape[0]
    if n < 1:
        raise ValueError("query tail must contain at least one row")
    out = []
    for lo in range(0, n - window + 1, window):
        out.append(q[lo : lo + window].mean(axis=0))
    out.append(q[max(0, n - tail) :].mean(axis=0))
    return np.vstack(out)


@dataclass
class RetrievedPrefix:
    """Fixed-length detached prefix per (long layer, long head)."""

    entries: dict[tuple[int, int], tuple[np.ndarray, np.ndarray, np.ndarray]]

    @classmethod
    def empty(cls) -> "RetrievedPrefix":
        return cls({})

    def get(self, layer: int, head: int):
        return self.entries.get((layer, head))

    def length(self, layer: int, head: int) -> int:
        e = self.entries.get((layer, head))
        return 0 if e is None else e[0].shape[0]

    def max_source_position(self) -> int:
        mx = -1
        for _, _, pos in self.entries.values():
            if pos.size:
                mx = max(mx, int(pos.max()))
        return mx


def _select_positions(scores: np.ndarray, positions: np.ndarray, k: int, w_off: int, r: int):
    """Deterministic anchor selection: best-scoring pool indices (ties to the
    lower position), each expanded by +-w_off, trimmed anchor-first to r, then
    padded with the earliest unchosen positions."""
    n_pool = positions.shape[0]
    best = scores.max(axis=0)  # best score per pool index over all summaries
    order = np.lexsort((np.arange(n_pool), -best))  # score desc, position asc
    anchors = [int(i) for i in order[: min(k, n_pool)]]

    chosen: list[int] = []
    seen = set()
    for a in anchors:
        for idx in range(max(0, a - w_off), min(n_pool, a + w_off + 1)):
            if idx not in seen:
                seen.add(idx)
                chosen.append(idx)
    if len(chosen) > r:
        chosen = chosen[:r]
        seen = set(chosen)
    if len(chosen) < r:
        for idx in range(n_pool):
            if idx not in seen:
                seen.add(idx)
                chosen.append(idx)
            if len(chosen) == r:
                break
    return sorted(chosen), anchors


def retrieve(
    pool: KVPool,
    summaries: dict[tuple[int, int], np.ndarray],
    k: int,
    w_off: int,
    r: int,
) -> RetrievedPrefix:
    """Top-k retrieval per head, independently, with window expansion and
    deterministic padding to exactly min(r, pool size) rows."""
    if r < 1:
        raise ValueError("prefix length r must be >= 1")
    entries = {}
    for (layer, head), summ in summaries.items():
        keys, values, positions = pool.rows(layer, head)
        if keys.shape[0] == 0:
            continue
        scores = np.asarray(summ, dtype=np.float64) @ keys.T
        idx, _ = _select_positions(scores, positions, k, w_off, r)
        entries[(layer, head)] = (
            keys[idx].copy(),
            values[idx].copy(),
            positions[idx].copy(),
        )
    return RetrievedPrefix(entries)


# ---------------------------------------------------------------------------
# snapshot format: little-endian f64 rows per (layer, head) block
# ---------------------------------------------------------------------------

_MAGIC = b"STPOOL1\x00"


def save_pool(path, pool: KVPool):
    """Flat binary snapshot: per (layer, head), a row count and dimension
    header followed by key rows, value rows and positions."""
    with open(path, "wb") as f:
        f.write(_MAGIC)
        f.write(struct.pack("<IIQ", len(pool.long_layers), len(pool.long_heads), pool.high_water))
        f.write(struct.pack("<I", pool.head_dim))
        for l in pool.long_layers:
            f.write(struct.pack("<I", l))
        for h in pool.long_heads:
            f.write(struct.pack("<I", h))
        for l in pool.long_layers:
            for h in pool.long_heads:
                keys, values, positions = pool.rows(l, h)
                f.write(struct.pack("<IIQI", l, h, keys.shape[0], pool.head_dim))
                f.write(keys.astype("<f8").tobytes())
                f.write(values.astype("<f8").tobytes())
                f.write(positions.astype("<i8").tobytes())


def load_pool(path) -> KVPool:
    with open(path, "rb") as f:
        if f.read(8) != _MAGIC:
            raise ValueError("not a pool snapshot")
        n_layers, n_heads, high_water = struct.unpack("<IIQ", f.read(16))
        (d,) = struct.unpack("<I", f.read(4))
        layers = [struct.unpack("<I", f.read(4))[0] for _ in range(n_layers)]
        heads = [struct.unpack("<I", f.read(4))[0] for _ in range(n_heads)]
        pool = KVPool(layers, heads, d)
        pool.high_water = high_water
        for _ in range(n_layers * n_heads):
            l, h, rows, dd = struct.unpack("<IIQI", f.read(20))
            keys = np.frombuffer(f.read(rows * dd * 8), dtype="<f8").reshape(rows, dd)
            values = np.frombuffer(f.read(rows * dd * 8), dtype="<f8").reshape(rows, dd)
            positions = np.frombuffer(f.read(rows * 8), dtype="<i8")
            entry = pool.entries[(l, h)]
            entry.keys = [keys[i].copy() for i in range(rows)]
            entry.values = [values[i].copy() for i in range(rows)]
            entry.positions = [int(p) for p in positions]
    return pool


def grad_through_retrieval_is_zero(params, cfg, tokens) -> bool:
    """Verification: the retrieval path is live in forward (finite-difference
    sensitivity of the loss to a pooled value row is nonzero) while the
    training tape holds no gradient edge into pool contents.

    Vacuously true when retrieval is disabled or never produced a prefix.
    """
    # local imports; this check drives the full engine
    from .model import run_inference
    from .training import build_training_chain

    tokens = np.asarray(tokens, dtype=np.int64)
    if not cfg.partition.long_layers or tokens.size <= cfg.segment_len:
        return True

    ref = run_inference(params, cfg, tokens)
    target = None
    for prefix in ref.prefixes:
        for (layer, head), (_k, _v, pos) in sorted(prefix.entries.items()):
            if pos.size:
                target = (layer, head, int(pos[0]))
                break
        if target is not None:
            break
    if target is None:
        return True

    # tape audit: pool rows must never appear on the tape, as leaves or as
    # any node's value (gradient edges point at nodes, so absence from the
    # tape means no edge into pool contents can exist)
    chain = build_training_chain(params, cfg, tokens, cfg.tbptt_depth)
    pool_buffers = {
        arr.__array_interface__["data"][0]
        for entry in chain.pool.entries.values()
        for arr in entry.keys + entry.values
    }
    for node in chain.tape.nodes:
        if node.value.__array_interface__["data"][0] in pool_buffers:
            return False

    # forward sensitivity: bump the first retrieved value row and measure
    layer, head, global_pos = target
    h = 1e-4
    up = _total_loss(params, cfg, tokens, (layer, head, global_pos, +h))
    down = _total_loss(params, cfg, tokens, (layer, head, global_pos, -h))
    sensitivity = abs(up - down) / (2.0 * h)
    return sensitivity > 0.0


def _total_loss(params, cfg, tokens, bump) -> float:
    """Segmented forward loss with an additive bump applied to one pooled
    value row (identified by its global position) as it enters the pool."""
    from .model import run_inference

    res = run_inference(params, cfg, tokens, value_bump=bump)
    return float(sum(res.losses))
