"""The shared per-segment forward operator, run identically in training and
inference.

A pre-norm decoder stack where each head's attention context is selected by
its group (carried tail / retrieved prefix / within-segment only). The mode
flag controls only whether a tape records the pass; the arithmetic is the
same code path either way, so training and inference logits agree bit for
bit.

Per-segment counters are exact integers: attention-visible KV rows per
(layer, head) and multiply-accumulate counts for the two attention matmuls.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass

import numpy as np

from .attention import (
    HeadPartition,
    PrefixKV,
    assign_positions,
    attend,
    build_context,
    causal_prefix_mask,
)
from .carry import CarriedState, detach_carry, extract_carry, init_empty
from .config import ModelConfig
from .pool import KVPool, RetrievedPrefix, build_query_summary, pool_append, retrieve
from .tensor import (
    Tape,
    Tensor,
    add,
    cross_entropy_from_logits,
    gather_rows,
    gelu,
    matmul,
    rms_norm,
    rope,
    slice_axis,
)


class ModelParams:
    """Named parameter arrays; names are stable across init, bind, checkpoint."""

    def __init__(self, arrays: dict[str, np.ndarray]):
        self.arrays = arrays

    @classmethod
    def init(cls, cfg: ModelConfig, seed: int | None = None) -> "ModelParams":
        rng = np.random.default_rng(cfg.seed if seed is None else seed)
        std = 0.02
        d, dh, dff = cfg.d_model, cfg.d_head, cfg.d_ff
        arrays: dict[str, np.ndarray] = {}
        arrays["embed"] = rng.normal(0.0, std, size=(cfg.vocab, d))
        for i in range(cfg.n_layers):
            arrays[f"l{i}.att_norm"] = np.ones(d)
            for h in range(cfg.n_heads):
                arrays[f"l{i}.h{h}.wq"] = rng.normal(0.0, std, size=(d, dh))
                arrays[f"l{i}.h{h}.wk"] = rng.normal(0.0, std, size=(d, dh))
                arrays[f"l{i}.h{h}.wv"] = rng.normal(0.0, std, size=(d, dh))
                arrays[f"l{i}.h{h}.wo"] = rng.normal(0.0, std, size=(dh, d))
            arrays[f"l{i}.ffn_norm"] = np.ones(d)
            arrays[f"l{i}.ffn_in"] = rng.normal(0.0, std, size=(d, dff))
            arrays[f"l{i}.ffn_out"] = rng.normal(0.0, std, size=(dff, d))
        arrays["final_norm"] = np.ones(d)
        arrays["unembed"] = rng.normal(0.0, std, size=(d, cfg.vocab))
        return cls(arrays)

    def copy(self) -> "ModelParams":
        return ModelParams({k: v.copy() for k, v in self.arrays.items()})

    def bind(self, tape: Tape | None) -> "BoundParams":
        """Leaf every array on the tape (training) or wrap as constants."""
        if tape is None:
            tensors = {k: Tensor(v) for k, v in self.arrays.items()}
        else:
            tensors = {k: tape.leaf(v, name=k) for k, v in self.arrays.items()}
        return BoundParams(tensors, tape)

    def flat_norm(self) -> float:
        return float(np.sqrt(sum(float((a * a).sum()) for a in self.arrays.values())))


@dataclass
class BoundParams:
    tensors: dict[str, Tensor]
    tape: Tape | None

    def __getitem__(self, name: str) -> Tensor:
        return self.tensors[name]


@dataclass
class SegmentRun:
    """One segment's forward record."""

    logits: Tensor
    loss: Tensor
    carry_out: CarriedState
    counters: dict
    node_range: tuple[int, int]
    long_kv: dict  # (layer, head) -> (K Tensor detached, V Tensor detached)
    positions: list[int]  # global token positions of this segment
    q_tails: dict  # (layer, head) -> np.ndarray, un-rotated long-head queries
    prefix_in: RetrievedPrefix | None
    tape: Tape | None
    next_logits: np.ndarray  # final slot's logit row: next-token prediction


def forward_segment(
    params,
    cfg: ModelConfig,
    x_seg,
    carry_in: CarriedState,
    prefix_in: RetrievedPrefix | None = None,
    mode: str = "inference",
    seg_start: int = 0,
    segment_index: int = 1,
) -> SegmentRun:
    """Run one segment: logits, mean next-token loss over the segment's own
    tokens, the next carry, and exact instrumentation counters.

    ``params`` may be a ``ModelParams`` (bound automatically; training mode
    gets a fresh tape) or an already-bound ``BoundParams`` whose tape is
    shared across a multi-segment chain.

    The segment runs as m+1 input slots [BOS, x_1..x_m]. Logit rows 0..m-1
    predict x_1..x_m, so the loss has exactly m terms and the first token is
    conditioned on the carry and retrieval prefix alone; the previous
    segment's content reaches it only through those channels. The final slot
    carries x_m so the next carry encodes the segment's full tail; its logit
    row is the next-segment/next-token prediction and bears no loss.

    Counters cover the m prediction rows: visible KV per (layer, head) is
    prefix + m, and MACs count QK^T plus attn*V for those rows. The one
    state-bookkeeping slot per segment is excluded by that definition.
    """
    if mode not in ("training", "inference"):
        raise ValueError(f"mode must be 'training' or 'inference', got {mode!r}")
    x_seg = np.asarray(x_seg, dtype=np.int64)
    m = x_seg.size
    if m < 1:
        raise ValueError("segment must contain at least one token")
    if x_seg.min() < 0 or x_seg.max() >= cfg.vocab:
        raise ValueError(
            f"token id out of range [0, {cfg.vocab}): {int(x_seg.min())}..{int(x_seg.max())}"
        )
    if isinstance(params, ModelParams):
        bound = params.bind(Tape() if mode == "training" else None)
    else:
        bound = params
        if mode == "inference" and bound.tape is not None:
            raise ValueError("inference mode must not record a tape")
    tape = bound.tape
    part = cfg.partition
    node_lo = len(tape) if tape is not None else 0

    input_ids = np.concatenate([[cfg.bos_id], x_seg])  # m+1 slots
    n_slots = m + 1
    h = gather_rows(bound["embed"], input_ids)

    kv_len = {}
    macs = 0
    local_kv = {}
    long_kv = {}
    q_tails = {}
    l_q = min(cfg.l_q, n_slots)

    for layer in range(cfg.n_layers):
        xn = rms_norm(h, bound[f"l{layer}.att_norm"])
        att_out = None
        for head in range(cfg.n_heads):
            q = matmul(xn, bound[f"l{layer}.h{head}.wq"])
            k = matmul(xn, bound[f"l{layer}.h{head}.wk"])
            v = matmul(xn, bound[f"l{layer}.h{head}.wv"])
            local = part.is_local(head)
            if local:
                local_kv[(layer, head)] = (k, v)
            carried = None
            retrieved = None
            if local and len(carry_in) > 0:
                ck, cv = carry_in.entries[(layer, head)]
                carried = PrefixKV(ck, cv, "carried")
            elif part.uses_retrieval(layer, head):
                # token rows only (slot 0 is BOS bookkeeping), detached
                long_kv[(layer, head)] = (
                    Tensor(k.data[1:].copy()),
                    Tensor(v.data[1:].copy()),
                )
                q_tails[(layer, head)] = q.data[n_slots - l_q :].copy()
                got = prefix_in.get(layer, head) if prefix_in is not None else None
                if got is not None and got[0].shape[0] > 0:
                    rk, rv, rpos = got
                    retrieved = PrefixKV(
                        Tensor(rk), Tensor(rv), "retrieved", tuple(int(p) for p in rpos)
                    )
            k_ctx_raw, v_ctx, p_used = build_context(
                layer, head, PrefixKV(k, v, "within"), carried, retrieved, part
            )
            prefix_pos, seg_pos = assign_positions(p_used, n_slots)
            q_rot = rope(q, seg_pos, cfg.rope_base)
            k_ctx = rope(k_ctx_raw, prefix_pos + seg_pos, cfg.rope_base)
            mask = causal_prefix_mask(p_used, n_slots)
            ctx = attend(q_rot, k_ctx, v_ctx, mask)
            head_out = matmul(ctx, bound[f"l{layer}.h{head}.wo"])
            att_out = head_out if att_out is None else add(att_out, head_out)
            kv_len[(layer, head)] = p_used + m
            macs += 2 * m * (p_used + m) * cfg.d_head
        h = add(h, att_out)
        xf = rms_norm(h, bound[f"l{layer}.ffn_norm"])
        ff = matmul(gelu(matmul(xf, bound[f"l{layer}.ffn_in"])), bound[f"l{layer}.ffn_out"])
        h = add(h, ff)

    hf = rms_norm(h, bound["final_norm"])
    all_logits = matmul(hf, bound["unembed"])
    logits = slice_axis(all_logits, 0, 0, m)
    loss = cross_entropy_from_logits(logits, x_seg)
    carry_out = extract_carry(local_kv, cfg.carry_len, part, segment_index)
    node_hi = len(tape) if tape is not None else 0

    counters = {
        "kv_len": kv_len,
        "attn_macs": macs,
        "segment_len": m,
    }
    return SegmentRun(
        logits=logits,
        loss=loss,
        carry_out=carry_out,
        counters=counters,
        node_range=(node_lo, node_hi),
        long_kv=long_kv,
        positions=list(range(seg_start, seg_start + m)),
        q_tails=q_tails,
        prefix_in=prefix_in,
        tape=tape,
        next_logits=all_logits.data[m].copy(),
    )


def split_segments(tokens, seg_len: int) -> list[np.ndarray]:
    tokens = np.asarray(tokens, dtype=np.int64)
    if tokens.size < 1:
        raise ValueError("need at least one token")
    return [tokens[i : i + seg_len] for i in range(0, tokens.size, seg_len)]


@dataclass
class InferenceResult:
    losses: list[float]
    counters: dict
    per_segment_kv: list[dict]
    per_segment_macs: list[int]
    prefixes: list[RetrievedPrefix]
    pool: KVPool
    last_logits: np.ndarray  # final bookkeeping slot's row: next-token prediction
    probe_logits: np.ndarray  # prediction row FOR the final token's position
    pool_rows_read: int


class SegmentLoop:
    """Shared retrieve -> forward -> append sequencing for a token stream.

    In the default window ("prev") a segment's KV becomes retrievable by the
    next segment; in "strict" it only becomes retrievable one segment later.
    Either way retrieval for segment i runs before segment i's forward and
    every retrieved row predates the consuming segment.
    """

    def __init__(self, cfg: ModelConfig, pool: KVPool | None = None):
        self.cfg = cfg
        self.pool = pool if pool is not None else KVPool(
            cfg.partition.long_layers, cfg.partition.long_heads, cfg.d_head
        )
        self.prev_q: dict | None = None
        self.pending: tuple | None = None
        self.pool_rows_read = 0

    def prefix_for_next(self) -> RetrievedPrefix:
        cfg = self.cfg
        if self.prev_q is None or self.pool.total_rows() == 0:
            return RetrievedPrefix.empty()
        summaries = {
            lh: build_query_summary(q, cfg.w_q, cfg.t_q) for lh, q in self.prev_q.items()
        }
        self.pool_rows_read += sum(
            self.pool.size(l, h) for (l, h) in summaries if (l, h) in self.pool.entries
        )
        return retrieve(self.pool, summaries, cfg.top_k, cfg.w_off, cfg.prefix_len)

    def absorb(self, run: SegmentRun, segment_index: int, value_bump=None):
        kv = run.long_kv
        if value_bump is not None:
            kv = _apply_value_bump(kv, run.positions, value_bump)
        if self.cfg.retrieval_window == "strict":
            if self.pending is not None:
                pool_append(self.pool, self.pending[0], self.pending[1], self.pending[2])
            self.pending = (kv, run.positions, segment_index)
        else:
            pool_append(self.pool, kv, run.positions, segment_index)
        self.prev_q = run.q_tails

    def flush(self):
        if self.pending is not None:
            pool_append(self.pool, self.pending[0], self.pending[1], self.pending[2])
            self.pending = None


def _apply_value_bump(long_kv: dict, positions: list[int], bump) -> dict:
    layer, head, global_pos, delta = bump
    if (layer, head) not in long_kv or global_pos not in positions:
        return long_kv
    row = positions.index(global_pos)
    out = dict(long_kv)
    k, v = out[(layer, head)]
    v2 = v.data.copy()
    v2[row] += delta
    out[(layer, head)] = (k, Tensor(v2))
    return out


def run_inference(params: ModelParams, cfg: ModelConfig, tokens, value_bump=None) -> InferenceResult:
    """Segment the token stream and run the forward operator segment by
    segment with no tape: retrieve, forward, append to the pool."""
    segments = split_segments(tokens, cfg.segment_len)
    loop = SegmentLoop(cfg)
    carry = init_empty(cfg.partition, cfg.d_head, cfg.carry_len)
    losses, per_kv, per_macs, prefixes = [], [], [], []
    last_logits = None
    probe_logits = None
    pos = 0
    for i, seg in enumerate(segments, start=1):
        prefix = loop.prefix_for_next()
        run = forward_segment(
            params,
            cfg,
            seg,
            carry,
            prefix,
            mode="inference",
            seg_start=pos,
            segment_index=i,
        )
        loop.absorb(run, i, value_bump=value_bump)
        losses.append(run.loss.item())
        per_kv.append(run.counters["kv_len"])
        per_macs.append(run.counters["attn_macs"])
        prefixes.append(prefix)
        carry = detach_carry(run.carry_out)
        last_logits = run.next_logits
        probe_logits = run.logits.data[-1].copy()
        pos += seg.size
    loop.flush()
    counters = {
        "total_attn_macs": int(np.sum(per_macs)),
        "pool_rows": loop.pool.total_rows(),
        "pool_rows_read": loop.pool_rows_read,
        "n_segments": len(segments),
        "segment_lens": [int(s.size) for s in segments],
    }
    return InferenceResult(
        losses=losses,
        counters=counters,
        per_segment_kv=per_kv,
        per_segment_macs=per_macs,
        prefixes=prefixes,
        pool=loop.pool,
        last_logits=last_logits,
        probe_logits=probe_logits,
        pool_rows_read=loop.pool_rows_read,
    )


def generate(params: ModelParams, cfg: ModelConfig, prompt, n_new: int) -> list[int]:
    """Greedy continuation via the segment loop; ties break to the lower id.

    Each step re-runs the loop over the grown sequence plus one probe token.
    The probe's logit row conditions only on the real tokens (it is causally
    upstream of the probe's own input slot), and a probe landing on a segment
    boundary starts a fresh segment with its own retrieval, exactly as a real
    continuation would. No incremental-decode caching.
    """
    if n_new < 1:
        raise ValueError("n_new must be >= 1")
    tokens = list(int(t) for t in np.asarray(prompt, dtype=np.int64))
    out = []
    for _ in range(n_new):
        probe = np.asarray(tokens + [cfg.bos_id], dtype=np.int64)
        res = run_inference(params, cfg, probe)
        nxt = int(np.argmax(res.probe_logits))
        out.append(nxt)
        tokens.append(nxt)
    return out


# ---------------------------------------------------------------------------
# checkpoint format: config header + named little-endian f64 tensors
# ---------------------------------------------------------------------------

_CKPT_MAGIC = b"STCKPT1\x00"


def save_checkpoint(path, params: ModelParams, cfg: ModelConfig):
    header = cfg.canonical_text().encode("utf-8")
    with open(path, "wb") as f:
        f.write(_CKPT_MAGIC)
        f.write(struct.pack("<I", len(header)))
        f.write(header)
        f.write(struct.pack("<I", len(params.arrays)))
        for name, arr in params.arrays.items():
            nb = name.encode("utf-8")
            f.write(struct.pack("<H", len(nb)))
            f.write(nb)
            f.write(struct.pack("<B", arr.ndim))
            for dim in arr.shape:
                f.write(struct.pack("<Q", dim))
            f.write(arr.astype("<f8").tobytes())


def load_checkpoint(path) -> tuple[ModelParams, ModelConfig]:
    with open(path, "rb") as f:
        if f.read(8) != _CKPT_MAGIC:
            raise ValueError("not a checkpoint file")
        (hlen,) = struct.unpack("<I", f.read(4))
        cfg = ModelConfig.from_text(f.read(hlen).decode("utf-8"))
        (n,) = struct.unpack("<I", f.read(4))
        arrays = {}
        for _ in range(n):
            (nlen,) = struct.unpack("<H", f.read(2))
            name = f.read(nlen).decode("utf-8")
            (ndim,) = struct.unpack("<B", f.read(1))
            shape = tuple(struct.unpack("<Q", f.read(8))[0] for _ in range(ndim))
            count = int(np.prod(shape)) if shape else 1
            arrays[name] = np.frombuffer(f.read(count * 8), dtype="<f8").reshape(shape).copy()
    return ModelParams(arrays), cfg
