"""K-truncated training objective, TBPTT, and two independent gradient
oracles.

The objective gives every segment loss a private truncated state chain: the
carry K+1 segments back is treated as a constant and the transitions in
between stay differentiable. Its value does not depend on K (the boundary
detach is a forward identity); only gradients do.

Three routes to the same gradient live here:

* ``loss_lk_literal``  - rebuilds each loss term's truncated chain exactly
  as defined, one tape, then a single backward.
* ``tbptt_gradient``   - the schedule anyone would ship: one attached
  forward chain, then per-loss backward sweeps that stop at that loss's
  boundary carry.
* ``adjoint_oracle_gradient`` - explicit adjoint recursion over densely
  materialized state-transition Jacobians, independent of any truncation
  logic in the tape.

The first two are implementations; the third plus finite differences on a
frozen-boundary value function are the checks.
"""

from __future__ import annotations

import time
from dataclasses import dataclass, field

import numpy as np

from .carry import CarriedState, cross_segment_edge_violations, detach_carry, init_empty
from .config import ModelConfig
from .model import (
    BoundParams,
    ModelParams,
    SegmentLoop,
    SegmentRun,
    forward_segment,
    run_inference,
    split_segments,
)
from .pool import RetrievedPrefix
from .tensor import GradientMap, Tape, Tensor, add, backward, backward_from


def truncation_boundary(i: int, k: int) -> int:
    """Index of the segment whose carry is detached for loss term i."""
    if i < 1:
        raise ValueError("loss index i must be >= 1")
    if k < 0:
        raise ValueError("truncation depth K must be >= 0")
    return max(0, i - k - 1)


@dataclass(frozen=True)
class TruncationPlan:
    """Per loss term: the boundary b_i and the attached-unroll range."""

    n_segments: int
    depth: int
    boundaries: tuple[int, ...]

    @classmethod
    def build(cls, n_segments: int, depth: int) -> "TruncationPlan":
        bounds = tuple(truncation_boundary(i, depth) for i in range(1, n_segments + 1))
        return cls(n_segments, depth, bounds)

    def unroll_range(self, i: int) -> range:
        return range(self.boundaries[i - 1] + 1, i)


# ---------------------------------------------------------------------------
# reference chain bookkeeping
# ---------------------------------------------------------------------------


@dataclass
class ReferenceChain:
    """Values of the inference-mode chain: boundary carries, prefixes, loss."""

    segments: list[np.ndarray]
    carries: list[CarriedState]  # index j holds C_j (C_0 is the empty state)
    prefixes: list[RetrievedPrefix]  # index j-1 holds the prefix segment j consumed
    losses: list[float]

    def seg_start(self, j: int) -> int:
        return sum(s.size for s in self.segments[: j - 1])


def reference_chain(params: ModelParams, cfg: ModelConfig, tokens) -> ReferenceChain:
    """Run the inference loop once, keeping the detached carry after every
    segment and the retrieved prefix each segment consumed."""
    segments = split_segments(tokens, cfg.segment_len)
    loop = SegmentLoop(cfg)
    carry = init_empty(cfg.partition, cfg.d_head, cfg.carry_len)
    carries = [carry]
    prefixes, losses = [], []
    pos = 0
    for i, seg in enumerate(segments, start=1):
        prefix = loop.prefix_for_next()
        run = forward_segment(
            params, cfg, seg, carry, prefix,
            mode="inference", seg_start=pos, segment_index=i,
        )
        loop.absorb(run, i)
        carry = detach_carry(run.carry_out)
        carries.append(carry)
        prefixes.append(prefix)
        losses.append(run.loss.item())
        pos += seg.size
    loop.flush()
    return ReferenceChain(segments, carries, prefixes, losses)


# ---------------------------------------------------------------------------
# literal objective: rebuild each loss term's truncated chain
# ---------------------------------------------------------------------------


@dataclass
class LiteralObjective:
    value: Tensor
    tape: Tape
    terms: list[Tensor]


def loss_lk_literal(
    params: ModelParams,
    cfg: ModelConfig,
    tokens,
    k: int,
    ref: ReferenceChain | None = None,
) -> LiteralObjective:
    """The definition, executed: for each loss term, detach the boundary
    carry from the reference chain, re-run the state update for the segments
    inside the truncation window attached, and evaluate the loss on the
    rebuilt carry. Prefixes are the reference chain's, already detached."""
    if ref is None:
        ref = reference_chain(params, cfg, tokens)
    n = len(ref.segments)
    plan = TruncationPlan.build(n, k)
    tape = Tape()
    bound = params.bind(tape)
    terms = []
    for i in range(1, n + 1):
        b = plan.boundaries[i - 1]
        carry = ref.carries[b]  # detached boundary state
        for j in plan.unroll_range(i):
            run_j = forward_segment(
                bound, cfg, ref.segments[j - 1], carry, ref.prefixes[j - 1],
                mode="training", seg_start=ref.seg_start(j), segment_index=j,
            )
            carry = run_j.carry_out  # attached: this is the state update
        run_i = forward_segment(
            bound, cfg, ref.segments[i - 1], carry, ref.prefixes[i - 1],
            mode="training", seg_start=ref.seg_start(i), segment_index=i,
        )
        terms.append(run_i.loss)
    value = terms[0]
    for t in terms[1:]:
        value = add(value, t)
    return LiteralObjective(value, tape, terms)


def literal_gradient(params, cfg, tokens, k, ref=None) -> dict[str, np.ndarray]:
    obj = loss_lk_literal(params, cfg, tokens, k, ref=ref)
    return backward(obj.tape, obj.value).for_params(obj.tape)


# ---------------------------------------------------------------------------
# sequential schedule: one attached chain, per-loss truncated backward
# ---------------------------------------------------------------------------


@dataclass
class TrainingChain:
    """One attached forward pass over all segments of a sample."""

    tape: Tape
    bound: BoundParams
    runs: list[SegmentRun]
    losses: list[Tensor]
    carry_nodes: list[set[int]]  # index j: node ids of C_j (index 0 empty)
    prefixes: list[RetrievedPrefix]
    pool: object

    @property
    def n_segments(self) -> int:
        return len(self.runs)

    def total_loss(self) -> float:
        return float(sum(l.item() for l in self.losses))


def build_training_chain(params: ModelParams, cfg: ModelConfig, tokens, k=None) -> TrainingChain:
    """Forward every segment on one tape with the carry left attached.

    Truncation is not applied here; it happens in the backward sweeps, which
    stop at each loss term's boundary carry. The forward values are therefore
    identical for every K, and identical to inference.
    """
    segments = split_segments(tokens, cfg.segment_len)
    tape = Tape()
    bound = params.bind(tape)
    loop = SegmentLoop(cfg)
    carry = init_empty(cfg.partition, cfg.d_head, cfg.carry_len)
    carry_nodes: list[set[int]] = [set()]
    runs, losses, prefixes = [], [], []
    pos = 0
    for i, seg in enumerate(segments, start=1):
        prefix = loop.prefix_for_next()
        run = forward_segment(
            bound, cfg, seg, carry, prefix,
            mode="training", seg_start=pos, segment_index=i,
        )
        loop.absorb(run, i)
        carry = run.carry_out  # attached across the segment boundary
        carry_nodes.append(run.carry_out.node_ids())
        runs.append(run)
        losses.append(run.loss)
        prefixes.append(prefix)
        pos += seg.size
    loop.flush()
    return TrainingChain(tape, bound, runs, losses, carry_nodes, prefixes, loop.pool)


def audit_chain(chain: TrainingChain) -> list:
    """Structural audit: the only gradient edges entering a segment's
    subgraph from earlier segments must point at that segment's incoming
    carry (parameter leaves are shared by construction)."""
    bad = []
    for i, run in enumerate(chain.runs, start=1):
        allowed = chain.carry_nodes[i - 1]
        bad.extend(cross_segment_edge_violations(chain.tape, run.node_range, allowed))
    return bad


def tbptt_gradient(
    params: ModelParams,
    cfg: ModelConfig,
    tokens,
    k: int,
    chain: TrainingChain | None = None,
) -> dict[str, np.ndarray]:
    """Sequential TBPTT: backward each segment loss through at most K state
    transitions, stopping at its boundary carry, and accumulate."""
    if chain is None:
        chain = build_training_chain(params, cfg, tokens, k)
    plan = TruncationPlan.build(chain.n_segments, k)
    total = {name: np.zeros_like(arr) for name, arr in params.arrays.items()}
    for i in range(1, chain.n_segments + 1):
        stop = frozenset(chain.carry_nodes[plan.boundaries[i - 1]])
        loss = chain.losses[i - 1]
        grads = backward_from(chain.tape, {loss.node: np.asarray(1.0)}, stop_ids=stop)
        for name, g in grads.for_params(chain.tape).items():
            total[name] += g
    return total


# ---------------------------------------------------------------------------
# adjoint-recursion oracle over dense transition Jacobians
# ---------------------------------------------------------------------------


def _carry_layout(carry: CarriedState) -> list[tuple[tuple[int, int], str, tuple[int, int]]]:
    layout = []
    for key, kt, vt in carry.tensors():
        layout.append((key, "k", kt.shape))
        layout.append((key, "v", vt.shape))
    return layout


def flatten_carry_grads(carry: CarriedState, grads: GradientMap) -> np.ndarray:
    """Gradient w.r.t. a carry's tensors as one flat vector, zeros for
    untouched tensors, in (layer, head, keys-then-values) order."""
    parts = []
    for _, kt, vt in carry.tensors():
        for t in (kt, vt):
            g = grads.get(t.node) if t.node is not None else None
            parts.append(np.zeros(t.shape).ravel() if g is None else g.ravel())
    if not parts:
        return np.zeros(0)
    return np.concatenate(parts)


def carry_dim(carry: CarriedState) -> int:
    return sum(kt.size + vt.size for _, kt, vt in carry.tensors())


def carry_seed_map(carry: CarriedState, vec: np.ndarray) -> dict[int, np.ndarray]:
    """Split a flat cotangent over the carry's tensors into per-node seeds."""
    seeds = {}
    at = 0
    for _, kt, vt in carry.tensors():
        for t in (kt, vt):
            n = t.size
            chunk = vec[at : at + n].reshape(t.shape)
            at += n
            if t.node is None:
                raise ValueError("carry tensor is not attached; cannot seed it")
            seeds[t.node] = chunk
    return seeds


@dataclass
class _Transition:
    """One attached run of the state update j: C_{j-1} (leaves) -> C_j."""

    tape: Tape
    carry_in: CarriedState
    run: SegmentRun


def _bind_carry_as_leaves(tape: Tape, carry: CarriedState) -> CarriedState:
    entries = {
        key: (tape.leaf(kt.data), tape.leaf(vt.data))
        for key, (kt, vt) in carry.entries.items()
    }
    return CarriedState(entries, carry.tail_len, carry.segment_index, True)


def _run_transition(params, cfg, ref: ReferenceChain, j: int) -> _Transition:
    tape = Tape()
    bound = params.bind(tape)
    carry_in = _bind_carry_as_leaves(tape, ref.carries[j - 1])
    run = forward_segment(
        bound, cfg, ref.segments[j - 1], carry_in, ref.prefixes[j - 1],
        mode="training", seg_start=ref.seg_start(j), segment_index=j,
    )
    return _Transition(tape, carry_in, run)


def _transition_jacobian(tr: _Transition) -> np.ndarray:
    """J_j = d C_j / d C_{j-1}, materialized row by row: each row is one
    backward sweep seeded with a one-hot cotangent on C_j."""
    d_out = carry_dim(tr.run.carry_out)
    d_in = carry_dim(tr.carry_in)
    jac = np.zeros((d_out, d_in))
    one_hot = np.zeros(d_out)
    for r in range(d_out):
        one_hot[r] = 1.0
        seeds = carry_seed_map(tr.run.carry_out, one_hot)
        grads = backward_from(tr.tape, seeds)
        jac[r] = flatten_carry_grads(tr.carry_in, grads)
        one_hot[r] = 0.0
    return jac


def _transition_param_vjp(tr: _Transition, a: np.ndarray) -> dict[str, np.ndarray]:
    """a . U_j where U_j = d C_j / d theta: one backward sweep seeded with a."""
    seeds = carry_seed_map(tr.run.carry_out, a)
    return backward_from(tr.tape, seeds).for_params(tr.tape)


def adjoint_oracle_gradient(
    params: ModelParams,
    cfg: ModelConfig,
    tokens,
    k: int,
    ref: ReferenceChain | None = None,
    jacobians: dict[int, np.ndarray] | None = None,
) -> dict[str, np.ndarray]:
    """Gradient of the K-truncated objective by explicit adjoint recursion.

    For each loss term: the direct parameter gradient with the incoming
    carry held constant, plus adjoint-weighted parameter sensitivities of
    each in-window state transition, with adjoints propagated through dense
    transition Jacobians. ``jacobians`` may carry precomputed J_j entries
    (they depend on params and data, not on K).
    """
    if ref is None:
        ref = reference_chain(params, cfg, tokens)
    n = len(ref.segments)
    plan = TruncationPlan.build(n, k)
    total = {name: np.zeros_like(arr) for name, arr in params.arrays.items()}
    transitions: dict[int, _Transition] = {}
    jacobians = {} if jacobians is None else jacobians

    def transition(j: int) -> _Transition:
        if j not in transitions:
            transitions[j] = _run_transition(params, cfg, ref, j)
        return transitions[j]

    for i in range(1, n + 1):
        b = plan.boundaries[i - 1]
        # direct term and the adjoint seed, from one tape with the carry leafed
        tr_i = transition(i)
        grads_i = backward(tr_i.tape, tr_i.run.loss)
        for name, g in grads_i.for_params(tr_i.tape).items():
            total[name] += g
        if b >= i - 1:
            continue  # empty window: direct term only
        a = flatten_carry_grads(tr_i.carry_in, grads_i)  # a_{i-1}
        for j in range(i - 1, b, -1):
            tr_j = transition(j)
            for name, g in _transition_param_vjp(tr_j, a).items():
                total[name] += g
            if j - 1 > b:
                if j not in jacobians:
                    jacobians[j] = _transition_jacobian(tr_j)
                a = a @ jacobians[j]
    return total


# ---------------------------------------------------------------------------
# frozen-boundary value function for finite differencing
# ---------------------------------------------------------------------------


def lk_value_frozen(
    params: ModelParams,
    cfg: ModelConfig,
    k: int,
    ref: ReferenceChain,
) -> float:
    """Value of the truncated objective with boundary carries and retrieval
    prefixes frozen to a reference chain's.

    Differentiating this function with respect to the parameters (the frozen
    inputs stay fixed) is exactly what the stop-gradient boundaries mean, so
    central differences on it are an independent oracle for the truncated
    gradient.
    """
    n = len(ref.segments)
    plan = TruncationPlan.build(n, k)
    value = 0.0
    for i in range(1, n + 1):
        b = plan.boundaries[i - 1]
        carry = ref.carries[b]
        for j in plan.unroll_range(i):
            run_j = forward_segment(
                params, cfg, ref.segments[j - 1], carry, ref.prefixes[j - 1],
                mode="inference", seg_start=ref.seg_start(j), segment_index=j,
            )
            carry = run_j.carry_out
        run_i = forward_segment(
            params, cfg, ref.segments[i - 1], carry, ref.prefixes[i - 1],
            mode="inference", seg_start=ref.seg_start(i), segment_index=i,
        )
        value += run_i.loss.item()
    return value


def finite_diff_lk_coordinate(
    params: ModelParams, cfg: ModelConfig, tokens, k: int,
    name: str, index: tuple, h: float = 1e-5,
) -> float:
    """Central difference of the truncated objective along one parameter
    coordinate, on the frozen-boundary value function."""
    ref = reference_chain(params, cfg, tokens)

    def value_at(delta: float) -> float:
        arrays = {n: a.copy() for n, a in params.arrays.items()}
        arrays[name][index] += delta
        return lk_value_frozen(ModelParams(arrays), cfg, k, ref)

    return (value_at(+h) - value_at(-h)) / (2.0 * h)


# ---------------------------------------------------------------------------
# optimizer and training loops
# ---------------------------------------------------------------------------


@dataclass
class TrainState:
    params: ModelParams
    m: dict[str, np.ndarray]
    v: dict[str, np.ndarray]
    step: int = 0

    @classmethod
    def fresh(cls, params: ModelParams) -> "TrainState":
        return cls(
            params=params,
            m={k: np.zeros_like(a) for k, a in params.arrays.items()},
            v={k: np.zeros_like(a) for k, a in params.arrays.items()},
        )


def adam_step(
    state: TrainState, grads: dict[str, np.ndarray],
    lr: float = 3e-3, beta1: float = 0.9, beta2: float = 0.999, eps: float = 1e-8,
):
    state.step += 1
    t = state.step
    for name, g in grads.items():
        state.m[name] = beta1 * state.m[name] + (1.0 - beta1) * g
        state.v[name] = beta2 * state.v[name] + (1.0 - beta2) * g * g
        mhat = state.m[name] / (1.0 - beta1**t)
        vhat = state.v[name] / (1.0 - beta2**t)
        state.params.arrays[name] -= lr * mhat / (np.sqrt(vhat) + eps)


def grad_global_norm(grads: dict[str, np.ndarray]) -> float:
    return float(np.sqrt(sum(float((g * g).sum()) for g in grads.values())))


def train(
    params: ModelParams,
    cfg: ModelConfig,
    sample_stream,
    steps: int,
    lr: float = 3e-3,
    k: int | None = None,
    accum: int = 1,
) -> tuple[TrainState, list[tuple]]:
    """TBPTT training. Each step draws ``accum`` samples sequentially
    (micro-batch 1 with gradient accumulation), applies one Adam update, and
    logs (step, loss, grad_norm, seconds). Loss is the mean per-segment loss
    averaged over the step's samples."""
    if steps < 1:
        raise ValueError("steps must be >= 1")
    if accum < 1:
        raise ValueError("accum must be >= 1")
    k = cfg.tbptt_depth if k is None else k
    state = TrainState.fresh(params)
    rows = []
    for step in range(1, steps + 1):
        t0 = time.perf_counter()
        total = {n: np.zeros_like(a) for n, a in state.params.arrays.items()}
        loss = 0.0
        for _ in range(accum):
            sample = next(sample_stream)
            chain = build_training_chain(state.params, cfg, sample, k)
            loss += chain.total_loss() / chain.n_segments / accum
            grads = tbptt_gradient(state.params, cfg, sample, k, chain=chain)
            for name in total:
                total[name] += grads[name] / accum
        if not np.isfinite(loss):
            raise RuntimeError(f"non-finite loss {loss} at step {step}")
        adam_step(state, total, lr=lr)
        rows.append((step, loss, grad_global_norm(total), time.perf_counter() - t0))
    return state, rows


def train_misaligned(
    params: ModelParams,
    cfg: ModelConfig,
    sample_stream,
    steps: int,
    lr: float = 3e-3,
    accum: int = 1,
) -> tuple[TrainState, list[tuple]]:
    """Full-context training baseline: each sample is one causal attention
    pass with no carry and no retrieval. Evaluation stays segmented."""
    if steps < 1:
        raise ValueError("steps must be >= 1")
    if accum < 1:
        raise ValueError("accum must be >= 1")
    state = TrainState.fresh(params)
    empty = init_empty(cfg.partition, cfg.d_head, cfg.carry_len)
    rows = []
    for step in range(1, steps + 1):
        t0 = time.perf_counter()
        total = {n: np.zeros_like(a) for n, a in state.params.arrays.items()}
        loss = 0.0
        for _ in range(accum):
            sample = np.asarray(next(sample_stream), dtype=np.int64)
            tape = Tape()
            bound = state.params.bind(tape)
            run = forward_segment(bound, cfg, sample, empty, None, mode="training")
            loss += run.loss.item() / accum
            grads = backward(tape, run.loss).for_params(tape)
            for name, arr in state.params.arrays.items():
                g = grads.get(name)
                if g is not None:
                    total[name] += g / accum
        if not np.isfinite(loss):
            raise RuntimeError(f"non-finite loss {loss} at step {step}")
        adam_step(state, total, lr=lr)
        rows.append((step, loss, grad_global_norm(total), time.perf_counter() - t0))
    return state, rows


def eval_segmented(params: ModelParams, cfg: ModelConfig, samples) -> float:
    """Mean per-segment loss over held-out samples under segmented execution."""
    losses = []
    for sample in samples:
        res = run_inference(params, cfg, sample)
        losses.append(float(np.mean(res.losses)))
    return float(np.mean(losses))


def eval_fullcontext(params: ModelParams, cfg: ModelConfig, samples) -> float:
    empty = init_empty(cfg.partition, cfg.d_head, cfg.carry_len)
    losses = []
    for sample in samples:
        run = forward_segment(params, cfg, sample, empty, None, mode="inference")
        losses.append(run.loss.item())
    return float(np.mean(losses))


CSV_VERSION = "# segtide-csv v1"


def write_metrics_csv(path, rows):
    """Training metric log; the seconds column is wall clock and is the one
    value exempt from byte-for-byte reproducibility."""
    with open(path, "w", encoding="utf-8") as f:
        f.write(CSV_VERSION + "\n")
        f.write("step,loss,grad_norm,seconds\n")
        for step, loss, gnorm, secs in rows:
            f.write(f"{step},{loss!r},{gnorm!r},{secs:.6f}\n")
