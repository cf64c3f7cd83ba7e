"""Reverse-mode automatic differentiation over dense float64 arrays.

A ``Tape`` records one forward pass as an append-only list of nodes in
topological order; ``backward`` walks it in reverse. A ``Tensor`` without a
node id is a constant: it contributes exactly zero to every gradient. All
arithmetic is float64 so gradient-equality tests can run at tight tolerance.

Every node saves its operation tag, input node ids, input value references
and op parameters, which makes the tape replayable: re-executing each node's
forward rule from its saved inputs must reproduce the saved output
bit-exactly (``Tape.replay_check``).

Ops record themselves only when at least one operand is attached to a tape,
so running the same computation with constant inputs performs the identical
arithmetic with zero recording overhead. Tapes are single-use: build one
forward pass, call ``backward``, discard.
"""

from __future__ import annotations

from typing import Callable, Sequence

import numpy as np

from . import _kernels as K

MASK_SENTINEL = K.MASK_SENTINEL
MASK_THRESHOLD = K.MASK_THRESHOLD

_GELU_C = 0.7978845608028654  # sqrt(2/pi)
_GELU_A = 0.044715

# tag -> forward(input_vals, aux) -> value; used by Tape.replay_check
_FORWARD: dict[str, Callable] = {}
# tag -> vjp(input_vals, aux, out_value, grad_out) -> per-input grads
_VJP: dict[str, Callable] = {}


def register_op(tag, forward, vjp):
    if tag in _FORWARD:
        raise ValueError(f"op tag already registered: {tag}")
    _FORWARD[tag] = forward
    _VJP[tag] = vjp


def _contig_f64(value) -> np.ndarray:
    # np.ascontiguousarray promotes 0-d to 1-d, so go through asarray first
    arr = np.asarray(value, dtype=np.float64)
    if not arr.flags["C_CONTIGUOUS"]:
        arr = np.ascontiguousarray(arr)
    return arr


class Node:
    __slots__ = ("tag", "input_ids", "input_vals", "aux", "value")

    def __init__(self, tag, input_ids, input_vals, aux, value):
        self.tag = tag
        self.input_ids = input_ids
        self.input_vals = input_vals
        self.aux = aux
        self.value = value


class Tape:
    """Append-only record of one forward pass plus its parameter registry."""

    def __init__(self):
        self.nodes: list[Node] = []
        self.param_ids: dict[int, str] = {}

    def __len__(self):
        return len(self.nodes)

    def _record(self, tag, input_ids, input_vals, aux, value) -> int:
        self.nodes.append(Node(tag, input_ids, input_vals, aux, value))
        return len(self.nodes) - 1

    def leaf(self, value, name: str | None = None) -> "Tensor":
        """Attach an input value as a leaf node; named leaves are parameters."""
        arr = _contig_f64(value)
        nid = self._record("leaf", (), (), (), arr)
        if name is not None:
            if name in self.param_ids.values():
                raise ValueError(f"duplicate parameter name: {name}")
            self.param_ids[nid] = name
        return Tensor(arr, self, nid)

    def replay_check(self):
        """Re-run every node's forward rule; raise if any value changed."""
        for i, node in enumerate(self.nodes):
            if node.tag == "leaf":
                continue
            redo = _FORWARD[node.tag](node.input_vals, node.aux)
            if redo.shape != node.value.shape or not np.array_equal(
                redo, node.value, equal_nan=True
            ):
                raise AssertionError(f"replay mismatch at node {i} ({node.tag})")


class Tensor:
    """Dense float64 value, optionally bound to a tape node."""

    __slots__ = ("data", "tape", "node")

    def __init__(self, data, tape: Tape | None = None, node: int | None = None):
        self.data = _contig_f64(data)
        self.tape = tape
        self.node = node

    @property
    def shape(self):
        return self.data.shape

    @property
    def size(self):
        return self.data.size

    def item(self) -> float:
        return float(self.data)

    def detach(self) -> "Tensor":
        """Constant view of the same buffer; no gradient ever flows to it."""
        if self.node is None:
            return self
        return Tensor(self.data)

    def __repr__(self):
        kind = "const" if self.node is None else f"node {self.node}"
        return f"Tensor(shape={self.shape}, {kind})"


class GradientMap(dict):
    """node id -> gradient array; a missing entry is an exact zero."""

    def for_params(self, tape: Tape) -> dict[str, np.ndarray]:
        """Dense per-parameter gradients (zeros for untouched parameters)."""
        out = {}
        for nid, name in tape.param_ids.items():
            g = self.get(nid)
            out[name] = np.zeros_like(tape.nodes[nid].value) if g is None else g
        return out


def constant(value) -> Tensor:
    return Tensor(value)


def _as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(np.asarray(x, dtype=np.float64))


def _apply(tag, inputs: Sequence[Tensor], aux, value) -> Tensor:
    tape = None
    for t in inputs:
        if t.node is not None:
            if tape is None:
                tape = t.tape
            elif t.tape is not tape:
                raise ValueError("operands attached to different tapes")
    if tape is None:
        return Tensor(value)
    ids = tuple(t.node for t in inputs)
    vals = tuple(t.data for t in inputs)
    nid = tape._record(tag, ids, vals, aux, value)
    return Tensor(value, tape, nid)


# ---------------------------------------------------------------------------
# op definitions
# ---------------------------------------------------------------------------


def _matmul_fwd(vals, aux):
    ta, tb = aux
    return K.matmul(vals[0], vals[1], ta, tb)


def _matmul_vjp(vals, aux, out, g):
    a, b = vals
    ta, tb = aux
    da = K.matmul(g, b, False, not tb)
    if ta:
        da = np.ascontiguousarray(da.T)
    db = K.matmul(a, g, not ta, False)
    if tb:
        db = np.ascontiguousarray(db.T)
    return da, db


register_op("matmul", _matmul_fwd, _matmul_vjp)


def matmul(a, b, ta: bool = False, tb: bool = False) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    if a.data.ndim != 2 or b.data.ndim != 2:
        raise ValueError("matmul expects 2-D operands")
    return _apply("matmul", (a, b), (ta, tb), K.matmul(a.data, b.data, ta, tb))


def _add_fwd(vals, aux):
    return vals[0] + vals[1]


register_op("add", _add_fwd, lambda vals, aux, out, g: (g, g))


def add(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    if a.shape != b.shape:
        raise ValueError(f"add shape mismatch: {a.shape} vs {b.shape}")
    return _apply("add", (a, b), (), a.data + b.data)


def _scale_fwd(vals, aux):
    return vals[0] * aux[0]


register_op("scale", _scale_fwd, lambda vals, aux, out, g: (g * aux[0],))


def scale(a, c: float) -> Tensor:
    a = _as_tensor(a)
    c = float(c)
    return _apply("scale", (a,), (c,), a.data * c)


def _mul_fwd(vals, aux):
    return vals[0] * vals[1]


register_op("mul", _mul_fwd, lambda vals, aux, out, g: (g * vals[1], g * vals[0]))


def multiply(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    if a.shape != b.shape:
        raise ValueError(f"multiply shape mismatch: {a.shape} vs {b.shape}")
    return _apply("mul", (a, b), (), a.data * b.data)


def _concat_fwd(vals, aux):
    axis = aux[0]
    return np.concatenate(vals, axis=axis)


def _concat_vjp(vals, aux, out, g):
    axis = aux[0]
    sizes = [v.shape[axis] for v in vals]
    splits = np.cumsum(sizes)[:-1]
    return tuple(np.ascontiguousarray(p) for p in np.split(g, splits, axis=axis))


register_op("concat", _concat_fwd, _concat_vjp)


def concat(tensors: Sequence[Tensor], axis: int = 0) -> Tensor:
    ts = [_as_tensor(t) for t in tensors]
    if not ts:
        raise ValueError("concat of zero tensors")
    value = np.concatenate([t.data for t in ts], axis=axis)
    return _apply("concat", tuple(ts), (axis,), value)


def _slice_fwd(vals, aux):
    axis, start, stop = aux
    idx = [slice(None)] * vals[0].ndim
    idx[axis] = slice(start, stop)
    return np.ascontiguousarray(vals[0][tuple(idx)])


def _slice_vjp(vals, aux, out, g):
    axis, start, stop = aux
    gx = np.zeros_like(vals[0])
    idx = [slice(None)] * vals[0].ndim
    idx[axis] = slice(start, stop)
    gx[tuple(idx)] = g
    return (gx,)


register_op("slice", _slice_fwd, _slice_vjp)


def slice_axis(a, axis: int, start: int, stop: int) -> Tensor:
    a = _as_tensor(a)
    n = a.shape[axis]
    start, stop, _ = slice(start, stop).indices(n)
    return _apply("slice", (a,), (axis, start, stop), _slice_fwd((a.data,), (axis, start, stop)))


def _gather_fwd(vals, aux):
    return np.ascontiguousarray(vals[0][np.asarray(aux[0], dtype=np.int64)])


def _gather_vjp(vals, aux, out, g):
    gx = np.zeros_like(vals[0])
    np.add.at(gx, np.asarray(aux[0], dtype=np.int64), g)
    return (gx,)


register_op("gather_rows", _gather_fwd, _gather_vjp)


def gather_rows(table, ids) -> Tensor:
    """Row lookup (embedding gather); ids are data, not differentiable."""
    table = _as_tensor(table)
    ids = tuple(int(i) for i in np.asarray(ids).ravel())
    n = table.shape[0]
    for i in ids:
        if i < 0 or i >= n:
            raise ValueError(f"gather_rows: id {i} out of range [0, {n})")
    return _apply("gather_rows", (table,), (ids,), _gather_fwd((table.data,), (ids,)))


def _sum_fwd(vals, aux):
    return np.asarray(vals[0].sum())


register_op("sum", _sum_fwd, lambda vals, aux, out, g: (np.full_like(vals[0], float(g)),))


def sum_all(a) -> Tensor:
    a = _as_tensor(a)
    return _apply("sum", (a,), (), np.asarray(a.data.sum()))


def _mean_fwd(vals, aux):
    return np.asarray(vals[0].mean())


register_op(
    "mean", _mean_fwd, lambda vals, aux, out, g: (np.full_like(vals[0], float(g) / vals[0].size),)
)


def mean_all(a) -> Tensor:
    a = _as_tensor(a)
    return _apply("mean", (a,), (), np.asarray(a.data.mean()))


def _softmax_fwd(vals, aux):
    x = vals[0]
    mask = vals[1] if len(vals) == 2 else None
    return K.softmax_masked(x, mask)


def _softmax_vjp(vals, aux, out, g):
    gx = K.softmax_backward(out, g)
    return (gx,) if len(vals) == 1 else (gx, None)


register_op("softmax_last", _softmax_fwd, _softmax_vjp)


def softmax_last(a, mask=None) -> Tensor:
    """Row softmax over the last axis; ``mask`` is additive (0 or sentinel).

    Masked entries are exactly 0 in the output; the mask itself is data and
    receives no gradient.
    """
    a = _as_tensor(a)
    if a.data.ndim != 2:
        raise ValueError("softmax_last expects a 2-D array")
    if mask is None:
        return _apply("softmax_last", (a,), (), K.softmax_masked(a.data, None))
    mask = _as_tensor(mask)
    if mask.shape != a.shape:
        raise ValueError(f"softmax mask shape {mask.shape} != input shape {a.shape}")
    return _apply("softmax_last", (a, mask), (), K.softmax_masked(a.data, mask.data))


def _sg_fwd(vals, aux):
    return vals[0]


register_op("stop_gradient", _sg_fwd, lambda vals, aux, out, g: (None,))


def stop_gradient(a) -> Tensor:
    """Identity in forward; blocks all gradient flow into ``a`` in backward."""
    a = _as_tensor(a)
    return _apply("stop_gradient", (a,), (), a.data)


def _rope_fwd(vals, aux):
    positions, base = aux
    return K.rope_forward(vals[0], np.asarray(positions, dtype=np.int64), base)


def _rope_vjp(vals, aux, out, g):
    positions, base = aux
    return (K.rope_backward(g, np.asarray(positions, dtype=np.int64), base),)


register_op("rope", _rope_fwd, _rope_vjp)


def rope(x, positions, base: float = 10000.0) -> Tensor:
    """Rotary rotation of each row at its absolute position."""
    x = _as_tensor(x)
    n, d = x.shape
    if d % 2 != 0:
        raise ValueError(f"rope requires an even feature dimension, got {d}")
    positions = tuple(int(p) for p in positions)
    if len(positions) != n:
        raise ValueError(f"rope: {n} rows but {len(positions)} positions")
    if any(p < 0 for p in positions):
        raise ValueError("rope positions must be non-negative")
    return _apply("rope", (x,), (positions, float(base)), _rope_fwd((x.data,), (positions, base)))


def _rms_fwd(vals, aux):
    x, gain = vals
    eps = aux[0]
    r = 1.0 / np.sqrt((x * x).mean(axis=-1, keepdims=True) + eps)
    return x * r * gain


def _rms_vjp(vals, aux, out, g):
    x, gain = vals
    eps = aux[0]
    d = x.shape[-1]
    r = 1.0 / np.sqrt((x * x).mean(axis=-1, keepdims=True) + eps)
    gg = g * gain
    dot = (gg * x).sum(axis=-1, keepdims=True)
    gx = gg * r - x * (r**3) * dot / d
    ggain = (g * x * r).sum(axis=tuple(range(x.ndim - 1)))
    return gx, ggain


register_op("rms_norm", _rms_fwd, _rms_vjp)


def rms_norm(x, gain, eps: float = 1e-6) -> Tensor:
    x, gain = _as_tensor(x), _as_tensor(gain)
    if gain.shape != x.shape[-1:]:
        raise ValueError(f"rms_norm gain shape {gain.shape} != ({x.shape[-1]},)")
    return _apply("rms_norm", (x, gain), (float(eps),), _rms_fwd((x.data, gain.data), (eps,)))


def _gelu_fwd(vals, aux):
    x = vals[0]
    u = _GELU_C * (x + _GELU_A * x**3)
    return 0.5 * x * (1.0 + np.tanh(u))


def _gelu_vjp(vals, aux, out, g):
    x = vals[0]
    u = _GELU_C * (x + _GELU_A * x**3)
    t = np.tanh(u)
    du = _GELU_C * (1.0 + 3.0 * _GELU_A * x**2)
    return (g * (0.5 * (1.0 + t) + 0.5 * x * (1.0 - t**2) * du),)


register_op("gelu", _gelu_fwd, _gelu_vjp)


def gelu(x) -> Tensor:
    x = _as_tensor(x)
    return _apply("gelu", (x,), (), _gelu_fwd((x.data,), ()))


def _ce_fwd(vals, aux):
    logits = vals[0]
    targets = np.asarray(aux[0], dtype=np.int64)
    m = logits.shape[0]
    rowmax = logits.max(axis=1, keepdims=True)
    lse = np.log(np.exp(logits - rowmax).sum(axis=1)) + rowmax[:, 0]
    picked = logits[np.arange(m), targets]
    return np.asarray((lse - picked).mean())


def _ce_vjp(vals, aux, out, g):
    logits = vals[0]
    targets = np.asarray(aux[0], dtype=np.int64)
    m = logits.shape[0]
    rowmax = logits.max(axis=1, keepdims=True)
    e = np.exp(logits - rowmax)
    p = e / e.sum(axis=1, keepdims=True)
    p[np.arange(m), targets] -= 1.0
    return (p * (float(g) / m),)


register_op("cross_entropy", _ce_fwd, _ce_vjp)


def cross_entropy_from_logits(logits, targets) -> Tensor:
    """Mean next-token cross entropy over rows of ``logits``."""
    logits = _as_tensor(logits)
    targets = tuple(int(t) for t in np.asarray(targets).ravel())
    m, v = logits.shape
    if len(targets) != m:
        raise ValueError(f"cross entropy: {m} rows but {len(targets)} targets")
    for t in targets:
        if t < 0 or t >= v:
            raise ValueError(f"cross entropy: target {t} out of range [0, {v})")
    return _apply("cross_entropy", (logits,), (targets,), _ce_fwd((logits.data,), (targets,)))


# ---------------------------------------------------------------------------
# backward
# ---------------------------------------------------------------------------


def backward_from(tape: Tape, seeds: dict[int, np.ndarray], stop_ids=frozenset()) -> GradientMap:
    """Reverse sweep from explicit cotangent seeds.

    ``seeds`` maps node id -> cotangent of that node's value. Nodes in
    ``stop_ids`` receive a gradient but do not propagate into their inputs
    (they behave as leaves for this sweep). Gradients accumulate additively
    when a node feeds several consumers; untouched nodes stay absent.
    """
    grads = GradientMap()
    start = -1
    for nid, seed in seeds.items():
        node = tape.nodes[nid]
        seed = np.asarray(seed, dtype=np.float64)
        if seed.shape != node.value.shape:
            raise ValueError(f"seed shape {seed.shape} != node value shape {node.value.shape}")
        grads[nid] = grads[nid] + seed if nid in grads else seed
        start = max(start, nid)
    for nid in range(start, -1, -1):
        if nid not in grads:
            continue
        node = tape.nodes[nid]
        if node.tag == "leaf" or nid in stop_ids:
            continue
        input_grads = _VJP[node.tag](node.input_vals, node.aux, node.value, grads[nid])
        for iid, g in zip(node.input_ids, input_grads):
            if iid is None or g is None:
                continue
            if iid in grads:
                grads[iid] = grads[iid] + g
            else:
                grads[iid] = g
    return grads


def backward(tape: Tape, loss: Tensor) -> GradientMap:
    """Gradients of a scalar loss node w.r.t. everything upstream of it."""
    if loss.node is None or loss.tape is not tape:
        raise ValueError("loss is not a node on this tape")
    if loss.data.shape != ():
        raise ValueError(f"loss must be a scalar node, got shape {loss.data.shape}")
    return backward_from(tape, {loss.node: np.asarray(1.0)})


def finite_diff_grad(f: Callable[[np.ndarray], float], x, h: float = 1e-5) -> np.ndarray:
    """Central-difference gradient of a scalar function, one coordinate at a time."""
    x = np.asarray(x, dtype=np.float64)
    out = np.zeros_like(x)
    flat = out.ravel()
    for i in range(x.size):
        xp = x.copy().ravel()
        xm = x.copy().ravel()
        xp[i] += h
        xm[i] -= h
        flat[i] = (f(xp.reshape(x.shape)) - f(xm.reshape(x.shape))) / (2.0 * h)
    return out
