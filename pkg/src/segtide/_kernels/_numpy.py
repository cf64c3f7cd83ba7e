"""Pure-numpy kernel backend.

Same contract as the compiled core in ``_core.pyx``: float64 in, float64
out, deterministic, no in-place mutation of inputs. Masks are additive with
a large-negative sentinel; an entry is treated as masked when it is at or
below ``MASK_THRESHOLD``.
"""

import numpy as np

NAME = "numpy"

MASK_SENTINEL = -1e30
MASK_THRESHOLD = -1e29


def matmul(a, b, ta=False, tb=False):
    """C = A' @ B' with A' = a.T if ta else a and B' = b.T if tb else b."""
    aa = a.T if ta else a
    bb = b.T if tb else b
    if aa.shape[1] != bb.shape[0]:
        raise ValueError(
            f"matmul dimension mismatch: inner dims {aa.shape[1]} vs {bb.shape[0]}"
        )
    return np.ascontiguousarray(aa @ bb)


def softmax_masked(x, mask):
    """Row softmax over the last axis of a 2-D array with an additive mask.

    Masked entries come out exactly 0.0. A fully masked row is an error.
    """
    z = x if mask is None else x + mask
    if mask is not None:
        unmasked = mask > MASK_THRESHOLD
        if not unmasked.any(axis=1).all():
            raise ValueError("softmax: fully masked row")
    m = z.max(axis=1, keepdims=True)
    e = np.exp(z - m)
    if mask is not None:
        e = np.where(mask > MASK_THRESHOLD, e, 0.0)
    return e / e.sum(axis=1, keepdims=True)


def softmax_backward(y, g):
    """VJP of row softmax: gx = y * (g - sum(g * y, axis=-1))."""
    dot = (g * y).sum(axis=1, keepdims=True)
    return y * (g - dot)


def _rope_cos_sin(positions, d, base):
    half = d // 2
    inv = base ** (-np.arange(half, dtype=np.float64) * 2.0 / d)
    ang = np.asarray(positions, dtype=np.float64)[:, None] * inv[None, :]
    return np.cos(ang), np.sin(ang)


def rope_forward(x, positions, base):
    """Rotate even/odd feature pairs of each row by its position angle."""
    n, d = x.shape
    cos, sin = _rope_cos_sin(positions, d, base)
    out = np.empty_like(x)
    x0, x1 = x[:, 0::2], x[:, 1::2]
    out[:, 0::2] = x0 * cos - x1 * sin
    out[:, 1::2] = x0 * sin + x1 * cos
    return out


def rope_backward(g, positions, base):
    """VJP of rope_forward: rotate the cotangent by the negated angles."""
    n, d = g.shape
    cos, sin = _rope_cos_sin(positions, d, base)
    out = np.empty_like(g)
    g0, g1 = g[:, 0::2], g[:, 1::2]
    out[:, 0::2] = g0 * cos + g1 * sin
    out[:, 1::2] = -g0 * sin + g1 * cos
    return out
