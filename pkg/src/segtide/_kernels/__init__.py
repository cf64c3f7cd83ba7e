"""Kernel backend selection.

The compiled core is preferred when it imported cleanly; set
``SEGTIDE_KERNELS=numpy`` or ``SEGTIDE_KERNELS=cython`` to force a backend.
Both backends implement the same contract (see ``_numpy.py``); results agree
to float64 roundoff but are not bit-identical across backends, so anything
that freezes bits (checkpoints, CSVs) is reproducible per backend.
"""

import os

from . import _numpy

_FORCED = os.environ.get("SEGTIDE_KERNELS", "").strip().lower()

_cython = None
if _FORCED != "numpy":
    try:
        from . import _core as _cython
    except ImportError:
        _cython = None

if _FORCED == "cython" and _cython is None:
    raise ImportError(
        "SEGTIDE_KERNELS=cython requested but the compiled core is not built; "
        "run 'pip install -e . --no-build-isolation' or 'python setup.py build_ext --inplace'"
    )

_active = _cython if _cython is not None else _numpy

NAME = _active.NAME
MASK_SENTINEL = _numpy.MASK_SENTINEL
MASK_THRESHOLD = _numpy.MASK_THRESHOLD

matmul = _active.matmul
softmax_masked = _active.softmax_masked
softmax_backward = _active.softmax_backward
rope_forward = _active.rope_forward
rope_backward = _active.rope_backward


def backend_name():
    return NAME


def available_backends():
    out = {"numpy": _numpy}
    if _cython is not None:
        out["cython"] = _cython
    return out
