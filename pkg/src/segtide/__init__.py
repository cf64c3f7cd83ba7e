"""segtide: segment-level decoder-transformer engine.

Sequences run segment by segment through one shared forward operator. A
fixed-size carried KV tail from local attention heads is the only
differentiable state crossing segment boundaries; long-range heads in
enabled layers additionally read a fixed-size retrieved prefix from an
append-only past-only KV pool, forward-only. Training truncates cross
segment credit assignment to K state transitions and is exact for that
objective; two independent gradient oracles machine-check this.
"""

from ._kernels import backend_name

__version__ = "0.1.0"

__all__ = ["backend_name", "__version__"]
