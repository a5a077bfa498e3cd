"""Kernel backend selection.

The compiled extension is preferred when importable; the pure-numpy reference
implementation is the fallback. Set SPARSELM_PURE_PYTHON=1 to force the
fallback (the benchmark uses this to compare the two).
"""

from __future__ import annotations

import os

import numpy as np

from sparselm.kernels import reference

try:
    from sparselm.kernels import _blocksparse as _ext
except ImportError:  # pragma: no cover - depends on build environment
    _ext = None

_FORCE_PY = os.environ.get("SPARSELM_PURE_PYTHON", "") not in ("", "0")
_active = reference if (_ext is None or _FORCE_PY) else _ext

BACKEND = "python" if _active is reference else "cython"
HAVE_EXTENSION = _ext is not None


def backend_name(impl=None):
    impl = _active if impl is None else impl
    return "python" if impl is reference else "cython"


def get_backend(name=None):
    """Return the kernel module for ``name`` ('cython'/'python'/None=active)."""
    if name is None:
        return _active
    if name == "python":
        return reference
    if name == "cython":
        if _ext is None:
            raise RuntimeError("compiled kernel extension is not available")
        return _ext
    raise ValueError(f"unknown kernel backend '{name}'")


def _prep(*arrays):
    dtype = arrays[0].dtype
    if dtype not in (np.float32, np.float64):
        raise TypeError(f"kernels support float32/float64, got {dtype}")
    out = []
    for a in arrays:
        if a.dtype != dtype:
            raise TypeError("kernel operands must share one dtype")
        out.append(np.ascontiguousarray(a))
    return out


def attention_forward(q, k, v, plan, scale, impl=None):
    """Block-sparse attention forward: (out, row_max, row_denom, macs)."""
    q, k, v = _prep(q, k, v)
    mod = _active if impl is None else get_backend(impl)
    return mod.attention_forward(q, k, v, plan, float(scale))


def attention_backward(q, k, v, plan, scale, m, z, out, d_out, impl=None):
    """Gradients (dq, dk, dv, macs) given the forward's row statistics."""
    q, k, v, m, z, out, d_out = _prep(q, k, v, m, z, out, d_out)
    mod = _active if impl is None else get_backend(impl)
    return mod.attention_backward(q, k, v, plan, float(scale), m, z, out, d_out)
