"""Kernel backend selection.

The compiled Cython extension is used when it was built; otherwise the numpy
fallback is used. Setting ``INTERSLICE_PURE_PYTHON=1`` forces the fallback.
"""
import logging
import os

import numpy as np

from . import _pykernels

logger = logging.getLogger(__name__)

_compiled = None
if os.environ.get("INTERSLICE_PURE_PYTHON", "") not in ("1", "true", "yes"):
    try:
        from . import _ckernels as _compiled
    except ImportError:  # extension not built
        logger.info("compiled kernels unavailable, using numpy fallback")
        _compiled = None

BACKEND = "cython" if _compiled is not None else "numpy"
_impl = _compiled if _compiled is not None else _pykernels

_NAMES = ("im2col", "col2im", "grid_sample_fwd", "grid_sample_bwd", "upsample2_fwd", "upsample2_bwd")


def _contig(*arrays):
    dtype = np.result_type(*arrays)
    if dtype not in (np.float32, np.float64):
        dtype = np.float64
    return [np.ascontiguousarray(a, dtype=dtype) for a in arrays]


def im2col(x, k, stride, pad):
    (x,) = _contig(x)
    return _impl.im2col(x, k, stride, pad)


def col2im(cols, shape, k, stride, pad):
    (cols,) = _contig(cols)
    return _impl.col2im(cols, tuple(shape), k, stride, pad)


def grid_sample_fwd(img, flow):
    img, flow = _contig(img, flow)
    return _impl.grid_sample_fwd(img, flow)


def grid_sample_bwd(img, flow, gout):
    img, flow, gout = _contig(img, flow, gout)
    return _impl.grid_sample_bwd(img, flow, gout)


def upsample2_fwd(x):
    (x,) = _contig(x)
    return _impl.upsample2_fwd(x)


def upsample2_bwd(g):
    (g,) = _contig(g)
    return _impl.upsample2_bwd(g)


def backends():
    """Mapping backend name -> kernel module for every importable backend."""
    found = {"numpy": _pykernels}
    if _compiled is not None:
        found["cython"] = _compiled
    else:
        try:
            from . import _ckernels
            found["cython"] = _ckernels
        except ImportError:
            pass
    return found
