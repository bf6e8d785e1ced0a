"""Hot numeric kernels with a compiled core and a pure-numpy fallback.

The interpolation sampling step runs once per forward pass and its scatter-add
adjoint once per backward pass, which makes the pair the innermost loop of
training.  A Cython extension implements both; if it is unavailable (or the
environment variable ``MARN_NO_EXT`` is set to a non-empty value) the numpy
reference implementation in :mod:`marn.kernels._reference` is used instead.
Both backends are exact to the last bit on the same inputs apart from
float summation order, and are compared in ``benchmarks/bench_sampling.py``.
"""

import os

from marn.kernels import _reference

_FORCED_FALLBACK = bool(os.environ.get("MARN_NO_EXT"))

if not _FORCED_FALLBACK:
    try:
        from marn.kernels import _core
    except ImportError:
        _core = None
else:
    _core = None

BACKEND = "compiled" if _core is not None else "numpy"


def sample_rows(features, idx_lo, idx_hi, w_lo, w_hi):
    """Gather-and-lerp: out[p] = w_lo[p]*features[idx_lo[p]] + w_hi[p]*features[idx_hi[p]].

    features is (T, d) float64; index/weight arrays are flat (P,) views of the
    proposal grid.  Rows with both weights zero come out exactly zero.
    """
    if _core is not None:
        return _core.sample_rows(features, idx_lo, idx_hi, w_lo, w_hi)
    return _reference.sample_rows(features, idx_lo, idx_hi, w_lo, w_hi)


def sample_rows_grad(grad_out, idx_lo, idx_hi, w_lo, w_hi, n_rows):
    """Adjoint of :func:`sample_rows`: scatter-add grad_out back onto (n_rows, d)."""
    if _core is not None:
        return _core.sample_rows_grad(grad_out, idx_lo, idx_hi, w_lo, w_hi, n_rows)
    return _reference.sample_rows_grad(grad_out, idx_lo, idx_hi, w_lo, w_hi, n_rows)
