"""Proposal grid enumeration and the sparse interpolation sampling map.

Proposals live on a (start index, scale) grid.  A cell (i, j) denotes the
window [i, i + scales[j]) in resampled units; it is valid when the window fits
inside the video and the stride rule admits the start.  Each valid proposal is
summarized from N points sampled at uniform fractional positions inside its
window via linear interpolation of the two neighbouring feature rows.  The
whole sampling step is one precomputed gather: conceptually a row-stochastic
map W of shape (T, S, N, T) applied to the (T, d) feature matrix, stored
sparsely as two indices and two weights per sample point.
"""

from dataclasses import dataclass, field
from typing import Optional

import numpy as np

from marn import kernels
from marn.errors import ConfigError

STRIDE_RULES = ("dense", "sparse_quarter")


def stride_for_scale(scale: int, stride_rule: str) -> int:
    if stride_rule == "dense":
        return 1
    if stride_rule == "sparse_quarter":
        return max(1, scale // 4)
    raise ConfigError(f"unknown stride_rule {stride_rule!r}")


@dataclass(frozen=True)
class ProposalGrid:
    T: int
    scales: tuple
    N: int
    stride_rule: str = "dense"

    def __post_init__(self):
        object.__setattr__(self, "scales", tuple(int(s) for s in self.scales))
        if not self.scales:
            raise ConfigError("scales must be non-empty")
        if any(s < 1 for s in self.scales):
            raise ConfigError(f"scales must be positive, got {self.scales}")
        if list(self.scales) != sorted(set(self.scales)):
            raise ConfigError(f"scales must be strictly increasing, got {self.scales}")
        if self.T < max(self.scales):
            raise ConfigError(f"T={self.T} is shorter than the largest scale {max(self.scales)}")
        if self.N < 2:
            raise ConfigError(f"N must be >= 2, got {self.N}")
        if self.stride_rule not in STRIDE_RULES:
            raise ConfigError(f"stride_rule must be one of {STRIDE_RULES}, got {self.stride_rule!r}")

    @property
    def S(self) -> int:
        return len(self.scales)

    def valid_mask(self) -> np.ndarray:
        """Boolean (T, S): which (start, scale) cells are real proposals."""
        mask = np.zeros((self.T, self.S), dtype=bool)
        for j, s in enumerate(self.scales):
            stride = stride_for_scale(s, self.stride_rule)
            starts = np.arange(0, self.T - s + 1, stride)
            mask[starts, j] = True
        return mask

    def n_valid(self) -> int:
        return int(self.valid_mask().sum())

    def enumerate_proposals(self):
        """Valid (i, j, scale) triples in start-major, then scale, order."""
        mask = self.valid_mask()
        out = []
        for i in range(self.T):
            for j in range(self.S):
                if mask[i, j]:
                    out.append((i, j, self.scales[j]))
        return out


def sampling_points(i: int, s: int, N: int) -> np.ndarray:
    """N fractional positions spread uniformly over window [i, i + s - 1]."""
    if N < 2:
        raise ValueError("N must be >= 2")
    if s < 1:
        raise ValueError("scale must be >= 1")
    return i + np.arange(N) * (s - 1) / (N - 1)


def proposal_interval(grid: ProposalGrid, i: int, j: int) -> tuple:
    """Window of cell (i, j) as (start, end) in resampled units."""
    if not (0 <= i < grid.T and 0 <= j < grid.S):
        raise ValueError(f"cell ({i}, {j}) outside the {grid.T}x{grid.S} grid")
    if not grid.valid_mask()[i, j]:
        raise ValueError(f"cell ({i}, {j}) is not a valid proposal")
    return float(i), float(i + grid.scales[j])


@dataclass
class SamplingMap:
    """Sparse two-tap interpolation map for all grid cells.

    Flat arrays have length T * S * N, ordered as the C-contiguous layout of a
    (T, S, N) array.  Invalid cells carry zero weights (and index 0), so the
    gather yields exact zeros there and scatters no gradient.
    """

    grid: ProposalGrid
    idx_lo: np.ndarray
    idx_hi: np.ndarray
    w_lo: np.ndarray
    w_hi: np.ndarray
    valid: np.ndarray
    _dense: Optional[np.ndarray] = field(default=None, repr=False)

    @property
    def grid_shape(self) -> tuple:
        return (self.grid.T, self.grid.S, self.grid.N)

    def dense(self) -> np.ndarray:
        """Materialize W as (T, S, N, T); rows of valid cells sum to 1."""
        if self._dense is None:
            t, s, n = self.grid_shape
            w = np.zeros((t * s * n, t))
            rows = np.arange(t * s * n)
            np.add.at(w, (rows, self.idx_lo), self.w_lo)
            np.add.at(w, (rows, self.idx_hi), self.w_hi)
            self._dense = w.reshape(t, s, n, t)
        return self._dense


def build_sampling_map(grid: ProposalGrid) -> SamplingMap:
    t, s_count, n = grid.T, grid.S, grid.N
    valid = grid.valid_mask()
    idx_lo = np.zeros((t, s_count, n), dtype=np.int64)
    idx_hi = np.zeros((t, s_count, n), dtype=np.int64)
    w_lo = np.zeros((t, s_count, n))
    w_hi = np.zeros((t, s_count, n))
    starts = np.arange(t)
    for j, scale in enumerate(grid.scales):
        pos = starts[:, None] + np.arange(n) * (scale - 1) / (n - 1)  # (T, N)
        lo = np.floor(pos).astype(np.int64)
        frac = pos - lo
        lo = np.minimum(lo, t - 1)
        hi = np.minimum(lo + 1, t - 1)
        col_valid = valid[:, j]
        idx_lo[col_valid, j] = lo[col_valid]
        idx_hi[col_valid, j] = hi[col_valid]
        w_lo[col_valid, j] = 1.0 - frac[col_valid]
        w_hi[col_valid, j] = frac[col_valid]
    return SamplingMap(
        grid=grid,
        idx_lo=np.ascontiguousarray(idx_lo.reshape(-1)),
        idx_hi=np.ascontiguousarray(idx_hi.reshape(-1)),
        w_lo=np.ascontiguousarray(w_lo.reshape(-1)),
        w_hi=np.ascontiguousarray(w_hi.reshape(-1)),
        valid=valid,
    )


def apply_sampling(smap: SamplingMap, features: np.ndarray) -> np.ndarray:
    """Gather (T, d) feature rows into (T, S, N, d) proposal samples."""
    features = np.ascontiguousarray(features, dtype=np.float64)
    if features.ndim != 2 or features.shape[0] != smap.grid.T:
        raise ValueError(f"features must be ({smap.grid.T}, d), got {features.shape}")
    flat = kernels.sample_rows(features, smap.idx_lo, smap.idx_hi, smap.w_lo, smap.w_hi)
    return flat.reshape(smap.grid_shape + (features.shape[1],))
