"""Weakly-supervised temporal grounding of textual queries in videos.

The package trains a multi-level attentional reconstruction network: candidate
segments are enumerated on a (start, scale) proposal grid, represented through
a precomputed interpolation sampling map, scored by query-conditioned masked
attention, and supervised only by reconstructing the query text from the
attended global feature.  Inference ranks proposals directly by the learnt
attention scores, optionally refined by a clip-level branch.
"""

from marn.errors import ConfigError, DataError, MarnError, NumericError

__version__ = "0.1.0"

__all__ = ["MarnError", "ConfigError", "DataError", "NumericError", "__version__"]
