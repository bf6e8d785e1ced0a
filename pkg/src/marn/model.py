"""Network definition: reduction, summarization, query encoding, attention.

The model scores every proposal on a (start, scale) grid by how well its
summarized features explain the query.  A video branch reduces per-unit
features with a temporal 1-D convolution, gathers N interpolated rows per
proposal, and summarizes them to one vector per grid cell.  The query is
encoded by a single forward GRU.  Cellwise fusion (feature concat with the
tiled query vector) feeds a small conv stack whose scalar logits turn into a
masked softmax attention map; the attention-weighted sum of the pre-fusion
cell features is the branch's global feature, which the reconstruction
decoder must turn back into the query.

Two branches exist: the proposal branch over the configured scales, and an
optional clip branch over scale-1 cells with its own parameters.  Only the
reconstruction decoder is shared between them.
"""

import math
from dataclasses import dataclass, fields
from functools import lru_cache
from typing import Optional

import numpy as np

from marn import autodiff as ad
from marn.autodiff import Tensor
from marn.data import QueryTokens, VideoFeatures
from marn.errors import ConfigError, DataError
from marn.sampling import ProposalGrid, SamplingMap, build_sampling_map

ATTN_KERNELS = ("1x1", "3x3", "3x3_stacked2")
TEMPORAL_REPS = ("conv3d", "avgpool", "maxpool", "recurrent")
BRANCHES = ("proposal", "clip")

# Aliases accepted in config files for the loss/ensemble weights.
_CONFIG_ALIASES = {"λ": "clip_loss_weight", "ε": "ensemble_weight"}


@dataclass(frozen=True)
class ModelConfig:
    T: int
    scales: tuple
    d_v: int
    vocab_size: int
    N: int = 4
    r: int = 8
    d_vp: int = 256
    d_vc: int = 256
    d_a: int = 256
    d_q: int = 256
    d_w: int = 300
    d_dec: int = 256
    attn_kernel: str = "3x3"
    conv1d_kernel: int = 3
    temporal_rep: str = "conv3d"
    multilevel_train: bool = True
    multilevel_infer: bool = True
    clip_loss_weight: float = 1.0
    ensemble_weight: float = 0.1
    max_query_len: int = 20
    stride_rule: str = "dense"

    def __post_init__(self):
        object.__setattr__(self, "scales", tuple(int(s) for s in self.scales))
        # grid construction performs the T/scales/N/stride_rule checks
        ProposalGrid(self.T, self.scales, self.N, self.stride_rule)
        dims = {
            "d_v": self.d_v, "r": self.r, "d_vp": self.d_vp, "d_vc": self.d_vc,
            "d_a": self.d_a, "d_q": self.d_q, "d_w": self.d_w, "d_dec": self.d_dec,
        }
        for name, value in dims.items():
            if value < 1:
                raise ConfigError(f"{name} must be >= 1, got {value}")
        if self.d_v % self.r != 0:
            raise ConfigError(f"r={self.r} must divide d_v={self.d_v}")
        if self.vocab_size < 4:
            raise ConfigError("vocab_size must cover the 4 reserved tokens")
        if self.max_query_len < 2:
            raise ConfigError("max_query_len must be >= 2 (one word plus EOS)")
        if self.attn_kernel not in ATTN_KERNELS:
            raise ConfigError(f"attn_kernel must be one of {ATTN_KERNELS}, got {self.attn_kernel!r}")
        if self.conv1d_kernel not in (1, 3):
            raise ConfigError(f"conv1d_kernel must be 1 or 3, got {self.conv1d_kernel}")
        if self.temporal_rep not in TEMPORAL_REPS:
            raise ConfigError(f"temporal_rep must be one of {TEMPORAL_REPS}, got {self.temporal_rep!r}")
        if self.clip_loss_weight < 0:
            raise ConfigError("clip_loss_weight must be >= 0")
        if self.ensemble_weight < 0:
            raise ConfigError("ensemble_weight must be >= 0")
        if self.multilevel_infer and not self.multilevel_train:
            raise ConfigError("multilevel_infer requires multilevel_train")
        if self.multilevel_train and self.d_vp != self.d_vc:
            raise ConfigError(
                "the shared decoder consumes both branches' global features, "
                f"so d_vp ({self.d_vp}) must equal d_vc ({self.d_vc})"
            )

    @property
    def reduced_dim(self) -> int:
        return self.d_v // self.r

    @property
    def S(self) -> int:
        return len(self.scales)

    def to_dict(self) -> dict:
        out = {}
        for f in fields(self):
            value = getattr(self, f.name)
            out[f.name] = list(value) if f.name == "scales" else value
        return out

    @classmethod
    def from_dict(cls, obj) -> "ModelConfig":
        if not isinstance(obj, dict):
            raise ConfigError(f"model config must be an object, got {type(obj).__name__}")
        obj = dict(obj)
        for alias, target in _CONFIG_ALIASES.items():
            if alias in obj:
                if target in obj:
                    raise ConfigError(f"config sets both {alias!r} and {target!r}")
                obj[target] = obj.pop(alias)
        known = {f.name for f in fields(cls)}
        unknown = sorted(set(obj) - known)
        if unknown:
            raise ConfigError(f"unknown model config key(s): {', '.join(unknown)}")
        required = ("T", "scales", "d_v", "vocab_size")
        missing = [k for k in required if k not in obj]
        if missing:
            raise ConfigError(f"model config missing key(s): {', '.join(missing)}")
        return cls(**obj)


def charades_config(vocab_size: int, d_v: int = 4096) -> ModelConfig:
    """Six fixed scales on a 32-unit grid, dense starts."""
    return ModelConfig(
        T=32, scales=(6, 7, 8, 10, 11, 12), d_v=d_v, vocab_size=vocab_size,
        N=4, r=8, ensemble_weight=0.1, stride_rule="dense",
    )


def activitynet_config(vocab_size: int, d_v: int = 4096) -> ModelConfig:
    """All 64 scales on a 128-unit grid, quarter-scale start stride."""
    return ModelConfig(
        T=128, scales=tuple(range(1, 65)), d_v=d_v, vocab_size=vocab_size,
        N=4, r=32, ensemble_weight=0.3, stride_rule="sparse_quarter",
    )


def synthetic_config(vocab_size: int = 30, d_v: int = 30) -> ModelConfig:
    """Small dimensions sized for the synthetic desk-scale dataset."""
    return ModelConfig(
        T=32, scales=(4, 5, 6, 7, 8), d_v=d_v, vocab_size=vocab_size,
        N=4, r=2, d_vp=24, d_vc=24, d_a=24, d_q=16, d_w=vocab_size, d_dec=24,
        max_query_len=8, stride_rule="dense",
    )


@lru_cache(maxsize=None)
def _cached_grid(T, scales, N, stride_rule) -> ProposalGrid:
    return ProposalGrid(T, scales, N, stride_rule)


@lru_cache(maxsize=None)
def _cached_map(T, scales, N, stride_rule) -> SamplingMap:
    return build_sampling_map(_cached_grid(T, scales, N, stride_rule))


def proposal_grid(config: ModelConfig) -> ProposalGrid:
    return _cached_grid(config.T, config.scales, config.N, config.stride_rule)


def proposal_sampling_map(config: ModelConfig) -> SamplingMap:
    return _cached_map(config.T, config.scales, config.N, config.stride_rule)


def clip_grid(config: ModelConfig) -> ProposalGrid:
    return _cached_grid(config.T, (1,), config.N, "dense")


def clip_sampling_map(config: ModelConfig) -> SamplingMap:
    return _cached_map(config.T, (1,), config.N, "dense")


@dataclass
class AttentionMap:
    branch: str
    scores: np.ndarray  # (T, S); S = 1 for the clip branch
    mask: np.ndarray  # bool (T, S)


@dataclass
class GlobalFeature:
    branch: str
    vec: np.ndarray


@dataclass
class ForwardOutputs:
    """Graph tensors from one forward pass; clip fields may be None."""

    f_vp: Tensor  # (T, S, d_vp)
    att_p: Tensor  # (T, S)
    logits_p: Tensor  # (T, S) pre-softmax
    f_p_global: Tensor  # (d_vp,)
    f_q: Tensor  # (d_q,)
    f_vc: Optional[Tensor] = None  # (T, 1, d_vc)
    att_c: Optional[Tensor] = None  # (T, 1)
    logits_c: Optional[Tensor] = None
    f_c_global: Optional[Tensor] = None

    def attention_map(self, branch: str, mask: np.ndarray) -> AttentionMap:
        scores = self.att_p if branch == "proposal" else self.att_c
        if scores is None:
            raise ValueError(f"branch {branch!r} was not computed")
        return AttentionMap(branch, np.array(scores.data), np.array(mask))


def parameter_shapes(config: ModelConfig) -> dict:
    """Fixed name -> shape enumeration; also the checkpoint tensor order."""
    d_r = config.reduced_dim
    shapes = {}

    def temporal_rep(prefix, out_dim):
        v = config.temporal_rep
        if v == "conv3d":
            shapes[prefix + "conv3d_w"] = (config.N, d_r, out_dim)
            shapes[prefix + "conv3d_b"] = (out_dim,)
        elif v in ("avgpool", "maxpool"):
            shapes[prefix + "pool_w"] = (d_r, out_dim)
            shapes[prefix + "pool_b"] = (out_dim,)
        else:  # recurrent
            shapes[prefix + "rec_w"] = (d_r, 4 * out_dim)
            shapes[prefix + "rec_u"] = (out_dim, 4 * out_dim)
            shapes[prefix + "rec_b"] = (4 * out_dim,)

    k = config.conv1d_kernel
    shapes["p_conv1d_w"] = (k, config.d_v, d_r)
    shapes["p_conv1d_b"] = (d_r,)
    temporal_rep("p_", config.d_vp)
    shapes["gru_w"] = (config.d_w, 3 * config.d_q)
    shapes["gru_u"] = (config.d_q, 3 * config.d_q)
    shapes["gru_b"] = (3 * config.d_q,)
    shapes["p_attn1_w"] = (3, 3, config.d_vp + config.d_q, config.d_a)
    shapes["p_attn1_b"] = (config.d_a,)
    if config.attn_kernel == "1x1":
        shapes["p_attn2_w"] = (1, 1, config.d_a, 1)
        shapes["p_attn2_b"] = (1,)
    elif config.attn_kernel == "3x3":
        shapes["p_attn2_w"] = (3, 3, config.d_a, 1)
        shapes["p_attn2_b"] = (1,)
    else:  # 3x3_stacked2
        shapes["p_attn2_w"] = (3, 3, config.d_a, config.d_a)
        shapes["p_attn2_b"] = (config.d_a,)
        shapes["p_attn3_w"] = (3, 3, config.d_a, 1)
        shapes["p_attn3_b"] = (1,)
    if config.multilevel_train:
        shapes["c_conv1d_w"] = (k, config.d_v, d_r)
        shapes["c_conv1d_b"] = (d_r,)
        temporal_rep("c_", config.d_vc)
        shapes["c_attn_w"] = (1, 1, config.d_vc + config.d_q, 1)
        shapes["c_attn_b"] = (1,)
    d_in = config.d_vp + config.d_dec + config.d_w
    shapes["dec_w"] = (d_in, 4 * config.d_dec)
    shapes["dec_u"] = (config.d_dec, 4 * config.d_dec)
    shapes["dec_b"] = (4 * config.d_dec,)
    shapes["dec_out_w"] = (config.d_dec, config.vocab_size)
    shapes["dec_out_b"] = (config.vocab_size,)
    return shapes


class ModelParams:
    """All trainable tensors, keyed by the fixed enumeration order."""

    def __init__(self, config: ModelConfig, tensors: dict):
        expected = parameter_shapes(config)
        if list(tensors) != list(expected):
            raise ConfigError("parameter names do not match the config enumeration")
        for name, tensor in tensors.items():
            if tensor.data.shape != expected[name]:
                raise ConfigError(
                    f"parameter {name}: shape {tensor.data.shape} != expected {expected[name]}"
                )
            if not np.isfinite(tensor.data).all():
                raise ConfigError(f"parameter {name} holds non-finite values")
        self.config = config
        self.tensors = tensors

    def __getitem__(self, name: str) -> Tensor:
        return self.tensors[name]

    def names(self) -> list:
        return list(self.tensors)

    def items(self):
        return self.tensors.items()

    def zero_grad(self) -> None:
        for tensor in self.tensors.values():
            tensor.zero_grad()

    def quantize_float32(self) -> None:
        """Round every tensor to float32 so checkpoints round-trip exactly."""
        for tensor in self.tensors.values():
            tensor.data = tensor.data.astype(np.float32).astype(np.float64)


def init_params(config: ModelConfig, seed: int) -> ModelParams:
    """Uniform(-a, a) with a = sqrt(6 / (fan_in + fan_out)); zero biases.

    fan_in is the product of all axes but the last, fan_out the last axis.
    Draws happen in enumeration order from a dedicated seeded generator, so
    initialization is bit-reproducible.
    """
    rng = np.random.default_rng([int(seed), 11])
    tensors = {}
    for name, shape in parameter_shapes(config).items():
        if len(shape) == 1:
            data = np.zeros(shape)
        else:
            fan_in = int(np.prod(shape[:-1]))
            fan_out = int(shape[-1])
            a = math.sqrt(6.0 / (fan_in + fan_out))
            data = rng.uniform(-a, a, size=shape)
        tensors[name] = Tensor(data, requires_grad=True)
    return ModelParams(config, tensors)


def lstm_cell(x, h, c, w, u, b, d: int):
    """One LSTM step on a (B, d_in) batch; gate packing [i, f, g, o]."""
    gates = ad.add(ad.add(ad.matmul(x, w), ad.matmul(h, u)), b)
    i, f, g, o = ad.split_last(gates, [d, d, d, d])
    c_next = ad.add(ad.mul(ad.sigmoid(f), c), ad.mul(ad.sigmoid(i), ad.tanh(g)))
    h_next = ad.mul(ad.sigmoid(o), ad.tanh(c_next))
    return h_next, c_next


def reduce_dim(features: Tensor, params: ModelParams, prefix: str) -> Tensor:
    """Temporal conv (same padding) + ReLU: (T, d_v) -> (T, d_v/r)."""
    return ad.relu(ad.conv1d_same(features, params[prefix + "conv1d_w"], params[prefix + "conv1d_b"]))


def summarize_proposals(sampled: Tensor, params: ModelParams, config: ModelConfig,
                        prefix: str, out_dim: int, valid: np.ndarray) -> Tensor:
    """Collapse the N sample rows of each cell: (T, S, N, d_r) -> (T, S, out).

    Invalid cells are forced to exact zeros (the summarizer's bias would
    otherwise leak through them).
    """
    t, s, n, d_r = sampled.data.shape
    mask = valid.astype(np.float64)[:, :, None]
    v = config.temporal_rep
    if v == "conv3d":
        w, b = params[prefix + "conv3d_w"], params[prefix + "conv3d_b"]
        flat = ad.reshape(sampled, (t * s, n * d_r))
        y = ad.relu(ad.add(ad.matmul(flat, ad.reshape(w, (n * d_r, out_dim))), b))
    elif v in ("avgpool", "maxpool"):
        if v == "avgpool":
            pooled = ad.mul(ad.sum_(sampled, axis=2), 1.0 / n)
        else:
            pooled = ad.max_over_axis(sampled, axis=2)
        flat = ad.reshape(pooled, (t * s, d_r))
        y = ad.relu(ad.add(ad.matmul(flat, params[prefix + "pool_w"]), params[prefix + "pool_b"]))
    elif v == "recurrent":
        w, u, b = params[prefix + "rec_w"], params[prefix + "rec_u"], params[prefix + "rec_b"]
        h = Tensor(np.zeros((t * s, out_dim)))
        c = Tensor(np.zeros((t * s, out_dim)))
        for step in range(n):
            x = ad.reshape(ad.slice_axis(sampled, 2, step, step + 1), (t * s, d_r))
            h, c = lstm_cell(x, h, c, w, u, b, out_dim)
        y = h
    else:
        raise ConfigError(f"unknown temporal_rep {v!r}")
    return ad.mul(ad.reshape(y, (t, s, out_dim)), mask)


def encode_query_global(embeddings: Tensor, params: ModelParams, config: ModelConfig) -> Tensor:
    """Single forward GRU over (M, d_w) word embeddings; final state (d_q,)."""
    d_q = config.d_q
    m_steps = embeddings.data.shape[0]
    if m_steps < 1:
        raise ValueError("query must hold at least one token")
    w, u, b = params["gru_w"], params["gru_u"], params["gru_b"]
    u_zr = ad.slice_axis(u, 1, 0, 2 * d_q)
    u_n = ad.slice_axis(u, 1, 2 * d_q, 3 * d_q)
    h = Tensor(np.zeros((1, d_q)))
    for m in range(m_steps):
        x = ad.slice_axis(embeddings, 0, m, m + 1)
        xg = ad.add(ad.matmul(x, w), b)
        xz, xr, xn = ad.split_last(xg, [d_q, d_q, d_q])
        hz, hr = ad.split_last(ad.matmul(h, u_zr), [d_q, d_q])
        z = ad.sigmoid(ad.add(xz, hz))
        r = ad.sigmoid(ad.add(xr, hr))
        cand = ad.tanh(ad.add(xn, ad.matmul(ad.mul(r, h), u_n)))
        h = ad.add(ad.mul(z, h), ad.mul(ad.add(ad.neg(z), 1.0), cand))
    return ad.reshape(h, (d_q,))


def compute_attention(branch: str, features: Tensor, f_q: Tensor, params: ModelParams,
                      config: ModelConfig, valid: np.ndarray):
    """Fused conv attention over the grid; returns (attention, logits).

    Proposal branch: two convs with a ReLU between (the second one sized by
    attn_kernel, with an extra stacked layer for 3x3_stacked2).  Clip branch:
    a single 1x1 conv on the fused features.
    """
    if branch not in BRANCHES:
        raise ValueError(f"branch must be one of {BRANCHES}")
    t, s = features.data.shape[:2]
    tiled = ad.broadcast_cells(f_q, (t, s))
    fused = ad.concat([features, tiled], axis=2)
    if branch == "proposal":
        h1 = ad.relu(ad.conv2d_same(fused, params["p_attn1_w"], params["p_attn1_b"]))
        if config.attn_kernel == "3x3_stacked2":
            h2 = ad.relu(ad.conv2d_same(h1, params["p_attn2_w"], params["p_attn2_b"]))
            logits = ad.conv2d_same(h2, params["p_attn3_w"], params["p_attn3_b"])
        else:
            logits = ad.conv2d_same(h1, params["p_attn2_w"], params["p_attn2_b"])
    else:
        logits = ad.conv2d_same(fused, params["c_attn_w"], params["c_attn_b"])
    logits = ad.reshape(logits, (t, s))
    att = ad.masked_softmax(logits, valid)
    return att, logits


def attend_global(features: Tensor, att: Tensor) -> Tensor:
    """Attention-weighted sum of per-cell features -> (d,)."""
    return ad.weighted_cell_sum(att, features)


def _branch(video: Tensor, f_q: Tensor, params: ModelParams, config: ModelConfig, branch: str):
    if branch == "proposal":
        prefix, out_dim = "p_", config.d_vp
        smap = proposal_sampling_map(config)
    else:
        prefix, out_dim = "c_", config.d_vc
        smap = clip_sampling_map(config)
    reduced = reduce_dim(video, params, prefix)
    sampled = ad.sample_cells(
        reduced, smap.idx_lo, smap.idx_hi, smap.w_lo, smap.w_hi, smap.grid_shape
    )
    f_v = summarize_proposals(sampled, params, config, prefix, out_dim, smap.valid)
    att, logits = compute_attention(branch, f_v, f_q, params, config, smap.valid)
    f_global = attend_global(f_v, att)
    return f_v, att, logits, f_global


def forward(video, query: QueryTokens, params: ModelParams, config: ModelConfig) -> ForwardOutputs:
    """Run the proposal branch (and the clip branch when multilevel_train)."""
    data = video.data if isinstance(video, VideoFeatures) else np.asarray(video)
    if data.shape != (config.T, config.d_v):
        raise DataError(
            f"features have shape {data.shape}, config expects ({config.T}, {config.d_v})"
        )
    if query.M < 1:
        raise DataError("query holds no tokens")
    if query.embeddings.shape != (query.M, config.d_w):
        raise DataError(
            f"query embeddings have shape {query.embeddings.shape}, "
            f"config expects ({query.M}, {config.d_w})"
        )
    x = Tensor(np.asarray(data, dtype=np.float64))
    f_q = encode_query_global(Tensor(np.asarray(query.embeddings, dtype=np.float64)), params, config)
    f_vp, att_p, logits_p, f_p_global = _branch(x, f_q, params, config, "proposal")
    out = ForwardOutputs(
        f_vp=f_vp, att_p=att_p, logits_p=logits_p, f_p_global=f_p_global, f_q=f_q
    )
    if config.multilevel_train:
        out.f_vc, out.att_c, out.logits_c, out.f_c_global = _branch(
            x, f_q, params, config, "clip"
        )
    return out
