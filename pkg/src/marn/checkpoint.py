"""Checkpoint container: one file holding config, vocabulary, and tensors.

Layout (little-endian): magic ``MARNCKPT``, u32 version=1, u32 header length,
UTF-8 JSON header {"model": ..., "vocab_tokens": [...], "tensor_names":
[...]}, then one section per tensor in header order: u32 name length, name
bytes, u32 ndim, u32 dims, float32 row-major data.  Parameter tensors appear
in the fixed enumeration order, followed by the vocabulary embedding matrix.
"""

import json
import struct

import numpy as np

from marn.autodiff import Tensor
from marn.data import Vocabulary
from marn.errors import DataError
from marn.model import ModelConfig, ModelParams, parameter_shapes

CHECKPOINT_MAGIC = b"MARNCKPT"
CHECKPOINT_VERSION = 1
VOCAB_TENSOR = "vocab_embeddings"


def _pack_tensor(name: str, data: np.ndarray) -> bytes:
    name_b = name.encode("utf-8")
    arr = np.ascontiguousarray(data, dtype="<f4")
    parts = [struct.pack("<I", len(name_b)), name_b, struct.pack("<I", arr.ndim)]
    parts.append(struct.pack(f"<{arr.ndim}I", *arr.shape))
    parts.append(arr.tobytes())
    return b"".join(parts)


class _Reader:
    def __init__(self, blob: bytes, path: str):
        self.blob = blob
        self.path = path
        self.pos = 0

    def take(self, n: int) -> bytes:
        if self.pos + n > len(self.blob):
            raise DataError(f"checkpoint {self.path}: truncated")
        out = self.blob[self.pos : self.pos + n]
        self.pos += n
        return out

    def u32(self) -> int:
        return struct.unpack("<I", self.take(4))[0]


def save_checkpoint(path, params: ModelParams, vocab: Vocabulary) -> None:
    config = params.config
    if len(vocab.tokens) != config.vocab_size:
        raise ValueError(
            f"vocabulary size {len(vocab.tokens)} != config vocab_size {config.vocab_size}"
        )
    tensor_names = params.names() + [VOCAB_TENSOR]
    header = json.dumps(
        {
            "model": config.to_dict(),
            "vocab_tokens": vocab.tokens,
            "tensor_names": tensor_names,
        }
    ).encode("utf-8")
    with open(path, "wb") as fh:
        fh.write(CHECKPOINT_MAGIC)
        fh.write(struct.pack("<I", CHECKPOINT_VERSION))
        fh.write(struct.pack("<I", len(header)))
        fh.write(header)
        for name in params.names():
            fh.write(_pack_tensor(name, params[name].data))
        fh.write(_pack_tensor(VOCAB_TENSOR, vocab.embeddings))


def load_checkpoint(path):
    """Read a checkpoint; returns (params, config, vocab)."""
    path = str(path)
    try:
        with open(path, "rb") as fh:
            blob = fh.read()
    except OSError as exc:
        raise DataError(f"cannot read checkpoint {path}: {exc}") from exc
    reader = _Reader(blob, path)
    if reader.take(len(CHECKPOINT_MAGIC)) != CHECKPOINT_MAGIC:
        raise DataError(f"checkpoint {path}: bad magic")
    version = reader.u32()
    if version != CHECKPOINT_VERSION:
        raise DataError(f"checkpoint {path}: unsupported version {version}")
    try:
        header = json.loads(reader.take(reader.u32()).decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise DataError(f"checkpoint {path}: invalid header ({exc})") from exc
    for key in ("model", "vocab_tokens", "tensor_names"):
        if key not in header:
            raise DataError(f"checkpoint {path}: header missing {key!r}")
    config = ModelConfig.from_dict(header["model"])
    tensors = {}
    for expected_name in header["tensor_names"]:
        name = reader.take(reader.u32()).decode("utf-8")
        if name != expected_name:
            raise DataError(
                f"checkpoint {path}: tensor {name!r} where {expected_name!r} expected"
            )
        ndim = reader.u32()
        shape = tuple(reader.u32() for _ in range(ndim))
        count = int(np.prod(shape, dtype=np.int64)) if shape else 1
        data = np.frombuffer(reader.take(4 * count), dtype="<f4").reshape(shape)
        if not np.isfinite(data).all():
            raise DataError(f"checkpoint {path}: tensor {name!r} holds non-finite values")
        tensors[name] = data.astype(np.float64)
    if reader.pos != len(blob):
        raise DataError(f"checkpoint {path}: {len(blob) - reader.pos} trailing bytes")
    expected = list(parameter_shapes(config)) + [VOCAB_TENSOR]
    if header["tensor_names"] != expected:
        raise DataError(f"checkpoint {path}: tensor list does not match the config enumeration")
    if VOCAB_TENSOR not in tensors:
        raise DataError(f"checkpoint {path}: missing {VOCAB_TENSOR}")
    embeddings = tensors.pop(VOCAB_TENSOR)
    tokens = [str(t) for t in header["vocab_tokens"]]
    if embeddings.shape[0] != len(tokens):
        raise DataError(
            f"checkpoint {path}: {embeddings.shape[0]} embedding rows for {len(tokens)} tokens"
        )
    if len(tokens) != config.vocab_size:
        raise DataError(
            f"checkpoint {path}: {len(tokens)} vocab tokens but config vocab_size "
            f"{config.vocab_size}"
        )
    vocab = Vocabulary(
        tokens=tokens,
        index={t: i for i, t in enumerate(tokens)},
        embedding_dim=embeddings.shape[1],
        embeddings=embeddings,
    )
    params = ModelParams(
        config, {name: Tensor(data, requires_grad=True) for name, data in tensors.items()}
    )
    return params, config, vocab
