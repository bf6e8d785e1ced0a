"""Data ingestion: feature files, manifests, vocabularies, synthetic sets.

File formats
------------
Feature file (binary, little-endian): magic ``MARNFEAT`` (8 bytes),
u32 version=1, u32 n_units, u32 dim, f32 unit_seconds, then
``n_units * dim`` float32 values in row-major order.

Manifest: UTF-8 JSON-lines, one object per line with keys ``video_id``,
``feature_path``, ``sentence`` and an optional ``gt: [t_s, t_e]`` in seconds.
Relative feature paths are resolved against the manifest's directory.

Embedding table: text, one ``word v1 ... v_dw`` per line.
"""

import json
import math
import os
import string
import struct
from dataclasses import dataclass, field
from typing import Optional

import numpy as np

from marn.errors import DataError

FEATURE_MAGIC = b"MARNFEAT"
FEATURE_VERSION = 1
_HEADER = struct.Struct("<8sIIIf")

PAD_TOKEN = "<pad>"
BOS_TOKEN = "<bos>"
EOS_TOKEN = "<eos>"
UNK_TOKEN = "<unk>"
RESERVED_TOKENS = (PAD_TOKEN, BOS_TOKEN, EOS_TOKEN, UNK_TOKEN)
PAD_ID, BOS_ID, EOS_ID, UNK_ID = 0, 1, 2, 3

# Standard deviation of the synthetic background noise; the planted
# bag-of-words signature adds 1.0 per token on top of it.
SYNTHETIC_NOISE_STD = 0.1
SYNTHETIC_SENTENCE_LEN = 3


@dataclass
class RawVideoFeatures:
    """Per-unit features exactly as stored on disk (float32)."""

    video_id: str
    n_units: int
    dim: int
    data: np.ndarray
    unit_seconds: float


@dataclass
class VideoFeatures:
    """Features resampled to the model's temporal length (float64)."""

    video_id: str
    T: int
    dim: int
    data: np.ndarray
    unit_seconds: float


@dataclass
class Vocabulary:
    tokens: list
    index: dict
    embedding_dim: int
    embeddings: np.ndarray

    def id_of(self, token: str) -> int:
        return self.index.get(token, UNK_ID)


@dataclass
class QueryTokens:
    ids: np.ndarray  # (max_len,) int64, EOS-terminated then PAD
    M: int  # effective length including EOS
    embeddings: np.ndarray  # (M, d_w)


@dataclass
class ManifestEntry:
    video_id: str
    feature_path: str
    sentence: str
    gt_interval: Optional[tuple] = None


@dataclass
class DatasetManifest:
    entries: list = field(default_factory=list)

    def __len__(self):
        return len(self.entries)


@dataclass
class SyntheticSpec:
    n_videos: int
    T: int
    d_v: int
    vocab_size: int
    seed: int


def load_feature_file(path) -> RawVideoFeatures:
    path = os.fspath(path)
    try:
        with open(path, "rb") as fh:
            blob = fh.read()
    except OSError as exc:
        raise DataError(f"cannot read feature file {path}: {exc}") from exc
    if len(blob) < _HEADER.size:
        raise DataError(f"feature file {path}: truncated header")
    magic, version, n_units, dim, unit_seconds = _HEADER.unpack_from(blob)
    if magic != FEATURE_MAGIC:
        raise DataError(f"feature file {path}: bad magic {magic!r}")
    if version != FEATURE_VERSION:
        raise DataError(f"feature file {path}: unsupported version {version}")
    if n_units < 1 or dim < 1:
        raise DataError(f"feature file {path}: invalid shape {n_units}x{dim}")
    expected = _HEADER.size + 4 * n_units * dim
    if len(blob) != expected:
        raise DataError(
            f"feature file {path}: declares {n_units}x{dim} "
            f"({expected} bytes) but holds {len(blob)} bytes"
        )
    data = np.frombuffer(blob, dtype="<f4", offset=_HEADER.size).reshape(n_units, dim)
    if not np.isfinite(data).all():
        raise DataError(f"feature file {path}: non-finite values")
    if not (math.isfinite(unit_seconds) and unit_seconds > 0):
        raise DataError(f"feature file {path}: invalid unit_seconds {unit_seconds}")
    video_id = os.path.splitext(os.path.basename(path))[0]
    return RawVideoFeatures(video_id, n_units, dim, data.copy(), float(unit_seconds))


def write_feature_file(path, raw: RawVideoFeatures) -> None:
    data = np.ascontiguousarray(raw.data, dtype="<f4")
    if data.shape != (raw.n_units, raw.dim):
        raise ValueError("feature data shape disagrees with declared n_units/dim")
    header = _HEADER.pack(
        FEATURE_MAGIC, FEATURE_VERSION, raw.n_units, raw.dim, float(np.float32(raw.unit_seconds))
    )
    with open(path, "wb") as fh:
        fh.write(header)
        fh.write(data.tobytes())


def resample_features(raw: RawVideoFeatures, T: int) -> VideoFeatures:
    """Resample raw units to exactly T rows.

    T <= n_units: partition the units into T contiguous bins whose sizes
    differ by at most one and mean-pool each bin.  T > n_units: linearly
    interpolate rows at uniformly spaced fractional positions.
    """
    if T < 1:
        raise ValueError("T must be >= 1")
    n = raw.n_units
    src = np.asarray(raw.data, dtype=np.float64)
    if T <= n:
        bounds = (np.arange(T + 1) * n) // T
        out = np.empty((T, raw.dim))
        for j in range(T):
            out[j] = src[bounds[j] : bounds[j + 1]].mean(axis=0)
    elif n == 1:
        out = np.repeat(src, T, axis=0)
    else:
        pos = np.arange(T) * (n - 1) / (T - 1)
        lo = np.floor(pos).astype(np.int64)
        hi = np.minimum(lo + 1, n - 1)
        frac = (pos - lo)[:, None]
        out = (1.0 - frac) * src[lo] + frac * src[hi]
    unit_seconds = n * raw.unit_seconds / T
    return VideoFeatures(raw.video_id, T, raw.dim, out, unit_seconds)


def load_manifest(path) -> DatasetManifest:
    path = os.fspath(path)
    entries = []
    try:
        with open(path, "r", encoding="utf-8") as fh:
            lines = fh.readlines()
    except OSError as exc:
        raise DataError(f"cannot read manifest {path}: {exc}") from exc
    for lineno, line in enumerate(lines, start=1):
        line = line.strip()
        if not line:
            continue
        try:
            obj = json.loads(line)
        except json.JSONDecodeError as exc:
            raise DataError(f"{path}:{lineno}: invalid JSON ({exc.msg})") from exc
        if not isinstance(obj, dict):
            raise DataError(f"{path}:{lineno}: entry is not an object")
        missing = [k for k in ("video_id", "feature_path", "sentence") if k not in obj]
        if missing:
            raise DataError(f"{path}:{lineno}: missing field(s) {', '.join(missing)}")
        gt = None
        if "gt" in obj and obj["gt"] is not None:
            raw_gt = obj["gt"]
            if not (isinstance(raw_gt, (list, tuple)) and len(raw_gt) == 2):
                raise DataError(f"{path}:{lineno}: gt must be [t_s, t_e]")
            t_s, t_e = float(raw_gt[0]), float(raw_gt[1])
            if not (0.0 <= t_s < t_e):
                raise DataError(f"{path}:{lineno}: gt requires 0 <= t_s < t_e, got {raw_gt}")
            gt = (t_s, t_e)
        entries.append(
            ManifestEntry(str(obj["video_id"]), str(obj["feature_path"]), str(obj["sentence"]), gt)
        )
    return DatasetManifest(entries)


def write_manifest(path, manifest: DatasetManifest) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        for e in manifest.entries:
            obj = {"video_id": e.video_id, "feature_path": e.feature_path, "sentence": e.sentence}
            if e.gt_interval is not None:
                obj["gt"] = [e.gt_interval[0], e.gt_interval[1]]
            fh.write(json.dumps(obj) + "\n")


def resolve_feature_path(manifest_path, feature_path) -> str:
    if os.path.isabs(feature_path):
        return feature_path
    return os.path.join(os.path.dirname(os.path.abspath(os.fspath(manifest_path))), feature_path)


def load_embedding_table(path) -> dict:
    path = os.fspath(path)
    table = {}
    dim = None
    try:
        with open(path, "r", encoding="utf-8") as fh:
            lines = fh.readlines()
    except OSError as exc:
        raise DataError(f"cannot read embedding table {path}: {exc}") from exc
    for lineno, line in enumerate(lines, start=1):
        parts = line.split()
        if not parts:
            continue
        word, values = parts[0], parts[1:]
        if not values:
            raise DataError(f"{path}:{lineno}: no vector for {word!r}")
        try:
            vec = np.array([float(v) for v in values], dtype=np.float64)
        except ValueError as exc:
            raise DataError(f"{path}:{lineno}: non-numeric vector component") from exc
        if dim is None:
            dim = vec.size
        elif vec.size != dim:
            raise DataError(f"{path}:{lineno}: vector length {vec.size} != {dim}")
        table[word] = vec
    if not table:
        raise DataError(f"embedding table {path} is empty")
    return table


def write_embedding_table(path, vocab: Vocabulary) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        for token in vocab.tokens:
            if token in RESERVED_TOKENS:
                continue
            vec = vocab.embeddings[vocab.index[token]]
            fh.write(token + " " + " ".join(repr(float(v)) for v in vec) + "\n")


def tokenize(sentence: str) -> list:
    """Lowercase, split on whitespace, strip edge punctuation from each chunk."""
    tokens = []
    for chunk in sentence.lower().split():
        chunk = chunk.strip(string.punctuation)
        if chunk:
            tokens.append(chunk)
    return tokens


def build_vocabulary(manifest: DatasetManifest, embedding_table: dict, min_count: int = 1) -> Vocabulary:
    """Keep corpus tokens with count >= min_count that have embeddings.

    Everything else maps to UNK, whose embedding is the mean of the dropped
    tokens' vectors (zeros if no dropped token has a vector).  PAD/BOS/EOS get
    zero vectors.
    """
    if min_count < 1:
        raise ValueError("min_count must be >= 1")
    if not manifest.entries:
        raise DataError("cannot build a vocabulary from an empty manifest")
    counts = {}
    for entry in manifest.entries:
        for token in tokenize(entry.sentence):
            counts[token] = counts.get(token, 0) + 1
    kept = [t for t, c in counts.items() if c >= min_count and t in embedding_table]
    kept.sort(key=lambda t: (-counts[t], t))
    kept_set = set(kept)
    dropped_vecs = [
        embedding_table[t] for t in counts if t not in kept_set and t in embedding_table
    ]
    dim = len(next(iter(embedding_table.values())))
    n_tokens = len(RESERVED_TOKENS) + len(kept)
    embeddings = np.zeros((n_tokens, dim))
    if dropped_vecs:
        embeddings[UNK_ID] = np.mean(dropped_vecs, axis=0)
    tokens = list(RESERVED_TOKENS) + kept
    for i, token in enumerate(kept):
        embeddings[len(RESERVED_TOKENS) + i] = embedding_table[token]
    index = {t: i for i, t in enumerate(tokens)}
    return Vocabulary(tokens, index, dim, embeddings)


def encode_query(sentence: str, vocab: Vocabulary, max_len: int = 20) -> QueryTokens:
    """Tokenize and encode a sentence, appending EOS and padding to max_len.

    Sentences longer than max_len - 1 words are truncated so EOS is always the
    last effective token.
    """
    if max_len < 2:
        raise ValueError("max_len must be >= 2")
    words = tokenize(sentence)
    if not words:
        raise DataError(f"sentence {sentence!r} is empty after tokenization")
    words = words[: max_len - 1]
    ids = np.full(max_len, PAD_ID, dtype=np.int64)
    for i, w in enumerate(words):
        ids[i] = vocab.id_of(w)
    m = len(words) + 1
    ids[m - 1] = EOS_ID
    embeddings = vocab.embeddings[ids[:m]]
    return QueryTokens(ids=ids, M=m, embeddings=np.array(embeddings, dtype=np.float64))


def detokenize(query: QueryTokens, vocab: Vocabulary) -> str:
    return " ".join(vocab.tokens[i] for i in query.ids[: query.M - 1])


def synthetic_vocabulary(vocab_size: int) -> Vocabulary:
    """Reserved tokens plus word tokens w04.. with one-hot embeddings."""
    if vocab_size < len(RESERVED_TOKENS) + SYNTHETIC_SENTENCE_LEN:
        raise ValueError(
            f"vocab_size must be >= {len(RESERVED_TOKENS) + SYNTHETIC_SENTENCE_LEN} "
            "to plant a 3-token sentence"
        )
    tokens = list(RESERVED_TOKENS) + [f"w{k:02d}" for k in range(len(RESERVED_TOKENS), vocab_size)]
    index = {t: i for i, t in enumerate(tokens)}
    return Vocabulary(tokens, index, vocab_size, np.eye(vocab_size))


def generate_synthetic_dataset(spec: SyntheticSpec, out_dir, prefix: str = "synth"):
    """Write a deterministic synthetic grounding dataset under out_dir.

    Each video is background noise with one planted segment whose rows carry
    an additive bag-of-words signature of a random 3-token sentence (token id
    k bumps feature coordinate k by 1.0).  The sentence is reconstructible
    from segment rows but not from background, so attention must localize the
    segment to reconstruct the query.  Feature files land in
    ``out_dir/features/``; the returned manifest carries relative paths and
    ground-truth intervals in seconds (unit_seconds = 1).
    """
    if spec.n_videos < 1:
        raise ValueError("n_videos must be >= 1")
    if spec.d_v < spec.vocab_size:
        raise ValueError("d_v must be >= vocab_size so token coordinates exist")
    if spec.T < 8:
        raise ValueError("T must be >= 8 so segment lengths T/8..T/4 are nonempty")
    vocab = synthetic_vocabulary(spec.vocab_size)
    word_ids = np.arange(len(RESERVED_TOKENS), spec.vocab_size)
    rng = np.random.default_rng(spec.seed)
    feat_dir = os.path.join(os.fspath(out_dir), "features")
    os.makedirs(feat_dir, exist_ok=True)
    entries = []
    min_len, max_len = spec.T // 8, spec.T // 4
    for i in range(spec.n_videos):
        video_id = f"{prefix}{i:04d}"
        data = rng.normal(0.0, SYNTHETIC_NOISE_STD, size=(spec.T, spec.d_v))
        length = int(rng.integers(min_len, max_len + 1))
        start = int(rng.integers(0, spec.T - length + 1))
        planted = rng.choice(word_ids, size=SYNTHETIC_SENTENCE_LEN, replace=False)
        for token_id in planted:
            data[start : start + length, token_id] += 1.0
        raw = RawVideoFeatures(video_id, spec.T, spec.d_v, data.astype("<f4"), 1.0)
        write_feature_file(os.path.join(feat_dir, video_id + ".feat"), raw)
        sentence = " ".join(vocab.tokens[t] for t in planted)
        gt = (float(start), float(start + length))
        entries.append(ManifestEntry(video_id, f"features/{video_id}.feat", sentence, gt))
    return DatasetManifest(entries), vocab
