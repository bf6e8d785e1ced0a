import numpy as np

from marn.data import EOS_ID, PAD_ID, QueryTokens
from marn.model import ModelConfig


def tiny_config(**overrides) -> ModelConfig:
    """Smallest config exercising both branches; used by gradient tests."""
    base = dict(
        T=8, scales=(3, 5), d_v=16, vocab_size=12, N=4, r=2,
        d_vp=8, d_vc=8, d_a=8, d_q=8, d_w=12, d_dec=8,
        max_query_len=6, conv1d_kernel=3, attn_kernel="3x3",
        temporal_rep="conv3d", multilevel_train=True, multilevel_infer=True,
    )
    base.update(overrides)
    return ModelConfig(**base)


def make_query(rng, vocab_size: int, d_w: int, n_words: int, max_len: int):
    """Random query plus a matching embedding table (reserved rows zeroed
    except BOS)."""
    table = rng.normal(size=(vocab_size, d_w))
    table[PAD_ID] = 0.0
    ids = np.full(max_len, PAD_ID, dtype=np.int64)
    words = rng.integers(4, vocab_size, size=n_words)
    ids[:n_words] = words
    ids[n_words] = EOS_ID
    m = n_words + 1
    query = QueryTokens(ids=ids, M=m, embeddings=table[ids[:m]])
    return query, table
