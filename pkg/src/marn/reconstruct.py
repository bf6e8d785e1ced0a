"""Query reconstruction: LSTM decoder, caption losses, combined objective.

Training never sees segment boundaries.  The only supervision is that the
attention-pooled global feature of a branch, fed into a word-by-word decoder
under teacher forcing, must reproduce the query; attention can lower that
loss only by concentrating on cells whose features carry the query's
content.  The decoder parameters are shared between branches, so both losses
shape the same decoder.
"""

from dataclasses import dataclass, field
from typing import Optional

import numpy as np

from marn import autodiff as ad
from marn.autodiff import Tensor
from marn.data import QueryTokens
from marn.model import ModelConfig, ModelParams, lstm_cell


@dataclass
class DecoderState:
    h: Tensor  # (1, d_dec)
    c: Tensor  # (1, d_dec)


@dataclass
class CaptionLoss:
    branch: str
    value: float  # nats per word
    per_word: list  # length M, each -log p of the true word
    node: Tensor = field(repr=False, default=None)


def initial_decoder_state(config: ModelConfig) -> DecoderState:
    return DecoderState(
        h=Tensor(np.zeros((1, config.d_dec))), c=Tensor(np.zeros((1, config.d_dec)))
    )


def decode_word_step(f_global: Tensor, state: DecoderState, e_prev, params: ModelParams):
    """One decoder step; the LSTM input is [F_global ; h_prev ; e_prev].

    Returns the next state and the vocabulary logits (|V|,).
    """
    d_dec = params["dec_u"].data.shape[0]
    e_prev = ad.as_tensor(e_prev)
    x = ad.concat(
        [
            ad.reshape(f_global, (1, f_global.data.size)),
            state.h,
            ad.reshape(e_prev, (1, e_prev.data.size)),
        ],
        axis=1,
    )
    h, c = lstm_cell(x, state.h, state.c, params["dec_w"], params["dec_u"], params["dec_b"], d_dec)
    logits = ad.add(ad.matmul(h, params["dec_out_w"]), params["dec_out_b"])
    vocab_size = logits.data.shape[1]
    return DecoderState(h, c), ad.reshape(logits, (vocab_size,))


def caption_loss(f_global: Tensor, query: QueryTokens, params: ModelParams,
                 config: ModelConfig, bos_embedding: np.ndarray, branch: str) -> CaptionLoss:
    """Teacher-forced negative log-likelihood, averaged over the M real tokens.

    Step m receives the ground-truth embedding of word m-1 (BOS at m=0) and
    predicts word m; EOS is the final target.  PAD positions never enter.
    """
    m_total = query.M
    if m_total < 1:
        raise ValueError("query holds no tokens")
    state = initial_decoder_state(config)
    rows = []
    e_prev = np.asarray(bos_embedding, dtype=np.float64)
    for m in range(m_total):
        state, logits = decode_word_step(f_global, state, e_prev, params)
        rows.append(ad.reshape(logits, (1, config.vocab_size)))
        if m + 1 < m_total:
            e_prev = query.embeddings[m]
    logp = ad.log_softmax(ad.concat(rows, axis=0))
    picked = ad.pick_per_row(logp, query.ids[:m_total])
    node = ad.neg(ad.mean_(picked))
    per_word = [float(v) for v in -picked.data]
    return CaptionLoss(branch=branch, value=float(node.data), per_word=per_word, node=node)


def total_loss(l_p: CaptionLoss, l_c: Optional[CaptionLoss], clip_loss_weight: float) -> Tensor:
    """Combined objective: proposal loss plus weighted clip loss."""
    if l_c is None:
        return l_p.node
    return ad.add(l_p.node, ad.mul(l_c.node, float(clip_loss_weight)))
