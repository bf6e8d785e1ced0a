import numpy as np
import numpy.testing as npt
import pytest

import marn.autodiff as ad
from marn.autodiff import Tensor
from marn.data import BOS_ID, EOS_ID, PAD_ID, QueryTokens
from marn.model import (
    init_params,
    proposal_grid,
    proposal_sampling_map,
    reduce_dim,
    summarize_proposals,
    synthetic_config,
)
from marn.reconstruct import (
    CaptionLoss,
    caption_loss,
    decode_word_step,
    initial_decoder_state,
    total_loss,
)
from marn.training import Adam, OptimizerConfig

from conftest import make_query, tiny_config


def _sigmoid(x):
    return 1.0 / (1.0 + np.exp(-x))


def _log_softmax(x):
    shifted = x - x.max()
    return shifted - np.log(np.exp(shifted).sum())


def test_decode_word_step_matches_lstm_oracle():
    cfg = tiny_config()
    rng = np.random.default_rng(0)
    params = init_params(cfg, 1)
    f_global = rng.normal(size=cfg.d_vp)
    e_prev = rng.normal(size=cfg.d_w)
    state, logits = decode_word_step(
        Tensor(f_global), initial_decoder_state(cfg), e_prev, params
    )
    h0 = np.zeros(cfg.d_dec)
    x = np.concatenate([f_global, h0, e_prev])
    gates = x @ params["dec_w"].data + h0 @ params["dec_u"].data + params["dec_b"].data
    gi, gf, gg, go = np.split(gates, 4)
    c1 = _sigmoid(gf) * 0.0 + _sigmoid(gi) * np.tanh(gg)
    h1 = _sigmoid(go) * np.tanh(c1)
    npt.assert_allclose(state.h.data[0], h1, atol=1e-12)
    npt.assert_allclose(state.c.data[0], c1, atol=1e-12)
    npt.assert_allclose(logits.data, h1 @ params["dec_out_w"].data + params["dec_out_b"].data,
                        atol=1e-12)


def test_caption_loss_matches_unrolled_oracle():
    cfg = tiny_config()
    rng = np.random.default_rng(1)
    params = init_params(cfg, 2)
    query, table = make_query(rng, cfg.vocab_size, cfg.d_w, n_words=2, max_len=cfg.max_query_len)
    f_global = rng.normal(size=cfg.d_vp)
    bos = table[BOS_ID]
    got = caption_loss(Tensor(f_global), query, params, cfg, bos, "proposal")

    dw, du = params["dec_w"].data, params["dec_u"].data
    db = params["dec_b"].data
    ow, ob = params["dec_out_w"].data, params["dec_out_b"].data
    h = np.zeros(cfg.d_dec)
    c = np.zeros(cfg.d_dec)
    e_prev = bos
    nll = []
    for m in range(query.M):
        x = np.concatenate([f_global, h, e_prev])
        gi, gf, gg, go = np.split(x @ dw + h @ du + db, 4)
        c = _sigmoid(gf) * c + _sigmoid(gi) * np.tanh(gg)
        h = _sigmoid(go) * np.tanh(c)
        nll.append(-_log_softmax(h @ ow + ob)[query.ids[m]])
        if m + 1 < query.M:
            e_prev = query.embeddings[m]
    npt.assert_allclose(got.value, np.mean(nll), atol=1e-10)
    npt.assert_allclose(got.per_word, nll, atol=1e-10)


def test_zero_decoder_gives_uniform_loss():
    cfg = tiny_config()
    rng = np.random.default_rng(2)
    params = init_params(cfg, 0)
    for name in ("dec_w", "dec_u", "dec_b", "dec_out_w", "dec_out_b"):
        params[name].data[:] = 0.0
    query, table = make_query(rng, cfg.vocab_size, cfg.d_w, 3, cfg.max_query_len)
    loss = caption_loss(Tensor(rng.normal(size=cfg.d_vp)), query, params, cfg,
                        table[BOS_ID], "proposal")
    npt.assert_allclose(loss.value, np.log(cfg.vocab_size), atol=1e-9)
    npt.assert_allclose(loss.per_word, [np.log(cfg.vocab_size)] * query.M, atol=1e-9)


def test_loss_value_is_mean_of_positive_per_word_terms():
    cfg = tiny_config()
    rng = np.random.default_rng(3)
    params = init_params(cfg, 3)
    query, table = make_query(rng, cfg.vocab_size, cfg.d_w, 4, cfg.max_query_len)
    loss = caption_loss(Tensor(rng.normal(size=cfg.d_vp)), query, params, cfg,
                        table[BOS_ID], "clip")
    assert loss.branch == "clip"
    assert len(loss.per_word) == query.M == 5
    npt.assert_allclose(loss.value, np.mean(loss.per_word), atol=1e-12)
    assert all(v > 0.0 for v in loss.per_word)


def test_confident_eos_drives_loss_to_zero():
    cfg = tiny_config()
    rng = np.random.default_rng(4)
    params = init_params(cfg, 0)
    params["dec_out_b"].data[EOS_ID] = 30.0
    ids = np.full(cfg.max_query_len, PAD_ID, dtype=np.int64)
    ids[0] = EOS_ID
    query = QueryTokens(ids=ids, M=1, embeddings=np.zeros((1, cfg.d_w)))
    loss = caption_loss(Tensor(rng.normal(size=cfg.d_vp)), query, params, cfg,
                        np.zeros(cfg.d_w), "proposal")
    assert loss.value < 1e-9


def test_padding_never_enters_the_loss():
    cfg = tiny_config()
    rng = np.random.default_rng(5)
    params = init_params(cfg, 4)
    f_global = rng.normal(size=cfg.d_vp)
    rng_a = np.random.default_rng(6)
    rng_b = np.random.default_rng(6)
    short, table = make_query(rng_a, cfg.vocab_size, cfg.d_w, 2, max_len=4)
    longer, _ = make_query(rng_b, cfg.vocab_size, cfg.d_w, 2, max_len=6)
    assert short.M == longer.M and short.ids.size != longer.ids.size
    a = caption_loss(Tensor(f_global), short, params, cfg, table[BOS_ID], "proposal")
    b = caption_loss(Tensor(f_global), longer, params, cfg, table[BOS_ID], "proposal")
    assert a.value == b.value


def test_loss_gradient_reaches_decoder_and_global_feature():
    cfg = tiny_config()
    rng = np.random.default_rng(7)
    params = init_params(cfg, 5)
    query, table = make_query(rng, cfg.vocab_size, cfg.d_w, 3, cfg.max_query_len)
    f_global = Tensor(rng.normal(size=cfg.d_vp), requires_grad=True)
    loss = caption_loss(f_global, query, params, cfg, table[BOS_ID], "proposal")
    loss.node.backward()
    assert f_global.grad is not None and np.isfinite(f_global.grad).all()
    for name in ("dec_w", "dec_u", "dec_b", "dec_out_w", "dec_out_b"):
        grad = params[name].grad
        assert grad is not None and np.abs(grad).sum() > 0.0
    # attention-side parameters never appear in the caption graph
    assert params["p_attn1_w"].grad is None


def test_decoder_is_shared_between_branches():
    cfg = tiny_config()
    rng = np.random.default_rng(8)
    params = init_params(cfg, 6)
    query, table = make_query(rng, cfg.vocab_size, cfg.d_w, 2, cfg.max_query_len)
    f_p = Tensor(rng.normal(size=cfg.d_vp))
    f_c = Tensor(rng.normal(size=cfg.d_vc))
    before = (
        caption_loss(f_p, query, params, cfg, table[BOS_ID], "proposal").value,
        caption_loss(f_c, query, params, cfg, table[BOS_ID], "clip").value,
    )
    params["dec_out_b"].data[5] += 0.3
    after = (
        caption_loss(f_p, query, params, cfg, table[BOS_ID], "proposal").value,
        caption_loss(f_c, query, params, cfg, table[BOS_ID], "clip").value,
    )
    assert before[0] != after[0] and before[1] != after[1]


def _fixed_loss(branch, value):
    return CaptionLoss(branch=branch, value=value, per_word=[value],
                       node=Tensor(np.array(value)))


def test_total_loss_combinations():
    l_p = _fixed_loss("proposal", 1.2)
    l_c = _fixed_loss("clip", 0.8)
    npt.assert_allclose(float(total_loss(l_p, l_c, 1.0).data), 2.0, atol=1e-12)
    npt.assert_allclose(float(total_loss(l_p, l_c, 0.0).data), 1.2, atol=1e-12)
    npt.assert_allclose(float(total_loss(l_p, l_c, 0.5).data), 1.6, atol=1e-12)
    assert total_loss(l_p, None, 1.0) is l_p.node


def test_informative_features_refit_better():
    """Decoders refit on features from the true segment's cell reconstruct the
    query better than decoders refit on uniformly pooled features."""
    cfg = synthetic_config()
    rng = np.random.default_rng(9)
    table = np.eye(cfg.vocab_size)
    feature_params = init_params(cfg, 2)
    grid = proposal_grid(cfg)
    smap = proposal_sampling_map(cfg)
    valid = grid.valid_mask()
    cells = grid.enumerate_proposals()

    def best_cell(t_s, t_e):
        def iou(i, s):
            inter = max(0.0, min(i + s, t_e) - max(i, t_s))
            return inter / (max(i + s, t_e) - min(i, t_s))
        return max(cells, key=lambda c: iou(c[0], c[2]))

    samples = []
    for _ in range(20):
        length = int(rng.integers(cfg.T // 8, cfg.T // 4 + 1))
        start = int(rng.integers(0, cfg.T - length + 1))
        words = rng.choice(np.arange(4, cfg.vocab_size), size=3, replace=False)
        x = rng.normal(0.0, 0.1, size=(cfg.T, cfg.d_v))
        x[start : start + length, words] += 1.0
        ids = np.full(cfg.max_query_len, PAD_ID, dtype=np.int64)
        ids[:3] = words
        ids[3] = EOS_ID
        query = QueryTokens(ids=ids, M=4, embeddings=table[ids[:4]])
        with ad.no_grad():
            reduced = reduce_dim(Tensor(x), feature_params, "p_")
            sampled = ad.sample_cells(reduced, smap.idx_lo, smap.idx_hi,
                                      smap.w_lo, smap.w_hi, smap.grid_shape)
            f_v = summarize_proposals(sampled, feature_params, cfg, "p_", cfg.d_vp, valid).data
        i, j, _ = best_cell(start, start + length)
        f_good = f_v[i, j]
        f_flat = f_v[valid].mean(axis=0)
        samples.append((query, f_good, f_flat))

    def refit(which):
        params = init_params(cfg, 7)
        opt = Adam(params, OptimizerConfig(lr=0.05))
        for _ in range(30):
            params.zero_grad()
            for query, f_good, f_flat in samples:
                f = f_good if which == "good" else f_flat
                loss = caption_loss(Tensor(f), query, params, cfg,
                                    table[BOS_ID], "proposal")
                ad.mul(loss.node, 1.0 / len(samples)).backward()
            opt.step()
        with ad.no_grad():
            finals = [
                caption_loss(Tensor(f_good if which == "good" else f_flat),
                             query, params, cfg, table[BOS_ID], "proposal").value
                for query, f_good, f_flat in samples
            ]
        return float(np.mean(finals))

    assert refit("good") < refit("flat")
