"""Finite-difference validation of the end-to-end training gradient.

Every parameter tensor of the two-branch model is probed at a handful of
random coordinates; the analytic gradient from one backward pass must match
a central difference of the full loss to 1e-3 relative error.
"""

import numpy as np
import pytest

import marn.autodiff as ad
from marn.autodiff import Tensor
from marn.data import BOS_ID
from marn.model import forward, init_params
from marn.reconstruct import caption_loss, total_loss

from conftest import make_query, tiny_config

STEP = 1e-5
REL_TOL = 1e-3


def _loss_value(video, query, params, cfg, bos):
    out = forward(video, query, params, cfg)
    l_p = caption_loss(out.f_p_global, query, params, cfg, bos, "proposal")
    l_c = None
    if cfg.multilevel_train:
        l_c = caption_loss(out.f_c_global, query, params, cfg, bos, "clip")
    return total_loss(l_p, l_c, cfg.clip_loss_weight)


def _check_tensors(cfg, names=None, coords_per_tensor=5, seed=0):
    rng = np.random.default_rng(seed)
    params = init_params(cfg, seed=1)
    query, table = make_query(rng, cfg.vocab_size, cfg.d_w, n_words=3,
                              max_len=cfg.max_query_len)
    bos = table[BOS_ID]
    video = rng.normal(size=(cfg.T, cfg.d_v))

    params.zero_grad()
    _loss_value(video, query, params, cfg, bos).backward()
    analytic = {name: (t.grad.copy() if t.grad is not None else np.zeros_like(t.data))
                for name, t in params.items()}

    worst = 0.0
    for name in names if names is not None else params.names():
        tensor = params[name]
        flat = tensor.data.reshape(-1)
        n_probe = min(coords_per_tensor, flat.size)
        for k in rng.choice(flat.size, size=n_probe, replace=False):
            original = flat[k]
            with ad.no_grad():
                flat[k] = original + STEP
                up = float(_loss_value(video, query, params, cfg, bos).data)
                flat[k] = original - STEP
                down = float(_loss_value(video, query, params, cfg, bos).data)
            flat[k] = original
            fd = (up - down) / (2.0 * STEP)
            an = analytic[name].reshape(-1)[k]
            rel = abs(fd - an) / max(abs(fd), abs(an), 1e-6)
            worst = max(worst, rel)
            assert rel <= REL_TOL, f"{name}[{k}]: analytic {an:.3e} vs fd {fd:.3e} (rel {rel:.2e})"
    return worst


def test_gradcheck_every_tensor_two_branch_model():
    worst = _check_tensors(tiny_config())
    assert worst <= REL_TOL


@pytest.mark.parametrize("rep,names", [
    ("avgpool", ["p_pool_w", "p_pool_b", "c_pool_w", "c_pool_b"]),
    ("maxpool", ["p_pool_w", "p_pool_b", "p_conv1d_w"]),
    ("recurrent", ["p_rec_w", "p_rec_u", "p_rec_b", "c_rec_u"]),
])
def test_gradcheck_temporal_rep_variants(rep, names):
    _check_tensors(tiny_config(temporal_rep=rep), names=names, coords_per_tensor=3)


@pytest.mark.parametrize("kernel,names", [
    ("1x1", ["p_attn1_w", "p_attn2_w", "p_attn2_b"]),
    ("3x3_stacked2", ["p_attn2_w", "p_attn3_w", "p_attn3_b"]),
])
def test_gradcheck_attention_variants(kernel, names):
    _check_tensors(tiny_config(attn_kernel=kernel), names=names, coords_per_tensor=3)


def test_gradcheck_narrow_conv_and_single_level():
    _check_tensors(tiny_config(conv1d_kernel=1),
                   names=["p_conv1d_w", "p_conv1d_b"], coords_per_tensor=4)
    cfg = tiny_config(multilevel_train=False, multilevel_infer=False)
    _check_tensors(cfg, names=["p_attn2_w", "dec_w", "gru_u"], coords_per_tensor=4)
