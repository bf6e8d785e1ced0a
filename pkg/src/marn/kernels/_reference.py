"""Pure-numpy reference implementations of the sampling kernels."""

import numpy as np


def sample_rows(features, idx_lo, idx_hi, w_lo, w_hi):
    out = w_lo[:, None] * features[idx_lo] + w_hi[:, None] * features[idx_hi]
    return np.ascontiguousarray(out)


def sample_rows_grad(grad_out, idx_lo, idx_hi, w_lo, w_hi, n_rows):
    grad = np.zeros((n_rows, grad_out.shape[1]), dtype=np.float64)
    np.add.at(grad, idx_lo, w_lo[:, None] * grad_out)
    np.add.at(grad, idx_hi, w_hi[:, None] * grad_out)
    return grad
