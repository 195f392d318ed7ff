"""
Blocchi riutilizzabili: inizializzazione, strato lineare, cella LSTM.
"""

import numpy as np

from . import autodiff as ad


def init_matrix(rng, shape, dtype=np.float64):
    """Uniforme in (-r, r) con r = 1/sqrt(fan_in); fan_in = prima dimensione."""
    r = 1.0 / np.sqrt(shape[0])
    return rng.uniform(-r, r, size=shape).astype(dtype)


def init_bias(size, dtype=np.float64):
    return np.zeros(size, dtype=dtype)


def linear(x, weight, bias=None):
    """x (..., in) @ weight (in, out) + bias (out)."""
    out = ad.matmul(x, weight)
    if bias is not None:
        out = ad.add(out, bias)
    return out


def add_lstm_params(params, prefix, input_dim, hidden, rng, dtype):
    """Pesi della cella LSTM: gate concatenati nell'ordine input, forget, cell, output."""
    params.add(f'{prefix}.W', ad.Tensor(init_matrix(rng, (input_dim + hidden, 4 * hidden), dtype)))
    params.add(f'{prefix}.b', ad.Tensor(init_bias(4 * hidden, dtype)))


def lstm_cell(x, h_prev, c_prev, weight, bias):
    """
    Un passo LSTM standard.

    Args:
        x: input (B, input_dim)
        h_prev, c_prev: stato precedente (B, hidden)

    Returns:
        (h, c) nuovo stato
    """
    hidden = h_prev.shape[-1]
    gates = linear(ad.concat([x, h_prev], axis=-1), weight, bias)
    i = ad.sigmoid(ad.slice_last(gates, 0, hidden))
    f = ad.sigmoid(ad.slice_last(gates, hidden, 2 * hidden))
    g = ad.tanh(ad.slice_last(gates, 2 * hidden, 3 * hidden))
    o = ad.sigmoid(ad.slice_last(gates, 3 * hidden, 4 * hidden))
    c = ad.add(ad.mul(f, c_prev), ad.mul(i, g))
    h = ad.mul(o, ad.tanh(c))
    return h, c


def zeros_state(batch, hidden, dtype=np.float64):
    return ad.Tensor(np.zeros((batch, hidden), dtype=dtype))
