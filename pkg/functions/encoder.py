"""
Encoder: immagine in scala di grigi -> sequenza di M vettori di feature.

Due stencil 3x3 (stride 2 solo in verticale, padding 1), appiattimento per
colonna, raggruppamento di column_stride colonne, proiezione lineare a
feature_dim e LSTM opzionale lungo le colonne.
"""

import functools
import math

import numpy as np

from . import autodiff as ad
from .errors import ShapeError
from .layers import add_lstm_params, init_bias, init_matrix, linear, lstm_cell, zeros_state

PREFIX = 'enc.'


def _halve(n):
    return (n + 1) // 2


def num_positions(width, column_stride):
    """M = ceil(W / column_stride)."""
    return math.ceil(width / column_stride)


def group_dim(cfg):
    """Dimensione di un gruppo di colonne prima della proiezione."""
    return cfg['column_stride'] * _halve(_halve(cfg['height'])) * cfg['conv2_channels']


def init_encoder(params, cfg, rng, dtype=np.float64):
    """Aggiunge i parametri dell'encoder (prefisso 'enc.') a params."""
    c1, c2 = cfg['conv1_channels'], cfg['conv2_channels']
    d = cfg['feature_dim']
    params.add('enc.conv1.W', ad.Tensor(init_matrix(rng, (9, c1), dtype)))
    params.add('enc.conv1.b', ad.Tensor(init_bias(c1, dtype)))
    params.add('enc.conv2.W', ad.Tensor(init_matrix(rng, (9 * c1, c2), dtype)))
    params.add('enc.conv2.b', ad.Tensor(init_bias(c2, dtype)))
    params.add('enc.proj.W', ad.Tensor(init_matrix(rng, (group_dim(cfg), d), dtype)))
    params.add('enc.proj.b', ad.Tensor(init_bias(d, dtype)))
    if cfg['encoder_rnn']:
        add_lstm_params(params, 'enc.rnn', d, d, rng, dtype)


@functools.lru_cache(maxsize=32)
def _first_layer_index(height, width):
    """Indici (H1, W, 9) nell'immagine con padding di un pixel."""
    h1 = _halve(height)
    r = np.arange(h1)[:, None, None, None]
    c = np.arange(width)[None, :, None, None]
    ki = np.arange(3)[None, None, :, None]
    kj = np.arange(3)[None, None, None, :]
    rows = np.broadcast_to(2 * r + ki, (h1, width, 3, 3)).reshape(h1, width, 9)
    cols = np.broadcast_to(c + kj, (h1, width, 3, 3)).reshape(h1, width, 9)
    return rows, cols


@functools.lru_cache(maxsize=32)
def _second_layer_index(batch, h1, width, c1):
    """Indici piatti (B, H2, W, 9*c1) nell'uscita del primo strato; -1 = padding."""
    h2 = _halve(h1)
    b = np.arange(batch)[:, None, None, None, None, None]
    r = np.arange(h2)[None, :, None, None, None, None]
    c = np.arange(width)[None, None, :, None, None, None]
    ki = np.arange(3)[None, None, None, :, None, None]
    kj = np.arange(3)[None, None, None, None, :, None]
    ch = np.arange(c1)[None, None, None, None, None, :]
    sr = 2 * r + ki - 1
    sc = c + kj - 1
    valid = (sr >= 0) & (sr < h1) & (sc >= 0) & (sc < width)
    flat = ((b * h1 + sr) * width + sc) * c1 + ch
    idx = np.where(valid, flat, -1)
    return idx.reshape(batch, h2, width, 9 * c1)


@functools.lru_cache(maxsize=32)
def _group_index(batch, h2, width, c2, stride):
    """Indici piatti (M, B, stride*H2*c2) che raggruppano colonne adiacenti."""
    m_count = num_positions(width, stride)
    m = np.arange(m_count)[:, None, None, None, None]
    b = np.arange(batch)[None, :, None, None, None]
    q = np.arange(stride)[None, None, :, None, None]
    r = np.arange(h2)[None, None, None, :, None]
    ch = np.arange(c2)[None, None, None, None, :]
    w = m * stride + q
    flat = ((b * h2 + r) * width + w) * c2 + ch
    idx = np.where(w < width, flat, -1)
    return idx.reshape(m_count, batch, stride * h2 * c2)


def encode_batch(images, params, cfg):
    """
    Codifica un batch di immagini.

    Args:
        images: array (B, H, W) con valori in [0, 1]
        params: ParamSet con i parametri 'enc.'
        cfg: configurazione (height, canali, column_stride, encoder_rnn)

    Returns:
        Tensor (M, B, feature_dim), ordinato per posizione orizzontale
    """
    images = np.asarray(images)
    if images.ndim != 3 or images.shape[1] != cfg['height']:
        raise ShapeError('encode', images.shape, (None, cfg['height'], None),
                         detail="altezza dell'immagine diversa da quella configurata")
    dtype = params['enc.conv1.W'].dtype
    batch, height, width = images.shape
    c1, c2 = cfg['conv1_channels'], cfg['conv2_channels']
    h1 = _halve(height)
    h2 = _halve(h1)

    # strato 1: l'immagine e' costante, im2col direttamente in numpy
    padded = np.pad(images.astype(dtype, copy=False), ((0, 0), (1, 1), (1, 1)))
    rows, cols = _first_layer_index(height, width)
    patches = ad.Tensor(padded[:, rows, cols])
    x1 = ad.tanh(linear(patches, params['enc.conv1.W'], params['enc.conv1.b']))

    # strato 2: im2col differenziabile
    patches2 = ad.take(x1, _second_layer_index(batch, h1, width, c1))
    x2 = ad.tanh(linear(patches2, params['enc.conv2.W'], params['enc.conv2.b']))

    groups = ad.take(x2, _group_index(batch, h2, width, c2, cfg['column_stride']))
    feats = linear(groups, params['enc.proj.W'], params['enc.proj.b'])

    if not cfg['encoder_rnn']:
        return feats

    d = cfg['feature_dim']
    h = zeros_state(batch, d, dtype)
    c = zeros_state(batch, d, dtype)
    outputs = []
    for m in range(feats.shape[0]):
        h, c = lstm_cell(ad.index_first(feats, m), h, c, params['enc.rnn.W'], params['enc.rnn.b'])
        outputs.append(h)
    return ad.stack(outputs)


def encode(image, params, cfg):
    """Codifica una singola immagine (H, W) -> Tensor (M, feature_dim)."""
    image = np.asarray(image)
    if image.ndim != 2:
        raise ShapeError('encode', image.shape, detail='immagine 2-D attesa')
    out = encode_batch(image[None], params, cfg)
    return ad.reshape(out, (out.shape[0], out.shape[2]))
