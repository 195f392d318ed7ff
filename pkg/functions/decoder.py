"""
Decoder con attenzione e inclusive attending.

Per ogni passo t:
    e_{t,j} = w^T tanh(W s_{t-1} + V x_j + b),  alpha_t = softmax_j(e_t)
    alpha'_t = re-weighting inclusivo di alpha_t (se abilitato)
    CR_t = sum_j alpha'_{t,j} x_j
    s_t = CR_t^+ = LSTM([emb(y_{t-1}), CR_t], s_{t-1})
    y_t = softmax(U^T s_t)
La decodifica termina quando viene emesso l'EOS.
"""

import functools
import os
from dataclasses import dataclass, field

import matplotlib
matplotlib.use('Agg')
import matplotlib.pyplot as plt
import numpy as np
import pandas as pd

from . import autodiff as ad
from .data_synth import write_pgm
from .errors import ShapeError
from .layers import add_lstm_params, init_bias, init_matrix, lstm_cell, zeros_state

PREFIX = 'dec.'


@dataclass(frozen=True)
class IAConfig:
    enabled: bool = True
    lam: float = 0.75
    eta: int = 1

    def __post_init__(self):
        if not 0.0 <= self.lam <= 1.0:
            raise ValueError(f"lambda deve stare in [0, 1], trovato {self.lam}")
        if self.eta < 1:
            raise ValueError(f"eta deve essere un intero positivo, trovato {self.eta}")

    @classmethod
    def from_config(cls, cfg):
        return cls(enabled=cfg['ia_enabled'], lam=cfg['lambda'], eta=cfg['eta'])


@dataclass
class DecodeTrace:
    """
    Traccia batch della decodifica: una lista di Tensor per passo.

    alpha, alpha_prime: (B, M); cr: (B, feature_dim); cr_plus: (B, hidden);
    log_probs: (B, C). emitted: (B, T) simboli emessi (argmax);
    lengths[b]: passi validi del campione b.
    """
    mode: str
    alpha: list = field(default_factory=list)
    alpha_prime: list = field(default_factory=list)
    cr: list = field(default_factory=list)
    cr_plus: list = field(default_factory=list)
    log_probs: list = field(default_factory=list)
    emitted: np.ndarray = None
    lengths: np.ndarray = None
    targets: np.ndarray = None
    mask: np.ndarray = None
    labels: list = None
    _banks: dict = field(default_factory=dict, repr=False)

    @property
    def batch_size(self):
        return self.emitted.shape[0]

    @property
    def num_steps(self):
        return len(self.alpha)

    def probs(self, step):
        return np.exp(self.log_probs[step].data)

    def sample(self, b):
        """Vista numpy del campione b: dict di array (T_b, ...)."""
        n = int(self.lengths[b])
        return {
            'alpha': np.stack([a.data[b] for a in self.alpha[:n]]),
            'alpha_prime': np.stack([a.data[b] for a in self.alpha_prime[:n]]),
            'cr': np.stack([x.data[b] for x in self.cr[:n]]),
            'cr_plus': np.stack([x.data[b] for x in self.cr_plus[:n]]),
            'probs': np.stack([np.exp(x.data[b]) for x in self.log_probs[:n]]),
            'emitted': self.emitted[b, :n].copy(),
        }

    def bank(self, variant):
        """Tensor (T*B, dim) con le feature di tutti i passi; riga = t*B + b."""
        if variant not in self._banks:
            steps = self.cr if variant == 'CR' else self.cr_plus
            stacked = ad.stack(steps)
            self._banks[variant] = ad.reshape(stacked, (stacked.shape[0] * stacked.shape[1], stacked.shape[2]))
        return self._banks[variant]


def init_decoder(params, cfg, num_classes, rng, dtype=np.float64):
    """Aggiunge i parametri del decoder (prefisso 'dec.')."""
    d, h, a, e = cfg['feature_dim'], cfg['hidden'], cfg['att_dim'], cfg['embed_dim']
    params.add('dec.V', ad.Tensor(init_matrix(rng, (d, a), dtype)))
    params.add('dec.W', ad.Tensor(init_matrix(rng, (h, a), dtype)))
    params.add('dec.b', ad.Tensor(init_bias(a, dtype)))
    params.add('dec.w', ad.Tensor(init_matrix(rng, (a, 1), dtype)))
    # righe: classi (simboli + EOS) + token di start dedicato
    params.add('dec.emb', ad.Tensor(init_matrix(rng, (num_classes + 1, e), dtype)))
    add_lstm_params(params, 'dec.lstm', e + d, h, rng, dtype)
    params.add('dec.U', ad.Tensor(init_matrix(rng, (h, num_classes), dtype)))


def num_classes_of(params):
    return params['dec.U'].shape[1]


def start_token(params):
    return num_classes_of(params)


def eos_token(params):
    return num_classes_of(params) - 1


# ============ ATTENZIONE ============

def attention_weights(features, prev_state, params, projected=None):
    """
    Pesi di attenzione alpha_t (B, M).

    Args:
        features: Tensor (M, B, D)
        prev_state: Tensor (B, h), stato s_{t-1}
        projected: V x_j precalcolato (M, B, att_dim), opzionale
    """
    if features.shape[0] < 1:
        raise ShapeError('attention_weights', features.shape, detail='serve M >= 1')
    if projected is None:
        projected = ad.matmul(features, params['dec.V'])
    state_term = ad.matmul(prev_state, params['dec.W'])
    hidden = ad.tanh(ad.add(ad.add(projected, state_term), params['dec.b']))
    energies = ad.matmul(hidden, params['dec.w'])
    m, b = features.shape[0], features.shape[1]
    energies = ad.transpose(ad.reshape(energies, (m, b)), (1, 0))
    return ad.softmax(energies)


@functools.lru_cache(maxsize=128)
def _inclusive_kernel(m, lam, eta):
    kernel = np.zeros((m, m))
    coeff = (1.0 - lam) / (eta * (1.0 + eta))
    for j in range(m):
        kernel[j, j] += lam
        for i in range(1, eta + 1):
            weight = coeff * (eta + 1 - i)
            for neighbour in (j - i, j + i):
                # fuori dal bordo il contributo ricade sulla posizione stessa
                source = neighbour if 0 <= neighbour < m else j
                kernel[source, j] += weight
    kernel.setflags(write=False)
    return kernel


def inclusive_kernel(m, cfg):
    """Matrice K (M, M) tale che alpha' = alpha @ K."""
    if cfg.eta >= m:
        raise ValueError(f"eta ({cfg.eta}) deve essere minore di M ({m})")
    return _inclusive_kernel(m, float(cfg.lam), int(cfg.eta))


def inclusive_reweight(alpha, cfg):
    """
    Re-weighting inclusivo dei pesi di attenzione.

    Accetta un Tensor (differenziabile) o un array numpy con ultimo asse M.
    La massa totale e' conservata; lambda = 1 restituisce alpha invariato.
    """
    if not cfg.enabled:
        return alpha
    m = alpha.shape[-1]
    kernel = inclusive_kernel(m, cfg)
    if isinstance(alpha, ad.Tensor):
        return ad.matmul(alpha if alpha.ndim >= 2 else ad.reshape(alpha, (1, m)),
                         ad.Tensor(kernel, dtype=alpha.dtype))
    return np.asarray(alpha) @ kernel


def context(features, alpha_prime):
    """CR_t = sum_j alpha'_{t,j} x_j -> (B, D)."""
    m, b, d = features.shape
    if alpha_prime.shape != (b, m):
        raise ShapeError('context', features.shape, alpha_prime.shape)
    batch_major = ad.transpose(features, (1, 0, 2))
    weights = ad.reshape(alpha_prime, (b, 1, m))
    return ad.reshape(ad.matmul(weights, batch_major), (b, d))


def recurrent_step(prev_symbol, cr, prev_state, params):
    """
    s_t = LSTM(y_{t-1}, CR_t, s_{t-1}); l'ingresso e' [emb(y_{t-1}), CR_t].

    Args:
        prev_symbol: interi (B,) (classe o token di start)
        prev_state: coppia (h, c) di Tensor (B, hidden)

    Returns:
        (h, c); h e' CR_t^+
    """
    h_prev, c_prev = prev_state
    embedded = ad.take_rows(params['dec.emb'], np.asarray(prev_symbol, dtype=np.int64))
    x = ad.concat([embedded, cr], axis=-1)
    return lstm_cell(x, h_prev, c_prev, params['dec.lstm.W'], params['dec.lstm.b'])


# ============ DECODIFICA ============

def _teacher_targets(labels, eos, start):
    lengths = np.array([len(l) for l in labels])
    steps = int(lengths.max()) + 1
    batch = len(labels)
    targets = np.full((batch, steps), eos, dtype=np.int64)
    prev = np.full((batch, steps), eos, dtype=np.int64)
    mask = np.zeros((batch, steps))
    prev[:, 0] = start
    for b, label in enumerate(labels):
        n = len(label)
        targets[b, :n] = label
        prev[b, 1:n + 1] = label
        mask[b, :n + 1] = 1.0
    return targets, prev, mask, lengths + 1


def decode(features, params, cfg, mode='teacher', labels=None, max_steps=None):
    """
    Decodifica un batch di sequenze di feature.

    Args:
        features: Tensor (M, B, D) dall'encoder
        cfg: IAConfig
        mode: 'teacher' (richiede labels, EOS aggiunto internamente) o 'greedy'
        labels: lista di sequenze di indici (senza EOS)
        max_steps: limite di passi in modalita' greedy

    Returns:
        DecodeTrace
    """
    m, batch = features.shape[0], features.shape[1]
    hidden = params['dec.W'].shape[0]
    dtype = params['dec.W'].dtype
    eos, start = eos_token(params), start_token(params)

    if mode == 'teacher':
        if labels is None or len(labels) != batch:
            raise ValueError("la modalita' teacher forcing richiede un'etichetta per campione")
        if any(len(l) == 0 for l in labels):
            raise ValueError("etichetta vuota")
        targets, prev_symbols, mask, lengths = _teacher_targets(labels, eos, start)
        steps = targets.shape[1]
    elif mode == 'greedy':
        if max_steps is None or max_steps < 1:
            raise ValueError(f"max_steps deve essere >= 1, trovato {max_steps}")
        steps = max_steps
        lengths = np.full(batch, steps, dtype=np.int64)
        targets = mask = None
    else:
        raise ValueError(f"modalita' di decodifica sconosciuta: {mode!r}")

    trace = DecodeTrace(mode=mode, targets=targets, mask=mask,
                        labels=[tuple(l) for l in labels] if labels is not None else None)
    projected = ad.matmul(features, params['dec.V'])
    state = (zeros_state(batch, hidden, dtype), zeros_state(batch, hidden, dtype))
    emitted = np.full((batch, steps), eos, dtype=np.int64)
    finished = np.zeros(batch, dtype=bool)
    prev = np.full(batch, start, dtype=np.int64)

    for t in range(steps):
        if mode == 'teacher':
            prev = prev_symbols[:, t]
        alpha = attention_weights(features, state[0], params, projected=projected)
        alpha_prime = inclusive_reweight(alpha, cfg)
        cr = context(features, alpha_prime)
        state = recurrent_step(prev, cr, state, params)
        logits = ad.matmul(state[0], params['dec.U'])
        log_probs = ad.log_softmax(logits)

        trace.alpha.append(alpha)
        trace.alpha_prime.append(alpha_prime)
        trace.cr.append(cr)
        trace.cr_plus.append(state[0])
        trace.log_probs.append(log_probs)
        emitted[:, t] = np.argmax(log_probs.data, axis=-1)

        if mode == 'greedy':
            newly = (~finished) & (emitted[:, t] == eos)
            lengths[newly] = t + 1
            finished |= newly
            prev = emitted[:, t]
            if finished.all():
                emitted = emitted[:, :t + 1]
                break

    trace.emitted = emitted
    trace.lengths = lengths
    return trace


def predictions(trace):
    """Sequenze di indici predette (senza EOS) da una traccia greedy."""
    out = []
    eos = trace.log_probs[0].shape[1] - 1
    for b in range(trace.batch_size):
        seq = []
        for s in trace.emitted[b, :trace.lengths[b]]:
            if s == eos:
                break
            seq.append(int(s))
        out.append(tuple(seq))
    return out


def attention_loss(trace, labels=None):
    """
    L_att = -sum_t log P(y_t | I), EOS compreso come ultimo target;
    media sul batch.
    """
    if trace.mode != 'teacher':
        raise ValueError("attention_loss richiede una traccia in teacher forcing")
    if labels is not None and [tuple(l) for l in labels] != trace.labels:
        raise ValueError("le etichette non corrispondono alla traccia")
    batch = trace.batch_size
    total = None
    for t, log_probs in enumerate(trace.log_probs):
        picked = ad.pick(log_probs, trace.targets[:, t])
        term = ad.sum(ad.mul(picked, ad.Tensor(trace.mask[:, t], dtype=log_probs.dtype)))
        total = term if total is None else ad.add(total, term)
    return ad.scale(total, -1.0 / batch)


# ============ VISUALIZZAZIONE ============

def heatmap_pixels(weights):
    """Scala i pesi in [0, 255] con floor(w * 255 + 0.5)."""
    return np.clip(np.floor(np.asarray(weights) * 255.0 + 0.5), 0, 255).astype(np.uint8)


def dump_attention(trace, image, directory, sample=0, alphabet=None):
    """
    Scrive le mappe di attenzione di un campione.

    Per ogni passo: step_XX.pgm (alpha) e step_XX_prime.pgm (alpha'),
    larghezza M e altezza 1; attention.tsv con step, j, alpha, alpha_prime;
    attention.png con immagine e curve dei pesi.

    Returns:
        lista dei file scritti
    """
    os.makedirs(directory, exist_ok=True)
    view = trace.sample(sample)
    written = []
    rows = []
    for t in range(view['alpha'].shape[0]):
        for suffix, key in (('', 'alpha'), ('_prime', 'alpha_prime')):
            path = os.path.join(directory, f"step_{t:02d}{suffix}.pgm")
            write_pgm(path, heatmap_pixels(view[key][t])[None, :] / 255.0)
            written.append(path)
        for j in range(view['alpha'].shape[1]):
            rows.append({'step': t, 'j': j,
                         'alpha': float(view['alpha'][t, j]),
                         'alpha_prime': float(view['alpha_prime'][t, j])})

    tsv_path = os.path.join(directory, 'attention.tsv')
    pd.DataFrame(rows, columns=['step', 'j', 'alpha', 'alpha_prime']).to_csv(
        tsv_path, sep='\t', index=False, float_format='%.17g', lineterminator='\n')
    written.append(tsv_path)

    png_path = os.path.join(directory, 'attention.png')
    _plot_attention(view, np.asarray(image), png_path, alphabet)
    written.append(png_path)
    return written


def _plot_attention(view, image, path, alphabet):
    steps = view['alpha'].shape[0]
    m = view['alpha'].shape[1]
    fig, axes = plt.subplots(steps + 1, 1, figsize=(8, 1.0 + 0.8 * steps), squeeze=False)
    axes[0, 0].imshow(image, cmap='gray', vmin=0, vmax=1, aspect='auto')
    axes[0, 0].set_axis_off()
    centers = (np.arange(m) + 0.5) * image.shape[1] / m
    for t in range(steps):
        ax = axes[t + 1, 0]
        ax.bar(centers, view['alpha'][t], width=image.shape[1] / m * 0.9, color='tab:blue',
               alpha=0.6, label='alpha')
        ax.plot(centers, view['alpha_prime'][t], color='tab:brown', marker='.', label="alpha'")
        ax.set_xlim(0, image.shape[1])
        ax.set_ylim(0, 1)
        symbol = int(view['emitted'][t])
        name = 'EOS'
        if alphabet is not None and symbol < len(alphabet.symbols):
            name = alphabet.symbols[symbol]
        ax.set_ylabel(f"t={t}\n{name}", rotation=0, labelpad=20, fontsize=8)
        ax.set_xticks([])
    axes[1, 0].legend(loc='upper right', fontsize=7)
    fig.tight_layout()
    fig.savefig(path, dpi=100)
    plt.close(fig)


def read_attention_tsv(path):
    """Rilegge attention.tsv come DataFrame."""
    return pd.read_csv(path, sep='\t')
