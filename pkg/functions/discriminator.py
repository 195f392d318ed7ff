"""
Discriminatore multi-classe (MCD) sulle coppie di caratteri.

Tre strati completamente connessi (tanh, tanh, 4 logit) applicati alla
concatenazione delle due feature della coppia. Le due loss:
    discriminator_loss: cross-entropy a 4 classi, feature costanti
    generator_confusion_loss: G2 -> etichetta G1, G4 -> etichetta G3,
    parametri MCD costanti, gradiente verso le feature
Entrambe sono medie sulle coppie.
"""

import numpy as np

from . import autodiff as ad
from .errors import ShapeError
from .layers import init_bias, init_matrix, linear
from .pairs import GROUP_NAMES

PREFIX = 'mcd.'
NUM_GROUPS = len(GROUP_NAMES)


def pair_feature_dim(cfg):
    """Dimensione di una feature di carattere per la variante configurata."""
    return cfg['feature_dim'] if cfg['feature_variant'] == 'CR' else cfg['hidden']


def init_mcd(params, feature_dim, cfg, rng, dtype=np.float64):
    """Aggiunge i parametri del discriminatore (prefisso 'mcd.')."""
    h1, h2 = cfg['mcd_hidden1'], cfg['mcd_hidden2']
    params.add('mcd.W1', ad.Tensor(init_matrix(rng, (2 * feature_dim, h1), dtype)))
    params.add('mcd.b1', ad.Tensor(init_bias(h1, dtype)))
    params.add('mcd.W2', ad.Tensor(init_matrix(rng, (h1, h2), dtype)))
    params.add('mcd.b2', ad.Tensor(init_bias(h2, dtype)))
    params.add('mcd.W3', ad.Tensor(init_matrix(rng, (h2, NUM_GROUPS), dtype)))
    params.add('mcd.b3', ad.Tensor(init_bias(NUM_GROUPS, dtype)))


def has_mcd(params):
    return 'mcd.W1' in params


def mcd_input_dim(params):
    return params['mcd.W1'].shape[0]


def _weights(params, frozen):
    names = ('mcd.W1', 'mcd.b1', 'mcd.W2', 'mcd.b2', 'mcd.W3', 'mcd.b3')
    if frozen:
        return [ad.Tensor(params[n].data) for n in names]
    return [params[n] for n in names]


def mcd_logits(x, params, frozen=False):
    """
    Logit (N, 4) per le coppie concatenate x (N, 2 * dim).

    frozen=True usa i parametri come costanti (nessun gradiente verso l'MCD).
    """
    if x.shape[-1] != mcd_input_dim(params):
        raise ShapeError('mcd', x.shape, params['mcd.W1'].shape,
                         detail='dimensione della coppia diversa da quella del discriminatore')
    w1, b1, w2, b2, w3, b3 = _weights(params, frozen)
    hidden = ad.tanh(linear(x, w1, b1))
    hidden = ad.tanh(linear(hidden, w2, b2))
    return linear(hidden, w3, b3)


def mcd_forward(pair, params):
    """
    Probabilita' sui quattro gruppi per una coppia (vecA, vecB).

    Differenziabile rispetto ai parametri e agli ingressi (Tensor o array).
    """
    a, b = (ad.as_tensor(v, dtype=params['mcd.W1'].dtype) for v in pair)
    if a.ndim != 1 or a.shape != b.shape:
        raise ShapeError('mcd_forward', a.shape, b.shape, detail='servono due vettori della stessa dimensione')
    x = ad.reshape(ad.concat([a, b], axis=-1), (1, 2 * a.shape[0]))
    probs = ad.softmax(mcd_logits(x, params))
    return ad.reshape(probs, (NUM_GROUPS,))


def pair_matrix(pairs, detach=False):
    """
    Matrice (N, 2 * dim) delle coppie concatenate (primo, secondo).

    Le feature sono righe dei rispettivi bank: i gradienti tornano alle
    tracce di decodifica salvo detach=True.
    """
    if not pairs:
        raise ValueError("nessuna coppia")
    banks = []
    offsets = {}
    for a, b in pairs:
        for c in (a, b):
            key = id(c.bank)
            if key not in offsets:
                offsets[key] = sum(bank.shape[0] for bank in banks)
                banks.append(c.bank)
    dims = {bank.shape[1] for bank in banks}
    if len(dims) != 1:
        raise ShapeError('pair_matrix', *[bank.shape for bank in banks],
                         detail='feature di dimensioni diverse nella stessa coppia')
    table = banks[0] if len(banks) == 1 else ad.concat(banks, axis=0)
    if detach:
        table = table.detach()
    first = np.array([offsets[id(a.bank)] + a.row for a, _ in pairs], dtype=np.int64)
    second = np.array([offsets[id(b.bank)] + b.row for _, b in pairs], dtype=np.int64)
    return ad.concat([ad.take_rows(table, first), ad.take_rows(table, second)], axis=-1)


def _cross_entropy(logits, targets):
    log_probs = ad.log_softmax(logits)
    return ad.scale(ad.mean(ad.pick(log_probs, targets)), -1.0)


def discriminator_loss(groups, params):
    """
    Cross-entropy media a 4 classi su tutte le coppie dei gruppi.

    Le feature sono staccate dal grafo: il gradiente arriva solo all'MCD.
    """
    pairs, targets = [], []
    for g in groups:
        pairs.extend(g.pairs)
        targets.extend([g.index] * len(g.pairs))
    if not pairs:
        raise ValueError("tutti i gruppi sono vuoti")
    x = pair_matrix(pairs, detach=True)
    return _cross_entropy(mcd_logits(x, params), np.array(targets, dtype=np.int64))


def generator_confusion_loss(g2, g4, params):
    """
    Loss di confusione: le coppie di G2 vanno classificate come G1 e
    quelle di G4 come G3. Media sull'unione delle coppie; MCD congelato.
    """
    pairs = list(g2.pairs) + list(g4.pairs)
    if not pairs:
        raise ValueError("G2 e G4 sono entrambi vuoti")
    targets = np.array([GROUP_NAMES.index('G1')] * len(g2.pairs)
                       + [GROUP_NAMES.index('G3')] * len(g4.pairs), dtype=np.int64)
    x = pair_matrix(pairs)
    return _cross_entropy(mcd_logits(x, params, frozen=True), targets)


def predict_groups(groups, params):
    """
    Probabilita' MCD (numpy) per tutte le coppie dei gruppi.

    Returns:
        (probs (N, 4), etichette vere (N,))
    """
    pairs, targets = [], []
    for g in groups:
        pairs.extend(g.pairs)
        targets.extend([g.index] * len(g.pairs))
    if not pairs:
        raise ValueError("tutti i gruppi sono vuoti")
    with ad.no_grad():
        x = pair_matrix(pairs, detach=True)
        probs = ad.softmax(mcd_logits(x, params, frozen=True))
    return probs.data, np.array(targets, dtype=np.int64)
