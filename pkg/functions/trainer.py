"""
Processo di training: pre-training della rete di attenzione, pre-training
dell'MCD, round avversari alternati con congelamento dei parametri e
finetuning di confronto (FT w/ T, FT w/ S+T).

Il "generatore" e' encoder + decoder (prefissi 'enc.' e 'dec.'); l'MCD ha
prefisso 'mcd.'. Le estrazioni casuali usano due generatori separati:
'data' per i mini-batch del generatore, 'pairs' per le immagini e il
sottocampionamento delle coppie nelle fasi dell'MCD.
"""

import copy
from dataclasses import dataclass, field

import numpy as np
import pandas as pd

from . import autodiff as ad
from .config import validate_config
from .data_synth import Alphabet, Geometry
from .decoder import IAConfig, attention_loss, decode, init_decoder
from .discriminator import (discriminator_loss, generator_confusion_loss, has_mcd, init_mcd,
                            mcd_input_dim, pair_feature_dim)
from .encoder import encode_batch, init_encoder
from .errors import DataError
from .optim import Optimizer
from .pairs import extract_char_features, merge_groups, sample_pairs, split_by_sample, subsample_balanced

GENERATOR = ('enc.', 'dec.')
DISCRIMINATOR = ('mcd.',)

FINETUNE_MODES = ('FT_T', 'FT_S_T')

# Sale dei generatori casuali derivati dal seed
_RNG_INIT = 0
_RNG_DATA = 1
_RNG_PAIRS = 2
_RNG_MCD_INIT = 3


class FreezeViolation(RuntimeError):
    """Un blocco di parametri congelato e' stato modificato."""


class MetricsLog:
    """Log delle loss: righe (step, phase, loss_name, value)."""

    COLUMNS = ['step', 'phase', 'loss_name', 'value']

    def __init__(self):
        self.rows = []

    def append(self, step, phase, name, value):
        self.rows.append((int(step), phase, name, float(value)))

    def values(self, phase=None, name=None):
        return [r[3] for r in self.rows
                if (phase is None or r[1] == phase) and (name is None or r[2] == name)]

    def to_frame(self):
        return pd.DataFrame(self.rows, columns=self.COLUMNS)

    def save(self, path):
        self.to_frame().to_csv(path, sep='\t', index=False, float_format='%.17g', lineterminator='\n')

    @classmethod
    def load(cls, path):
        log = cls()
        frame = pd.read_csv(path, sep='\t')
        for row in frame.itertuples(index=False):
            log.append(row.step, row.phase, row.loss_name, row.value)
        return log


@dataclass
class TrainState:
    """Tutto lo stato del training (cio' che il checkpoint salva)."""
    params: ad.ParamSet
    cfg: dict
    optimizers: dict = field(default_factory=dict)
    rngs: dict = field(default_factory=dict)
    counters: dict = field(default_factory=dict)
    log: MetricsLog = field(default_factory=MetricsLog)

    @property
    def alphabet(self):
        return Alphabet(self.cfg['alphabet'])

    @property
    def geometry(self):
        return Geometry(self.cfg['height'], self.cfg['glyph_width'], self.cfg['max_len'])

    @property
    def ia(self):
        return IAConfig.from_config(self.cfg)

    @property
    def dtype(self):
        return np.dtype(self.cfg['precision'])

    def clone(self):
        return copy.deepcopy(self)


def init_state(cfg):
    """Stato iniziale: encoder e decoder inizializzati, MCD creato piu' tardi."""
    cfg = validate_config(dict(cfg))
    dtype = np.dtype(cfg['precision'])
    rng = np.random.default_rng([cfg['seed'], _RNG_INIT])
    params = ad.ParamSet()
    init_encoder(params, cfg, rng, dtype)
    init_decoder(params, cfg, Alphabet(cfg['alphabet']).num_classes, rng, dtype)
    rngs = {
        'data': np.random.default_rng([cfg['seed'], _RNG_DATA]),
        'pairs': np.random.default_rng([cfg['seed'], _RNG_PAIRS]),
    }
    counters = {'step': 0, 'pretrain': 0, 'mcd': 0, 'adv_round': 0, 'finetune': 0}
    return TrainState(params=params, cfg=cfg, rngs=rngs, counters=counters)


def check_compatible(state, dataset):
    """Solleva DataError se il dataset non ha geometria e alfabeto del modello."""
    if dataset.alphabet != state.alphabet:
        raise DataError(f"{dataset.name}: alfabeto {dataset.alphabet.symbols!r} diverso da quello "
                        f"del modello {state.cfg['alphabet']!r}")
    if dataset.geometry != state.geometry:
        raise DataError(f"{dataset.name}: geometria {dataset.geometry} diversa da quella "
                        f"del modello {state.geometry}")


def make_optimizer(kind, cfg):
    if kind == 'adadelta':
        return Optimizer('adadelta', lr=cfg['lr_adadelta'], rho=cfg['rho_adadelta'])
    if kind == 'adam':
        return Optimizer('adam', lr=cfg['lr_adam'])
    return Optimizer('sgd', lr=cfg['lr_adam'])


def _optimizer(state, name, kind):
    if name not in state.optimizers:
        state.optimizers[name] = make_optimizer(kind, state.cfg)
    return state.optimizers[name]


def mixed_batch_sizes(batch_size, ratio):
    """Composizione di un batch misto: (n_source, n_target) con n_s / n_t ~ ratio."""
    n_target = max(1, batch_size // (ratio + 1))
    return batch_size - n_target, n_target


def draw_indices(rng, available, k):
    """k indici senza reinserimento (tutti, permutati, se k >= available)."""
    return rng.choice(available, size=min(k, available), replace=False)


def teacher_forward(state, images, labels):
    """Encoder + decoder in teacher forcing su un batch."""
    feats = encode_batch(images, state.params, state.cfg)
    return decode(feats, state.params, state.ia, mode='teacher', labels=labels)


def _optimizer_step(state, optimizer, trainable, frozen, phase, losses):
    """Passo dell'ottimizzatore con controllo del blocco congelato e log delle loss."""
    names = state.params.names(trainable)
    before = state.params.digest(frozen)
    optimizer.step(state.params, names)
    if state.params.digest(frozen) != before:
        raise FreezeViolation(f"parametri {frozen} modificati durante la fase {phase}")
    state.counters['step'] += 1
    for name, value in losses.items():
        state.log.append(state.counters['step'], phase, name, value)


def _progress(verbose, phase, i, total, losses):
    if not verbose:
        return
    every = max(1, total // 10)
    if (i + 1) % every == 0 or i + 1 == total:
        txt = '  '.join(f"{k}={v:.4f}" for k, v in losses.items())
        print(f"  [{phase}] {i + 1}/{total}  {txt}")


# ============ PRE-TRAINING ============

def pretrain_attention(state, source, steps=None, verbose=False):
    """
    Pre-training di encoder e decoder con L_att sui dati sorgente etichettati.

    Ottimizzatore: cfg['pretrain_optimizer'] (default ADADELTA).
    """
    check_compatible(state, source)
    steps = state.cfg['pretrain_steps'] if steps is None else steps
    optimizer = _optimizer(state, 'gen_pre', state.cfg['pretrain_optimizer'])
    images = source.images()
    if verbose:
        print(f"  Pre-training attenzione: {steps} passi su {len(source)} campioni")
    for i in range(steps):
        idx = draw_indices(state.rngs['data'], len(source), state.cfg['batch_size'])
        trace = teacher_forward(state, images[idx], source.labels(idx))
        loss = attention_loss(trace)
        loss.backward()
        losses = {'L_att': loss.item()}
        _optimizer_step(state, optimizer, GENERATOR, DISCRIMINATOR, 'pretrain', losses)
        state.counters['pretrain'] += 1
        _progress(verbose, 'pretrain', i, steps, losses)
    return state


# ============ COPPIE ============

def collect_pair_groups(state, source, target, rng, n_images=None, per_group=None):
    """
    Gruppi G1..G4 da immagini estratte con rng, generatore staccato.

    Ogni immagine sorgente k e' accoppiata alla target k mod n_t; i gruppi
    uniti sono bilanciati a per_group coppie.
    """
    cfg = state.cfg
    n_images = cfg['pair_images'] if n_images is None else n_images
    per_group = cfg['pairs_per_group'] if per_group is None else per_group
    src_idx = draw_indices(rng, len(source), n_images)
    tgt_idx = draw_indices(rng, len(target), n_images)
    with ad.no_grad():
        src_trace = teacher_forward(state, source.images()[src_idx], source.labels(src_idx))
        tgt_trace = teacher_forward(state, target.images()[tgt_idx], target.labels(tgt_idx))
    groups = _pair_images(
        extract_char_features(src_trace, source.labels(src_idx), cfg['feature_variant'], 'source',
                              [source.ids[i] for i in src_idx]),
        extract_char_features(tgt_trace, target.labels(tgt_idx), cfg['feature_variant'], 'target',
                              [target.ids[i] for i in tgt_idx]))
    return subsample_balanced(groups, per_group, rng)


def _pair_images(source_chars, target_chars):
    src = split_by_sample(source_chars)
    tgt = split_by_sample(target_chars)
    return merge_groups(sample_pairs(chars, tgt[k % len(tgt)]) for k, chars in enumerate(src))


def ensure_mcd(state):
    """Crea i parametri dell'MCD se mancano (la dimensione dipende dalla variante)."""
    dim = pair_feature_dim(state.cfg)
    if has_mcd(state.params):
        if mcd_input_dim(state.params) != 2 * dim:
            raise DataError(f"MCD addestrato per feature di dimensione {mcd_input_dim(state.params) // 2}, "
                            f"variante {state.cfg['feature_variant']} richiede {dim}")
        return
    rng = np.random.default_rng([state.cfg['seed'], _RNG_MCD_INIT])
    init_mcd(state.params, dim, state.cfg, rng, state.dtype)


def _discriminator_step(state, source, target, phase):
    groups = collect_pair_groups(state, source, target, state.rngs['pairs'])
    loss = discriminator_loss(groups, state.params)
    loss.backward()
    losses = {'L_D': loss.item()}
    optimizer = _optimizer(state, 'mcd', 'adam')
    _optimizer_step(state, optimizer, DISCRIMINATOR, GENERATOR, phase, losses)
    return losses


def pretrain_mcd(state, source, target, steps=None, verbose=False):
    """Pre-training dell'MCD con L_D; rete di attenzione congelata."""
    if len(target) == 0:
        raise DataError("insieme target vuoto")
    check_compatible(state, source)
    check_compatible(state, target)
    ensure_mcd(state)
    steps = state.cfg['mcd_pretrain_steps'] if steps is None else steps
    if verbose:
        print(f"  Pre-training MCD: {steps} passi")
    for i in range(steps):
        losses = _discriminator_step(state, source, target, 'mcd')
        state.counters['mcd'] += 1
        _progress(verbose, 'mcd', i, steps, losses)
    return state


# ============ ROUND AVVERSARI ============

def mixed_batch(state, source, target):
    """Indici di un batch misto sorgente/target estratti dal generatore 'data'."""
    n_s, n_t = mixed_batch_sizes(state.cfg['batch_size'], state.cfg['source_target_ratio'])
    rng = state.rngs['data']
    return draw_indices(rng, len(source), n_s), draw_indices(rng, len(target), n_t)


def _mixed_forward(state, source, target):
    src_idx, tgt_idx = mixed_batch(state, source, target)
    images = np.concatenate([source.images()[src_idx], target.images()[tgt_idx]])
    src_labels = source.labels(src_idx)
    tgt_labels = target.labels(tgt_idx)
    trace = teacher_forward(state, images, src_labels + tgt_labels)
    return trace, src_labels, tgt_labels


def _generator_step(state, source, target):
    """L_Att-G = gamma * L_G + L_att; L_att sull'unione sorgente + target."""
    cfg = state.cfg
    trace, src_labels, tgt_labels = _mixed_forward(state, source, target)
    l_att = attention_loss(trace)
    losses = {'L_att': l_att.item()}
    total = l_att
    if cfg['gamma'] > 0:
        # traccia condivisa: sorgenti nelle prime righe del batch, target dopo
        variant = cfg['feature_variant']
        src_chars = extract_char_features(trace, src_labels[:cfg['pair_images']], variant, 'source')
        tgt_chars = extract_char_features(trace, tgt_labels, variant, 'target',
                                          batch_offset=len(src_labels))
        groups = subsample_balanced(_pair_images(src_chars, tgt_chars), cfg['pairs_per_group'],
                                    state.rngs['pairs'])
        _, g2, _, g4 = groups
        if len(g2) + len(g4) > 0:
            l_g = generator_confusion_loss(g2, g4, state.params)
            losses['L_G'] = l_g.item()
            total = ad.add(l_att, ad.scale(l_g, cfg['gamma']))
    losses['L_AttG'] = total.item()
    total.backward()
    _optimizer_step(state, _optimizer(state, 'gen', 'adam'), GENERATOR, DISCRIMINATOR, 'adv_g', losses)
    return losses


def adversarial_round(state, source, target):
    """d_steps passi sull'MCD (generatore congelato), poi g_steps sul generatore (MCD congelato)."""
    ensure_mcd(state)
    losses = {}
    for _ in range(state.cfg['d_steps_per_round']):
        losses.update(_discriminator_step(state, source, target, 'adv_d'))
    for _ in range(state.cfg['g_steps_per_round']):
        losses.update(_generator_step(state, source, target))
    state.counters['adv_round'] += 1
    return losses


def adapt(state, source, target, rounds=None, mcd_steps=None, verbose=False):
    """Pre-training dell'MCD seguito dai round avversari."""
    if len(target) == 0:
        raise DataError("insieme target vuoto")
    check_compatible(state, source)
    check_compatible(state, target)
    pretrain_mcd(state, source, target, steps=mcd_steps, verbose=verbose)
    rounds = state.cfg['adversarial_rounds'] if rounds is None else rounds
    if verbose:
        print(f"  Adattamento avversario: {rounds} round (gamma={state.cfg['gamma']})")
    for i in range(rounds):
        losses = adversarial_round(state, source, target)
        _progress(verbose, 'adv', i, rounds, losses)
    return state


# ============ FINETUNING ============

def finetune(state, source, target, mode, steps=None, verbose=False):
    """
    Finetuning di confronto con L_att e Adam.

    FT_T: solo target. FT_S_T: batch misti con rapporto source_target_ratio.
    """
    if mode not in FINETUNE_MODES:
        raise ValueError(f"modalita' di finetuning sconosciuta: {mode!r}")
    if target is None or len(target) == 0:
        raise DataError("insieme target vuoto")
    check_compatible(state, target)
    if mode == 'FT_S_T':
        if source is None:
            raise DataError("FT_S_T richiede anche i dati sorgente")
        check_compatible(state, source)
    steps = state.cfg['finetune_steps'] if steps is None else steps
    optimizer = _optimizer(state, 'gen', 'adam')
    images = target.images()
    if verbose:
        print(f"  Finetuning {mode}: {steps} passi")
    for i in range(steps):
        if mode == 'FT_T':
            idx = draw_indices(state.rngs['data'], len(target), state.cfg['batch_size'])
            trace = teacher_forward(state, images[idx], target.labels(idx))
        else:
            trace, _, _ = _mixed_forward(state, source, target)
        loss = attention_loss(trace)
        loss.backward()
        losses = {'L_att': loss.item()}
        _optimizer_step(state, optimizer, GENERATOR, DISCRIMINATOR, 'finetune', losses)
        state.counters['finetune'] += 1
        _progress(verbose, 'finetune', i, steps, losses)
    return state
