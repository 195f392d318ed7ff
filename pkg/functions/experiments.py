"""
Replica in scala ridotta del confronto tra metodi di adattamento.

Task a due domini: sorgente pulita, target invertito + rumore + shear, 150
campioni target etichettati. Per ogni seed si confrontano:
    Source-Only, FT_T, FT_S_T, FASDA-CR, FASDA-CR+, FASDA-IA-CR+
e si misura il probe G1 vs G2 prima e dopo l'adattamento.
"""

import os
import time

import numpy as np
import pandas as pd

from .config import DOMINI, FEW_SHOT_TARGET, apply_overrides
from .data_synth import Alphabet, Geometry, domain_from_preset, generate_dataset
from .metrics import evaluate, mcd_group_accuracy, probe_domain_confusion
from .report import build_run_report, save_report
from .trainer import adapt, collect_pair_groups, finetune, init_state, pretrain_attention

METHODS = ('Source-Only', 'FT_T', 'FT_S_T', 'FASDA-CR', 'FASDA-CR+', 'FASDA-IA-CR+')

# Salto tra i seed dei domini di seed consecutivi
_DOMAIN_SEED_STRIDE = 1000
# Offset di rendering del test target (indici distinti dal train)
_TEST_OFFSET = 1_000_000
# gamma dei metodi FASDA nella replica: L_G e' una media sulle coppie, non una somma
TOY_GAMMA = 0.1


def toy_datasets(cfg, run, n_source=2000, n_target=FEW_SHOT_TARGET, n_test=500, target='target'):
    """
    Dataset del task giocattolo per il run indicato.

    Returns:
        dict con 'source', 'target' (few-shot), 'target_test', 'source_test'
    """
    alphabet = Alphabet(cfg['alphabet'])
    geometry = Geometry(cfg['height'], cfg['glyph_width'], cfg['max_len'])
    lengths = (cfg['min_len'], cfg['max_len'])
    src = domain_from_preset('source', seed=DOMINI['source']['seed'] + _DOMAIN_SEED_STRIDE * run)
    tgt = domain_from_preset(target, seed=DOMINI[target]['seed'] + _DOMAIN_SEED_STRIDE * run)
    return {
        'source': generate_dataset(n_source, src, alphabet, geometry, lengths, 'train'),
        'target': generate_dataset(n_target, tgt, alphabet, geometry, lengths, 'train'),
        'target_test': generate_dataset(n_test, tgt, alphabet, geometry, lengths, 'test',
                                        offset=_TEST_OFFSET),
        'source_test': generate_dataset(min(n_test, n_source), src, alphabet, geometry, lengths, 'test',
                                        offset=_TEST_OFFSET),
    }


def _probe(state, data, seed):
    """Probe G1 vs G2 e accuratezza MCD su coppie dei test set."""
    rng = np.random.default_rng([seed, 99])
    cfg = state.cfg
    groups = collect_pair_groups(state, data['source_test'], data['target_test'], rng,
                                 n_images=4 * cfg['pair_images'], per_group=4 * cfg['pairs_per_group'])
    out = {'probe': probe_domain_confusion(groups[0], groups[1], seed=seed)}
    out.update({f"mcd_{k}": v for k, v in mcd_group_accuracy(groups, state.params).items()})
    return out


def generator_budget(cfg):
    """Passi del generatore di ogni metodo adattato: quelli dei round avversari."""
    return cfg['adversarial_rounds'] * cfg['g_steps_per_round']


def _adaptation_steps(state):
    return len(state.log.values('finetune', 'L_att')) + len(state.log.values('adv_g', 'L_att'))


def run_seed(cfg, seed, run=0, data=None, verbose=True, gamma=TOY_GAMMA, **sizes):
    """
    Tutti i metodi per un seed.

    FT_T e FT_S_T fanno generator_budget(cfg) passi, come i metodi FASDA;
    questi ultimi usano `gamma` al posto di cfg['gamma'].

    Returns:
        (righe del riepilogo, riga del probe, log delle metriche FASDA-IA-CR+)
    """
    base_cfg = apply_overrides(cfg, [f"seed={seed}"])
    data = data or toy_datasets(base_cfg, run, **sizes)
    no_ia_cfg = dict(base_cfg, ia_enabled=False)
    ia_cfg = dict(base_cfg, ia_enabled=True)
    steps = generator_budget(base_cfg)

    if verbose:
        print(f"\n[seed {seed}] Pre-training sorgente (senza IA e con IA)")
    base = pretrain_attention(init_state(no_ia_cfg), data['source'], verbose=verbose)
    base_ia = pretrain_attention(init_state(ia_cfg), data['source'], verbose=verbose)

    states = {'Source-Only': base}
    states['FT_T'] = finetune(base.clone(), None, data['target'], 'FT_T', steps=steps, verbose=verbose)
    states['FT_S_T'] = finetune(base.clone(), data['source'], data['target'], 'FT_S_T', steps=steps,
                                verbose=verbose)
    for method, start, variant in (('FASDA-CR', base, 'CR'), ('FASDA-CR+', base, 'CR_plus'),
                                   ('FASDA-IA-CR+', base_ia, 'CR_plus')):
        state = start.clone()
        state.cfg = dict(state.cfg, feature_variant=variant, gamma=gamma)
        if verbose:
            print(f"[seed {seed}] {method}")
        if method == 'FASDA-IA-CR+':
            # MCD pre-addestrato: il probe "prima" vede l'MCD appena addestrato
            adapt(state, data['source'], data['target'], rounds=0, verbose=verbose)
            before = _probe(state, data, seed)
            adapt(state, data['source'], data['target'], mcd_steps=0, verbose=verbose)
            after = _probe(state, data, seed)
            fasda_log = state.log
        else:
            adapt(state, data['source'], data['target'], verbose=verbose)
        states[method] = state

    rows = []
    for method in METHODS:
        report = evaluate(states[method], data['target_test'])
        rows.append({'method': method, 'seed': seed,
                     'sequence_accuracy': report.sequence_accuracy, 'char_acc': report.char_acc,
                     'adapt_steps': _adaptation_steps(states[method])})
        if verbose:
            print(f"  {method:<14} seq={report.sequence_accuracy:.4f}  char={report.char_acc:.4f}")

    probe_row = {'seed': seed, 'probe_before': before['probe'], 'probe_after': after['probe']}
    for key in before:
        if key.startswith('mcd_'):
            probe_row[f"{key}_before"] = before[key]
            probe_row[f"{key}_after"] = after.get(key, np.nan)
    return rows, probe_row, fasda_log


def run_toy_replication(cfg, seeds=(0, 1, 2), out_dir=None, verbose=True, gamma=TOY_GAMMA, **sizes):
    """
    Replica completa su piu' seed (gamma: peso di L_G dei metodi FASDA).

    Scrive in out_dir (se indicato) summary.tsv, probe.tsv, metrics.tsv e
    report.html.

    Returns:
        (riepilogo per metodo e seed, probe per seed)
    """
    start = time.time()
    rows, probes, logs = [], [], []
    for run, seed in enumerate(seeds):
        seed_rows, probe_row, log = run_seed(cfg, seed, run=run, verbose=verbose, gamma=gamma, **sizes)
        rows.extend(seed_rows)
        probes.append(probe_row)
        frame = log.to_frame()
        frame.insert(0, 'seed', seed)
        logs.append(frame)

    summary = pd.DataFrame(rows, columns=['method', 'seed', 'sequence_accuracy', 'char_acc', 'adapt_steps'])
    probe_frame = pd.DataFrame(probes)
    if verbose:
        print('\n' + '=' * 50)
        print("MEDIE SUI SEED (test target)")
        print('=' * 50)
        print(ordering_table(summary).to_string(index=False, float_format='{:.4f}'.format))
        print(f"\nTempo totale: {time.time() - start:.0f} s")

    if out_dir:
        os.makedirs(out_dir, exist_ok=True)
        summary.to_csv(os.path.join(out_dir, 'summary.tsv'), sep='\t', index=False,
                       float_format='%.17g', lineterminator='\n')
        probe_frame.to_csv(os.path.join(out_dir, 'probe.tsv'), sep='\t', index=False,
                           float_format='%.17g', lineterminator='\n')
        metrics = pd.concat(logs, ignore_index=True)
        metrics.to_csv(os.path.join(out_dir, 'metrics.tsv'), sep='\t', index=False,
                       float_format='%.17g', lineterminator='\n')
        html = build_run_report(metrics=metrics[metrics['seed'] == seeds[0]].drop(columns='seed'),
                                summary=summary, probes=probe_frame,
                                title="FASDA - replica su task giocattolo")
        save_report(html, os.path.join(out_dir, 'report.html'), verbose=verbose)
    return summary, probe_frame


def ordering_table(summary):
    """Medie per metodo nell'ordine di METHODS."""
    means = summary.groupby('method')[['sequence_accuracy', 'char_acc']].mean()
    means = means.reindex([m for m in METHODS if m in means.index])
    return means.reset_index()
