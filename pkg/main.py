#!/usr/bin/env python3
"""
FASDA lab - adattamento di dominio few-shot per il riconoscimento di sequenze.

Uso:
    python main.py gen-data --domain source target --n 2000 --out data/
    python main.py train-source --data data/source_train --out runs/base.ckpt
    python main.py adapt --source data/source_train --target data/target_train \\
                         --ckpt runs/base.ckpt --out runs/fasda.ckpt
    python main.py eval --ckpt runs/fasda.ckpt --data data/target_test --out runs/eval.tsv
"""

import argparse
import os
import sys

import numpy as np
import pandas as pd

from functions import autodiff as ad
from functions.checkpoint import load_checkpoint, save_checkpoint
from functions.config import (DATA_DIR, RUNS_DIR, apply_overrides, check_model_keys, default_config,
                              load_run_config, max_decode_steps, save_run_config)
from functions.data_synth import (Alphabet, Geometry, dataset_digest, generate_dataset, load_dataset,
                                  parse_domain, save_dataset)
from functions.decoder import decode, dump_attention
from functions.encoder import encode_batch, num_positions
from functions.errors import ConfigError, DataError, FasdaError
from functions.experiments import TOY_GAMMA, run_toy_replication
from functions.metrics import evaluate
from functions.pairs import extract_char_features, group_sizes, pairs_to_frame, sample_pairs
from functions.report import build_run_report, load_table, save_report
from functions.trainer import adapt, check_compatible, finetune, init_state, pretrain_attention, teacher_forward

FEATURE_FLAGS = {'cr': 'CR', 'cr+': 'CR_plus'}
FINETUNE_FLAGS = {'t': 'FT_T', 's+t': 'FT_S_T'}


# ============ CONFIGURAZIONE ============

def _overrides(args):
    """Override dai flag espliciti, nello stesso formato key=value di --set."""
    items = list(getattr(args, 'set', None) or [])
    simple = {'seed': 'seed', 'precision': 'precision', 'gamma': 'gamma', 'lam': 'lambda', 'eta': 'eta',
              'characc': 'characc'}
    for attr, key in simple.items():
        value = getattr(args, attr, None)
        if value is not None:
            items.append(f"{key}={value}")
    if getattr(args, 'no_ia', False):
        items.append("ia_enabled=false")
    if getattr(args, 'feature', None):
        items.append(f"feature_variant={FEATURE_FLAGS[args.feature]}")
    return items


def resolve_config(args, model_cfg=None):
    """
    Configurazione del run: checkpoint (se presente) o file/preset, poi
    override dei flag.
    """
    if model_cfg is not None:
        base = dict(model_cfg)
        if getattr(args, 'config', None):
            base = load_run_config(args.config, base=base)
        cfg = apply_overrides(base, _overrides(args))
        return check_model_keys(model_cfg, cfg)
    if getattr(args, 'config', None):
        base = load_run_config(args.config)
    else:
        base = default_config(getattr(args, 'preset', None) or 'desk')
    return apply_overrides(base, _overrides(args))


def _load_state(args):
    state = load_checkpoint(args.ckpt)
    state.cfg = resolve_config(args, model_cfg=state.cfg)
    return state


def _finish_run(state, out):
    """Salva checkpoint, configurazione risolta e log delle metriche accanto all'output."""
    save_checkpoint(state, out)
    save_run_config(state.cfg, f"{out}.config.txt")
    state.log.save(f"{out}.metrics.tsv")
    print(f"  Checkpoint: {out}")
    print(f"  Config:     {out}.config.txt")
    print(f"  Metriche:   {out}.metrics.tsv")


def _save_config_beside(cfg, path):
    """Configurazione risolta accanto a un output che non e' un checkpoint."""
    save_run_config(cfg, path)
    print(f"  Config:     {path}")


def _banner(text):
    print("=" * 50)
    print(text)
    print("=" * 50)


def _find_sample(dataset, sample_id):
    if sample_id is None:
        return 0
    if sample_id not in dataset.ids:
        raise DataError(f"{dataset.name}: campione {sample_id!r} non trovato")
    return dataset.ids.index(sample_id)


# ============ COMANDI ============

def cmd_gen_data(args):
    """Genera i dataset dei domini richiesti."""
    cfg = resolve_config(args)
    alphabet = Alphabet(cfg['alphabet'])
    geometry = Geometry(cfg['height'], cfg['glyph_width'], cfg['max_len'])
    os.makedirs(args.out, exist_ok=True)
    _banner(f"GENERAZIONE DATI ({geometry.height}x{geometry.width}, {len(alphabet.symbols)} simboli)")
    for text in args.domain:
        spec = parse_domain(text)
        ds = generate_dataset(args.n, spec, alphabet, geometry, (cfg['min_len'], cfg['max_len']),
                              split=args.split, offset=args.offset, verbose=True)
        directory = os.path.join(args.out, ds.name)
        save_dataset(ds, directory)
        print(f"  {directory}: {len(ds)} campioni, digest {dataset_digest(ds)[:16]}")
    save_run_config(cfg, os.path.join(args.out, 'config.txt'))


def cmd_train_source(args):
    """Pre-training della rete di attenzione sul dominio sorgente."""
    cfg = resolve_config(args)
    source = load_dataset(args.data)
    _banner(f"PRE-TRAINING SORGENTE ({len(source)} campioni, IA={'si' if cfg['ia_enabled'] else 'no'})")
    state = init_state(cfg)
    print(f"  Parametri: {state.params.numel()}")
    pretrain_attention(state, source, steps=args.steps, verbose=True)
    _finish_run(state, args.out)


def cmd_adapt(args):
    """Pre-training dell'MCD e round avversari."""
    state = _load_state(args)
    source = load_dataset(args.source)
    target = load_dataset(args.target)
    cfg = state.cfg
    _banner(f"ADATTAMENTO FASDA (gamma={cfg['gamma']}, feature={cfg['feature_variant']}, "
            f"IA={'si' if cfg['ia_enabled'] else 'no'})")
    print(f"  Sorgente: {len(source)} campioni, target: {len(target)} campioni")
    adapt(state, source, target, rounds=args.rounds, mcd_steps=args.mcd_steps, verbose=True)
    _finish_run(state, args.out)


def cmd_finetune(args):
    """Finetuning di confronto: solo target o sorgente + target."""
    state = _load_state(args)
    mode = FINETUNE_FLAGS[args.mode]
    target = load_dataset(args.target)
    source = load_dataset(args.source) if args.source else None
    if mode == 'FT_S_T' and source is None:
        raise ConfigError("--mode s+t richiede --source")
    _banner(f"FINETUNING {mode}")
    finetune(state, source, target, mode, steps=args.steps, verbose=True)
    _finish_run(state, args.out)


def cmd_eval(args):
    """Valuta un checkpoint su un dataset."""
    state = _load_state(args)
    dataset = load_dataset(args.data)
    report = evaluate(state, dataset)
    print(report.summary())
    if args.out:
        report.save(args.out)
        print(f"  Report: {args.out}")
        _save_config_beside(state.cfg, f"{args.out}.config.txt")


def cmd_inspect_pairs(args):
    """Coppie G1..G4 tra un'immagine sorgente e una target."""
    state = _load_state(args)
    source = load_dataset(args.source_data)
    target = load_dataset(args.target_data)
    check_compatible(state, source)
    check_compatible(state, target)
    i = _find_sample(source, args.source_sample)
    j = _find_sample(target, args.target_sample)
    variant = state.cfg['feature_variant']
    with ad.no_grad():
        s_trace = teacher_forward(state, source.images()[[i]], source.labels([i]))
        t_trace = teacher_forward(state, target.images()[[j]], target.labels([j]))
    groups = sample_pairs(
        extract_char_features(s_trace, source.labels([i]), variant, 'source', [source.ids[i]]),
        extract_char_features(t_trace, target.labels([j]), variant, 'target', [target.ids[j]]))
    sizes = group_sizes(groups)
    print(f"  Sorgente {source.ids[i]} '{source.alphabet.decode(source.samples[i].label)}', "
          f"target {target.ids[j]} '{target.alphabet.decode(target.samples[j].label)}'")
    print('  ' + '  '.join(f"|{k}|={v}" for k, v in sizes.items()) + f"  totale={sum(sizes.values())}")
    frame = pairs_to_frame(groups, state.alphabet)
    if args.out:
        frame.to_csv(args.out, sep='\t', index=False, lineterminator='\n')
        print(f"  Coppie: {args.out}")
        _save_config_beside(state.cfg, f"{args.out}.config.txt")
    else:
        sys.stdout.write(frame.to_csv(sep='\t', index=False, lineterminator='\n'))


def cmd_dump_attention(args):
    """Mappe di attenzione (PGM, TSV, PNG) di un campione."""
    state = _load_state(args)
    dataset = load_dataset(args.data)
    check_compatible(state, dataset)
    i = _find_sample(dataset, args.sample)
    image = dataset.images()[i]
    with ad.no_grad():
        feats = encode_batch(image[None], state.params, state.cfg)
        if args.teacher:
            trace = decode(feats, state.params, state.ia, mode='teacher', labels=dataset.labels([i]))
        else:
            trace = decode(feats, state.params, state.ia, mode='greedy', max_steps=max_decode_steps(state.cfg))
    written = dump_attention(trace, image, args.out, alphabet=state.alphabet)
    _save_config_beside(state.cfg, os.path.join(args.out, 'config.txt'))
    predicted = state.alphabet.decode(trace.emitted[0])
    print(f"  Campione {dataset.ids[i]}: etichetta '{dataset.alphabet.decode(dataset.samples[i].label)}', "
          f"predetto '{predicted}'")
    print(f"  M = {num_positions(image.shape[1], state.cfg['column_stride'])}, "
          f"passi = {trace.lengths[0]}, file scritti: {len(written)} in {args.out}")


def cmd_experiment(args):
    """Replica su task giocattolo: ordinamento dei metodi e probe di confusione."""
    cfg = resolve_config(args)
    _banner(f"REPLICA GIOCATTOLO (seed {args.seeds})")
    run_toy_replication(cfg, seeds=tuple(args.seeds), out_dir=args.out, verbose=True, gamma=args.gamma,
                        n_source=args.n_source, n_target=args.n_target, n_test=args.n_test)
    save_run_config(cfg, os.path.join(args.out, 'config.txt'))


def cmd_report(args):
    """Report HTML da log delle metriche e/o riepilogo degli esperimenti."""
    metrics = load_table(args.metrics) if args.metrics else None
    if metrics is not None and 'seed' in metrics.columns:
        metrics = metrics[metrics['seed'] == metrics['seed'].iloc[0]].drop(columns='seed')
    summary = load_table(args.summary) if args.summary else None
    probes = load_table(args.probe) if args.probe else None
    if metrics is None and summary is None and probes is None:
        raise ConfigError("indicare almeno uno tra --metrics, --summary, --probe")
    save_report(build_run_report(metrics, summary, probes, title=args.title), args.out,
                open_browser=args.open)


def cmd_info(args):
    """Mostra informazioni su un dataset o un checkpoint."""
    if args.data:
        ds = load_dataset(args.data)
        lengths = pd.Series([len(l) for l in ds.labels()])
        _banner(f"DATASET {ds.name}")
        print(f"  Campioni:   {len(ds)}")
        print(f"  Dominio:    {ds.domain}")
        print(f"  Geometria:  {ds.geometry.height}x{ds.geometry.width} (max {ds.geometry.max_len} simboli)")
        print(f"  Alfabeto:   {ds.alphabet.symbols}")
        print(f"  Lunghezze:  media {lengths.mean():.2f}, min {lengths.min()}, max {lengths.max()}")
        print(f"  Pixel medi: {float(np.mean(ds.images())):.4f}")
        print(f"  Digest:     {dataset_digest(ds)}")
    if args.ckpt:
        state = load_checkpoint(args.ckpt)
        _banner(f"CHECKPOINT {args.ckpt}")
        print(f"  Preset:      {state.cfg['preset']}, precisione {state.cfg['precision']}")
        print(f"  Parametri:   generatore {state.params.numel(('enc.', 'dec.'))}, "
              f"MCD {state.params.numel(('mcd.',))}")
        print(f"  Contatori:   {state.counters}")
        print(f"  Ottimizzatori: {sorted(state.optimizers)}")
        print(f"  IA: {state.cfg['ia_enabled']} (lambda={state.cfg['lambda']}, eta={state.cfg['eta']}), "
              f"feature {state.cfg['feature_variant']}")
    if not args.data and not args.ckpt:
        raise ConfigError("indicare --data o --ckpt")


# ============ PARSER ============

def _add_config_flags(p, preset=True):
    p.add_argument('--config', type=str, help='File di configurazione key=value')
    p.add_argument('--set', action='append', metavar='KEY=VALUE', help='Override di configurazione (ripetibile)')
    if preset:
        p.add_argument('--preset', choices=['desk', 'full'], help='Preset di scala (default desk)')
        p.add_argument('--precision', choices=['float64', 'float32'], help='Precisione dei tensori')
    p.add_argument('--seed', type=int, help='Seed del run')


def _add_ablation_flags(p):
    p.add_argument('--gamma', type=float, help='Peso della loss di confusione')
    p.add_argument('--lambda', dest='lam', type=float, help='Lambda di inclusive attending')
    p.add_argument('--eta', type=int, help='Raggio di inclusive attending')
    p.add_argument('--no-ia', action='store_true', help='Disabilita inclusive attending')
    p.add_argument('--feature', choices=sorted(FEATURE_FLAGS), help='Feature delle coppie (cr o cr+)')


def build_parser():
    parser = argparse.ArgumentParser(
        description='FASDA lab - adattamento di dominio few-shot per sequenze',
        formatter_class=argparse.RawDescriptionHelpFormatter,
        epilog="""
Esempi:
  python main.py gen-data --domain source target --n 2000 --out data/
  python main.py gen-data --domain target --n 150 --out data/ --set seed=7
  python main.py train-source --data data/source_train --out runs/base.ckpt
  python main.py adapt --source data/source_train --target data/target_train --ckpt runs/base.ckpt --out runs/fasda.ckpt
  python main.py adapt ... --gamma 0 --no-ia --feature cr     # ablazioni
  python main.py finetune --mode s+t --source ... --target ... --ckpt runs/base.ckpt --out runs/ft.ckpt
  python main.py eval --ckpt runs/fasda.ckpt --data data/target_test --out runs/eval.tsv
  python main.py experiment --out runs/toy --seeds 0 1 2
        """
    )

    subparsers = parser.add_subparsers(dest='command', help='Comandi disponibili')

    # Comando gen-data
    p = subparsers.add_parser('gen-data', help='Genera dataset sintetici (un dominio per --domain)')
    p.add_argument('--domain', nargs='+', required=True,
                   help="Domini: nome predefinito o 'nome:noise=0.1,invert=1,shear=0.2,jitter=0,seed=7'")
    p.add_argument('--n', type=int, required=True, help='Campioni per dominio')
    p.add_argument('--out', default=DATA_DIR, help='Directory di output (default data/)')
    p.add_argument('--split', choices=['train', 'test'], default='train')
    p.add_argument('--offset', type=int, default=0, help='Primo indice di rendering')
    _add_config_flags(p)

    # Comando train-source
    p = subparsers.add_parser('train-source', help='Pre-training su dati sorgente')
    p.add_argument('--data', required=True, help='Dataset sorgente')
    p.add_argument('--out', required=True, help='Checkpoint di output')
    p.add_argument('--steps', type=int, help='Passi di ottimizzazione (default: pretrain_steps)')
    _add_config_flags(p)
    _add_ablation_flags(p)

    # Comando adapt
    p = subparsers.add_parser('adapt', help='Pre-training MCD + round avversari')
    p.add_argument('--source', required=True)
    p.add_argument('--target', required=True)
    p.add_argument('--ckpt', required=True, help='Checkpoint pre-addestrato')
    p.add_argument('--out', required=True)
    p.add_argument('--rounds', type=int, help='Round avversari (default: adversarial_rounds)')
    p.add_argument('--mcd-steps', type=int, help='Passi di pre-training MCD (default: mcd_pretrain_steps)')
    _add_config_flags(p, preset=False)
    _add_ablation_flags(p)

    # Comando finetune
    p = subparsers.add_parser('finetune', help='Baseline FT w/ T e FT w/ S+T')
    p.add_argument('--mode', choices=sorted(FINETUNE_FLAGS), required=True)
    p.add_argument('--target', required=True)
    p.add_argument('--source', help='Dati sorgente (richiesti per s+t)')
    p.add_argument('--ckpt', required=True)
    p.add_argument('--out', required=True)
    p.add_argument('--steps', type=int, help='Passi (default: finetune_steps)')
    _add_config_flags(p, preset=False)

    # Comando eval
    p = subparsers.add_parser('eval', help='Accuratezza di sequenza e CharAcc')
    p.add_argument('--ckpt', required=True)
    p.add_argument('--data', required=True)
    p.add_argument('--out', help='Report TSV per campione')
    p.add_argument('--characc', choices=['mean', 'total'], help='CharAcc di dataset')
    _add_config_flags(p, preset=False)

    # Comando inspect-pairs
    p = subparsers.add_parser('inspect-pairs', help='Coppie G1..G4 tra due immagini')
    p.add_argument('--ckpt', required=True)
    p.add_argument('--source-data', required=True)
    p.add_argument('--source-sample', help='Id del campione sorgente (default: il primo)')
    p.add_argument('--target-data', required=True)
    p.add_argument('--target-sample', help='Id del campione target (default: il primo)')
    p.add_argument('--feature', choices=sorted(FEATURE_FLAGS))
    p.add_argument('--out', help='TSV di output (default: stdout)')

    # Comando dump-attention
    p = subparsers.add_parser('dump-attention', help='Mappe di attenzione di un campione')
    p.add_argument('--ckpt', required=True)
    p.add_argument('--data', required=True)
    p.add_argument('--sample', help='Id del campione (default: il primo)')
    p.add_argument('--out', required=True, help='Directory di output')
    p.add_argument('--teacher', action='store_true', help='Teacher forcing invece della decodifica greedy')
    p.add_argument('--lambda', dest='lam', type=float)
    p.add_argument('--eta', type=int)
    p.add_argument('--no-ia', action='store_true')

    # Comando experiment
    p = subparsers.add_parser('experiment', help='Replica giocattolo (metodi, ablazioni, probe)')
    p.add_argument('--out', default=os.path.join(RUNS_DIR, 'experiment'), help='Directory dei risultati')
    p.add_argument('--seeds', type=int, nargs='+', default=[0, 1, 2])
    p.add_argument('--n-source', type=int, default=2000)
    p.add_argument('--n-target', type=int, default=150)
    p.add_argument('--n-test', type=int, default=500)
    p.add_argument('--gamma', type=float, default=TOY_GAMMA,
                   help=f'Peso di L_G dei metodi FASDA (default {TOY_GAMMA})')
    _add_config_flags(p)

    # Comando report
    p = subparsers.add_parser('report', help='Report HTML da metriche/riepilogo')
    p.add_argument('--metrics', help='metrics.tsv')
    p.add_argument('--summary', help='summary.tsv di experiment')
    p.add_argument('--probe', help='probe.tsv di experiment')
    p.add_argument('--out', required=True)
    p.add_argument('--title', default='FASDA Report')
    p.add_argument('--open', action='store_true', help='Apri nel browser')

    # Comando info
    p = subparsers.add_parser('info', help='Info su un dataset o un checkpoint')
    p.add_argument('--data')
    p.add_argument('--ckpt')

    return parser


COMMANDS = {
    'gen-data': cmd_gen_data,
    'train-source': cmd_train_source,
    'adapt': cmd_adapt,
    'finetune': cmd_finetune,
    'eval': cmd_eval,
    'inspect-pairs': cmd_inspect_pairs,
    'dump-attention': cmd_dump_attention,
    'experiment': cmd_experiment,
    'report': cmd_report,
    'info': cmd_info,
}


def main(argv=None):
    parser = build_parser()
    args = parser.parse_args(argv)

    if args.command not in COMMANDS:
        parser.print_help()
        return 2
    try:
        COMMANDS[args.command](args)
    except FasdaError as e:
        print(f"errore: {e}", file=sys.stderr)
        return e.exit_code
    except OSError as e:
        print(f"errore: {e}", file=sys.stderr)
        return DataError.exit_code
    except ValueError as e:
        # parametri incompatibili con i dati (es. eta >= M)
        print(f"errore: {e}", file=sys.stderr)
        return ConfigError.exit_code
    return 0


if __name__ == '__main__':
    sys.exit(main())
