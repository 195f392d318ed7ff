"""
Configurazione del laboratorio FASDA.
Modifica questi parametri per scegliere geometria, modello e schedule di training.
"""

import os

from .errors import ConfigError

# Directory di default per dataset e risultati
DATA_DIR = os.path.join(os.path.dirname(os.path.dirname(__file__)), 'data')
RUNS_DIR = os.path.join(os.path.dirname(os.path.dirname(__file__)), 'runs')

DIGITS = '0123456789'
LETTERS = 'ABCDEFGHIJKLMNOPQRSTUVWXYZ'

DEFAULTS = {
    # Geometria (desk: 16 x 64, 10 cifre + EOS)
    'preset': 'desk',
    'alphabet': DIGITS,
    'height': 16,
    'glyph_width': 8,
    'max_len': 8,
    'min_len': 1,
    # Encoder
    'conv1_channels': 4,
    'conv2_channels': 8,
    'column_stride': 4,
    'feature_dim': 32,
    'encoder_rnn': True,
    # Decoder con attenzione
    'hidden': 64,
    'att_dim': 64,
    'embed_dim': 16,
    'max_steps': 0,  # 0 = max_len + 1
    # Inclusive attending (lambda, eta del re-weighting)
    'ia_enabled': True,
    'lambda': 0.75,
    'eta': 1,
    # Discriminatore multi-classe
    'mcd_hidden1': 128,
    'mcd_hidden2': 128,
    # Training
    'gamma': 0.00005,
    'feature_variant': 'CR_plus',
    'batch_size': 64,
    'pretrain_optimizer': 'adadelta',
    'lr_adadelta': 1.0,
    'rho_adadelta': 0.95,
    'lr_adam': 0.001,
    'pretrain_steps': 1500,
    'mcd_pretrain_steps': 200,
    'adversarial_rounds': 2000,
    'd_steps_per_round': 1,
    'g_steps_per_round': 1,
    'finetune_steps': 500,
    'pairs_per_group': 64,
    'pair_images': 16,
    'source_target_ratio': 20,
    'seed': 1234,
    'precision': 'float64',
    # Valutazione
    'eval_batch': 256,
    'characc': 'mean',
}

# Preset di scala: 'full' usa immagini 256 x 32 e 37 classi
PRESETS = {
    'desk': {},
    'full': {
        'alphabet': DIGITS + LETTERS,
        'height': 32,
        'glyph_width': 32,
        'max_len': 8,
        'conv1_channels': 16,
        'conv2_channels': 32,
        'column_stride': 8,
        'feature_dim': 256,
        'hidden': 256,
        'att_dim': 256,
        'embed_dim': 64,
        'mcd_hidden1': 1024,
        'mcd_hidden2': 1024,
    },
}

# Domini predefiniti (sorgente pulita, target perturbati)
DOMINI = {
    'source': {
        'noise_sigma': 0.0,
        'invert': False,
        'shear': 0.0,
        'stroke_jitter': 0.0,
        'seed': 11,
    },
    'target': {
        'noise_sigma': 0.15,
        'invert': True,
        'shear': 0.2,
        'stroke_jitter': 0.0,
        'seed': 23,
    },
    'target_jitter': {
        'noise_sigma': 0.1,
        'invert': False,
        'shear': -0.15,
        'stroke_jitter': 0.6,
        'seed': 37,
    },
}

# Campione few-shot del dominio target
FEW_SHOT_TARGET = 150

# Chiavi che definiscono l'architettura: fissate una volta creato il modello
MODEL_KEYS = ('alphabet', 'height', 'glyph_width', 'max_len', 'conv1_channels', 'conv2_channels',
              'column_stride', 'feature_dim', 'encoder_rnn', 'hidden', 'att_dim', 'embed_dim',
              'mcd_hidden1', 'mcd_hidden2', 'precision')

FEATURE_VARIANTS = ('CR', 'CR_plus')
PRECISIONS = ('float64', 'float32')
OPTIMIZERS = ('adadelta', 'adam', 'sgd')


def default_config(preset='desk'):
    """Ritorna un dizionario di configurazione completo per il preset."""
    if preset not in PRESETS:
        raise ConfigError(f"preset sconosciuto: {preset!r} (disponibili: {list(PRESETS)})")
    cfg = dict(DEFAULTS)
    cfg.update(PRESETS[preset])
    cfg['preset'] = preset
    return cfg


def parse_value(key, text):
    """Converte il testo di un valore nel tipo del default corrispondente."""
    if key not in DEFAULTS:
        raise ConfigError(f"chiave di configurazione sconosciuta: {key!r}")
    ref = DEFAULTS[key]
    text = text.strip()
    try:
        if isinstance(ref, bool):
            low = text.lower()
            if low in ('1', 'true', 'yes', 'si', 'on'):
                return True
            if low in ('0', 'false', 'no', 'off'):
                return False
            raise ValueError(text)
        if isinstance(ref, int):
            return int(text)
        if isinstance(ref, float):
            return float(text)
    except ValueError:
        raise ConfigError(f"valore non valido per {key}: {text!r}") from None
    return text


def load_run_config(path, base=None):
    """
    Legge un file key=value (commenti con #).

    Args:
        path: file di configurazione
        base: configurazione di partenza (default: preset indicato nel file o 'desk')

    Returns:
        dizionario di configurazione
    """
    if not os.path.exists(path):
        raise ConfigError(f"file di configurazione non trovato: {path}")
    values = {}
    with open(path, 'r', encoding='utf-8') as f:
        for lineno, line in enumerate(f, start=1):
            line = line.split('#', 1)[0].strip()
            if not line:
                continue
            if '=' not in line:
                raise ConfigError(f"{path}:{lineno}: riga senza '=': {line!r}")
            key, text = line.split('=', 1)
            key = key.strip()
            values[key] = parse_value(key, text)

    cfg = dict(base) if base is not None else default_config(values.get('preset', 'desk'))
    cfg.update(values)
    return validate_config(cfg)


def save_run_config(cfg, path):
    """Scrive la configurazione risolta come key=value ordinato."""
    lines = []
    for key in sorted(cfg):
        value = cfg[key]
        if isinstance(value, bool):
            value = 'true' if value else 'false'
        lines.append(f"{key}={value}")
    with open(path, 'w', encoding='utf-8') as f:
        f.write('\n'.join(lines) + '\n')


def apply_overrides(cfg, overrides):
    """Applica override 'key=value' (es. da --set della CLI)."""
    cfg = dict(cfg)
    for item in overrides or []:
        if '=' not in item:
            raise ConfigError(f"override non valido (atteso key=value): {item!r}")
        key, text = item.split('=', 1)
        cfg[key.strip()] = parse_value(key.strip(), text)
    return validate_config(cfg)


def validate_config(cfg):
    """Controlla i vincoli sui parametri; solleva ConfigError."""
    unknown = sorted(set(cfg) - set(DEFAULTS))
    if unknown:
        raise ConfigError(f"chiavi di configurazione sconosciute: {unknown}")
    if cfg['gamma'] < 0:
        raise ConfigError(f"gamma deve essere >= 0, trovato {cfg['gamma']}")
    if not 0.0 <= cfg['lambda'] <= 1.0:
        raise ConfigError(f"lambda deve stare in [0, 1], trovato {cfg['lambda']}")
    if cfg['eta'] < 1:
        raise ConfigError(f"eta deve essere >= 1, trovato {cfg['eta']}")
    if cfg['feature_variant'] not in FEATURE_VARIANTS:
        raise ConfigError(f"feature_variant deve essere in {FEATURE_VARIANTS}")
    if cfg['precision'] not in PRECISIONS:
        raise ConfigError(f"precision deve essere in {PRECISIONS}")
    if cfg['pretrain_optimizer'] not in OPTIMIZERS:
        raise ConfigError(f"pretrain_optimizer deve essere in {OPTIMIZERS}")
    if cfg['characc'] not in ('mean', 'total'):
        raise ConfigError("characc deve essere 'mean' oppure 'total'")
    if len(set(cfg['alphabet'])) != len(cfg['alphabet']) or not cfg['alphabet']:
        raise ConfigError("alphabet deve contenere simboli distinti (almeno uno)")
    if not 1 <= cfg['min_len'] <= cfg['max_len']:
        raise ConfigError("serve 1 <= min_len <= max_len")
    positive = ['height', 'glyph_width', 'max_len', 'conv1_channels', 'conv2_channels',
                'column_stride', 'feature_dim', 'hidden', 'att_dim', 'embed_dim',
                'mcd_hidden1', 'mcd_hidden2', 'batch_size', 'pairs_per_group',
                'pair_images', 'source_target_ratio', 'd_steps_per_round',
                'g_steps_per_round', 'eval_batch']
    for key in positive:
        if cfg[key] < 1:
            raise ConfigError(f"{key} deve essere positivo, trovato {cfg[key]}")
    non_negative = ['pretrain_steps', 'mcd_pretrain_steps', 'adversarial_rounds',
                    'finetune_steps', 'max_steps']
    for key in non_negative:
        if cfg[key] < 0:
            raise ConfigError(f"{key} deve essere >= 0, trovato {cfg[key]}")
    return cfg


def check_model_keys(model_cfg, cfg):
    """Solleva ConfigError se cfg cambia l'architettura di un modello esistente."""
    changed = [k for k in MODEL_KEYS if model_cfg[k] != cfg[k]]
    if changed:
        raise ConfigError(f"chiavi di architettura non modificabili su un checkpoint: {changed}")
    return cfg


def max_decode_steps(cfg):
    """Numero massimo di passi di decodifica greedy."""
    return cfg['max_steps'] or cfg['max_len'] + 1


def threads_from_env():
    """Numero di worker per la generazione dati (FASDA_THREADS, default 1)."""
    raw = os.environ.get('FASDA_THREADS', '1')
    try:
        return max(1, int(raw))
    except ValueError:
        raise ConfigError(f"FASDA_THREADS non valido: {raw!r}") from None
