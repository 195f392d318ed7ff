"""Fixture comuni: modello e dati minuscoli in doppia precisione."""

import numpy as np
import pytest

from functions.config import default_config, validate_config
from functions.data_synth import Alphabet, Geometry, domain_from_preset, generate_dataset

TINY = {
    'alphabet': '0123',
    'height': 8,
    'glyph_width': 4,
    'max_len': 3,
    'min_len': 1,
    'conv1_channels': 2,
    'conv2_channels': 2,
    'column_stride': 2,
    'feature_dim': 4,
    'hidden': 4,
    'att_dim': 3,
    'embed_dim': 3,
    'mcd_hidden1': 6,
    'mcd_hidden2': 6,
    'batch_size': 6,
    'pair_images': 2,
    'pairs_per_group': 6,
    'source_target_ratio': 2,
    'pretrain_steps': 3,
    'mcd_pretrain_steps': 2,
    'adversarial_rounds': 2,
    'finetune_steps': 2,
    'eval_batch': 5,
    'seed': 7,
    'precision': 'float64',
}


def make_cfg(**overrides):
    cfg = default_config('desk')
    cfg.update(TINY)
    cfg.update(overrides)
    return validate_config(cfg)


def make_dataset(cfg, domain='source', n=12, split='train', offset=0):
    alphabet = Alphabet(cfg['alphabet'])
    geometry = Geometry(cfg['height'], cfg['glyph_width'], cfg['max_len'])
    return generate_dataset(n, domain_from_preset(domain), alphabet, geometry,
                            (cfg['min_len'], cfg['max_len']), split=split, offset=offset, threads=1)


@pytest.fixture
def tiny_cfg():
    return make_cfg()


@pytest.fixture
def source_ds(tiny_cfg):
    return make_dataset(tiny_cfg, 'source', n=12)


@pytest.fixture
def target_ds(tiny_cfg):
    return make_dataset(tiny_cfg, 'target', n=5)


@pytest.fixture
def rng():
    return np.random.default_rng(1234)
