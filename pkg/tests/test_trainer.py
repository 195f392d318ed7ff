import numpy as np
import pytest

from conftest import make_cfg, make_dataset
from functions.errors import DataError
from functions.metrics import greedy_predictions, mcd_group_accuracy
from functions.optim import Optimizer
from functions.trainer import (DISCRIMINATOR, GENERATOR, FreezeViolation, MetricsLog, adapt, adversarial_round,
                               check_compatible, collect_pair_groups, finetune, init_state, mixed_batch_sizes,
                               pretrain_attention, pretrain_mcd)


def _snapshot(state, prefixes):
    return state.params.snapshot(prefixes)


def _assert_same(a, b):
    assert a.keys() == b.keys()
    for name in a:
        np.testing.assert_array_equal(a[name], b[name], err_msg=name)


def test_mixed_batch_sizes():
    assert mixed_batch_sizes(63, 20) == (60, 3)
    assert mixed_batch_sizes(64, 20) == (61, 3)
    assert mixed_batch_sizes(6, 20) == (5, 1)
    assert mixed_batch_sizes(6, 2) == (4, 2)


def test_zero_pretrain_steps_leave_params_unchanged(tiny_cfg, source_ds):
    state = init_state(tiny_cfg)
    before = _snapshot(state, None)
    pretrain_attention(state, source_ds, steps=0)
    _assert_same(before, _snapshot(state, None))
    assert state.counters['step'] == 0


def test_pretraining_is_deterministic(source_ds):
    cfg = make_cfg(pretrain_steps=100)
    a = pretrain_attention(init_state(cfg), source_ds)
    b = pretrain_attention(init_state(cfg), source_ds)
    _assert_same(_snapshot(a, None), _snapshot(b, None))
    assert a.log.values('pretrain', 'L_att') == b.log.values('pretrain', 'L_att')
    assert a.counters['pretrain'] == 100


def test_overfits_a_single_sample():
    # ADADELTA, ottimizzatore di default del pre-training
    cfg = make_cfg(min_len=2, max_len=2, hidden=16, att_dim=8, embed_dim=4, batch_size=1, lr_adadelta=8.0)
    assert cfg['pretrain_optimizer'] == 'adadelta'
    ds = make_dataset(cfg, 'source', n=1)
    state = pretrain_attention(init_state(cfg), ds, steps=200)
    losses = np.array(state.log.values('pretrain', 'L_att'))
    assert len(losses) == 200
    assert np.mean(np.diff(losses[:50]) <= 1e-12) >= 0.9
    assert losses[-1] < 0.01
    assert greedy_predictions(state, ds.images()) == ds.labels()


def test_incompatible_dataset_is_rejected(tiny_cfg):
    state = init_state(tiny_cfg)
    other = make_dataset(make_cfg(max_len=2), 'source', n=2)
    with pytest.raises(DataError, match='geometria'):
        check_compatible(state, other)
    with pytest.raises(DataError):
        pretrain_attention(state, other, steps=1)


def test_pair_groups_respect_budget(tiny_cfg, source_ds, target_ds):
    state = init_state(tiny_cfg)
    groups = collect_pair_groups(state, source_ds, target_ds, np.random.default_rng(0))
    assert [g.group for g in groups] == ['G1', 'G2', 'G3', 'G4']
    assert all(len(g) <= tiny_cfg['pairs_per_group'] for g in groups)
    for g in groups:
        for a, b in g.pairs:
            assert a.domain == 'source'
            assert b.domain == ('target' if g.group in ('G2', 'G4') else 'source')


def test_mcd_pretraining_freezes_the_generator(tiny_cfg, source_ds, target_ds):
    state = pretrain_attention(init_state(tiny_cfg), source_ds)
    generator = _snapshot(state, GENERATOR)
    pretrain_mcd(state, source_ds, target_ds, steps=3)
    _assert_same(generator, _snapshot(state, GENERATOR))
    assert len(state.log.values('mcd', 'L_D')) == 3
    assert state.counters['mcd'] == 3


def test_adversarial_round_updates_each_block_in_turn(tiny_cfg, source_ds, target_ds):
    state = pretrain_attention(init_state(make_cfg(gamma=0.5)), source_ds)
    pretrain_mcd(state, source_ds, target_ds, steps=1)
    generator, mcd = _snapshot(state, GENERATOR), _snapshot(state, DISCRIMINATOR)
    losses = adversarial_round(state, source_ds, target_ds)
    assert {'L_D', 'L_att', 'L_AttG'} <= set(losses)
    assert any(not np.array_equal(generator[n], state.params[n].data) for n in generator)
    assert any(not np.array_equal(mcd[n], state.params[n].data) for n in mcd)
    if 'L_G' in losses:
        assert losses['L_AttG'] == pytest.approx(losses['L_att'] + 0.5 * losses['L_G'])


class _LeakyOptimizer(Optimizer):
    """Aggiorna di nascosto anche un parametro dell'encoder."""

    def step(self, params, names=None):
        super().step(params, names)
        params['enc.proj.b'].data += 1.0


def test_freeze_violation_is_detected(tiny_cfg, source_ds, target_ds):
    state = init_state(tiny_cfg)
    state.optimizers['mcd'] = _LeakyOptimizer('adam')
    with pytest.raises(FreezeViolation, match='mcd'):
        pretrain_mcd(state, source_ds, target_ds, steps=1)


def test_zero_gamma_adaptation_equals_mixed_finetuning(source_ds, target_ds):
    cfg = make_cfg(gamma=0.0)
    base = pretrain_attention(init_state(cfg), source_ds)
    adapted = adapt(base.clone(), source_ds, target_ds, rounds=3, mcd_steps=2)
    tuned = finetune(base.clone(), source_ds, target_ds, 'FT_S_T', steps=3)
    _assert_same(_snapshot(adapted, GENERATOR), _snapshot(tuned, GENERATOR))
    assert adapted.log.values('adv_g', 'L_att') == tuned.log.values('finetune', 'L_att')
    assert adapted.log.values('adv_g', 'L_G') == []


def test_adversarial_rounds_confuse_a_frozen_mcd(source_ds, target_ds):
    cfg = make_cfg(gamma=5.0, lr_adam=0.01, pair_images=4, pairs_per_group=16)
    state = pretrain_attention(init_state(cfg), source_ds, steps=20)
    pretrain_mcd(state, source_ds, target_ds, steps=150)

    def g1_vs_g2():
        groups = collect_pair_groups(state, source_ds, target_ds, np.random.default_rng(5))
        return mcd_group_accuracy(groups, state.params)['g1_vs_g2']

    before = g1_vs_g2()
    mcd = _snapshot(state, DISCRIMINATOR)
    # MCD fermo: i passi sul discriminatore dei round non lo aggiornano
    state.optimizers['mcd'] = Optimizer('sgd', lr=0.0)
    adapt(state, source_ds, target_ds, rounds=150, mcd_steps=0)
    _assert_same(mcd, _snapshot(state, DISCRIMINATOR))
    assert len(state.log.values('adv_g', 'L_G')) > 0
    assert before - g1_vs_g2() >= 0.10


def test_finetune_modes(tiny_cfg, source_ds, target_ds):
    state = pretrain_attention(init_state(tiny_cfg), source_ds)
    source_before = _snapshot(state, GENERATOR)
    finetune(state, None, target_ds, 'FT_T', steps=2)
    assert state.counters['finetune'] == 2
    assert any(not np.array_equal(source_before[n], state.params[n].data) for n in source_before)
    with pytest.raises(DataError):
        finetune(state, source_ds, None, 'FT_T')
    with pytest.raises(DataError):
        finetune(state, None, target_ds, 'FT_S_T')
    with pytest.raises(ValueError):
        finetune(state, source_ds, target_ds, 'FT_X')


def test_metrics_log_round_trip(tmp_path, tiny_cfg, source_ds):
    state = pretrain_attention(init_state(tiny_cfg), source_ds)
    path = tmp_path / 'metrics.tsv'
    state.log.save(path)
    loaded = MetricsLog.load(path)
    assert loaded.rows == state.log.rows
    assert list(loaded.to_frame().columns) == ['step', 'phase', 'loss_name', 'value']
