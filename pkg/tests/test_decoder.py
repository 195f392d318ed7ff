import itertools

import numpy as np
import pytest

from conftest import make_cfg
from functions import autodiff as ad
from functions.data_synth import Alphabet
from functions.decoder import (IAConfig, attention_loss, attention_weights, context, decode, dump_attention,
                               heatmap_pixels, inclusive_kernel, inclusive_reweight, init_decoder, predictions,
                               read_attention_tsv, recurrent_step, start_token)

IA = IAConfig(enabled=True, lam=0.75, eta=1)
NO_IA = IAConfig(enabled=False)


def _decoder(cfg, num_classes=5, seed=0):
    params = ad.ParamSet()
    init_decoder(params, cfg, num_classes, np.random.default_rng(seed))
    return params


def _features(rng, m=6, batch=2, dim=4):
    return ad.Tensor(rng.standard_normal((m, batch, dim)))


# ============ ATTENZIONE ============

def test_zero_energies_give_uniform_weights(rng):
    cfg = make_cfg()
    params = _decoder(cfg)
    params['dec.w'].data[:] = 0.0
    alpha = attention_weights(_features(rng), ad.Tensor(rng.standard_normal((2, 4))), params).data
    np.testing.assert_allclose(alpha, np.full((2, 6), 1 / 6), atol=1e-15)


def test_single_position_gets_all_weight(rng):
    params = _decoder(make_cfg())
    alpha = attention_weights(_features(rng, m=1), ad.Tensor(np.zeros((2, 4))), params).data
    np.testing.assert_array_equal(alpha, [[1.0], [1.0]])


def test_energies_ln2_and_zero_give_two_thirds():
    params = ad.ParamSet({
        'dec.V': np.array([[1.0]]),
        'dec.W': np.zeros((3, 1)),
        'dec.b': np.zeros(1),
        'dec.w': np.array([[1.0]]),
    })
    features = ad.Tensor(np.array([[[np.arctanh(np.log(2.0))]], [[0.0]]]))
    alpha = attention_weights(features, ad.Tensor(np.zeros((1, 3))), params).data
    np.testing.assert_allclose(alpha, [[2 / 3, 1 / 3]], atol=1e-12)


# ============ INCLUSIVE ATTENDING ============

@pytest.mark.parametrize('alpha,expected', [
    ([1.0, 0.0, 0.0], [0.875, 0.125, 0.0]),
    ([0.5, 0.0, 0.5], [0.4375, 0.125, 0.4375]),
    ([0.0, 1.0, 0.0], [0.125, 0.75, 0.125]),
])
def test_inclusive_reweight_hand_values(alpha, expected):
    np.testing.assert_allclose(inclusive_reweight(np.array(alpha), IA), expected, atol=1e-12)


def test_lambda_one_and_disabled_are_identity(rng):
    alpha = rng.dirichlet(np.ones(7))
    np.testing.assert_array_equal(inclusive_reweight(alpha, IAConfig(lam=1.0, eta=2)), alpha)
    assert inclusive_reweight(alpha, NO_IA) is alpha


def test_uniform_is_a_fixed_point():
    for m, eta in [(3, 1), (5, 2), (9, 4)]:
        alpha = np.full(m, 1 / m)
        np.testing.assert_allclose(inclusive_reweight(alpha, IAConfig(lam=0.3, eta=eta)), alpha, atol=1e-15)


def test_mass_is_conserved_on_random_simplices(rng):
    combos = list(itertools.product([0.0, 0.25, 0.75, 1.0], [1, 2], range(3, 33)))
    per_combo = 10_000 // len(combos) + 1
    for lam, eta, m in combos:
        alpha = rng.dirichlet(np.ones(m), size=per_combo)
        out = inclusive_reweight(alpha, IAConfig(lam=lam, eta=eta))
        assert np.all(np.abs(out.sum(axis=-1) - 1.0) < 1e-9)
        assert np.all(out >= 0.0)


def test_reweight_is_linear(rng):
    cfg = IAConfig(lam=0.4, eta=2)
    x, y = rng.uniform(size=6), rng.uniform(size=6)
    np.testing.assert_allclose(inclusive_reweight(2.0 * x - 3.0 * y, cfg),
                               2.0 * inclusive_reweight(x, cfg) - 3.0 * inclusive_reweight(y, cfg), atol=1e-12)


def test_kernel_rows_and_columns_sum_to_one():
    kernel = inclusive_kernel(6, IAConfig(lam=0.2, eta=3))
    np.testing.assert_allclose(kernel.sum(axis=0), 1.0, atol=1e-15)
    np.testing.assert_allclose(kernel.sum(axis=1), 1.0, atol=1e-15)


def test_eta_must_be_smaller_than_m():
    with pytest.raises(ValueError, match='eta'):
        inclusive_reweight(np.full(3, 1 / 3), IAConfig(lam=0.75, eta=3))
    with pytest.raises(ValueError):
        IAConfig(lam=1.5)
    with pytest.raises(ValueError):
        IAConfig(eta=0)


def test_tensor_path_matches_numpy_path(rng):
    alpha = rng.dirichlet(np.ones(5), size=3)
    out = inclusive_reweight(ad.Tensor(alpha), IA)
    assert isinstance(out, ad.Tensor)
    np.testing.assert_array_equal(out.data, inclusive_reweight(alpha, IA))


# ============ CONTESTO E PASSO RICORRENTE ============

def test_context_cases(rng):
    features = _features(rng, m=3, batch=1, dim=4)
    one_hot = context(features, ad.Tensor(np.array([[0.0, 1.0, 0.0]]))).data
    np.testing.assert_allclose(one_hot[0], features.data[1, 0], atol=1e-15)
    uniform = context(features, ad.Tensor(np.full((1, 3), 1 / 3))).data
    np.testing.assert_allclose(uniform[0], features.data[:, 0].mean(axis=0), atol=1e-12)

    basis = ad.Tensor(np.array([[[1.0, 0.0]], [[0.0, 1.0]]]))
    np.testing.assert_allclose(context(basis, ad.Tensor(np.array([[0.25, 0.75]]))).data, [[0.25, 0.75]])


def test_context_rejects_wrong_weight_shape(rng):
    with pytest.raises(ValueError):
        context(_features(rng, m=3, batch=1), ad.Tensor(np.full((1, 4), 0.25)))


def test_recurrent_step_with_zero_weights_is_zero(rng):
    params = _decoder(make_cfg())
    params['dec.lstm.W'].data[:] = 0.0
    params['dec.lstm.b'].data[:] = 0.0
    zeros = ad.Tensor(np.zeros((2, 4)))
    h, c = recurrent_step(np.array([5, 1]), ad.Tensor(rng.standard_normal((2, 4))), (zeros, zeros), params)
    np.testing.assert_array_equal(h.data, 0.0)
    np.testing.assert_array_equal(c.data, 0.0)


# ============ DECODIFICA ============

def test_teacher_forcing_runs_longest_label_plus_eos(rng):
    params = _decoder(make_cfg())
    trace = decode(_features(rng), params, IA, mode='teacher', labels=[(1, 2), (3,)])
    assert trace.num_steps == 3
    np.testing.assert_array_equal(trace.targets, [[1, 2, 4], [3, 4, 4]])
    np.testing.assert_array_equal(trace.mask, [[1, 1, 1], [1, 1, 0]])
    np.testing.assert_array_equal(trace.lengths, [3, 2])
    for t in range(trace.num_steps):
        np.testing.assert_allclose(trace.probs(t).sum(axis=-1), 1.0, atol=1e-12)
        np.testing.assert_allclose(trace.alpha_prime[t].data.sum(axis=-1), 1.0, atol=1e-12)
    assert trace.sample(1)['cr_plus'].shape == (2, 4)


def test_banks_are_step_major(rng):
    params = _decoder(make_cfg())
    trace = decode(_features(rng), params, IA, mode='teacher', labels=[(1, 2), (3, 0)])
    bank = trace.bank('CR').data
    assert bank.shape == (3 * 2, 4)
    np.testing.assert_array_equal(bank[2 * 2 + 1], trace.cr[2].data[1])
    assert trace.bank('CR_plus').shape == (6, 4)


def test_teacher_forcing_rejects_bad_labels(rng):
    params = _decoder(make_cfg())
    with pytest.raises(ValueError):
        decode(_features(rng), params, IA, mode='teacher', labels=[(1,)])
    with pytest.raises(ValueError, match='vuota'):
        decode(_features(rng), params, IA, mode='teacher', labels=[(1,), ()])
    with pytest.raises(ValueError):
        decode(_features(rng), params, IA, mode='beam')


def test_greedy_stops_at_eos(rng):
    params = _decoder(make_cfg())
    params['dec.lstm.b'].data[:] = 10.0
    params['dec.U'].data[:] = 0.0
    params['dec.U'].data[:, 4] = 1.0
    trace = decode(_features(rng), params, IA, mode='greedy', max_steps=5)
    assert trace.num_steps == 1
    np.testing.assert_array_equal(trace.lengths, [1, 1])
    assert predictions(trace) == [(), ()]


def test_greedy_respects_step_limit(rng):
    params = _decoder(make_cfg())
    params['dec.lstm.b'].data[:] = 10.0
    params['dec.U'].data[:] = 0.0
    params['dec.U'].data[:, 2] = 1.0
    trace = decode(_features(rng), params, NO_IA, mode='greedy', max_steps=4)
    assert trace.num_steps == 4
    assert predictions(trace) == [(2, 2, 2, 2), (2, 2, 2, 2)]
    with pytest.raises(ValueError):
        decode(_features(rng), params, IA, mode='greedy', max_steps=0)


def test_disabled_ia_keeps_raw_weights(rng):
    params = _decoder(make_cfg())
    trace = decode(_features(rng), params, NO_IA, mode='teacher', labels=[(1,), (2,)])
    for a, ap in zip(trace.alpha, trace.alpha_prime):
        np.testing.assert_array_equal(a.data, ap.data)


# ============ LOSS ============

def test_loss_with_zero_classifier_is_length_times_log_c(rng):
    params = _decoder(make_cfg())
    params['dec.U'].data[:] = 0.0
    labels = [(1, 2, 3), (0,)]
    trace = decode(_features(rng), params, IA, mode='teacher', labels=labels)
    expected = ((3 + 1) + (1 + 1)) * np.log(5) / 2
    assert attention_loss(trace, labels).item() == pytest.approx(expected, rel=1e-12)


def test_loss_rejects_greedy_trace_and_foreign_labels(rng):
    params = _decoder(make_cfg())
    trace = decode(_features(rng), params, IA, mode='teacher', labels=[(1,), (2,)])
    with pytest.raises(ValueError):
        attention_loss(trace, [(2,), (1,)])
    greedy = decode(_features(rng), params, IA, mode='greedy', max_steps=2)
    with pytest.raises(ValueError):
        attention_loss(greedy)


@pytest.mark.parametrize('ia', [IA, NO_IA])
def test_attention_loss_gradient(ia, rng):
    cfg = make_cfg(feature_dim=3, hidden=3, att_dim=2, embed_dim=2)
    params = _decoder(cfg, seed=5)
    params.add('x', ad.Tensor(rng.standard_normal((4, 2, 3))))
    labels = [(1, 0), (3,)]

    def loss(p):
        return attention_loss(decode(p['x'], p, ia, mode='teacher', labels=labels), labels)

    # righe dell'embedding lette da un passo non mascherato: start e simboli delle etichette
    fed = {start_token(params)} | {s for label in labels for s in label}
    assert ad.grad_check(loss, params, eps=1e-3, rows={'dec.emb': fed}) < 1e-6


# ============ VISUALIZZAZIONE ============

def test_heatmap_pixels():
    np.testing.assert_array_equal(heatmap_pixels([0.0, 1.0, 0.0]), [0, 255, 0])
    np.testing.assert_array_equal(heatmap_pixels(np.full(4, 0.25)), [64, 64, 64, 64])


def test_dump_attention_files_and_table(tmp_path, rng):
    params = _decoder(make_cfg())
    trace = decode(_features(rng), params, IA, mode='teacher', labels=[(1, 2), (3,)])
    image = rng.uniform(size=(8, 12))
    written = dump_attention(trace, image, tmp_path / 'att', sample=0, alphabet=Alphabet('0123'))
    names = sorted(p.rsplit('/', 1)[-1] for p in map(str, written))
    assert names == sorted(['attention.png', 'attention.tsv'] +
                           [f'step_{t:02d}{s}.pgm' for t in range(3) for s in ('', '_prime')])
    table = read_attention_tsv(tmp_path / 'att' / 'attention.tsv')
    assert list(table.columns) == ['step', 'j', 'alpha', 'alpha_prime']
    assert len(table) == 3 * 6
    view = trace.sample(0)
    np.testing.assert_allclose(table['alpha'].to_numpy().reshape(3, 6), view['alpha'], atol=1e-9)
    np.testing.assert_allclose(table['alpha_prime'].to_numpy().reshape(3, 6), view['alpha_prime'], atol=1e-9)
