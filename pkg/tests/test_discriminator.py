import numpy as np
import pytest

from conftest import make_cfg
from functions import autodiff as ad
from functions.decoder import IAConfig, attention_loss, decode, init_decoder, start_token
from functions.discriminator import (discriminator_loss, generator_confusion_loss, init_mcd, mcd_forward,
                                     mcd_logits, pair_feature_dim, pair_matrix, predict_groups)
from functions.errors import ShapeError
from functions.optim import Optimizer
from functions.pairs import CharFeature, PairGroup, extract_char_features, sample_pairs

MCD_NAMES = ['mcd.W1', 'mcd.W2', 'mcd.W3', 'mcd.b1', 'mcd.b2', 'mcd.b3']


def _mcd(dim=2, seed=0, **overrides):
    params = ad.ParamSet()
    init_mcd(params, dim, make_cfg(**overrides), np.random.default_rng(seed))
    return params


def _chars(bank, labels, domain, offset=0):
    return [CharFeature(bank=bank, row=offset + i, label=s, domain=domain, sample_id=domain, step=i)
            for i, s in enumerate(labels)]


def _groups(rng, requires_grad=False):
    bank = ad.Tensor(rng.standard_normal((5, 2)), requires_grad=requires_grad)
    src = _chars(bank, [0, 1, 0], 'source')
    tgt = _chars(bank, [0, 2], 'target', offset=3)
    return bank, sample_pairs(src, tgt)


def test_pair_feature_dim_follows_variant():
    assert pair_feature_dim(make_cfg(feature_variant='CR', feature_dim=4, hidden=7)) == 4
    assert pair_feature_dim(make_cfg(feature_variant='CR_plus', feature_dim=4, hidden=7)) == 7


def test_zero_weights_give_uniform_probabilities(rng):
    params = _mcd()
    for name in MCD_NAMES:
        params[name].data[:] = 0.0
    probs = mcd_forward((rng.standard_normal(2), rng.standard_normal(2)), params).data
    np.testing.assert_allclose(probs, 0.25, atol=1e-15)


def test_probabilities_sum_to_one(rng):
    params = _mcd(seed=4)
    for _ in range(20):
        probs = mcd_forward((rng.standard_normal(2) * 3, rng.standard_normal(2)), params).data
        assert probs.shape == (4,)
        assert probs.sum() == pytest.approx(1.0, abs=1e-12)


def test_uniform_discriminator_losses_are_log4(rng):
    params = _mcd()
    params['mcd.W3'].data[:] = 0.0
    _, groups = _groups(rng)
    assert discriminator_loss(groups, params).item() == pytest.approx(np.log(4), rel=1e-12)
    assert generator_confusion_loss(groups[1], groups[3], params).item() == pytest.approx(np.log(4), rel=1e-12)


def test_cross_entropy_hand_value():
    params = _mcd()
    params['mcd.W3'].data[:] = 0.0
    params['mcd.b3'].data[:] = [np.log(3.0), 0.0, 0.0, 0.0]
    bank = ad.Tensor(np.zeros((2, 2)))
    a, b = _chars(bank, [0, 0], 'source')
    groups = (PairGroup('G1', [(a, b)]), PairGroup('G2', [(b, a)]), PairGroup('G3'), PairGroup('G4'))
    # probabilita' [1/2, 1/6, 1/6, 1/6]
    expected = (np.log(2.0) + np.log(6.0)) / 2
    assert discriminator_loss(groups, params).item() == pytest.approx(expected, rel=1e-12)
    assert generator_confusion_loss(groups[1], groups[3], params).item() == pytest.approx(np.log(2.0), rel=1e-12)


def test_discriminator_loss_only_reaches_the_mcd(rng):
    params = _mcd(seed=1)
    bank, groups = _groups(rng, requires_grad=True)
    ad.backward(discriminator_loss(groups, params))
    assert bank.grad is None
    assert all(params[n].grad is not None for n in MCD_NAMES)


def test_confusion_loss_only_reaches_the_features(rng):
    params = _mcd(seed=1)
    bank, groups = _groups(rng, requires_grad=True)
    ad.backward(generator_confusion_loss(groups[1], groups[3], params))
    assert bank.grad is not None and np.any(bank.grad != 0)
    assert all(params[n].grad is None for n in MCD_NAMES)


def test_discriminator_loss_gradient(rng):
    params = _mcd(seed=2)
    _, groups = _groups(rng)
    assert ad.grad_check(lambda p: discriminator_loss(groups, p), params, eps=1e-3) < 1e-6


def test_confusion_loss_gradient(rng):
    params = _mcd(seed=2)
    params.add('bank', ad.Tensor(rng.standard_normal((5, 2))))
    src = _chars(params['bank'], [0, 1, 0], 'source')
    tgt = _chars(params['bank'], [0, 2], 'target', offset=3)
    _, g2, _, g4 = sample_pairs(src, tgt)
    error = ad.grad_check(lambda p: generator_confusion_loss(g2, g4, p), params, eps=1e-3,
                          names=['bank'])
    assert error < 1e-6


def test_combined_generator_loss_gradient(rng):
    cfg = make_cfg(feature_dim=3, hidden=3, att_dim=2, embed_dim=2, mcd_hidden1=4, mcd_hidden2=4)
    params = ad.ParamSet()
    init_decoder(params, cfg, 5, np.random.default_rng(6))
    init_mcd(params, 3, cfg, np.random.default_rng(7))
    params.add('x', ad.Tensor(rng.standard_normal((4, 2, 3))))
    labels = [(1, 0), (1,)]
    gamma = 0.5
    ia = IAConfig(lam=0.75, eta=1)

    def loss(p):
        trace = decode(p['x'], p, ia, mode='teacher', labels=labels)
        src = extract_char_features(trace, labels[:1], 'CR', 'source')
        tgt = extract_char_features(trace, labels[1:], 'CR', 'target', batch_offset=1)
        _, g2, _, g4 = sample_pairs(src, tgt)
        return ad.add(attention_loss(trace), ad.scale(generator_confusion_loss(g2, g4, p), gamma))

    names = [n for n in params if not n.startswith('mcd.')]
    fed = {start_token(params)} | {s for label in labels for s in label}
    assert ad.grad_check(loss, params, eps=1e-3, names=names, rows={'dec.emb': fed}) < 1e-6


def test_loss_is_invariant_to_pair_order(rng):
    params = _mcd(seed=3)
    _, groups = _groups(rng)
    shuffled = tuple(PairGroup(g.group, [g.pairs[i] for i in rng.permutation(len(g))]) for g in groups)
    assert discriminator_loss(shuffled, params).item() == pytest.approx(discriminator_loss(groups, params).item(),
                                                                         rel=1e-12)


def test_shape_and_empty_errors(rng):
    params = _mcd(dim=3)
    with pytest.raises(ShapeError, match='mcd'):
        mcd_logits(ad.Tensor(np.zeros((2, 4))), params)
    with pytest.raises(ValueError):
        discriminator_loss((PairGroup('G1'), PairGroup('G2'), PairGroup('G3'), PairGroup('G4')), params)
    with pytest.raises(ValueError):
        generator_confusion_loss(PairGroup('G2'), PairGroup('G4'), params)
    a = _chars(ad.Tensor(np.zeros((1, 2))), [0], 'source')[0]
    b = _chars(ad.Tensor(np.zeros((1, 3))), [0], 'target')[0]
    with pytest.raises(ShapeError):
        pair_matrix([(a, b)])


def _toy_groups(rng, n=20):
    """Feature separabili: il target e' traslato di (1, 1)."""
    centers = np.array([[1.0, 0.0], [0.0, 1.0]])
    src_labels = rng.integers(0, 2, size=n)
    tgt_labels = rng.integers(0, 2, size=n)
    rows = np.concatenate([centers[src_labels], centers[tgt_labels] + 1.0])
    bank = ad.Tensor(rows + rng.normal(scale=0.05, size=rows.shape))
    src = _chars(bank, src_labels.tolist(), 'source')
    tgt = _chars(bank, tgt_labels.tolist(), 'target', offset=n)
    return sample_pairs(src, tgt)


def test_mcd_learns_separable_groups(rng):
    params = _mcd(seed=5, mcd_hidden1=16, mcd_hidden2=16)
    train, held_out = _toy_groups(rng), _toy_groups(rng)
    opt = Optimizer('adam', lr=0.01)
    for _ in range(600):
        ad.backward(discriminator_loss(train, params))
        opt.step(params)
    probs, truth = predict_groups(held_out, params)
    assert np.mean(probs.argmax(axis=1) == truth) > 0.9
