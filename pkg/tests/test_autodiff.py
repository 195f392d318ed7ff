import numpy as np
import pytest

from functions import autodiff as ad
from functions.errors import ShapeError


def _params(rng, **shapes):
    return ad.ParamSet({name: ad.Tensor(rng.standard_normal(shape)) for name, shape in shapes.items()})


def test_chain_rule_scalar():
    x = ad.Tensor(np.array([3.0]), requires_grad=True)
    y = ad.mul(x, x)
    z = ad.mul(y, y)
    ad.backward(ad.sum(z))
    assert x.grad[0] == pytest.approx(4 * 3.0 ** 3)


def test_gradients_accumulate_until_zeroed():
    x = ad.Tensor(np.array([2.0]), requires_grad=True)
    ad.backward(ad.sum(ad.scale(x, 3.0)))
    ad.backward(ad.sum(ad.scale(x, 3.0)))
    assert x.grad[0] == pytest.approx(6.0)
    x.zero_grad()
    assert x.grad is None


def test_shared_node_gets_both_contributions():
    x = ad.Tensor(np.array([1.5, -0.5]), requires_grad=True)
    y = ad.tanh(x)
    loss = ad.sum(ad.add(y, ad.mul(y, y)))
    ad.backward(loss)
    t = np.tanh(x.data)
    np.testing.assert_allclose(x.grad, (1 + 2 * t) * (1 - t ** 2), rtol=1e-12)


def test_broadcast_only_on_leading_axes():
    a = ad.Tensor(np.ones((2, 3)))
    ad.add(a, ad.Tensor(np.ones(3)))
    with pytest.raises(ShapeError, match='add'):
        ad.add(a, ad.Tensor(np.ones((2, 1))))


def test_matmul_shape_errors_name_the_op():
    with pytest.raises(ShapeError, match='matmul'):
        ad.matmul(ad.Tensor(np.ones((2, 3))), ad.Tensor(np.ones((2, 3))))
    with pytest.raises(ShapeError):
        ad.matmul(ad.Tensor(np.ones((2, 2, 3))), ad.Tensor(np.ones((3, 3, 1))))


def test_softmax_rows_sum_to_one_and_are_stable():
    x = ad.Tensor(np.array([[1000.0, 1000.0], [-5.0, 5.0]]))
    p = ad.softmax(x).data
    np.testing.assert_allclose(p.sum(axis=-1), 1.0, atol=1e-12)
    np.testing.assert_allclose(p[0], [0.5, 0.5])
    lp = ad.log_softmax(ad.Tensor(np.array([[1e4, 0.0]]))).data
    assert np.all(np.isfinite(lp))
    assert lp[0, 0] == pytest.approx(0.0)


def test_take_padding_is_zero_and_gets_no_gradient():
    a = ad.Tensor(np.array([1.0, 2.0, 3.0]), requires_grad=True)
    out = ad.take(a, np.array([[2, -1], [0, 0]]))
    np.testing.assert_array_equal(out.data, [[3.0, 0.0], [1.0, 1.0]])
    ad.backward(ad.sum(out))
    np.testing.assert_array_equal(a.grad, [2.0, 0.0, 1.0])


def test_no_grad_builds_no_graph():
    x = ad.Tensor(np.ones(3), requires_grad=True)
    with ad.no_grad():
        y = ad.tanh(x)
    assert not y.requires_grad
    assert y._parents == ()
    assert ad.tanh(x).requires_grad


def test_backward_requires_scalar():
    x = ad.Tensor(np.ones(3), requires_grad=True)
    with pytest.raises(ShapeError, match='backward'):
        ad.backward(ad.tanh(x))


def test_paramset_order_digest_and_prefixes(rng):
    params = _params(rng, **{'dec.b': (2,), 'enc.a': (3,), 'mcd.W1': (2, 2)})
    assert list(params) == ['dec.b', 'enc.a', 'mcd.W1']
    assert params.names(('enc.', 'dec.')) == ['dec.b', 'enc.a']
    before = params.digest(('mcd.',))
    params['enc.a'].data += 1.0
    assert params.digest(('mcd.',)) == before
    params['mcd.W1'].data[0, 0] += 1e-12
    assert params.digest(('mcd.',)) != before
    with pytest.raises(KeyError):
        params.add('enc.a', ad.Tensor(np.zeros(1)))


def test_grad_check_on_composite_graph(rng):
    params = _params(rng, W=(3, 4), b=(4,), E=(5, 3))
    x = rng.standard_normal((2, 2, 3))
    rows = np.array([4, 2, 2])

    def loss(p):
        h = ad.tanh(ad.add(ad.matmul(x, p['W']), p['b']))
        h = ad.concat([h, ad.sigmoid(h)], axis=-1)
        h = ad.slice_last(h, 1, 6)
        z = ad.matmul(ad.reshape(h, (4, 5)), p['E'])
        shift = ad.mean(ad.matmul(ad.take_rows(p['E'], rows), ad.slice_last(p['W'], 0, 3)))
        s = ad.log_softmax(ad.sub(z, shift))
        return ad.scale(ad.sum(ad.pick(s, np.array([0, 1, 1, 0]))), -1.0)

    assert ad.grad_check(loss, params, eps=1e-3) < 1e-6


def test_grad_check_batched_matmul_stack_and_index(rng):
    params = _params(rng, A=(3, 1, 4), B=(3, 4, 2))

    def loss(p):
        prod = ad.matmul(p['A'], p['B'])
        rows = ad.stack([ad.index_first(prod, i) for i in (2, 0)])
        return ad.sum(ad.mul(ad.softmax(rows), ad.log(ad.softmax(rows))))

    assert ad.grad_check(loss, params, eps=1e-3) < 1e-6


def test_grad_check_skips_rows_outside_the_selection(rng):
    params = _params(rng, E=(3, 2))

    def loss(p):
        first = ad.index_first(p['E'], 0)
        # la riga 1 entra nel valore ma non nel grafo
        hidden = ad.Tensor(p['E'].data[1].copy())
        return ad.add(ad.sum(ad.mul(first, first)), ad.sum(hidden))

    assert ad.grad_check(loss, params, eps=1e-3) > 0.5
    assert ad.grad_check(loss, params, eps=1e-3, rows={'E': [0, 2]}) < 1e-6


def test_grad_check_rejects_bad_eps(rng):
    params = _params(rng, W=(2,))
    with pytest.raises(ValueError):
        ad.grad_check(lambda p: ad.sum(p['W']), params, eps=0)
