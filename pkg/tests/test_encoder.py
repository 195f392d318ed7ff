import numpy as np
import pytest

from conftest import make_cfg
from functions import autodiff as ad
from functions.encoder import encode, encode_batch, group_dim, init_encoder, num_positions
from functions.errors import ShapeError


def _encoder(cfg, seed=0):
    params = ad.ParamSet()
    init_encoder(params, cfg, np.random.default_rng(seed))
    return params


@pytest.mark.parametrize('width,stride,expected', [(12, 2, 6), (12, 5, 3), (64, 4, 16), (7, 8, 1)])
def test_num_positions(width, stride, expected):
    assert num_positions(width, stride) == expected


@pytest.mark.parametrize('rnn', [True, False])
def test_output_shape(rnn, rng):
    cfg = make_cfg(encoder_rnn=rnn)
    params = _encoder(cfg)
    out = encode_batch(rng.uniform(size=(3, 8, 12)), params, cfg)
    assert out.shape == (6, 3, cfg['feature_dim'])
    assert group_dim(cfg) == 2 * 2 * 2


def test_batch_matches_single_images(rng):
    cfg = make_cfg()
    params = _encoder(cfg)
    images = rng.uniform(size=(2, 8, 12))
    batched = encode_batch(images, params, cfg).data
    for b in range(2):
        np.testing.assert_allclose(encode(images[b], params, cfg).data, batched[:, b], atol=1e-12)


def test_zero_image_with_zero_biases_gives_zero_features():
    cfg = make_cfg()
    params = _encoder(cfg)
    out = encode_batch(np.zeros((1, 8, 12)), params, cfg).data
    np.testing.assert_array_equal(out, 0.0)


def test_features_are_local_without_rnn(rng):
    cfg = make_cfg(encoder_rnn=False)
    params = _encoder(cfg)
    image = rng.uniform(size=(8, 12))
    changed = image.copy()
    changed[:, 11] = 1.0 - changed[:, 11]
    a = encode(image, params, cfg).data
    b = encode(changed, params, cfg).data
    # la colonna 11 influenza solo i gruppi che vedono le colonne 10..11 (stencil 3x3 due volte)
    np.testing.assert_array_equal(a[:4], b[:4])
    assert not np.allclose(a[5], b[5])


def test_wrong_height_is_rejected(rng):
    cfg = make_cfg()
    params = _encoder(cfg)
    with pytest.raises(ShapeError, match='altezza'):
        encode_batch(rng.uniform(size=(1, 9, 12)), params, cfg)


def test_encoder_gradient(rng):
    cfg = make_cfg(conv1_channels=1, conv2_channels=1, feature_dim=2)
    params = _encoder(cfg, seed=3)
    images = rng.uniform(size=(2, 8, 4))
    weights = rng.standard_normal((2, 2, 2))

    def loss(p):
        return ad.sum(ad.mul(encode_batch(images, p, cfg), weights))

    assert ad.grad_check(loss, params, eps=1e-3) < 1e-6
