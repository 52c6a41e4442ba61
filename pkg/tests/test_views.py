"""View augmentation tests: determinism, identity configs, indicator structure,
pixel range, and gradient flow through the fixed transforms."""

import numpy as np
import pytest

import ralab.engine as E
from ralab.exceptions import UsageError
from ralab.models import ContrastiveConfig
from ralab.views import (ANCHOR_ID, AugmentConfig, apply_augment_batch,
                         augment_one, sample_augment_params, sample_views)


def _image(seed=0):
    return np.random.default_rng(seed).uniform(0.2, 0.8, size=(16, 16, 3))


def _pool(n=32, seed=1):
    return np.random.default_rng(seed).uniform(0.0, 1.0, size=(n, 16, 16, 3))


def test_identity_config_is_identity():
    img = _image()
    out = augment_one(img, AugmentConfig.identity(), seed=5)
    assert np.array_equal(out, img)


def test_same_seed_same_view():
    img = _image()
    cfg = AugmentConfig()
    a = augment_one(img, cfg, seed=9)
    b = augment_one(img, cfg, seed=9)
    assert np.array_equal(a, b)
    c = augment_one(img, cfg, seed=10)
    assert not np.array_equal(a, c)


def test_grayscale_equalizes_channels():
    cfg = AugmentConfig(pad=0, jitter=0.0, grayscale_p=1.0, flip_p=0.0)
    out = augment_one(_image(), cfg, seed=0)
    assert np.allclose(out[..., 0], out[..., 1], atol=1e-12)
    assert np.allclose(out[..., 1], out[..., 2], atol=1e-12)


def test_brightness_matches_scalar_recomputation():
    img = _image()
    cfg = AugmentConfig(pad=0, jitter=0.3, grayscale_p=0.0, flip_p=0.0)
    rng = np.random.default_rng(123)
    params = sample_augment_params(cfg, rng)
    _, _, _, b, c, _ = params
    with E.no_grad():
        out = apply_augment_batch(E.Tensor(img[None]), cfg, [params]).values[0]
    scaled = img * b
    m = scaled.mean()
    want = np.clip((scaled - m) * c + m, 0.0, 1.0)
    np.testing.assert_allclose(out, want, atol=1e-12)


def test_output_range_under_extreme_jitter():
    cfg = AugmentConfig(pad=2, jitter=0.9, grayscale_p=0.5, flip_p=0.5)
    for seed in range(20):
        out = augment_one(_image(seed), cfg, seed=seed)
        assert out.min() >= 0.0 and out.max() <= 1.0


def test_sample_views_deterministic():
    ccfg = ContrastiveConfig(n_positive_views=4, n_negatives=8)
    a = sample_views(_image(), _pool(), AugmentConfig(), ccfg, seed=3)
    b = sample_views(_image(), _pool(), AugmentConfig(), ccfg, seed=3)
    assert np.array_equal(a.views, b.views)
    assert np.array_equal(a.indicator, b.indicator)
    assert np.array_equal(a.origin, b.origin)


def test_indicator_structure():
    ccfg = ContrastiveConfig(n_positive_views=4, n_negatives=8)
    vb = sample_views(_image(), _pool(), AugmentConfig(), ccfg, seed=3)
    ind = vb.indicator
    assert ind.shape == (12, 12)
    assert ind.sum() == 4 * 3
    assert np.array_equal(ind, ind.T)
    assert np.all(np.diag(ind) == 0)
    # indicator is 1 exactly where both views originate from the anchor
    for i in range(12):
        for j in range(12):
            expected = int(i != j and vb.origin[i] == ANCHOR_ID and vb.origin[j] == ANCHOR_ID)
            assert ind[i, j] == expected


def test_views_pixels_in_range():
    ccfg = ContrastiveConfig(n_positive_views=4, n_negatives=8)
    vb = sample_views(_image(), _pool(), AugmentConfig(jitter=0.8), ccfg, seed=3)
    assert vb.views.min() >= 0.0 and vb.views.max() <= 1.0


def test_pool_too_small_rejected():
    ccfg = ContrastiveConfig(n_positive_views=4, n_negatives=8)
    with pytest.raises(UsageError, match="pool"):
        sample_views(_image(), _pool(4), AugmentConfig(), ccfg, seed=0)


def test_augment_config_validation():
    with pytest.raises(UsageError):
        AugmentConfig(jitter=1.2)
    with pytest.raises(UsageError):
        AugmentConfig(pad=-1)
    with pytest.raises(UsageError):
        AugmentConfig(flip_p=1.5)


def test_gradient_flows_through_augmentation():
    # fixed transforms are differentiable maps back to the anchor image
    rng = np.random.default_rng(7)
    img = rng.uniform(0.3, 0.7, size=(1, 16, 16, 3))
    cfg = AugmentConfig()
    params = [sample_augment_params(cfg, np.random.default_rng(4)) for _ in range(3)]

    def fn(leaves):
        views = apply_augment_batch(E.repeat_rows(leaves[0], 3), cfg, params)
        return E.tsum(E.mul(views, views))

    err = E.grad_check(fn, [E.Tensor(img)], h=1e-6)
    assert err < 1e-5

    x = E.Tensor(img, requires_grad=True)
    out = apply_augment_batch(E.repeat_rows(x, 3), cfg, params)
    E.backward(E.tsum(out))
    assert x.grad is not None
    assert np.any(x.grad != 0.0)
