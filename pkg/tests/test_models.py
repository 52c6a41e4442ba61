"""Model and loss tests: forward contracts, hand-computed loss oracles,
invariance properties, and training edge cases."""

import math

import numpy as np
import pytest

import ralab.engine as E
from ralab.data import generate_synthetic
from ralab.exceptions import NumericError, UsageError
from ralab.models import (ClassifierParams, ContrastiveConfig, TrainConfig,
                          classifier_forward, classifier_from_arrays,
                          classifier_to_arrays, contrastive_loss, cross_entropy,
                          cw_margin, head_forward, head_from_arrays,
                          head_to_arrays, init_classifier, init_ssl_head,
                          ssl_loss_batch, ssl_loss_of_image, train_classifier,
                          train_ssl_head)
from ralab.views import AugmentConfig, sample_views


def _zero_params(n_classes=10):
    p = init_classifier(n_classes, seed=0)
    for t in p.tensors.values():
        t.values = np.zeros_like(t.values)
    return p


def _batch(n=4, seed=0):
    d = generate_synthetic(max(n, 10), 10, seed=seed)
    return d.images[:n], d.labels[:n]


# ---------------------------------------------------------------------------
# classifier forward


def test_zero_weights_give_zero_logits_uniform_softmax():
    x, _ = _batch(3)
    logits, feats = classifier_forward(_zero_params(), x)
    assert np.array_equal(logits.values, np.zeros((3, 10)))
    sm = E.softmax(logits).values
    np.testing.assert_allclose(sm, np.full((3, 10), 0.1), atol=1e-15)
    assert feats.values.shape == (3, 64)


def test_forward_deterministic():
    params = init_classifier(10, seed=5)
    x, _ = _batch(4)
    a, _ = classifier_forward(params, x)
    b, _ = classifier_forward(params, x)
    assert np.array_equal(a.values, b.values)


def test_single_vs_batched_rows_agree():
    params = init_classifier(10, seed=5)
    x, _ = _batch(1)
    single, _ = classifier_forward(params, x)
    batched, _ = classifier_forward(params, np.repeat(x, 6, axis=0))
    # identical rows within the batch, and each matches the single forward
    for i in range(6):
        assert np.array_equal(batched.values[i], batched.values[0])
    np.testing.assert_allclose(batched.values[0], single.values[0], atol=1e-12)


def test_permutation_equivariance():
    params = init_classifier(10, seed=5)
    x, _ = _batch(6)
    perm = np.array([3, 1, 4, 0, 5, 2])
    a, _ = classifier_forward(params, x)
    b, _ = classifier_forward(params, x[perm])
    np.testing.assert_allclose(b.values, a.values[perm], atol=1e-12)


def test_feature_layer_taps():
    params = init_classifier(10, seed=5)
    x, _ = _batch(2)
    _, f1 = classifier_forward(params, x, feature_layer="pool1")
    _, f2 = classifier_forward(params, x, feature_layer="pool2")
    assert f1.values.shape == (2, 1024)
    assert f2.values.shape == (2, 512)
    with pytest.raises(UsageError):
        classifier_forward(params, x, feature_layer="nope")


def test_bad_input_shape_rejected():
    with pytest.raises(UsageError):
        classifier_forward(init_classifier(10), np.zeros((2, 8, 8, 3)))


# ---------------------------------------------------------------------------
# cross entropy


def test_cross_entropy_uniform_logits():
    logits = E.Tensor(np.zeros((2, 10)))
    assert cross_entropy(logits, [3, 7]).item() == pytest.approx(math.log(10), abs=1e-12)


def test_cross_entropy_saturated_margin():
    row = np.zeros(10)
    row[2] = 50.0
    loss = cross_entropy(E.Tensor(row[None]), [2]).item()
    assert 0.0 <= loss < 1e-20


def test_cross_entropy_hand_case():
    logits = np.array([[1.0, 2.0, 0.5]])
    want = -math.log(math.exp(2.0) / (math.exp(1.0) + math.exp(2.0) + math.exp(0.5)))
    assert cross_entropy(E.Tensor(logits), [1]).item() == pytest.approx(want, abs=1e-12)


def test_cross_entropy_shift_invariance():
    rng = np.random.default_rng(0)
    logits = rng.normal(size=(5, 7))
    y = rng.integers(0, 7, size=5)
    a = cross_entropy(E.Tensor(logits), y).item()
    b = cross_entropy(E.Tensor(logits + 13.7), y).item()
    assert a == pytest.approx(b, abs=1e-9)


def test_cross_entropy_label_range():
    with pytest.raises(UsageError):
        cross_entropy(E.Tensor(np.zeros((1, 4))), [4])


# ---------------------------------------------------------------------------
# C&W margin


def test_cw_margin_direct():
    logits = E.Tensor(np.array([[5.0, 1.0, 0.0]]))
    assert cw_margin(logits, [0], kappa=0.0).item() == pytest.approx(4.0, abs=1e-12)


def test_cw_margin_clipped():
    logits = E.Tensor(np.array([[1.0, 5.0, 0.0]]))
    assert cw_margin(logits, [0], kappa=0.0).item() == pytest.approx(0.0, abs=1e-12)


def test_cw_margin_matches_scalar_oracle():
    rng = np.random.default_rng(1)
    logits = rng.normal(size=(8, 6))
    y = rng.integers(0, 6, size=8)
    got = cw_margin(E.Tensor(logits), y, kappa=2.0).item()
    want = np.mean([max(logits[i, y[i]] - max(logits[i, j] for j in range(6) if j != y[i]), -2.0)
                    for i in range(8)])
    assert got == pytest.approx(want, abs=1e-12)


def test_cw_margin_needs_two_classes():
    with pytest.raises(UsageError):
        cw_margin(E.Tensor(np.zeros((1, 1))), [0])


# ---------------------------------------------------------------------------
# contrastive loss


def test_contrastive_two_pos_one_neg_hand_case():
    # cos(z0,z1)=1, both orthogonal to z2, tau=1
    emb = E.Tensor(np.array([[1.0, 0.0], [1.0, 0.0], [0.0, 1.0]]))
    ind = np.array([[0, 1, 0], [1, 0, 0], [0, 0, 0]])
    got = contrastive_loss(emb, ind, tau=1.0).item()
    want = -math.log(math.e / (math.e + 1.0))
    assert got == pytest.approx(want, abs=1e-9)
    assert got == pytest.approx(0.313262, abs=1e-6)


def test_contrastive_identical_embeddings():
    m = 5
    emb = E.Tensor(np.tile([0.3, 0.4, 0.5], (m, 1)))
    ind = 1 - np.eye(m, dtype=int)
    assert contrastive_loss(emb, ind, tau=0.7).item() == pytest.approx(math.log(m - 1), abs=1e-9)


def test_contrastive_matches_double_loop_oracle():
    rng = np.random.default_rng(2)
    m = 6
    emb = rng.normal(size=(m, 4))
    ind = np.zeros((m, m), dtype=int)
    ind[:3, :3] = 1 - np.eye(3, dtype=int)
    tau = 0.5
    got = contrastive_loss(E.Tensor(emb), ind, tau).item()

    def cos(a, b):
        return float(a @ b / (np.linalg.norm(a) * np.linalg.norm(b)))

    terms = []
    for i in range(m):
        for j in range(m):
            if ind[i, j]:
                denom = sum(math.exp(cos(emb[i], emb[k]) / tau) for k in range(m) if k != i)
                terms.append(-math.log(math.exp(cos(emb[i], emb[j]) / tau) / denom))
    assert got == pytest.approx(np.mean(terms), abs=1e-10)


def test_contrastive_scale_invariance():
    rng = np.random.default_rng(3)
    emb = rng.normal(size=(6, 8))
    ind = np.zeros((6, 6), dtype=int)
    ind[:2, :2] = 1 - np.eye(2, dtype=int)
    a = contrastive_loss(E.Tensor(emb), ind, tau=0.2).item()
    scaled = emb.copy()
    scaled[0] *= 37.5
    scaled[4] *= 0.001
    b = contrastive_loss(E.Tensor(scaled), ind, tau=0.2).item()
    assert a == pytest.approx(b, abs=1e-9)


def test_contrastive_zero_norm_embedding():
    emb = np.ones((3, 4))
    emb[1] = 0.0
    ind = np.zeros((3, 3), dtype=int)
    ind[0, 1] = ind[1, 0] = 1
    with pytest.raises(NumericError):
        contrastive_loss(E.Tensor(emb), ind, tau=1.0)


def test_contrastive_indicator_validation():
    emb = E.Tensor(np.random.default_rng(0).normal(size=(3, 4)))
    with pytest.raises(UsageError):  # not symmetric
        contrastive_loss(emb, np.array([[0, 1, 0], [0, 0, 0], [0, 0, 0]]), 1.0)
    with pytest.raises(UsageError):  # nonzero diagonal
        contrastive_loss(emb, np.eye(3, dtype=int), 1.0)
    with pytest.raises(UsageError):  # no positives
        contrastive_loss(emb, np.zeros((3, 3), dtype=int), 1.0)


def test_loss_gradients_match_finite_differences():
    rng = np.random.default_rng(4)
    y = np.array([1, 0])
    ind = np.zeros((4, 4), dtype=int)
    ind[:2, :2] = 1 - np.eye(2, dtype=int)

    def ce_fn(leaves):
        return cross_entropy(leaves[0], y)

    def cw_fn(leaves):
        return cw_margin(leaves[0], y, kappa=0.5)

    def cl_fn(leaves):
        return contrastive_loss(leaves[0], ind, tau=0.3)

    assert E.grad_check(ce_fn, [E.Tensor(rng.normal(size=(2, 5)))]) < 1e-6
    assert E.grad_check(cw_fn, [E.Tensor(rng.normal(size=(2, 5)))]) < 1e-6
    assert E.grad_check(cl_fn, [E.Tensor(rng.normal(size=(4, 6)))]) < 1e-6


# ---------------------------------------------------------------------------
# ssl loss


def _ssl_setup():
    backbone = init_classifier(10, seed=5)
    head = init_ssl_head(seed=5)
    ccfg = ContrastiveConfig(tau=0.2, n_positive_views=4, n_negatives=6)
    acfg = AugmentConfig()
    pool = generate_synthetic(32, 10, seed=9).images
    return backbone, head, ccfg, acfg, pool


def test_ssl_loss_deterministic():
    backbone, head, ccfg, acfg, pool = _ssl_setup()
    x = generate_synthetic(10, 10, seed=11).images[0]
    a = ssl_loss_of_image(backbone, head, ccfg, acfg, x, pool, seed=21)
    b = ssl_loss_of_image(backbone, head, ccfg, acfg, x, pool, seed=21)
    assert a == b


def test_ssl_loss_composition_identity():
    backbone, head, ccfg, acfg, pool = _ssl_setup()
    x = generate_synthetic(10, 10, seed=11).images[0]
    got = ssl_loss_of_image(backbone, head, ccfg, acfg, x, pool, seed=21)
    vb = sample_views(x, pool, acfg, ccfg, seed=21)
    with E.no_grad():
        _, feats = classifier_forward(backbone, vb.views)
        emb = head_forward(head, feats)
        want = contrastive_loss(emb, vb.indicator, ccfg.tau).item()
    assert got == want


def test_ssl_loss_batch_matches_per_example():
    backbone, head, ccfg, acfg, pool = _ssl_setup()
    xs = generate_synthetic(10, 10, seed=11).images[:3]
    seeds = [(77, i) for i in range(3)]
    loss, per_ex = ssl_loss_batch(backbone, head, ccfg, acfg,
                                  E.Tensor(xs), pool, seeds)
    for i in range(3):
        solo = ssl_loss_of_image(backbone, head, ccfg, acfg, xs[i], pool, seeds[i])
        assert per_ex[i] == pytest.approx(solo, abs=1e-9)
    assert loss.item() == pytest.approx(per_ex.mean(), abs=1e-12)


def test_ssl_loss_empty_pool():
    backbone, head, ccfg, acfg, _ = _ssl_setup()
    x = np.zeros((16, 16, 3))
    with pytest.raises(UsageError):
        ssl_loss_of_image(backbone, head, ccfg, acfg, x, np.zeros((0, 16, 16, 3)), 0)


# ---------------------------------------------------------------------------
# training


def test_zero_epochs_returns_init():
    data = generate_synthetic(20, 10, seed=1)
    cfg = TrainConfig(epochs=0, batch_size=4, lr=0.01, seed=9)
    params, history = train_classifier(cfg, data)
    ref = init_classifier(10, seed=9)
    for k in params.tensors:
        assert np.array_equal(params.tensors[k].values, ref.tensors[k].values)
    assert history == []


def test_zero_epoch_head_returns_init():
    data = generate_synthetic(20, 10, seed=1)
    backbone = init_classifier(10, seed=1)
    cfg = TrainConfig(epochs=0, batch_size=4, lr=0.001, optimizer="adam", seed=9)
    head, history = train_ssl_head(cfg, ContrastiveConfig(), AugmentConfig(),
                                   backbone, data, data.images[:16])
    ref = init_ssl_head(seed=9)
    for k in head.tensors:
        assert np.array_equal(head.tensors[k].values, ref.tensors[k].values)
    assert history == []


@pytest.mark.filterwarnings("ignore:overflow")
def test_training_divergence_aborts():
    data = generate_synthetic(20, 10, seed=1)
    cfg = TrainConfig(epochs=3, batch_size=4, lr=1e12, seed=9)
    with pytest.raises(NumericError):
        train_classifier(cfg, data)


def test_train_config_validation():
    with pytest.raises(UsageError):
        TrainConfig(epochs=1, batch_size=0, lr=0.1)
    with pytest.raises(UsageError):
        TrainConfig(epochs=1, batch_size=1, lr=0.1, optimizer="lbfgs")
    with pytest.raises(UsageError):
        TrainConfig(epochs=1, batch_size=1, lr=0.1, adversarial=True)


def test_contrastive_config_validation():
    with pytest.raises(UsageError):
        ContrastiveConfig(tau=0.0)
    with pytest.raises(UsageError):
        ContrastiveConfig(n_positive_views=1)


# ---------------------------------------------------------------------------
# checkpoint adapters


def test_classifier_checkpoint_round_trip(tmp_path):
    from ralab.data import load_checkpoint, save_checkpoint
    params = init_classifier(7, seed=3)
    p = tmp_path / "clf.ralb"
    save_checkpoint(classifier_to_arrays(params), p)
    loaded = classifier_from_arrays(load_checkpoint(p))
    assert loaded.n_classes == 7
    for k in params.tensors:
        assert np.array_equal(loaded.tensors[k].values, params.tensors[k].values)


def test_head_checkpoint_round_trip(tmp_path):
    from ralab.data import load_checkpoint, save_checkpoint
    head = init_ssl_head(seed=3, feature_layer="pool2")
    p = tmp_path / "head.ralb"
    save_checkpoint(head_to_arrays(head), p)
    loaded = head_from_arrays(load_checkpoint(p))
    assert loaded.feature_layer == "pool2"
    for k in head.tensors:
        assert np.array_equal(loaded.tensors[k].values, head.tensors[k].values)
