"""Backbone classifier, contrastive head, losses, and training procedures.

The backbone is a small fixed convnet for 16x16x3 inputs:
conv3x3x16 / relu / maxpool2 / conv3x3x32 / relu / maxpool2 / flatten /
fc64 / relu / fc n_classes. The contrastive head maps the 64-d penultimate
features through two fully connected layers (relu in between) to a 32-d
embedding. No batch norm anywhere, so inference has no mode switches.
"""

from __future__ import annotations

from dataclasses import dataclass, field, replace

import numpy as np

from . import engine as E
from . import views as V
from .exceptions import NumericError, UsageError
from .seeding import derive_rng

FEATURE_DIM = 64
EMBED_DIM = 32
FEATURE_LAYERS = ("pool1", "pool2", "penultimate")
_LAYER_DIMS = {"pool1": 8 * 8 * 16, "pool2": 4 * 4 * 32, "penultimate": FEATURE_DIM}


@dataclass
class ClassifierParams:
    """Named weight tensors of the backbone; architecture is fixed."""

    tensors: dict
    n_classes: int

    def __post_init__(self):
        if self.tensors["fc1_w"].values.shape[1] != FEATURE_DIM:
            raise UsageError("penultimate feature dimension must be 64")
        for name, t in self.tensors.items():
            if not np.all(np.isfinite(t.values)):
                raise NumericError(f"classifier weight {name!r} is non-finite")

    def copy(self) -> "ClassifierParams":
        return ClassifierParams(
            tensors={k: E.Tensor(t.values.copy(), requires_grad=t.requires_grad)
                     for k, t in self.tensors.items()},
            n_classes=self.n_classes)


@dataclass
class SslHeadParams:
    """Two fully connected layers: in_dim -> 64 (relu) -> 32."""

    tensors: dict
    feature_layer: str = "penultimate"

    def __post_init__(self):
        if self.tensors["w2"].values.shape[1] != EMBED_DIM:
            raise UsageError("embedding dimension must be 32")
        for name, t in self.tensors.items():
            if not np.all(np.isfinite(t.values)):
                raise NumericError(f"head weight {name!r} is non-finite")

    def copy(self) -> "SslHeadParams":
        return SslHeadParams(
            tensors={k: E.Tensor(t.values.copy(), requires_grad=t.requires_grad)
                     for k, t in self.tensors.items()},
            feature_layer=self.feature_layer)


@dataclass(frozen=True)
class ContrastiveConfig:
    tau: float = 0.2
    n_positive_views: int = 4
    n_negatives: int = 8

    def __post_init__(self):
        if self.tau <= 0.0:
            raise UsageError("tau must be positive")
        if self.n_positive_views < 2:
            raise UsageError("need at least two positive views")
        if self.n_negatives < 1:
            raise UsageError("need at least one negative")


@dataclass(frozen=True)
class TrainConfig:
    epochs: int
    batch_size: int
    lr: float
    optimizer: str = "sgd"
    momentum: float = 0.9
    seed: int = 0
    adversarial: bool = False
    inner_attack: object = None

    def __post_init__(self):
        if self.epochs < 0 or self.batch_size < 1 or self.lr <= 0.0:
            raise UsageError("epochs >= 0, batch_size >= 1, lr > 0 required")
        if self.optimizer not in ("sgd", "adam"):
            raise UsageError(f"unknown optimizer {self.optimizer!r}")
        if self.adversarial and self.inner_attack is None:
            raise UsageError("adversarial training needs an inner attack config")


def init_classifier(n_classes: int, seed: int = 0) -> ClassifierParams:
    """He-normal initialized backbone weights."""
    if n_classes < 2:
        raise UsageError("need at least two classes")
    rng = derive_rng(seed, 101)

    def he(shape, fan_in):
        return E.Tensor(rng.normal(0.0, np.sqrt(2.0 / fan_in), size=shape), requires_grad=True)

    tensors = {
        "conv1_w": he((3, 3, 3, 16), 27),
        "conv1_b": E.Tensor(np.zeros(16), requires_grad=True),
        "conv2_w": he((3, 3, 16, 32), 144),
        "conv2_b": E.Tensor(np.zeros(32), requires_grad=True),
        "fc1_w": he((512, FEATURE_DIM), 512),
        "fc1_b": E.Tensor(np.zeros(FEATURE_DIM), requires_grad=True),
        "fc2_w": he((FEATURE_DIM, n_classes), FEATURE_DIM),
        "fc2_b": E.Tensor(np.zeros(n_classes), requires_grad=True),
    }
    return ClassifierParams(tensors=tensors, n_classes=n_classes)


def init_ssl_head(seed: int = 0, feature_layer: str = "penultimate") -> SslHeadParams:
    if feature_layer not in FEATURE_LAYERS:
        raise UsageError(f"feature_layer must be one of {FEATURE_LAYERS}")
    in_dim = _LAYER_DIMS[feature_layer]
    rng = derive_rng(seed, 202)
    tensors = {
        "w1": E.Tensor(rng.normal(0.0, np.sqrt(2.0 / in_dim), size=(in_dim, 64)), requires_grad=True),
        "b1": E.Tensor(np.zeros(64), requires_grad=True),
        "w2": E.Tensor(rng.normal(0.0, np.sqrt(2.0 / 64), size=(64, EMBED_DIM)), requires_grad=True),
        "b2": E.Tensor(np.zeros(EMBED_DIM), requires_grad=True),
    }
    return SslHeadParams(tensors=tensors, feature_layer=feature_layer)


# ---------------------------------------------------------------------------
# forward passes


def _as_tensor(x) -> E.Tensor:
    return x if isinstance(x, E.Tensor) else E.Tensor(np.asarray(x, dtype=np.float64))


def classifier_forward(params: ClassifierParams, batch, feature_layer: str = "penultimate"):
    """Forward pass: returns (logits, features-at-feature_layer) as Tensors.

    Inputs are pixels in [0,1]; the first layer sees them centered at zero.
    """
    x = _as_tensor(batch)
    if x.values.ndim != 4 or x.values.shape[1:] != (16, 16, 3):
        raise UsageError(f"expected (N,16,16,3) batch, got {x.values.shape}")
    t = params.tensors
    centered = E.sub(x, E.Tensor(np.array(0.5)))
    h = E.relu(E.add(E.conv2d(centered, t["conv1_w"], padding=1), t["conv1_b"]))
    h = E.maxpool2(h)
    tap_pool1 = h
    h = E.relu(E.add(E.conv2d(h, t["conv2_w"], padding=1), t["conv2_b"]))
    h = E.maxpool2(h)
    tap_pool2 = h
    n = x.values.shape[0]
    h = E.reshape(h, (n, 512))
    feats = E.relu(E.add(E.matmul(h, t["fc1_w"]), t["fc1_b"]))
    logits = E.add(E.matmul(feats, t["fc2_w"]), t["fc2_b"])
    if feature_layer == "penultimate":
        tapped = feats
    elif feature_layer == "pool1":
        tapped = E.reshape(tap_pool1, (n, _LAYER_DIMS["pool1"]))
    elif feature_layer == "pool2":
        tapped = E.reshape(tap_pool2, (n, _LAYER_DIMS["pool2"]))
    else:
        raise UsageError(f"feature_layer must be one of {FEATURE_LAYERS}")
    return logits, tapped


def head_forward(head: SslHeadParams, feats) -> E.Tensor:
    t = head.tensors
    f = _as_tensor(feats)
    h = E.relu(E.add(E.matmul(f, t["w1"]), t["b1"]))
    return E.add(E.matmul(h, t["w2"]), t["b2"])


def predict(params: ClassifierParams, batch) -> np.ndarray:
    with E.no_grad():
        logits, _ = classifier_forward(params, batch)
    return logits.values.argmax(axis=1)


# ---------------------------------------------------------------------------
# losses


def cross_entropy(logits: E.Tensor, labels) -> E.Tensor:
    """Mean negative log-softmax probability of the true labels."""
    labels = np.asarray(labels)
    n_classes = logits.values.shape[1]
    if np.any(labels < 0) or np.any(labels >= n_classes):
        raise UsageError(f"labels must be in [0, {n_classes})")
    return E.neg(E.tmean(E.take_rows(E.log_softmax(logits), labels)))


def cw_margin(logits: E.Tensor, labels, kappa: float = 0.0) -> E.Tensor:
    """Mean of max(logit_true - best_other_logit, -kappa); attacker minimizes it."""
    if kappa < 0.0:
        raise UsageError("kappa must be >= 0")
    if logits.values.shape[1] < 2:
        raise UsageError("margin needs at least two classes")
    labels = np.asarray(labels)
    margin = E.sub(E.take_rows(logits, labels), E.masked_rowmax(logits, labels))
    return E.tmean(E.maximum_scalar(margin, -kappa))


def contrastive_loss(embeddings: E.Tensor, indicator, tau: float) -> E.Tensor:
    """Temperature-scaled softmax loss over cosine similarities.

    Mean over ordered positive pairs (i, j) of
    -log( exp(cos(z_i, z_j)/tau) / sum_{k != i} exp(cos(z_i, z_k)/tau) ).
    """
    if tau <= 0.0:
        raise UsageError("tau must be positive")
    ind = np.asarray(indicator)
    emb = _as_tensor(embeddings)
    m = emb.values.shape[0]
    if ind.shape != (m, m):
        raise UsageError(f"indicator shape {ind.shape} does not match {m} embeddings")
    if not np.array_equal(ind, ind.T) or np.any(np.diag(ind) != 0):
        raise UsageError("indicator must be symmetric with a zero diagonal")
    n_pairs = int(ind.sum())
    if n_pairs == 0:
        raise UsageError("indicator marks no positive pairs")
    nz = E.normalize_rows(emb)
    sims = E.div(E.matmul(nz, E.transpose(nz)), E.Tensor(np.array(tau)))
    offdiag = 1.0 - np.eye(m)
    denom = E.tsum(E.mul(E.exp(sims), E.Tensor(offdiag)), axis=1, keepdims=True)
    pair_losses = E.sub(E.log(denom), sims)
    return E.div(E.tsum(E.mul(pair_losses, E.Tensor(ind.astype(np.float64)))),
                 E.Tensor(np.array(float(n_pairs))))


# ---------------------------------------------------------------------------
# self-supervised loss of a single image / a batch


def ssl_loss_of_image(backbone: ClassifierParams, head: SslHeadParams,
                      ccfg: ContrastiveConfig, acfg: V.AugmentConfig,
                      x: np.ndarray, negatives: np.ndarray, seed) -> float:
    """Contrastive loss of one image against a negative pool, deterministic in seed."""
    if len(negatives) == 0:
        raise UsageError("negative pool is empty")
    vb = V.sample_views(x, negatives, acfg, ccfg, seed)
    with E.no_grad():
        _, feats = classifier_forward(backbone, vb.views, head.feature_layer)
        emb = head_forward(head, feats)
        loss = contrastive_loss(emb, vb.indicator, ccfg.tau)
    return loss.item()


def ssl_loss_batch(backbone: ClassifierParams, head: SslHeadParams,
                   ccfg: ContrastiveConfig, acfg: V.AugmentConfig,
                   x: E.Tensor, negatives: np.ndarray, seeds):
    """Differentiable mean contrastive loss over a batch of anchors.

    Per-example views follow the same plan format as sample_views with the
    per-example seed, so each row's loss matches ssl_loss_of_image up to
    float reassociation from batching. Negatives are embedded without
    gradient; the gradient reaches the anchors through their views.

    Returns (scalar loss Tensor, per-example loss ndarray).
    """
    b = x.values.shape[0]
    if len(seeds) != b:
        raise UsageError(f"{len(seeds)} seeds for {b} anchors")
    n_pos, n_neg = ccfg.n_positive_views, ccfg.n_negatives
    plans = [V.sample_view_plan(len(negatives), acfg, ccfg, seeds[i]) for i in range(b)]
    pos_params = [p for plan in plans for p in plan[1][:n_pos]]
    neg_params = [p for plan in plans for p in plan[1][n_pos:]]
    neg_idx = np.concatenate([plan[0] for plan in plans])

    pos_views = V.apply_augment_batch(E.repeat_rows(x, n_pos), acfg, pos_params)
    with E.no_grad():
        neg_views = V.apply_augment_batch(E.Tensor(negatives[neg_idx]), acfg, neg_params)
        _, neg_feats = classifier_forward(backbone, neg_views, head.feature_layer)
        zn = E.normalize_rows(head_forward(head, neg_feats)).values

    _, pos_feats = classifier_forward(backbone, pos_views, head.feature_layer)
    zp = E.normalize_rows(head_forward(head, pos_feats))

    zp3 = E.reshape(zp, (b, n_pos, EMBED_DIM))
    zn3 = E.Tensor(zn.reshape(b, n_neg, EMBED_DIM))
    tau = E.Tensor(np.array(ccfg.tau))
    spp = E.div(E.bmm_nt(zp3, zp3), tau)        # (b, n_pos, n_pos)
    spn = E.div(E.bmm_nt(zp3, zn3), tau)        # (b, n_pos, n_neg)
    sims = E.concat([spp, spn], axis=2)         # (b, n_pos, n_pos+n_neg)

    self_mask = np.ones((1, n_pos, n_pos + n_neg))
    self_mask[0, np.arange(n_pos), np.arange(n_pos)] = 0.0
    denom = E.tsum(E.mul(E.exp(sims), E.Tensor(self_mask)), axis=2, keepdims=True)
    pair_losses = E.sub(E.log(denom), spp)      # broadcast (b, n_pos, n_pos)
    pos_mask = (1.0 - np.eye(n_pos))[None]
    masked = E.mul(pair_losses, E.Tensor(pos_mask))
    n_pairs = n_pos * (n_pos - 1)
    loss = E.div(E.tsum(masked), E.Tensor(np.array(float(b * n_pairs))))
    per_example = masked.values.sum(axis=(1, 2)) / n_pairs
    return loss, per_example


# ---------------------------------------------------------------------------
# optimizers


class _Sgd:
    def __init__(self, tensors, lr, momentum):
        self.lr, self.momentum = lr, momentum
        self.vel = {k: np.zeros_like(t.values) for k, t in tensors.items()}

    def step(self, tensors):
        for k, t in tensors.items():
            if t.grad is None:
                continue
            self.vel[k] = self.momentum * self.vel[k] + t.grad
            t.values = t.values - self.lr * self.vel[k]


class _Adam:
    def __init__(self, tensors, lr, beta1=0.9, beta2=0.999, eps=1e-8):
        self.lr, self.b1, self.b2, self.eps = lr, beta1, beta2, eps
        self.m = {k: np.zeros_like(t.values) for k, t in tensors.items()}
        self.v = {k: np.zeros_like(t.values) for k, t in tensors.items()}
        self.t = 0

    def step(self, tensors):
        self.t += 1
        for k, t in tensors.items():
            if t.grad is None:
                continue
            g = t.grad
            self.m[k] = self.b1 * self.m[k] + (1 - self.b1) * g
            self.v[k] = self.b2 * self.v[k] + (1 - self.b2) * g * g
            mhat = self.m[k] / (1 - self.b1 ** self.t)
            vhat = self.v[k] / (1 - self.b2 ** self.t)
            t.values = t.values - self.lr * mhat / (np.sqrt(vhat) + self.eps)


def _make_optimizer(cfg: TrainConfig, tensors):
    if cfg.optimizer == "adam":
        return _Adam(tensors, cfg.lr)
    return _Sgd(tensors, cfg.lr, cfg.momentum)


def _zero_grads(tensors):
    for t in tensors.values():
        t.grad = None


# ---------------------------------------------------------------------------
# training


def train_classifier(cfg: TrainConfig, data, log_fn=None):
    """Train the backbone; returns (params, per-epoch history).

    With cfg.adversarial, each minibatch is replaced by its PGD perturbation
    (inner attack per cfg.inner_attack) before the gradient step.
    """
    if len(data) == 0:
        raise UsageError("dataset is empty")
    n_classes = int(data.labels.max()) + 1
    params = init_classifier(n_classes, seed=cfg.seed)
    opt = _make_optimizer(cfg, params.tensors)
    rng = derive_rng(cfg.seed, 303)
    history = []
    for epoch in range(cfg.epochs):
        perm = rng.permutation(len(data))
        losses, correct, seen = [], 0, 0
        for bi in range(0, len(perm), cfg.batch_size):
            idx = perm[bi:bi + cfg.batch_size]
            xb, yb = data.images[idx], data.labels[idx]
            if cfg.adversarial:
                from .attacks import pgd
                batch_seed = int(derive_rng(cfg.seed, 404, epoch, bi).integers(2 ** 31))
                inner = replace(cfg.inner_attack, seed=batch_seed)
                xb = pgd(params, xb, yb, inner).x_a
            _zero_grads(params.tensors)
            logits, _ = classifier_forward(params, xb)
            loss = cross_entropy(logits, yb)
            if not np.isfinite(loss.item()):
                raise NumericError(f"training diverged at epoch {epoch}")
            E.backward(loss)
            opt.step(params.tensors)
            losses.append(loss.item())
            correct += int((logits.values.argmax(axis=1) == yb).sum())
            seen += len(yb)
        row = {"epoch": epoch, "loss": float(np.mean(losses)), "accuracy": correct / seen}
        history.append(row)
        if log_fn:
            log_fn(row)
    return params, history


def train_ssl_head(cfg: TrainConfig, ccfg: ContrastiveConfig, acfg: V.AugmentConfig,
                   backbone: ClassifierParams, data, negatives: np.ndarray,
                   feature_layer: str = "penultimate", log_fn=None):
    """Fit the contrastive head on clean images with the backbone frozen.

    Returns (head, per-epoch history of mean contrastive loss).
    """
    if len(data) == 0:
        raise UsageError("dataset is empty")
    frozen = backbone.copy()
    for t in frozen.tensors.values():
        t.requires_grad = False
    head = init_ssl_head(seed=cfg.seed, feature_layer=feature_layer)
    opt = _make_optimizer(cfg, head.tensors)
    rng = derive_rng(cfg.seed, 505)
    history = []
    for epoch in range(cfg.epochs):
        perm = rng.permutation(len(data))
        losses = []
        for bi in range(0, len(perm), cfg.batch_size):
            idx = perm[bi:bi + cfg.batch_size]
            anchors = data.images[idx]
            seeds = [(cfg.seed, 606, epoch, bi, int(j)) for j in idx]
            _zero_grads(head.tensors)
            loss, _ = ssl_loss_batch(frozen, head, ccfg, acfg,
                                     E.Tensor(anchors), negatives, seeds)
            if not np.isfinite(loss.item()):
                raise NumericError(f"head training diverged at epoch {epoch}")
            E.backward(loss)
            opt.step(head.tensors)
            losses.append(loss.item())
        row = {"epoch": epoch, "ssl_loss": float(np.mean(losses))}
        history.append(row)
        if log_fn:
            log_fn(row)
    return head, history


# ---------------------------------------------------------------------------
# checkpoint adapters


def classifier_to_arrays(params: ClassifierParams) -> dict:
    arrays = {name: t.values for name, t in params.tensors.items()}
    arrays["n_classes"] = np.array(float(params.n_classes))
    return arrays


def classifier_from_arrays(arrays: dict) -> ClassifierParams:
    n_classes = int(arrays["n_classes"])
    tensors = {k: E.Tensor(v, requires_grad=True) for k, v in arrays.items() if k != "n_classes"}
    return ClassifierParams(tensors=tensors, n_classes=n_classes)


_LAYER_CODES = {name: float(i) for i, name in enumerate(FEATURE_LAYERS)}


def head_to_arrays(head: SslHeadParams) -> dict:
    arrays = {name: t.values for name, t in head.tensors.items()}
    arrays["feature_layer"] = np.array(_LAYER_CODES[head.feature_layer])
    return arrays


def head_from_arrays(arrays: dict) -> SslHeadParams:
    code = int(arrays["feature_layer"])
    tensors = {k: E.Tensor(v, requires_grad=True) for k, v in arrays.items()
               if k != "feature_layer"}
    return SslHeadParams(tensors=tensors, feature_layer=FEATURE_LAYERS[code])
