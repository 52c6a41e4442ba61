"""White-box attack suite: FGSM, PGD, BIM, margin (C&W-style) attack, and
the defense-aware Lagrangian attack, under L-inf or L2 perturbation budgets.

All iterative attacks share one core loop, so BIM is exactly PGD without the
random start and the defense-aware attack with lambda_s = 0 is bit-identical
to PGD. Attacks are batched over examples; per-example randomness is derived
from (seed, stream, example index), so results do not depend on batch
composition of the RNG side.
"""

from __future__ import annotations

from dataclasses import dataclass, replace

import numpy as np

from . import engine as E
from .exceptions import NumericError, UsageError
from .models import (ClassifierParams, SslHeadParams, ContrastiveConfig,
                     classifier_forward, cross_entropy, cw_margin, ssl_loss_batch)
from .seeding import derive_rng
from .views import AugmentConfig

NORMS = ("linf", "l2")
LOSSES = ("cross-entropy", "cw-margin")

_STREAM_INIT = 0
_STREAM_VIEWS = 1


@dataclass(frozen=True)
class AttackConfig:
    """Perturbation budget and optimization knobs for one attack.

    step_size defaults to 2.5 * epsilon / steps. epsilon = 0 is allowed and
    yields the degenerate no-op attack (useful for sweep endpoints).
    """

    epsilon: float
    norm: str = "linf"
    steps: int = 1
    step_size: float = None
    random_start: bool = True
    loss: str = "cross-entropy"
    kappa: float = 0.0
    seed: int = 0

    def __post_init__(self):
        if self.epsilon < 0.0:
            raise UsageError("epsilon must be >= 0")
        if self.norm not in NORMS:
            raise UsageError(f"norm must be one of {NORMS}")
        if self.steps < 1:
            raise UsageError("steps must be >= 1")
        if self.loss not in LOSSES:
            raise UsageError(f"loss must be one of {LOSSES}")
        if self.step_size is None:
            object.__setattr__(self, "step_size", 2.5 * self.epsilon / self.steps)
        if self.step_size < 0.0 or (self.epsilon > 0.0 and self.step_size == 0.0):
            raise UsageError("step_size must be positive")


@dataclass(frozen=True)
class SslContext:
    """Everything the self-supervised loss needs at attack/defense time."""

    backbone: ClassifierParams
    head: SslHeadParams
    contrastive: ContrastiveConfig
    augment: AugmentConfig
    negatives: np.ndarray


@dataclass(frozen=True)
class DefenseAwareConfig:
    """Lagrangian attack configuration: maximize L_c - lambda_s * L_s.

    epsilon_prime is the clean-image contrastive loss level; it is recorded
    in reports but never enters the optimization (a constant shift has zero
    gradient).
    """

    base: AttackConfig
    lambda_s: float = 0.0
    epsilon_prime: float = 0.0

    def __post_init__(self):
        if self.lambda_s < 0.0:
            raise UsageError("lambda_s must be >= 0")


@dataclass(frozen=True)
class AttackResult:
    x_a: np.ndarray
    delta: np.ndarray
    success: np.ndarray           # per-example: prediction != label
    loss_trace: np.ndarray        # (steps+1, N) classification objective
    ssl_trace: np.ndarray = None  # (steps, N) when the attack tracks L_s


def project(delta: np.ndarray, epsilon: float, norm: str) -> np.ndarray:
    """Project perturbations into the epsilon-ball (idempotent).

    L-inf clamps elementwise; L2 rescales each example's perturbation onto
    the sphere only when its norm exceeds epsilon.
    """
    if norm not in NORMS:
        raise UsageError(f"norm must be one of {NORMS}")
    delta = np.asarray(delta, dtype=np.float64)
    if norm == "linf":
        return np.clip(delta, -epsilon, epsilon)
    flat = delta.reshape(delta.shape[0], -1) if delta.ndim == 4 else delta.reshape(1, -1)
    norms = np.sqrt((flat * flat).sum(axis=1))
    scale = np.ones_like(norms)
    # the tiny slack keeps repeated projection bit-exactly idempotent
    over = norms > epsilon * (1.0 + 1e-12)
    scale[over] = epsilon / norms[over]
    out = flat * scale[:, None]
    return out.reshape(delta.shape)


def _init_delta(shape, cfg: AttackConfig) -> np.ndarray:
    """Per-example uniform draw inside the epsilon-ball."""
    n = shape[0]
    d = int(np.prod(shape[1:]))
    delta = np.zeros(shape)
    for i in range(n):
        rng = derive_rng(cfg.seed, _STREAM_INIT, i)
        if cfg.norm == "linf":
            delta[i] = rng.uniform(-cfg.epsilon, cfg.epsilon, size=shape[1:])
        else:
            direction = rng.normal(size=shape[1:])
            nrm = np.sqrt((direction * direction).sum())
            if nrm == 0.0:
                continue
            radius = cfg.epsilon * rng.random() ** (1.0 / d)
            delta[i] = direction / nrm * radius
    return delta


def _per_example_objective(logits: np.ndarray, y: np.ndarray, cfg: AttackConfig) -> np.ndarray:
    if cfg.loss == "cross-entropy":
        shifted = logits - logits.max(axis=1, keepdims=True)
        lse = np.log(np.exp(shifted).sum(axis=1))
        return lse - shifted[np.arange(len(y)), y]
    rows = np.arange(len(y))
    scratch = logits.copy()
    scratch[rows, y] = -np.inf
    margin = logits[rows, y] - scratch.max(axis=1)
    return np.maximum(margin, -cfg.kappa)


def _ascent_objective(logits: E.Tensor, y: np.ndarray, cfg: AttackConfig) -> E.Tensor:
    # both losses are phrased as something the attacker maximizes
    if cfg.loss == "cross-entropy":
        return cross_entropy(logits, y)
    return E.neg(cw_margin(logits, y, cfg.kappa))


def _frozen(params: ClassifierParams) -> ClassifierParams:
    out = ClassifierParams(
        tensors={k: E.Tensor(t.values) for k, t in params.tensors.items()},
        n_classes=params.n_classes)
    return out


def _frozen_head(head: SslHeadParams) -> SslHeadParams:
    return SslHeadParams(
        tensors={k: E.Tensor(t.values) for k, t in head.tensors.items()},
        feature_layer=head.feature_layer)


def _iterate(model: ClassifierParams, x: np.ndarray, y: np.ndarray,
             cfg: AttackConfig, ssl: SslContext = None,
             lambda_s: float = 0.0) -> AttackResult:
    """Shared PGD-style ascent loop; the ssl branch is skipped entirely when
    lambda_s == 0 so the plain attacks stay bit-identical."""
    x = np.asarray(x, dtype=np.float64)
    squeeze = x.ndim == 3
    if squeeze:
        x = x[None]
    y = np.atleast_1d(np.asarray(y))
    n = x.shape[0]
    model = _frozen(model)
    use_ssl = lambda_s > 0.0
    if use_ssl:
        ssl_backbone = _frozen(ssl.backbone)
        ssl_head = _frozen_head(ssl.head)

    delta = _init_delta(x.shape, cfg) if cfg.random_start else np.zeros_like(x)
    delta = project(delta, cfg.epsilon, cfg.norm)
    x_a = np.clip(x + delta, 0.0, 1.0)

    trace = np.zeros((cfg.steps + 1, n))
    ssl_trace = np.zeros((cfg.steps, n)) if use_ssl else None
    for k in range(cfg.steps):
        xt = E.Tensor(x_a, requires_grad=True)
        logits, _ = classifier_forward(model, xt)
        trace[k] = _per_example_objective(logits.values, y, cfg)
        objective = _ascent_objective(logits, y, cfg)
        if use_ssl:
            seeds = [(cfg.seed, _STREAM_VIEWS, i, k) for i in range(n)]
            ssl_loss, per_ex = ssl_loss_batch(ssl_backbone, ssl_head, ssl.contrastive,
                                              ssl.augment, xt, ssl.negatives, seeds)
            ssl_trace[k] = per_ex
            objective = E.sub(objective, E.mul(E.Tensor(np.array(lambda_s)), ssl_loss))
        E.backward(objective)
        g = xt.grad
        if not np.all(np.isfinite(g)):
            raise NumericError(f"non-finite attack gradient at step {k}")
        if cfg.norm == "linf":
            x_a = x_a + cfg.step_size * np.sign(g)
        else:
            flat = g.reshape(n, -1)
            norms = np.sqrt((flat * flat).sum(axis=1))
            norms[norms == 0.0] = 1.0
            x_a = x_a + cfg.step_size * (flat / norms[:, None]).reshape(g.shape)
        delta = project(x_a - x, cfg.epsilon, cfg.norm)
        x_a = np.clip(x + delta, 0.0, 1.0)

    with E.no_grad():
        logits, _ = classifier_forward(model, x_a)
    trace[cfg.steps] = _per_example_objective(logits.values, y, cfg)
    success = logits.values.argmax(axis=1) != y
    delta = x_a - x
    if squeeze:
        return AttackResult(x_a=x_a[0], delta=delta[0], success=success[0],
                            loss_trace=trace[:, 0],
                            ssl_trace=None if ssl_trace is None else ssl_trace[:, 0])
    return AttackResult(x_a=x_a, delta=delta, success=success,
                        loss_trace=trace, ssl_trace=ssl_trace)


def pgd(model: ClassifierParams, x, y, cfg: AttackConfig) -> AttackResult:
    """Projected gradient ascent on the configured classification loss."""
    return _iterate(model, x, y, cfg)


def bim(model: ClassifierParams, x, y, cfg: AttackConfig) -> AttackResult:
    """Basic iterative method: PGD without the initial random start."""
    return _iterate(model, x, y, replace(cfg, random_start=False))


def fgsm(model: ClassifierParams, x, y, epsilon: float, seed: int = 0) -> AttackResult:
    """Single sign-of-gradient step of size epsilon from the clean input."""
    cfg = AttackConfig(epsilon=epsilon, norm="linf", steps=1, step_size=epsilon,
                       random_start=False, loss="cross-entropy", seed=seed)
    return _iterate(model, x, y, cfg)


def cw_attack(model: ClassifierParams, x, y, cfg: AttackConfig) -> AttackResult:
    """Margin attack: PGD-style minimization of the logit margin in the ball."""
    return _iterate(model, x, y, replace(cfg, loss="cw-margin"))


def defense_aware_attack(model: ClassifierParams, ssl: SslContext, x, y,
                         cfg: DefenseAwareConfig) -> AttackResult:
    """Lagrangian adaptive attack: ascent on L_c - lambda_s * L_s.

    Per-step contrastive losses use views with iteration-derived seeds.
    lambda_s = 0 reduces bit-exactly to pgd with the same base config.
    """
    return _iterate(model, x, y, cfg.base, ssl=ssl, lambda_s=cfg.lambda_s)


def alternating_defense_aware_attack(model: ClassifierParams, ssl: SslContext,
                                     x, y, cfg: DefenseAwareConfig,
                                     defense_cfg, rounds: int = 2) -> AttackResult:
    """Diagnostic alternating form of the adaptive attack.

    Alternates the defender's reverse step (minimizing L_s) with an attack
    step (maximizing L_c around the original input). Kept for comparison
    against the Lagrangian form, which is the canonical adaptive attack.
    """
    from .defense import reverse_attack

    x = np.asarray(x, dtype=np.float64)
    result = None
    x_a = x
    for _ in range(rounds):
        repaired = reverse_attack(ssl.backbone, ssl.head, x_a, defense_cfg).x_repaired
        result = _iterate(model, repaired, y, cfg.base)
        delta = project(result.x_a - x, cfg.base.epsilon, cfg.base.norm)
        x_a = np.clip(x + delta, 0.0, 1.0)
    with E.no_grad():
        logits, _ = classifier_forward(_frozen(model), x_a)
    success = logits.values.argmax(axis=1) != np.atleast_1d(y)
    return AttackResult(x_a=x_a, delta=x_a - x, success=success,
                        loss_trace=result.loss_trace)
