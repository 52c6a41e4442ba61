"""Self-supervised reverse attack and the defended prediction path.

The reverse attack perturbs a possibly-attacked input to lower the
contrastive loss, projecting every iterate back into the epsilon_v-ball
around the original input and clamping to pixel range. The defense never
sees a label: no function here takes one.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import engine as E
from .attacks import SslContext, project, _frozen, _frozen_head
from .exceptions import NumericError, UsageError
from .models import (ClassifierParams, SslHeadParams, classifier_forward,
                     ssl_loss_batch)
from .seeding import derive_rng

STEP_RULES = ("sign", "raw-gradient", "normalized-l2")

_STREAM_INIT = 10
_STREAM_VIEWS = 11

_CHUNK = 64  # fixed, so chunking never depends on thread count


@dataclass(frozen=True)
class DefenseConfig:
    """Reverse-attack knobs.

    eta defaults to 2.5 * epsilon_v / max(steps, 1); init_noise_scale
    defaults to epsilon_v / 2 (uniform). The ssl context supplies the
    contrastive/augment configs and the fixed negative pool.
    """

    epsilon_v: float
    steps: int = 40
    eta: float = None
    init_noise_scale: float = None
    step_rule: str = "sign"
    norm: str = "linf"
    ssl: SslContext = None
    seed: int = 0

    def __post_init__(self):
        if self.epsilon_v <= 0.0:
            raise UsageError("epsilon_v must be positive")
        if self.steps < 0:
            raise UsageError("steps must be >= 0")
        if self.step_rule not in STEP_RULES:
            raise UsageError(f"step_rule must be one of {STEP_RULES}")
        if self.eta is None:
            object.__setattr__(self, "eta", 2.5 * self.epsilon_v / max(self.steps, 1))
        if self.init_noise_scale is None:
            object.__setattr__(self, "init_noise_scale", self.epsilon_v / 2.0)
        if self.eta <= 0.0 or self.init_noise_scale < 0.0:
            raise UsageError("eta must be positive, init_noise_scale >= 0")
        if self.ssl is None:
            raise UsageError("defense needs an ssl context")


@dataclass(frozen=True)
class DefenseResult:
    r: np.ndarray            # reverse perturbation, x_repaired - x
    x_repaired: np.ndarray
    prediction: np.ndarray
    ssl_trace: np.ndarray    # (steps, N) contrastive loss before each step


def _init_noise(shape, scale: float, seed: int, stream: int, offset: int = 0) -> np.ndarray:
    """Per-example uniform noise; example indices are global (offset + row)."""
    noise = np.zeros(shape)
    if scale == 0.0:
        return noise
    for i in range(shape[0]):
        rng = derive_rng(seed, stream, offset + i)
        noise[i] = rng.uniform(-scale, scale, size=shape[1:])
    return noise


def reverse_attack(backbone: ClassifierParams, head: SslHeadParams,
                   x: np.ndarray, cfg: DefenseConfig) -> DefenseResult:
    """Descend the contrastive loss within the epsilon_v-ball around x.

    Views are resampled each iteration with seeds derived from
    (cfg.seed, example index, iteration); the projection center is always
    the received input, never an intermediate iterate.
    """
    x = np.asarray(x, dtype=np.float64)
    squeeze = x.ndim == 3
    if squeeze:
        x = x[None]
    n = x.shape[0]
    model = _frozen(backbone)
    fhead = _frozen_head(head)
    ssl = cfg.ssl

    x_rep = np.empty_like(x)
    trace = np.zeros((cfg.steps, n))
    for lo in range(0, n, _CHUNK):
        hi = min(lo + _CHUNK, n)
        xc = x[lo:hi]
        noise = _init_noise(xc.shape, cfg.init_noise_scale, cfg.seed, _STREAM_INIT, offset=lo)
        xp = np.clip(xc + project(noise, cfg.epsilon_v, cfg.norm), 0.0, 1.0)
        for k in range(cfg.steps):
            xt = E.Tensor(xp, requires_grad=True)
            seeds = [(cfg.seed, _STREAM_VIEWS, lo + j, k) for j in range(hi - lo)]
            loss, per_ex = ssl_loss_batch(model, fhead, ssl.contrastive, ssl.augment,
                                          xt, ssl.negatives, seeds)
            trace[k, lo:hi] = per_ex
            E.backward(loss)
            g = xt.grad
            if not np.all(np.isfinite(g)):
                raise NumericError(f"non-finite defense gradient at iteration {k}")
            if cfg.step_rule == "sign":
                xp = xp - cfg.eta * np.sign(g)
            elif cfg.step_rule == "raw-gradient":
                xp = xp - cfg.eta * g
            else:
                flat = g.reshape(hi - lo, -1)
                norms = np.sqrt((flat * flat).sum(axis=1))
                norms[norms == 0.0] = 1.0
                xp = xp - cfg.eta * (flat / norms[:, None]).reshape(g.shape)
            xp = np.clip(xc + project(xp - xc, cfg.epsilon_v, cfg.norm), 0.0, 1.0)
        x_rep[lo:hi] = xp

    with E.no_grad():
        logits, _ = classifier_forward(model, x_rep)
    pred = logits.values.argmax(axis=1)
    r = x_rep - x
    if squeeze:
        return DefenseResult(r=r[0], x_repaired=x_rep[0], prediction=pred[0],
                             ssl_trace=trace[:, 0])
    return DefenseResult(r=r, x_repaired=x_rep, prediction=pred, ssl_trace=trace)


def defend_predict(backbone: ClassifierParams, head: SslHeadParams,
                   x: np.ndarray, cfg: DefenseConfig) -> np.ndarray:
    """Predict on the repaired input."""
    return reverse_attack(backbone, head, x, cfg).prediction


def random_noise_baseline(backbone: ClassifierParams, x: np.ndarray,
                          epsilon_v: float, seed: int = 0,
                          norm: str = "linf") -> np.ndarray:
    """Predict on x plus uniform noise projected into the epsilon_v-ball."""
    x = np.asarray(x, dtype=np.float64)
    squeeze = x.ndim == 3
    if squeeze:
        x = x[None]
    noise = np.zeros_like(x)
    if epsilon_v > 0.0:
        for i in range(x.shape[0]):
            rng = derive_rng(seed, _STREAM_INIT, i)
            noise[i] = rng.uniform(-epsilon_v, epsilon_v, size=x.shape[1:])
    noisy = np.clip(x + project(noise, epsilon_v, norm), 0.0, 1.0)
    with E.no_grad():
        logits, _ = classifier_forward(_frozen(backbone), noisy)
    pred = logits.values.argmax(axis=1)
    return pred[0] if squeeze else pred
