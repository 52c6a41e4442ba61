"""Stochastic view augmentation for the contrastive objective.

A view batch holds augmented copies of an anchor image (positives) and of
randomly chosen pool images (negatives), plus the pair indicator matrix.
Augmentation parameters are sampled outside the autodiff graph, but each
transform itself (pad-crop window, flip, brightness, contrast, grayscale
mix) is applied through engine ops, so when the anchor is a differentiable
tensor the gradient flows through the fixed transforms back to it.

The pipeline is crop -> flip -> brightness -> contrast -> grayscale -> clamp.
There is deliberately no blur stage.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import engine as E
from .exceptions import UsageError
from .seeding import derive_rng

ANCHOR_ID = -1

_LUMA = np.array([0.299, 0.587, 0.114])


@dataclass(frozen=True)
class AugmentConfig:
    """Augmentation strengths; defaults scaled to 16x16 inputs."""

    pad: int = 2
    jitter: float = 0.4
    grayscale_p: float = 0.2
    flip_p: float = 0.5

    def __post_init__(self):
        if self.pad < 0:
            raise UsageError("pad must be >= 0")
        if not (0.0 <= self.jitter < 1.0):
            raise UsageError("jitter must be in [0, 1)")
        if not (0.0 <= self.grayscale_p <= 1.0) or not (0.0 <= self.flip_p <= 1.0):
            raise UsageError("probabilities must be in [0, 1]")

    @staticmethod
    def identity() -> "AugmentConfig":
        return AugmentConfig(pad=0, jitter=0.0, grayscale_p=0.0, flip_p=0.0)


@dataclass(frozen=True)
class ViewBatch:
    """Augmented views, the positive-pair indicator, and the view->source map."""

    views: np.ndarray      # (m, 16, 16, 3)
    indicator: np.ndarray  # (m, m) binary, symmetric, zero diagonal
    origin: np.ndarray     # (m,) source image id; ANCHOR_ID for anchor views


def sample_augment_params(cfg: AugmentConfig, rng) -> tuple:
    """One view's transform parameters; draw order is part of the format."""
    top = int(rng.integers(0, 2 * cfg.pad + 1))
    left = int(rng.integers(0, 2 * cfg.pad + 1))
    flip = bool(rng.random() < cfg.flip_p)
    brightness = float(rng.uniform(1.0 - cfg.jitter, 1.0 + cfg.jitter))
    contrast = float(rng.uniform(1.0 - cfg.jitter, 1.0 + cfg.jitter))
    gray = bool(rng.random() < cfg.grayscale_p)
    return (top, left, flip, brightness, contrast, gray)


def apply_augment_batch(x: E.Tensor, cfg: AugmentConfig, params: list) -> E.Tensor:
    """Apply per-row transforms to an NHWC tensor; differentiable throughout."""
    n, h, w, _ = x.values.shape
    if len(params) != n:
        raise UsageError(f"{len(params)} parameter sets for {n} images")
    tops = np.array([p[0] for p in params])
    lefts = np.array([p[1] for p in params])
    flips = np.array([p[2] for p in params])
    brightness = np.array([p[3] for p in params])
    contrast = np.array([p[4] for p in params])
    grays = np.array([p[5] for p in params])

    # structurally-identity stages are skipped so an identity config is a
    # bit-exact no-op (a unit contrast factor would otherwise leave
    # subtract-then-add rounding residue)
    out = x
    if cfg.pad > 0:
        out = E.extract_windows(E.pad2d(x, cfg.pad), tops, lefts, h, w)
    if flips.any():
        out = E.flip_lr_where(out, flips)
    if np.any(brightness != 1.0):
        out = E.mul(out, E.Tensor(brightness[:, None, None, None]))
    if np.any(contrast != 1.0):
        m = E.tmean(out, axis=(1, 2, 3), keepdims=True)
        out = E.add(E.mul(E.sub(out, m), E.Tensor(contrast[:, None, None, None])), m)
    if grays.any():
        mats = np.where(grays[:, None, None],
                        np.broadcast_to(np.outer(_LUMA, np.ones(3)), (n, 3, 3)),
                        np.broadcast_to(np.eye(3), (n, 3, 3)))
        out = E.channel_mix(out, mats)
    return E.clip01(out)


def augment_one(image: np.ndarray, cfg: AugmentConfig, seed) -> np.ndarray:
    """Augment a single image deterministically from seed."""
    rng = derive_rng(seed) if np.isscalar(seed) else derive_rng(*seed)
    params = [sample_augment_params(cfg, rng)]
    with E.no_grad():
        out = apply_augment_batch(E.Tensor(image[None]), cfg, params)
    return out.values[0]


def sample_view_plan(pool_size: int, cfg: AugmentConfig, ccfg, seed):
    """Draw the negative indices and all per-view transform parameters.

    The draw order (negatives first, then positives' params, then negatives'
    params) is fixed so the plan is a pure function of the seed.
    """
    if pool_size < ccfg.n_negatives:
        raise UsageError(f"pool of {pool_size} images cannot supply {ccfg.n_negatives} negatives")
    rng = derive_rng(seed) if np.isscalar(seed) else derive_rng(*seed)
    neg_idx = np.sort(rng.choice(pool_size, size=ccfg.n_negatives, replace=False))
    params = [sample_augment_params(cfg, rng)
              for _ in range(ccfg.n_positive_views + ccfg.n_negatives)]
    return neg_idx, params


def sample_views(anchor: np.ndarray, pool: np.ndarray, cfg: AugmentConfig,
                 ccfg, seed) -> ViewBatch:
    """Build the positive/negative view batch for one anchor image.

    ccfg supplies n_positive_views and n_negatives. Deterministic given seed;
    pixels are clamped to [0,1] by the augmentation pipeline.
    """
    n_pos = ccfg.n_positive_views
    neg_idx, params = sample_view_plan(len(pool), cfg, ccfg, seed)
    sources = np.concatenate([np.repeat(anchor[None], n_pos, axis=0), pool[neg_idx]])
    with E.no_grad():
        views = apply_augment_batch(E.Tensor(sources), cfg, params).values
    m = n_pos + ccfg.n_negatives
    indicator = np.zeros((m, m), dtype=np.int64)
    indicator[:n_pos, :n_pos] = 1 - np.eye(n_pos, dtype=np.int64)
    origin = np.concatenate([np.full(n_pos, ANCHOR_ID, dtype=np.int64), neg_idx])
    return ViewBatch(views=views, indicator=indicator, origin=origin)
