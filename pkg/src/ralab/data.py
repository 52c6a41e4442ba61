"""Synthetic dataset generation, IDX loading, checkpoints, and experiment configs.

Everything here is deterministic and platform-independent: generation is a
pure function of (n, seed), the checkpoint format pins little-endian float64
payloads, and IDX parsing follows the big-endian magic/dims convention.
"""

from __future__ import annotations

import json
import struct
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .exceptions import DataError

IMAGE_HW = 16
N_CHANNELS = 3

CHECKPOINT_MAGIC = b"RALB"
CHECKPOINT_VERSION = 1
_MAX_ELEMENTS = 1 << 28  # dimension-overflow guard for corrupt headers

SHAPES = ("disk", "square", "cross", "triangle", "ring")
COLOR_FAMILIES = ("warm", "cool")


@dataclass(frozen=True)
class Dataset:
    """Images in [0,1]^(N,16,16,3) with integer labels."""

    images: np.ndarray
    labels: np.ndarray
    split: str
    seed: int

    def __post_init__(self):
        if len(self.images) != len(self.labels):
            raise DataError("image/label count mismatch")
        if self.images.ndim != 4 or self.images.shape[1:] != (IMAGE_HW, IMAGE_HW, N_CHANNELS):
            raise DataError(f"expected (N,16,16,3) images, got {self.images.shape}")
        if self.images.size and (self.images.min() < 0.0 or self.images.max() > 1.0):
            raise DataError("image pixels outside [0,1]")

    def __len__(self):
        return len(self.images)


def _shape_mask(shape_name, cx, cy, r, yy, xx):
    if shape_name == "disk":
        return (xx - cx) ** 2 + (yy - cy) ** 2 <= r * r
    if shape_name == "square":
        return (np.abs(xx - cx) <= r * 0.82) & (np.abs(yy - cy) <= r * 0.82)
    if shape_name == "cross":
        arm = max(r * 0.38, 0.9)
        box = (np.abs(xx - cx) <= r) & (np.abs(yy - cy) <= r)
        return box & ((np.abs(xx - cx) <= arm) | (np.abs(yy - cy) <= arm))
    if shape_name == "triangle":
        # upward-pointing: width grows linearly from apex
        t = (yy - (cy - r)) / (2.0 * r)
        return (t >= 0.0) & (t <= 1.0) & (np.abs(xx - cx) <= t * r)
    if shape_name == "ring":
        d2 = (xx - cx) ** 2 + (yy - cy) ** 2
        return (d2 <= r * r) & (d2 >= (0.45 * r) ** 2)
    raise DataError(f"unknown shape {shape_name!r}")


def _family_color(family, rng):
    if family == "warm":
        base = np.array([0.85, 0.45, 0.15])
    else:
        base = np.array([0.15, 0.45, 0.85])
    jitter = rng.uniform(-0.12, 0.12, size=3)
    return np.clip(base + jitter, 0.0, 1.0)


def generate_synthetic(n: int, n_classes: int = 10, seed: int = 0,
                       split: str = "train") -> Dataset:
    """Procedural shape/color dataset: class = (shape index, color family).

    Classes interleave so any prefix is near-balanced; per-image geometry,
    color jitter, and background noise come from a per-index child RNG, so
    the dataset is a pure function of (n, n_classes, seed).
    """
    if n_classes < 2 or n_classes > len(SHAPES) * len(COLOR_FAMILIES):
        raise DataError(f"n_classes must be in [2, {len(SHAPES) * len(COLOR_FAMILIES)}]")
    if n < n_classes:
        raise DataError("need at least one example per class")
    yy, xx = np.mgrid[0:IMAGE_HW, 0:IMAGE_HW].astype(np.float64)
    images = np.zeros((n, IMAGE_HW, IMAGE_HW, N_CHANNELS))
    labels = np.zeros(n, dtype=np.int64)
    for i in range(n):
        label = i % n_classes
        rng = np.random.default_rng(np.random.SeedSequence((seed, i)))
        shape_name = SHAPES[label % len(SHAPES)]
        family = COLOR_FAMILIES[label // len(SHAPES)]
        cx = 7.5 + rng.uniform(-2.0, 2.0)
        cy = 7.5 + rng.uniform(-2.0, 2.0)
        r = rng.uniform(3.2, 5.2)
        fg = _family_color(family, rng)
        bg = rng.uniform(0.25, 0.55, size=3)
        img = np.broadcast_to(bg, (IMAGE_HW, IMAGE_HW, 3)).copy()
        mask = _shape_mask(shape_name, cx, cy, r, yy, xx)
        img[mask] = fg
        img += rng.normal(0.0, 0.04, size=img.shape)
        images[i] = np.clip(img, 0.0, 1.0)
        labels[i] = label
    return Dataset(images=images, labels=labels, split=split, seed=seed)


# ---------------------------------------------------------------------------
# IDX loading (optional external data)

_IDX_IMAGE_MAGIC = 0x00000803
_IDX_LABEL_MAGIC = 0x00000801


def _read_idx(path: Path, expected_magic: int) -> np.ndarray:
    raw = Path(path).read_bytes()
    if len(raw) < 4:
        raise DataError(f"{path}: truncated IDX header")
    magic = struct.unpack(">i", raw[:4])[0]
    if magic != expected_magic:
        raise DataError(f"{path}: bad IDX magic {magic:#010x}, expected {expected_magic:#010x}")
    ndim = magic & 0xFF
    header = 4 + 4 * ndim
    if len(raw) < header:
        raise DataError(f"{path}: truncated IDX dimensions")
    dims = struct.unpack(f">{ndim}i", raw[4:header])
    count = int(np.prod(dims))
    if len(raw) - header != count:
        raise DataError(f"{path}: payload is {len(raw) - header} bytes, header promises {count}")
    return np.frombuffer(raw, dtype=np.uint8, offset=header).reshape(dims)


def load_idx(images_path, labels_path) -> Dataset:
    """Load an IDX image/label pair, normalized and fitted to 16x16x3."""
    imgs = _read_idx(Path(images_path), _IDX_IMAGE_MAGIC)
    labels = _read_idx(Path(labels_path), _IDX_LABEL_MAGIC)
    if imgs.shape[0] != labels.shape[0]:
        raise DataError(f"image count {imgs.shape[0]} != label count {labels.shape[0]}")
    x = imgs.astype(np.float64) / 255.0
    if x.ndim == 3:
        x = np.repeat(x[..., None], 3, axis=3)
    n, h, w, _ = x.shape
    # center crop / zero-pad to 16x16
    out = np.zeros((n, IMAGE_HW, IMAGE_HW, N_CHANNELS))
    ch, cw = min(h, IMAGE_HW), min(w, IMAGE_HW)
    sy, sx = (h - ch) // 2, (w - cw) // 2
    dy, dx = (IMAGE_HW - ch) // 2, (IMAGE_HW - cw) // 2
    out[:, dy:dy + ch, dx:dx + cw, :] = x[:, sy:sy + ch, sx:sx + cw, :]
    return Dataset(images=out, labels=labels.astype(np.int64), split="external", seed=0)


# ---------------------------------------------------------------------------
# checkpoints

def save_checkpoint(arrays: dict, path):
    """Write named float64 arrays in the RALB binary format (bit-exact round trip)."""
    path = Path(path)
    parts = [CHECKPOINT_MAGIC, struct.pack("<H", CHECKPOINT_VERSION)]
    for name, arr in arrays.items():
        arr = np.asarray(arr, dtype=np.float64)
        encoded = name.encode("utf-8")
        if len(encoded) > 0xFFFF:
            raise DataError(f"array name too long: {name!r}")
        if arr.ndim > 0xFF:
            raise DataError(f"array rank too large: {arr.ndim}")
        parts.append(struct.pack("<H", len(encoded)))
        parts.append(encoded)
        parts.append(struct.pack("<B", arr.ndim))
        for d in arr.shape:
            parts.append(struct.pack("<I", d))
        parts.append(arr.tobytes(order="C"))
    path.write_bytes(b"".join(parts))


def load_checkpoint(path) -> dict:
    """Read a RALB checkpoint back into an ordered name -> array dict."""
    raw = Path(path).read_bytes()
    if len(raw) < 6:
        raise DataError(f"{path}: truncated checkpoint header")
    if raw[:4] != CHECKPOINT_MAGIC:
        raise DataError(f"{path}: bad checkpoint magic {raw[:4]!r}")
    version = struct.unpack("<H", raw[4:6])[0]
    if version != CHECKPOINT_VERSION:
        raise DataError(f"{path}: unsupported checkpoint version {version}")
    arrays = {}
    off = 6
    while off < len(raw):
        if off + 2 > len(raw):
            raise DataError(f"{path}: corrupt header at offset {off}")
        (name_len,) = struct.unpack_from("<H", raw, off)
        off += 2
        if off + name_len + 1 > len(raw):
            raise DataError(f"{path}: corrupt header at offset {off}")
        name = raw[off:off + name_len].decode("utf-8")
        off += name_len
        (rank,) = struct.unpack_from("<B", raw, off)
        off += 1
        if off + 4 * rank > len(raw):
            raise DataError(f"{path}: corrupt dims for array {name!r}")
        dims = struct.unpack_from(f"<{rank}I", raw, off) if rank else ()
        off += 4 * rank
        count = int(np.prod(dims)) if rank else 1
        if count > _MAX_ELEMENTS:
            raise DataError(f"{path}: dimension overflow for array {name!r}")
        nbytes = 8 * count
        if off + nbytes > len(raw):
            raise DataError(f"{path}: truncated payload for array {name!r}")
        arrays[name] = np.frombuffer(raw, dtype="<f8", count=count, offset=off).reshape(dims).copy()
        off += nbytes
    return arrays


# ---------------------------------------------------------------------------
# experiment configuration

_REQUIRED_SECTIONS = ("dataset",)


def load_config(path) -> dict:
    """Parse and validate a JSON experiment config.

    Validation is structural (types and ranges of the numeric knobs) plus
    resolvability of any referenced input paths. Section-specific dataclasses
    re-validate on construction.
    """
    path = Path(path)
    try:
        text = path.read_text(encoding="utf-8")
    except OSError as exc:
        raise DataError(f"cannot read config {path}: {exc}") from exc
    try:
        cfg = json.loads(text)
    except json.JSONDecodeError as exc:
        raise DataError(f"config {path} is not valid JSON: {exc}") from exc
    if not isinstance(cfg, dict):
        raise DataError(f"config {path} must be a JSON object")
    for section in _REQUIRED_SECTIONS:
        if section not in cfg:
            raise DataError(f"config {path} missing section {section!r}")
    _validate_numbers(cfg, path)
    for key in ("classifier", "ssl_head", "joint_csv"):
        ref = cfg.get("paths", {}).get(key)
        if ref is not None and not (path.parent / ref).exists() and not Path(ref).exists():
            raise DataError(f"config {path}: referenced path {ref!r} does not exist")
    return cfg


_POSITIVE_KEYS = {"epochs", "batch_size", "lr", "epsilon", "steps", "step_size",
                  "epsilon_v", "eta", "tau", "n_positive_views", "n_negatives",
                  "n_train", "n_test", "n_classes", "momentum"}
_UNIT_KEYS = {"grayscale_p", "flip_p"}


def _validate_numbers(node, path, crumb=""):
    if isinstance(node, dict):
        for k, v in node.items():
            _validate_numbers(v, path, f"{crumb}.{k}" if crumb else k)
        return
    if isinstance(node, list):
        for i, v in enumerate(node):
            _validate_numbers(v, path, f"{crumb}[{i}]")
        return
    key = crumb.rsplit(".", 1)[-1]
    if isinstance(node, bool) or node is None or isinstance(node, str):
        return
    if isinstance(node, (int, float)):
        if not np.isfinite(node):
            raise DataError(f"config {path}: {crumb} is not finite")
        if key in _POSITIVE_KEYS and node <= 0:
            raise DataError(f"config {path}: {crumb} must be positive, got {node}")
        if key in _UNIT_KEYS and not (0.0 <= node <= 1.0):
            raise DataError(f"config {path}: {crumb} must be in [0,1], got {node}")
