"""Gradient-flow maps over decoder positions, and mask overlays."""
from __future__ import annotations

import json
from dataclasses import dataclass
from pathlib import Path

import numpy as np
from PIL import Image

from .autodiff import tensor as T
from .autodiff.tensor import Tensor
from .config import ConfigError
from .decoder import NUM_PERMUTATIONS, ARDecoder
from .model import SlotAutoEncoder

GRAD_MODES = ("default", "random")

# fixed label -> color table; label 0 and label 24 share a color
PALETTE_24 = np.array([
    (230, 25, 75), (60, 180, 75), (255, 225, 25), (0, 130, 200), (245, 130, 48), (145, 30, 180),
    (70, 240, 240), (240, 50, 230), (210, 245, 60), (250, 190, 212), (0, 128, 128), (220, 190, 255),
    (170, 110, 40), (255, 250, 200), (128, 0, 0), (170, 255, 195), (128, 128, 0), (255, 215, 180),
    (0, 0, 128), (128, 128, 128), (255, 255, 255), (0, 0, 0), (100, 149, 237), (46, 139, 87),
], dtype=np.uint8)


@dataclass
class GradNormMap:
    values: np.ndarray   # grid_h x grid_w, mean L1 norm of dL_i/dU
    mode: str
    samples: int

    def __post_init__(self):
        if not np.all(np.isfinite(self.values)) or np.any(self.values < 0):
            raise ValueError("grad-norm map must be finite and non-negative")

    def cv(self) -> float:
        """Coefficient of variation over positions."""
        return float(self.values.std() / self.values.mean())

    def edge_ratio(self) -> tuple[float, float]:
        """(mean over first row and first column, mean over the rest)."""
        edge = np.zeros(self.values.shape, dtype=bool)
        edge[0, :] = True
        edge[:, 0] = True
        return float(self.values[edge].mean()), float(self.values[~edge].mean())

    def to_json(self) -> str:
        return json.dumps({"mode": self.mode, "samples": self.samples, "cv": self.cv(),
                           "values": self.values.tolist()})


def grad_norm_map(model: SlotAutoEncoder, dataset, mode: str = "default", seed: int = 0,
                  batch_size: int = 32) -> GradNormMap:
    """Per canonical position i: mean over samples of ||d L_i / d U||_1.

    L_i = (1/d_y) ||y_i - y_hat_i||^2. The slots U are detached from the encoder,
    so only the decoder is differentiated. mode='random' draws a permutation per
    sample; 'default' always uses the raster order.
    """
    if mode not in GRAD_MODES:
        raise ConfigError(f"unknown grad-map mode {mode!r}; expected one of {GRAD_MODES}")
    if not isinstance(model.decoder, ARDecoder):
        raise ConfigError("grad-norm maps need an autoregressive decoder")
    cfg = model.cfg.decoder
    if cfg.n_patches != dataset.spec.n_patches or cfg.d_y != dataset.spec.target_dim:
        raise ConfigError("checkpoint geometry does not match the dataset")

    rng = np.random.default_rng([seed, 5])
    count = len(dataset)
    perms = (np.ones(count, dtype=np.int64) if mode == "default"
             else rng.integers(1, NUM_PERMUTATIONS + 1, size=count))
    noise = model.slot_noise(rng, count)
    patches = dataset.patches.astype(model.dtype)
    targets = dataset.targets.astype(model.dtype)

    flags = [p.requires_grad for p in model.parameters()]
    model.set_trainable(False)
    totals = np.zeros(cfg.n_patches)
    try:
        for perm in np.unique(perms):
            members = np.flatnonzero(perms == perm)
            for start in range(0, len(members), batch_size):
                idx = members[start:start + batch_size]
                with T.no_grad():
                    enc = model.encoder(Tensor(patches[idx]), None if noise is None else noise[idx])
                slots = Tensor(enc.slots.data, requires_grad=True)
                y = Tensor(targets[idx])
                diff = model.decoder(y, slots, int(perm)).recon - y
                per_patch = T.mean(diff * diff, axis=-1)                 # B x n
                for i in range(cfg.n_patches):
                    seed_grad = np.zeros(per_patch.shape, dtype=per_patch.dtype)
                    seed_grad[:, i] = 1.0
                    slots.grad = None
                    per_patch.backward(seed_grad)
                    totals[i] += np.abs(slots.grad.astype(np.float64)).sum()
    finally:
        for p, flag in zip(model.parameters(), flags):
            p.requires_grad = flag
    values = (totals / count).reshape(cfg.grid_h, cfg.grid_w)
    return GradNormMap(values=values, mode=mode, samples=count)


def overlay(image: np.ndarray, labels: np.ndarray, alpha: float = 0.5) -> np.ndarray:
    """Blend an H x W x 3 image in [0, 1] with flat per-label colors; uint8 result."""
    image = np.asarray(image, dtype=np.float64)
    labels = np.asarray(labels)
    if labels.shape != image.shape[:2]:
        raise ValueError(f"label map {labels.shape} does not match image {image.shape[:2]}")
    colors = PALETTE_24[np.mod(labels, len(PALETTE_24))].astype(np.float64)
    mixed = (1 - alpha) * np.clip(image, 0, 1) * 255 + alpha * colors
    return np.rint(mixed).astype(np.uint8)


def render_masks(image: np.ndarray, labels: np.ndarray, path, scale: int = 8) -> Path:
    """Write the overlay as a PNG, upscaled by ``scale`` with nearest neighbour."""
    rgb = overlay(image, labels)
    if scale > 1:
        rgb = np.repeat(np.repeat(rgb, scale, axis=0), scale, axis=1)
    path = Path(path)
    try:
        Image.fromarray(rgb, mode="RGB").save(path, format="PNG")
    except (OSError, ValueError) as exc:
        raise OSError(f"cannot write {path}: {exc}") from exc
    return path
