"""Synthetic multi-object sprite scenes with exact instance and class masks.

Randomness comes from SplitMix64, so a (spec, seed) pair renders the same
bytes on any platform:

    state <- state + 0x9E3779B97F4A7C15            (mod 2^64)
    z <- (state ^ (state >> 30)) * 0xBF58476D1CE4E5B9
    z <- (z ^ (z >> 27)) * 0x94D049BB133111EB
    output z ^ (z >> 31)

Uniform floats take the top 53 bits: ``(x >> 11) * 2^-53``.
"""
from __future__ import annotations

import dataclasses
import hashlib
import json
import math
import os
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import _kernels
from .autodiff.io import IntegrityError, decode_tensor, encode_tensor

_MASK64 = (1 << 64) - 1

SHAPE_CLASSES = ("rectangle", "ellipse", "triangle")

DEFAULT_PALETTE = (
    (0.90, 0.20, 0.20),
    (0.20, 0.75, 0.25),
    (0.25, 0.35, 0.95),
    (0.95, 0.85, 0.20),
    (0.85, 0.30, 0.85),
    (0.20, 0.85, 0.85),
    (0.95, 0.55, 0.15),
    (0.95, 0.95, 0.95),
)


class SceneGenerationError(RuntimeError):
    """Objects could not be placed under the visibility constraint."""


class SplitMix64:
    def __init__(self, seed: int):
        self.state = seed & _MASK64

    def next_u64(self) -> int:
        self.state = (self.state + 0x9E3779B97F4A7C15) & _MASK64
        z = self.state
        z = ((z ^ (z >> 30)) * 0xBF58476D1CE4E5B9) & _MASK64
        z = ((z ^ (z >> 27)) * 0x94D049BB133111EB) & _MASK64
        return z ^ (z >> 31)

    def uniform(self) -> float:
        return (self.next_u64() >> 11) * (1.0 / (1 << 53))

    def randint(self, lo: int, hi: int) -> int:
        """Integer in [lo, hi] inclusive."""
        return lo + min(hi - lo, int(self.uniform() * (hi - lo + 1)))


@dataclass(frozen=True)
class SceneSpec:
    image_size: int = 32
    patch_size: int = 4
    objects_min: int = 2
    objects_max: int = 4
    size_min: int = 8
    size_max: int = 16
    min_visible: int = 12
    allow_occlusion: bool = True
    background: tuple[float, float, float] = (0.1, 0.1, 0.1)
    palette: tuple[tuple[float, float, float], ...] = DEFAULT_PALETTE
    target_mode: str = "pixels"
    feature_width: int = 32
    feature_seed: int = 0

    def __post_init__(self):
        if self.image_size % self.patch_size:
            raise ValueError(f"image_size {self.image_size} not divisible by patch_size {self.patch_size}")
        if not 1 <= self.objects_min <= self.objects_max:
            raise ValueError("need 1 <= objects_min <= objects_max")
        if self.objects_max > len(self.palette):
            raise ValueError("palette has fewer colors than objects_max")
        if not 1 <= self.size_min <= self.size_max <= self.image_size:
            raise ValueError("need 1 <= size_min <= size_max <= image_size")
        if self.target_mode not in ("pixels", "frozen_features"):
            raise ValueError(f"unknown target mode {self.target_mode!r}")

    @property
    def grid(self) -> int:
        return self.image_size // self.patch_size

    @property
    def n_patches(self) -> int:
        return self.grid ** 2

    @property
    def patch_dim(self) -> int:
        return 3 * self.patch_size ** 2

    @property
    def target_dim(self) -> int:
        return self.patch_dim if self.target_mode == "pixels" else self.feature_width

    def to_dict(self) -> dict:
        d = dataclasses.asdict(self)
        d["background"] = list(self.background)
        d["palette"] = [list(c) for c in self.palette]
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "SceneSpec":
        d = dict(d)
        d["background"] = tuple(d["background"])
        d["palette"] = tuple(tuple(c) for c in d["palette"])
        return cls(**d)

    def digest(self) -> str:
        blob = json.dumps(self.to_dict(), sort_keys=True, separators=(",", ":")).encode()
        return hashlib.sha256(blob).hexdigest()


@dataclass
class SceneSample:
    image: np.ndarray                  # H x W x 3, float32 in [0, 1]
    instance_labels: np.ndarray        # H x W, 0 = background
    class_labels: np.ndarray           # H x W, shape class id, 0 = background
    patch_targets: np.ndarray          # n x d_y
    patch_instance_labels: np.ndarray  # n

    FIELDS = ("image", "instance_labels", "class_labels", "patch_targets", "patch_instance_labels")

    def __eq__(self, other):
        if not isinstance(other, SceneSample):
            return NotImplemented
        return all(np.array_equal(getattr(self, f), getattr(other, f)) and
                   getattr(self, f).dtype == getattr(other, f).dtype for f in self.FIELDS)


def _shape_mask(kind: int, cx: float, cy: float, half_w: float, half_h: float, size: int) -> np.ndarray:
    ys, xs = np.mgrid[0:size, 0:size].astype(np.float64) + 0.5
    dx, dy = xs - cx, ys - cy
    if kind == 1:
        return (np.abs(dx) <= half_w) & (np.abs(dy) <= half_h)
    if kind == 2:
        return (dx / half_w) ** 2 + (dy / half_h) ** 2 <= 1.0
    # isosceles triangle, apex up: inside both slanted edges and above the base
    t = (dy + half_h) / (2 * half_h)
    return (dy <= half_h) & (t >= 0) & (np.abs(dx) <= t * half_w)


def generate_scene(spec: SceneSpec, seed: int, max_attempts: int = 1000,
                   features: "FrozenPatchFeatures | None" = None) -> SceneSample:
    rng = SplitMix64(seed)
    size = spec.image_size
    n_obj = rng.randint(spec.objects_min, spec.objects_max)
    colors = list(range(len(spec.palette)))
    for i in range(n_obj):  # partial Fisher-Yates: distinct colors per object
        j = rng.randint(i, len(colors) - 1)
        colors[i], colors[j] = colors[j], colors[i]

    owner = np.zeros((size, size), dtype=np.int64)
    kinds: list[int] = []
    attempts = 0
    while len(kinds) < n_obj:
        if attempts >= max_attempts:
            raise SceneGenerationError(
                f"could not place {n_obj} objects in {max_attempts} attempts (seed {seed})")
        attempts += 1
        kind = rng.randint(1, len(SHAPE_CLASSES))
        w = rng.randint(spec.size_min, spec.size_max)
        h = rng.randint(spec.size_min, spec.size_max)
        left = rng.randint(0, size - w)
        top = rng.randint(0, size - h)
        mask = _shape_mask(kind, left + w / 2, top + h / 2, w / 2, h / 2, size)
        if not spec.allow_occlusion and np.any(mask & (owner > 0)):
            continue
        trial = np.where(mask, len(kinds) + 1, owner)
        counts = np.bincount(trial.ravel(), minlength=len(kinds) + 2)[1:]
        if np.all(counts >= spec.min_visible):
            owner = trial
            kinds.append(kind)

    image = np.empty((size, size, 3), dtype=np.float32)
    image[:] = np.asarray(spec.background, dtype=np.float32)
    class_labels = np.zeros((size, size), dtype=np.int64)
    for idx, kind in enumerate(kinds, start=1):
        sel = owner == idx
        image[sel] = np.asarray(spec.palette[colors[idx - 1]], dtype=np.float32)
        class_labels[sel] = kind
    targets = patchify(image, spec.patch_size)
    if spec.target_mode == "frozen_features":
        features = features or FrozenPatchFeatures(spec.patch_dim, spec.feature_width, spec.feature_seed)
        targets = features(targets)
    return SceneSample(
        image=image,
        instance_labels=owner,
        class_labels=class_labels,
        patch_targets=targets,
        patch_instance_labels=majority_vote_labels(owner, spec.patch_size),
    )


def patchify(image: np.ndarray, patch: int) -> np.ndarray:
    """H x W x C image -> (H/p * W/p) x (p*p*C) rows, patches in raster order."""
    h, w, c = image.shape
    gh, gw = h // patch, w // patch
    return (image.reshape(gh, patch, gw, patch, c)
            .transpose(0, 2, 1, 3, 4)
            .reshape(gh * gw, patch * patch * c))


def unpatchify(rows: np.ndarray, patch: int, grid_h: int, grid_w: int, channels: int = 3) -> np.ndarray:
    return (rows.reshape(grid_h, grid_w, patch, patch, channels)
            .transpose(0, 2, 1, 3, 4)
            .reshape(grid_h * patch, grid_w * patch, channels))


class FrozenPatchFeatures:
    """Fixed random two-layer patch encoder used as a feature-space target.

    Weights are drawn from SplitMix64(seed) and never trained.
    """

    def __init__(self, patch_dim: int, width: int = 32, seed: int = 0):
        rng = SplitMix64(seed ^ 0x5EED_F00D)
        hidden = 2 * width

        def draw(rows, cols):
            bound = math.sqrt(6.0 / (rows + cols))
            vals = [(2.0 * rng.uniform() - 1.0) * bound for _ in range(rows * cols)]
            return np.asarray(vals, dtype=np.float64).reshape(rows, cols)

        self.w1 = draw(patch_dim, hidden)
        self.w2 = draw(hidden, width)
        self.width = width

    def __call__(self, patches: np.ndarray) -> np.ndarray:
        h = np.tanh((patches.astype(np.float64) - 0.5) @ self.w1)
        return (h @ self.w2).astype(np.float32)


def patchify_targets(sample: SceneSample, mode: str, patch: int,
                     features: FrozenPatchFeatures | None = None) -> np.ndarray:
    rows = patchify(sample.image, patch)
    if mode == "pixels":
        return rows
    if mode == "frozen_features":
        if features is None:
            raise ValueError("frozen_features mode needs a FrozenPatchFeatures instance")
        return features(rows)
    raise ValueError(f"unknown target mode {mode!r}")


def majority_vote_labels(instance_labels: np.ndarray, patch_size: int) -> np.ndarray:
    """Most frequent pixel label per patch, ties resolved to the smallest label."""
    h, w = instance_labels.shape
    if h % patch_size or w % patch_size:
        raise ValueError(f"label map {h}x{w} not divisible by patch size {patch_size}")
    return _kernels.majority_vote(instance_labels, patch_size)


# ---------------------------------------------------------------------------
# datasets


@dataclass
class Dataset:
    spec: SceneSpec
    seed: int
    samples: list[SceneSample]
    _cache: dict = field(default_factory=dict, repr=False, compare=False)

    def __len__(self) -> int:
        return len(self.samples)

    def _stack(self, name, fn):
        if name not in self._cache:
            self._cache[name] = np.stack([fn(s) for s in self.samples])
        return self._cache[name]

    @property
    def patches(self) -> np.ndarray:
        """Encoder inputs: N x n x (3 p^2) raw pixel patches."""
        return self._stack("patches", lambda s: patchify(s.image, self.spec.patch_size))

    @property
    def targets(self) -> np.ndarray:
        return self._stack("targets", lambda s: s.patch_targets)

    @property
    def instance_labels(self) -> np.ndarray:
        return self._stack("instance", lambda s: s.instance_labels)

    @property
    def class_labels(self) -> np.ndarray:
        return self._stack("class", lambda s: s.class_labels)

    def subset(self, start: int, stop: int) -> "Dataset":
        return Dataset(self.spec, self.seed, self.samples[start:stop])


def sample_seeds(seed: int, count: int) -> list[int]:
    rng = SplitMix64(seed)
    return [rng.next_u64() for _ in range(count)]


def generate_dataset(spec: SceneSpec, count: int, seed: int) -> Dataset:
    features = None
    if spec.target_mode == "frozen_features":
        features = FrozenPatchFeatures(spec.patch_dim, spec.feature_width, spec.feature_seed)
    samples = [generate_scene(spec, s, features=features) for s in sample_seeds(seed, count)]
    return Dataset(spec, seed, samples)


_LABEL_FIELDS = {"instance_labels", "class_labels", "patch_instance_labels"}
MANIFEST_VERSION = 1


def write_dataset(dataset: Dataset, path: str | os.PathLike) -> Path:
    root = Path(path)
    root.mkdir(parents=True, exist_ok=True)
    files = []
    for i, sample in enumerate(dataset.samples):
        for name in SceneSample.FIELDS:
            fname = f"{i:05d}_{name}.tensor"
            blob = encode_tensor(getattr(sample, name))
            (root / fname).write_bytes(blob)
            files.append({"file": fname, "bytes": len(blob), "sha256": hashlib.sha256(blob).hexdigest()})
    manifest = {
        "version": MANIFEST_VERSION,
        "seed": dataset.seed,
        "count": len(dataset.samples),
        "target_mode": dataset.spec.target_mode,
        "spec": dataset.spec.to_dict(),
        "spec_hash": dataset.spec.digest(),
        "files": files,
    }
    (root / "manifest.json").write_text(json.dumps(manifest, indent=1, sort_keys=True) + "\n")
    return root


def read_dataset(path: str | os.PathLike) -> Dataset:
    root = Path(path)
    mpath = root / "manifest.json"
    try:
        manifest = json.loads(mpath.read_text())
        spec = SceneSpec.from_dict(manifest["spec"])
        count = int(manifest["count"])
        files = manifest["files"]
        seed = int(manifest["seed"])
    except FileNotFoundError:
        raise IntegrityError(f"{mpath}: missing manifest") from None
    except (ValueError, KeyError, TypeError) as exc:
        raise IntegrityError(f"{mpath}: corrupt manifest ({exc})") from None
    if manifest.get("version") != MANIFEST_VERSION:
        raise IntegrityError(f"{mpath}: unsupported version {manifest.get('version')}")
    if manifest.get("spec_hash") != spec.digest():
        raise IntegrityError(f"{mpath}: spec hash does not match stored spec")
    nf = len(SceneSample.FIELDS)
    if len(files) != count * nf:
        raise IntegrityError(f"{mpath}: count {count} needs {count * nf} files, manifest lists {len(files)}")
    samples = []
    for i in range(count):
        fields = {}
        for j, name in enumerate(SceneSample.FIELDS):
            entry = files[i * nf + j]
            fpath = root / entry["file"]
            try:
                blob = fpath.read_bytes()
            except FileNotFoundError:
                raise IntegrityError(f"{fpath}: missing tensor file") from None
            if len(blob) != entry["bytes"]:
                raise IntegrityError(f"{fpath}: truncated or resized ({len(blob)} of {entry['bytes']} bytes)")
            if hashlib.sha256(blob).hexdigest() != entry["sha256"]:
                raise IntegrityError(f"{fpath}: checksum mismatch")
            arr = decode_tensor(blob, str(fpath))
            fields[name] = arr.astype(np.int64) if name in _LABEL_FIELDS else arr
        samples.append(SceneSample(**fields))
    return Dataset(spec, seed, samples)
