"""Two-stage training: reconstruction-only teacher, then a distilled student."""
from __future__ import annotations

import dataclasses
import hashlib
import json
import logging
import math
import os
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .autodiff.io import IntegrityError, decode_tensor, encode_tensor
from .autodiff.tensor import Tensor, no_grad
from .config import ConfigError, load_kv
from .decoder import DecoderConfig, NUM_PERMUTATIONS
from .distill import (DEFAULT_LAMBDA, attn_distill_loss, match_teacher_masks,
                      reconstruction_loss, total_loss)
from .encoder import EncoderConfig, NumericalError, SlotConfig
from .model import ModelConfig, SlotAutoEncoder
from .scenes import Dataset, read_dataset

log = logging.getLogger(__name__)

CHECKPOINT_VERSION = 1


class TrainingError(RuntimeError):
    pass


@dataclass
class TrainConfig:
    stage: int = 1
    data: str = ""
    epochs: int = 20
    batch_size: int = 32
    peak_lr: float = 4e-4
    low_lr: float = 4e-7
    warmup_steps: int = 500
    lam: float | None = None
    k: int = 5
    decoder: str = "ar"
    perm_mode: str = "random"
    seed: int = 0
    teacher: str | None = None
    trainable_blocks: int | None = None
    max_samples: int = 0
    d_enc: int = 64
    enc_depth: int = 2
    enc_heads: int = 4
    d_u: int = 64
    slot_iters: int = 3
    slot_mlp_hidden: int = 256
    d_dec: int = 48
    dec_blocks: int = 4
    dec_heads: int = 6
    mlp_dec_hidden: int = 256

    def __post_init__(self):
        if self.stage not in (1, 2):
            raise ConfigError(f"stage must be 1 or 2, got {self.stage}")
        if self.stage == 2 and not self.teacher:
            raise ConfigError("stage 2 needs a teacher checkpoint path")
        if self.warmup_steps < 0:
            raise ConfigError("warmup_steps must be >= 0")
        if not self.peak_lr > self.low_lr >= 0:
            raise ConfigError("need peak_lr > low_lr >= 0")
        if self.decoder not in ("ar", "mlp"):
            raise ConfigError(f"decoder must be 'ar' or 'mlp', got {self.decoder!r}")
        if self.perm_mode not in ("random", "default_only"):
            raise ConfigError(f"perm_mode must be 'random' or 'default_only', got {self.perm_mode!r}")
        if self.lam is not None and self.lam < 0:
            raise ConfigError("lam must be >= 0")
        if self.k < 2:
            raise ConfigError("k must be >= 2")

    @property
    def loss_weight(self) -> float:
        return DEFAULT_LAMBDA[self.decoder] if self.lam is None else self.lam

    @property
    def encoder_trainable_blocks(self) -> int:
        if self.trainable_blocks is not None:
            return self.trainable_blocks
        return 0 if self.stage == 1 else self.enc_depth

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)

    @classmethod
    def from_file(cls, path) -> "TrainConfig":
        return load_kv(path, cls)


def model_config(cfg: TrainConfig, dataset: Dataset) -> ModelConfig:
    spec = dataset.spec
    enc = EncoderConfig(patch_dim=spec.patch_dim, n_patches=spec.n_patches, d_enc=cfg.d_enc,
                        depth=cfg.enc_depth, heads=cfg.enc_heads,
                        trainable_blocks=cfg.encoder_trainable_blocks)
    slots = SlotConfig(k=cfg.k, d_u=cfg.d_u, iterations=cfg.slot_iters, mlp_hidden=cfg.slot_mlp_hidden,
                       d_p=cfg.d_u, init_mode="gaussian" if cfg.stage == 1 else "learnable")
    dec = DecoderConfig(kind=cfg.decoder, d_y=spec.target_dim, d_u=cfg.d_u, n_patches=spec.n_patches,
                        grid_h=spec.grid, grid_w=spec.grid, d_dec=cfg.d_dec, blocks=cfg.dec_blocks,
                        heads=cfg.dec_heads, mlp_hidden=cfg.mlp_dec_hidden)
    return ModelConfig(enc, slots, dec)


# ---------------------------------------------------------------------------
# optimisation


def lr_at(step: int, peak_lr: float = 4e-4, low_lr: float = 4e-7, warmup_steps: int = 500,
          total_steps: int = 10_000) -> float:
    """Linear warm-up 0 -> peak, cosine peak -> low until ``total_steps``, then low."""
    if step < warmup_steps:
        return peak_lr * step / warmup_steps
    if step >= total_steps:
        return low_lr
    progress = (step - warmup_steps) / max(1, total_steps - warmup_steps)
    return low_lr + 0.5 * (peak_lr - low_lr) * (1.0 + math.cos(math.pi * progress))


@dataclass
class AdamState:
    m: dict[str, np.ndarray] = field(default_factory=dict)
    v: dict[str, np.ndarray] = field(default_factory=dict)
    t: int = 0


def adam_step(params: dict[str, Tensor], grads: dict[str, np.ndarray], state: AdamState, lr: float,
              beta1: float = 0.9, beta2: float = 0.999, eps: float = 1e-8) -> None:
    """In-place bias-corrected Adam update (no weight decay)."""
    for name, g in grads.items():
        if not np.all(np.isfinite(g)):
            raise NumericalError(f"non-finite gradient for parameter {name}")
    state.t += 1
    c1 = 1.0 - beta1 ** state.t
    c2 = 1.0 - beta2 ** state.t
    for name, g in grads.items():
        p = params[name]
        m = state.m.get(name)
        if m is None:
            m = state.m[name] = np.zeros_like(p.data)
            state.v[name] = np.zeros_like(p.data)
        v = state.v[name]
        m *= beta1
        m += (1.0 - beta1) * g
        v *= beta2
        v += (1.0 - beta2) * (g * g)
        p.data -= (lr * (m / c1) / (np.sqrt(v / c2) + eps)).astype(p.dtype)


# ---------------------------------------------------------------------------
# checkpoints


@dataclass
class Checkpoint:
    params: dict[str, np.ndarray]
    train_config: dict
    model_config: dict
    step: int
    rng_state: dict | None = None
    adam_m: dict[str, np.ndarray] = field(default_factory=dict)
    adam_v: dict[str, np.ndarray] = field(default_factory=dict)
    adam_t: int = 0
    history: list[dict] = field(default_factory=list)

    def build_model(self) -> SlotAutoEncoder:
        model = SlotAutoEncoder(ModelConfig.from_dict(self.model_config))
        model.load_state_dict(self.params)
        return model


def _write_tensor(root: Path, rel: str, arr) -> dict:
    blob = encode_tensor(arr)
    (root / rel).write_bytes(blob)
    return {"file": rel, "bytes": len(blob), "sha256": hashlib.sha256(blob).hexdigest(),
            "shape": list(np.shape(arr))}


def save_checkpoint(ckpt: Checkpoint, path) -> Path:
    root = Path(path)
    (root / "params").mkdir(parents=True, exist_ok=True)
    (root / "adam").mkdir(exist_ok=True)
    entries = {"params": {}, "adam_m": {}, "adam_v": {}}
    for name, arr in ckpt.params.items():
        entries["params"][name] = _write_tensor(root, f"params/{name}.tensor", arr)
    for name, arr in ckpt.adam_m.items():
        entries["adam_m"][name] = _write_tensor(root, f"adam/m.{name}.tensor", arr)
    for name, arr in ckpt.adam_v.items():
        entries["adam_v"][name] = _write_tensor(root, f"adam/v.{name}.tensor", arr)
    meta = {
        "version": CHECKPOINT_VERSION,
        "step": ckpt.step,
        "train_config": ckpt.train_config,
        "model_config": ckpt.model_config,
        "rng_state": ckpt.rng_state,
        "adam_t": ckpt.adam_t,
        "tensors": entries,
    }
    (root / "meta.json").write_text(json.dumps(meta, indent=1, sort_keys=True) + "\n")
    (root / "log.json").write_text(json.dumps(ckpt.history, sort_keys=True) + "\n")
    return root


def _read_group(root: Path, entries: dict) -> dict[str, np.ndarray]:
    out = {}
    for name, entry in entries.items():
        fpath = root / entry["file"]
        try:
            blob = fpath.read_bytes()
        except FileNotFoundError:
            raise IntegrityError(f"{fpath}: missing tensor file") from None
        if len(blob) != entry["bytes"] or hashlib.sha256(blob).hexdigest() != entry["sha256"]:
            raise IntegrityError(f"{fpath}: size or checksum does not match meta.json")
        arr = decode_tensor(blob, str(fpath))
        if list(arr.shape) != entry["shape"]:
            raise IntegrityError(f"{fpath}: shape {list(arr.shape)} != {entry['shape']}")
        out[name] = arr
    return out


def load_checkpoint(path) -> Checkpoint:
    root = Path(path)
    try:
        meta = json.loads((root / "meta.json").read_text())
    except FileNotFoundError:
        raise IntegrityError(f"{root / 'meta.json'}: missing") from None
    except ValueError as exc:
        raise IntegrityError(f"{root / 'meta.json'}: corrupt ({exc})") from None
    if meta.get("version") != CHECKPOINT_VERSION:
        raise IntegrityError(f"{root}: unsupported checkpoint version {meta.get('version')}")
    tensors = meta["tensors"]
    history = []
    if (root / "log.json").exists():
        history = json.loads((root / "log.json").read_text())
    return Checkpoint(
        params=_read_group(root, tensors["params"]),
        train_config=meta["train_config"],
        model_config=meta["model_config"],
        step=int(meta["step"]),
        rng_state=meta["rng_state"],
        adam_m=_read_group(root, tensors["adam_m"]),
        adam_v=_read_group(root, tensors["adam_v"]),
        adam_t=int(meta["adam_t"]),
        history=history,
    )


# ---------------------------------------------------------------------------
# training loop


def _shuffle(seed: int, epoch: int, count: int) -> np.ndarray:
    return np.random.default_rng([seed, 3, epoch]).permutation(count)


class Trainer:
    """Holds the model, optimizer, PRNG stream and step counter for one stage.

    Epoch orderings derive from (seed, epoch) and per-step draws (slot noise,
    permutation ids) from a single generator whose state is checkpointed, so a
    resumed run retraces the uninterrupted one.
    """

    def __init__(self, cfg: TrainConfig, dataset: Dataset, teacher: SlotAutoEncoder | None = None):
        self.cfg = cfg
        self.dataset = dataset
        if cfg.max_samples and cfg.max_samples < len(dataset):
            self.dataset = dataset.subset(0, cfg.max_samples)
        if len(self.dataset) < cfg.batch_size:
            raise ConfigError(f"dataset has {len(self.dataset)} samples, fewer than batch_size {cfg.batch_size}")
        self.model = SlotAutoEncoder(model_config(cfg, self.dataset), seed=cfg.seed)
        self.teacher = teacher
        if cfg.stage == 2:
            if teacher is None:
                raise ConfigError("stage 2 needs a teacher model")
            if teacher.cfg.slots.k != cfg.k:
                raise ConfigError(f"teacher has k={teacher.cfg.slots.k}, student config k={cfg.k}")
            teacher.set_trainable(False)
        self.rng = np.random.default_rng([cfg.seed, 2])
        self.adam = AdamState()
        self.step = 0
        self.history: list[dict] = []
        self.steps_per_epoch = len(self.dataset) // cfg.batch_size
        self.total_steps = cfg.epochs * self.steps_per_epoch
        self._patches = self.dataset.patches
        self._targets = self.dataset.targets

    # -- persistence ------------------------------------------------------
    def checkpoint(self) -> Checkpoint:
        return Checkpoint(
            params={n: p.data.copy() for n, p in self.model.named_parameters()},
            train_config=self.cfg.to_dict(),
            model_config=self.model.cfg.to_dict(),
            step=self.step,
            rng_state=self.rng.bit_generator.state,
            adam_m={n: a.copy() for n, a in self.adam.m.items()},
            adam_v={n: a.copy() for n, a in self.adam.v.items()},
            adam_t=self.adam.t,
            history=list(self.history),
        )

    def restore(self, ckpt: Checkpoint) -> None:
        self.model.load_state_dict(ckpt.params)
        self.step = ckpt.step
        self.rng.bit_generator.state = ckpt.rng_state
        self.adam = AdamState({n: a.astype(self.model.dtype) for n, a in ckpt.adam_m.items()},
                              {n: a.astype(self.model.dtype) for n, a in ckpt.adam_v.items()},
                              ckpt.adam_t)
        self.history = list(ckpt.history)

    # -- stepping ---------------------------------------------------------
    def _draw_perm(self) -> int:
        if self.cfg.perm_mode == "default_only":
            return 1
        return int(self.rng.integers(1, NUM_PERMUTATIONS + 1))

    def train_step(self) -> dict:
        cfg = self.cfg
        epoch, offset = divmod(self.step, self.steps_per_epoch)
        order = _shuffle(cfg.seed, epoch, len(self.dataset))
        idx = np.sort(order[offset * cfg.batch_size:(offset + 1) * cfg.batch_size])
        patches, targets = self._patches[idx], self._targets[idx]
        batch = len(idx)
        model = self.model

        record = {"step": self.step, "epoch": epoch}
        teacher_masks = None
        if cfg.stage == 2:
            t_perm = self._draw_perm()
            with no_grad():
                t_out = self.teacher(patches, targets, t_perm, self.teacher.slot_noise(self.rng, batch))
            teacher_masks = t_out.dec_attn.data
            record["teacher_perm"] = t_perm

        perm = self._draw_perm()
        out = model(patches, targets, perm, model.slot_noise(self.rng, batch))
        rec = reconstruction_loss(targets.astype(model.dtype), out.recon)
        if cfg.stage == 2:
            matched = match_teacher_masks(teacher_masks, out.slot_attn.data)
            report = total_loss(rec, attn_distill_loss(matched, out.slot_attn), cfg.loss_weight)
            loss = report.total
            record["L_ATT"] = report.att.item()
        else:
            loss = rec
        value = loss.item()
        if not math.isfinite(value):
            raise TrainingError(f"non-finite loss {value} at step {self.step}")

        model.zero_grad()
        loss.backward()
        trainable = {n: p for n, p in model.named_parameters() if p.requires_grad}
        lr = lr_at(self.step, cfg.peak_lr, cfg.low_lr, cfg.warmup_steps, self.total_steps)
        adam_step(trainable, {n: p.grad for n, p in trainable.items()}, self.adam, lr)

        record.update({"perm": perm, "loss": value, "L_REC": rec.item(), "lr": lr})
        self.history.append(record)
        self.step += 1
        return record

    def run(self, until_step: int | None = None) -> Checkpoint:
        until = self.total_steps if until_step is None else min(until_step, self.total_steps)
        while self.step < until:
            rec = self.train_step()
            if (self.step % self.steps_per_epoch) == 0:
                ep = rec["epoch"]
                losses = [h["loss"] for h in self.history if h["epoch"] == ep]
                log.info("stage %d epoch %d mean loss %.5f", self.cfg.stage, ep, float(np.mean(losses)))
        return self.checkpoint()


def epoch_means(history: list[dict], key: str = "loss") -> list[float]:
    by_epoch: dict[int, list[float]] = {}
    for rec in history:
        by_epoch.setdefault(rec["epoch"], []).append(rec[key])
    return [float(np.mean(by_epoch[e])) for e in sorted(by_epoch)]


def train_stage1(cfg: TrainConfig, dataset: Dataset) -> Checkpoint:
    if cfg.stage != 1:
        raise ConfigError("train_stage1 needs stage = 1")
    return Trainer(cfg, dataset).run()


def load_teacher(path) -> SlotAutoEncoder:
    teacher = load_checkpoint(path).build_model()
    teacher.set_trainable(False)
    return teacher


def train_stage2(cfg: TrainConfig, dataset: Dataset, teacher: SlotAutoEncoder | None = None) -> Checkpoint:
    if cfg.stage != 2:
        raise ConfigError("train_stage2 needs stage = 2")
    teacher = teacher or load_teacher(cfg.teacher)
    return Trainer(cfg, dataset, teacher).run()


def train_from_config(cfg: TrainConfig, out_dir) -> Checkpoint:
    dataset = read_dataset(cfg.data)
    ckpt = train_stage1(cfg, dataset) if cfg.stage == 1 else train_stage2(cfg, dataset)
    save_checkpoint(ckpt, out_dir)
    return ckpt
