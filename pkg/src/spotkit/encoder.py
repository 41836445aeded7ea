"""Patch encoder and the iterative slot-attention bottleneck."""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .autodiff import tensor as T
from .autodiff.tensor import Parameter, Tensor
from .nn import GRUCell, EncoderBlock, LayerNorm, Linear, MLP, Module


class NumericalError(FloatingPointError):
    pass


@dataclass(frozen=True)
class EncoderConfig:
    patch_dim: int = 48
    n_patches: int = 64
    d_enc: int = 64
    depth: int = 2
    heads: int = 4
    trainable_blocks: int = 0

    def __post_init__(self):
        if not 0 <= self.trainable_blocks <= self.depth:
            raise ValueError(f"trainable_blocks {self.trainable_blocks} outside [0, {self.depth}]")
        if self.d_enc % self.heads:
            raise ValueError(f"d_enc {self.d_enc} not divisible by heads {self.heads}")


@dataclass(frozen=True)
class SlotConfig:
    k: int = 5
    d_u: int = 64
    iterations: int = 3
    mlp_hidden: int = 256
    d_p: int = 64
    init_mode: str = "gaussian"
    eps: float = 1e-8

    def __post_init__(self):
        if self.k < 1 or self.iterations < 1:
            raise ValueError("need k >= 1 and iterations >= 1")
        if self.init_mode not in ("gaussian", "learnable"):
            raise ValueError(f"unknown slot init mode {self.init_mode!r}")


@dataclass
class SlotOutput:
    slots: Tensor        # B x k x d_u
    attn: Tensor         # B x n x k, rows sum to one (A_SLOT)


class PatchEncoder(Module):
    """Linear patch embedding + learned positions + pre-norm transformer blocks."""

    def __init__(self, cfg: EncoderConfig, rng: np.random.Generator, dtype=np.float32):
        self.cfg = cfg
        self.embed = Linear(cfg.patch_dim, cfg.d_enc, rng, dtype=dtype)
        self.pos = Parameter((0.02 * rng.standard_normal((cfg.n_patches, cfg.d_enc))).astype(dtype))
        self.blocks = [EncoderBlock(cfg.d_enc, cfg.heads, rng, dtype=dtype) for _ in range(cfg.depth)]
        self.apply_freezing(cfg.trainable_blocks)

    def apply_freezing(self, trainable_blocks: int) -> None:
        """Only the last ``trainable_blocks`` blocks get gradients; the embedding
        stem trains only when every block does."""
        depth = len(self.blocks)
        for i, block in enumerate(self.blocks):
            block.set_trainable(i >= depth - trainable_blocks)
        stem = trainable_blocks == depth
        self.embed.set_trainable(stem)
        self.pos.requires_grad = stem

    def __call__(self, patches: Tensor) -> Tensor:
        if patches.shape[-2:] != (self.cfg.n_patches, self.cfg.patch_dim):
            raise T.ShapeError(
                f"encoder expects (..., {self.cfg.n_patches}, {self.cfg.patch_dim}) patches, got {patches.shape}")
        x = self.embed(patches) + self.pos
        for block in self.blocks:
            x = block(x)
        return x


class SlotAttention(Module):
    def __init__(self, d_in: int, cfg: SlotConfig, rng: np.random.Generator, dtype=np.float32):
        self.cfg = cfg
        self.norm_inputs = LayerNorm(d_in, dtype)
        self.norm_slots = LayerNorm(cfg.d_u, dtype)
        self.norm_mlp = LayerNorm(cfg.d_u, dtype)
        self.project_q = Linear(cfg.d_u, cfg.d_p, rng, bias=False, dtype=dtype)
        self.project_k = Linear(d_in, cfg.d_p, rng, bias=False, dtype=dtype)
        self.project_v = Linear(d_in, cfg.d_u, rng, bias=False, dtype=dtype)
        self.gru = GRUCell(cfg.d_u, cfg.d_u, rng, dtype=dtype)
        self.mlp = MLP([cfg.d_u, cfg.mlp_hidden, cfg.d_u], rng, dtype=dtype)

    def __call__(self, features: Tensor, init: Tensor, detach_init: bool = False,
                 state: Tensor | None = None) -> SlotOutput:
        """Run ``iterations`` rounds of competitive attention from ``init`` (B x k x d_u).

        With ``detach_init`` the initial slots feed only the first round's queries;
        the recurrent state starts from a gradient-stopped copy. ``state`` overrides
        that first recurrent state explicitly.
        """
        cfg = self.cfg
        x = self.norm_inputs(features)
        keys = T.scale(self.project_k(x), 1.0 / np.sqrt(cfg.d_p))
        values = self.project_v(x)
        slots = init
        attn = None
        for it in range(cfg.iterations):
            prev = slots
            if it == 0 and state is not None:
                prev = state
            elif it == 0 and detach_init:
                prev = T.detach(slots)
            q = self.project_q(self.norm_slots(slots))
            logits = T.matmul(keys, T.swapaxes(q, -1, -2))          # B x n x k
            attn = T.softmax(logits, axis=-1)                        # competition over slots
            if np.isnan(attn.data).any():
                raise NumericalError(f"NaN in slot attention at iteration {it + 1}")
            weights = attn + cfg.eps
            weights = weights / T.tsum(weights, axis=-2, keepdims=True)
            updates = T.matmul(T.swapaxes(weights, -1, -2), values)  # B x k x d_u
            slots = self.gru(updates, prev)
            slots = slots + self.mlp(self.norm_mlp(slots))
        return SlotOutput(slots=slots, attn=attn)


class SlotInit(Module):
    """Gaussian (mu + sigma * eps) or learnable-query slot initialization."""

    def __init__(self, cfg: SlotConfig, rng: np.random.Generator, dtype=np.float32):
        self.mode = cfg.init_mode
        self.k, self.d = cfg.k, cfg.d_u
        bound = np.sqrt(6.0 / (1 + cfg.d_u))
        if cfg.init_mode == "gaussian":
            self.mu = Parameter(rng.uniform(-bound, bound, cfg.d_u).astype(dtype))
            self.log_sigma = Parameter(rng.uniform(-bound, bound, cfg.d_u).astype(dtype))
        else:
            bound = np.sqrt(6.0 / (cfg.k + cfg.d_u))
            self.queries = Parameter(rng.uniform(-bound, bound, (cfg.k, cfg.d_u)).astype(dtype))

    def __call__(self, batch: int, noise: np.ndarray | None = None) -> Tensor:
        if self.mode == "learnable":
            dtype = self.queries.dtype
            return self.queries + Tensor(np.zeros((batch, self.k, self.d), dtype=dtype))
        if noise is None:
            raise ValueError("gaussian slot init needs a noise array of shape (B, k, d_u)")
        noise = np.asarray(noise, dtype=self.mu.dtype)
        if noise.shape != (batch, self.k, self.d):
            raise T.ShapeError(f"slot noise shape {noise.shape} != {(batch, self.k, self.d)}")
        return self.mu + T.exp(self.log_sigma) * Tensor(noise)


def init_slots(cfg: SlotConfig, seed: int, module: SlotInit | None = None, batch: int = 1) -> Tensor:
    """Initial slots for ``batch`` images; the Gaussian noise is drawn from ``seed``."""
    if module is None:
        module = SlotInit(cfg, np.random.default_rng(seed))
    noise = None
    if cfg.init_mode == "gaussian":
        noise = np.random.default_rng(seed).standard_normal((batch, cfg.k, cfg.d_u))
    return module(batch, noise)


class SlotEncoder(Module):
    """Image patches -> (slots U, slot-attention masks A_SLOT)."""

    def __init__(self, enc_cfg: EncoderConfig, slot_cfg: SlotConfig, rng: np.random.Generator,
                 dtype=np.float32):
        self.enc_cfg, self.slot_cfg = enc_cfg, slot_cfg
        self.backbone = PatchEncoder(enc_cfg, rng, dtype)
        self.slot_init = SlotInit(slot_cfg, rng, dtype)
        self.slot_attention = SlotAttention(enc_cfg.d_enc, slot_cfg, rng, dtype)

    def __call__(self, patches: Tensor, noise: np.ndarray | None = None) -> SlotOutput:
        feats = self.backbone(patches)
        init = self.slot_init(patches.shape[0], noise)
        learnable = self.slot_cfg.init_mode == "learnable"
        return self.slot_attention(feats, init, detach_init=learnable)
