"""Autoregressive slot decoder with sequence permutations, and the MLP
spatial-broadcast decoder."""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .autodiff import tensor as T
from .autodiff.tensor import Parameter, Tensor
from .nn import LayerNorm, Linear, MLP, Module, MultiHeadAttention, causal_mask

PERMUTATION_NAMES = (
    "left-right, top-bottom",
    "top-bottom, left-right",
    "top-bottom, right-left",
    "right-left, top-bottom",
    "right-left, bottom-top",
    "bottom-top, right-left",
    "bottom-top, left-right",
    "left-right, bottom-top",
    "spiral from center",
)
NUM_PERMUTATIONS = len(PERMUTATION_NAMES)
# small init keeps early outputs close to the content path
POS_INIT_STD = 0.02


@dataclass(frozen=True)
class PermutationSpec:
    id: int                 # 1..9; 1 is plain raster order
    order: np.ndarray       # order[m] = canonical patch predicted at sequence step m
    inverse: np.ndarray     # inverse[order[m]] = m

    @property
    def bos_id(self) -> int:
        return self.id

    @property
    def name(self) -> str:
        return PERMUTATION_NAMES[self.id - 1]


def spiral_order(h: int, w: int) -> list[int]:
    """Clockwise square spiral from cell (ceil(h/2)-1, ceil(w/2)-1), first step
    rightward, run lengths 1,1,2,2,3,3,...; cells off the grid are skipped."""
    r, c = (h + 1) // 2 - 1, (w + 1) // 2 - 1
    out = [r * w + c]
    moves = ((0, 1), (1, 0), (0, -1), (-1, 0))
    run, d = 1, 0
    while len(out) < h * w:
        for _ in range(2):
            dr, dc = moves[d % 4]
            for _ in range(run):
                r, c = r + dr, c + dc
                if 0 <= r < h and 0 <= c < w:
                    out.append(r * w + c)
            d += 1
        run += 1
    return out[: h * w]


def build_permutations(grid_h: int, grid_w: int) -> list[PermutationSpec]:
    n = grid_h * grid_w
    if n < 4:
        raise ValueError(f"permutations need at least 4 patches, got {grid_h}x{grid_w}")
    idx = np.arange(n).reshape(grid_h, grid_w)
    orders = [
        idx.ravel(),                    # rows top-down, each left to right
        idx.T.ravel(),                  # columns left-right, each top to bottom
        idx[:, ::-1].T.ravel(),         # columns right-left, each top to bottom
        idx[:, ::-1].ravel(),           # rows top-down, each right to left
        idx[::-1, ::-1].ravel(),        # rows bottom-up, each right to left
        idx[::-1, ::-1].T.ravel(),      # columns right-left, each bottom to top
        idx[::-1, :].T.ravel(),         # columns left-right, each bottom to top
        idx[::-1, :].ravel(),           # rows bottom-up, each left to right
        np.asarray(spiral_order(grid_h, grid_w)),
    ]
    specs = []
    for j, order in enumerate(orders, start=1):
        order = np.ascontiguousarray(order, dtype=np.int64)
        inverse = np.empty(n, dtype=np.int64)
        inverse[order] = np.arange(n)
        specs.append(PermutationSpec(j, order, inverse))
    return specs


@dataclass
class DecoderOutput:
    recon: Tensor   # B x n x d_y, canonical patch order
    attn: Tensor    # B x n x k, canonical patch order (A_DEC or alpha maps)


@dataclass(frozen=True)
class DecoderConfig:
    kind: str = "ar"
    d_y: int = 48
    d_u: int = 64
    n_patches: int = 64
    grid_h: int = 8
    grid_w: int = 8
    d_dec: int = 96
    blocks: int = 4
    heads: int = 6
    mlp_hidden: int = 256

    def __post_init__(self):
        if self.kind not in ("ar", "mlp"):
            raise ValueError(f"unknown decoder kind {self.kind!r}")
        if self.d_dec % self.heads:
            raise ValueError(f"d_dec {self.d_dec} not divisible by {self.heads} heads")
        if self.grid_h * self.grid_w != self.n_patches:
            raise ValueError("grid does not match n_patches")


class DecoderBlock(Module):
    """Causal self-attention, patch-to-slot cross-attention, feed-forward (all pre-norm)."""

    def __init__(self, d: int, heads: int, d_slot: int, rng, dtype=np.float32):
        self.norm1 = LayerNorm(d, dtype)
        self.self_attn = MultiHeadAttention(d, heads, rng, dtype=dtype)
        self.norm2 = LayerNorm(d, dtype)
        self.cross_attn = MultiHeadAttention(d, heads, rng, d_context=d_slot, dtype=dtype)
        self.norm3 = LayerNorm(d, dtype)
        self.ff = MLP([d, 4 * d, d], rng, activation="gelu", dtype=dtype)

    def __call__(self, x: Tensor, slots: Tensor, mask: np.ndarray):
        h = self.norm1(x)
        x = x + self.self_attn(h, h, mask)[0]
        out, cross = self.cross_attn(self.norm2(x), slots)
        x = x + out
        return x + self.ff(self.norm3(x)), cross


class ARDecoder(Module):
    def __init__(self, cfg: DecoderConfig, rng: np.random.Generator, dtype=np.float32):
        self.cfg = cfg
        self.bos = Parameter((0.02 * rng.standard_normal((NUM_PERMUTATIONS, cfg.d_y))).astype(dtype))
        self.in_proj = Linear(cfg.d_y, cfg.d_dec, rng, dtype=dtype)
        # rows 0..n-1: canonical patch positions; row n: the BOS slot
        self.pos = Parameter((POS_INIT_STD * rng.standard_normal((cfg.n_patches + 1, cfg.d_dec))).astype(dtype))
        self.slot_norm = LayerNorm(cfg.d_u, dtype)
        self.blocks = [DecoderBlock(cfg.d_dec, cfg.heads, cfg.d_u, rng, dtype) for _ in range(cfg.blocks)]
        self.out_norm = LayerNorm(cfg.d_dec, dtype)
        self.out = Linear(cfg.d_dec, cfg.d_y, rng, dtype=dtype)
        self.permutations = build_permutations(cfg.grid_h, cfg.grid_w)
        self._mask = causal_mask(cfg.n_patches)

    def shift_with_bos(self, targets: Tensor, spec: PermutationSpec) -> Tensor:
        """(BOS_j; y_order[0]; ...; y_order[n-2]) for every image in the batch."""
        batch = targets.shape[0]
        bos = T.reshape(T.getitem(self.bos, slice(spec.bos_id - 1, spec.bos_id)), (1, 1, self.cfg.d_y))
        bos = bos + Tensor(np.zeros((batch, 1, self.cfg.d_y), dtype=targets.dtype))
        return T.concat([bos, T.take(targets, spec.order[:-1], axis=1)], axis=1)

    def input_positions(self, spec: PermutationSpec) -> np.ndarray:
        return np.concatenate([[self.cfg.n_patches], spec.order[:-1]])

    def __call__(self, targets: Tensor, slots: Tensor, spec: PermutationSpec | int = 1) -> DecoderOutput:
        if isinstance(spec, (int, np.integer)):
            spec = self.permutations[int(spec) - 1]
        cfg = self.cfg
        if targets.shape[1:] != (cfg.n_patches, cfg.d_y) or slots.shape[-1] != cfg.d_u:
            raise T.ShapeError(f"decoder got targets {targets.shape} and slots {slots.shape}")
        x = self.in_proj(self.shift_with_bos(targets, spec))
        x = x + T.take(self.pos, self.input_positions(spec), axis=0)
        slots = self.slot_norm(slots)
        cross = None
        for block in self.blocks:
            x, cross = block(x, slots, self._mask)
        recon = self.out(self.out_norm(x))
        attn = T.mean(cross, axis=1)                     # average over heads
        return DecoderOutput(recon=T.take(recon, spec.inverse, axis=1),
                             attn=T.take(attn, spec.inverse, axis=1))


class MLPDecoder(Module):
    """Broadcast each slot over all positions, decode independently, mix with alpha maps."""

    def __init__(self, cfg: DecoderConfig, rng: np.random.Generator, dtype=np.float32):
        self.cfg = cfg
        self.pos = Parameter((POS_INIT_STD * rng.standard_normal((cfg.n_patches, cfg.d_u))).astype(dtype))
        hid = cfg.mlp_hidden
        self.mlp = MLP([cfg.d_u, hid, hid, hid, cfg.d_y + 1], rng, dtype=dtype)

    def __call__(self, targets: Tensor | None, slots: Tensor, spec=None) -> DecoderOutput:
        b, k, d = slots.shape
        x = T.reshape(slots, (b, k, 1, d)) + self.pos              # B x k x n x d_u
        out = self.mlp(x)
        recon = out[..., : self.cfg.d_y]
        alpha = T.softmax(out[..., self.cfg.d_y:], axis=1)          # over slots
        mixed = T.tsum(recon * alpha, axis=1)                       # B x n x d_y
        alpha = T.transpose(T.reshape(alpha, (b, k, self.cfg.n_patches)), (0, 2, 1))
        return DecoderOutput(recon=mixed, attn=alpha)


def make_decoder(cfg: DecoderConfig, rng: np.random.Generator, dtype=np.float32):
    return ARDecoder(cfg, rng, dtype) if cfg.kind == "ar" else MLPDecoder(cfg, rng, dtype)


def ensemble_dec_masks(targets: Tensor, slots: Tensor, decoder: ARDecoder) -> np.ndarray:
    """Mean of the canonical-order decoder masks over all nine permutations."""
    with T.no_grad():
        total = None
        for spec in decoder.permutations:
            a = decoder(targets, slots, spec).attn.data
            total = a.copy() if total is None else total + a
    return total / len(decoder.permutations)
