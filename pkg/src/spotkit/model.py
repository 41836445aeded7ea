"""Slot auto-encoder: patch encoder + slot attention + (AR or MLP) decoder."""
from __future__ import annotations

import dataclasses
from dataclasses import dataclass

import numpy as np

from .autodiff import tensor as T
from .autodiff.tensor import Tensor
from .decoder import ARDecoder, DecoderConfig, DecoderOutput, ensemble_dec_masks, make_decoder
from .encoder import EncoderConfig, SlotConfig, SlotEncoder
from .nn import Module


@dataclass(frozen=True)
class ModelConfig:
    encoder: EncoderConfig
    slots: SlotConfig
    decoder: DecoderConfig

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "ModelConfig":
        return cls(EncoderConfig(**d["encoder"]), SlotConfig(**d["slots"]), DecoderConfig(**d["decoder"]))


@dataclass
class ModelOutput:
    slots: Tensor        # U
    slot_attn: Tensor    # A_SLOT
    recon: Tensor        # Y-hat
    dec_attn: Tensor     # A_DEC (alpha maps for the MLP decoder)


class SlotAutoEncoder(Module):
    def __init__(self, cfg: ModelConfig, seed: int = 0, dtype=np.float32):
        self.cfg = cfg
        rng = np.random.default_rng([seed, 1])
        self.encoder = SlotEncoder(cfg.encoder, cfg.slots, rng, dtype)
        self.decoder = make_decoder(cfg.decoder, rng, dtype)

    @property
    def dtype(self):
        return self.encoder.backbone.embed.weight.dtype

    def slot_noise(self, rng: np.random.Generator, batch: int) -> np.ndarray | None:
        if self.cfg.slots.init_mode != "gaussian":
            return None
        return rng.standard_normal((batch, self.cfg.slots.k, self.cfg.slots.d_u)).astype(self.dtype)

    def __call__(self, patches, targets, perm: int = 1, noise: np.ndarray | None = None) -> ModelOutput:
        patches = T.as_tensor(np.asarray(patches, dtype=self.dtype))
        targets = T.as_tensor(np.asarray(targets, dtype=self.dtype))
        enc = self.encoder(patches, noise)
        dec: DecoderOutput = self.decoder(targets, enc.slots, perm)
        return ModelOutput(enc.slots, enc.attn, dec.recon, dec.attn)

    def masks(self, patches, targets, source: str, noise: np.ndarray | None = None) -> np.ndarray:
        """Patch-to-slot masks (B x n x k) from 'slot', 'decoder' or 'ensemble'."""
        with T.no_grad():
            patches = Tensor(np.asarray(patches, dtype=self.dtype))
            targets = Tensor(np.asarray(targets, dtype=self.dtype))
            enc = self.encoder(patches, noise)
            if source == "slot":
                return enc.attn.data
            if source == "decoder":
                return self.decoder(targets, enc.slots, 1).attn.data
            if source == "ensemble":
                if not isinstance(self.decoder, ARDecoder):
                    return self.decoder(targets, enc.slots).attn.data
                return ensemble_dec_masks(targets, enc.slots, self.decoder)
        raise ValueError(f"unknown mask source {source!r}")
