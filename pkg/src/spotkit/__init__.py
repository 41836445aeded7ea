"""Slot-attention auto-encoders with permuted autoregressive decoding and
attention-mask self-distillation, at desk scale."""

__version__ = "0.1.0"
