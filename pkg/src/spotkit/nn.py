"""Parameter containers and transformer building blocks on top of the tensor engine."""
from __future__ import annotations

from typing import Iterator

import numpy as np

from .autodiff import tensor as T
from .autodiff.tensor import Parameter, Tensor


class Module:
    """Parameters and sub-modules are discovered from instance attributes, in
    assignment order; lists of modules are indexed ``name.0``, ``name.1``..."""

    def named_parameters(self, prefix: str = "") -> Iterator[tuple[str, Parameter]]:
        for name, value in vars(self).items():
            if isinstance(value, Parameter):
                yield prefix + name, value
            elif isinstance(value, Module):
                yield from value.named_parameters(f"{prefix}{name}.")
            elif isinstance(value, (list, tuple)):
                for i, item in enumerate(value):
                    if isinstance(item, Module):
                        yield from item.named_parameters(f"{prefix}{name}.{i}.")
                    elif isinstance(item, Parameter):
                        yield f"{prefix}{name}.{i}", item

    def parameters(self) -> list[Parameter]:
        return [p for _, p in self.named_parameters()]

    def state_dict(self) -> dict[str, np.ndarray]:
        return {name: p.data for name, p in self.named_parameters()}

    def load_state_dict(self, state: dict[str, np.ndarray]) -> None:
        own = dict(self.named_parameters())
        missing = sorted(set(own) - set(state))
        extra = sorted(set(state) - set(own))
        if missing or extra:
            raise KeyError(f"state mismatch; missing={missing[:5]} unexpected={extra[:5]}")
        for name, p in own.items():
            arr = np.asarray(state[name])
            if arr.shape != p.shape:
                raise ValueError(f"{name}: shape {arr.shape} != {p.shape}")
            p.data = arr.astype(p.dtype, copy=True)

    def set_trainable(self, flag: bool) -> None:
        for p in self.parameters():
            p.requires_grad = flag

    def zero_grad(self) -> None:
        for p in self.parameters():
            p.zero_grad()

    def astype(self, dtype) -> "Module":
        for p in self.parameters():
            p.data = p.data.astype(dtype)
            p.grad = None
        return self


def _uniform(rng: np.random.Generator, shape, bound: float, dtype) -> np.ndarray:
    return rng.uniform(-bound, bound, size=shape).astype(dtype)


class Linear(Module):
    def __init__(self, d_in: int, d_out: int, rng: np.random.Generator, bias: bool = True,
                 dtype=np.float32):
        bound = np.sqrt(6.0 / (d_in + d_out))
        self.weight = Parameter(_uniform(rng, (d_in, d_out), bound, dtype))
        self.bias = Parameter(np.zeros(d_out, dtype=dtype)) if bias else None

    def __call__(self, x: Tensor) -> Tensor:
        y = T.matmul(x, self.weight)
        return y + self.bias if self.bias is not None else y


class LayerNorm(Module):
    def __init__(self, d: int, dtype=np.float32):
        self.gain = Parameter(np.ones(d, dtype=dtype))
        self.bias = Parameter(np.zeros(d, dtype=dtype))

    def __call__(self, x: Tensor) -> Tensor:
        return T.layer_norm(x, self.gain, self.bias)


class MLP(Module):
    """Stack of linear layers with an activation between them (none after the last)."""

    def __init__(self, sizes: list[int], rng, activation: str = "relu", dtype=np.float32):
        self.layers = [Linear(a, b, rng, dtype=dtype) for a, b in zip(sizes[:-1], sizes[1:])]
        self.activation = activation

    def __call__(self, x: Tensor) -> Tensor:
        act = T.gelu if self.activation == "gelu" else T.relu
        for i, layer in enumerate(self.layers):
            x = layer(x)
            if i < len(self.layers) - 1:
                x = act(x)
        return x


def split_heads(x: Tensor, heads: int) -> Tensor:
    b, n, d = x.shape
    return T.transpose(T.reshape(x, (b, n, heads, d // heads)), (0, 2, 1, 3))


def merge_heads(x: Tensor) -> Tensor:
    b, h, n, dh = x.shape
    return T.reshape(T.transpose(x, (0, 2, 1, 3)), (b, n, h * dh))


def causal_mask(n: int) -> np.ndarray:
    """True where position i must not see position j (j > i)."""
    return np.triu(np.ones((n, n), dtype=bool), k=1)


class MultiHeadAttention(Module):
    """Scaled dot-product attention, softmax over the key axis.

    Returns the projected output and the (batch, heads, queries, keys) weights.
    """

    def __init__(self, d_model: int, heads: int, rng, d_context: int | None = None,
                 dtype=np.float32):
        if d_model % heads:
            raise ValueError(f"width {d_model} not divisible by {heads} heads")
        d_context = d_model if d_context is None else d_context
        self.heads = heads
        self.q = Linear(d_model, d_model, rng, bias=False, dtype=dtype)
        self.k = Linear(d_context, d_model, rng, bias=False, dtype=dtype)
        self.v = Linear(d_context, d_model, rng, bias=False, dtype=dtype)
        self.out = Linear(d_model, d_model, rng, dtype=dtype)

    def __call__(self, x: Tensor, context: Tensor, mask: np.ndarray | None = None):
        q = split_heads(self.q(x), self.heads)
        k = split_heads(self.k(context), self.heads)
        v = split_heads(self.v(context), self.heads)
        dh = q.shape[-1]
        logits = T.scale(T.matmul(q, T.swapaxes(k, -1, -2)), 1.0 / np.sqrt(dh))
        if mask is not None:
            logits = T.masked_fill(logits, mask, -np.inf)
        attn = T.softmax(logits, axis=-1)
        return self.out(merge_heads(T.matmul(attn, v))), attn


class EncoderBlock(Module):
    """Pre-norm transformer block: self-attention then GELU feed-forward."""

    def __init__(self, d: int, heads: int, rng, ff_mult: int = 4, dtype=np.float32):
        self.norm1 = LayerNorm(d, dtype)
        self.attn = MultiHeadAttention(d, heads, rng, dtype=dtype)
        self.norm2 = LayerNorm(d, dtype)
        self.ff = MLP([d, ff_mult * d, d], rng, activation="gelu", dtype=dtype)

    def __call__(self, x: Tensor) -> Tensor:
        h = self.norm1(x)
        x = x + self.attn(h, h)[0]
        return x + self.ff(self.norm2(x))


class GRUCell(Module):
    """h' = (1 - z) * c + z * h with reset-gated candidate c."""

    def __init__(self, d_in: int, d_hidden: int, rng, dtype=np.float32):
        self.d = d_hidden
        self.x_proj = Linear(d_in, 3 * d_hidden, rng, dtype=dtype)
        self.h_proj = Linear(d_hidden, 3 * d_hidden, rng, dtype=dtype)

    def __call__(self, x: Tensor, h: Tensor) -> Tensor:
        d = self.d
        gx = self.x_proj(x)
        gh = self.h_proj(h)
        r = T.sigmoid(gx[..., :d] + gh[..., :d])
        z = T.sigmoid(gx[..., d:2 * d] + gh[..., d:2 * d])
        cand = T.tanh(gx[..., 2 * d:] + r * gh[..., 2 * d:])
        return cand + z * (h - cand)
