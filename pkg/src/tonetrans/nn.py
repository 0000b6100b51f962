"""Parameterized building blocks: linear layers, attention, transformer stacks.

Every block keeps its parameters in an insertion-ordered dict of leaf
tensors and exposes ``parameters()`` with dotted names, so checkpoints and
optimizers can address weights by stable string keys.
"""

from __future__ import annotations

import numpy as np

from . import ops
from .tensor import Tensor, default_dtype


def xavier_uniform(rng: np.random.Generator, fan_in: int, fan_out: int, shape=None) -> np.ndarray:
    """Uniform(-b, b) with b = sqrt(6 / (fan_in + fan_out))."""
    bound = np.sqrt(6.0 / (fan_in + fan_out))
    if shape is None:
        shape = (fan_in, fan_out)
    return rng.uniform(-bound, bound, size=shape).astype(default_dtype())


def sinusoidal_position_encoding(length: int, width: int, dtype=None) -> np.ndarray:
    """Fixed sin/cos position table of shape (length, width)."""
    if dtype is None:
        dtype = default_dtype()
    pos = np.arange(length, dtype=np.float64)[:, None]
    idx = np.arange(width, dtype=np.float64)[None, :]
    angle = pos / np.power(10000.0, 2.0 * (idx // 2) / width)
    enc = np.where(idx % 2 == 0, np.sin(angle), np.cos(angle))
    return enc.astype(dtype)


def causal_mask(length: int) -> np.ndarray:
    """Additive (length, length) mask forbidding attention to later positions."""
    mask = np.zeros((length, length), dtype=default_dtype())
    mask[np.triu_indices(length, k=1)] = ops.NEG_INF
    return mask


def padding_mask(valid: np.ndarray) -> np.ndarray:
    """(B, T) 0/1 validity -> additive (B, 1, 1, T) key mask for attention."""
    valid = np.asarray(valid)
    add = np.where(valid > 0, 0.0, ops.NEG_INF).astype(default_dtype())
    return add[:, None, None, :]


def _param(data: np.ndarray) -> Tensor:
    return Tensor(np.asarray(data, dtype=default_dtype()), requires_grad=True)


def _prefixed(prefix: str, params: dict[str, Tensor]) -> dict[str, Tensor]:
    return {f"{prefix}.{k}": v for k, v in params.items()}


class Linear:
    def __init__(self, d_in: int, d_out: int, rng: np.random.Generator):
        self.params = {
            "w": _param(xavier_uniform(rng, d_in, d_out)),
            "b": _param(np.zeros(d_out)),
        }

    def __call__(self, x) -> Tensor:
        return ops.add(ops.matmul(x, self.params["w"]), self.params["b"])

    def parameters(self) -> dict[str, Tensor]:
        return dict(self.params)


class LayerNorm:
    def __init__(self, width: int):
        self.params = {
            "gain": _param(np.ones(width)),
            "bias": _param(np.zeros(width)),
        }

    def __call__(self, x) -> Tensor:
        return ops.layer_norm(x, self.params["gain"], self.params["bias"])

    def parameters(self) -> dict[str, Tensor]:
        return dict(self.params)


class Attention:
    """Multi-head attention over (..., T, width) inputs."""

    def __init__(self, width: int, num_heads: int, rng: np.random.Generator):
        self.num_heads = num_heads
        self.params = {}
        for name in ("wq", "wk", "wv", "wo"):
            self.params[name] = _param(xavier_uniform(rng, width, width))
        for name in ("bq", "bk", "bv", "bo"):
            self.params[name] = _param(np.zeros(width))

    def __call__(self, q_in, kv_in, mask: np.ndarray | None = None) -> Tensor:
        p = self.params
        return ops.multi_head_attention(
            q_in, kv_in,
            p["wq"], p["bq"], p["wk"], p["bk"], p["wv"], p["bv"], p["wo"], p["bo"],
            num_heads=self.num_heads, mask=mask,
        )

    def parameters(self) -> dict[str, Tensor]:
        return dict(self.params)


class TransformerLayer:
    """Pre-norm block: self-attention, optional cross-attention, feed-forward."""

    def __init__(self, width: int, num_heads: int, d_ff: int,
                 rng: np.random.Generator, cross: bool = False):
        self.self_attn = Attention(width, num_heads, rng)
        self.norm_self = LayerNorm(width)
        self.cross_attn = Attention(width, num_heads, rng) if cross else None
        self.norm_cross = LayerNorm(width) if cross else None
        self.ff_in = Linear(width, d_ff, rng)
        self.ff_out = Linear(d_ff, width, rng)
        self.norm_ff = LayerNorm(width)

    def __call__(self, x, memory=None, self_mask=None, cross_mask=None) -> Tensor:
        h = self.norm_self(x)
        x = ops.add(x, self.self_attn(h, h, mask=self_mask))
        if self.cross_attn is not None:
            if memory is None:
                raise ValueError("transformer layer built with cross-attention needs memory")
            h = self.norm_cross(x)
            x = ops.add(x, self.cross_attn(h, memory, mask=cross_mask))
        h = self.norm_ff(x)
        return ops.add(x, self.ff_out(ops.relu(self.ff_in(h))))

    def parameters(self) -> dict[str, Tensor]:
        out = _prefixed("self_attn", self.self_attn.parameters())
        out.update(_prefixed("norm_self", self.norm_self.parameters()))
        if self.cross_attn is not None:
            out.update(_prefixed("cross_attn", self.cross_attn.parameters()))
            out.update(_prefixed("norm_cross", self.norm_cross.parameters()))
        out.update(_prefixed("ff_in", self.ff_in.parameters()))
        out.update(_prefixed("ff_out", self.ff_out.parameters()))
        out.update(_prefixed("norm_ff", self.norm_ff.parameters()))
        return out


class TransformerStack:
    """N layers plus a final norm; input and output are (..., T, width)."""

    def __init__(self, num_layers: int, width: int, num_heads: int, d_ff: int,
                 rng: np.random.Generator, cross: bool = False):
        self.width = width
        self.layers = [
            TransformerLayer(width, num_heads, d_ff, rng, cross=cross)
            for _ in range(num_layers)
        ]
        self.final_norm = LayerNorm(width)

    def __call__(self, x, memory=None, self_mask=None, cross_mask=None) -> Tensor:
        for layer in self.layers:
            x = layer(x, memory=memory, self_mask=self_mask, cross_mask=cross_mask)
        return self.final_norm(x)

    def parameters(self) -> dict[str, Tensor]:
        out: dict[str, Tensor] = {}
        for i, layer in enumerate(self.layers):
            out.update(_prefixed(f"layers.{i}", layer.parameters()))
        out.update(_prefixed("final_norm", self.final_norm.parameters()))
        return out


def add_position_encoding(x, length: int, width: int) -> Tensor:
    """Add the fixed sinusoidal table to a (..., length, width) tensor."""
    return ops.add(x, sinusoidal_position_encoding(length, width, dtype=x.dtype))


def load_parameters(module_params: dict[str, Tensor], arrays: dict[str, np.ndarray]) -> None:
    """Copy named arrays into existing parameter tensors, shape-checked."""
    for name, tensor in module_params.items():
        if name not in arrays:
            raise KeyError(f"missing parameter '{name}'")
        arr = np.asarray(arrays[name], dtype=tensor.dtype)
        if arr.shape != tensor.shape:
            raise ValueError(
                f"parameter '{name}': stored shape {arr.shape} != model shape {tensor.shape}"
            )
        tensor.data[...] = arr
