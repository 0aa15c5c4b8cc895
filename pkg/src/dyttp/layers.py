"""Neural building blocks on the tensor engine.

DynamicTanh and LayerNorm are interchangeable behind make_norm(); every
other layer is norm-agnostic. Blocks are pre-norm residual: the input is
normalized before attention and before the feed-forward, and added back.
Dropout draws from an explicit Rng and is a no-op unless training=True.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import tensor as T
from .tensor import Rng, Tensor


class Module:
    """Minimal parameter container; children found by attribute scan."""

    def named_params(self, prefix: str = ""):
        for key, value in self.__dict__.items():
            name = f"{prefix}{key}" if not prefix else f"{prefix}.{key}"
            if isinstance(value, Tensor) and value.requires_grad:
                yield name, value
            elif isinstance(value, Module):
                yield from value.named_params(name)
            elif isinstance(value, (list, tuple)):
                for i, item in enumerate(value):
                    if isinstance(item, Module):
                        yield from item.named_params(f"{name}.{i}")

    def params(self):
        return [p for _, p in self.named_params()]

    def zero_grad(self):
        for _, p in self.named_params():
            p.grad = None

    def set_param(self, name: str, tensor: Tensor):
        """Replace a named parameter object (gradient-checking hook)."""
        obj = self
        parts = name.split(".")
        for p in parts[:-1]:
            obj = obj[int(p)] if p.isdigit() else getattr(obj, p)
        setattr(obj, parts[-1], tensor)

    def state_dict(self) -> dict:
        return {name: p.data.copy() for name, p in self.named_params()}

    def load_state_dict(self, state: dict):
        own = dict(self.named_params())
        if set(own) != set(state):
            missing = set(own) ^ set(state)
            raise ValueError(f"parameter names disagree: {sorted(missing)[:4]}...")
        for name, p in own.items():
            arr = np.asarray(state[name], dtype=np.float64)
            if arr.shape != p.data.shape:
                raise ValueError(f"shape mismatch for {name}: {arr.shape} vs {p.data.shape}")
            p.data = arr.copy()


def _xavier(rng: Rng, fan_in: int, fan_out: int) -> np.ndarray:
    bound = np.sqrt(6.0 / (fan_in + fan_out))
    return rng.uniform((fan_in, fan_out), -bound, bound)


class Linear(Module):
    def __init__(self, d_in: int, d_out: int, rng: Rng, bias: bool = True):
        self.weight = Tensor(_xavier(rng, d_in, d_out), requires_grad=True)
        self.bias = Tensor(np.zeros(d_out), requires_grad=True) if bias else None

    def __call__(self, x: Tensor) -> Tensor:
        out = T.matmul(x, self.weight)
        if self.bias is not None:
            out = T.add(out, self.bias)
        return out


class DynamicTanh(Module):
    """Elementwise gamma * tanh(alpha * x) + beta over the channel axis.

    alpha is one learnable scalar per instance; gamma and beta are
    per-channel vectors. No reduction across channels or positions, so
    every output element depends on exactly one input element.
    """

    def __init__(self, channels: int, alpha_init: float = 0.5):
        self.alpha = Tensor(np.array(alpha_init), requires_grad=True)
        self.gamma = Tensor(np.ones(channels), requires_grad=True)
        self.beta = Tensor(np.zeros(channels), requires_grad=True)

    @property
    def channels(self) -> int:
        return self.gamma.data.shape[0]

    def __call__(self, x: Tensor) -> Tensor:
        if x.shape[-1] != self.channels:
            raise ValueError(f"expected {self.channels} channels, got {x.shape[-1]}")
        return T.add(T.mul(T.tanh(T.mul(x, self.alpha)), self.gamma), self.beta)


class LayerNorm(Module):
    """Per-position standardization over the channel axis, then affine."""

    def __init__(self, channels: int, eps: float = 1e-5):
        self.gamma = Tensor(np.ones(channels), requires_grad=True)
        self.beta = Tensor(np.zeros(channels), requires_grad=True)
        self.eps = eps

    @property
    def channels(self) -> int:
        return self.gamma.data.shape[0]

    def __call__(self, x: Tensor) -> Tensor:
        if x.shape[-1] != self.channels:
            raise ValueError(f"expected {self.channels} channels, got {x.shape[-1]}")
        mu = T.mean(x, axis=-1, keepdims=True)
        centered = T.sub(x, mu)
        var = T.mean(T.mul(centered, centered), axis=-1, keepdims=True)
        std = T.sqrt(T.add(var, self.eps))
        return T.add(T.mul(T.div(centered, std), self.gamma), self.beta)


def make_norm(kind: str, channels: int):
    if kind == "dyt":
        return DynamicTanh(channels)
    if kind == "layernorm":
        return LayerNorm(channels)
    raise ValueError(f"unknown norm kind {kind!r} (want 'dyt' or 'layernorm')")


def gelu(x: Tensor) -> Tensor:
    # smooth tanh-form gelu; smoothness keeps finite-difference checks tight
    c = np.sqrt(2.0 / np.pi)
    x3 = T.mul(T.mul(x, x), x)
    inner = T.mul(T.add(x, T.mul(x3, 0.044715)), c)
    return T.mul(T.mul(x, 0.5), T.add(T.tanh(inner), 1.0))


class Dropout:
    def __init__(self, p: float):
        if not 0.0 <= p < 1.0:
            raise ValueError("dropout probability must be in [0, 1)")
        self.p = p

    def __call__(self, x: Tensor, rng: Rng | None, training: bool) -> Tensor:
        if not training or self.p == 0.0:
            return x
        if rng is None:
            raise ValueError("training-mode dropout needs an rng")
        keep = (rng.uniform(x.shape) >= self.p) / (1.0 - self.p)
        return T.mul(x, keep)


_MASK_FILL = -1e30  # finite stand-in for blocked logits; exp underflows to 0


class MultiHeadAttention(Module):
    """Scaled dot-product attention with optional boolean mask (true = attend)."""

    def __init__(self, width: int, heads: int, rng: Rng, dropout: float = 0.0):
        if width % heads != 0:
            raise ValueError("width must be divisible by heads")
        self.heads = heads
        self.head_dim = width // heads
        self.wq = Linear(width, width, rng)
        self.wk = Linear(width, width, rng)
        self.wv = Linear(width, width, rng)
        self.wo = Linear(width, width, rng)
        self.drop = Dropout(dropout)

    def __call__(self, q_in: Tensor, kv_in: Tensor | None = None, mask=None,
                 rng: Rng | None = None, training: bool = False) -> Tensor:
        kv_in = q_in if kv_in is None else kv_in
        b, tq, d = q_in.shape
        tk = kv_in.shape[1]
        if mask is not None:
            mask = np.asarray(mask, dtype=bool)
            if not mask.any(axis=-1).all():
                raise ValueError("attention mask leaves a query row with no keys")

        def split(x, t):
            return T.transpose(T.reshape(x, (b, t, self.heads, self.head_dim)), (0, 2, 1, 3))

        q = split(self.wq(q_in), tq)
        k = split(self.wk(kv_in), tk)
        v = split(self.wv(kv_in), tk)

        scores = T.mul(T.matmul(q, T.transpose(k, (0, 1, 3, 2))), 1.0 / np.sqrt(self.head_dim))
        if mask is not None:
            scores = T.mask_fill(scores, mask[:, None, :, :], _MASK_FILL)
        weights = T.softmax(scores, axis=-1)
        weights = self.drop(weights, rng, training)
        ctx = T.matmul(weights, v)
        merged = T.reshape(T.transpose(ctx, (0, 2, 1, 3)), (b, tq, d))
        return self.wo(merged)


class FeedForward(Module):
    def __init__(self, width: int, ratio: int, rng: Rng, dropout: float = 0.0):
        hidden = width * ratio
        self.lin1 = Linear(width, hidden, rng)
        self.lin2 = Linear(hidden, width, rng)
        self.drop = Dropout(dropout)

    def __call__(self, x: Tensor, rng: Rng | None = None, training: bool = False) -> Tensor:
        return self.lin2(self.drop(gelu(self.lin1(x)), rng, training))


@dataclass
class BlockConfig:
    norm_kind: str = "dyt"
    width: int = 32
    heads: int = 4
    ff_ratio: int = 4
    dropout: float = 0.0

    def __post_init__(self):
        if not 0.0 <= self.dropout < 1.0:
            raise ValueError("dropout must be in [0, 1)")


def grad_check_params(model: Module, loss_fn, names=None, h: float = 1e-5):
    """Finite-difference check of loss_fn gradients w.r.t. named parameters.

    loss_fn computes a scalar Tensor from the model's current parameters;
    each named parameter is swapped for a probe tensor in turn. Returns
    {name: max relative error} for the checked parameters.
    """
    from .tensor import Tensor as _Tensor, grad_check

    all_named = dict(model.named_params())
    names = list(all_named) if names is None else names
    errors = {}
    for name in names:
        original = all_named[name]

        def f(p, _name=name, _orig=original):
            model.set_param(_name, p)
            try:
                return loss_fn()
            finally:
                model.set_param(_name, _orig)

        errors[name] = grad_check(f, _Tensor(original.data.copy()), h=h)
    return errors


class TransformerBlock(Module):
    """Pre-norm residual block: x + MHA(norm(x)); then x + FFN(norm(x)).

    With cross=True the attention reads keys/values from a separate memory
    tensor, normalized by its own norm instance.
    """

    def __init__(self, cfg: BlockConfig, rng: Rng, cross: bool = False):
        self.norm_attn = make_norm(cfg.norm_kind, cfg.width)
        self.norm_kv = make_norm(cfg.norm_kind, cfg.width) if cross else None
        self.attn = MultiHeadAttention(cfg.width, cfg.heads, rng, cfg.dropout)
        self.norm_ffn = make_norm(cfg.norm_kind, cfg.width)
        self.ffn = FeedForward(cfg.width, cfg.ff_ratio, rng, cfg.dropout)
        self.drop = Dropout(cfg.dropout)

    def __call__(self, x: Tensor, kv: Tensor | None = None, mask=None,
                 rng: Rng | None = None, training: bool = False) -> Tensor:
        h = self.norm_attn(x)
        memory = self.norm_kv(kv) if kv is not None else h
        x = T.add(x, self.drop(self.attn(h, memory, mask, rng, training), rng, training))
        x = T.add(x, self.drop(self.ffn(self.norm_ffn(x), rng, training), rng, training))
        return x
