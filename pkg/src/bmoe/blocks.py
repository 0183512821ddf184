"""Reusable neural blocks: attention, squeeze-excitation, temporal shift,
transformer encoder, and the classifier head.

Every block is a pure function of (input, parameters) and accepts either a
single sequence [T, D] or a batch [B, T, D]; leading-batch broadcasting is
the only batching convention. Residual blocks zero-initialize their final
projections, so each one is an exact identity map before training.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import tensor as T
from .tensor import ContractError, ShapeError, Tensor


class Module:
    """Base for parameterized blocks; walks attributes to enumerate params."""

    def named_params(self, prefix: str = ""):
        for name, value in self.__dict__.items():
            full = f"{prefix}{name}"
            if isinstance(value, Tensor):
                if value.requires_grad:
                    yield full, value
            elif isinstance(value, Module):
                yield from value.named_params(f"{full}.")
            elif isinstance(value, (list, tuple)):
                for i, item in enumerate(value):
                    if isinstance(item, Module):
                        yield from item.named_params(f"{full}.{i}.")
                    elif isinstance(item, Tensor) and item.requires_grad:
                        yield f"{full}.{i}", item

    def params(self) -> list[Tensor]:
        return [p for _, p in self.named_params()]

    def param_count(self) -> int:
        return sum(p.size for p in self.params())

    def load_state(self, state: dict[str, np.ndarray], prefix: str = "") -> None:
        """Assign parameter values from a checkpoint dict (strict shapes)."""
        for name, p in self.named_params(prefix):
            if name not in state:
                raise KeyError(f"checkpoint is missing tensor '{name}'")
            arr = state[name]
            if tuple(arr.shape) != p.shape:
                raise ShapeError(
                    f"checkpoint/model shape mismatch at '{name}': {tuple(arr.shape)} vs {p.shape}"
                )
            p.data = arr.astype(p.data.dtype)

    def state(self, prefix: str = "") -> dict[str, np.ndarray]:
        return {name: p.data.copy() for name, p in self.named_params(prefix)}


def _promote(x: Tensor, rank: int) -> tuple[Tensor, bool]:
    if x.ndim == rank - 1:
        return T.reshape(x, (1,) + x.shape), True
    if x.ndim != rank:
        raise ShapeError(f"expected rank {rank - 1} or {rank} input, got shape {x.shape}")
    return x, False


class Linear(Module):
    def __init__(self, d_in: int, d_out: int, rng: np.random.Generator,
                 zero: bool = False, dtype=np.float32):
        if zero:
            w = np.zeros((d_in, d_out))
        else:
            w = rng.normal(0.0, 1.0 / np.sqrt(d_in), size=(d_in, d_out))
        self.w = Tensor(w.astype(dtype), requires_grad=True)
        self.b = Tensor(np.zeros(d_out, dtype=dtype), requires_grad=True)

    @classmethod
    def identity(cls, dim: int, dtype=np.float32) -> "Linear":
        lin = cls.__new__(cls)
        lin.w = Tensor(np.eye(dim, dtype=dtype), requires_grad=True)
        lin.b = Tensor(np.zeros(dim, dtype=dtype), requires_grad=True)
        return lin

    def __call__(self, x: Tensor) -> Tensor:
        return T.add(T.matmul(x, self.w), self.b)


class LayerNorm(Module):
    def __init__(self, dim: int, dtype=np.float32, eps: float = 1e-5):
        self.gain = Tensor(np.ones(dim, dtype=dtype), requires_grad=True)
        self.bias = Tensor(np.zeros(dim, dtype=dtype), requires_grad=True)
        self.eps = eps

    def __call__(self, x: Tensor) -> Tensor:
        m = T.mean(x, axis=-1, keepdims=True)
        centered = T.sub(x, m)
        var = T.mean(T.mul(centered, centered), axis=-1, keepdims=True)
        inv = T.pow_(T.add(var, self.eps), -0.5)
        return T.add(T.mul(T.mul(centered, inv), self.gain), self.bias)


# ---------------------------------------------------------------- attention


@dataclass(frozen=True)
class AttentionConfig:
    model_dim: int
    num_heads: int = 1
    identity_mode: bool = False

    def __post_init__(self):
        if self.model_dim <= 0 or self.num_heads <= 0:
            raise ContractError(f"bad attention dims: {self}")
        if self.model_dim % self.num_heads != 0:
            raise ContractError(
                f"model_dim {self.model_dim} not divisible by num_heads {self.num_heads}"
            )
        if self.identity_mode and self.num_heads != 1:
            raise ContractError("identity_mode requires num_heads == 1")

    @property
    def head_dim(self) -> int:
        return self.model_dim // self.num_heads


def _split_heads(x: Tensor, heads: int, head_dim: int) -> Tensor:
    b, t, _ = x.shape
    return T.transpose(T.reshape(x, (b, t, heads, head_dim)), (0, 2, 1, 3))


def _merge_heads(x: Tensor) -> Tensor:
    b, h, t, dh = x.shape
    return T.reshape(T.transpose(x, (0, 2, 1, 3)), (b, t, h * dh))


class MultiHeadSelfAttention(Module):
    """Scaled dot-product self-attention; output projection zero-initialized
    so residual wrappers start as identity maps."""

    def __init__(self, cfg: AttentionConfig, rng: np.random.Generator | None = None,
                 dtype=np.float32, zero_out: bool = True):
        self.cfg = cfg
        d = cfg.model_dim
        if cfg.identity_mode:
            self.wq = Linear.identity(d, dtype)
            self.wk = Linear.identity(d, dtype)
            self.wv = Linear.identity(d, dtype)
            self.wo = Linear.identity(d, dtype)
        else:
            if rng is None:
                raise ContractError("rng required unless identity_mode")
            self.wq = Linear(d, d, rng, dtype=dtype)
            self.wk = Linear(d, d, rng, dtype=dtype)
            self.wv = Linear(d, d, rng, dtype=dtype)
            self.wo = Linear(d, d, rng, zero=zero_out, dtype=dtype)

    def __call__(self, x: Tensor, return_attention: bool = False):
        x3, squeezed = _promote(x, 3)
        if x3.shape[-1] != self.cfg.model_dim:
            raise ShapeError(f"input dim {x3.shape[-1]} != model_dim {self.cfg.model_dim}")
        h, dh = self.cfg.num_heads, self.cfg.head_dim
        q = _split_heads(self.wq(x3), h, dh)
        k = _split_heads(self.wk(x3), h, dh)
        v = _split_heads(self.wv(x3), h, dh)
        scores = T.mul(T.matmul(q, T.transpose(k, (0, 1, 3, 2))), 1.0 / np.sqrt(dh))
        attn = T.softmax(scores, axis=-1)
        out = self.wo(_merge_heads(T.matmul(attn, v)))
        weights = attn.data.copy()
        if squeezed:
            out = T.reshape(out, out.shape[1:])
            weights = weights[0]
        if return_attention:
            return out, weights
        return out


class CrossAttention(Module):
    """One query row attends over K key/value rows; exposes the weights.

    The softmax normalizer and the value aggregation reduce over the K axis
    with order-invariant sums, so permuting the key/value rows permutes the
    weight vector and leaves the output bitwise unchanged.
    """

    def __init__(self, cfg: AttentionConfig, rng: np.random.Generator | None = None,
                 dtype=np.float32):
        self.cfg = cfg
        d = cfg.model_dim
        if cfg.identity_mode:
            self.wq = Linear.identity(d, dtype)
            self.wk = Linear.identity(d, dtype)
            self.wv = Linear.identity(d, dtype)
            self.wo = Linear.identity(d, dtype)
        else:
            if rng is None:
                raise ContractError("rng required unless identity_mode")
            self.wq = Linear(d, d, rng, dtype=dtype)
            self.wk = Linear(d, d, rng, dtype=dtype)
            self.wv = Linear(d, d, rng, dtype=dtype)
            self.wo = Linear(d, d, rng, dtype=dtype)

    def __call__(self, query: Tensor, keys_values: Tensor):
        """Returns (output [.., 1, D], weights ndarray [.., K])."""
        q3, squeezed = _promote(query, 3)
        kv3, _ = _promote(keys_values, 3)
        if kv3.shape[-2] == 0:
            raise ContractError("cross_attention needs K >= 1 key/value rows")
        if q3.shape[-1] != self.cfg.model_dim or kv3.shape[-1] != self.cfg.model_dim:
            raise ShapeError(
                f"dims {q3.shape[-1]}/{kv3.shape[-1]} != model_dim {self.cfg.model_dim}"
            )
        h, dh = self.cfg.num_heads, self.cfg.head_dim
        nk = kv3.shape[-2]
        q = _split_heads(self.wq(q3), h, dh)          # [B, H, 1, dh]
        k = _split_heads(self.wk(kv3), h, dh)         # [B, H, K, dh]
        v = _split_heads(self.wv(kv3), h, dh)
        scores = T.mul(T.matmul(q, T.transpose(k, (0, 1, 3, 2))), 1.0 / np.sqrt(dh))
        # stable softmax over K, built from order-invariant pieces
        shift = Tensor(scores.data.max(axis=-1, keepdims=True))
        e = T.exp(T.sub(scores, shift))
        denom = T.sorted_sum(e, axis=-1, keepdims=True)
        w = T.div(e, denom)                           # [B, H, 1, K]
        w_col = T.transpose(w, (0, 1, 3, 2))          # [B, H, K, 1]
        ctx = T.sorted_sum(T.mul(w_col, v), axis=-2, keepdims=True)  # [B, H, 1, dh]
        out = self.wo(_merge_heads(ctx))
        weights = w.data.mean(axis=1).reshape(-1, nk)  # heads averaged -> [B, K]
        if squeezed:
            out = T.reshape(out, out.shape[1:])
            weights = weights[0]
        return out, weights


# --------------------------------------------------- squeeze-and-excitation


@dataclass(frozen=True)
class SeConfig:
    channels: int
    reduction: int = 4

    def __post_init__(self):
        if self.channels <= 0 or self.reduction <= 0:
            raise ContractError(f"bad SE config: {self}")
        if self.channels % self.reduction != 0 or self.channels // self.reduction < 1:
            raise ContractError(
                f"reduction {self.reduction} must divide channels {self.channels}"
            )

    @property
    def bottleneck(self) -> int:
        return self.channels // self.reduction


class SqueezeExcitation(Module):
    """Global-pool squeeze, two affine layers, logistic per-channel gate."""

    def __init__(self, cfg: SeConfig, rng: np.random.Generator | None = None,
                 dtype=np.float32, zero: bool = False):
        self.cfg = cfg
        if zero:
            rng = np.random.default_rng(0)
        self.fc1 = Linear(cfg.channels, cfg.bottleneck, rng, zero=zero, dtype=dtype)
        self.fc2 = Linear(cfg.bottleneck, cfg.channels, rng, zero=zero, dtype=dtype)

    def __call__(self, x: Tensor) -> Tensor:
        if x.shape[-1] != self.cfg.channels:
            raise ShapeError(f"channels {x.shape[-1]} != configured {self.cfg.channels}")
        if x.ndim < 2:
            raise ShapeError(f"squeeze_excitation needs at least [T, C], got {x.shape}")
        squeeze_axes = (0,) if x.ndim == 2 else tuple(range(1, x.ndim - 1))
        pooled = T.mean(x, axis=squeeze_axes, keepdims=True)
        gate = T.sigmoid(self.fc2(T.tanh(self.fc1(pooled))))
        return T.mul(x, gate)


# ------------------------------------------------------------ temporal shift


@dataclass(frozen=True)
class TsmConfig:
    shift_fraction: float
    channels: int

    def __post_init__(self):
        if not 0.0 < self.shift_fraction <= 0.5:
            raise ContractError(f"shift_fraction must be in (0, 0.5], got {self.shift_fraction}")
        if self.fold < 1:
            raise ContractError(
                f"floor({self.shift_fraction} * {self.channels}) must shift >= 1 channel"
            )

    @property
    def fold(self) -> int:
        return int(np.floor(self.shift_fraction * self.channels))


def temporal_shift(x: Tensor, cfg: TsmConfig, time_axis: int = 0) -> Tensor:
    """Shift the first ``fold`` channels back in time, the next ``fold``
    forward, copy the rest; vacated boundary frames are zero-filled.

    ``x`` is [..., T, ..., C] with channels last and time at ``time_axis``.
    """
    if x.shape[-1] != cfg.channels:
        raise ShapeError(f"channels {x.shape[-1]} != configured {cfg.channels}")
    t = x.shape[time_axis]
    fold = cfg.fold

    def span(chan: slice) -> Tensor:
        key = [slice(None)] * x.ndim
        key[-1] = chan
        return T.slice_(x, tuple(key))

    def time_slice(tensor: Tensor, lo, hi) -> Tensor:
        key = [slice(None)] * tensor.ndim
        key[time_axis] = slice(lo, hi)
        return T.slice_(tensor, tuple(key))

    def zero_frame(chan_width: int) -> Tensor:
        shape = list(x.shape)
        shape[time_axis] = 1
        shape[-1] = chan_width
        return Tensor(np.zeros(shape, dtype=x.data.dtype))

    back = span(slice(0, fold))
    fwd = span(slice(fold, 2 * fold))
    rest = span(slice(2 * fold, cfg.channels))
    shifted_back = T.concat([time_slice(back, 1, t), zero_frame(fold)], axis=time_axis)
    shifted_fwd = T.concat([zero_frame(fold), time_slice(fwd, 0, t - 1)], axis=time_axis)
    parts = [shifted_back, shifted_fwd]
    if cfg.channels > 2 * fold:
        parts.append(rest)
    return T.concat(parts, axis=-1)


# ------------------------------------------------------- transformer & head


class TransformerEncoderBlock(Module):
    """Pre-norm residual block: x + MHSA(LN(x)), then + FFN(LN(.)).

    FFN hidden width is 4x the model dim; both the attention output
    projection and the final FFN layer start at zero, so the block is an
    exact identity at initialization.
    """

    def __init__(self, cfg: AttentionConfig, rng: np.random.Generator,
                 dtype=np.float32):
        d = cfg.model_dim
        self.ln1 = LayerNorm(d, dtype)
        self.attn = MultiHeadSelfAttention(cfg, rng, dtype=dtype, zero_out=True)
        self.ln2 = LayerNorm(d, dtype)
        self.ff1 = Linear(d, 4 * d, rng, dtype=dtype)
        self.ff2 = Linear(4 * d, d, rng, zero=True, dtype=dtype)

    def __call__(self, x: Tensor) -> Tensor:
        x = T.add(x, self.attn(self.ln1(x)))
        return T.add(x, self.ff2(T.tanh(self.ff1(self.ln2(x)))))


class MlpHead(Module):
    """Affine, nonlinearity, affine; returns raw logits."""

    def __init__(self, d_in: int, num_classes: int, rng: np.random.Generator,
                 hidden: int | None = None, dtype=np.float32):
        hidden = hidden or d_in
        self.fc1 = Linear(d_in, hidden, rng, dtype=dtype)
        self.fc2 = Linear(hidden, num_classes, rng, dtype=dtype)

    def __call__(self, z: Tensor) -> Tensor:
        z2, squeezed = _promote(z, 2)
        if z2.shape[-1] != self.fc1.w.shape[0]:
            raise ShapeError(f"input dim {z2.shape[-1]} != configured {self.fc1.w.shape[0]}")
        out = self.fc2(T.tanh(self.fc1(z2)))
        if squeezed:
            out = T.reshape(out, out.shape[1:])
        return out


def sinusoidal_positions(length: int, dim: int, dtype=np.float32) -> np.ndarray:
    """Deterministic sin/cos position table [length, dim]."""
    pos = np.arange(length)[:, None].astype(np.float64)
    i = np.arange((dim + 1) // 2)[None, :].astype(np.float64)
    angles = pos / np.power(10000.0, 2.0 * i / dim)
    table = np.zeros((length, dim))
    table[:, 0::2] = np.sin(angles)
    table[:, 1::2] = np.cos(angles[:, : dim // 2])
    return table.astype(dtype)
