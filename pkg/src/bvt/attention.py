"""Scaled dot-product attention, multi-head attention, and windowed attention.

Projections are pluggable: affine maps for the standard families, B-cos
layers (no bias) for the aligned families. Windowed attention partitions the
token grid, optionally with a cyclic shift whose cross-window pairs are
masked out of the softmax.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from . import nn
from .bcos import BcosLayer
from .tensor import (
    DimensionError,
    Tensor,
    add,
    concat,
    matmul,
    reshape,
    softmax,
    transpose,
)
from .trace import AttentionRecord, ExecutionTrace

MASK_VALUE = -1e9


@dataclass
class AttentionConfig:
    dim: int
    heads: int
    projection_kind: str = "linear"  # linear | bcos
    window: tuple[int, int] | None = None  # (window_size, shift)
    exponent: int = 2

    def __post_init__(self):
        if self.dim % self.heads != 0:
            raise ValueError(f"dim {self.dim} not divisible by heads {self.heads}")
        if self.projection_kind not in ("linear", "bcos"):
            raise ValueError(f"unknown projection kind {self.projection_kind!r}")
        if self.window is not None:
            ws, shift = self.window
            if not 0 <= shift < ws:
                raise ValueError(f"shift {shift} must lie in [0, window_size {ws})")


def scaled_dot_product_attention(q: Tensor, k: Tensor, v: Tensor, scale: float | None = None,
                                 mask: np.ndarray | None = None) -> tuple[Tensor, Tensor]:
    """softmax(scale * q k^T + mask) v over the trailing two axes.

    q, k, v: [..., n, d_h]. Returns (output [..., n, d_h], attention [..., n, n]).
    """
    if q.shape != k.shape or q.shape[:-1] != v.shape[:-1]:
        raise DimensionError(f"attention shapes disagree: q{q.shape} k{k.shape} v{v.shape}")
    if scale is None:
        scale = 1.0 / math.sqrt(q.shape[-1])
    logits = matmul(q, _swap_last(k))
    logits = logits * scale
    if mask is not None:
        logits = add(logits, Tensor(mask))
    attn = softmax(logits, axis=-1)
    return matmul(attn, v), attn


def _swap_last(t: Tensor) -> Tensor:
    axes = list(range(t.ndim))
    axes[-1], axes[-2] = axes[-2], axes[-1]
    return transpose(t, axes)


def _make_projection(kind: str, in_features: int, out_features: int, rng, exponent: int):
    if kind == "bcos":
        return BcosLayer(in_features, out_features, rng=rng, exponent=exponent)
    return nn.Linear(in_features, out_features, rng, bias=True)


def _split_heads(t: Tensor, heads: int) -> Tensor:
    """[..., n, d] -> [..., heads, n, d/heads]."""
    *lead, n, d = t.shape
    t = reshape(t, (*lead, n, heads, d // heads))
    axes = list(range(t.ndim))
    axes[-3], axes[-2] = axes[-2], axes[-3]
    return transpose(t, axes)


def _merge_heads(t: Tensor) -> Tensor:
    """[..., heads, n, d_h] -> [..., n, heads*d_h]."""
    axes = list(range(t.ndim))
    axes[-3], axes[-2] = axes[-2], axes[-3]
    t = transpose(t, axes)
    *lead, n, h, dh = t.shape
    return reshape(t, (*lead, n, h * dh))


class MultiHeadAttention(nn.Module):
    """Global multi-head attention with per-head scale 1/sqrt(d/h)."""

    def __init__(self, dim: int, heads: int, kind: str, rng, exponent: int = 2):
        if dim % heads != 0:
            raise ValueError(f"dim {dim} not divisible by heads {heads}")
        self.dim = dim
        self.heads = heads
        self.kind = kind
        self.q = _make_projection(kind, dim, dim, rng, exponent)
        self.k = _make_projection(kind, dim, dim, rng, exponent)
        self.v = _make_projection(kind, dim, dim, rng, exponent)
        self.out = _make_projection(kind, dim, dim, rng, exponent)
        self._lrp_cache = None

    def forward(self, x: Tensor, trace: ExecutionTrace | None = None, layer: int = 0,
                grid: tuple[int, int] | None = None) -> Tensor:
        q = _split_heads(self.q(x), self.heads)
        k = _split_heads(self.k(x), self.heads)
        v = _split_heads(self.v(x), self.heads)
        ctx, attn = scaled_dot_product_attention(q, k, v)
        merged = _merge_heads(ctx)
        y = self.out(merged)
        self._lrp_cache = {"v_heads": v.data, "attn": attn.data, "z_heads": ctx.data}
        if trace is not None:
            trace.add_attention(AttentionRecord(layer, attn, grid or trace.grid, is_global=True))
        return y

    def named_parameters(self):
        out = []
        for name, proj in (("q", self.q), ("k", self.k), ("v", self.v), ("out", self.out)):
            out.extend(nn.prefixed(name, proj.named_parameters()))
        return out


def shifted_window_mask(grid_h: int, grid_w: int, window_size: int, shift: int) -> np.ndarray:
    """Additive mask [num_windows, ws*ws, ws*ws]: 0 within a pre-shift region,
    MASK_VALUE across regions that only meet because of the cyclic roll."""
    img = np.zeros((grid_h, grid_w))
    region = 0
    h_slices = (slice(0, -window_size), slice(-window_size, -shift), slice(-shift, None))
    w_slices = (slice(0, -window_size), slice(-window_size, -shift), slice(-shift, None))
    for hs in h_slices:
        for ws_ in w_slices:
            img[hs, ws_] = region
            region += 1
    windows = _partition_array(img[..., None], window_size)[..., 0]  # [nw, ws*ws]
    diff = windows[:, :, None] != windows[:, None, :]
    return np.where(diff, MASK_VALUE, 0.0)


def _partition_array(x: np.ndarray, ws: int) -> np.ndarray:
    """[H, W, C] -> [num_windows, ws*ws, C], windows row-major, tokens row-major."""
    H, W, C = x.shape
    x = x.reshape(H // ws, ws, W // ws, ws, C).transpose(0, 2, 1, 3, 4)
    return x.reshape(-1, ws * ws, C)


def window_partition(x: Tensor, ws: int) -> Tensor:
    """[b, H, W, d] -> [b, nWh, nWw, ws*ws, d]."""
    b, H, W, d = x.shape
    if H % ws or W % ws:
        raise DimensionError(f"grid {H}x{W} not divisible by window size {ws}")
    t = reshape(x, (b, H // ws, ws, W // ws, ws, d))
    t = transpose(t, (0, 1, 3, 2, 4, 5))
    return reshape(t, (b, H // ws, W // ws, ws * ws, d))


def window_reverse(x: Tensor, ws: int, H: int, W: int) -> Tensor:
    """Inverse of window_partition."""
    b = x.shape[0]
    d = x.shape[-1]
    t = reshape(x, (b, H // ws, W // ws, ws, ws, d))
    t = transpose(t, (0, 1, 3, 2, 4, 5))
    return reshape(t, (b, H, W, d))


def roll2d(x: Tensor, shift_h: int, shift_w: int) -> Tensor:
    """Cyclic roll of [b, H, W, d] along the two grid axes."""
    out = x
    for axis, s in ((1, shift_h), (2, shift_w)):
        size = out.shape[axis]
        s = s % size
        if s == 0:
            continue
        head = [slice(None)] * out.ndim
        tail = [slice(None)] * out.ndim
        head[axis] = slice(size - s, size)
        tail[axis] = slice(0, size - s)
        out = concat([out[tuple(head)], out[tuple(tail)]], axis=axis)
    return out


class WindowAttention(nn.Module):
    """Multi-head attention computed independently inside each window.

    With shift > 0 the grid is cyclically rolled before partitioning and the
    attention logits across pre-shift window boundaries get MASK_VALUE added,
    so tokens only attend within their original neighborhoods.
    """

    def __init__(self, dim: int, heads: int, window_size: int, shift: int, kind: str, rng,
                 exponent: int = 2):
        if dim % heads != 0:
            raise ValueError(f"dim {dim} not divisible by heads {heads}")
        if not 0 <= shift < window_size:
            raise ValueError(f"shift {shift} must lie in [0, window_size {window_size})")
        self.dim = dim
        self.heads = heads
        self.window_size = window_size
        self.shift = shift
        self.kind = kind
        self.q = _make_projection(kind, dim, dim, rng, exponent)
        self.k = _make_projection(kind, dim, dim, rng, exponent)
        self.v = _make_projection(kind, dim, dim, rng, exponent)
        self.out = _make_projection(kind, dim, dim, rng, exponent)
        self._lrp_cache = None

    def forward(self, x: Tensor, trace: ExecutionTrace | None = None, layer: int = 0) -> Tensor:
        b, H, W, d = x.shape
        ws = self.window_size
        if H % ws or W % ws:
            raise DimensionError(f"grid {H}x{W} not divisible by window size {ws}")
        shifted = roll2d(x, -self.shift, -self.shift) if self.shift else x
        windows = window_partition(shifted, ws)  # [b, nWh, nWw, ws*ws, d]
        bwin_shape = windows.shape
        tokens = reshape(windows, (b, bwin_shape[1] * bwin_shape[2], ws * ws, d))

        q = _split_heads(self.q(tokens), self.heads)  # [b, nw, h, ws*ws, dh]
        k = _split_heads(self.k(tokens), self.heads)
        v = _split_heads(self.v(tokens), self.heads)
        mask = None
        if self.shift:
            m = shifted_window_mask(H, W, ws, self.shift)  # [nw, t, t]
            mask = m[None, :, None, :, :]
        ctx, attn = scaled_dot_product_attention(q, k, v, mask=mask)
        merged = _merge_heads(ctx)  # [b, nw, ws*ws, d]
        y = self.out(merged)
        self._lrp_cache = {"v_heads": v.data, "attn": attn.data, "z_heads": ctx.data,
                           "geometry": (H, W, ws, self.shift)}
        if trace is not None:
            rec = AttentionRecord(layer, attn, (ws, ws), is_global=False)
            trace.add_attention(rec)
        y = reshape(y, bwin_shape)
        y = window_reverse(y, ws, H, W)
        if self.shift:
            y = roll2d(y, self.shift, self.shift)
        return y

    def named_parameters(self):
        out = []
        for name, proj in (("q", self.q), ("k", self.k), ("v", self.v), ("out", self.out)):
            out.extend(nn.prefixed(name, proj.named_parameters()))
        return out
