"""B-cos transforms: alignment-pressured drop-in replacements for linear layers.

A unit with raw weight w responds to input x with

    ||x|| * |cos(x, w_hat)|^B * sgn(cos(x, w_hat)),   w_hat = w / ||w||,

which is bounded by ||x|| with equality exactly at collinearity, so training
pushes weights toward the inputs they respond to. Two parallel banks feed a
signed MaxOut, passing only the better-aligned response.
"""

from __future__ import annotations

import numpy as np

from . import nn
from .tensor import (
    Tensor,
    abs_,
    div,
    l2_norm,
    matmul,
    maximum,
    mul,
    pow_,
    reshape,
    sum_,
    transpose,
)

DEFAULT_EPS = 1e-12


def _check_exponent(exponent: int) -> int:
    if int(exponent) != exponent or exponent < 1:
        raise ValueError(f"exponent must be a positive integer, got {exponent!r}")
    return int(exponent)


def _check_nonzero_rows(weight: np.ndarray):
    norms = np.sqrt((weight * weight).sum(axis=-1))
    if np.any(norms == 0):
        raise ValueError("zero-norm weight row: every unit needs a nonzero direction")


def normalized_rows(w: Tensor) -> Tensor:
    """Rows scaled to unit length; differentiable through the normalization."""
    return div(w, l2_norm(w, axis=-1, eps=0.0, keepdims=True))


def cosine_similarity(x: Tensor, w_hat: Tensor, eps: float = DEFAULT_EPS) -> Tensor:
    """cos of the angle between x[..., n] and a unit vector w_hat[n].

    Returns 0 where ||x|| <= eps.
    """
    x = x if isinstance(x, Tensor) else Tensor(x)
    w_hat = w_hat if isinstance(w_hat, Tensor) else Tensor(w_hat)
    if x.shape[-1] != w_hat.shape[-1]:
        raise ValueError(f"cosine_similarity: trailing extents differ, {x.shape} vs {w_hat.shape}")
    dot = sum_(mul(x, w_hat), axis=-1)
    n = l2_norm(x, axis=-1, eps=0.0)
    denom = maximum(n, Tensor(np.full(n.shape, eps)))
    c = div(dot, denom)
    live = (n.data > eps).astype(c.dtype)
    return mul(c, Tensor(live))


def _branch_response(x2d: Tensor, weight: Tensor, exponent: int, eps: float,
                     xn: Tensor | None = None) -> Tensor:
    """Responses of one unit bank: x2d [..., in] (rank >= 2), weight [out, in]."""
    what = normalized_rows(weight)
    lin = matmul(x2d, transpose(what))
    if exponent == 1:
        return lin
    if xn is None:
        xn = l2_norm(x2d, axis=-1, eps=eps, keepdims=True)
    c = div(lin, xn)
    return mul(lin, pow_(abs_(c), exponent - 1))


def bcos_star(x: Tensor, w: Tensor, exponent: int = 2, eps: float = DEFAULT_EPS) -> Tensor:
    """Single-unit response ||x|| |c|^B sgn(c) for x[..., n] against w[n].

    Computed as <w_hat, x> * |c|^(B-1), which is the same quantity with the
    sign carried by the inner product; exponent 1 reduces to the plain inner
    product exactly.
    """
    x = x if isinstance(x, Tensor) else Tensor(x)
    w = w if isinstance(w, Tensor) else Tensor(w)
    if w.ndim != 1:
        raise ValueError(f"bcos_star expects a single weight vector, got shape {w.shape}")
    if x.shape[-1] != w.shape[0]:
        raise ValueError(f"bcos_star: trailing extents differ, {x.shape} vs {w.shape}")
    exponent = _check_exponent(exponent)
    _check_nonzero_rows(w.data.reshape(1, -1))
    w_row = reshape(w, (1, -1))
    if x.ndim == 1:
        out = _branch_response(reshape(x, (1, -1)), w_row, exponent, eps)
        return reshape(out, ())
    return _branch_response(x, w_row, exponent, eps)[..., 0]


class BcosUnit(nn.Module):
    """One bank of B-cos units: raw weight [out, in], no bias."""

    def __init__(self, weight, exponent: int = 2, eps: float = DEFAULT_EPS):
        w = weight if isinstance(weight, Tensor) else nn.parameter(np.asarray(weight, dtype=float))
        if w.ndim != 2:
            raise ValueError(f"BcosUnit weight must be [out, in], got {w.shape}")
        _check_nonzero_rows(w.data)
        self.weight = w
        self.exponent = _check_exponent(exponent)
        self.eps = eps

    def forward(self, x: Tensor) -> Tensor:
        return _branch_response(x, self.weight, self.exponent, self.eps)

    def named_parameters(self):
        return [("weight", self.weight)]


class BcosLayer(nn.Module):
    """Two parallel B-cos banks joined by a signed MaxOut.

    Ties route to branch_a. Parameter count is 2 * in * out; both branches
    share shape and exponent, and neither has a bias.
    """

    def __init__(self, in_features: int, out_features: int, rng: np.random.Generator | None = None,
                 exponent: int = 2, eps: float = DEFAULT_EPS, weights=None):
        self.in_features = in_features
        self.out_features = out_features
        self.exponent = _check_exponent(exponent)
        self.eps = eps
        if weights is not None:
            wa, wb = weights
        else:
            if rng is None:
                raise ValueError("BcosLayer needs an rng (or explicit weights)")
            wa = nn.truncated_normal(rng, (out_features, in_features))
            wb = nn.truncated_normal(rng, (out_features, in_features))
        self.branch_a = BcosUnit(nn.parameter(wa) if not isinstance(wa, Tensor) else wa, exponent, eps)
        self.branch_b = BcosUnit(nn.parameter(wb) if not isinstance(wb, Tensor) else wb, exponent, eps)
        self._lrp_cache = None

    def forward(self, x: Tensor) -> Tensor:
        squeeze = x.ndim == 1
        x2d = reshape(x, (1, -1)) if squeeze else x
        xn = None
        if self.exponent > 1:
            xn = l2_norm(x2d, axis=-1, eps=self.eps, keepdims=True)
        out = maximum(
            _branch_response(x2d, self.branch_a.weight, self.exponent, self.eps, xn),
            _branch_response(x2d, self.branch_b.weight, self.exponent, self.eps, xn),
        )
        if squeeze:
            out = reshape(out, (self.out_features,))
        self._lrp_cache = (x2d, out)
        return out

    def named_parameters(self):
        return [("branch_a.weight", self.branch_a.weight), ("branch_b.weight", self.branch_b.weight)]

    def effective_weight(self, x: np.ndarray) -> np.ndarray:
        """Input-dependent matrix W(x) with W(x) @ x equal to the forward output."""
        return dynamic_linear_summary(x, self)


def _branch_effective(x: np.ndarray, weight: np.ndarray, exponent: int, eps: float):
    """numpy twin of _branch_response: returns (values [..., out], W(x) [..., out, in])."""
    norms = np.sqrt((weight * weight).sum(axis=-1, keepdims=True))
    what = weight / norms
    lin = x @ what.T
    if exponent == 1:
        scale = np.ones_like(lin)
    else:
        xn = np.sqrt((x * x).sum(axis=-1, keepdims=True) + eps * eps)
        scale = np.abs(lin / xn) ** (exponent - 1)
    values = lin * scale
    eff = scale[..., None] * what
    return values, eff


def dynamic_linear_summary(x, layer: BcosLayer) -> np.ndarray:
    """Effective weight W(x)[..., out, in] of the winning branch per unit.

    Applying W(x) to x reproduces the layer output: the MaxOut picks one
    branch per unit, and that branch's response is linear in x once its
    cosine factor is frozen.
    """
    x = x.data if isinstance(x, Tensor) else np.asarray(x, dtype=float)
    va, ea = _branch_effective(x, layer.branch_a.weight.data, layer.exponent, layer.eps)
    vb, eb = _branch_effective(x, layer.branch_b.weight.data, layer.exponent, layer.eps)
    win_a = va >= vb
    return np.where(win_a[..., None], ea, eb)
