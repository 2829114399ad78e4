"""Small layer toolkit shared by all model families."""

from __future__ import annotations

import numpy as np

from .tensor import Tensor, add, matmul, mean, mul, pow_, sub, transpose


class Module:
    """Base for parameterized layers; parameters are named explicitly."""

    def named_parameters(self) -> list[tuple[str, Tensor]]:
        raise NotImplementedError

    def parameters(self) -> list[Tensor]:
        return [t for _, t in self.named_parameters()]

    def __call__(self, *args, **kwargs):
        return self.forward(*args, **kwargs)


def prefixed(prefix: str, items: list[tuple[str, Tensor]]) -> list[tuple[str, Tensor]]:
    return [(f"{prefix}.{name}", t) for name, t in items]


def truncated_normal(rng: np.random.Generator, shape, std: float = 0.02) -> np.ndarray:
    """Normal(0, std^2) with draws outside two standard deviations resampled."""
    out = rng.normal(0.0, std, size=shape)
    bad = np.abs(out) > 2 * std
    while bad.any():
        out[bad] = rng.normal(0.0, std, size=int(bad.sum()))
        bad = np.abs(out) > 2 * std
    return out


def parameter(values) -> Tensor:
    return Tensor(values, requires_grad=True)


class Linear(Module):
    """Affine map y = x W^T + b over the trailing axis."""

    def __init__(self, in_features: int, out_features: int, rng: np.random.Generator, bias: bool = True):
        self.in_features = in_features
        self.out_features = out_features
        self.weight = parameter(truncated_normal(rng, (out_features, in_features)))
        self.bias = parameter(np.zeros(out_features)) if bias else None
        self._lrp_cache = None

    def forward(self, x: Tensor) -> Tensor:
        y = matmul(x, transpose(self.weight))
        if self.bias is not None:
            y = add(y, self.bias)
        self._lrp_cache = (x, y)
        return y

    def named_parameters(self):
        out = [("weight", self.weight)]
        if self.bias is not None:
            out.append(("bias", self.bias))
        return out


class LayerNorm(Module):
    """Feature-axis normalization with affine scale; bias optional."""

    def __init__(self, dim: int, bias: bool = True, eps: float = 1e-5):
        self.dim = dim
        self.eps = eps
        self.gamma = parameter(np.ones(dim))
        self.beta = parameter(np.zeros(dim)) if bias else None

    def forward(self, x: Tensor) -> Tensor:
        mu = mean(x, axis=-1, keepdims=True)
        xc = sub(x, mu)
        var = mean(mul(xc, xc), axis=-1, keepdims=True)
        inv = pow_(add(var, self.eps), -0.5)
        y = mul(mul(xc, inv), self.gamma)
        if self.beta is not None:
            y = add(y, self.beta)
        return y

    def named_parameters(self):
        out = [("gamma", self.gamma)]
        if self.beta is not None:
            out.append(("beta", self.beta))
        return out
