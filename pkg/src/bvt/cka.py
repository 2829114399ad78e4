"""Linear centered kernel alignment between hidden-layer representations.

linear_cka(X, Y) = ||Yc^T Xc||_F^2 / (||Xc^T Xc||_F ||Yc^T Yc||_F) with
column-centered Xc, Yc. Invariant to orthogonal rotation and isotropic
scaling of either argument; 1 for identical representations.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .tensor import Tensor, no_grad

MIN_STACK_SAMPLES = 32


class SimilarityUndefinedError(ValueError):
    """CKA is undefined for zero-variance (constant) representations."""


def linear_cka(x: np.ndarray, y: np.ndarray) -> float:
    x = np.asarray(x, dtype=float)
    y = np.asarray(y, dtype=float)
    if x.ndim != 2 or y.ndim != 2 or x.shape[0] != y.shape[0]:
        raise ValueError(f"linear_cka expects [n,p] and [n,q] with equal n, got {x.shape}, {y.shape}")
    if x.shape[0] < 2:
        raise ValueError("linear_cka needs at least 2 samples")
    xc = x - x.mean(axis=0, keepdims=True)
    yc = y - y.mean(axis=0, keepdims=True)
    nx = np.linalg.norm(xc.T @ xc)
    ny = np.linalg.norm(yc.T @ yc)
    if nx == 0.0 or ny == 0.0:
        raise SimilarityUndefinedError("zero-variance representation: similarity undefined")
    num = np.linalg.norm(yc.T @ xc) ** 2
    return float(num / (nx * ny))


@dataclass
class ActivationStack:
    """Per-layer [n_samples, d_layer] matrices of token-pooled activations."""

    layer_names: list[str]
    matrices: list[np.ndarray]
    pooling: str = "mean-patch-tokens"

    def __post_init__(self):
        if len(self.layer_names) != len(self.matrices):
            raise ValueError("layer_names and matrices lengths differ")
        ns = {m.shape[0] for m in self.matrices}
        if len(ns) > 1:
            raise ValueError(f"layers disagree on sample count: {sorted(ns)}")
        if self.matrices and self.matrices[0].shape[0] < 2:
            raise ValueError("ActivationStack needs n_samples >= 2")

    @property
    def n_samples(self) -> int:
        return self.matrices[0].shape[0] if self.matrices else 0

    @property
    def depth(self) -> int:
        return len(self.matrices)


def collect_activations(model, images: np.ndarray, batch_size: int = 32) -> ActivationStack:
    """Mean-pooled block outputs over patch tokens ([cls] excluded) per layer."""
    chunks: list[list[np.ndarray]] | None = None
    with no_grad():
        for start in range(0, len(images), batch_size):
            _, trace = model.forward(Tensor(images[start:start + batch_size]))
            if chunks is None:
                chunks = [[] for _ in trace.block_outputs]
            for i, blk in enumerate(trace.block_outputs):
                tokens = blk.data[:, 1:, :] if trace.has_cls else blk.data
                chunks[i].append(tokens.mean(axis=1))
    matrices = [np.concatenate(c) for c in chunks]
    names = [f"block_{i}" for i in range(len(matrices))]
    return ActivationStack(layer_names=names, matrices=matrices)


def cka_matrix(stack: ActivationStack) -> np.ndarray:
    """Symmetric [L, L] layer-similarity matrix with unit diagonal.

    Self-similarity is identically 1, so the diagonal is set exactly; the
    lower triangle mirrors the upper.
    """
    if stack.n_samples < MIN_STACK_SAMPLES:
        raise ValueError(f"cka_matrix needs >= {MIN_STACK_SAMPLES} samples, got {stack.n_samples}")
    L = stack.depth
    m = np.eye(L)
    for i in range(L):
        for j in range(i + 1, L):
            v = linear_cka(stack.matrices[i], stack.matrices[j])
            m[i, j] = m[j, i] = v
    return m


def mean_off_diagonal(matrix: np.ndarray) -> float:
    m = np.asarray(matrix)
    L = m.shape[0]
    if L < 2:
        return 0.0
    mask = ~np.eye(L, dtype=bool)
    return float(m[mask].mean())


def write_cka_csv(path: str, layer_names: list[str], matrix: np.ndarray):
    """Header row/column of layer names, entries at 6 decimal places."""
    with open(path, "w") as fh:
        fh.write("," + ",".join(layer_names) + "\n")
        for name, row in zip(layer_names, matrix):
            fh.write(name + "," + ",".join(f"{v:.6f}" for v in row) + "\n")
