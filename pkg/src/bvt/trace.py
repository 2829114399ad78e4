"""Execution traces: per-layer attention and activations captured in forward.

Every explanation method and the representation analysis read from a trace
instead of re-instrumenting the model. Attention matrices and block
activations are kept as live autodiff tensors so that, after a backward pass
from a chosen logit, their gradients are available in place.
"""

from __future__ import annotations

import json
import os

import numpy as np

from .tensor import Tensor, save_tensor


class TraceError(RuntimeError):
    """A trace is missing what a method needs (layers, gradients)."""


class AttentionRecord:
    """Attention of one layer: tensor [batch, heads, n, n], rows sum to 1."""

    def __init__(self, layer: int, attn: Tensor, grid: tuple[int, int], is_global: bool = True):
        self.layer = layer
        self.attn = attn
        self.grid = grid
        self.is_global = is_global

    @property
    def heads(self) -> int:
        return self.attn.shape[1]

    @property
    def tokens(self) -> int:
        return self.attn.shape[-1]

    def array(self, batch: int = 0) -> np.ndarray:
        return self.attn.data[batch]

    def head_mean(self, batch: int = 0) -> np.ndarray:
        return self.attn.data[batch].mean(axis=0)

    def gradient(self, batch: int = 0) -> np.ndarray:
        if self.attn.grad is None:
            raise TraceError(
                f"attention gradients missing at layer {self.layer}: run a class backward first"
            )
        return self.attn.grad[batch]


class ExecutionTrace:
    """Ordered attention records plus per-block token activations."""

    def __init__(self, family: str, has_cls: bool, grid: tuple[int, int], depth: int):
        self.family = family
        self.has_cls = has_cls
        self.grid = grid
        self.depth = depth
        self.records: list[AttentionRecord] = []
        self.window_records: list[AttentionRecord] = []
        self.block_inputs: list[Tensor] = []
        self.block_outputs: list[Tensor] = []
        self.block_grids: list[tuple[int, int]] = []
        self.logits: Tensor | None = None
        self.class_index: int | None = None

    def add_attention(self, record: AttentionRecord):
        if record.is_global:
            self.records.append(record)
        else:
            self.window_records.append(record)

    def add_block(self, x_in: Tensor, x_out: Tensor, grid: tuple[int, int]):
        self.block_inputs.append(x_in)
        self.block_outputs.append(x_out)
        self.block_grids.append(grid)

    def global_records(self) -> list[AttentionRecord]:
        return self.records

    def last_global(self) -> AttentionRecord:
        if not self.records:
            raise TraceError(
                "no global attention layer in this trace; windowed families need the "
                "modified variant (global last block) for attention-based methods"
            )
        return self.records[-1]

    def block_gradient(self, layer: int, batch: int = 0) -> np.ndarray:
        t = self.block_inputs[layer]
        if t.grad is None:
            raise TraceError(f"block {layer} gradients missing: run a class backward first")
        return t.grad[batch]

    def dump(self, out_dir: str):
        """Write attention/activation tensors plus a JSON index."""
        os.makedirs(out_dir, exist_ok=True)
        index = {
            "family": self.family,
            "has_cls": self.has_cls,
            "grid": list(self.grid),
            "depth": self.depth,
            "class_index": self.class_index,
            "files": [],
        }

        def emit(name, arr):
            fname = f"{name}.tens"
            save_tensor(os.path.join(out_dir, fname), arr)
            index["files"].append({"name": name, "file": fname, "shape": list(arr.shape)})

        for rec in self.records:
            emit(f"attention_{rec.layer:03d}", rec.attn.data)
            if rec.attn.grad is not None:
                emit(f"attention_grad_{rec.layer:03d}", rec.attn.grad)
        for i, t in enumerate(self.block_inputs):
            emit(f"block_input_{i:03d}", t.data)
            if t.grad is not None:
                emit(f"block_input_grad_{i:03d}", t.grad)
        if self.logits is not None:
            emit("logits", self.logits.data)
        with open(os.path.join(out_dir, "index.json"), "w") as fh:
            json.dump(index, fh, indent=2, sort_keys=True)
