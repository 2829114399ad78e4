"""Post-hoc saliency methods over execution traces.

All methods are pure functions of (trace, gradients, flags): attention-last,
rollout, token Grad-CAM, epsilon-LRP with selectable readout depth,
transformer attribution, and head-mass accumulation. Maps that come out all
zero are flagged degenerate instead of being renormalized into noise.
"""

from __future__ import annotations

import json
from dataclasses import dataclass

import numpy as np

from . import relprop
from .data import quantize8
from .netpbm import write_pgm
from .tensor import Tensor, backward
from .trace import AttentionRecord, ExecutionTrace, TraceError

METHODS = ("attn-last", "rollout", "grad-cam", "lrp", "lrp-second", "lrp-last", "ta")
GRADIENT_METHODS = ("grad-cam", "ta")


@dataclass
class SaliencyMap:
    """Nonnegative relevance grid with provenance."""

    method: str
    grid: np.ndarray          # raw rectified values, patch-grid or pixel resolution
    normalized: np.ndarray    # max 1 unless degenerate
    degenerate: bool
    class_index: int | None = None
    layer: int | None = None
    normalization: str = "max"

    def sidecar(self) -> dict:
        return {
            "method": self.method,
            "class_index": self.class_index,
            "layer": self.layer,
            "normalization": self.normalization,
            "degenerate": self.degenerate,
            "grid_shape": list(self.grid.shape),
        }


def _finalize(method: str, values: np.ndarray, class_index=None, layer=None) -> SaliencyMap:
    rect = np.maximum(np.asarray(values, dtype=float), 0.0)
    peak = rect.max() if rect.size else 0.0
    degenerate = not (peak > 0)
    normalized = rect / peak if not degenerate else np.zeros_like(rect)
    return SaliencyMap(method=method, grid=rect, normalized=normalized, degenerate=degenerate,
                       class_index=class_index, layer=layer)


def backward_for_class(model, image, class_index: int | None = None) -> ExecutionTrace:
    """Forward one image, backward from one logit; gradients land on the trace."""
    logits, trace = model.forward(image)
    if logits.shape[0] != 1:
        raise ValueError("backward_for_class explains a single image at a time")
    if class_index is None:
        class_index = int(np.argmax(logits.data[0]))
    if not 0 <= class_index < logits.shape[1]:
        raise ValueError(f"class_index {class_index} out of range [0, {logits.shape[1]})")
    backward(logits[0, class_index])
    trace.class_index = class_index
    return trace


def _query_relevance(a: np.ndarray, has_cls: bool) -> np.ndarray:
    """Reduce an [n, n] token-mix matrix to per-patch-token relevance."""
    if has_cls:
        return a[0, 1:]
    return a.mean(axis=0)


def attention_last(trace: ExecutionTrace) -> SaliencyMap:
    """Head-averaged last-layer attention read from the classifier's query row."""
    rec = trace.last_global()
    a = rec.head_mean(0)
    vals = _query_relevance(a, trace.has_cls)
    grid = vals.reshape(rec.grid)
    return _finalize("attn-last", grid, trace.class_index, rec.layer)


def rollout(trace: ExecutionTrace, identity_weight: float = 0.5) -> SaliencyMap:
    """Cumulative product of row-normalized, identity-mixed attention layers."""
    records = trace.global_records()
    if not records:
        trace.last_global()  # raises with remediation hint
    n = records[0].tokens
    r = np.eye(n)
    for rec in records:
        a = (1.0 - identity_weight) * rec.head_mean(0) + identity_weight * np.eye(n)
        a = a / a.sum(axis=-1, keepdims=True)
        r = a @ r
    vals = _query_relevance(r, trace.has_cls)
    grid = vals.reshape(records[-1].grid)
    return _finalize("rollout", grid, trace.class_index, records[-1].layer)


def rollout_matrix(trace: ExecutionTrace, identity_weight: float = 0.5) -> np.ndarray:
    """The cumulative rollout matrix itself (row-stochastic at every step)."""
    records = trace.global_records()
    n = records[0].tokens
    r = np.eye(n)
    for rec in records:
        a = (1.0 - identity_weight) * rec.head_mean(0) + identity_weight * np.eye(n)
        a = a / a.sum(axis=-1, keepdims=True)
        r = a @ r
    return r


def grad_cam(trace: ExecutionTrace, layer: int = -1) -> SaliencyMap:
    """Token-level Grad-CAM: block-input activations weighted by token-mean gradients."""
    layer = layer % len(trace.block_inputs)
    t = trace.block_inputs[layer].data[0]       # [n, d]
    g = trace.block_gradient(layer, 0)          # [n, d]
    alpha = g.mean(axis=0)
    vals = np.maximum(t @ alpha, 0.0)
    if trace.has_cls:
        vals = vals[1:]
    grid = vals.reshape(trace.block_grids[layer])
    return _finalize("grad-cam", grid, trace.class_index, layer)


def transformer_attribution(trace: ExecutionTrace) -> SaliencyMap:
    """Gradient-weighted rectified attention accumulated as R <- R + Abar R."""
    records = trace.global_records()
    if not records:
        trace.last_global()
    n = records[0].tokens
    r = np.eye(n)
    for rec in records:
        grad = rec.gradient(0)
        abar = np.maximum(grad * rec.array(0), 0.0).mean(axis=0)
        r = r + abar @ r
    vals = _query_relevance(r, trace.has_cls)
    return _finalize("ta", vals.reshape(records[-1].grid), trace.class_index, records[-1].layer)


def lrp_epsilon(model, image, class_index: int | None = None, readout: str = "all",
                eps: float = 1e-6) -> tuple[SaliencyMap, dict]:
    """Epsilon-rule relevance from one logit down to a chosen readout depth.

    readout: "all" renders input pixels, "second" the second block's input
    tokens, "last" the last block's input tokens. Returns the map plus an
    accounting dict (per-step sums, absorbed amounts, conservation error).
    """
    if readout not in ("all", "second", "last"):
        raise ValueError(f"unknown readout {readout!r}")
    logits, trace = model.forward(image)
    if logits.shape[0] != 1:
        raise ValueError("lrp_epsilon explains a single image at a time")
    if class_index is None:
        class_index = int(np.argmax(logits.data[0]))
    logit_value = float(logits.data[0, class_index])
    r_logits = np.zeros_like(logits.data)
    r_logits[0, class_index] = logit_value
    result = relprop.model_relevance(model, r_logits, eps)

    block_sums = [float(b.sum()) for b in result["blocks"]]
    pixel_sum = float(result["pixels"].sum())
    cls_abs = float(result["cls_absorbed"][0])
    pos_abs = float(result["pos_absorbed"][0])
    accounting = {
        "logit": logit_value,
        "class_index": class_index,
        "block_sums": block_sums,
        "pixel_sum": pixel_sum,
        "cls_absorbed": cls_abs,
        "pos_absorbed": pos_abs,
        "input_total": pixel_sum + cls_abs + pos_abs,
        "conservation_error": abs(pixel_sum + cls_abs + pos_abs - logit_value)
        / max(1.0, abs(logit_value)),
    }

    if readout == "all":
        pix = result["pixels"][0].sum(axis=0)  # collapse channels
        smap = _finalize("lrp", pix, class_index, None)
    else:
        if readout == "second" and len(result["blocks"]) < 2:
            raise ValueError("readout 'second' needs at least two blocks")
        idx = 1 if readout == "second" else len(result["blocks"]) - 1
        tokens = result["blocks"][idx][0].sum(axis=-1)
        if trace.has_cls:
            tokens = tokens[1:]
        grid = tokens.reshape(trace.block_grids[idx])
        name = "lrp-second" if readout == "second" else "lrp-last"
        smap = _finalize(name, grid, class_index, idx)
    return smap, accounting


def accumulate_heads(record: AttentionRecord, mass: float = 0.5, query_row: int = 0,
                     batch: int = 0) -> np.ndarray:
    """Per-head minimal top-attention sets covering `mass` of the query row.

    For each head the attention values of the query row are sorted descending
    (ties by token index ascending) and the smallest prefix reaching
    mass * row-total is kept. Returns the per-token count of heads that kept
    it (ints in [0, heads]).
    """
    if not 0 < mass <= 1:
        raise ValueError(f"mass must lie in (0, 1], got {mass}")
    a = record.attn.data[batch]  # [h, n, n]
    n = a.shape[-1]
    counts = np.zeros(n, dtype=int)
    for h in range(a.shape[0]):
        row = a[h, query_row]
        order = np.argsort(-row, kind="stable")
        total = row.sum()
        if total <= 0:
            continue
        csum = np.cumsum(row[order])
        k = int(np.searchsorted(csum, mass * total - 1e-12 * total) + 1)
        k = min(k, n)
        counts[order[:k]] += 1
    return counts


def head_count_grid(record: AttentionRecord, counts: np.ndarray, has_cls: bool) -> np.ndarray:
    vals = counts[1:] if has_cls else counts
    return vals.reshape(record.grid)


def render_saliency(smap: SaliencyMap, target_resolution: int, mode: str = "nearest") -> np.ndarray:
    """Upsample the normalized grid to square target resolution as 8-bit gray."""
    return render_values(smap.normalized, target_resolution, mode)


def render_values(values: np.ndarray, target_resolution: int, mode: str = "nearest") -> np.ndarray:
    src = np.asarray(values, dtype=float)
    h, w = src.shape
    R = target_resolution
    if mode == "nearest":
        rows = (np.arange(R) * h) // R
        cols = (np.arange(R) * w) // R
        up = src[np.ix_(rows, cols)]
    elif mode == "bilinear":
        up = _bilinear(src, R, R)
    else:
        raise ValueError(f"unknown upsampling mode {mode!r}")
    return quantize8(up)


def upsample_values(values: np.ndarray, target_resolution: int, mode: str = "nearest") -> np.ndarray:
    """Float-valued upsampling (no quantization), same geometry as render_values."""
    src = np.asarray(values, dtype=float)
    h, w = src.shape
    R = target_resolution
    if mode == "nearest":
        rows = (np.arange(R) * h) // R
        cols = (np.arange(R) * w) // R
        return src[np.ix_(rows, cols)]
    if mode == "bilinear":
        return _bilinear(src, R, R)
    raise ValueError(f"unknown upsampling mode {mode!r}")


def _bilinear(src: np.ndarray, out_h: int, out_w: int) -> np.ndarray:
    """Corner-aligned bilinear interpolation (endpoints map to endpoints)."""
    h, w = src.shape
    ys = np.linspace(0, h - 1, out_h) if out_h > 1 else np.zeros(1)
    xs = np.linspace(0, w - 1, out_w) if out_w > 1 else np.zeros(1)
    y0 = np.floor(ys).astype(int)
    x0 = np.floor(xs).astype(int)
    y1 = np.minimum(y0 + 1, h - 1)
    x1 = np.minimum(x0 + 1, w - 1)
    fy = (ys - y0)[:, None]
    fx = (xs - x0)[None, :]
    top = src[np.ix_(y0, x0)] * (1 - fx) + src[np.ix_(y0, x1)] * fx
    bot = src[np.ix_(y1, x0)] * (1 - fx) + src[np.ix_(y1, x1)] * fx
    return top * (1 - fy) + bot * fy


def saliency_localization(values: np.ndarray, mask: np.ndarray, top_fraction: float = 0.1) -> float:
    """Fraction of the top-`top_fraction` saliency mass inside the mask.

    Pixels are ranked by value (ties by index); returns 0 for all-zero maps.
    """
    v = np.asarray(values, dtype=float).reshape(-1)
    m = np.asarray(mask, dtype=bool).reshape(-1)
    if v.shape != m.shape:
        raise ValueError(f"saliency/mask shapes differ: {values.shape} vs {mask.shape}")
    k = max(1, int(round(top_fraction * v.size)))
    order = np.argsort(-v, kind="stable")[:k]
    mass = v[order].sum()
    if mass <= 0:
        return 0.0
    return float(v[order][m[order]].sum() / mass)


def save_saliency(smap: SaliencyMap, path_pgm: str, target_resolution: int,
                  mode: str = "nearest", extra: dict | None = None):
    """Write the rendered PGM plus its JSON sidecar (same stem, .json)."""
    img = render_saliency(smap, target_resolution, mode)
    write_pgm(path_pgm, img)
    meta = smap.sidecar()
    meta["render"] = {"resolution": target_resolution, "mode": mode}
    if extra:
        meta.update(extra)
    sidecar = path_pgm[:-4] + ".json" if path_pgm.endswith(".pgm") else path_pgm + ".json"
    with open(sidecar, "w") as fh:
        json.dump(meta, fh, indent=2, sort_keys=True)
    return sidecar
