"""Epsilon-rule relevance propagation through the transformer families.

Rules, applied backward from the explained logit:
  * projections (affine or B-cos): R_in = x * (W^T (R_out / (z + eps sgn z)));
    B-cos layers use their input-dependent effective weight, so the rule is
    exact for the winning branch.
  * attention: the softmax matrix is a constant mixing weight over tokens;
    relevance flows through the value path only.
  * residual joins: split proportionally to each branch's contribution.
  * layer norms and ReLUs: relevance passes through positionally unchanged.

Token reshapes, rolls, window partitions and patch folding are permutations,
so relevance follows the inverse permutation. Sums are conserved up to the
eps slack per step plus whatever additive parameters (biases, [cls], the
positional table) absorb; the sweep reports those absorbed amounts.
"""

from __future__ import annotations

import numpy as np

from .bcos import BcosLayer, dynamic_linear_summary
from .models import SwinTransformer, VisionTransformer


def stabilized(z: np.ndarray, eps: float) -> np.ndarray:
    return z + eps * np.where(z >= 0, 1.0, -1.0)


def relprop_projection(layer, r_out: np.ndarray, eps: float) -> np.ndarray:
    """Epsilon rule through a Linear or BcosLayer using its cached forward."""
    if layer._lrp_cache is None:
        raise RuntimeError("no cached forward pass; run forward before relevance propagation")
    x, z = layer._lrp_cache
    s = r_out / stabilized(z.data, eps)
    if isinstance(layer, BcosLayer):
        w = dynamic_linear_summary(x.data, layer)          # [..., out, in]
        return x.data * np.einsum("...o,...oi->...i", s, w)
    return x.data * (s @ layer.weight.data)


def split_residual(r: np.ndarray, a: np.ndarray, b: np.ndarray, eps: float):
    tot = stabilized(a + b, eps)
    return r * a / tot, r * b / tot


def relprop_mlp(mlp, r_out: np.ndarray, eps: float) -> np.ndarray:
    r_hidden = relprop_projection(mlp.fc2, r_out, eps)
    # ReLU (linear kind): pass-through; inactive units carry no relevance
    return relprop_projection(mlp.fc1, r_hidden, eps)


def _heads_split(r: np.ndarray, heads: int) -> np.ndarray:
    *lead, n, d = r.shape
    r = r.reshape(*lead, n, heads, d // heads)
    return np.swapaxes(r, -3, -2)


def _heads_merge(r: np.ndarray) -> np.ndarray:
    r = np.swapaxes(r, -3, -2)
    *lead, n, h, dh = r.shape
    return r.reshape(*lead, n, h * dh)


def relprop_token_mix(cache: dict, r_merged: np.ndarray, eps: float) -> np.ndarray:
    """Relevance through z = A v per head, treating A as constant weights."""
    v, attn, z = cache["v_heads"], cache["attn"], cache["z_heads"]
    r_z = _heads_split(r_merged, attn.shape[-3])
    s = r_z / stabilized(z, eps)
    r_v = v * np.matmul(np.swapaxes(attn, -1, -2), s)
    return _heads_merge(r_v)


def relprop_attention(attn, r_out: np.ndarray, eps: float) -> np.ndarray:
    """Global multi-head attention: out proj -> token mixing -> value proj."""
    r_merged = relprop_projection(attn.out, r_out, eps)
    r_v = relprop_token_mix(attn._lrp_cache, r_merged, eps)
    return relprop_projection(attn.v, r_v, eps)


def _partition_np(x: np.ndarray, ws: int) -> np.ndarray:
    b, H, W, d = x.shape
    x = x.reshape(b, H // ws, ws, W // ws, ws, d).transpose(0, 1, 3, 2, 4, 5)
    return x.reshape(b, (H // ws) * (W // ws), ws * ws, d)


def _unpartition_np(x: np.ndarray, ws: int, H: int, W: int) -> np.ndarray:
    b = x.shape[0]
    d = x.shape[-1]
    x = x.reshape(b, H // ws, W // ws, ws, ws, d).transpose(0, 1, 3, 2, 4, 5)
    return x.reshape(b, H, W, d)


def relprop_window_attention(wattn, r_out_tokens: np.ndarray, eps: float) -> np.ndarray:
    """Windowed attention: mirror the forward rolls/partitions in reverse."""
    H, W, ws, shift = wattn._lrp_cache["geometry"]
    b, n, d = r_out_tokens.shape
    r = r_out_tokens.reshape(b, H, W, d)
    if shift:
        r = np.roll(r, (-shift, -shift), axis=(1, 2))  # undo the final forward roll
    r_win = _partition_np(r, ws)
    r_merged = relprop_projection(wattn.out, r_win, eps)
    r_v = relprop_token_mix(wattn._lrp_cache, r_merged, eps)
    r_tok = relprop_projection(wattn.v, r_v, eps)
    r_grid = _unpartition_np(r_tok, ws, H, W)
    if shift:
        r_grid = np.roll(r_grid, (shift, shift), axis=(1, 2))
    return r_grid.reshape(b, n, d)


def relprop_block(block, r_out: np.ndarray, eps: float) -> np.ndarray:
    c = block._lrp_cache
    r_mid, r_mlp = split_residual(r_out, c["x_mid"], c["mlp_out"], eps)
    r_mid = r_mid + relprop_mlp(block.mlp, r_mlp, eps)  # norm2 passes through
    r_x, r_attn = split_residual(r_mid, c["x"], c["attn_out"], eps)
    if block.window is None:
        r_back = relprop_attention(block.attn, r_attn, eps)
    else:
        r_back = relprop_window_attention(block.attn, r_attn, eps)
    return r_x + r_back  # norm1 passes through


def relprop_merge(merge, r_out: np.ndarray, eps: float) -> np.ndarray:
    """Patch merging: projection rule, then scatter the 2x2 quadrants back."""
    c = merge._lrp_cache
    gh, gw = c["grid"]
    r_cat = relprop_projection(merge.proj, r_out, eps)  # norm passes through
    b = r_cat.shape[0]
    d = merge.dim
    r_cat = r_cat.reshape(b, gh // 2, gw // 2, 4, d)
    r_grid = np.zeros((b, gh, gw, d))
    r_grid[:, 0::2, 0::2, :] = r_cat[:, :, :, 0, :]
    r_grid[:, 1::2, 0::2, :] = r_cat[:, :, :, 1, :]
    r_grid[:, 0::2, 1::2, :] = r_cat[:, :, :, 2, :]
    r_grid[:, 1::2, 1::2, :] = r_cat[:, :, :, 3, :]
    return r_grid.reshape(b, gh * gw, d)


def model_relevance(model, r_logits: np.ndarray, eps: float = 1e-6) -> dict:
    """Backward relevance sweep from the logits of the last forward pass.

    Returns block-input token relevances, the input-pixel relevance, and the
    amounts absorbed by the [cls] token and the positional table.
    """
    if isinstance(model, VisionTransformer):
        return _vit_relevance(model, r_logits, eps)
    if isinstance(model, SwinTransformer):
        return _swin_relevance(model, r_logits, eps)
    raise TypeError(f"unsupported model type {type(model).__name__}")


def _embed_relevance(model, r_rows: np.ndarray, x0_rows: np.ndarray, pos_rows: np.ndarray,
                     eps: float):
    """Epsilon rule through the patch projection with the positional table as bias.

    The denominator is the post-add embedding x0 = proj(patches) + pos, so the
    positional parameters absorb their share like any additive term instead of
    entering a near-cancelling proportional split.
    """
    proj = model.patch_embed.proj
    x, _ = proj._lrp_cache
    s = r_rows / stabilized(x0_rows, eps)
    if isinstance(proj, BcosLayer):
        w = dynamic_linear_summary(x.data, proj)
        r_patch_vec = x.data * np.einsum("...o,...oi->...i", s, w)
    else:
        r_patch_vec = x.data * (s @ proj.weight.data)
        bias = proj.bias.data if proj.bias is not None else 0.0
        pos_rows = pos_rows + bias
    pos_abs = (r_rows * pos_rows / stabilized(x0_rows, eps)).sum(axis=(1, 2))
    pixels = model.patch_embed.fold_patches(r_patch_vec)
    return pixels, pos_abs


def _vit_relevance(model, r_logits: np.ndarray, eps: float) -> dict:
    cache = model._lrp_cache
    if cache is None:
        raise RuntimeError("run forward before relevance propagation")
    r_cls_feat = relprop_projection(model.head, r_logits, eps)  # [b, d] at final norm (cls row)
    b, n, d = cache["x0"].shape
    r = np.zeros((b, n, d))
    r[:, 0, :] = r_cls_feat
    blocks_r: list[np.ndarray] = [None] * len(model.blocks)
    for i in reversed(range(len(model.blocks))):
        r = relprop_block(model.blocks[i], r, eps)
        blocks_r[i] = r
    cls_abs = r[:, 0, :].sum(axis=-1)  # the [cls] parameter row has no input behind it
    pixels, pos_abs = _embed_relevance(model, r[:, 1:, :], cache["x0"][:, 1:, :],
                                       cache["pos"][:, 1:, :], eps)
    return {
        "blocks": blocks_r,
        "pixels": pixels,
        "cls_absorbed": cls_abs,
        "pos_absorbed": pos_abs,
    }


def _swin_relevance(model, r_logits: np.ndarray, eps: float) -> dict:
    cache = model._lrp_cache
    if cache is None:
        raise RuntimeError("run forward before relevance propagation")
    r_pooled = relprop_projection(model.head, r_logits, eps)  # [b, d_final]
    f = cache["final_tokens"]                                 # [b, n, d_final]
    b, n, _ = f.shape
    pooled = f.mean(axis=1)
    s = r_pooled / stabilized(pooled, eps)
    r = f * (s[:, None, :] / n)  # mean pooling: every token weighted 1/n
    blocks_r: list[np.ndarray] = [None] * model.cfg.total_depth
    layer = model.cfg.total_depth
    for s_idx in reversed(range(len(model.stage_blocks))):
        if s_idx < len(model.merges):
            r = relprop_merge(model.merges[s_idx], r, eps)
        for blk in reversed(model.stage_blocks[s_idx]):
            layer -= 1
            r = relprop_block(blk, r, eps)
            blocks_r[layer] = r
    pixels, pos_abs = _embed_relevance(model, r, cache["x0"], cache["pos"], eps)
    return {
        "blocks": blocks_r,
        "pixels": pixels,
        "cls_absorbed": np.zeros(b),
        "pos_absorbed": pos_abs,
    }
