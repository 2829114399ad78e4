"""Model zoo: standard and B-cos transformer families, checkpoints, audits.

Families:
  vit  - global-attention transformer, affine projections, ReLU MLPs.
  bvt  - same topology with every linear transform replaced by a B-cos layer
         and every ReLU removed; inputs use the six-channel encoding.
  swin - windowed attention with patch merging between stages.
  bwin - the B-cos version of swin.

The ``modified_last_block`` flag swaps the final windowed block for a global
one so attention-based visualizations apply to the windowed families.

Parameter counts are exact and auditable from the layer definitions:
  Linear(i, o)      -> i*o + o           LayerNorm(d)     -> 2d (d without bias)
  BcosLayer(i, o)   -> 2*i*o (no bias)   attention block  -> 4 projections d->d
  ViT/BvT model     -> patch embed + cls + pos + depth blocks + final norm + head
"""

from __future__ import annotations

import io
import json
import struct
from collections import Counter
from dataclasses import dataclass, field, fields

import numpy as np

from . import nn
from .attention import MultiHeadAttention, WindowAttention
from .bcos import BcosLayer
from .tensor import (
    DimensionError,
    Tensor,
    add,
    broadcast_to,
    concat,
    mean,
    relu,
    reshape,
    transpose,
)
from .trace import ExecutionTrace

CKPT_MAGIC = b"BVTCKPT0"
FAMILIES = ("vit", "bvt", "swin", "bwin")
BCOS_FAMILIES = ("bvt", "bwin")


class ConfigError(ValueError):
    """Invalid or inconsistent model configuration."""


@dataclass
class ModelConfig:
    """Full architectural description of one model."""

    family: str
    image_size: int
    num_classes: int
    dim: int
    heads: int
    patch_size: int = 8
    depth: int | None = None                  # vit / bvt
    stage_depths: tuple[int, ...] | None = None  # swin / bwin
    window_size: int | None = None            # swin / bwin
    modified_last_block: bool = False         # swin / bwin
    in_channels: int | None = None
    mlp_ratio: int = 4
    exponent: int = 2

    def __post_init__(self):
        if self.in_channels is None:
            self.in_channels = 6 if self.family in BCOS_FAMILIES else 3
        if isinstance(self.stage_depths, list):
            self.stage_depths = tuple(self.stage_depths)
        self.validate()

    @property
    def is_bcos(self) -> bool:
        return self.family in BCOS_FAMILIES

    @property
    def kind(self) -> str:
        return "bcos" if self.is_bcos else "linear"

    @property
    def is_windowed(self) -> bool:
        return self.family in ("swin", "bwin")

    @property
    def total_depth(self) -> int:
        return sum(self.stage_depths) if self.is_windowed else self.depth

    def validate(self):
        if self.family not in FAMILIES:
            raise ConfigError(f"unknown family {self.family!r}, expected one of {FAMILIES}")
        if self.num_classes < 2:
            raise ConfigError("num_classes must be >= 2")
        if self.dim < 1 or self.heads < 1 or self.dim % self.heads:
            raise ConfigError(f"dim {self.dim} must be a positive multiple of heads {self.heads}")
        if self.image_size % self.patch_size:
            raise ConfigError(f"image_size {self.image_size} not divisible by patch_size {self.patch_size}")
        expected_ch = 6 if self.is_bcos else 3
        if self.in_channels != expected_ch:
            raise ConfigError(f"family {self.family} requires in_channels {expected_ch}, got {self.in_channels}")
        if self.mlp_ratio < 1:
            raise ConfigError("mlp_ratio must be >= 1")
        if self.exponent < 1 or int(self.exponent) != self.exponent:
            raise ConfigError("exponent must be a positive integer")
        if self.is_windowed:
            if not self.stage_depths or any(d < 1 for d in self.stage_depths):
                raise ConfigError("swin/bwin need stage_depths with every stage >= 1")
            if not self.window_size or self.window_size < 1:
                raise ConfigError("swin/bwin need a positive window_size")
            grid = self.image_size // self.patch_size
            for s in range(len(self.stage_depths)):
                g = grid // (2 ** s)
                if g == 0 or g % self.window_size:
                    raise ConfigError(
                        f"stage {s} grid {g} not divisible by window_size {self.window_size}"
                    )
        else:
            if not self.depth or self.depth < 1:
                raise ConfigError("vit/bvt need depth >= 1")
            if self.stage_depths is not None or self.window_size is not None:
                raise ConfigError("stage_depths/window_size only apply to swin/bwin")
            if self.modified_last_block:
                raise ConfigError("modified_last_block only applies to swin/bwin")

    def to_dict(self) -> dict:
        out = {}
        for f in fields(self):
            v = getattr(self, f.name)
            out[f.name] = list(v) if isinstance(v, tuple) else v
        return out

    @classmethod
    def from_dict(cls, d: dict) -> "ModelConfig":
        known = {f.name for f in fields(cls)}
        unknown = set(d) - known
        if unknown:
            raise ConfigError(f"unknown model config keys: {sorted(unknown)}")
        return cls(**d)


PRESETS = {
    # desk-scale
    "micro": dict(dim=64, depth=4, heads=4, patch_size=4, image_size=32, mlp_ratio=4),
    "micro-win": dict(dim=32, stage_depths=(2, 2), heads=2, window_size=4, patch_size=4,
                      image_size=32, mlp_ratio=4),
    "tiny-proxy": dict(dim=128, depth=6, heads=4, patch_size=8, image_size=64, mlp_ratio=4),
    "tiny-proxy-win": dict(dim=64, stage_depths=(2, 2, 2), heads=2, window_size=4, patch_size=4,
                           image_size=64, mlp_ratio=4),
    # tiny config for whole-model gradient checks (< 10k params)
    "gradcheck": dict(dim=8, depth=2, heads=2, patch_size=4, image_size=16, mlp_ratio=2),
    "gradcheck-win": dict(dim=8, stage_depths=(1, 1), heads=2, window_size=2, patch_size=4,
                          image_size=16, mlp_ratio=2),
    # full-scale definitions (not exercised in CI)
    "t8": dict(dim=192, depth=12, heads=3, patch_size=8, image_size=224, mlp_ratio=4),
    "s8": dict(dim=384, depth=12, heads=6, patch_size=8, image_size=224, mlp_ratio=4),
    "t-win": dict(dim=96, stage_depths=(2, 2, 6, 2), heads=3, window_size=7, patch_size=4,
                  image_size=224, mlp_ratio=4),
}


def preset_config(name: str, family: str, num_classes: int, **overrides) -> ModelConfig:
    if name not in PRESETS:
        raise ConfigError(f"unknown preset {name!r}, expected one of {sorted(PRESETS)}")
    base = dict(PRESETS[name])
    windowed = family in ("swin", "bwin")
    if windowed != ("win" in name):
        raise ConfigError(f"preset {name!r} does not fit family {family!r}")
    base.update(overrides)
    return ModelConfig(family=family, num_classes=num_classes, **base)


def encode_six_channel(image: np.ndarray, strict: bool = True) -> np.ndarray:
    """[..., 3, H, W] in [0,1] -> [..., 6, H, W] ordered [r,g,b,1-r,1-g,1-b].

    Out-of-range values raise unless strict=False, which clamps instead.
    """
    img = np.asarray(image, dtype=float)
    if img.shape[-3] != 3:
        raise DimensionError(f"expected 3 channels on axis -3, got shape {img.shape}")
    lo, hi = img.min(), img.max()
    if lo < 0.0 or hi > 1.0:
        if strict:
            raise ValueError(f"pixel values outside [0,1]: min {lo}, max {hi}")
        img = np.clip(img, 0.0, 1.0)
    return np.concatenate([img, 1.0 - img], axis=-3)


class PatchEmbed(nn.Module):
    """Non-overlapping patches flattened and projected to the model width."""

    def __init__(self, cfg: ModelConfig, rng):
        p, c = cfg.patch_size, cfg.in_channels
        self.patch_size = p
        self.in_channels = c
        self.grid = cfg.image_size // p
        self.patch_dim = p * p * c
        if cfg.is_bcos:
            self.proj = BcosLayer(self.patch_dim, cfg.dim, rng=rng, exponent=cfg.exponent)
        else:
            self.proj = nn.Linear(self.patch_dim, cfg.dim, rng, bias=True)

    def forward(self, images: Tensor) -> Tensor:
        b, c, H, W = images.shape
        p, g = self.patch_size, self.grid
        if c != self.in_channels:
            raise DimensionError(f"expected {self.in_channels} input channels, got {c}")
        if H != g * p or W != g * p:
            raise DimensionError(f"expected {g * p}x{g * p} input, got {H}x{W}")
        x = reshape(images, (b, c, g, p, g, p))
        x = transpose(x, (0, 2, 4, 1, 3, 5))
        x = reshape(x, (b, g * g, self.patch_dim))
        return self.proj(x)

    def fold_patches(self, patches: np.ndarray) -> np.ndarray:
        """Inverse of the patch flattening: [b, n, p*p*c] -> [b, c, H, W]."""
        b = patches.shape[0]
        p, g, c = self.patch_size, self.grid, self.in_channels
        x = patches.reshape(b, g, g, c, p, p).transpose(0, 3, 1, 4, 2, 5)
        return x.reshape(b, c, g * p, g * p)

    def named_parameters(self):
        return nn.prefixed("proj", self.proj.named_parameters())


class Mlp(nn.Module):
    """Token-wise feed-forward: two projections, ReLU only in the linear kind."""

    def __init__(self, dim: int, hidden: int, kind: str, rng, exponent: int = 2):
        self.kind = kind
        if kind == "bcos":
            self.fc1 = BcosLayer(dim, hidden, rng=rng, exponent=exponent)
            self.fc2 = BcosLayer(hidden, dim, rng=rng, exponent=exponent)
        else:
            self.fc1 = nn.Linear(dim, hidden, rng, bias=True)
            self.fc2 = nn.Linear(hidden, dim, rng, bias=True)

    def forward(self, x: Tensor) -> Tensor:
        h = self.fc1(x)
        if self.kind == "linear":
            h = relu(h)
        return self.fc2(h)

    def named_parameters(self):
        return nn.prefixed("fc1", self.fc1.named_parameters()) + \
            nn.prefixed("fc2", self.fc2.named_parameters())


class Block(nn.Module):
    """Pre-norm residual block: x + Attn(LN(x)), then x + MLP(LN(x)).

    The attention is either global or windowed; windowed attention reshapes
    the token row back onto its grid internally.
    """

    def __init__(self, dim: int, heads: int, kind: str, mlp_ratio: int, rng,
                 exponent: int = 2, window: tuple[int, int] | None = None):
        bias = kind == "linear"
        self.window = window
        self.norm1 = nn.LayerNorm(dim, bias=bias)
        if window is None:
            self.attn = MultiHeadAttention(dim, heads, kind, rng, exponent)
        else:
            self.attn = WindowAttention(dim, heads, window[0], window[1], kind, rng, exponent)
        self.norm2 = nn.LayerNorm(dim, bias=bias)
        self.mlp = Mlp(dim, dim * mlp_ratio, kind, rng, exponent)
        self._lrp_cache = None

    def forward(self, x: Tensor, grid: tuple[int, int], trace: ExecutionTrace | None,
                layer: int) -> Tensor:
        b, n, d = x.shape
        a_in = self.norm1(x)
        if self.window is None:
            attn_out = self.attn(a_in, trace, layer, grid)
        else:
            gh, gw = grid
            a_grid = reshape(a_in, (b, gh, gw, d))
            attn_out = self.attn(a_grid, trace, layer)
            attn_out = reshape(attn_out, (b, n, d))
        x_mid = add(x, attn_out)
        mlp_out = self.mlp(self.norm2(x_mid))
        x_out = add(x_mid, mlp_out)
        self._lrp_cache = {"x": x.data, "attn_out": attn_out.data, "x_mid": x_mid.data,
                           "mlp_out": mlp_out.data, "x_out": x_out.data, "grid": grid}
        return x_out

    def named_parameters(self):
        return (nn.prefixed("norm1", self.norm1.named_parameters())
                + nn.prefixed("attn", self.attn.named_parameters())
                + nn.prefixed("norm2", self.norm2.named_parameters())
                + nn.prefixed("mlp", self.mlp.named_parameters()))


class PatchMerging(nn.Module):
    """Concatenate 2x2 token neighborhoods and project 4d -> 2d."""

    def __init__(self, dim: int, kind: str, rng, exponent: int = 2):
        self.dim = dim
        self.norm = nn.LayerNorm(4 * dim, bias=kind == "linear")
        if kind == "bcos":
            self.proj = BcosLayer(4 * dim, 2 * dim, rng=rng, exponent=exponent)
        else:
            self.proj = nn.Linear(4 * dim, 2 * dim, rng, bias=True)
        self._lrp_cache = None

    def forward(self, x: Tensor, grid: tuple[int, int]) -> Tensor:
        b, n, d = x.shape
        gh, gw = grid
        g = reshape(x, (b, gh, gw, d))
        quads = [g[:, 0::2, 0::2, :], g[:, 1::2, 0::2, :], g[:, 0::2, 1::2, :], g[:, 1::2, 1::2, :]]
        cat = concat(quads, axis=-1)
        cat = reshape(cat, (b, (gh // 2) * (gw // 2), 4 * d))
        y = self.proj(self.norm(cat))
        self._lrp_cache = {"cat": cat.data, "grid": grid}
        return y

    def named_parameters(self):
        return nn.prefixed("norm", self.norm.named_parameters()) + \
            nn.prefixed("proj", self.proj.named_parameters())


class VisionTransformer(nn.Module):
    """Global-attention classifier (vit / bvt): [cls] token readout."""

    def __init__(self, cfg: ModelConfig, rng):
        if cfg.is_windowed:
            raise ConfigError("VisionTransformer only builds vit/bvt configs")
        self.cfg = cfg
        d = cfg.dim
        self.patch_embed = PatchEmbed(cfg, rng)
        g = self.patch_embed.grid
        self.tokens = g * g + 1
        self.cls_token = nn.parameter(nn.truncated_normal(rng, (1, 1, d)))
        self.pos_embed = nn.parameter(nn.truncated_normal(rng, (1, self.tokens, d)))
        self.blocks = [
            Block(d, cfg.heads, cfg.kind, cfg.mlp_ratio, rng, cfg.exponent)
            for _ in range(cfg.depth)
        ]
        self.norm = nn.LayerNorm(d, bias=not cfg.is_bcos)
        if cfg.is_bcos:
            self.head = BcosLayer(d, cfg.num_classes, rng=rng, exponent=cfg.exponent)
        else:
            self.head = nn.Linear(d, cfg.num_classes, rng, bias=True)
        self._lrp_cache = None

    def forward(self, images) -> tuple[Tensor, ExecutionTrace]:
        images = images if isinstance(images, Tensor) else Tensor(images)
        if images.ndim == 3:
            images = reshape(images, (1,) + images.shape)
        b = images.shape[0]
        g = self.patch_embed.grid
        patches = self.patch_embed(images)
        cls = broadcast_to(self.cls_token, (b, 1, self.cfg.dim))
        base = concat([cls, patches], axis=1)
        x = add(base, self.pos_embed)
        trace = ExecutionTrace(self.cfg.family, True, (g, g), self.cfg.depth)
        self._lrp_cache = {"patches": patches.data, "base": base.data,
                           "pos": np.broadcast_to(self.pos_embed.data, base.shape), "x0": x.data}
        for i, blk in enumerate(self.blocks):
            x_in = x
            x = blk(x, (g, g), trace, i)
            trace.add_block(x_in, x, (g, g))
        f = self.norm(x)
        logits = self.head(f[:, 0])
        trace.logits = logits
        return logits, trace

    def named_parameters(self):
        out = nn.prefixed("patch_embed", self.patch_embed.named_parameters())
        out.append(("cls_token", self.cls_token))
        out.append(("pos_embed", self.pos_embed))
        for i, blk in enumerate(self.blocks):
            out.extend(nn.prefixed(f"blocks.{i}", blk.named_parameters()))
        out.extend(nn.prefixed("norm", self.norm.named_parameters()))
        out.extend(nn.prefixed("head", self.head.named_parameters()))
        return out


class SwinTransformer(nn.Module):
    """Windowed classifier (swin / bwin): stages with patch merging, mean-pool readout.

    Blocks alternate shift 0 and window_size // 2; the shift is dropped when a
    stage's grid equals the window (rolling would only permute one window).
    With ``modified_last_block`` the final block is a global-attention block.
    """

    def __init__(self, cfg: ModelConfig, rng):
        if not cfg.is_windowed:
            raise ConfigError("SwinTransformer only builds swin/bwin configs")
        self.cfg = cfg
        self.patch_embed = PatchEmbed(cfg, rng)
        g = self.patch_embed.grid
        self.pos_embed = nn.parameter(nn.truncated_normal(rng, (1, g * g, cfg.dim)))
        ws = cfg.window_size
        stages = len(cfg.stage_depths)
        self.stage_blocks: list[list[Block]] = []
        self.merges: list[PatchMerging] = []
        total = cfg.total_depth
        layer = 0
        for s, depth_s in enumerate(cfg.stage_depths):
            dim_s = cfg.dim * (2 ** s)
            heads_s = cfg.heads * (2 ** s)
            grid_s = g // (2 ** s)
            blocks = []
            for j in range(depth_s):
                layer += 1
                is_last = cfg.modified_last_block and layer == total
                if is_last:
                    blocks.append(Block(dim_s, heads_s, cfg.kind, cfg.mlp_ratio, rng, cfg.exponent))
                else:
                    shift = 0 if (j % 2 == 0 or grid_s == ws) else ws // 2
                    blocks.append(Block(dim_s, heads_s, cfg.kind, cfg.mlp_ratio, rng,
                                        cfg.exponent, window=(ws, shift)))
            self.stage_blocks.append(blocks)
            if s < stages - 1:
                self.merges.append(PatchMerging(dim_s, cfg.kind, rng, cfg.exponent))
        final_dim = cfg.dim * (2 ** (stages - 1))
        self.norm = nn.LayerNorm(final_dim, bias=not cfg.is_bcos)
        if cfg.is_bcos:
            self.head = BcosLayer(final_dim, cfg.num_classes, rng=rng, exponent=cfg.exponent)
        else:
            self.head = nn.Linear(final_dim, cfg.num_classes, rng, bias=True)
        self._lrp_cache = None

    def forward(self, images) -> tuple[Tensor, ExecutionTrace]:
        images = images if isinstance(images, Tensor) else Tensor(images)
        if images.ndim == 3:
            images = reshape(images, (1,) + images.shape)
        g = self.patch_embed.grid
        stages = len(self.cfg.stage_depths)
        final_grid = g // (2 ** (stages - 1))
        patches = self.patch_embed(images)
        x = add(patches, self.pos_embed)
        trace = ExecutionTrace(self.cfg.family, False, (final_grid, final_grid), self.cfg.total_depth)
        self._lrp_cache = {"patches": patches.data,
                           "pos": np.broadcast_to(self.pos_embed.data, patches.shape),
                           "x0": x.data}
        layer = 0
        grid_s = g
        for s, blocks in enumerate(self.stage_blocks):
            for blk in blocks:
                x_in = x
                x = blk(x, (grid_s, grid_s), trace, layer)
                trace.add_block(x_in, x, (grid_s, grid_s))
                layer += 1
            if s < stages - 1:
                x = self.merges[s](x, (grid_s, grid_s))
                grid_s //= 2
        f = self.norm(x)
        pooled = mean(f, axis=1)
        logits = self.head(pooled)
        trace.logits = logits
        self._lrp_cache["final_tokens"] = f.data
        return logits, trace

    def named_parameters(self):
        out = nn.prefixed("patch_embed", self.patch_embed.named_parameters())
        out.append(("pos_embed", self.pos_embed))
        layer = 0
        for s, blocks in enumerate(self.stage_blocks):
            for blk in blocks:
                out.extend(nn.prefixed(f"blocks.{layer}", blk.named_parameters()))
                layer += 1
            if s < len(self.merges):
                out.extend(nn.prefixed(f"merges.{s}", self.merges[s].named_parameters()))
        out.extend(nn.prefixed("norm", self.norm.named_parameters()))
        out.extend(nn.prefixed("head", self.head.named_parameters()))
        return out


def build_model(cfg: ModelConfig, seed: int = 0):
    """Deterministically initialize a model from (config, seed)."""
    rng = np.random.default_rng(seed)
    if cfg.is_windowed:
        return SwinTransformer(cfg, rng)
    return VisionTransformer(cfg, rng)


def build_modified_swin(cfg: ModelConfig, seed: int = 0) -> SwinTransformer:
    """Swin variant whose last block is a global-attention block."""
    if cfg.family != "swin":
        raise ConfigError("build_modified_swin expects a swin config")
    d = cfg.to_dict()
    d["modified_last_block"] = True
    return build_model(ModelConfig.from_dict(d), seed)


def build_bwin_modified(cfg: ModelConfig, seed: int = 0) -> SwinTransformer:
    """Bwin variant whose last block is a global-attention B-cos block."""
    if cfg.family != "bwin":
        raise ConfigError("build_bwin_modified expects a bwin config")
    d = cfg.to_dict()
    d["modified_last_block"] = True
    return build_model(ModelConfig.from_dict(d), seed)


def param_count(model) -> int:
    """Exact number of scalar parameters."""
    return int(sum(t.size for _, t in model.named_parameters()))


def graph_op_counts(model, images) -> Counter:
    """Count tape ops of one forward pass (e.g. relu nodes per graph)."""
    logits, _ = model.forward(images)
    if logits.tape is None:
        return Counter()
    return Counter(rec.name for rec in logits.tape.root().records)


def bias_parameter_names(model) -> list[str]:
    """Names of additive parameters outside normalization layers."""
    return [n for n, _ in model.named_parameters() if n.endswith(".bias")]


def norm_bias_parameter_names(model) -> list[str]:
    return [n for n, _ in model.named_parameters() if n.endswith(".beta")]


# ---------------------------------------------------------------------------
# checkpoints


@dataclass
class Checkpoint:
    config: dict
    params: dict  # name -> np.ndarray
    step: int = 0
    seed: int | None = None

    @property
    def family(self) -> str:
        return self.config["family"]


def save_checkpoint(path, model, step: int = 0, seed: int | None = None):
    """Magic, u64 header length, JSON header, then raw little-endian payloads."""
    named = model.named_parameters()
    entries = []
    offset = 0
    for name, t in named:
        arr = np.ascontiguousarray(t.data, dtype="<f8")
        entries.append({"name": name, "shape": list(arr.shape), "offset": offset})
        offset += arr.nbytes
    header = {
        "config": model.cfg.to_dict(),
        "step": step,
        "seed": seed,
        "tensors": entries,
    }
    blob = json.dumps(header, sort_keys=True).encode("utf-8")
    with open(path, "wb") as fh:
        fh.write(CKPT_MAGIC)
        fh.write(struct.pack("<Q", len(blob)))
        fh.write(blob)
        for _, t in named:
            fh.write(np.ascontiguousarray(t.data, dtype="<f8").tobytes(order="C"))


def load_checkpoint(path) -> Checkpoint:
    with open(path, "rb") as fh:
        magic = fh.read(8)
        if magic != CKPT_MAGIC:
            raise ValueError(f"bad checkpoint magic {magic!r}, expected {CKPT_MAGIC!r}")
        (hlen,) = struct.unpack("<Q", fh.read(8))
        header = json.loads(fh.read(hlen).decode("utf-8"))
        payload = fh.read()
    params = {}
    for e in header["tensors"]:
        shape = tuple(e["shape"])
        count = int(np.prod(shape)) if shape else 1
        start = e["offset"]
        chunk = payload[start:start + 8 * count]
        if len(chunk) != 8 * count:
            raise ValueError(f"truncated payload for tensor {e['name']}")
        params[e["name"]] = np.frombuffer(chunk, dtype="<f8").reshape(shape).copy()
    return Checkpoint(config=header["config"], params=params, step=header.get("step", 0),
                      seed=header.get("seed"))


def load_pretrained(model, ckpt: Checkpoint, strict: bool = True) -> dict:
    """Copy matching tensors bit-exactly; report matched/missing/reinitialized.

    With strict=False a classifier head whose class count differs is left at
    its fresh initialization; all other tensors must match exactly.
    """
    if ckpt.family != model.cfg.family:
        raise ValueError(f"family mismatch: model {model.cfg.family}, checkpoint {ckpt.family}")
    report = {"matched": [], "missing": [], "unexpected": [], "reinitialized": []}
    model_params = dict(model.named_parameters())
    for name in ckpt.params:
        if name not in model_params:
            report["unexpected"].append(name)
    for name, t in model_params.items():
        if name not in ckpt.params:
            if strict:
                raise ValueError(f"checkpoint missing tensor {name}")
            report["missing"].append(name)
            continue
        src = ckpt.params[name]
        if tuple(src.shape) != tuple(t.shape):
            if name.startswith("head.") and not strict:
                report["reinitialized"].append(name)
                continue
            raise ValueError(
                f"shape mismatch for {name}: checkpoint {src.shape}, model {tuple(t.shape)}"
            )
        t.data = src.astype(t.data.dtype, copy=True)
        report["matched"].append(name)
    return report


def model_from_checkpoint(ckpt: Checkpoint):
    cfg = ModelConfig.from_dict(ckpt.config)
    model = build_model(cfg, seed=0)
    load_pretrained(model, ckpt, strict=True)
    return model
