"""Losses, AdamW, cosine schedule with warm restarts, metrics, training loop.

Default learning rates are family-specific: 1e-4 for the standard families
and 1e-3 for the B-cos families. Everything is driven by a single seed; two
runs with the same (seed, config, data) produce bit-identical logs.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field

import numpy as np

from .models import Checkpoint, save_checkpoint
from .tensor import (
    Tensor,
    abs_,
    add,
    backward,
    exp,
    log,
    mean,
    mul,
    neg,
    no_grad,
    relu,
    sub,
    sum_,
)

FAMILY_LR = {"vit": 1e-4, "swin": 1e-4, "bvt": 1e-3, "bwin": 1e-3}


class TrainingAborted(RuntimeError):
    """Loss became non-finite; carries (step, lr, grad_norm) diagnostics."""

    def __init__(self, step: int, lr: float, grad_norm: float):
        self.step = step
        self.lr = lr
        self.grad_norm = grad_norm
        super().__init__(f"non-finite loss at step {step} (lr {lr:.3e}, grad norm {grad_norm:.3e})")


@dataclass
class TrainConfig:
    loss: str = "cce"                      # cce | bce
    lr_max: float | None = None            # family default when None
    lr_min: float = 0.0
    weight_decay: float = 1e-4
    batch_size: int = 16
    epochs: int = 10
    warm_restart: tuple[int, float] | None = None   # (restart_epoch, lr_divisor)
    seed: int = 0
    betas: tuple[float, float] = (0.9, 0.999)
    adam_eps: float = 1e-8
    grad_clip: float | None = None         # global norm when set
    max_steps: int | None = None
    target_train_accuracy: float | None = None  # stop at epoch end once reached

    def __post_init__(self):
        if self.loss not in ("cce", "bce"):
            raise ValueError(f"unknown loss {self.loss!r}")
        if self.lr_max is not None and self.lr_max <= self.lr_min:
            raise ValueError("lr_max must exceed lr_min")
        if self.lr_min < 0:
            raise ValueError("lr_min must be >= 0")
        if self.batch_size < 1 or self.epochs < 1:
            raise ValueError("batch_size and epochs must be >= 1")
        if isinstance(self.warm_restart, list):
            self.warm_restart = tuple(self.warm_restart)
        if isinstance(self.betas, list):
            self.betas = tuple(self.betas)

    def resolved_lr(self, family: str) -> float:
        return self.lr_max if self.lr_max is not None else FAMILY_LR[family]

    def to_dict(self) -> dict:
        return {
            "loss": self.loss, "lr_max": self.lr_max, "lr_min": self.lr_min,
            "weight_decay": self.weight_decay, "batch_size": self.batch_size,
            "epochs": self.epochs,
            "warm_restart": list(self.warm_restart) if self.warm_restart else None,
            "seed": self.seed, "betas": list(self.betas), "adam_eps": self.adam_eps,
            "grad_clip": self.grad_clip, "max_steps": self.max_steps,
            "target_train_accuracy": self.target_train_accuracy,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "TrainConfig":
        known = set(cls().to_dict())
        unknown = set(d) - known
        if unknown:
            raise ValueError(f"unknown train config keys: {sorted(unknown)}")
        return cls(**d)


# ---------------------------------------------------------------------------
# losses


def _one_hot(labels, k: int) -> np.ndarray:
    labels = np.asarray(labels, dtype=int)
    if labels.ndim != 1:
        raise ValueError(f"labels must be 1-d, got shape {labels.shape}")
    if labels.size and (labels.min() < 0 or labels.max() >= k):
        raise ValueError(f"label out of range [0, {k})")
    eye = np.zeros((labels.size, k))
    eye[np.arange(labels.size), labels] = 1.0
    return eye


def log_softmax(logits: Tensor, axis: int = -1) -> Tensor:
    shift = Tensor(logits.data.max(axis=axis, keepdims=True))  # detached; grad is exact anyway
    z = sub(logits, shift)
    lse = log(sum_(exp(z), axis=axis, keepdims=True))
    return sub(z, lse)


def cce_loss(logits: Tensor, labels) -> Tensor:
    """Mean over the batch of -log softmax(logits)[label]."""
    b, k = logits.shape
    onehot = Tensor(_one_hot(labels, k))
    picked = sum_(mul(log_softmax(logits), onehot))
    return neg(picked) * (1.0 / b)


def bce_onehot_loss(logits: Tensor, labels) -> Tensor:
    """Mean over batch and classes of the one-hot binary cross-entropy.

    Uses the fused form relu(z) - z*y + log(1 + exp(-|z|)), stable for any z.
    """
    b, k = logits.shape
    y = Tensor(_one_hot(labels, k))
    z = logits
    elem = add(sub(relu(z), mul(z, y)), log(add(exp(neg(abs_(z))), 1.0)))
    return mean(elem)


# ---------------------------------------------------------------------------
# optimizer and schedule


class AdamW:
    """Adam with decoupled weight decay applied from the pre-update value."""

    def __init__(self, named_params, lr: float, betas=(0.9, 0.999), eps: float = 1e-8,
                 weight_decay: float = 0.0):
        self.named_params = list(named_params)
        self.lr = lr
        self.betas = betas
        self.eps = eps
        self.weight_decay = weight_decay
        self.t = 0
        self.m = [np.zeros_like(p.data) for _, p in self.named_params]
        self.v = [np.zeros_like(p.data) for _, p in self.named_params]

    def step(self, lr: float | None = None):
        lr = self.lr if lr is None else lr
        b1, b2 = self.betas
        self.t += 1
        bc1 = 1.0 - b1 ** self.t
        bc2 = 1.0 - b2 ** self.t
        for i, (_, p) in enumerate(self.named_params):
            g = p.grad if p.grad is not None else np.zeros_like(p.data)
            self.m[i] = b1 * self.m[i] + (1 - b1) * g
            self.v[i] = b2 * self.v[i] + (1 - b2) * g * g
            m_hat = self.m[i] / bc1
            v_hat = self.v[i] / bc2
            update = m_hat / (np.sqrt(v_hat) + self.eps)
            decay = self.weight_decay * p.data if self.weight_decay else 0.0
            p.data = p.data - lr * update - lr * decay
            p.grad = None

    def zero_grad(self):
        for _, p in self.named_params:
            p.grad = None

    def grad_global_norm(self) -> float:
        total = 0.0
        for _, p in self.named_params:
            if p.grad is not None:
                total += float((p.grad * p.grad).sum())
        return math.sqrt(total)

    def clip_gradients(self, max_norm: float) -> float:
        norm = self.grad_global_norm()
        if norm > max_norm and norm > 0:
            scale = max_norm / norm
            for _, p in self.named_params:
                if p.grad is not None:
                    p.grad = p.grad * scale
        return norm


def cosine_lr(step: int, total_steps: int, lr_max: float, lr_min: float = 0.0,
              restarts=(), lr_divisor: float = 10.0) -> float:
    """Cosine decay lr_min + (lr_max-lr_min)/2 (1+cos(pi s/S)) per segment.

    ``restarts`` are ascending step indices where a new segment begins with
    its peak divided by ``lr_divisor`` (cumulatively).
    """
    if not 0 <= step <= total_steps:
        raise ValueError(f"step {step} outside [0, {total_steps}]")
    bounds = [0, *sorted(restarts), total_steps]
    seg = 0
    for i in range(len(bounds) - 1):
        if bounds[i] <= step < bounds[i + 1] or (step == total_steps and i == len(bounds) - 2):
            seg = i
            break
    peak = lr_max / (lr_divisor ** seg)
    s = step - bounds[seg]
    span = max(1, bounds[seg + 1] - bounds[seg])
    return lr_min + 0.5 * (peak - lr_min) * (1.0 + math.cos(math.pi * s / span))


# ---------------------------------------------------------------------------
# metrics


@dataclass
class MetricsReport:
    macro_f1: float
    top1: float
    top3: float
    precision: list[float]
    recall: list[float]
    confusion: np.ndarray
    mean_loss: float | None = None
    zero_support_classes: list[int] = field(default_factory=list)
    imbalance_ratio: float = 1.0

    def row(self, epoch: int, split: str, lr: float | None = None) -> dict:
        rec = {"epoch": epoch, "split": split, "loss": self.mean_loss,
               "f1_macro": self.macro_f1, "top1": self.top1, "top3": self.top3}
        if lr is not None:
            rec["lr"] = lr
        return rec


def top_k_accuracy(logits: np.ndarray, labels: np.ndarray, k: int) -> float:
    """Label within the k largest logits; ties broken by class index ascending."""
    order = np.argsort(-logits, axis=1, kind="stable")
    topk = order[:, :k]
    return float(np.mean([labels[i] in topk[i] for i in range(len(labels))]))


def metrics(logits: np.ndarray, labels: np.ndarray, k: int,
            mean_loss: float | None = None) -> MetricsReport:
    logits = np.asarray(logits, dtype=float)
    labels = np.asarray(labels, dtype=int)
    if k < 2:
        raise ValueError("metrics needs k >= 2")
    if logits.ndim != 2 or logits.shape[1] != k or len(labels) != len(logits):
        raise ValueError(f"metrics shape mismatch: logits {logits.shape}, labels {labels.shape}, k={k}")
    if len(labels) == 0:
        raise ValueError("metrics on empty input")
    pred = np.argmax(logits, axis=1)  # argmax returns the first (lowest) index on ties
    confusion = np.zeros((k, k), dtype=int)
    for t, p in zip(labels, pred):
        confusion[t, p] += 1
    precision, recall, f1s, zero_support = [], [], [], []
    for c in range(k):
        tp = confusion[c, c]
        fp = confusion[:, c].sum() - tp
        fn = confusion[c, :].sum() - tp
        p = tp / (tp + fp) if tp + fp else 0.0
        r = tp / (tp + fn) if tp + fn else 0.0
        f1 = 2 * p * r / (p + r) if p + r else 0.0
        if confusion[c, :].sum() == 0:
            zero_support.append(c)
            f1 = 0.0
        precision.append(float(p))
        recall.append(float(r))
        f1s.append(float(f1))
    counts = np.bincount(labels, minlength=k)
    imbalance = float(counts.max() / counts.min()) if counts.min() else float("inf")
    return MetricsReport(
        macro_f1=float(np.mean(f1s)),
        top1=top_k_accuracy(logits, labels, 1),
        top3=top_k_accuracy(logits, labels, min(3, k)),
        precision=precision,
        recall=recall,
        confusion=confusion,
        mean_loss=mean_loss,
        zero_support_classes=zero_support,
        imbalance_ratio=imbalance,
    )


# ---------------------------------------------------------------------------
# loop


def _loss_fn(kind: str):
    return cce_loss if kind == "cce" else bce_onehot_loss


def evaluate(model, images: np.ndarray, labels: np.ndarray, loss_kind: str = "cce",
             batch_size: int = 64) -> MetricsReport:
    """Metrics over a split, forward-only."""
    k = model.cfg.num_classes
    all_logits = []
    losses = []
    with no_grad():
        for start in range(0, len(labels), batch_size):
            xb = images[start:start + batch_size]
            yb = labels[start:start + batch_size]
            logits, _ = model.forward(Tensor(xb))
            all_logits.append(logits.data)
            losses.append(_loss_fn(loss_kind)(logits, yb).item() * len(yb))
    logits = np.concatenate(all_logits)
    return metrics(logits, labels, k, mean_loss=float(np.sum(losses) / len(labels)))


def train_loop(model, splits: dict, cfg: TrainConfig, out_dir: str | None = None,
               log_path: str | None = None):
    """Train on splits["train"], validate on splits["val"].

    Returns (best Checkpoint, history) where history is a list of per-epoch
    JSON records (two per epoch: train then val). The checkpoint holds the
    best-val-macro-F1 parameters. Raises TrainingAborted on non-finite loss.
    """
    x_train, y_train = splits["train"][0], splits["train"][1]
    x_val, y_val = splits["val"][0], splits["val"][1]
    if len(y_train) == 0 or len(y_val) == 0:
        raise ValueError("train and val splits must be non-empty")
    family = model.cfg.family
    lr_max = cfg.resolved_lr(family)
    loss_fn = _loss_fn(cfg.loss)
    rng = np.random.default_rng(cfg.seed)
    opt = AdamW(model.named_parameters(), lr=lr_max, betas=cfg.betas, eps=cfg.adam_eps,
                weight_decay=cfg.weight_decay)
    n = len(y_train)
    steps_per_epoch = math.ceil(n / cfg.batch_size)
    total_steps = cfg.epochs * steps_per_epoch
    if cfg.max_steps is not None:
        total_steps = min(total_steps, cfg.max_steps)
    restarts = ()
    if cfg.warm_restart is not None:
        restart_epoch, divisor = cfg.warm_restart
        restarts = (restart_epoch * steps_per_epoch,)
    else:
        divisor = 10.0

    history: list[dict] = []
    best = None  # (f1, -epoch, params, step)
    step = 0
    log_fh = open(log_path, "w") if log_path else None
    try:
        for epoch in range(cfg.epochs):
            if step >= total_steps:
                break
            perm = rng.permutation(n)
            epoch_logits = np.zeros((n, model.cfg.num_classes))
            epoch_losses = []
            seen = 0
            last_lr = 0.0
            for start in range(0, n, cfg.batch_size):
                if step >= total_steps:
                    break
                idx = perm[start:start + cfg.batch_size]
                lr = cosine_lr(step, total_steps, lr_max, cfg.lr_min, restarts, divisor)
                last_lr = lr
                logits, _ = model.forward(Tensor(x_train[idx]))
                loss = loss_fn(logits, y_train[idx])
                loss_val = loss.item()
                backward(loss)
                if not math.isfinite(loss_val):
                    raise TrainingAborted(step, lr, opt.grad_global_norm())
                if cfg.grad_clip is not None:
                    opt.clip_gradients(cfg.grad_clip)
                opt.step(lr)
                epoch_logits[idx] = logits.data
                epoch_losses.append(loss_val * len(idx))
                seen += len(idx)
                step += 1
            trained_idx = perm[:seen]
            train_report = metrics(epoch_logits[trained_idx], y_train[trained_idx],
                                   model.cfg.num_classes,
                                   mean_loss=float(np.sum(epoch_losses) / seen))
            val_report = evaluate(model, x_val, y_val, cfg.loss)
            for rec in (train_report.row(epoch, "train", last_lr),
                        val_report.row(epoch, "val", last_lr)):
                history.append(rec)
                if log_fh:
                    log_fh.write(json.dumps(rec, sort_keys=True) + "\n")
                    log_fh.flush()
            if best is None or val_report.macro_f1 > best[0]:
                snapshot = {name: p.data.copy() for name, p in model.named_parameters()}
                best = (val_report.macro_f1, epoch, snapshot, step)
            if (cfg.target_train_accuracy is not None
                    and train_report.top1 >= cfg.target_train_accuracy):
                break
    finally:
        if log_fh:
            log_fh.close()

    f1, epoch, snapshot, best_step = best
    ckpt = Checkpoint(config=model.cfg.to_dict(), params=snapshot, step=best_step, seed=cfg.seed)
    if out_dir is not None:
        import os

        os.makedirs(out_dir, exist_ok=True)
        current = {name: p.data.copy() for name, p in model.named_parameters()}
        for name, p in model.named_parameters():
            p.data = snapshot[name].copy()
        save_checkpoint(os.path.join(out_dir, "best.ckpt"), model, step=best_step, seed=cfg.seed)
        for name, p in model.named_parameters():
            p.data = current[name]
    return ckpt, history
