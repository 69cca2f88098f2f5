"""Scale-invariant loss, learning-rate schedule, early stopping and the fit loop."""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass, field

import numpy as np
import torch

from .apg import Tokenizer, build_prompt_bundle
from .dataset import DepthMap
from .errors import ConfigError, LossError, TrainError

FULL_SCALE_LR0 = 1e-5


def _as_tensor(x, mask=None):
    if isinstance(x, DepthMap):
        mask = x.valid_mask if mask is None else mask
        x = x.depth
    t = x if isinstance(x, torch.Tensor) else torch.as_tensor(np.asarray(x, dtype=np.float64))
    if mask is not None and not isinstance(mask, torch.Tensor):
        mask = torch.as_tensor(np.asarray(mask, dtype=bool))
    return t, mask


def _valid(pred, gt, mask):
    valid = (pred > 0) & (gt > 0)
    if mask is not None:
        valid = valid & mask
    return valid


def _residuals(pred, gt, mask):
    """Log residuals log(gt) - log(pred) on valid pixels (zero elsewhere) and the valid mask."""
    pred, pmask = _as_tensor(pred)
    gt, gmask = _as_tensor(gt, mask)
    if pred.shape != gt.shape:
        raise LossError(f"shape mismatch: pred {tuple(pred.shape)} vs gt {tuple(gt.shape)}")
    valid = _valid(pred, gt, gmask)
    if pmask is not None:
        valid = valid & pmask
    one = torch.ones((), dtype=pred.dtype)
    r = torch.log(torch.where(valid, gt.to(pred.dtype), one)) - torch.log(torch.where(valid, pred, one))
    return r, valid, pred


def ssi_loss(pred, gt, mask=None) -> torch.Tensor:
    """Mean squared deviation of log-depth residuals from their mean, over valid pixels.

    Accepts tensors, arrays or DepthMaps; gradients flow to ``pred`` when it is a tensor.
    """
    r, valid, _ = _residuals(pred, gt, mask)
    n = valid.sum()
    if int(n) == 0:
        raise LossError("no valid pixels")
    r_bar = r.sum() / n
    centered = torch.where(valid, r - r_bar, torch.zeros((), dtype=r.dtype))
    return (centered ** 2).sum() / n


def batch_ssi_loss(pred: torch.Tensor, gt: torch.Tensor, mask: torch.Tensor | None = None) -> torch.Tensor:
    """Per-image loss over (B, H, W) maps, averaged across the batch."""
    losses = [ssi_loss(pred[i], gt[i], None if mask is None else mask[i]) for i in range(pred.shape[0])]
    return torch.stack(losses).mean()


def ssi_loss_grad(pred, gt, mask=None) -> np.ndarray:
    """Closed-form d loss / d pred: (-2/n) (r_i - mean r) / pred_i on valid pixels, 0 elsewhere."""
    pred_t, _ = _as_tensor(pred)
    with torch.no_grad():
        r, valid, p = _residuals(pred_t.detach().to(torch.float64), gt, mask)
        n = int(valid.sum())
        if n == 0:
            raise LossError("no valid pixels")
        r_bar = r.sum() / n
        safe = torch.where(valid, p, torch.ones((), dtype=p.dtype))
        grad = torch.where(valid, (-2.0 / n) * (r - r_bar) / safe, torch.zeros((), dtype=p.dtype))
    return grad.numpy()


def cosine_lr(step: int, total_steps: int, lr0: float, lr_min: float) -> float:
    if total_steps <= 0 or step >= total_steps:
        return lr_min if step >= total_steps else lr0
    step = max(step, 0)
    return lr_min + 0.5 * (lr0 - lr_min) * (1.0 + math.cos(math.pi * step / total_steps))


@dataclass
class EarlyStopper:
    patience: int = 5
    best: float = math.inf
    bad_epochs: int = 0
    stopped: bool = False

    def __post_init__(self):
        if self.patience < 1:
            raise ConfigError("patience must be >= 1")


def early_stop_step(state, val_loss: float) -> str:
    """Return ``"stop"`` once ``patience`` consecutive calls fail to beat the best loss."""
    if not math.isfinite(val_loss):
        raise ValueError(f"non-finite validation loss {val_loss}")
    if val_loss < state.best:
        state.best = val_loss
        state.bad_epochs = 0
    else:
        state.bad_epochs += 1
    state.stopped = state.bad_epochs >= state.patience
    return "stop" if state.stopped else "continue"


@dataclass(frozen=True)
class TrainConfig:
    batch_size: int = 16
    lr0: float = 1e-5
    lr_min_ratio: float = 0.01
    epochs: int = 50
    patience: int = 5
    weight_decay: float = 0.01
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    max_steps: int = 0            # 0 = no cap
    prompt_mode: str = "apg"
    dataset_name: str = "nyu"

    def __post_init__(self):
        if self.batch_size < 1:
            raise ConfigError("batch_size must be >= 1")
        if self.patience < 1:
            raise ConfigError("patience must be >= 1")
        if self.epochs < 1:
            raise ConfigError("epochs must be >= 1")
        if self.lr0 < 0:
            raise ConfigError("lr0 must be >= 0")

    @property
    def lr_min(self) -> float:
        return self.lr0 * self.lr_min_ratio


@dataclass
class TrainState:
    step: int = 0
    epoch: int = 0
    stopper: EarlyStopper = field(default_factory=EarlyStopper)


@dataclass
class Batchable:
    images: torch.Tensor          # (B, H, W, 3)
    depth: torch.Tensor           # (B, H, W)
    mask: torch.Tensor            # (B, H, W)
    prompt_ids: list[list[int]]

    def __len__(self):
        return self.images.shape[0]

    def take(self, idx):
        idx = list(idx)
        return Batchable(self.images[idx], self.depth[idx], self.mask[idx], [self.prompt_ids[i] for i in idx])


def prepare(samples, tokenizer: Tokenizer, dataset_name: str, mode: str,
            dtype=torch.float32) -> Batchable:
    images = torch.from_numpy(np.stack([s.image for s in samples])).to(dtype)
    depth = torch.from_numpy(np.stack([s.depth.depth for s in samples])).to(dtype)
    mask = torch.from_numpy(np.stack([s.depth.valid_mask for s in samples]))
    ids = [build_prompt_bundle(s, dataset_name, tokenizer, mode).token_ids for s in samples]
    return Batchable(images, depth, mask, ids)


def evaluate_loss(model, data: Batchable, batch_size: int) -> float:
    model.eval()
    total = 0.0
    with torch.no_grad():
        for start in range(0, len(data), batch_size):
            b = data.take(range(start, min(start + batch_size, len(data))))
            total += float(batch_ssi_loss(model(b.images, b.prompt_ids), b.depth, b.mask)) * len(b)
    return total / len(data)


def write_history(history: list[dict], path) -> None:
    with open(path, "w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(["epoch", "train_loss", "val_loss", "lr", "stopped"])
        for row in history:
            writer.writerow([row["epoch"], repr(row["train_loss"]), repr(row["val_loss"]),
                             repr(row["lr"]), int(row["stopped"])])


def fit(model, train_samples, val_samples, cfg: TrainConfig, seed: int,
        tokenizer: Tokenizer | None = None, on_step=None):
    """Train the unfrozen parameters of ``model``; returns ``(model, history)``.

    ``history`` holds one dict per epoch (epoch, train_loss, val_loss, lr, stopped).
    ``on_step(step, loss)`` is called after every optimizer step when given.
    """
    if not train_samples:
        raise TrainError("empty training split")
    tokenizer = tokenizer or Tokenizer.build(model.cfg.backbone.V)
    torch.manual_seed(seed)
    gen = torch.Generator().manual_seed(seed)
    dtype = model.dtype
    train = prepare(train_samples, tokenizer, cfg.dataset_name, cfg.prompt_mode, dtype)
    val = prepare(val_samples, tokenizer, cfg.dataset_name, cfg.prompt_mode, dtype) if val_samples else None

    params = [p for p in model.parameters() if p.requires_grad]
    frozen = {n: p.detach().clone() for n, p in model.named_parameters() if not p.requires_grad}
    optimizer = torch.optim.AdamW(params, lr=cfg.lr0, betas=(cfg.beta1, cfg.beta2),
                                  eps=cfg.eps, weight_decay=cfg.weight_decay)
    steps_per_epoch = math.ceil(len(train) / cfg.batch_size)
    total_steps = cfg.epochs * steps_per_epoch
    if cfg.max_steps:
        total_steps = min(total_steps, cfg.max_steps)

    state = TrainState(stopper=EarlyStopper(cfg.patience))
    history = []
    while state.epoch < cfg.epochs and state.step < total_steps:
        model.train()
        order = torch.randperm(len(train), generator=gen).tolist()
        losses = []
        for start in range(0, len(order), cfg.batch_size):
            if state.step >= total_steps:
                break
            lr = cosine_lr(state.step, total_steps, cfg.lr0, cfg.lr_min)
            for group in optimizer.param_groups:
                group["lr"] = lr
            b = train.take(order[start:start + cfg.batch_size])
            pred = model(b.images, b.prompt_ids)
            if not torch.isfinite(pred).all():
                raise TrainError("model produced non-finite depth", step=state.step)
            loss = batch_ssi_loss(pred, b.depth, b.mask)
            if not torch.isfinite(loss):
                raise TrainError("loss is not finite", step=state.step)
            optimizer.zero_grad(set_to_none=True)
            loss.backward()
            optimizer.step()
            losses.append(loss.item())
            if on_step is not None:
                on_step(state.step, losses[-1])
            state.step += 1
        state.epoch += 1
        train_loss = float(np.mean(losses))
        val_loss = evaluate_loss(model, val, cfg.batch_size) if val is not None else train_loss
        if not math.isfinite(val_loss):
            raise TrainError("validation loss is not finite", step=state.step)
        decision = early_stop_step(state.stopper, val_loss)
        history.append({"epoch": state.epoch, "train_loss": train_loss, "val_loss": val_loss,
                        "lr": cosine_lr(state.step, total_steps, cfg.lr0, cfg.lr_min),
                        "stopped": decision == "stop"})
        if decision == "stop":
            break

    model.eval()
    for n, p in model.named_parameters():
        if n in frozen and not torch.equal(frozen[n], p.detach()):
            raise TrainError(f"frozen tensor {n} changed during training", step=state.step)
    return model, history
