"""SGD training with warm-up/linear-decay schedule and two learning-rate groups."""
from __future__ import annotations

import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import autodiff as ad
from . import data as D
from . import model as M
from .config import RunConfig
from .losses import LossNetParams, total_loss_from_logits
from .metrics import binarize, dice


class NonFiniteLossError(RuntimeError):
    def __init__(self, iteration: int, value: float):
        super().__init__(f"non-finite loss {value} at iteration {iteration}")
        self.iteration = iteration


def warmup_steps(total: int, warmup_fraction: float) -> int:
    return min(total - 1, max(1, int(round(warmup_fraction * total)))) if total > 1 else 1


def lr_at(t: int, total: int, warmup: int, lr_max: float) -> float:
    """Linear ramp to ``lr_max`` at step ``warmup``, then linear decay to 0 at ``total``."""
    if t <= warmup:
        return lr_max * t / warmup
    return lr_max * (total - t) / (total - warmup)


class SGD:
    """Momentum SGD; weight decay is a multiplicative shrink of non-bias parameters."""

    def __init__(self, params: dict[str, ad.Tensor], momentum: float, weight_decay: float):
        self.params = params
        self.momentum = momentum
        self.weight_decay = weight_decay
        self.velocity = {k: np.zeros_like(p.data) for k, p in params.items()}

    def zero_grad(self) -> None:
        for p in self.params.values():
            p.zero_grad()

    def step(self, lrs: dict[str, float]) -> None:
        for name, p in self.params.items():
            lr = lrs[name]
            v = self.velocity[name]
            v *= self.momentum
            v += p.grad
            if not name.endswith(".bias"):
                p.data *= 1.0 - lr * self.weight_decay
            p.data -= lr * v


def clip_grad_norm(params: dict[str, ad.Tensor], max_norm: float) -> float:
    """Rescale all gradients so their joint L2 norm is at most ``max_norm``; returns the norm before."""
    norm = math.sqrt(sum(float(np.vdot(p.grad, p.grad)) for p in params.values()))
    if max_norm > 0 and norm > max_norm:
        scale = max_norm / norm
        for p in params.values():
            p.grad *= scale
    return norm


def stack(samples) -> tuple[np.ndarray, np.ndarray]:
    return np.stack([s.image for s in samples]), np.stack([s.mask for s in samples])


def predict_batches(images: np.ndarray, config: M.ModelConfig, params, batch: int = 16) -> np.ndarray:
    return np.concatenate([M.predict(images[i:i + batch], config, params)
                           for i in range(0, len(images), batch)])


def mean_dice(samples, config: M.ModelConfig, params, threshold: float = 0.5) -> float:
    if not samples:
        return float("nan")
    images, masks = stack(samples)
    probs = predict_batches(images, config, params)
    return float(np.mean([dice(binarize(p[0], threshold), m[0]) for p, m in zip(probs, masks)]))


@dataclass
class EpochRecord:
    epoch: int
    loss: float
    wiou: float
    wbce: float
    lf: float
    val_mdice: float
    lr_head: float

    def line(self) -> str:
        return (f"epoch {self.epoch:3d} loss {self.loss:.5f} wiou {self.wiou:.5f} wbce {self.wbce:.5f} "
                f"lf {self.lf:.5f} val_mdice {self.val_mdice:.4f} lr {self.lr_head:.5f}")


@dataclass
class TrainResult:
    history: list[EpochRecord] = field(default_factory=list)
    best_val_mdice: float = -1.0
    best_epoch: int = 0
    best_path: Path | None = None
    last_path: Path | None = None
    params: dict | None = None


def train(cfg: RunConfig, out_dir, train_samples=None, val_samples=None, echo=print) -> TrainResult:
    """Train from scratch; writes ``best.ckpt``, ``last.ckpt`` and ``train_log.txt`` to ``out_dir``."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    if train_samples is None:
        train_samples = D.load_split(cfg.data_dir, "train")
    if val_samples is None:
        val_samples = D.load_split(cfg.data_dir, "val")
    if not train_samples:
        raise ValueError("training split is empty")
    train_samples = D.fit_samples(train_samples, cfg.input_size)
    val_samples = D.fit_samples(val_samples, cfg.input_size)

    mcfg = cfg.model_config()
    lcfg = cfg.loss_config()
    params = M.init_params(mcfg)
    lossnet = LossNetParams.create(lcfg.lossnet_seed) if mcfg.lossnet_enabled else None
    opt = SGD(params, cfg.momentum, cfg.weight_decay)
    rng = np.random.default_rng([cfg.seed, 1])
    scales = cfg.scale_set()

    per_epoch = math.ceil(len(train_samples) / cfg.batch_size)
    total = per_epoch * cfg.epochs
    warm = warmup_steps(total, cfg.warmup_fraction)

    result = TrainResult(best_path=out / "best.ckpt", last_path=out / "last.ckpt", params=params)
    log_path = out / "train_log.txt"
    log_lines = [f"# config digest {cfg.digest()}"]
    t = 0
    for epoch in range(1, cfg.epochs + 1):
        order = rng.permutation(len(train_samples))
        sums = np.zeros(4)
        lr_head = 0.0
        for b in range(per_epoch):
            t += 1
            batch = [train_samples[i] for i in order[b * cfg.batch_size:(b + 1) * cfg.batch_size]]
            if cfg.augment:
                batch = [D.augment(s, rng) for s in batch]
            images, masks = stack(batch)
            scale = scales[int(rng.integers(len(scales)))]
            images, masks = D.multiscale_resize(images, masks, scale)

            opt.zero_grad()
            logits = M.forward_logits(ad.Tensor(images), mcfg, params, strict=False)
            losses = total_loss_from_logits(logits, masks, lossnet, lcfg, mcfg.lossnet_enabled)
            value = float(losses.total.data)
            if not math.isfinite(value):
                raise NonFiniteLossError(t, value)
            ad.backward(losses.total)
            clip_grad_norm(params, cfg.grad_clip)
            lr_head = lr_at(t, total, warm, cfg.lr_head_max)
            lr_bb = lr_at(t, total, warm, cfg.lr_backbone_max)
            opt.step({n: lr_bb if M.is_backbone(n) else lr_head for n in params})
            sums += [value, losses.wiou, losses.wbce, losses.lf]

        means = sums / per_epoch
        val = mean_dice(val_samples, mcfg, params, cfg.threshold)
        rec = EpochRecord(epoch, *means, val, lr_head)
        result.history.append(rec)
        log_lines.append(rec.line())
        echo(rec.line())
        # without a validation split the latest epoch counts as best
        if math.isnan(val) or val > result.best_val_mdice:
            result.best_val_mdice, result.best_epoch = val, epoch
            M.save_params(result.best_path, mcfg, params)
    M.save_params(result.last_path, mcfg, params)
    log_lines.append(f"# best val_mdice {result.best_val_mdice:.4f} at epoch {result.best_epoch}")
    log_path.write_text("\n".join(log_lines) + "\n")
    return result
