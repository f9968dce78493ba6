"""Training objective: boundary-weighted BCE + weighted IoU + frozen feature-network loss.

Batched inputs are reduced per image first and then averaged over the batch,
so for a single image every term equals its textbook formula.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor

LOSSNET_WIDTHS = (8, 16, 32, 64)


def default_pool_k(input_size: int) -> int:
    """Nearest odd integer to 31 * input_size / 352, at least 3."""
    target = 31.0 * input_size / 352.0
    k = 2 * int(np.floor((target - 1.0) / 2.0 + 0.5)) + 1
    return max(3, k)


@dataclass(frozen=True)
class LossConfig:
    weight_gain: float = 5.0
    pool_k: int = 5
    lossnet_seed: int = 0
    lossnet_levels: int = 4
    eps: float = 1e-7

    def __post_init__(self):
        if self.pool_k < 3 or self.pool_k % 2 == 0:
            raise ValueError(f"pool_k must be odd and >= 3, got {self.pool_k}")
        if self.lossnet_levels != 4:
            raise ValueError("lossnet_levels is fixed at 4")
        if not 0 < self.eps < 0.5:
            raise ValueError(f"eps must be in (0, 0.5), got {self.eps}")

    @classmethod
    def for_input_size(cls, input_size: int, **kw) -> "LossConfig":
        return cls(pool_k=default_pool_k(input_size), **kw)


@dataclass(frozen=True)
class LossNetParams:
    """Four frozen conv3x3 stages; the tensors never require gradients."""

    weights: tuple
    biases: tuple

    @classmethod
    def create(cls, seed: int = 0) -> "LossNetParams":
        rng = np.random.default_rng(seed)
        weights, biases = [], []
        cin = 1
        for width in LOSSNET_WIDTHS:
            w = rng.standard_normal((width, cin, 3, 3)) * np.sqrt(2.0 / (cin * 9))
            w.setflags(write=False)
            b = np.zeros(width)
            b.setflags(write=False)
            weights.append(Tensor(w))
            biases.append(Tensor(b))
            cin = width
        return cls(tuple(weights), tuple(biases))


def _check_binary(gt: np.ndarray) -> None:
    if not np.all((gt == 0) | (gt == 1)):
        raise ValueError("ground truth must be binary (values 0 or 1)")


def _data(x) -> np.ndarray:
    return x.data if isinstance(x, Tensor) else np.asarray(x, dtype=np.float64)


def pixel_weight_map(gt, cfg: LossConfig) -> np.ndarray:
    """1 + gain * |boxmean(gt) - gt|: heavier weights in a band around object edges."""
    g = _data(gt)
    _check_binary(g)
    pooled = ad.avgpool_window(Tensor(g), cfg.pool_k).data
    return 1.0 + cfg.weight_gain * np.abs(pooled - g)


def _per_image_sum(x: Tensor) -> Tensor:
    return ad.sum(x, axis=(1, 2, 3))


def _check_shapes(pred: Tensor, gt: np.ndarray, what: str) -> None:
    if pred.shape != gt.shape:
        raise ad.ShapeError(f"{what}: prediction {pred.shape} and ground truth {gt.shape} differ")
    if pred.data.ndim != 4:
        raise ad.ShapeError(f"{what}: expected N x 1 x H x W maps, got {pred.shape}")


def weighted_bce(pred: Tensor, gt, cfg: LossConfig, weight: np.ndarray | None = None,
                 logits: Tensor | None = None) -> Tensor:
    """Pixel-weighted binary cross-entropy with probabilities clamped to [eps, 1 - eps].

    When the ``logits`` behind ``pred`` are given, the log-probabilities come
    from them directly (clamped to the same range), which avoids the
    cancellation in ``1 - pred`` for confident pixels.
    """
    g = _data(gt)
    _check_shapes(pred, g, "weighted_bce")
    w = pixel_weight_map(g, cfg) if weight is None else weight
    if logits is None:
        p = ad.clip(pred, cfg.eps, 1.0 - cfg.eps)
        log_p, log_q = ad.log(p), ad.log(1.0 - p)
    else:
        lo, hi = np.log(cfg.eps), np.log1p(-cfg.eps)
        log_p = ad.clip(ad.log_sigmoid(logits), lo, hi)
        log_q = ad.clip(ad.log_sigmoid(ad.mul_scalar(logits, -1.0)), lo, hi)
    ll = ad.add(ad.mul(Tensor(g), log_p), ad.mul(Tensor(1.0 - g), log_q))
    per_image = ad.div(_per_image_sum(ad.mul(Tensor(w), ll)), Tensor(w.sum(axis=(1, 2, 3))))
    return ad.mul_scalar(ad.mean(per_image), -1.0)


def weighted_iou(pred: Tensor, gt, cfg: LossConfig, weight: np.ndarray | None = None) -> Tensor:
    g = _data(gt)
    _check_shapes(pred, g, "weighted_iou")
    w = pixel_weight_map(g, cfg) if weight is None else weight
    inter = _per_image_sum(ad.mul(Tensor(w * g), pred))
    union = ad.sub(ad.add(_per_image_sum(ad.mul(Tensor(w), pred)), Tensor((w * g).sum(axis=(1, 2, 3)))),
                   inter)
    ratio = ad.div(ad.add_scalar(inter, 1.0), ad.add_scalar(union, 1.0))
    return ad.mean(1.0 - ratio)


def lossnet_features(x, params: LossNetParams) -> list[Tensor]:
    x = x if isinstance(x, Tensor) else Tensor(x)
    h, w = x.shape[2:]
    if h % 16 or w % 16:
        raise ad.ShapeError(f"lossnet_features: spatial size {h}x{w} must be divisible by 16")
    feats = []
    for wt, b in zip(params.weights, params.biases):
        x = ad.maxpool2(ad.relu(ad.conv2d(x, wt, b, 1, 1)))
        feats.append(x)
    return feats


def feature_loss(pred, gt, params: LossNetParams, cfg: LossConfig | None = None) -> Tensor:
    """Sum over the four levels of the Euclidean distance between feature maps.

    Each level's distance is divided by the square root of its element count
    (a root-mean-square distance) so the term stays on the scale of the
    pixel-averaged losses regardless of map size.
    """
    fp = lossnet_features(pred, params)
    fg = lossnet_features(gt, params)
    total = None
    for a, b in zip(fp, fg):
        per_image = ad.l2_norm(ad.sub(a, b), axis=(1, 2, 3))
        term = ad.mul_scalar(ad.mean(per_image), 1.0 / np.sqrt(a.size // a.shape[0]))
        total = term if total is None else ad.add(total, term)
    return total


@dataclass
class LossBreakdown:
    total: Tensor
    wiou: float
    wbce: float
    lf: float

    def as_dict(self) -> dict:
        return {"total": float(self.total.data), "wiou": self.wiou, "wbce": self.wbce, "lf": self.lf}


def total_loss(pred: Tensor, gt, lossnet: LossNetParams | None, cfg: LossConfig,
               lossnet_enabled: bool = True, logits: Tensor | None = None) -> LossBreakdown:
    g = _data(gt)
    w = pixel_weight_map(g, cfg)
    l_iou = weighted_iou(pred, g, cfg, w)
    l_bce = weighted_bce(pred, g, cfg, w, logits)
    total = ad.add(l_iou, l_bce)
    lf = 0.0
    if lossnet_enabled:
        if lossnet is None:
            raise ValueError("lossnet parameters required when the feature loss is enabled")
        l_f = feature_loss(pred, g, lossnet, cfg)
        total = ad.add(total, l_f)
        lf = float(l_f.data)
    return LossBreakdown(total, float(l_iou.data), float(l_bce.data), lf)


def total_loss_from_logits(logits: Tensor, gt, lossnet: LossNetParams | None, cfg: LossConfig,
                           lossnet_enabled: bool = True) -> LossBreakdown:
    """``total_loss`` of ``sigmoid(logits)``, with the cross-entropy taken from the logits."""
    return total_loss(ad.sigmoid(logits), gt, lossnet, cfg, lossnet_enabled, logits)
