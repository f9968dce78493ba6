"""Finite-difference verification suites behind ``msnet gradcheck``."""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from . import model as M
from .autodiff import Tensor
from .losses import LossConfig, LossNetParams, total_loss, total_loss_from_logits

OP_TOL = 1e-5
END_TO_END_TOL = 1e-4
STEP = 1e-5


@dataclass
class CheckResult:
    name: str
    trials: int
    max_rel_error: float
    excluded: int
    passed: bool

    def line(self) -> str:
        status = "PASS" if self.passed else "FAIL"
        return (f"{status} {self.name:<16} trials={self.trials:<4} max_rel_err={self.max_rel_error:.3e} "
                f"excluded={self.excluded}")


def _leaf(rng, shape, low=None, high=None) -> Tensor:
    data = rng.standard_normal(shape) if low is None else rng.uniform(low, high, shape)
    return Tensor(data, requires_grad=True)


def _weighted(out: Tensor, rng) -> Tensor:
    """Contract ``out`` with fixed random weights so every output entry matters."""
    return ad.sum(ad.mul(out, Tensor(rng.standard_normal(out.shape))))


def _op_cases():
    """name -> builder(rng) returning (fn, inputs)."""

    def unary(op, shape=(1, 2, 4, 4), low=None, high=None):
        def build(rng):
            x = _leaf(rng, shape, low, high)
            r = Tensor(rng.standard_normal(op(Tensor(x.data)).shape))
            return (lambda t: ad.sum(ad.mul(op(t), r))), [x]
        return build

    def binary(op, low=None, high=None):
        def build(rng):
            a, b = _leaf(rng, (2, 3)), _leaf(rng, (2, 3), low, high)
            r = Tensor(rng.standard_normal((2, 3)))
            return (lambda x, y: ad.sum(ad.mul(op(x, y), r))), [a, b]
        return build

    def conv(stride, padding):
        def build(rng):
            x = _leaf(rng, (1, 2, 4, 4))
            w = _leaf(rng, (3, 2, 3, 3))
            b = _leaf(rng, (3,))
            out_shape = ad.conv2d(Tensor(x.data), Tensor(w.data), Tensor(b.data), stride, padding).shape
            r = Tensor(rng.standard_normal(out_shape))
            return (lambda x, w, b: ad.sum(ad.mul(ad.conv2d(x, w, b, stride, padding), r))), [x, w, b]
        return build

    def reduction(op):
        def build(rng):
            x = _leaf(rng, (2, 3, 4))
            r = Tensor(rng.standard_normal((2,)))
            return (lambda t: ad.sum(ad.mul(op(t), r))), [x]
        return build

    return {
        "conv2d": conv(1, 1),
        "conv2d_stride2": conv(2, 1),
        "relu": unary(ad.relu),
        "sub_abs": binary(ad.sub_abs),
        "add": binary(ad.add),
        "sub": binary(ad.sub),
        "mul": binary(ad.mul),
        "div": binary(ad.div, 0.5, 2.0),
        "mul_scalar": unary(lambda t: ad.mul_scalar(t, -1.7)),
        "add_scalar": unary(lambda t: ad.add_scalar(t, 0.3)),
        "sum": reduction(lambda t: ad.sum(t, axis=(1, 2))),
        "mean": reduction(lambda t: ad.mean(t, axis=(1, 2))),
        "l2_norm": reduction(lambda t: ad.l2_norm(t, axis=(1, 2))),
        "sigmoid": unary(ad.sigmoid),
        "log_sigmoid": unary(ad.log_sigmoid),
        "log": unary(ad.log, low=0.1, high=2.0),
        "clip": unary(lambda t: ad.clip(t, -0.5, 0.5)),
        "maxpool2": unary(ad.maxpool2),
        "avgpool_window": unary(lambda t: ad.avgpool_window(t, 3)),
        "upsample2": unary(ad.upsample2, shape=(1, 2, 2, 2)),
    }


OP_NAMES = tuple(_op_cases())


def check_ops(trials: int = 100, seed: int = 0, names=None) -> list[CheckResult]:
    results = []
    for idx, (name, build) in enumerate(_op_cases().items()):
        if names is not None and name not in names:
            continue
        worst, excluded = 0.0, 0
        for trial in range(trials):
            rng = np.random.default_rng([seed, idx, trial])
            fn, inputs = build(rng)
            rep = ad.gradcheck(fn, inputs, h=STEP, tol=OP_TOL)
            worst = max(worst, rep.max_rel_error)
            excluded += rep.n_excluded
        results.append(CheckResult(name, trials, worst, excluded, worst < OP_TOL))
    return results


def _random_pred(rng, shape) -> np.ndarray:
    # away from the log clamp boundaries
    return rng.uniform(0.05, 0.95, shape)


def _random_mask(rng, size: int) -> np.ndarray:
    yy, xx = np.mgrid[0:size, 0:size]
    cy, cx = rng.uniform(0.3 * size, 0.7 * size, 2)
    r = rng.uniform(0.15, 0.3) * size
    return (np.hypot(yy - cy, xx - cx) < r).astype(np.float64)[None, None]


def check_loss(trials: int = 50, seed: int = 0, size: int = 32, n_entries: int = 50) -> CheckResult:
    """total_loss gradient with respect to the prediction map."""
    cfg = LossConfig.for_input_size(64)
    lossnet = LossNetParams.create(seed)
    worst, excluded = 0.0, 0
    for trial in range(trials):
        rng = np.random.default_rng([seed, 100, trial])
        gt = _random_mask(rng, size)
        pred = Tensor(_random_pred(rng, gt.shape), requires_grad=True)
        idx = [(0, int(j)) for j in rng.choice(pred.size, size=min(n_entries, pred.size), replace=False)]
        rep = ad.gradcheck(lambda p: total_loss(p, gt, lossnet, cfg).total, pred, h=STEP,
                           tol=END_TO_END_TOL, indices=idx)
        worst = max(worst, rep.max_rel_error)
        excluded += rep.n_excluded
    return CheckResult("total_loss/pred", trials, worst, excluded, worst < END_TO_END_TOL)


def check_model(trials: int = 50, seed: int = 0, n_params: int = 50, channels: int = 4,
                input_size: int = 32) -> CheckResult:
    """End-to-end total_loss gradient with respect to a random subsample of parameters."""
    worst, excluded = 0.0, 0
    for trial in range(trials):
        rng = np.random.default_rng([seed, 200, trial])
        mcfg = M.ModelConfig(input_size=input_size, channels=channels, pyramid_depth=5,
                             seed=int(rng.integers(2**31)))
        lcfg = LossConfig.for_input_size(input_size)
        params = M.init_params(mcfg)
        # nonzero biases so every bias gradient path is exercised
        for name, t in params.items():
            if name.endswith(".bias"):
                t.data[:] = rng.normal(0.0, 0.05, t.shape)
        names = list(params)
        image = Tensor(rng.uniform(0, 1, (1, 3, input_size, input_size)))
        gt = _random_mask(rng, input_size)
        lossnet = LossNetParams.create(seed)
        flat = [(i, j) for i, n in enumerate(names) for j in range(params[n].size)]
        pick = rng.choice(len(flat), size=n_params, replace=False)
        idx = [flat[k] for k in pick]

        def fn(*tensors):
            p = dict(zip(names, tensors))
            return total_loss_from_logits(M.forward_logits(image, mcfg, p), gt, lossnet, lcfg).total

        rep = ad.gradcheck(fn, [params[n] for n in names], h=STEP, tol=END_TO_END_TOL, indices=idx)
        worst = max(worst, rep.max_rel_error)
        excluded += rep.n_excluded
    return CheckResult("total_loss/params", trials, worst, excluded, worst < END_TO_END_TOL)


def run(scope: str, trials: int | None = None, seed: int = 0) -> list[CheckResult]:
    if scope == "ops":
        return check_ops(trials or 100, seed)
    if scope == "loss":
        return [check_loss(trials or 50, seed)]
    if scope == "model":
        return [check_model(trials or 50, seed)]
    raise ValueError(f"unknown gradcheck scope {scope!r} (ops, loss, model)")
