"""Dense float64 tensors with define-by-run reverse-mode differentiation.

Only the operators the segmentation network and its losses need are provided.
There is no general broadcasting: elementwise binary ops require identical
shapes, and the only implicit expansion is the per-channel bias inside
``conv2d``.
"""
from __future__ import annotations

import hashlib
import threading
from contextlib import contextmanager
from dataclasses import dataclass, field
from typing import Callable, Iterable, Sequence

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view
from scipy.special import expit

__all__ = [
    "Tensor",
    "ShapeError",
    "no_grad",
    "conv2d",
    "relu",
    "sub_abs",
    "add",
    "sub",
    "mul",
    "div",
    "mul_scalar",
    "add_scalar",
    "sum",
    "mean",
    "sigmoid",
    "log_sigmoid",
    "log",
    "clip",
    "l2_norm",
    "maxpool2",
    "avgpool_window",
    "upsample2",
    "backward",
    "gradcheck",
    "GradcheckReport",
]

# regularizer for the norm derivative at zero distance
NORM_EPS = 1e-12

_state = threading.local()


class ShapeError(ValueError):
    """Raised when operand shapes violate an operator's contract."""


def _grad_enabled() -> bool:
    return getattr(_state, "grad_enabled", True)


@contextmanager
def no_grad():
    """Disable graph recording in the current thread."""
    prev = _grad_enabled()
    _state.grad_enabled = False
    try:
        yield
    finally:
        _state.grad_enabled = prev


class Tensor:
    """N-d array of doubles plus an optional accumulated gradient.

    Non-leaf tensors remember their parents and a closure that maps the
    gradient of the output to gradients of each parent.
    """

    __slots__ = ("data", "grad", "requires_grad", "parents", "backward_fn", "op")

    def __init__(self, data, requires_grad: bool = False, parents: tuple = (),
                 backward_fn: Callable | None = None, op: str = "leaf"):
        self.data = np.asarray(data, dtype=np.float64)
        self.requires_grad = bool(requires_grad)
        self.grad = np.zeros_like(self.data) if self.requires_grad and not parents else None
        self.parents = parents
        self.backward_fn = backward_fn
        self.op = op

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def size(self) -> int:
        return self.data.size

    @property
    def is_leaf(self) -> bool:
        return not self.parents

    def item(self) -> float:
        return float(self.data)

    def numpy(self) -> np.ndarray:
        return self.data

    def zero_grad(self) -> None:
        if self.grad is None:
            self.grad = np.zeros_like(self.data)
        else:
            self.grad.fill(0.0)

    def detach(self) -> "Tensor":
        return Tensor(self.data)

    def backward(self, on_visit: Callable[["Tensor"], None] | None = None) -> None:
        backward(self, on_visit=on_visit)

    def __repr__(self) -> str:
        return f"Tensor(shape={self.shape}, op={self.op}, requires_grad={self.requires_grad})"

    def __add__(self, other):
        if isinstance(other, Tensor):
            return add(self, other)
        return add_scalar(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        if isinstance(other, Tensor):
            return sub(self, other)
        return add_scalar(self, -other)

    def __rsub__(self, other):
        return add_scalar(mul_scalar(self, -1.0), other)

    def __mul__(self, other):
        if isinstance(other, Tensor):
            return mul(self, other)
        return mul_scalar(self, other)

    __rmul__ = __mul__

    def __truediv__(self, other):
        if isinstance(other, Tensor):
            return div(self, other)
        return mul_scalar(self, 1.0 / other)

    def __neg__(self):
        return mul_scalar(self, -1.0)


def _make(data: np.ndarray, parents: Sequence[Tensor], backward_fn, op: str) -> Tensor:
    if _grad_enabled() and any(p.requires_grad for p in parents):
        return Tensor(data, requires_grad=True, parents=tuple(parents),
                      backward_fn=backward_fn, op=op)
    return Tensor(data, op=op)


def _record_branch(decision: np.ndarray) -> None:
    """Log a nondifferentiable op's discrete choice while gradcheck is probing."""
    log = getattr(_state, "branch_log", None)
    if log is not None:
        log.update(np.ascontiguousarray(decision).tobytes())


def _check_same(a: Tensor, b: Tensor, op: str) -> None:
    if a.shape != b.shape:
        raise ShapeError(f"{op}: operand shapes differ: {a.shape} vs {b.shape}")


# ---------------------------------------------------------------------------
# elementwise


def add(a: Tensor, b: Tensor) -> Tensor:
    _check_same(a, b, "add")
    return _make(a.data + b.data, (a, b), lambda g: (g, g), "add")


def sub(a: Tensor, b: Tensor) -> Tensor:
    _check_same(a, b, "sub")
    return _make(a.data - b.data, (a, b), lambda g: (g, -g), "sub")


def mul(a: Tensor, b: Tensor) -> Tensor:
    _check_same(a, b, "mul")
    ad, bd = a.data, b.data
    return _make(ad * bd, (a, b), lambda g: (g * bd, g * ad), "mul")


def div(a: Tensor, b: Tensor) -> Tensor:
    _check_same(a, b, "div")
    ad, bd = a.data, b.data
    out = ad / bd
    return _make(out, (a, b), lambda g: (g / bd, -g * out / bd), "div")


def mul_scalar(a: Tensor, s: float) -> Tensor:
    s = float(s)
    return _make(a.data * s, (a,), lambda g: (g * s,), "mul_scalar")


def add_scalar(a: Tensor, s: float) -> Tensor:
    return _make(a.data + float(s), (a,), lambda g: (g,), "add_scalar")


def relu(x: Tensor) -> Tensor:
    mask = x.data > 0
    _record_branch(mask)
    return _make(np.where(mask, x.data, 0.0), (x,), lambda g: (g * mask,), "relu")


def sub_abs(a: Tensor, b: Tensor) -> Tensor:
    """|a - b| elementwise; the subgradient at a == b is zero."""
    _check_same(a, b, "sub_abs")
    diff = a.data - b.data
    sgn = np.sign(diff)
    _record_branch(sgn)
    return _make(np.abs(diff), (a, b), lambda g: (g * sgn, -g * sgn), "sub_abs")


def sigmoid(x: Tensor) -> Tensor:
    out = expit(x.data)
    return _make(out, (x,), lambda g: (g * out * (1.0 - out),), "sigmoid")


def log_sigmoid(x: Tensor) -> Tensor:
    """log(sigmoid(x)) without forming 1 - sigmoid for large inputs."""
    xd = x.data
    return _make(-np.logaddexp(0.0, -xd), (x,), lambda g: (g * expit(-xd),), "log_sigmoid")


def log(x: Tensor) -> Tensor:
    xd = x.data
    return _make(np.log(xd), (x,), lambda g: (g / xd,), "log")


def clip(x: Tensor, lo: float, hi: float) -> Tensor:
    inside = (x.data >= lo) & (x.data <= hi)
    _record_branch(np.sign(x.data - lo) + np.sign(x.data - hi))
    return _make(np.clip(x.data, lo, hi), (x,), lambda g: (g * inside,), "clip")


# ---------------------------------------------------------------------------
# reductions


def _norm_axis(axis, ndim: int):
    if axis is None:
        return tuple(range(ndim))
    if isinstance(axis, int):
        axis = (axis,)
    return tuple(a % ndim for a in axis)


def sum(a: Tensor, axis=None) -> Tensor:  # noqa: A001 - mirrors numpy naming
    axes = _norm_axis(axis, a.data.ndim)
    shape = a.shape

    def bw(g):
        return (np.broadcast_to(np.expand_dims(g, axes), shape).copy(),)

    return _make(np.sum(a.data, axis=axes), (a,), bw, "sum")


def mean(a: Tensor, axis=None) -> Tensor:
    axes = _norm_axis(axis, a.data.ndim)
    count = int(np.prod([a.shape[i] for i in axes])) if axes else 1
    return mul_scalar(sum(a, axes), 1.0 / count)


def l2_norm(a: Tensor, axis=None) -> Tensor:
    """Root-sum-square over ``axis``.

    The forward value is the exact norm (zero for a zero input); the backward
    pass divides by ``sqrt(ss + NORM_EPS)`` so the derivative stays finite at
    the origin.
    """
    axes = _norm_axis(axis, a.data.ndim)
    ad = a.data
    ss = np.sum(ad * ad, axis=axes)
    out = np.sqrt(ss)

    def bw(g):
        scale = g / np.sqrt(ss + NORM_EPS)
        return (ad * np.expand_dims(scale, axes),)

    return _make(out, (a,), bw, "l2_norm")


# ---------------------------------------------------------------------------
# spatial ops, N x C x H x W


def _require_4d(x: Tensor, op: str) -> None:
    if x.data.ndim != 4:
        raise ShapeError(f"{op}: expected a 4-D N x C x H x W tensor, got shape {x.shape}")


def conv2d(x: Tensor, weight: Tensor, bias: Tensor | None = None,
           stride: int = 1, padding: int = 0) -> Tensor:
    """Cross-correlation of ``x`` with ``weight`` (Cout x Cin x k x k)."""
    _require_4d(x, "conv2d")
    if weight.data.ndim != 4:
        raise ShapeError(f"conv2d: weight must be Cout x Cin x k x k, got {weight.shape}")
    n, cin, h, w = x.shape
    cout, wcin, k, k2 = weight.shape
    if wcin != cin:
        raise ShapeError(f"conv2d: input has {cin} channels but weight expects {wcin} "
                         f"(input {x.shape}, weight {weight.shape})")
    if k != k2 or k % 2 == 0:
        raise ShapeError(f"conv2d: kernel must be square with odd size, got {k}x{k2}")
    if h + 2 * padding < k or w + 2 * padding < k:
        raise ShapeError(f"conv2d: padded input {h}x{w} (+{padding}) smaller than kernel {k}")
    if bias is not None and bias.shape != (cout,):
        raise ShapeError(f"conv2d: bias shape {bias.shape} does not match {cout} output channels")

    xp = np.pad(x.data, ((0, 0), (0, 0), (padding, padding), (padding, padding))) if padding else x.data
    ho = (h + 2 * padding - k) // stride + 1
    wo = (w + 2 * padding - k) // stride + 1
    win = sliding_window_view(xp, (k, k), axis=(2, 3))[:, :, ::stride, ::stride]
    # rows: (n, ho, wo); columns: (cin, ki, kj)
    cols = win.transpose(0, 2, 3, 1, 4, 5).reshape(n * ho * wo, cin * k * k)
    wmat = weight.data.reshape(cout, -1)
    out = cols @ wmat.T
    if bias is not None:
        out += bias.data
    out = out.reshape(n, ho, wo, cout).transpose(0, 3, 1, 2)

    def bw(g):
        g2 = g.transpose(0, 2, 3, 1).reshape(-1, cout)
        gx = gw = gb = None
        if x.requires_grad:
            dcols = (g2 @ wmat).reshape(n, ho, wo, cin, k, k)
            dxp = np.zeros_like(xp)
            for i in range(k):
                for j in range(k):
                    dxp[:, :, i:i + stride * ho:stride, j:j + stride * wo:stride] += \
                        dcols[:, :, :, :, i, j].transpose(0, 3, 1, 2)
            gx = dxp[:, :, padding:padding + h, padding:padding + w] if padding else dxp
        if weight.requires_grad:
            gw = (g2.T @ cols).reshape(weight.shape)
        if bias is not None and bias.requires_grad:
            gb = g2.sum(axis=0)
        return (gx, gw, gb) if bias is not None else (gx, gw)

    parents = (x, weight, bias) if bias is not None else (x, weight)
    return _make(np.ascontiguousarray(out), parents, bw, "conv2d")


def maxpool2(x: Tensor) -> Tensor:
    """2x2 max pooling, stride 2. Ties go to the first element in row-major window order."""
    _require_4d(x, "maxpool2")
    n, c, h, w = x.shape
    if h % 2 or w % 2:
        raise ShapeError(f"maxpool2: spatial extent must be even, got {h}x{w}")
    blocks = x.data.reshape(n, c, h // 2, 2, w // 2, 2).transpose(0, 1, 2, 4, 3, 5)
    blocks = blocks.reshape(n, c, h // 2, w // 2, 4)
    idx = blocks.argmax(axis=-1)
    _record_branch(idx)
    out = np.take_along_axis(blocks, idx[..., None], axis=-1)[..., 0]

    def bw(g):
        onehot = np.zeros((n, c, h // 2, w // 2, 4))
        np.put_along_axis(onehot, idx[..., None], g[..., None], axis=-1)
        gx = onehot.reshape(n, c, h // 2, w // 2, 2, 2).transpose(0, 1, 2, 4, 3, 5)
        return (gx.reshape(n, c, h, w),)

    return _make(out, (x,), bw, "maxpool2")


def _box_filter(a: np.ndarray, k: int) -> np.ndarray:
    r = k // 2
    ap = np.pad(a, ((0, 0), (0, 0), (r, r), (r, r)))
    return sliding_window_view(ap, (k, k), axis=(2, 3)).sum(axis=(-2, -1)) / (k * k)


def avgpool_window(x: Tensor, k: int) -> Tensor:
    """Same-size k x k mean filter with zero padding and a constant k*k divisor."""
    _require_4d(x, "avgpool_window")
    if k < 1 or k % 2 == 0:
        raise ShapeError(f"avgpool_window: window must be a positive odd integer, got {k}")
    # a zero-padded box filter with constant divisor is its own adjoint
    return _make(_box_filter(x.data, k), (x,), lambda g: (_box_filter(g, k),), "avgpool_window")


def upsample2(x: Tensor) -> Tensor:
    """Nearest-neighbour 2x spatial upsampling."""
    _require_4d(x, "upsample2")
    n, c, h, w = x.shape
    out = np.repeat(np.repeat(x.data, 2, axis=2), 2, axis=3)

    def bw(g):
        return (g.reshape(n, c, h, 2, w, 2).sum(axis=(3, 5)),)

    return _make(out, (x,), bw, "upsample2")


# ---------------------------------------------------------------------------
# backward pass


def _topo_order(root: Tensor) -> list[Tensor]:
    order: list[Tensor] = []
    seen: set[int] = set()
    stack = [(root, False)]
    while stack:
        node, expanded = stack.pop()
        if expanded:
            order.append(node)
            continue
        if id(node) in seen:
            continue
        seen.add(id(node))
        stack.append((node, True))
        for p in node.parents:
            if p.requires_grad and id(p) not in seen:
                stack.append((p, False))
    return order


def backward(loss: Tensor, on_visit: Callable[[Tensor], None] | None = None) -> None:
    """Accumulate d(loss)/d(leaf) into ``.grad`` of every leaf requiring gradients.

    Nodes are processed once each in reverse topological order. ``on_visit``
    is called for every processed node (instrumentation hook).
    """
    if loss.data.ndim != 0 and loss.size != 1:
        raise ShapeError(f"backward: loss must be a scalar, got shape {loss.shape}")
    if not loss.requires_grad:
        return
    grads: dict[int, np.ndarray] = {id(loss): np.ones_like(loss.data)}
    for node in reversed(_topo_order(loss)):
        if on_visit is not None:
            on_visit(node)
        g = grads.pop(id(node), None)
        if g is None:
            continue
        if node.is_leaf:
            if node.grad is None:
                node.grad = np.zeros_like(node.data)
            node.grad += g
            continue
        for parent, pg in zip(node.parents, node.backward_fn(g)):
            if pg is None or not parent.requires_grad:
                continue
            key = id(parent)
            if key in grads:
                grads[key] = grads[key] + pg
            else:
                grads[key] = pg


# ---------------------------------------------------------------------------
# finite-difference verification


@dataclass
class GradcheckReport:
    max_rel_error: float
    passed: bool
    n_checked: int
    n_excluded: int = 0
    excluded: list = field(default_factory=list)

    def __str__(self) -> str:
        status = "PASS" if self.passed else "FAIL"
        return (f"{status} max_rel_err={self.max_rel_error:.3e} "
                f"checked={self.n_checked} excluded={self.n_excluded}")


@contextmanager
def _branch_signature():
    """Collect a digest of every branch decision taken inside the block."""
    prev = getattr(_state, "branch_log", None)
    digest = hashlib.blake2b(digest_size=16)
    _state.branch_log = digest
    try:
        yield digest
    finally:
        _state.branch_log = prev


def gradcheck(fn: Callable[..., Tensor], inputs: Tensor | Sequence[Tensor], h: float = 1e-5,
              tol: float = 1e-5, indices: Iterable[tuple[int, int]] | None = None,
              floor: float = 1e-6, kink_ratio: float = 1e-2) -> GradcheckReport:
    """Compare analytic gradients of scalar ``fn(*inputs)`` with central differences.

    The relative error of one entry is ``|a - n| / max(|a|, |n|, floor)``.
    An entry is excluded as a nondifferentiable point when a relu, abs,
    clip or maxpool decision differs between ``x - h``, ``x`` and ``x + h``,
    or when its one-sided differences disagree by more than ``kink_ratio``
    times the larger of them (for kinks outside this module's ops).
    ``indices`` restricts the check to ``(input_index, flat_index)`` pairs.
    """
    if h <= 0:
        raise ValueError("gradcheck: step h must be positive")
    if isinstance(inputs, Tensor):
        inputs = [inputs]
    inputs = list(inputs)
    for t in inputs:
        if not t.requires_grad:
            raise ValueError("gradcheck: every input must require gradients")
        t.zero_grad()
    with _branch_signature() as sig:
        out = fn(*inputs)
    sig0 = sig.digest()
    backward(out)
    analytic = [t.grad.copy() for t in inputs]

    if indices is None:
        indices = [(i, j) for i, t in enumerate(inputs) for j in range(t.size)]

    def f_at(t: Tensor, j: int, delta: float) -> tuple[float, bytes]:
        flat = t.data.reshape(-1)
        old = flat[j]
        flat[j] = old + delta
        try:
            with no_grad(), _branch_signature() as s:
                val = float(fn(*inputs).data)
        finally:
            flat[j] = old
        return val, s.digest()

    f0 = float(out.data)
    worst = 0.0
    checked = 0
    excluded = []
    for i, j in indices:
        t = inputs[i]
        fp, sp = f_at(t, j, h)
        fm, sm = f_at(t, j, -h)
        num = (fp - fm) / (2 * h)
        fwd, bwd = (fp - f0) / h, (f0 - fm) / h
        if sp != sig0 or sm != sig0 or abs(fwd - bwd) > kink_ratio * max(abs(fwd), abs(bwd), floor):
            excluded.append((i, j))
            continue
        a = analytic[i].reshape(-1)[j]
        err = abs(a - num) / max(abs(a), abs(num), floor)
        worst = max(worst, err)
        checked += 1
    return GradcheckReport(worst, worst < tol, checked, len(excluded), excluded)
