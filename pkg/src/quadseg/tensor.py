"""Dense float64 tensors with reverse-mode automatic differentiation.

The design is define-by-run: every training step builds a fresh ``Tape``,
leaf tensors (parameters) are attached with ``Tape.watch``, and forward ops
record a backward rule for each tracked output.  Data tensors that are never
watched stay constants and cost nothing at backward time.

All storage is row-major float64 numpy; every forward kernel is
deterministic, so identical inputs give bit-identical outputs.
"""

from __future__ import annotations

import math
from typing import Callable, Sequence

import numpy as np
from scipy.special import erf

__all__ = [
    "ShapeError",
    "Tensor",
    "Tape",
    "tensor",
    "matmul",
    "add",
    "sub",
    "mul",
    "neg",
    "reshape",
    "transpose",
    "concat",
    "tsum",
    "tmean",
    "softmax_lastdim",
    "log_softmax_lastdim",
    "layer_norm",
    "gelu",
    "relu",
    "leaky_relu",
    "softplus",
    "conv2d",
    "depthwise_conv2d",
    "upsample_bilinear",
    "interp_matrix",
    "finite_diff_check",
    "set_fault_injection",
]

_INV_SQRT2 = 1.0 / math.sqrt(2.0)
_INV_SQRT2PI = 1.0 / math.sqrt(2.0 * math.pi)

# When enabled, one backward rule (gelu) is deliberately perturbed; used by
# the verify command's self-test that the gradient checker catches faults.
_FAULT_INJECTION = False

# Finite checks on every forward op; cheap at desk scale and turns numeric
# blowups into immediate hard errors as required.
FINITE_CHECKS = True


def set_fault_injection(enabled: bool) -> None:
    global _FAULT_INJECTION
    _FAULT_INJECTION = bool(enabled)


class ShapeError(ValueError):
    """Raised when operand shapes are incompatible for an op."""


def _as_array(data) -> np.ndarray:
    arr = np.asarray(data, dtype=np.float64)
    if arr.ndim and not arr.flags["C_CONTIGUOUS"]:
        arr = np.ascontiguousarray(arr)
    return arr


def _check_finite(arr: np.ndarray, opname: str) -> None:
    if FINITE_CHECKS and not np.all(np.isfinite(arr)):
        raise FloatingPointError(f"{opname}: non-finite values in forward output")


class _Node:
    """One recorded operation: parent node ids plus a rule mapping the
    output gradient to per-parent gradients (None for untracked parents)."""

    __slots__ = ("idx", "parents", "backward_fn")

    def __init__(self, idx: int, parents: tuple[int, ...], backward_fn):
        self.idx = idx
        self.parents = parents
        self.backward_fn = backward_fn


class Tensor:
    """Shape + flat row-major float64 buffer + optional tape node."""

    __slots__ = ("data", "node", "tape")

    def __init__(self, data, node: _Node | None = None, tape: "Tape | None" = None):
        self.data = _as_array(data)
        self.node = node
        self.tape = tape

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def size(self) -> int:
        return self.data.size

    def item(self) -> float:
        return float(self.data.item())

    def copy(self) -> "Tensor":
        return Tensor(self.data.copy())

    def detach(self) -> "Tensor":
        return Tensor(self.data)

    def __repr__(self) -> str:
        return f"Tensor(shape={self.shape}, tracked={self.node is not None})"

    # operator sugar; scalars auto-wrap as constants
    def __add__(self, other):
        return add(self, _wrap(other))

    def __radd__(self, other):
        return add(_wrap(other), self)

    def __sub__(self, other):
        return sub(self, _wrap(other))

    def __rsub__(self, other):
        return sub(_wrap(other), self)

    def __mul__(self, other):
        return mul(self, _wrap(other))

    def __rmul__(self, other):
        return mul(_wrap(other), self)

    def __neg__(self):
        return neg(self)

    def __matmul__(self, other):
        return matmul(self, _wrap(other))


def tensor(data) -> Tensor:
    """Constant tensor (no tape node)."""
    return Tensor(data)


def _wrap(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


_ACTIVE_TAPE: "Tape | None" = None


class Tape:
    """Append-only record of one forward pass.

    Usage::

        with Tape() as tape:
            for p in params:
                tape.watch(p)
            loss = forward(...)
            tape.backward(loss)
            g = tape.grad(p)
    """

    def __init__(self):
        self.nodes: list[_Node] = []
        self.grads: list[np.ndarray | None] = []

    def __enter__(self) -> "Tape":
        global _ACTIVE_TAPE
        if _ACTIVE_TAPE is not None:
            raise RuntimeError("nested tapes are not supported")
        _ACTIVE_TAPE = self
        return self

    def __exit__(self, exc_type, exc, tb):
        global _ACTIVE_TAPE
        _ACTIVE_TAPE = None
        return False

    def watch(self, t: Tensor) -> Tensor:
        """Attach a leaf node so gradients w.r.t. ``t`` are tracked."""
        node = _Node(len(self.nodes), (), None)
        self.nodes.append(node)
        t.node = node
        t.tape = self
        return t

    def _record(self, out_data: np.ndarray, parents: Sequence[Tensor],
                backward_fn) -> Tensor:
        ids = tuple(p.node.idx if (p.tape is self and p.node is not None) else -1
                    for p in parents)
        node = _Node(len(self.nodes), ids, backward_fn)
        self.nodes.append(node)
        return Tensor(out_data, node=node, tape=self)

    def backward(self, root: Tensor) -> None:
        """Reverse sweep from a scalar root; gradients accumulate additively
        across fan-out."""
        if root.tape is not self or root.node is None:
            raise ValueError("backward root is not tracked on this tape")
        if root.shape != ():
            raise ValueError(f"backward root must be scalar, got shape {root.shape}")
        grads: list[np.ndarray | None] = [None] * len(self.nodes)
        grads[root.node.idx] = np.ones((), dtype=np.float64)
        for node in reversed(self.nodes):
            g = grads[node.idx]
            if g is None or node.backward_fn is None:
                continue
            parts = node.backward_fn(g)
            for pid, part in zip(node.parents, parts):
                if pid < 0 or part is None:
                    continue
                if grads[pid] is None:
                    grads[pid] = part.copy() if part.base is not None else part
                else:
                    grads[pid] = grads[pid] + part
        self.grads = grads

    def grad(self, t: Tensor) -> np.ndarray:
        """Accumulated gradient for a tracked tensor (zeros if unused)."""
        if t.tape is not self or t.node is None:
            raise ValueError("tensor is not tracked on this tape")
        g = self.grads[t.node.idx] if self.grads else None
        if g is None:
            return np.zeros(t.shape, dtype=np.float64)
        return g


def _tracked(t: Tensor) -> bool:
    return _ACTIVE_TAPE is not None and t.tape is _ACTIVE_TAPE and t.node is not None


def _emit(out_data: np.ndarray, parents: Sequence[Tensor], backward_builder,
          opname: str) -> Tensor:
    """Wrap op output; record on the active tape only if any parent is tracked.

    ``backward_builder`` is called lazily (only when recording) and must
    return the backward closure.
    """
    _check_finite(out_data, opname)
    if _ACTIVE_TAPE is None or not any(_tracked(p) for p in parents):
        return Tensor(out_data)
    return _ACTIVE_TAPE._record(out_data, parents, backward_builder())


def _unbroadcast(g: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    """Sum ``g`` down to ``shape`` (inverse of numpy broadcasting)."""
    if g.shape == shape:
        return g
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for ax, n in enumerate(shape):
        if n == 1 and g.shape[ax] != 1:
            g = g.sum(axis=ax, keepdims=True)
    return g


# ---------------------------------------------------------------------------
# elementwise / structural ops
# ---------------------------------------------------------------------------

def add(a: Tensor, b: Tensor) -> Tensor:
    out = a.data + b.data

    def build():
        ashape, bshape = a.shape, b.shape

        def bwd(g):
            return (_unbroadcast(g, ashape), _unbroadcast(g, bshape))
        return bwd
    return _emit(out, (a, b), build, "add")


def sub(a: Tensor, b: Tensor) -> Tensor:
    out = a.data - b.data

    def build():
        ashape, bshape = a.shape, b.shape

        def bwd(g):
            return (_unbroadcast(g, ashape), _unbroadcast(-g, bshape))
        return bwd
    return _emit(out, (a, b), build, "sub")


def mul(a: Tensor, b: Tensor) -> Tensor:
    out = a.data * b.data

    def build():
        ad, bd = a.data, b.data

        def bwd(g):
            return (_unbroadcast(g * bd, ad.shape), _unbroadcast(g * ad, bd.shape))
        return bwd
    return _emit(out, (a, b), build, "mul")


def neg(a: Tensor) -> Tensor:
    return _emit(-a.data, (a,), lambda: (lambda g: (-g,)), "neg")


def matmul(a: Tensor, b: Tensor) -> Tensor:
    """Matrix product; leading batch dims broadcast."""
    if a.data.ndim < 2 or b.data.ndim < 2:
        raise ShapeError(f"matmul needs >=2-D operands, got {a.shape} @ {b.shape}")
    if a.shape[-1] != b.shape[-2]:
        raise ShapeError(f"matmul inner dims disagree: {a.shape} @ {b.shape}")
    out = np.matmul(a.data, b.data)

    def build():
        ad, bd = a.data, b.data

        def bwd(g):
            ga = _unbroadcast(np.matmul(g, bd.swapaxes(-1, -2)), ad.shape)
            gb = _unbroadcast(np.matmul(ad.swapaxes(-1, -2), g), bd.shape)
            return (ga, gb)
        return bwd
    return _emit(out, (a, b), build, "matmul")


def reshape(a: Tensor, shape: Sequence[int]) -> Tensor:
    shape = tuple(shape)
    out = a.data.reshape(shape)

    def build():
        orig = a.shape

        def bwd(g):
            return (g.reshape(orig),)
        return bwd
    return _emit(out, (a,), build, "reshape")


def transpose(a: Tensor, axes: Sequence[int]) -> Tensor:
    axes = tuple(axes)
    out = np.ascontiguousarray(a.data.transpose(axes))

    def build():
        inv = tuple(np.argsort(axes))

        def bwd(g):
            return (np.ascontiguousarray(g.transpose(inv)),)
        return bwd
    return _emit(out, (a,), build, "transpose")


def concat(parts: Sequence[Tensor], axis: int) -> Tensor:
    out = np.concatenate([p.data for p in parts], axis=axis)

    def build():
        sizes = [p.shape[axis] for p in parts]
        splits = np.cumsum(sizes)[:-1]

        def bwd(g):
            return tuple(np.ascontiguousarray(piece)
                         for piece in np.split(g, splits, axis=axis))
        return bwd
    return _emit(out, tuple(parts), build, "concat")


def tsum(a: Tensor) -> Tensor:
    out = a.data.sum()

    def build():
        shape = a.shape

        def bwd(g):
            return (np.broadcast_to(g, shape).copy(),)
        return bwd
    return _emit(np.asarray(out), (a,), build, "sum")


def tmean(a: Tensor) -> Tensor:
    n = a.size
    out = a.data.mean()

    def build():
        shape = a.shape

        def bwd(g):
            return (np.broadcast_to(g / n, shape).copy(),)
        return bwd
    return _emit(np.asarray(out), (a,), build, "mean")


# ---------------------------------------------------------------------------
# nonlinearities and normalization
# ---------------------------------------------------------------------------

def softmax_lastdim(x: Tensor) -> Tensor:
    """Stable softmax over the last axis; each slice sums to 1."""
    z = x.data - x.data.max(axis=-1, keepdims=True)
    e = np.exp(z)
    s = e / e.sum(axis=-1, keepdims=True)

    def build():
        def bwd(g):
            dot = (g * s).sum(axis=-1, keepdims=True)
            return (s * (g - dot),)
        return bwd
    return _emit(s, (x,), build, "softmax")


def log_softmax_lastdim(x: Tensor) -> Tensor:
    m = x.data.max(axis=-1, keepdims=True)
    z = x.data - m
    lse = np.log(np.exp(z).sum(axis=-1, keepdims=True))
    out = z - lse

    def build():
        soft = np.exp(out)

        def bwd(g):
            return (g - soft * g.sum(axis=-1, keepdims=True),)
        return bwd
    return _emit(out, (x,), build, "log_softmax")


def layer_norm(x: Tensor, gamma: Tensor, beta: Tensor, eps: float = 1e-6) -> Tensor:
    """Normalize the last axis to zero mean / unit variance, then affine."""
    if eps <= 0:
        raise ValueError("layer_norm eps must be positive")
    mu = x.data.mean(axis=-1, keepdims=True)
    xc = x.data - mu
    var = (xc * xc).mean(axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = xc * inv
    out = xhat * gamma.data + beta.data

    def build():
        n = x.shape[-1]
        gd = gamma.data

        def bwd(g):
            gxhat = g * gd
            # standard layernorm backward over the normalized axis
            gx = inv * (gxhat
                        - gxhat.mean(axis=-1, keepdims=True)
                        - xhat * (gxhat * xhat).mean(axis=-1, keepdims=True))
            axes = tuple(range(g.ndim - 1))
            ggamma = (g * xhat).sum(axis=axes) if g.ndim > 1 else g * xhat
            gbeta = g.sum(axis=axes) if g.ndim > 1 else g.copy()
            return (gx, ggamma, gbeta)
        return bwd
    return _emit(out, (x, gamma, beta), build, "layer_norm")


def gelu(x: Tensor) -> Tensor:
    """Exact Gaussian-CDF GELU: x * Phi(x), via erf."""
    phi_cdf = 0.5 * (1.0 + erf(x.data * _INV_SQRT2))
    out = x.data * phi_cdf

    def build():
        xd = x.data

        def bwd(g):
            pdf = np.exp(-0.5 * xd * xd) * _INV_SQRT2PI
            d = phi_cdf + xd * pdf
            if _FAULT_INJECTION:
                d = d * 1.01
            return (g * d,)
        return bwd
    return _emit(out, (x,), build, "gelu")


def relu(x: Tensor) -> Tensor:
    out = np.maximum(x.data, 0.0)

    def build():
        mask = x.data > 0.0

        def bwd(g):
            return (g * mask,)
        return bwd
    return _emit(out, (x,), build, "relu")


def leaky_relu(x: Tensor, slope: float = 0.2) -> Tensor:
    out = np.where(x.data > 0.0, x.data, slope * x.data)

    def build():
        d = np.where(x.data > 0.0, 1.0, slope)

        def bwd(g):
            return (g * d,)
        return bwd
    return _emit(out, (x,), build, "leaky_relu")


def softplus(x: Tensor) -> Tensor:
    """log(1 + exp(x)) computed without overflow."""
    out = np.maximum(x.data, 0.0) + np.log1p(np.exp(-np.abs(x.data)))

    def build():
        z = np.exp(-np.abs(x.data))
        sig = np.where(x.data >= 0.0, 1.0 / (1.0 + z), z / (1.0 + z))

        def bwd(g):
            return (g * sig,)
        return bwd
    return _emit(out, (x,), build, "softplus")


# ---------------------------------------------------------------------------
# convolution / resampling
# ---------------------------------------------------------------------------

def _conv_out_size(n: int, k: int, stride: int, pad: int) -> int:
    return (n + 2 * pad - k) // stride + 1


def conv2d(x: Tensor, w: Tensor, stride: int = 1, padding: int = 0) -> Tensor:
    """Direct cross-correlation: x [C_in,H,W], w [C_out,C_in,kh,kw]."""
    cin, h_in, w_in = x.shape
    cout, cin_w, kh, kw = w.shape
    if cin != cin_w:
        raise ShapeError(f"conv2d channel mismatch: input {x.shape}, weight {w.shape}")
    h_out = _conv_out_size(h_in, kh, stride, padding)
    w_out = _conv_out_size(w_in, kw, stride, padding)
    if h_out < 1 or w_out < 1:
        raise ShapeError(
            f"conv2d output would be {h_out}x{w_out} for input {x.shape}, "
            f"kernel {w.shape}, stride {stride}, padding {padding}")
    xp = np.pad(x.data, ((0, 0), (padding, padding), (padding, padding)))
    win = np.lib.stride_tricks.sliding_window_view(xp, (kh, kw), axis=(1, 2))
    win = win[:, ::stride, ::stride]                     # [Cin,Ho,Wo,kh,kw]
    cols = win.transpose(1, 2, 0, 3, 4).reshape(h_out * w_out, cin * kh * kw)
    wmat = w.data.reshape(cout, cin * kh * kw)
    out = (cols @ wmat.T).T.reshape(cout, h_out, w_out)

    def build():
        need_x = _tracked(x)
        cols_saved = np.ascontiguousarray(cols)
        hp, wp = xp.shape[1], xp.shape[2]

        def bwd(g):
            g2 = g.reshape(cout, h_out * w_out)
            gw = (g2 @ cols_saved).reshape(cout, cin, kh, kw)
            gx = None
            if need_x:
                gcols = (g2.T @ wmat).reshape(h_out, w_out, cin, kh, kw)
                gcols = gcols.transpose(2, 3, 4, 0, 1)   # [Cin,kh,kw,Ho,Wo]
                gpad = np.zeros((cin, hp, wp))
                for i in range(kh):
                    for j in range(kw):
                        gpad[:, i:i + stride * h_out:stride,
                             j:j + stride * w_out:stride] += gcols[:, i, j]
                gx = gpad[:, padding:hp - padding, padding:wp - padding] \
                    if padding else gpad
                gx = np.ascontiguousarray(gx)
            return (gx, gw)
        return bwd
    return _emit(out, (x, w), build, "conv2d")


def depthwise_conv2d(x: Tensor, w: Tensor, stride: int = 1, padding: int = 1) -> Tensor:
    """Per-channel convolution: x [C,H,W], w [C,kh,kw]."""
    c, h_in, w_in = x.shape
    cw, kh, kw = w.shape
    if c != cw:
        raise ShapeError(f"depthwise channel mismatch: input {x.shape}, weight {w.shape}")
    h_out = _conv_out_size(h_in, kh, stride, padding)
    w_out = _conv_out_size(w_in, kw, stride, padding)
    if h_out < 1 or w_out < 1:
        raise ShapeError(f"depthwise output would be {h_out}x{w_out}")
    xp = np.pad(x.data, ((0, 0), (padding, padding), (padding, padding)))
    win = np.lib.stride_tricks.sliding_window_view(xp, (kh, kw), axis=(1, 2))
    win = win[:, ::stride, ::stride]                     # [C,Ho,Wo,kh,kw]
    out = np.einsum("chwij,cij->chw", win, w.data, optimize=True)

    def build():
        need_x = _tracked(x)
        win_saved = win
        hp, wp = xp.shape[1], xp.shape[2]
        wd = w.data

        def bwd(g):
            gw = np.einsum("chwij,chw->cij", win_saved, g, optimize=True)
            gx = None
            if need_x:
                gpad = np.zeros((c, hp, wp))
                for i in range(kh):
                    for j in range(kw):
                        gpad[:, i:i + stride * h_out:stride,
                             j:j + stride * w_out:stride] += g * wd[:, i, j][:, None, None]
                gx = gpad[:, padding:hp - padding, padding:wp - padding] \
                    if padding else gpad
                gx = np.ascontiguousarray(gx)
            return (gx, gw)
        return bwd
    return _emit(out, (x, w), build, "depthwise_conv2d")


def interp_matrix(n_in: int, n_out: int) -> np.ndarray:
    """Row-stochastic bilinear interpolation matrix, half-pixel-centers.

    Used by the autodiff upsample op and by plain-array resampling in the
    label machinery, so both share one interpolation convention.
    """
    m = np.zeros((n_out, n_in))
    scale = n_in / n_out
    src = (np.arange(n_out) + 0.5) * scale - 0.5
    i0 = np.floor(src).astype(int)
    t = src - i0
    lo = np.clip(i0, 0, n_in - 1)
    hi = np.clip(i0 + 1, 0, n_in - 1)
    rows = np.arange(n_out)
    np.add.at(m, (rows, lo), 1.0 - t)
    np.add.at(m, (rows, hi), t)
    return m


def upsample_bilinear(x: Tensor, out_h: int, out_w: int) -> Tensor:
    """Bilinear resize of x [C,H,W] with the half-pixel-centers convention."""
    c, h, w = x.shape
    if out_h < h or out_w < w:
        raise ShapeError(f"upsample target {out_h}x{out_w} smaller than input {h}x{w}")
    ay = interp_matrix(h, out_h)                         # [outH, H]
    ax = interp_matrix(w, out_w)                         # [outW, W]
    out = np.einsum("pi,ciw,qw->cpq", ay, x.data, ax, optimize=True)

    def build():
        def bwd(g):
            return (np.einsum("pi,cpq,qw->ciw", ay, g, ax, optimize=True),)
        return bwd
    return _emit(out, (x,), build, "upsample_bilinear")


# ---------------------------------------------------------------------------
# gradient verification
# ---------------------------------------------------------------------------

def finite_diff_check(f: Callable[[Tensor], Tensor], x: Tensor, h: float = 1e-5,
                      coords: Sequence[int] | None = None) -> float:
    """Max relative error between tape gradients and central differences.

    ``f`` must map a Tensor to a scalar Tensor.  ``coords`` restricts the
    check to a subset of flat indices (all coordinates by default).
    """
    if not (1e-7 <= h <= 1e-3):
        raise ValueError(f"finite_diff_check step h={h} outside [1e-7, 1e-3]")
    base = x.data.copy()
    with Tape() as tape:
        xt = Tensor(base.copy())
        tape.watch(xt)
        y = f(xt)
        tape.backward(y)
        grad = tape.grad(xt).ravel()

    flat = base.ravel()
    idxs = range(flat.size) if coords is None else coords
    worst = 0.0
    for i in idxs:
        saved = flat[i]
        flat[i] = saved + h
        yp = f(Tensor(base)).item()
        flat[i] = saved - h
        ym = f(Tensor(base)).item()
        flat[i] = saved
        fd = (yp - ym) / (2.0 * h)
        a, b = grad[i], fd
        err = abs(a - b) / max(1.0, abs(a), abs(b))
        if err > worst:
            worst = err
    return worst
