"""Dense tensor engine with reverse-mode automatic differentiation.

Design notes:

* Values are numpy arrays (float32 by default, float64 for verification
  runs); the tape, the operations and all gradients are implemented here.
* The graph is dynamic: a ``GradTape`` records every op output in creation
  order, which is already a topological order, and ``backward`` walks that
  list once in reverse. A tape is one-shot.
* Tensors never have empty shape: scalars are shape ``(1,)``.
* Ops executed without an active tape run forward-only, so frozen-weight
  inference never allocates graph state.

A lightweight MAC counter rides along: ``flop_scope()`` opens a counting
scope and every multiply-heavy op reports its multiply-accumulate count per
op kind. Scopes nest LIFO and parents include child counts.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from numpy.lib.stride_tricks import as_strided
from typing import Callable, Optional, Sequence

import numpy as np

from .errors import ShapeError, StateError

DEFAULT_DTYPE = np.float32

_TAPE_STACK: list["GradTape"] = []
_FLOP_STACK: list["FlopReport"] = []


# ---------------------------------------------------------------------------
# FLOP accounting


@dataclass
class FlopReport:
    """Multiply-accumulate counts keyed by op kind, gathered in one scope."""

    macs: dict[str, int] = field(default_factory=dict)

    def add(self, kind: str, n: int) -> None:
        self.macs[kind] = self.macs.get(kind, 0) + int(n)

    def get(self, kind: str) -> int:
        return self.macs.get(kind, 0)

    @property
    def total(self) -> int:
        return sum(self.macs.values())

    def merged(self, other: "FlopReport") -> "FlopReport":
        out = FlopReport(dict(self.macs))
        for k, v in other.macs.items():
            out.add(k, v)
        return out


def begin_flop_scope() -> FlopReport:
    report = FlopReport()
    _FLOP_STACK.append(report)
    return report


def end_flop_scope(report: FlopReport) -> FlopReport:
    if not _FLOP_STACK or _FLOP_STACK[-1] is not report:
        raise StateError("flop scopes must close in LIFO order")
    _FLOP_STACK.pop()
    return report


class flop_scope:
    """``with flop_scope() as report:`` counts MACs of ops run inside."""

    def __enter__(self) -> FlopReport:
        self._report = begin_flop_scope()
        return self._report

    def __exit__(self, exc_type, exc, tb) -> None:
        if _FLOP_STACK and _FLOP_STACK[-1] is self._report:
            end_flop_scope(self._report)


def record_macs(kind: str, n: int) -> None:
    if _FLOP_STACK:
        for scope in _FLOP_STACK:
            scope.add(kind, n)


# ---------------------------------------------------------------------------
# Tape and tensor


class GradTape:
    """Ordered record of op outputs; replayed in reverse by ``backward``."""

    def __init__(self, mode: str = "default"):
        self.nodes: list["Tensor"] = []
        self.mode = mode
        self.consumed = False

    def __enter__(self) -> "GradTape":
        _TAPE_STACK.append(self)
        return self

    def __exit__(self, exc_type, exc, tb) -> None:
        if not _TAPE_STACK or _TAPE_STACK[-1] is not self:
            raise StateError("grad tapes must close in LIFO order")
        _TAPE_STACK.pop()

    def backward(self, loss: "Tensor") -> None:
        """Populate ``grad`` on every tensor reachable from ``loss``."""
        if self.consumed:
            raise StateError("tape already consumed by a previous backward pass")
        if loss.data.size != 1:
            raise ShapeError("backward", loss.shape, detail="loss must be scalar-shaped")
        self.consumed = True
        loss.grad = np.ones_like(loss.data)
        for node in reversed(self.nodes):
            if node.grad is None or node._backward is None:
                continue
            grads = node._backward(node.grad)
            for inp, g in zip(node._inputs, grads):
                if g is None or not inp.requires_grad:
                    continue
                if inp.grad is None:
                    inp.grad = g.astype(inp.data.dtype, copy=True)
                else:
                    inp.grad += g
        # free graph references so intermediate buffers can be collected
        for node in self.nodes:
            node._inputs = ()
            node._backward = None
        self.nodes.clear()


def active_tape() -> Optional[GradTape]:
    return _TAPE_STACK[-1] if _TAPE_STACK else None


def backward(loss: "Tensor") -> None:
    """Run reverse-mode AD from a scalar loss recorded on some tape."""
    if loss._tape is None:
        raise StateError("backward: loss was not recorded on any tape")
    loss._tape.backward(loss)


class Tensor:
    """A dense array with optional gradient, the carrier for all values."""

    __slots__ = ("data", "grad", "requires_grad", "name", "_inputs", "_backward", "_tape")

    def __init__(self, data, requires_grad: bool = False, name: Optional[str] = None,
                 dtype=None):
        arr = np.asarray(data, dtype=dtype if dtype is not None else None)
        if arr.dtype not in (np.float32, np.float64):
            arr = arr.astype(DEFAULT_DTYPE)
        if arr.ndim == 0:
            arr = arr.reshape(1)
        self.data: np.ndarray = arr
        self.grad: Optional[np.ndarray] = None
        self.requires_grad = bool(requires_grad)
        self.name = name
        self._inputs: tuple = ()
        self._backward: Optional[Callable] = None
        self._tape: Optional[GradTape] = None

    # -- bookkeeping ------------------------------------------------------

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def size(self) -> int:
        return self.data.size

    @property
    def dtype(self):
        return self.data.dtype

    def item(self) -> float:
        if self.data.size != 1:
            raise ShapeError("item", self.shape, detail="size-1 tensor required")
        return float(self.data.reshape(-1)[0])

    def numpy(self) -> np.ndarray:
        return self.data

    def detach(self) -> "Tensor":
        # treated as a constant downstream
        return Tensor(self.data, requires_grad=False)

    def zero_grad(self) -> None:
        self.grad = None

    def __repr__(self) -> str:
        nm = f" name={self.name}" if self.name else ""
        return f"Tensor(shape={self.shape}, dtype={self.data.dtype}{nm})"

    # -- operator sugar ----------------------------------------------------

    def __add__(self, other):
        return add(self, other)

    def __radd__(self, other):
        return add(self, other)

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return add(neg(self), other)

    def __mul__(self, other):
        return mul(self, other)

    def __rmul__(self, other):
        return mul(self, other)

    def __truediv__(self, other):
        return div(self, other)

    def __neg__(self):
        return neg(self)

    def __matmul__(self, other):
        return matmul(self, other)

    def __getitem__(self, idx):
        return slice_(self, idx)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)

    def transpose(self, *axes):
        if len(axes) == 1 and isinstance(axes[0], (tuple, list)):
            axes = tuple(axes[0])
        return transpose(self, axes if axes else None)

    def sum(self, axis=None, keepdims=False):
        return sum_(self, axis=axis, keepdims=keepdims)

    def mean(self, axis=None, keepdims=False):
        return mean(self, axis=axis, keepdims=keepdims)


def tensor(data, requires_grad: bool = False, name: Optional[str] = None, dtype=None) -> Tensor:
    return Tensor(data, requires_grad=requires_grad, name=name, dtype=dtype)


def zeros(shape, dtype=None, requires_grad: bool = False, name=None) -> Tensor:
    return Tensor(np.zeros(shape, dtype=dtype or DEFAULT_DTYPE), requires_grad, name)


def ones(shape, dtype=None, requires_grad: bool = False, name=None) -> Tensor:
    return Tensor(np.ones(shape, dtype=dtype or DEFAULT_DTYPE), requires_grad, name)


# ---------------------------------------------------------------------------
# op plumbing


def _coerce(x, like: Tensor) -> Tensor:
    if isinstance(x, Tensor):
        return x
    return Tensor(np.asarray(x, dtype=like.data.dtype))


def _result_dtype(*tensors: Tensor):
    return np.result_type(*(t.data.dtype for t in tensors))


def _emit(op: str, out_data: np.ndarray, inputs: Sequence[Tensor],
          backward_fn: Callable) -> Tensor:
    tape = active_tape()
    track = tape is not None and any(t.requires_grad for t in inputs)
    out = Tensor(out_data, requires_grad=track)
    if track:
        out._inputs = tuple(inputs)
        out._backward = backward_fn
        out._tape = tape
        tape.nodes.append(out)
    return out


def _unbroadcast(g: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    """Sum ``g`` down to ``shape`` (inverse of numpy broadcasting)."""
    if g.shape == shape:
        return g
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for ax, dim in enumerate(shape):
        if dim == 1 and g.shape[ax] != 1:
            g = g.sum(axis=ax, keepdims=True)
    return g


# ---------------------------------------------------------------------------
# elementwise ops


def add(a: Tensor, b) -> Tensor:
    a = a if isinstance(a, Tensor) else Tensor(a)
    b = _coerce(b, a)
    try:
        out = a.data + b.data
    except ValueError:
        raise ShapeError("add", a.shape, b.shape)
    return _emit("add", out, (a, b),
                 lambda g: (_unbroadcast(g, a.shape), _unbroadcast(g, b.shape)))


def sub(a: Tensor, b) -> Tensor:
    a = a if isinstance(a, Tensor) else Tensor(a)
    b = _coerce(b, a)
    try:
        out = a.data - b.data
    except ValueError:
        raise ShapeError("sub", a.shape, b.shape)
    return _emit("sub", out, (a, b),
                 lambda g: (_unbroadcast(g, a.shape), _unbroadcast(-g, b.shape)))


def mul(a: Tensor, b) -> Tensor:
    a = a if isinstance(a, Tensor) else Tensor(a)
    b = _coerce(b, a)
    try:
        out = a.data * b.data
    except ValueError:
        raise ShapeError("mul", a.shape, b.shape)
    record_macs("mul", out.size)
    return _emit("mul", out, (a, b),
                 lambda g: (_unbroadcast(g * b.data, a.shape),
                            _unbroadcast(g * a.data, b.shape)))


def div(a: Tensor, b) -> Tensor:
    a = a if isinstance(a, Tensor) else Tensor(a)
    b = _coerce(b, a)
    try:
        out = a.data / b.data
    except ValueError:
        raise ShapeError("div", a.shape, b.shape)
    record_macs("div", out.size)
    return _emit("div", out, (a, b),
                 lambda g: (_unbroadcast(g / b.data, a.shape),
                            _unbroadcast(-g * a.data / (b.data * b.data), b.shape)))


def neg(a: Tensor) -> Tensor:
    return _emit("neg", -a.data, (a,), lambda g: (-g,))


def exp(a: Tensor) -> Tensor:
    out = np.exp(a.data)
    return _emit("exp", out, (a,), lambda g: (g * out,))


def log(a: Tensor) -> Tensor:
    return _emit("log", np.log(a.data), (a,), lambda g: (g / a.data,))


def sqrt(a: Tensor) -> Tensor:
    out = np.sqrt(a.data)
    return _emit("sqrt", out, (a,), lambda g: (g * (0.5 / out),))


def pow_(a: Tensor, p: float) -> Tensor:
    out = a.data ** p
    return _emit("pow", out, (a,), lambda g: (g * p * a.data ** (p - 1),))


def relu(a: Tensor) -> Tensor:
    out = np.maximum(a.data, 0)
    return _emit("relu", out, (a,), lambda g: (g * (a.data > 0),))


def sigmoid(a: Tensor) -> Tensor:
    # stable in both tails
    out = np.empty_like(a.data)
    pos = a.data >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-a.data[pos]))
    ex = np.exp(a.data[~pos])
    out[~pos] = ex / (1.0 + ex)
    return _emit("sigmoid", out, (a,), lambda g: (g * out * (1.0 - out),))


def softplus(a: Tensor) -> Tensor:
    out = np.logaddexp(0.0, a.data)
    def bwd(g):
        s = np.empty_like(a.data)
        pos = a.data >= 0
        s[pos] = 1.0 / (1.0 + np.exp(-a.data[pos]))
        ex = np.exp(a.data[~pos])
        s[~pos] = ex / (1.0 + ex)
        return (g * s,)
    return _emit("softplus", out, (a,), bwd)


def maximum(a: Tensor, b) -> Tensor:
    a = a if isinstance(a, Tensor) else Tensor(a)
    b = _coerce(b, a)
    out = np.maximum(a.data, b.data)
    def bwd(g):
        mask = a.data >= b.data  # ties route to the first argument
        return (_unbroadcast(g * mask, a.shape), _unbroadcast(g * ~mask, b.shape))
    return _emit("maximum", out, (a, b), bwd)


def minimum(a: Tensor, b) -> Tensor:
    a = a if isinstance(a, Tensor) else Tensor(a)
    b = _coerce(b, a)
    out = np.minimum(a.data, b.data)
    def bwd(g):
        mask = a.data <= b.data
        return (_unbroadcast(g * mask, a.shape), _unbroadcast(g * ~mask, b.shape))
    return _emit("minimum", out, (a, b), bwd)


# ---------------------------------------------------------------------------
# reductions


def _restore_axes(g: np.ndarray, shape, axis, keepdims) -> np.ndarray:
    if axis is None:
        return np.broadcast_to(g.reshape((1,) * len(shape)), shape)
    axes = axis if isinstance(axis, tuple) else (axis,)
    if not keepdims:
        for ax in sorted(a % len(shape) for a in axes):
            g = np.expand_dims(g, ax)
    return np.broadcast_to(g, shape)


def sum_(a: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    out = a.data.sum(axis=axis, keepdims=keepdims)
    if out.ndim == 0:
        out = out.reshape(1)
    return _emit("sum", out, (a,),
                 lambda g: (_restore_axes(g.reshape(-1) if axis is None else g,
                                          a.shape, axis, keepdims).astype(a.data.dtype),))


def mean(a: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    out = a.data.mean(axis=axis, keepdims=keepdims)
    if out.ndim == 0:
        out = out.reshape(1)
    count = a.data.size if axis is None else np.prod(
        [a.shape[ax % a.ndim] for ax in (axis if isinstance(axis, tuple) else (axis,))])
    def bwd(g):
        gg = _restore_axes(g.reshape(-1) if axis is None else g, a.shape, axis, keepdims)
        return ((gg / count).astype(a.data.dtype),)
    return _emit("mean", out, (a,), bwd)


def softmax(a: Tensor, axis: int = -1) -> Tensor:
    shifted = a.data - a.data.max(axis=axis, keepdims=True)
    e = np.exp(shifted)
    out = e / e.sum(axis=axis, keepdims=True)
    def bwd(g):
        dot = (g * out).sum(axis=axis, keepdims=True)
        return ((g - dot) * out,)
    return _emit("softmax", out, (a,), bwd)


# ---------------------------------------------------------------------------
# shape ops


def reshape(a: Tensor, shape) -> Tensor:
    shape = tuple(shape)
    try:
        out = a.data.reshape(shape)
    except ValueError:
        raise ShapeError("reshape", a.shape, shape)
    return _emit("reshape", out, (a,), lambda g: (g.reshape(a.shape),))


def transpose(a: Tensor, axes=None) -> Tensor:
    out = np.transpose(a.data, axes)
    if axes is None:
        inv = None
    else:
        inv = tuple(np.argsort(axes))
    return _emit("transpose", out, (a,), lambda g: (np.transpose(g, inv),))


def broadcast_to(a: Tensor, shape) -> Tensor:
    shape = tuple(shape)
    try:
        out = np.broadcast_to(a.data, shape).copy()
    except ValueError:
        raise ShapeError("broadcast", a.shape, shape)
    return _emit("broadcast", out, (a,), lambda g: (_unbroadcast(g, a.shape),))


def concat(tensors: Sequence[Tensor], axis: int = 0) -> Tensor:
    tensors = list(tensors)
    base = tensors[0]
    for t in tensors[1:]:
        if len(t.shape) != len(base.shape):
            raise ShapeError("concat", base.shape, t.shape)
    out = np.concatenate([t.data for t in tensors], axis=axis)
    sizes = [t.shape[axis] for t in tensors]
    def bwd(g):
        grads, start = [], 0
        for s in sizes:
            sl = [slice(None)] * g.ndim
            sl[axis] = slice(start, start + s)
            grads.append(g[tuple(sl)])
            start += s
        return tuple(grads)
    return _emit("concat", out, tensors, bwd)


def slice_(a: Tensor, idx) -> Tensor:
    out = a.data[idx]
    if out.ndim == 0:
        out = out.reshape(1)
        scalar = True
    else:
        scalar = False
    def bwd(g):
        full = np.zeros_like(a.data)
        full[idx] = g.reshape(()) if scalar else g
        return (full,)
    return _emit("slice", np.ascontiguousarray(out), (a,), bwd)


# ---------------------------------------------------------------------------
# matmul


def matmul(a: Tensor, b: Tensor, flop_kind: str = "matmul") -> Tensor:
    if a.ndim < 2 or b.ndim < 2:
        raise ShapeError("matmul", a.shape, b.shape, detail="rank >= 2 required")
    if a.shape[-1] != b.shape[-2]:
        raise ShapeError("matmul", a.shape, b.shape)
    try:
        out = a.data @ b.data
    except ValueError:
        raise ShapeError("matmul", a.shape, b.shape)
    m, k, n = a.shape[-2], a.shape[-1], b.shape[-1]
    batch = int(np.prod(out.shape[:-2])) if out.ndim > 2 else 1
    record_macs(flop_kind, batch * m * k * n)
    def bwd(g):
        ga = g @ np.swapaxes(b.data, -1, -2)
        gb = np.swapaxes(a.data, -1, -2) @ g
        return (_unbroadcast(ga, a.shape), _unbroadcast(gb, b.shape))
    return _emit("matmul", out, (a, b), bwd)


# ---------------------------------------------------------------------------
# spatial ops (CHW layout, batch size fixed at 1 by design)


def _im2col(xp: np.ndarray, kh: int, kw: int, oh: int, ow: int,
            sh: int, sw: int, dh: int = 1, dw: int = 1) -> np.ndarray:
    """View a padded CHW array as (C, kh, kw, oh, ow) patches, then copy."""
    c = xp.shape[0]
    s0, s1, s2 = xp.strides
    view = as_strided(xp, shape=(c, kh, kw, oh, ow),
                      strides=(s0, s1 * dh, s2 * dw, s1 * sh, s2 * sw))
    return np.ascontiguousarray(view)


def _col2im(cols: np.ndarray, xp_shape, kh, kw, oh, ow, sh, sw, dh=1, dw=1) -> np.ndarray:
    """Adjoint of ``_im2col``: scatter-add patches back into a padded array."""
    out = np.zeros(xp_shape, dtype=cols.dtype)
    for ki in range(kh):
        for kj in range(kw):
            out[:, ki * dh: ki * dh + sh * oh: sh,
                kj * dw: kj * dw + sw * ow: sw] += cols[:, ki, kj]
    return out


def _conv_out_size(size: int, k: int, s: int, p: int, d: int = 1) -> int:
    return (size + 2 * p - d * (k - 1) - 1) // s + 1


def conv2d(x: Tensor, w: Tensor, b: Optional[Tensor], stride=1, padding=0,
           dilation=1) -> Tensor:
    """Cross-correlation style convolution on a CHW input.

    ``w`` is (out_ch, in_ch, kh, kw); ``b`` is (out_ch,) or None.
    """
    if x.ndim != 3 or w.ndim != 4:
        raise ShapeError("conv2d", x.shape, w.shape, detail="CHW input, OIHW weight")
    cin, h, wid = x.shape
    cout, cin_w, kh, kw = w.shape
    if cin != cin_w:
        raise ShapeError("conv2d", x.shape, w.shape, detail="channel mismatch")
    sh, sw = (stride, stride) if isinstance(stride, int) else stride
    ph, pw = (padding, padding) if isinstance(padding, int) else padding
    dh, dw = (dilation, dilation) if isinstance(dilation, int) else dilation
    oh = _conv_out_size(h, kh, sh, ph, dh)
    ow = _conv_out_size(wid, kw, sw, pw, dw)
    if oh <= 0 or ow <= 0:
        raise ShapeError("conv2d", x.shape, w.shape,
                         detail="spatial size smaller than effective kernel")
    xp = np.pad(x.data, ((0, 0), (ph, ph), (pw, pw))) if (ph or pw) else x.data
    cols = _im2col(xp, kh, kw, oh, ow, sh, sw, dh, dw)  # (cin,kh,kw,oh,ow)
    cols2 = cols.reshape(cin * kh * kw, oh * ow)
    w2 = w.data.reshape(cout, cin * kh * kw)
    out = w2 @ cols2
    if b is not None:
        out = out + b.data[:, None]
    out = out.reshape(cout, oh, ow)
    record_macs("conv", cout * oh * ow * cin * kh * kw)

    inputs = (x, w) if b is None else (x, w, b)

    def bwd(g):
        g2 = g.reshape(cout, oh * ow)
        gw = (g2 @ cols2.T).reshape(w.shape)
        gcols = (w2.T @ g2).reshape(cin, kh, kw, oh, ow)
        gxp = _col2im(gcols, xp.shape, kh, kw, oh, ow, sh, sw, dh, dw)
        gx = gxp[:, ph: ph + h, pw: pw + wid] if (ph or pw) else gxp
        if b is None:
            return (gx, gw)
        return (gx, gw, g2.sum(axis=1))

    return _emit("conv2d", out, inputs, bwd)


def conv_transpose2d(x: Tensor, w: Tensor, b: Optional[Tensor], stride=1,
                     padding=0) -> Tensor:
    """Transposed convolution on CHW input; ``w`` is (in_ch, out_ch, kh, kw)."""
    if x.ndim != 3 or w.ndim != 4:
        raise ShapeError("conv_transpose2d", x.shape, w.shape)
    cin, h, wid = x.shape
    cin_w, cout, kh, kw = w.shape
    if cin != cin_w:
        raise ShapeError("conv_transpose2d", x.shape, w.shape, detail="channel mismatch")
    sh, sw = (stride, stride) if isinstance(stride, int) else stride
    ph, pw = (padding, padding) if isinstance(padding, int) else padding
    oh = (h - 1) * sh - 2 * ph + kh
    ow = (wid - 1) * sw - 2 * pw + kw
    if oh <= 0 or ow <= 0:
        raise ShapeError("conv_transpose2d", x.shape, w.shape, detail="empty output")
    w2 = w.data.reshape(cin, cout * kh * kw)
    x2 = x.data.reshape(cin, h * wid)
    cols = (w2.T @ x2).reshape(cout, kh, kw, h, wid)
    # scatter into the padded output frame, then trim padding
    out_p = _col2im(cols, (cout, oh + 2 * ph, ow + 2 * pw), kh, kw, h, wid, sh, sw)
    out = out_p[:, ph: ph + oh, pw: pw + ow]
    if b is not None:
        out = out + b.data[:, None, None]
    record_macs("deconv", cin * h * wid * cout * kh * kw)

    inputs = (x, w) if b is None else (x, w, b)

    def bwd(g):
        gp = np.pad(g, ((0, 0), (ph, ph), (pw, pw))) if (ph or pw) else g
        gcols = _im2col(gp, kh, kw, h, wid, sh, sw)  # (cout,kh,kw,h,wid)
        gcols2 = gcols.reshape(cout * kh * kw, h * wid)
        gx = (w2 @ gcols2).reshape(x.shape)
        gw = (x2 @ gcols2.T).reshape(cin, cout * kh * kw).reshape(w.shape)
        if b is None:
            return (gx, gw)
        return (gx, gw, g.sum(axis=(1, 2)))

    return _emit("conv_transpose2d", np.ascontiguousarray(out), inputs, bwd)


def max_pool2d(x: Tensor, kernel: int, stride: int) -> Tensor:
    cin, h, wid = x.shape
    oh = (h - kernel) // stride + 1
    ow = (wid - kernel) // stride + 1
    if oh <= 0 or ow <= 0:
        raise ShapeError("max_pool2d", x.shape, detail=f"kernel {kernel} too large")
    s0, s1, s2 = x.data.strides
    win = as_strided(x.data, shape=(cin, oh, ow, kernel, kernel),
                     strides=(s0, s1 * stride, s2 * stride, s1, s2))
    flat = win.reshape(cin, oh, ow, kernel * kernel)
    idx = flat.argmax(axis=3)
    out = np.take_along_axis(flat, idx[..., None], axis=3)[..., 0]

    def bwd(g):
        gx = np.zeros_like(x.data)
        ki, kj = np.divmod(idx, kernel)
        ci, oi, oj = np.meshgrid(np.arange(cin), np.arange(oh), np.arange(ow),
                                 indexing="ij")
        rows = oi * stride + ki
        cols = oj * stride + kj
        np.add.at(gx, (ci.ravel(), rows.ravel(), cols.ravel()), g.ravel())
        return (gx,)

    return _emit("max_pool2d", np.ascontiguousarray(out), (x,), bwd)


def depthwise_xcorr(search: Tensor, template: Tensor) -> Tensor:
    """Per-channel sliding-window correlation, stride 1, no padding.

    search (C, Hs, Ws) x template (C, Ht, Wt) -> (C, Hs-Ht+1, Ws-Wt+1).
    """
    if search.ndim != 3 or template.ndim != 3 or search.shape[0] != template.shape[0]:
        raise ShapeError("depthwise_xcorr", search.shape, template.shape)
    c, hs, ws = search.shape
    _, ht, wt = template.shape
    if ht > hs or wt > ws:
        raise ShapeError("depthwise_xcorr", search.shape, template.shape,
                         detail="template larger than search")
    oh, ow = hs - ht + 1, ws - wt + 1
    s0, s1, s2 = search.data.strides
    win = as_strided(search.data, shape=(c, ht, wt, oh, ow),
                     strides=(s0, s1, s2, s1, s2))
    out = np.einsum("chwij,chw->cij", win, template.data, optimize=True)
    record_macs("xcorr", c * oh * ow * ht * wt)

    def bwd(g):
        gs = np.zeros_like(search.data)
        for ki in range(ht):
            for kj in range(wt):
                gs[:, ki: ki + oh, kj: kj + ow] += template.data[:, ki, kj][:, None, None] * g
        gt = np.einsum("chwij,cij->chw", win, g, optimize=True)
        return (gs, gt)

    return _emit("depthwise_xcorr", np.ascontiguousarray(out), (search, template), bwd)


def scatter_tokens(tokens: Tensor, footprints: Sequence[tuple[int, int, int, int]],
                   grid: int) -> Tensor:
    """Broadcast each token vector over its (r0, r1, c0, c1) cell footprint.

    Footprints must tile the grid exactly once; violations raise.
    """
    n, c = tokens.shape
    if len(footprints) != n:
        raise ShapeError("scatter_tokens", tokens.shape, (len(footprints),))
    coverage = np.zeros((grid, grid), dtype=np.int32)
    for (r0, r1, c0, c1) in footprints:
        coverage[r0:r1, c0:c1] += 1
    if coverage.min() != 1 or coverage.max() != 1:
        raise ShapeError("scatter_tokens", (grid, grid),
                         detail="token footprints must tile the grid exactly once")
    out = np.empty((c, grid, grid), dtype=tokens.data.dtype)
    for i, (r0, r1, c0, c1) in enumerate(footprints):
        out[:, r0:r1, c0:c1] = tokens.data[i][:, None, None]

    def bwd(g):
        gt = np.empty_like(tokens.data)
        for i, (r0, r1, c0, c1) in enumerate(footprints):
            gt[i] = g[:, r0:r1, c0:c1].sum(axis=(1, 2))
        return (gt,)

    return _emit("scatter_tokens", out, (tokens,), bwd)
