"""Layer-level building blocks over the tensor engine.

Layout conventions: feature maps are CHW, token matrices are (tokens, dim),
batch size is one by construction. Weights are created Kaiming-uniform from
an explicit generator; biases start at zero.
"""

from __future__ import annotations

from typing import Optional

import numpy as np

from . import tensor as T
from .errors import ShapeError
from .tensor import Tensor


def kaiming_uniform(rng: np.random.Generator, shape, fan_in: int, dtype) -> np.ndarray:
    bound = np.sqrt(6.0 / fan_in)
    return rng.uniform(-bound, bound, size=shape).astype(dtype)


class Module:
    """Parameter container with dotted-name traversal for checkpoints."""

    def __init__(self):
        object.__setattr__(self, "_params", {})
        object.__setattr__(self, "_modules", {})

    def __setattr__(self, key, value):
        if isinstance(value, Tensor):
            self._params[key] = value
        elif isinstance(value, Module):
            self._modules[key] = value
        object.__setattr__(self, key, value)

    def register_parameter(self, name: str, t: Tensor) -> Tensor:
        t.requires_grad = True
        self._params[name] = t
        return t

    def named_parameters(self, prefix: str = ""):
        for name, p in self._params.items():
            yield (f"{prefix}{name}", p)
        for name, mod in self._modules.items():
            yield from mod.named_parameters(prefix=f"{prefix}{name}.")

    def parameters(self) -> list[Tensor]:
        return [p for _, p in self.named_parameters()]

    def state_dict(self) -> dict[str, np.ndarray]:
        out = {}
        for name, p in self.named_parameters():
            p.name = name
            out[name] = p.data.copy()
        return out

    def load_state_dict(self, state: dict[str, np.ndarray]) -> None:
        own = dict(self.named_parameters())
        missing = set(own) - set(state)
        extra = set(state) - set(own)
        if missing or extra:
            raise ShapeError("load_state_dict", (len(own),), (len(state),),
                             detail=f"missing={sorted(missing)[:4]} extra={sorted(extra)[:4]}")
        for name, p in own.items():
            arr = state[name]
            if tuple(arr.shape) != p.shape:
                raise ShapeError("load_state_dict", p.shape, arr.shape, detail=name)
            p.data = arr.astype(p.data.dtype).copy()


class ModuleList(Module):
    def __init__(self, mods):
        super().__init__()
        self._list = list(mods)
        for i, m in enumerate(self._list):
            self._modules[str(i)] = m

    def __iter__(self):
        return iter(self._list)

    def __len__(self):
        return len(self._list)

    def __getitem__(self, i):
        return self._list[i]


class Linear(Module):
    """x @ W + b with W of shape (in_features, out_features)."""

    def __init__(self, in_features: int, out_features: int,
                 rng: np.random.Generator, bias: bool = True, dtype=np.float32):
        super().__init__()
        self.in_features = in_features
        self.out_features = out_features
        self.weight = Tensor(kaiming_uniform(rng, (in_features, out_features),
                                             in_features, dtype), requires_grad=True)
        self.bias = (Tensor(np.zeros(out_features, dtype=dtype), requires_grad=True)
                     if bias else None)

    def __call__(self, x: Tensor) -> Tensor:
        if x.shape[-1] != self.in_features:
            raise ShapeError("linear", x.shape, self.weight.shape)
        y = T.matmul(x, self.weight)
        if self.bias is not None:
            y = y + self.bias
        return y


class Conv2d(Module):
    def __init__(self, in_ch: int, out_ch: int, kernel: int,
                 rng: np.random.Generator, stride: int = 1, padding: int = 0,
                 dilation: int = 1, dtype=np.float32):
        super().__init__()
        self.in_ch, self.out_ch = in_ch, out_ch
        self.kernel, self.stride, self.padding, self.dilation = kernel, stride, padding, dilation
        fan_in = in_ch * kernel * kernel
        self.weight = Tensor(kaiming_uniform(rng, (out_ch, in_ch, kernel, kernel),
                                             fan_in, dtype), requires_grad=True)
        self.bias = Tensor(np.zeros(out_ch, dtype=dtype), requires_grad=True)

    def __call__(self, x: Tensor) -> Tensor:
        return T.conv2d(x, self.weight, self.bias, stride=self.stride,
                        padding=self.padding, dilation=self.dilation)

    def out_size(self, size: int) -> int:
        return (size + 2 * self.padding - self.dilation * (self.kernel - 1) - 1) // self.stride + 1


class ConvTranspose2d(Module):
    def __init__(self, in_ch: int, out_ch: int, kernel: int,
                 rng: np.random.Generator, stride: int = 1, padding: int = 0,
                 dtype=np.float32):
        super().__init__()
        self.in_ch, self.out_ch = in_ch, out_ch
        self.kernel, self.stride, self.padding = kernel, stride, padding
        fan_in = in_ch * kernel * kernel
        self.weight = Tensor(kaiming_uniform(rng, (in_ch, out_ch, kernel, kernel),
                                             fan_in, dtype), requires_grad=True)
        self.bias = Tensor(np.zeros(out_ch, dtype=dtype), requires_grad=True)

    def __call__(self, x: Tensor) -> Tensor:
        return T.conv_transpose2d(x, self.weight, self.bias, stride=self.stride,
                                  padding=self.padding)

    def out_size(self, size: int) -> int:
        return (size - 1) * self.stride - 2 * self.padding + self.kernel


class MLP(Module):
    """Linear -> ReLU -> Linear over the last axis, shape preserving."""

    def __init__(self, dim: int, hidden: int, rng: np.random.Generator,
                 out_dim: Optional[int] = None, dtype=np.float32):
        super().__init__()
        self.fc1 = Linear(dim, hidden, rng, dtype=dtype)
        self.fc2 = Linear(hidden, out_dim if out_dim is not None else dim, rng, dtype=dtype)

    def __call__(self, x: Tensor) -> Tensor:
        return self.fc2(T.relu(self.fc1(x)))


class LayerNorm(Module):
    def __init__(self, dim: int, eps: float = 1e-5, dtype=np.float32):
        super().__init__()
        self.dim = dim
        self.eps = eps
        self.gamma = Tensor(np.ones(dim, dtype=dtype), requires_grad=True)
        self.beta = Tensor(np.zeros(dim, dtype=dtype), requires_grad=True)

    def __call__(self, x: Tensor) -> Tensor:
        if x.shape[-1] != self.dim:
            raise ShapeError("layernorm", x.shape, (self.dim,))
        mu = T.mean(x, axis=-1, keepdims=True)
        centered = x - mu
        var = T.mean(centered * centered, axis=-1, keepdims=True)
        inv = T.pow_(var + self.eps, -0.5)
        return centered * inv * self.gamma + self.beta


def scaled_dot_attention(q: Tensor, k: Tensor, v: Tensor,
                         scale_dim: Optional[int] = None) -> Tensor:
    """Softmax(Q K^T / sqrt(c)) V on 2-D token matrices.

    ``scale_dim`` defaults to the feature dim of Q; pass the per-head dim
    when calling inside a multi-head block.
    """
    if q.shape[-1] != k.shape[-1] or k.shape[0] != v.shape[0]:
        raise ShapeError("scaled_dot_attention", q.shape, k.shape, v.shape)
    c = scale_dim if scale_dim is not None else q.shape[-1]
    logits = T.matmul(q, T.transpose(k), flop_kind="attn_qk") * (1.0 / np.sqrt(c))
    weights = T.softmax(logits, axis=-1)
    return T.matmul(weights, v, flop_kind="attn_av")


class MultiHeadAttention(Module):
    """Per-head projected attention, concatenated and output-projected.

    Each head j owns projection matrices w1.j, w2.j, w3.j of shape
    (dim, dim/heads); the concatenated heads pass through wc (dim, dim).
    """

    def __init__(self, dim: int, heads: int, rng: np.random.Generator, dtype=np.float32):
        super().__init__()
        if dim % heads != 0:
            raise ShapeError("multi_head_attention", (dim,), (heads,),
                             detail="dim must be divisible by heads")
        self.dim, self.heads = dim, heads
        self.head_dim = dim // heads
        for proj in ("w1", "w2", "w3"):
            for j in range(heads):
                self.register_parameter(
                    f"{proj}.{j}",
                    Tensor(kaiming_uniform(rng, (dim, self.head_dim), dim, dtype)))
        self.wc = Tensor(kaiming_uniform(rng, (dim, dim), dim, dtype), requires_grad=True)

    def _proj(self, name: str, j: int) -> Tensor:
        return self._params[f"{name}.{j}"]

    def __call__(self, q: Tensor, k: Tensor, v: Tensor) -> Tensor:
        if q.shape[-1] != self.dim or k.shape[-1] != self.dim or v.shape[-1] != self.dim:
            raise ShapeError("multi_head_attention", q.shape, k.shape, v.shape)
        heads_out = []
        for j in range(self.heads):
            qj = T.matmul(q, self._proj("w1", j))
            kj = T.matmul(k, self._proj("w2", j))
            vj = T.matmul(v, self._proj("w3", j))
            heads_out.append(scaled_dot_attention(qj, kj, vj, scale_dim=self.head_dim))
        return T.matmul(T.concat(heads_out, axis=-1), self.wc)


def sinusoidal_encoding(centers: np.ndarray, dim: int, dtype=np.float32) -> np.ndarray:
    """Fixed 2-D positional code from (row, col) centers in grid units.

    Half of the channels encode the row coordinate, half the column, each as
    interleaved sin/cos at geometrically spaced frequencies. ``dim`` must be
    a multiple of 4.
    """
    if dim % 4 != 0:
        raise ShapeError("sinusoidal_encoding", (dim,), detail="dim must be divisible by 4")
    half = dim // 2
    quarter = half // 2
    freqs = 1.0 / (100.0 ** (np.arange(quarter) / max(quarter - 1, 1)))
    out = np.zeros((centers.shape[0], dim), dtype=np.float64)
    for axis in range(2):
        phase = centers[:, axis: axis + 1] * freqs[None, :]
        base = axis * half
        out[:, base: base + half: 2] = np.sin(phase)
        out[:, base + 1: base + half: 2] = np.cos(phase)
    return out.astype(dtype)


def resize_weights(src: int, dst: int, dtype=np.float32) -> np.ndarray:
    """(dst, src) bilinear interpolation matrix, align-corners convention.

    Exact on affine signals: sample points never leave the source extent.
    """
    w = np.zeros((dst, src), dtype=np.float64)
    if dst == 1:
        pos = np.array([(src - 1) / 2.0])
    else:
        pos = np.arange(dst) * (src - 1) / (dst - 1)
    lo = np.floor(pos).astype(int)
    hi = np.minimum(lo + 1, src - 1)
    frac = pos - lo
    for i in range(dst):
        w[i, lo[i]] += 1.0 - frac[i]
        w[i, hi[i]] += frac[i]
    return w.astype(dtype)


def resize_bilinear(x: Tensor, out_h: int, out_w: int) -> Tensor:
    """Differentiable bilinear resize of a CHW map via two matmuls."""
    _, h, w = x.shape
    wr = Tensor(resize_weights(h, out_h, dtype=x.data.dtype))
    wc = Tensor(resize_weights(w, out_w, dtype=x.data.dtype).T)
    return T.matmul(T.matmul(wr, x), wc)
