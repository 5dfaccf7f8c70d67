"""Minimal reverse-mode automatic differentiation on numpy arrays.

Just enough machinery for a fully convolutional network and its losses:
tensors, a handful of differentiable ops (dilated conv2d, instance norm,
relu, exp/log/clip, fused softmax cross-entropy, reductions) and ADAM.
Arrays keep whatever dtype they are given, so the same graph runs in
float32 for training and float64 for finite-difference checks.
"""

from __future__ import annotations

import numpy as np
from numpy.lib.stride_tricks import as_strided

from .errors import NumericError

_GRAD_ENABLED = [True]


class no_grad:
    """Context manager that disables graph construction."""

    def __enter__(self):
        self.prev = _GRAD_ENABLED[0]
        _GRAD_ENABLED[0] = False
        return self

    def __exit__(self, *exc):
        _GRAD_ENABLED[0] = self.prev
        return False


class Tensor:
    __slots__ = ("data", "grad", "requires_grad", "_ctx")

    def __init__(self, data, requires_grad: bool = False):
        self.data = np.asarray(data)
        self.grad = None
        self.requires_grad = bool(requires_grad)
        self._ctx = None

    @property
    def shape(self):
        return self.data.shape

    @property
    def dtype(self):
        return self.data.dtype

    @property
    def size(self):
        return self.data.size

    def detach(self) -> "Tensor":
        return Tensor(self.data, requires_grad=False)

    def backward(self) -> None:
        """Backpropagate from a scalar; accumulates into .grad fields."""
        if self.size != 1:
            raise NumericError(f"backward needs a scalar, got shape {self.shape}")
        topo: list[Tensor] = []
        seen = set()
        stack = [(self, False)]
        while stack:
            node, done = stack.pop()
            if done:
                topo.append(node)
                continue
            if id(node) in seen or node._ctx is None:
                continue
            seen.add(id(node))
            stack.append((node, True))
            for parent in node._ctx.parents:
                stack.append((parent, False))
        self.grad = np.ones_like(self.data)
        for node in reversed(topo):
            ctx = node._ctx
            grads = ctx.backward(ctx, node.grad)
            for parent, g in zip(ctx.parents, grads):
                if g is None or not parent.requires_grad:
                    continue
                parent.grad = g if parent.grad is None else parent.grad + g

    def __add__(self, other):
        return add(self, other)

    def __radd__(self, other):
        return add(self, other)

    def __sub__(self, other):
        return sub(self, other)

    def __mul__(self, other):
        return mul(self, other)

    def __rmul__(self, other):
        return mul(self, other)

    def __neg__(self):
        return scale(self, -1.0)

    def __repr__(self):
        return f"Tensor(shape={self.shape}, dtype={self.dtype}, grad={self.requires_grad})"


def _as_tensor(x) -> Tensor:
    if isinstance(x, Tensor):
        return x
    return Tensor(np.asarray(x))


def _unbroadcast(g: np.ndarray, shape: tuple) -> np.ndarray:
    """Reduce a gradient back to the shape it was broadcast from."""
    if g.shape == shape:
        return g
    extra = g.ndim - len(shape)
    if extra > 0:
        g = g.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, s in enumerate(shape) if s == 1 and g.shape[i] != 1)
    if axes:
        g = g.sum(axis=axes, keepdims=True)
    return g.reshape(shape)


class Function:
    """One differentiable op; instances double as backward contexts."""

    def __init__(self, *parents: Tensor):
        self.parents = parents
        self.saved: tuple = ()

    def save(self, *items):
        self.saved = items

    @classmethod
    def apply(cls, *args, **kwargs) -> Tensor:
        tensors = [a for a in args if isinstance(a, Tensor)]
        ctx = cls(*tensors)
        raw = [a.data if isinstance(a, Tensor) else a for a in args]
        out_data = cls.forward(ctx, *raw, **kwargs)
        needs = _GRAD_ENABLED[0] and any(t.requires_grad for t in tensors)
        out = Tensor(out_data, requires_grad=needs)
        if needs:
            out._ctx = ctx
        return out

    @staticmethod
    def forward(ctx, *args, **kwargs):
        raise NotImplementedError

    @staticmethod
    def backward(ctx, g):
        raise NotImplementedError


class _Add(Function):
    @staticmethod
    def forward(ctx, x, y):
        ctx.save(x.shape, y.shape)
        return x + y

    @staticmethod
    def backward(ctx, g):
        xs, ys = ctx.saved
        return _unbroadcast(g, xs), _unbroadcast(g, ys)


class _Sub(Function):
    @staticmethod
    def forward(ctx, x, y):
        ctx.save(x.shape, y.shape)
        return x - y

    @staticmethod
    def backward(ctx, g):
        xs, ys = ctx.saved
        return _unbroadcast(g, xs), _unbroadcast(-g, ys)


class _Mul(Function):
    @staticmethod
    def forward(ctx, x, y):
        ctx.save(x, y)
        return x * y

    @staticmethod
    def backward(ctx, g):
        x, y = ctx.saved
        return _unbroadcast(g * y, x.shape), _unbroadcast(g * x, y.shape)


class _Scale(Function):
    @staticmethod
    def forward(ctx, x, c):
        ctx.save(c)
        return x * c

    @staticmethod
    def backward(ctx, g):
        (c,) = ctx.saved
        return (g * c,)


class _AddConst(Function):
    @staticmethod
    def forward(ctx, x, c):
        return x + c

    @staticmethod
    def backward(ctx, g):
        return (g,)


class _Exp(Function):
    @staticmethod
    def forward(ctx, x):
        out = np.exp(x)
        ctx.save(out)
        return out

    @staticmethod
    def backward(ctx, g):
        (out,) = ctx.saved
        return (g * out,)


class _Log(Function):
    @staticmethod
    def forward(ctx, x):
        ctx.save(x)
        return np.log(x)

    @staticmethod
    def backward(ctx, g):
        (x,) = ctx.saved
        return (g / x,)


class _ReLU(Function):
    @staticmethod
    def forward(ctx, x):
        ctx.save(x > 0)
        return np.maximum(x, 0)

    @staticmethod
    def backward(ctx, g):
        (mask,) = ctx.saved
        return (g * mask,)


class _Clip(Function):
    # Pass-through on the closed interval [lo, hi]. Outside it, only
    # gradients pointing back toward the interval survive (projected
    # descent); a zero-gradient cutoff would strand values that drift
    # past a rail, and reward drifting further with no restoring force.
    @staticmethod
    def forward(ctx, x, lo, hi):
        ctx.save(x < lo, x > hi)
        return np.clip(x, lo, hi)

    @staticmethod
    def backward(ctx, g):
        below, above = ctx.saved
        inward = (below & (g < 0)) | (above & (g > 0))
        return (g * (~below & ~above | inward),)


class _Sum(Function):
    @staticmethod
    def forward(ctx, x):
        ctx.save(x.shape, x.dtype)
        return np.asarray(x.sum())

    @staticmethod
    def backward(ctx, g):
        shape, dtype = ctx.saved
        return (np.broadcast_to(g.astype(dtype, copy=False), shape).copy(),)


class _Mean(Function):
    @staticmethod
    def forward(ctx, x):
        ctx.save(x.shape, x.dtype, x.size)
        return np.asarray(x.mean())

    @staticmethod
    def backward(ctx, g):
        shape, dtype, size = ctx.saved
        gx = np.broadcast_to(g.astype(dtype, copy=False), shape) / size
        return (gx.astype(dtype, copy=False),)


def _im2col(xp: np.ndarray, kh: int, kw: int, dil: int, out_h: int, out_w: int):
    n, c, _, _ = xp.shape
    sn, sc, sh, sw = xp.strides
    cols = as_strided(
        xp,
        shape=(n, c, kh, kw, out_h, out_w),
        strides=(sn, sc, sh * dil, sw * dil, sh, sw),
        writeable=False)
    return cols.reshape(n, c * kh * kw, out_h * out_w)


class _Conv2d(Function):
    """3x3 or 1x1 convolution, stride 1, zero padding preserving shape.

    Odd kernels only; dilation applies to the kernel grid. Input
    (N, C_in, H, W), weight (C_out, C_in, kh, kw), optional bias (C_out,).
    """

    @staticmethod
    def forward(ctx, x, w, b, dilation=1):
        n, cin, h, wd = x.shape
        cout, cin2, kh, kw = w.shape
        if cin != cin2:
            raise NumericError(f"conv channel mismatch: input {cin}, weight {cin2}")
        if kh % 2 == 0 or kw % 2 == 0:
            raise NumericError(f"conv kernels must be odd, got {kh}x{kw}")
        w2 = w.reshape(cout, -1)
        if kh == 1 and kw == 1:
            # Pointwise: a channel-mixing GEMM, no patch extraction needed.
            cols = np.ascontiguousarray(x).reshape(n, cin, h * wd)
            ph = pw = 0
        else:
            ph = dilation * (kh - 1) // 2
            pw = dilation * (kw - 1) // 2
            xp = np.pad(x, ((0, 0), (0, 0), (ph, ph), (pw, pw)))
            cols = np.ascontiguousarray(_im2col(xp, kh, kw, dilation, h, wd))
        out = np.matmul(w2, cols).reshape(n, cout, h, wd)
        if b is not None:
            out += b[None, :, None, None]
        ctx.save(cols, w, x.shape, (ph, pw), dilation, b is not None)
        return out

    @staticmethod
    def backward(ctx, g):
        cols, w, xshape, (ph, pw), dil, has_bias = ctx.saved
        n, cin, h, wd = xshape
        cout, _, kh, kw = w.shape
        g2 = g.reshape(n, cout, h * wd)
        dw = np.matmul(g2, cols.transpose(0, 2, 1)).sum(axis=0).reshape(w.shape)
        w2 = w.reshape(cout, -1)
        if kh == 1 and kw == 1:
            dx = np.matmul(w2.T, g2).reshape(xshape)
        else:
            dcols = np.matmul(w2.T, g2).reshape(n, cin, kh, kw, h, wd)
            dxp = np.zeros((n, cin, h + 2 * ph, wd + 2 * pw), dtype=g.dtype)
            for i in range(kh):
                for j in range(kw):
                    dxp[:, :, i * dil:i * dil + h,
                        j * dil:j * dil + wd] += dcols[:, :, i, j]
            dx = dxp[:, :, ph:ph + h, pw:pw + wd] if (ph or pw) else dxp
        db = g.sum(axis=(0, 2, 3)) if has_bias else None
        return dx, dw, db


class _InstanceNorm(Function):
    """Per-(sample, channel) normalization over spatial axes with affine."""

    @staticmethod
    def forward(ctx, x, gain, bias, eps=1e-5):
        mu = x.mean(axis=(2, 3), keepdims=True)
        var = x.var(axis=(2, 3), keepdims=True)
        inv = 1.0 / np.sqrt(var + eps)
        xn = (x - mu) * inv
        ctx.save(xn, inv, gain)
        return gain[None, :, None, None] * xn + bias[None, :, None, None]

    @staticmethod
    def backward(ctx, g):
        xn, inv, gain = ctx.saved
        m = xn.shape[2] * xn.shape[3]
        dxn = g * gain[None, :, None, None]
        s1 = dxn.sum(axis=(2, 3), keepdims=True)
        s2 = (dxn * xn).sum(axis=(2, 3), keepdims=True)
        dx = (inv / m) * (m * dxn - s1 - xn * s2)
        dgain = (g * xn).sum(axis=(0, 2, 3))
        dbias = g.sum(axis=(0, 2, 3))
        return dx, dgain, dbias


class _Reshape(Function):
    @staticmethod
    def forward(ctx, x, shape):
        ctx.save(x.shape)
        return x.reshape(shape)

    @staticmethod
    def backward(ctx, g):
        (shape,) = ctx.saved
        return (g.reshape(shape),)


class _SoftmaxCE(Function):
    """Per-voxel cross-entropy of integer labels against channel-1 logits.

    Fused log-softmax keeps the backward pass the usual (p - onehot) form.
    Returns a map shaped like the labels.
    """

    @staticmethod
    def forward(ctx, logits, labels):
        z = logits - logits.max(axis=1, keepdims=True)
        logp = z - np.log(np.exp(z).sum(axis=1, keepdims=True))
        picked = np.take_along_axis(logp, labels[:, None], axis=1)[:, 0]
        ctx.save(np.exp(logp), labels)
        return -picked

    @staticmethod
    def backward(ctx, g):
        probs, labels = ctx.saved
        dlogits = probs.copy()
        np.put_along_axis(
            dlogits, labels[:, None],
            np.take_along_axis(dlogits, labels[:, None], axis=1) - 1.0, axis=1)
        return (dlogits * g[:, None],)


def add(x, y):
    if not isinstance(y, Tensor):
        return _AddConst.apply(_as_tensor(x), np.asarray(y))
    if not isinstance(x, Tensor):
        return _AddConst.apply(y, np.asarray(x))
    return _Add.apply(x, y)


def sub(x, y):
    return _Sub.apply(_as_tensor(x), _as_tensor(y))


def mul(x, y):
    if not isinstance(y, Tensor):
        return _Scale.apply(_as_tensor(x), float(np.asarray(y)))
    if not isinstance(x, Tensor):
        return _Scale.apply(y, float(np.asarray(x)))
    return _Mul.apply(x, y)


def scale(x, c: float):
    return _Scale.apply(_as_tensor(x), float(c))


def texp(x):
    return _Exp.apply(_as_tensor(x))


def tlog(x):
    return _Log.apply(_as_tensor(x))


def relu(x):
    return _ReLU.apply(_as_tensor(x))


def clip(x, lo: float, hi: float):
    return _Clip.apply(_as_tensor(x), float(lo), float(hi))


def reshape(x, shape):
    return _Reshape.apply(_as_tensor(x), tuple(shape))


def tsum(x):
    return _Sum.apply(_as_tensor(x))


def tmean(x):
    return _Mean.apply(_as_tensor(x))


def conv2d(x, w, b=None, dilation: int = 1):
    if b is None:
        return _Conv2d.apply(_as_tensor(x), _as_tensor(w), None, dilation=dilation)
    return _Conv2d.apply(_as_tensor(x), _as_tensor(w), _as_tensor(b), dilation=dilation)


def instance_norm(x, gain, bias, eps: float = 1e-5):
    return _InstanceNorm.apply(_as_tensor(x), _as_tensor(gain), _as_tensor(bias), eps=eps)


def softmax_cross_entropy(logits, labels: np.ndarray):
    """labels: integer array shaped like the logits without the channel axis."""
    return _SoftmaxCE.apply(_as_tensor(logits), np.asarray(labels))


def softmax(logits: np.ndarray, axis: int = 1) -> np.ndarray:
    """Plain numpy softmax with max-subtraction, no graph."""
    z = logits - logits.max(axis=axis, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=axis, keepdims=True)


class Adam:
    """ADAM with bias correction, updating a dict of arrays in place."""

    def __init__(self, params: dict, lr: float = 1e-3, beta1: float = 0.9,
                 beta2: float = 0.999, eps: float = 1e-8):
        self.lr = lr
        self.beta1 = beta1
        self.beta2 = beta2
        self.eps = eps
        self.t = 0
        self.m = {k: np.zeros_like(v) for k, v in params.items()}
        self.v = {k: np.zeros_like(v) for k, v in params.items()}

    def step(self, params: dict, grads: dict) -> None:
        self.t += 1
        b1, b2 = self.beta1, self.beta2
        c1 = 1.0 - b1 ** self.t
        c2 = 1.0 - b2 ** self.t
        for name, p in params.items():
            g = grads.get(name)
            if g is None:
                continue
            m = self.m[name]
            v = self.v[name]
            m *= b1
            m += (1.0 - b1) * g
            v *= b2
            v += (1.0 - b2) * g * g
            p -= self.lr * (m / c1) / (np.sqrt(v / c2) + self.eps)
