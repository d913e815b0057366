"""Dense tensors with reverse-mode automatic differentiation.

Covers exactly the operations the segmentation network needs: elementwise
arithmetic, reductions, reshapes/slices, 2D convolution (im2col + GEMM),
pooling, nearest upsampling, the activations and group normalization.
Images travel as [N, C, H, W]. Default precision is float32; float64 is
available for high-accuracy checks.

Gradients flow through `_backward` closures collected by a topological
sort; forward values on finite inputs stay finite by construction
(numerically stable sigmoid/softplus, epsilon-guarded normalization).
"""

from __future__ import annotations

import json
from typing import Iterable, Optional, Sequence, Union

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view


class ShapeError(ValueError):
    """Raised when operand shapes violate an operation's contract."""


_grad_enabled = True


class no_grad:
    """Context manager that skips graph construction (inference paths)."""

    def __enter__(self):
        global _grad_enabled
        self._prev = _grad_enabled
        _grad_enabled = False

    def __exit__(self, *exc):
        global _grad_enabled
        _grad_enabled = self._prev
        return False


def _coerce(data, dtype) -> np.ndarray:
    arr = np.asarray(data)
    if dtype is not None:
        return np.asarray(arr, dtype=dtype)
    if arr.dtype in (np.float32, np.float64):
        return arr
    return arr.astype(np.float32)


def _unbroadcast(grad: np.ndarray, shape: tuple) -> np.ndarray:
    """Sum a gradient down to `shape`, undoing numpy broadcasting."""
    if grad.shape == shape:
        return grad
    while grad.ndim > len(shape):
        grad = grad.sum(axis=0)
    for ax, dim in enumerate(shape):
        if dim == 1 and grad.shape[ax] != 1:
            grad = grad.sum(axis=ax, keepdims=True)
    return grad


class Tensor:
    __slots__ = ("data", "requires_grad", "grad", "_prev", "_backward", "_grad_shared")

    def __init__(self, data, requires_grad: bool = False, dtype=None):
        self.data = _coerce(data, dtype)
        self.requires_grad = bool(requires_grad)
        self.grad: Optional[np.ndarray] = None
        self._prev: tuple = ()
        self._backward = None
        self._grad_shared = False

    # ---- construction helpers -------------------------------------------

    @staticmethod
    def _lift(value, like: "Tensor") -> "Tensor":
        if isinstance(value, Tensor):
            return value
        return Tensor(np.asarray(value, dtype=like.data.dtype))

    @staticmethod
    def _result(data, parents: Iterable["Tensor"], backward) -> "Tensor":
        out = Tensor.__new__(Tensor)
        out.data = data
        out.grad = None
        out._grad_shared = False
        parents = tuple(parents)
        if _grad_enabled and any(p.requires_grad for p in parents):
            out.requires_grad = True
            out._prev = parents
            out._backward = backward()
        else:
            out.requires_grad = False
            out._prev = ()
            out._backward = None
        return out

    def _accumulate(self, g: np.ndarray):
        # First contribution keeps a reference (may alias the producer's
        # buffer or be read-only); a second contribution reallocates.
        if self.grad is None:
            if g.dtype != self.data.dtype:
                g = g.astype(self.data.dtype)
            self.grad = g
            self._grad_shared = True
        elif self._grad_shared:
            self.grad = self.grad + g
            self._grad_shared = False
        else:
            self.grad += g

    # ---- basic properties ------------------------------------------------

    @property
    def shape(self):
        return self.data.shape

    @property
    def dtype(self):
        return self.data.dtype

    @property
    def size(self):
        return self.data.size

    def item(self) -> float:
        return float(self.data.reshape(()))

    def detach(self) -> "Tensor":
        return Tensor(self.data)

    def zero_grad(self):
        self.grad = None

    def __repr__(self):
        return f"Tensor(shape={self.data.shape}, dtype={self.data.dtype}, requires_grad={self.requires_grad})"

    # ---- arithmetic --------------------------------------------------------

    def __add__(self, other):
        other = Tensor._lift(other, self)
        a, b = self, other

        def bw():
            def run():
                g = out.grad
                if a.requires_grad:
                    a._accumulate(_unbroadcast(g, a.data.shape))
                if b.requires_grad:
                    b._accumulate(_unbroadcast(g, b.data.shape))
            return run

        out = Tensor._result(a.data + b.data, (a, b), bw)
        return out

    def __mul__(self, other):
        other = Tensor._lift(other, self)
        a, b = self, other

        def bw():
            def run():
                g = out.grad
                if a.requires_grad:
                    a._accumulate(_unbroadcast(g * b.data, a.data.shape))
                if b.requires_grad:
                    b._accumulate(_unbroadcast(g * a.data, b.data.shape))
            return run

        out = Tensor._result(a.data * b.data, (a, b), bw)
        return out

    def __sub__(self, other):
        other = Tensor._lift(other, self)
        a, b = self, other

        def bw():
            def run():
                g = out.grad
                if a.requires_grad:
                    a._accumulate(_unbroadcast(g, a.data.shape))
                if b.requires_grad:
                    b._accumulate(_unbroadcast(-g, b.data.shape))
            return run

        out = Tensor._result(a.data - b.data, (a, b), bw)
        return out

    def __truediv__(self, other):
        other = Tensor._lift(other, self)
        a, b = self, other

        def bw():
            def run():
                g = out.grad
                if a.requires_grad:
                    a._accumulate(_unbroadcast(g / b.data, a.data.shape))
                if b.requires_grad:
                    b._accumulate(_unbroadcast(-g * a.data / (b.data * b.data), b.data.shape))
            return run

        out = Tensor._result(a.data / b.data, (a, b), bw)
        return out

    def __neg__(self):
        a = self

        def bw():
            def run():
                if a.requires_grad:
                    a._accumulate(-out.grad)
            return run

        out = Tensor._result(-a.data, (a,), bw)
        return out

    def __pow__(self, exponent):
        if not isinstance(exponent, (int, float)):
            raise TypeError("only scalar exponents are supported")
        a, p = self, float(exponent)

        def bw():
            def run():
                if a.requires_grad:
                    a._accumulate(out.grad * p * np.power(a.data, p - 1.0))
            return run

        out = Tensor._result(np.power(a.data, p), (a,), bw)
        return out

    __radd__ = __add__
    __rmul__ = __mul__

    def __rsub__(self, other):
        return Tensor._lift(other, self) - self

    def __rtruediv__(self, other):
        return Tensor._lift(other, self) / self

    def exp(self):
        a = self
        data = np.exp(a.data)

        def bw():
            def run():
                if a.requires_grad:
                    a._accumulate(out.grad * out.data)
            return run

        out = Tensor._result(data, (a,), bw)
        return out

    def log(self):
        a = self

        def bw():
            def run():
                if a.requires_grad:
                    a._accumulate(out.grad / a.data)
            return run

        out = Tensor._result(np.log(a.data), (a,), bw)
        return out

    # ---- reductions -------------------------------------------------------

    def sum(self, axis=None, keepdims: bool = False):
        a = self
        data = a.data.sum(axis=axis, keepdims=keepdims)

        def bw():
            def run():
                if not a.requires_grad:
                    return
                g = out.grad
                if axis is not None and not keepdims:
                    axes = (axis,) if isinstance(axis, int) else tuple(axis)
                    g = np.expand_dims(g, axes)
                a._accumulate(np.broadcast_to(g, a.data.shape))
            return run

        out = Tensor._result(np.asarray(data), (a,), bw)
        return out

    def mean(self, axis=None, keepdims: bool = False):
        count = self.data.size if axis is None else np.prod(
            [self.data.shape[ax] for ax in ((axis,) if isinstance(axis, int) else axis)]
        )
        return self.sum(axis=axis, keepdims=keepdims) * (1.0 / float(count))

    # ---- shape plumbing -----------------------------------------------------

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        a = self
        orig = a.data.shape

        def bw():
            def run():
                if a.requires_grad:
                    a._accumulate(out.grad.reshape(orig))
            return run

        out = Tensor._result(a.data.reshape(shape), (a,), bw)
        return out

    def transpose(self, axes: Sequence[int]):
        a = self
        inv = np.argsort(axes)

        def bw():
            def run():
                if a.requires_grad:
                    a._accumulate(out.grad.transpose(inv))
            return run

        out = Tensor._result(a.data.transpose(axes), (a,), bw)
        return out

    def __getitem__(self, key):
        a = self

        def bw():
            def run():
                if a.requires_grad:
                    g = np.zeros_like(a.data)
                    g[key] = out.grad
                    a._accumulate(g)
            return run

        out = Tensor._result(a.data[key], (a,), bw)
        return out

    # ---- activations ---------------------------------------------------------

    def relu(self):
        a = self
        data = np.maximum(a.data, 0)

        def bw():
            def run():
                if a.requires_grad:
                    # subgradient at 0 is 0
                    a._accumulate(out.grad * (a.data > 0))
            return run

        out = Tensor._result(data, (a,), bw)
        return out

    def sigmoid(self):
        a = self
        data = _sigmoid(a.data)

        def bw():
            def run():
                if a.requires_grad:
                    a._accumulate(out.grad * out.data * (1.0 - out.data))
            return run

        out = Tensor._result(data, (a,), bw)
        return out

    def softplus(self):
        a = self
        data = np.logaddexp(np.zeros((), dtype=a.data.dtype), a.data)

        def bw():
            def run():
                if a.requires_grad:
                    a._accumulate(out.grad * _sigmoid(a.data))
            return run

        out = Tensor._result(data, (a,), bw)
        return out

    # ---- autodiff driver -------------------------------------------------------

    def backward(self):
        """Fill .grad of every reachable requires_grad leaf with d(self)/d(leaf).

        The graph is consumed: interior nodes drop their closures, parents
        and gradient buffers as soon as they have propagated, so activation
        memory is released eagerly (the closures reference their own output
        tensor, which would otherwise keep whole graphs alive as cycles).
        """
        if self.data.size != 1:
            raise ShapeError(f"backward() needs a scalar loss, got shape {self.data.shape}")
        topo: list[Tensor] = []
        visited: set[int] = set()
        stack: list[tuple[Tensor, bool]] = [(self, False)]
        while stack:
            node, expanded = stack.pop()
            if expanded:
                topo.append(node)
                continue
            if id(node) in visited:
                continue
            visited.add(id(node))
            stack.append((node, True))
            for parent in node._prev:
                if id(parent) not in visited:
                    stack.append((parent, False))
        self.grad = np.ones_like(self.data)
        self._grad_shared = False
        for node in reversed(topo):
            if node._backward is not None:
                if node.grad is not None:
                    node._backward()
                node._backward = None
                node._prev = ()
                node.grad = None
                node._grad_shared = False


def _sigmoid(x: np.ndarray) -> np.ndarray:
    # exp(-|x|) never overflows; the two branches share it
    z = np.exp(-np.abs(x))
    return np.where(x >= 0, 1.0 / (1.0 + z), z / (1.0 + z))


def activation(x: Tensor, kind: str) -> Tensor:
    if kind == "relu":
        return x.relu()
    if kind == "sigmoid":
        return x.sigmoid()
    if kind == "softplus":
        return x.softplus()
    raise ValueError(f"unknown activation kind: {kind!r}")


def concat(tensors: Sequence[Tensor], axis: int) -> Tensor:
    parents = tuple(tensors)
    sizes = [t.data.shape[axis] for t in parents]
    data = np.concatenate([t.data for t in parents], axis=axis)

    def bw():
        def run():
            g = out.grad
            offset = 0
            index = [slice(None)] * g.ndim
            for t, n in zip(parents, sizes):
                if t.requires_grad:
                    index[axis] = slice(offset, offset + n)
                    t._accumulate(g[tuple(index)])
                offset += n
        return run

    out = Tensor._result(data, parents, bw)
    return out


# ---- convolution ------------------------------------------------------------


def _resolve_padding(padding, kh: int, kw: int) -> tuple[int, int]:
    if padding == "same":
        return (kh - 1) // 2, (kw - 1) // 2
    if padding == "valid":
        return 0, 0
    if isinstance(padding, int):
        return padding, padding
    raise ShapeError(f"padding must be 'same', 'valid' or int, got {padding!r}")


def _pad_zeros(x: np.ndarray, ph: int, pw: int) -> np.ndarray:
    if ph == 0 and pw == 0:
        return x
    n, c, h, w = x.shape
    xp = np.zeros((n, c, h + 2 * ph, w + 2 * pw), dtype=x.dtype)
    xp[:, :, ph:ph + h, pw:pw + w] = x
    return xp


def _im2col(xp: np.ndarray, kh: int, kw: int, stride: int, ho: int, wo: int) -> np.ndarray:
    """[N,C,Hp,Wp] -> [N, C*kh*kw, Ho*Wo] patch matrix via slab copies."""
    n, c = xp.shape[:2]
    cols = np.empty((n, c, kh * kw, ho, wo), dtype=xp.dtype)
    for i in range(kh):
        for j in range(kw):
            cols[:, :, i * kw + j] = xp[:, :, i:i + stride * ho:stride,
                                        j:j + stride * wo:stride]
    return cols.reshape(n, c * kh * kw, ho * wo)


def _col2im(dcols: np.ndarray, shape, kh: int, kw: int, stride: int,
            ho: int, wo: int) -> np.ndarray:
    """Scatter-add [N, C*kh*kw, Ho*Wo] patch gradients back onto the padded image."""
    n, c = shape[:2]
    dxp = np.zeros(shape, dtype=dcols.dtype)
    dcols = dcols.reshape(n, c, kh * kw, ho, wo)
    for i in range(kh):
        for j in range(kw):
            dxp[:, :, i:i + stride * ho:stride, j:j + stride * wo:stride] += \
                dcols[:, :, i * kw + j]
    return dxp


def conv2d(x: Tensor, kernel: Tensor, bias: Optional[Tensor] = None,
           stride: int = 1, padding: Union[str, int] = "same") -> Tensor:
    """Cross-correlation of [N,Cin,H,W] with [Cout,Cin,kh,kw] kernels."""
    if x.data.ndim != 4:
        raise ShapeError(f"conv2d input must be 4D [N,C,H,W], got {x.data.shape}")
    if kernel.data.ndim != 4:
        raise ShapeError(f"conv2d kernel must be 4D [Cout,Cin,kh,kw], got {kernel.data.shape}")
    n, cin, h, w = x.data.shape
    cout, cin_k, kh, kw = kernel.data.shape
    if cin != cin_k:
        raise ShapeError(f"conv2d: input has {cin} channels but kernel expects {cin_k}")
    if kh % 2 == 0 or kw % 2 == 0:
        raise ShapeError(f"conv2d: kernel dims must be odd, got {kh}x{kw}")
    if bias is not None and bias.data.shape != (cout,):
        raise ShapeError(f"conv2d: bias shape {bias.data.shape} != ({cout},)")
    ph, pw = _resolve_padding(padding, kh, kw)
    ho = (h + 2 * ph - kh) // stride + 1
    wo = (w + 2 * pw - kw) // stride + 1
    if ho < 1 or wo < 1:
        raise ShapeError(f"conv2d: kernel {kh}x{kw} does not fit input {h}x{w}")
    pointwise = kh == 1 and kw == 1 and stride == 1 and ph == 0 and pw == 0
    if pointwise:
        xp, cols = x.data, x.data.reshape(n, cin, h * w)
    else:
        xp = _pad_zeros(x.data, ph, pw)
        cols = _im2col(xp, kh, kw, stride, ho, wo)
    wr = kernel.data.reshape(cout, cin * kh * kw)
    data = np.matmul(wr, cols).reshape(n, cout, ho, wo)
    if bias is not None:
        data += bias.data.reshape(1, cout, 1, 1)

    parents = (x, kernel) if bias is None else (x, kernel, bias)

    def bw():
        def run():
            g = out.grad
            gr = np.ascontiguousarray(g.reshape(n, cout, ho * wo))
            if kernel.requires_grad:
                # batched GEMM against the transposed view, summed over batch
                dw = np.matmul(gr, cols.transpose(0, 2, 1)).sum(axis=0)
                kernel._accumulate(dw.reshape(kernel.data.shape))
            if bias is not None and bias.requires_grad:
                bias._accumulate(g.sum(axis=(0, 2, 3)))
            if x.requires_grad:
                dcols = np.matmul(wr.T, gr)
                if pointwise:
                    x._accumulate(dcols.reshape(x.data.shape))
                    return
                dxp = _col2im(dcols, xp.shape, kh, kw, stride, ho, wo)
                if ph or pw:
                    x._accumulate(dxp[:, :, ph:ph + h, pw:pw + w])
                else:
                    x._accumulate(dxp)
        return run

    out = Tensor._result(data, parents, bw)
    return out


# ---- pooling / resampling ---------------------------------------------------


def pool2d(x: Tensor, kind: str, window: int, stride: Optional[int] = None) -> Tensor:
    """Windowed max/avg pooling. Max routes its gradient to the argmax."""
    if kind not in ("max", "avg"):
        raise ValueError(f"pool kind must be 'max' or 'avg', got {kind!r}")
    if window < 1:
        raise ShapeError(f"pool2d: window must be >= 1, got {window}")
    stride = window if stride is None else stride
    if stride < 1:
        raise ShapeError(f"pool2d: stride must be >= 1, got {stride}")
    n, c, h, w = x.data.shape
    if h < window or w < window:
        raise ShapeError(f"pool2d: window {window} exceeds spatial dims {h}x{w}")
    win = sliding_window_view(x.data, (window, window), axis=(2, 3))[:, :, ::stride, ::stride]
    ho, wo = win.shape[2], win.shape[3]
    flat = win.reshape(n, c, ho, wo, window * window)
    if kind == "max":
        idx = flat.argmax(axis=-1)
        data = np.take_along_axis(flat, idx[..., None], axis=-1)[..., 0]
    else:
        data = flat.mean(axis=-1)

    def bw():
        def run():
            if not x.requires_grad:
                return
            g = out.grad
            dx = np.zeros_like(x.data)
            if kind == "max":
                di, dj = np.divmod(idx, window)
                ii = di + stride * np.arange(ho)[None, None, :, None]
                jj = dj + stride * np.arange(wo)[None, None, None, :]
                ni = np.arange(n)[:, None, None, None]
                ci = np.arange(c)[None, :, None, None]
                np.add.at(dx, (ni, ci, ii, jj), g)
            else:
                share = g / (window * window)
                if stride == window and h % window == 0 and w % window == 0:
                    dx = np.repeat(np.repeat(share, window, axis=2), window, axis=3)
                else:
                    ni = np.arange(n)[:, None, None, None, None]
                    ci = np.arange(c)[None, :, None, None, None]
                    base_i = stride * np.arange(ho)[None, None, :, None, None]
                    base_j = stride * np.arange(wo)[None, None, None, :, None]
                    off = np.arange(window * window)[None, None, None, None, :]
                    ii = base_i + off // window
                    jj = base_j + off % window
                    np.add.at(dx, (ni, ci, ii, jj), share[..., None])
            x._accumulate(dx)
        return run

    out = Tensor._result(np.ascontiguousarray(data), (x,), bw)
    return out


def global_pool(x: Tensor, kind: str, axis: str = "spatial") -> Tensor:
    """Reduce [N,C,H,W] over space (-> [N,C,1,1]) or channels (-> [N,1,H,W])."""
    if kind not in ("max", "avg"):
        raise ValueError(f"pool kind must be 'max' or 'avg', got {kind!r}")
    if axis not in ("spatial", "channel"):
        raise ValueError(f"axis must be 'spatial' or 'channel', got {axis!r}")
    if kind == "avg":
        axes = (2, 3) if axis == "spatial" else (1,)
        return x.mean(axis=axes, keepdims=True)

    n, c, h, w = x.data.shape
    if axis == "spatial":
        flat = x.data.reshape(n, c, h * w)
        idx = flat.argmax(axis=-1)
        data = np.take_along_axis(flat, idx[..., None], axis=-1).reshape(n, c, 1, 1)
    else:
        idx = x.data.argmax(axis=1)
        data = np.take_along_axis(x.data, idx[:, None], axis=1)

    def bw():
        def run():
            if not x.requires_grad:
                return
            g = out.grad
            dx = np.zeros_like(x.data)
            if axis == "spatial":
                dxf = dx.reshape(n, c, h * w)
                np.put_along_axis(dxf, idx[..., None], g.reshape(n, c, 1), axis=-1)
            else:
                np.put_along_axis(dx, idx[:, None], g, axis=1)
            x._accumulate(dx)
        return run

    out = Tensor._result(data, (x,), bw)
    return out


def upsample2d(x: Tensor, factor: int = 2) -> Tensor:
    """Nearest-neighbor upsampling; gradient sums the replicated cells."""
    if factor != 2:
        raise ShapeError(f"upsample2d supports factor 2 only, got {factor}")
    n, c, h, w = x.data.shape
    data = np.repeat(np.repeat(x.data, factor, axis=2), factor, axis=3)

    def bw():
        def run():
            if x.requires_grad:
                g = out.grad.reshape(n, c, h, factor, w, factor)
                x._accumulate(g.sum(axis=(3, 5)))
        return run

    out = Tensor._result(data, (x,), bw)
    return out


# ---- normalization --------------------------------------------------------------


def group_norm(x: Tensor, groups: int, gamma: Tensor, beta: Tensor,
               eps: float = 1e-5) -> Tensor:
    """Zero-mean/unit-variance per (sample, channel group), then affine."""
    n, c, h, w = x.data.shape
    if c % groups != 0:
        raise ShapeError(f"group_norm: {c} channels not divisible into {groups} groups")
    if gamma.data.shape != (c,) or beta.data.shape != (c,):
        raise ShapeError(f"group_norm: affine params must have shape ({c},)")
    m = (c // groups) * h * w
    xg = x.data.reshape(n, groups, m)
    mean = xg.mean(axis=2, keepdims=True)
    centered = xg - mean
    var = np.mean(centered * centered, axis=2, keepdims=True)
    inv_std = 1.0 / np.sqrt(var + np.asarray(eps, dtype=x.data.dtype))
    xhat = centered * inv_std
    data = xhat.reshape(n, c, h, w) * gamma.data.reshape(1, c, 1, 1) \
        + beta.data.reshape(1, c, 1, 1)

    def bw():
        def run():
            g = out.grad
            gx = g * gamma.data.reshape(1, c, 1, 1)
            if gamma.requires_grad:
                gamma._accumulate((g * xhat.reshape(n, c, h, w)).sum(axis=(0, 2, 3)))
            if beta.requires_grad:
                beta._accumulate(g.sum(axis=(0, 2, 3)))
            if x.requires_grad:
                dxhat = gx.reshape(n, groups, m)
                s1 = dxhat.sum(axis=2, keepdims=True)
                s2 = (dxhat * xhat).sum(axis=2, keepdims=True)
                dx = inv_std * (dxhat - (s1 + xhat * s2) / m)
                x._accumulate(dx.reshape(n, c, h, w))
        return run

    out = Tensor._result(data, (x, gamma, beta), bw)
    return out


# ---- serialization ---------------------------------------------------------------

_DTYPE_TAGS = {"f32": np.dtype("<f4"), "f64": np.dtype("<f8")}


def array_to_bytes(arr: np.ndarray) -> bytes:
    """JSON header line + little-endian payload."""
    if arr.dtype == np.float32:
        tag, le = "f32", "<f4"
    elif arr.dtype == np.float64:
        tag, le = "f64", "<f8"
    else:
        raise ValueError(f"unsupported dtype for serialization: {arr.dtype}")
    header = json.dumps({"shape": list(arr.shape), "dtype": tag}) + "\n"
    return header.encode("ascii") + np.ascontiguousarray(arr, dtype=le).tobytes()


def array_from_stream(stream) -> np.ndarray:
    """Read one serialized array from a binary file object."""
    header = stream.readline()
    if not header:
        raise EOFError("missing tensor header")
    try:
        meta = json.loads(header.decode("ascii"))
        shape = tuple(int(d) for d in meta["shape"])
        dtype = _DTYPE_TAGS[meta["dtype"]]
    except (ValueError, KeyError, UnicodeDecodeError) as exc:
        raise EOFError(f"corrupt or truncated tensor header: {exc}") from exc
    nbytes = int(np.prod(shape, dtype=np.int64)) * dtype.itemsize if shape else dtype.itemsize
    payload = stream.read(nbytes)
    if len(payload) != nbytes:
        raise EOFError(f"truncated tensor payload: wanted {nbytes} bytes, got {len(payload)}")
    arr = np.frombuffer(payload, dtype=dtype).reshape(shape)
    return arr.astype(dtype.newbyteorder("="), copy=True)
