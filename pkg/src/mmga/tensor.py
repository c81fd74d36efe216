"""Dense tensor substrate with reverse-mode automatic differentiation.

Tensors wrap numpy arrays in the canonical (batch, channel, height, width)
row-major layout; lower-rank arrays (matrices, vectors, scalars) appear as
intermediate values.  Every differentiable operator records a closure that
propagates gradients to its inputs; ``Tensor.backward`` runs them in reverse
topological order.  Gradients accumulate additively -- callers zero them
between optimization steps.

Arithmetic is float32 by default.  Pass ``dtype=np.float64`` when building
leaf tensors to run the whole graph in 64-bit, which is what the
finite-difference gradient checks use.
"""

from __future__ import annotations

import struct
from typing import Iterable, Sequence

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

TENSOR_MAGIC = b"MMGA-TNS"


class ShapeError(ValueError):
    """Operands have shapes the operator contract does not allow."""


class DegenerateFeatureError(ValueError):
    """A feature row had (near-)zero norm where a unit vector was required."""


class Tensor:
    """A dense numeric array plus an optional gradient buffer.

    Attributes:
        data: the values, a numpy array (rank <= 4).
        grad: accumulated gradient of the same shape, or None before backward.
        requires_grad: whether backward should populate ``grad``.
    """

    __slots__ = ("data", "grad", "requires_grad", "_parents", "_backward")

    def __init__(self, data, requires_grad: bool = False, dtype=None):
        if isinstance(data, Tensor):
            data = data.data
        if dtype is None:
            # float32 unless handed float64 values (the gradient-check mode);
            # np.generic covers 0-d reduction results, which are numpy scalars.
            keep64 = (
                isinstance(data, (np.ndarray, np.generic))
                and data.dtype == np.float64
            )
            dtype = np.float64 if keep64 else np.float32
        arr = np.asarray(data, dtype=dtype)
        if arr.dtype not in (np.float32, np.float64):
            arr = arr.astype(np.float32)
        if arr.ndim > 4:
            raise ShapeError(f"tensors are at most rank 4, got shape {arr.shape}")
        self.data = arr
        self.grad = None
        self.requires_grad = requires_grad
        self._parents: tuple[Tensor, ...] = ()
        self._backward = None

    # -- construction helpers -------------------------------------------------

    @staticmethod
    def zeros(shape, requires_grad=False, dtype=np.float32) -> "Tensor":
        return Tensor(np.zeros(shape, dtype=dtype), requires_grad=requires_grad)

    @staticmethod
    def ones(shape, requires_grad=False, dtype=np.float32) -> "Tensor":
        return Tensor(np.ones(shape, dtype=dtype), requires_grad=requires_grad)

    @property
    def shape(self):
        return self.data.shape

    @property
    def ndim(self):
        return self.data.ndim

    @property
    def size(self):
        return self.data.size

    @property
    def dtype(self):
        return self.data.dtype

    def item(self) -> float:
        return float(self.data)

    def detach(self) -> "Tensor":
        return Tensor(self.data)

    def zero_grad(self):
        self.grad = None

    def __repr__(self):
        return f"Tensor(shape={self.data.shape}, requires_grad={self.requires_grad})"

    # -- autodiff plumbing ----------------------------------------------------

    def _accumulate(self, g: np.ndarray):
        g = _unbroadcast(g, self.data.shape)
        if self.grad is None:
            self.grad = g.astype(self.data.dtype, copy=True)
        else:
            self.grad += g

    def backward(self):
        """Populate ``grad`` on every reachable tensor with requires_grad.

        Only defined for scalar results (the training losses).  Gradients add
        into existing buffers, so reusing a tensor in several places, or
        calling backward twice without zeroing, sums contributions.
        """
        if self.data.size != 1:
            raise ShapeError(
                f"backward requires a scalar, got shape {self.data.shape}"
            )
        topo: list[Tensor] = []
        visited: set[int] = set()
        stack: list[tuple[Tensor, bool]] = [(self, False)]
        while stack:
            node, processed = stack.pop()
            if processed:
                topo.append(node)
                continue
            if id(node) in visited:
                continue
            visited.add(id(node))
            stack.append((node, True))
            for p in node._parents:
                if id(p) not in visited:
                    stack.append((p, False))
        self._accumulate(np.ones_like(self.data))
        for node in reversed(topo):
            if node._backward is not None and node.grad is not None:
                node._backward(node.grad)

    # -- arithmetic -----------------------------------------------------------

    def __add__(self, other):
        return add(self, _as_tensor(other, self.dtype))

    __radd__ = __add__

    def __sub__(self, other):
        return sub(self, _as_tensor(other, self.dtype))

    def __rsub__(self, other):
        return sub(_as_tensor(other, self.dtype), self)

    def __mul__(self, other):
        return mul(self, _as_tensor(other, self.dtype))

    __rmul__ = __mul__

    def __truediv__(self, other):
        return div(self, _as_tensor(other, self.dtype))

    def __neg__(self):
        return mul(self, _as_tensor(-1.0, self.dtype))

    def reshape(self, shape):
        return reshape(self, shape)

    def sum(self, axis=None, keepdims=False):
        return reduce_sum(self, axis=axis, keepdims=keepdims)

    def mean(self, axis=None, keepdims=False):
        return reduce_mean(self, axis=axis, keepdims=keepdims)


def _as_tensor(x, dtype) -> Tensor:
    if isinstance(x, Tensor):
        return x
    return Tensor(np.asarray(x, dtype=dtype))


def _unbroadcast(g: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    """Sum gradient over axes that numpy broadcasting expanded."""
    if g.shape == shape:
        return g
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for axis, extent in enumerate(shape):
        if extent == 1 and g.shape[axis] != 1:
            g = g.sum(axis=axis, keepdims=True)
    return g


def _make(data: np.ndarray, parents: Sequence[Tensor], backward) -> Tensor:
    out = Tensor(data)
    if any(p.requires_grad for p in parents):
        out.requires_grad = True
        out._parents = tuple(parents)
        out._backward = backward
    return out


# -- elementwise and broadcast operators ---------------------------------------


def add(a: Tensor, b: Tensor) -> Tensor:
    def backward(g):
        a._accumulate(g)
        b._accumulate(g)

    return _make(a.data + b.data, (a, b), backward)


def sub(a: Tensor, b: Tensor) -> Tensor:
    def backward(g):
        a._accumulate(g)
        b._accumulate(-g)

    return _make(a.data - b.data, (a, b), backward)


def mul(a: Tensor, b: Tensor) -> Tensor:
    def backward(g):
        a._accumulate(g * b.data)
        b._accumulate(g * a.data)

    return _make(a.data * b.data, (a, b), backward)


def div(a: Tensor, b: Tensor) -> Tensor:
    def backward(g):
        a._accumulate(g / b.data)
        b._accumulate(-g * a.data / (b.data * b.data))

    return _make(a.data / b.data, (a, b), backward)


def elementwise_mul(a: Tensor, b: Tensor) -> Tensor:
    """Hadamard product with broadcast, e.g. features times an attention map.

    Accepts equal shapes or any numpy-broadcastable pair whose batch extents
    agree; anything else is a shape error rather than silent broadcasting.
    """
    if a.ndim != b.ndim:
        raise ShapeError(f"rank mismatch: {a.shape} vs {b.shape}")
    if a.ndim >= 1 and a.shape[0] != b.shape[0]:
        raise ShapeError(f"batch extents differ: {a.shape} vs {b.shape}")
    for ea, eb in zip(a.shape, b.shape):
        if ea != eb and ea != 1 and eb != 1:
            raise ShapeError(f"incompatible shapes {a.shape} and {b.shape}")
    return mul(a, b)


def relu(x: Tensor) -> Tensor:
    mask = x.data > 0

    def backward(g):
        x._accumulate(g * mask)

    return _make(np.where(mask, x.data, 0), (x,), backward)


def sigmoid(x: Tensor) -> Tensor:
    # Split by sign so exp never overflows.
    out = np.empty_like(x.data)
    pos = x.data >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x.data[pos]))
    e = np.exp(x.data[~pos])
    out[~pos] = e / (1.0 + e)

    def backward(g):
        x._accumulate(g * out * (1.0 - out))

    return _make(out, (x,), backward)


def sqrt(x: Tensor) -> Tensor:
    out = np.sqrt(x.data)

    def backward(g):
        # Subgradient 0 at x == 0 so exact-zero losses stay finite.
        safe = np.where(out > 0, out, 1.0)
        x._accumulate(np.where(out > 0, g * 0.5 / safe, 0.0))

    return _make(out, (x,), backward)


def reshape(x: Tensor, shape) -> Tensor:
    orig = x.data.shape

    def backward(g):
        x._accumulate(g.reshape(orig))

    return _make(x.data.reshape(shape), (x,), backward)


def reduce_sum(x: Tensor, axis=None, keepdims=False) -> Tensor:
    def backward(g):
        if axis is None:
            x._accumulate(np.broadcast_to(g, x.data.shape))
        else:
            gg = g if keepdims else np.expand_dims(g, axis)
            x._accumulate(np.broadcast_to(gg, x.data.shape))

    return _make(x.data.sum(axis=axis, keepdims=keepdims), (x,), backward)


def reduce_mean(x: Tensor, axis=None, keepdims=False) -> Tensor:
    if axis is None:
        count = x.data.size
    else:
        axes = axis if isinstance(axis, tuple) else (axis,)
        count = 1
        for ax in axes:
            count *= x.data.shape[ax]

    def backward(g):
        if axis is None:
            x._accumulate(np.broadcast_to(g / count, x.data.shape))
        else:
            gg = g if keepdims else np.expand_dims(g, axis)
            x._accumulate(np.broadcast_to(gg / count, x.data.shape))

    return _make(x.data.mean(axis=axis, keepdims=keepdims), (x,), backward)


def reduce_max(x: Tensor, axis: int) -> Tensor:
    """Max along one axis; gradient routes to the first occurrence."""
    return _extremum(x, axis, np.max, np.argmax)


def reduce_min(x: Tensor, axis: int) -> Tensor:
    """Min along one axis; gradient routes to the first occurrence."""
    return _extremum(x, axis, np.min, np.argmin)


def _extremum(x: Tensor, axis: int, reducer, argreducer) -> Tensor:
    out = reducer(x.data, axis=axis)
    idx = argreducer(x.data, axis=axis)

    def backward(g):
        buf = np.zeros_like(x.data)
        np.put_along_axis(
            buf, np.expand_dims(idx, axis), np.expand_dims(g, axis), axis
        )
        x._accumulate(buf)

    return _make(out, (x,), backward)


def concat(parts: Iterable[Tensor], axis: int = 1) -> Tensor:
    parts = list(parts)
    if not parts:
        raise ShapeError("concat needs at least one tensor")
    extents = [p.data.shape[axis] for p in parts]
    splits = np.cumsum(extents)[:-1]

    def backward(g):
        for p, piece in zip(parts, np.split(g, splits, axis=axis)):
            p._accumulate(piece)

    return _make(np.concatenate([p.data for p in parts], axis=axis), parts, backward)


def concat_channels(parts: Iterable[Tensor]) -> Tensor:
    """Join per-branch feature matrices (n, d_i) into one (n, sum d_i)."""
    parts = list(parts)
    for p in parts:
        if p.ndim != 2:
            raise ShapeError("concat_channels expects matrices")
    if len({p.shape[0] for p in parts}) > 1:
        raise ShapeError("concat_channels needs matching row counts")
    return concat(parts, axis=1)


def select_columns(x: Tensor, cols: np.ndarray) -> Tensor:
    """Pick one entry per row of a matrix: out[i] = x[i, cols[i]]."""
    rows = np.arange(x.data.shape[0])

    def backward(g):
        buf = np.zeros_like(x.data)
        np.add.at(buf, (rows, cols), g)
        x._accumulate(buf)

    return _make(x.data[rows, cols], (x,), backward)


# -- linear algebra -------------------------------------------------------------


def linear(x: Tensor, weight: Tensor, bias: Tensor | None = None) -> Tensor:
    """Affine map of row vectors: x (n, d_in) @ weight.T (+ bias)."""
    if x.ndim != 2 or weight.ndim != 2:
        raise ShapeError("linear expects matrices")
    if x.shape[1] != weight.shape[1]:
        raise ShapeError(
            f"inner extents disagree: input {x.shape} vs weight {weight.shape}"
        )
    out = x.data @ weight.data.T
    if bias is not None:
        out = out + bias.data

    def backward(g):
        x._accumulate(g @ weight.data)
        weight._accumulate(g.T @ x.data)
        if bias is not None:
            bias._accumulate(g.sum(axis=0))

    parents = (x, weight) if bias is None else (x, weight, bias)
    return _make(out, parents, backward)


def l2_normalize(x: Tensor, eps: float = 1e-12) -> Tensor:
    """Scale each row of a matrix to unit Euclidean norm."""
    if x.ndim != 2:
        raise ShapeError("l2_normalize expects a matrix")
    norms = np.sqrt((x.data * x.data).sum(axis=1))
    if np.any(norms <= eps):
        raise DegenerateFeatureError("cannot normalize a (near-)zero feature row")
    sq = reduce_sum(mul(x, x), axis=1, keepdims=True)
    return div(x, sqrt(sq))


# -- spatial operators ----------------------------------------------------------


def conv2d(
    x: Tensor,
    weight: Tensor,
    bias: Tensor | None = None,
    stride: int = 1,
    padding: int = 0,
) -> Tensor:
    """2-D convolution, square kernel, NCHW layout.

    weight is (c_out, c_in, k, k).  Output extent along each spatial axis is
    (extent + 2*padding - k) // stride + 1 and must be positive.
    """
    if x.ndim != 4 or weight.ndim != 4:
        raise ShapeError("conv2d expects 4-D input and weight")
    n, c_in, h, w = x.shape
    c_out, wc_in, kh, kw = weight.shape
    if wc_in != c_in:
        raise ShapeError(f"channel mismatch: input has {c_in}, weight expects {wc_in}")
    if kh != kw:
        raise ShapeError("only square kernels are supported")
    k, s, p = kh, stride, padding
    h_out = (h + 2 * p - k) // s + 1
    w_out = (w + 2 * p - k) // s + 1
    if h_out <= 0 or w_out <= 0:
        raise ShapeError(
            f"non-positive output extent for input {h}x{w}, k={k}, stride={s}, pad={p}"
        )

    if k == 1 and p == 0:
        # 1x1 kernels are a channel mixing; skip patch extraction.
        xs = x.data[:, :, ::s, ::s] if s > 1 else x.data
        wmat = weight.data.reshape(c_out, c_in)
        out = np.einsum("oc,nchw->nohw", wmat, xs, optimize=True)
        if bias is not None:
            out = out + bias.data.reshape(1, c_out, 1, 1)

        def backward_1x1(g):
            xg = np.zeros_like(x.data)
            gx = np.einsum("oc,nohw->nchw", wmat, g, optimize=True)
            if s > 1:
                xg[:, :, ::s, ::s] = gx
            else:
                xg = gx
            x._accumulate(xg)
            wg = np.einsum("nohw,nchw->oc", g, xs, optimize=True)
            weight._accumulate(wg.reshape(weight.shape))
            if bias is not None:
                bias._accumulate(g.sum(axis=(0, 2, 3)))

        parents = (x, weight) if bias is None else (x, weight, bias)
        return _make(out, parents, backward_1x1)

    if p > 0:
        xp = np.pad(x.data, ((0, 0), (0, 0), (p, p), (p, p)))
    else:
        xp = x.data
    # (n, c, h_out, w_out, k, k) patch view, then one big matmul.
    windows = sliding_window_view(xp, (k, k), axis=(2, 3))[:, :, ::s, ::s]
    col = windows.transpose(0, 2, 3, 1, 4, 5).reshape(n * h_out * w_out, c_in * k * k)
    wmat = weight.data.reshape(c_out, -1)
    out = (col @ wmat.T).reshape(n, h_out, w_out, c_out).transpose(0, 3, 1, 2)
    out = np.ascontiguousarray(out)
    if bias is not None:
        out = out + bias.data.reshape(1, c_out, 1, 1)

    def backward(g):
        gmat = g.transpose(0, 2, 3, 1).reshape(n * h_out * w_out, c_out)
        weight._accumulate((gmat.T @ col).reshape(weight.shape))
        if bias is not None:
            bias._accumulate(g.sum(axis=(0, 2, 3)))
        dcol = (gmat @ wmat).reshape(n, h_out, w_out, c_in, k, k)
        dxp = np.zeros_like(xp)
        for i in range(k):
            for j in range(k):
                dxp[:, :, i : i + s * h_out : s, j : j + s * w_out : s] += (
                    dcol[:, :, :, :, i, j].transpose(0, 3, 1, 2)
                )
        x._accumulate(dxp[:, :, p : p + h, p : p + w] if p > 0 else dxp)

    parents = (x, weight) if bias is None else (x, weight, bias)
    return _make(out, parents, backward)


def avg_pool_2x2(x: Tensor) -> Tensor:
    """Halve both spatial extents by averaging non-overlapping 2x2 blocks."""
    if x.ndim != 4:
        raise ShapeError("avg_pool_2x2 expects a 4-D tensor")
    n, c, h, w = x.shape
    if h % 2 or w % 2:
        raise ShapeError(f"spatial extents must be even, got {h}x{w}")
    out = x.data.reshape(n, c, h // 2, 2, w // 2, 2).mean(axis=(3, 5))

    def backward(g):
        spread = np.repeat(np.repeat(g, 2, axis=2), 2, axis=3) * 0.25
        x._accumulate(spread)

    return _make(out, (x,), backward)


def global_avg_pool(x: Tensor) -> Tensor:
    """Mean over all spatial positions per channel: (n,c,h,w) -> (n,c)."""
    if x.ndim != 4:
        raise ShapeError("global_avg_pool expects a 4-D tensor")
    n, c, h, w = x.shape
    if h * w == 0:
        raise ShapeError("empty spatial extent")

    def backward(g):
        x._accumulate(
            np.broadcast_to(g.reshape(n, c, 1, 1) / (h * w), x.data.shape)
        )

    return _make(x.data.mean(axis=(2, 3)), (x,), backward)


def batch_norm(
    x: Tensor,
    gamma: Tensor,
    beta: Tensor,
    running_mean: np.ndarray,
    running_var: np.ndarray,
    training: bool,
    momentum: float = 0.1,
    eps: float = 1e-5,
) -> Tensor:
    """Per-channel normalization over a 4-D batch.

    Training mode normalizes with batch statistics and updates the running
    buffers in place (biased variance for normalization, unbiased for the
    running estimate).  Eval mode applies the running statistics as constants.
    """
    if x.ndim != 4:
        raise ShapeError("batch_norm expects a 4-D tensor")
    c = x.shape[1]
    if gamma.shape != (c,) or beta.shape != (c,):
        raise ShapeError(f"per-channel parameters must have extent {c}")
    g4 = reshape(gamma, (1, c, 1, 1))
    b4 = reshape(beta, (1, c, 1, 1))
    if training:
        mu = reduce_mean(x, axis=(0, 2, 3), keepdims=True)
        centered = sub(x, mu)
        var = reduce_mean(mul(centered, centered), axis=(0, 2, 3), keepdims=True)
        count = x.data.size // c
        bessel = count / max(count - 1, 1)
        running_mean *= 1.0 - momentum
        running_mean += momentum * mu.data.reshape(c)
        running_var *= 1.0 - momentum
        running_var += momentum * bessel * var.data.reshape(c)
        inv = div(_as_tensor(1.0, x.dtype), sqrt(add(var, _as_tensor(eps, x.dtype))))
        return add(mul(mul(centered, inv), g4), b4)
    scale = (gamma.data / np.sqrt(running_var + eps)).reshape(1, c, 1, 1)
    shift = (beta.data - running_mean * (gamma.data / np.sqrt(running_var + eps))).reshape(1, c, 1, 1)

    def backward(g):
        x._accumulate(g * scale)
        xn = (x.data - running_mean.reshape(1, c, 1, 1)) / np.sqrt(
            running_var.reshape(1, c, 1, 1) + eps
        )
        gamma._accumulate((g * xn).sum(axis=(0, 2, 3)))
        beta._accumulate(g.sum(axis=(0, 2, 3)))

    return _make(x.data * scale + shift, (x, gamma, beta), backward)


def cross_entropy(logits: Tensor, labels: np.ndarray) -> Tensor:
    """Mean negative log-softmax at the true class, max-stabilized."""
    if logits.ndim != 2:
        raise ShapeError("cross_entropy expects (n, num_classes) logits")
    n, num_classes = logits.shape
    labels = np.asarray(labels)
    if labels.shape != (n,):
        raise ShapeError(f"labels must have shape ({n},)")
    if labels.min() < 0 or labels.max() >= num_classes:
        raise ValueError(
            f"label out of range [0, {num_classes}): {labels.min()}..{labels.max()}"
        )
    z = logits.data - logits.data.max(axis=1, keepdims=True)
    ez = np.exp(z)
    probs = ez / ez.sum(axis=1, keepdims=True)
    lse = np.log(ez.sum(axis=1))
    loss = (lse - z[np.arange(n), labels]).sum() / n

    def backward(g):
        d = probs.copy()
        d[np.arange(n), labels] -= 1.0
        logits._accumulate(g * d / n)

    return _make(np.asarray(loss, dtype=logits.dtype), (logits,), backward)


# -- serialization --------------------------------------------------------------


def save_tensor(path, t: Tensor | np.ndarray) -> None:
    """Write little-endian: magic, four u32 extents, then f32 values row-major.

    Shapes shorter than 4 extents are padded with trailing 1s.
    """
    arr = t.data if isinstance(t, Tensor) else np.asarray(t)
    shape = tuple(arr.shape) + (1,) * (4 - arr.ndim)
    with open(path, "wb") as fh:
        fh.write(TENSOR_MAGIC)
        fh.write(struct.pack("<4I", *shape))
        fh.write(np.ascontiguousarray(arr, dtype="<f4").tobytes())


def load_tensor(path) -> np.ndarray:
    """Read a tensor file back as a float32 array with 4 extents."""
    with open(path, "rb") as fh:
        magic = fh.read(8)
        if magic != TENSOR_MAGIC:
            raise ValueError(f"{path}: bad magic {magic!r}")
        shape = struct.unpack("<4I", fh.read(16))
        count = int(np.prod(shape))
        raw = fh.read(4 * count)
        if len(raw) != 4 * count:
            raise ValueError(f"{path}: truncated tensor payload")
        return np.frombuffer(raw, dtype="<f4").reshape(shape).copy()
