"""Dense tensors with reverse-mode automatic differentiation.

Every layer primitive the network needs lives here: convolution (im2col),
batch normalization, ReLU, max/average pooling, affine maps, feature
concatenation and softmax cross-entropy.  Each op records its inputs and a
backward rule on the implicit tape formed by the tensor graph; ``backward``
walks that tape once in reverse topological order.
"""

from __future__ import annotations

from typing import Callable, Optional, Sequence

import numpy as np

from .errors import LabelError, NumericError, ShapeError

DEFAULT_DTYPE = np.float32

_debug_checks = False


def set_debug_checks(enabled: bool) -> None:
    """Toggle NaN/Inf detection after every op (off by default)."""
    global _debug_checks
    _debug_checks = enabled


def _coerce(data, dtype=None) -> np.ndarray:
    arr = np.asarray(data)
    if dtype is not None:
        return arr.astype(dtype, copy=False)
    if arr.dtype in (np.float32, np.float64):
        return arr
    return arr.astype(DEFAULT_DTYPE)


class Tensor:
    """N-dimensional float array participating in the differentiation tape.

    Gradients accumulate into ``grad`` across backward calls until
    ``zero_grad`` is called.  Image data uses batch x channel x height x
    width layout.
    """

    __slots__ = ("data", "requires_grad", "grad", "_parents", "_backward")

    def __init__(self, data, requires_grad: bool = False, dtype=None):
        self.data = _coerce(data, dtype)
        self.requires_grad = requires_grad
        self.grad: Optional[np.ndarray] = None
        self._parents: tuple[Tensor, ...] = ()
        self._backward: Optional[Callable[[np.ndarray], Sequence[Optional[np.ndarray]]]] = None

    @property
    def shape(self):
        return self.data.shape

    @property
    def dtype(self):
        return self.data.dtype

    @property
    def size(self) -> int:
        return self.data.size

    def item(self) -> float:
        return float(self.data)

    def zero_grad(self) -> None:
        self.grad = None

    @property
    def _tracked(self) -> bool:
        return self.requires_grad or bool(self._parents)

    def __repr__(self):
        return f"Tensor(shape={self.data.shape}, dtype={self.data.dtype}, requires_grad={self.requires_grad})"


def _check_finite(*arrays: np.ndarray) -> None:
    if not _debug_checks:
        return
    for a in arrays:
        if not np.all(np.isfinite(a)):
            raise NumericError("non-finite value encountered")


def _node(data: np.ndarray, parents: Sequence[Tensor], backward) -> Tensor:
    """Wrap an op result, recording it on the tape if any parent is tracked."""
    _check_finite(data)
    out = Tensor(data)
    if any(p._tracked for p in parents):
        out._parents = tuple(parents)
        out._backward = backward
    return out


# ---------------------------------------------------------------------------
# im2col machinery (one well-tested inner kernel behind conv2d)

def _out_extent(size: int, k: int, stride: int, padding: int) -> int:
    return (size + 2 * padding - k) // stride + 1


def _im2col(x: np.ndarray, kh: int, kw: int, stride: int, padding: int) -> np.ndarray:
    n, c, h, w = x.shape
    oh = _out_extent(h, kh, stride, padding)
    ow = _out_extent(w, kw, stride, padding)
    if padding > 0:
        x = np.pad(x, ((0, 0), (0, 0), (padding, padding), (padding, padding)))
    cols = np.empty((n, c, kh, kw, oh, ow), dtype=x.dtype)
    for i in range(kh):
        i_max = i + stride * oh
        for j in range(kw):
            j_max = j + stride * ow
            cols[:, :, i, j, :, :] = x[:, :, i:i_max:stride, j:j_max:stride]
    return cols.transpose(0, 4, 5, 1, 2, 3).reshape(n * oh * ow, c * kh * kw)


def _col2im(cols: np.ndarray, x_shape, kh: int, kw: int, stride: int, padding: int) -> np.ndarray:
    n, c, h, w = x_shape
    oh = _out_extent(h, kh, stride, padding)
    ow = _out_extent(w, kw, stride, padding)
    cols = cols.reshape(n, oh, ow, c, kh, kw).transpose(0, 3, 4, 5, 1, 2)
    img = np.zeros((n, c, h + 2 * padding, w + 2 * padding), dtype=cols.dtype)
    for i in range(kh):
        i_max = i + stride * oh
        for j in range(kw):
            j_max = j + stride * ow
            img[:, :, i:i_max:stride, j:j_max:stride] += cols[:, :, i, j, :, :]
    if padding > 0:
        return img[:, :, padding:padding + h, padding:padding + w]
    return img


# ---------------------------------------------------------------------------
# Primitive ops


def conv2d(x: Tensor, weight: Tensor, bias: Optional[Tensor] = None,
           stride: int = 1, padding: int = 0) -> Tensor:
    """2-D cross-correlation over NCHW input, differentiable in x/weight/bias."""
    if x.data.ndim != 4 or weight.data.ndim != 4:
        raise ShapeError("conv2d expects 4-D input and weight")
    n, cin, h, w = x.shape
    cout, cin_w, kh, kw = weight.shape
    if cin != cin_w:
        raise ShapeError(f"conv2d channel mismatch: input {cin}, weight {cin_w}")
    if kh > h + 2 * padding or kw > w + 2 * padding:
        raise ShapeError("conv2d kernel larger than padded input")
    if bias is not None and bias.shape != (cout,):
        raise ShapeError("conv2d bias must have one value per output channel")
    _check_finite(x.data, weight.data)

    oh = _out_extent(h, kh, stride, padding)
    ow = _out_extent(w, kw, stride, padding)
    cols = _im2col(x.data, kh, kw, stride, padding)
    wmat = weight.data.reshape(cout, -1)
    out = cols @ wmat.T
    if bias is not None:
        out = out + bias.data
    out = out.reshape(n, oh, ow, cout).transpose(0, 3, 1, 2)

    def backward(grad: np.ndarray):
        gmat = grad.transpose(0, 2, 3, 1).reshape(-1, cout)
        gw = (gmat.T @ cols).reshape(weight.shape)
        gx = _col2im(gmat @ wmat, x.shape, kh, kw, stride, padding)
        if bias is None:
            return gx, gw
        return gx, gw, gmat.sum(axis=0)

    parents = (x, weight) if bias is None else (x, weight, bias)
    return _node(out, parents, backward)


class BatchNormState:
    """Running mean/variance accumulators for one batch-norm layer."""

    def __init__(self, channels: int, dtype=DEFAULT_DTYPE):
        self.running_mean = np.zeros(channels, dtype=dtype)
        self.running_var = np.ones(channels, dtype=dtype)

    def copy(self) -> "BatchNormState":
        out = BatchNormState(len(self.running_mean), self.running_mean.dtype)
        out.running_mean = self.running_mean.copy()
        out.running_var = self.running_var.copy()
        return out


def batch_norm2d(x: Tensor, gamma: Tensor, beta: Tensor, state: BatchNormState,
                 mode: str = "train", eps: float = 1e-5, momentum: float = 0.1,
                 update_stats: Optional[bool] = None) -> Tensor:
    """Per-channel normalization over N,H,W.

    Train mode normalizes with batch statistics and (unless ``update_stats``
    is False, e.g. for frozen streams) updates the running stats by
    exponential moving average.  Eval mode uses the running stats.
    """
    if x.data.ndim != 4:
        raise ShapeError("batch_norm2d expects NCHW input")
    n, c, h, w = x.shape
    count = n * h * w
    if count == 0:
        raise ShapeError("batch_norm2d on empty batch")
    if mode not in ("train", "eval"):
        raise ValueError(f"unknown mode {mode!r}")
    if mode == "train" and count < 2:
        raise ShapeError("train-mode batch norm needs at least 2 values per channel")
    _check_finite(x.data, gamma.data, beta.data)
    if update_stats is None:
        update_stats = mode == "train"

    g = gamma.data.reshape(1, c, 1, 1)
    b = beta.data.reshape(1, c, 1, 1)

    if mode == "train":
        mean = x.data.mean(axis=(0, 2, 3))
        var = x.data.var(axis=(0, 2, 3))
        if update_stats:
            state.running_mean = ((1 - momentum) * state.running_mean
                                  + momentum * mean.astype(state.running_mean.dtype))
            state.running_var = ((1 - momentum) * state.running_var
                                 + momentum * var.astype(state.running_var.dtype))
        inv_std = 1.0 / np.sqrt(var + eps)
        xhat = (x.data - mean.reshape(1, c, 1, 1)) * inv_std.reshape(1, c, 1, 1)
        out = g * xhat + b

        def backward(grad: np.ndarray):
            ggamma = (grad * xhat).sum(axis=(0, 2, 3))
            gbeta = grad.sum(axis=(0, 2, 3))
            gy = grad * g
            m_gy = gy.mean(axis=(0, 2, 3), keepdims=True)
            m_gyx = (gy * xhat).mean(axis=(0, 2, 3), keepdims=True)
            gx = inv_std.reshape(1, c, 1, 1) * (gy - m_gy - xhat * m_gyx)
            return gx, ggamma, gbeta

    else:
        mean = state.running_mean.astype(x.dtype)
        var = state.running_var.astype(x.dtype)
        inv_std = 1.0 / np.sqrt(var + eps)
        xhat = (x.data - mean.reshape(1, c, 1, 1)) * inv_std.reshape(1, c, 1, 1)
        out = g * xhat + b

        def backward(grad: np.ndarray):
            ggamma = (grad * xhat).sum(axis=(0, 2, 3))
            gbeta = grad.sum(axis=(0, 2, 3))
            gx = grad * g * inv_std.reshape(1, c, 1, 1)
            return gx, ggamma, gbeta

    return _node(out, (x, gamma, beta), backward)


def relu(x: Tensor) -> Tensor:
    """Elementwise max(0, x); subgradient at 0 is 0."""
    mask = x.data > 0
    out = np.where(mask, x.data, 0)

    def backward(grad: np.ndarray):
        return (grad * mask,)

    return _node(out, (x,), backward)


def max_pool2d(x: Tensor, k: int, stride: int) -> Tensor:
    """Windowed maximum; gradient routes to the first argmax of each window."""
    if x.data.ndim != 4:
        raise ShapeError("max_pool2d expects NCHW input")
    n, c, h, w = x.shape
    if k > h or k > w:
        raise ShapeError("pool window larger than input")
    _check_finite(x.data)
    oh = _out_extent(h, k, stride, 0)
    ow = _out_extent(w, k, stride, 0)
    windows = np.empty((n, c, oh, ow, k * k), dtype=x.dtype)
    for i in range(k):
        i_max = i + stride * oh
        for j in range(k):
            j_max = j + stride * ow
            windows[:, :, :, :, i * k + j] = x.data[:, :, i:i_max:stride, j:j_max:stride]
    argmax = windows.argmax(axis=-1)
    out = np.take_along_axis(windows, argmax[..., None], axis=-1)[..., 0]

    def backward(grad: np.ndarray):
        gx = np.zeros_like(x.data)
        wi, wj = np.divmod(argmax, k)
        oi, oj = np.meshgrid(np.arange(oh), np.arange(ow), indexing="ij")
        rows = oi * stride + wi
        cols_ = oj * stride + wj
        ni = np.arange(n)[:, None, None, None]
        ci = np.arange(c)[None, :, None, None]
        np.add.at(gx, (ni, ci, rows, cols_), grad)
        return (gx,)

    return _node(out, (x,), backward)


def global_avg_pool(x: Tensor) -> Tensor:
    """Per-channel spatial mean: NCHW -> NC."""
    if x.data.ndim != 4:
        raise ShapeError("global_avg_pool expects NCHW input")
    n, c, h, w = x.shape
    out = x.data.mean(axis=(2, 3))

    def backward(grad: np.ndarray):
        gx = np.broadcast_to(grad[:, :, None, None] / (h * w), x.shape).astype(x.dtype)
        return (gx,)

    return _node(out, (x,), backward)


def linear(x: Tensor, weight: Tensor, bias: Optional[Tensor] = None) -> Tensor:
    """Affine map x @ W.T + b for NxDin input and DoutxDin weight."""
    if x.data.ndim != 2 or weight.data.ndim != 2:
        raise ShapeError("linear expects 2-D input and weight")
    if x.shape[1] != weight.shape[1]:
        raise ShapeError(f"linear inner dimensions disagree: {x.shape[1]} vs {weight.shape[1]}")
    if bias is not None and bias.shape != (weight.shape[0],):
        raise ShapeError("linear bias shape mismatch")
    _check_finite(x.data, weight.data)
    out = x.data @ weight.data.T
    if bias is not None:
        out = out + bias.data

    def backward(grad: np.ndarray):
        gx = grad @ weight.data
        gw = grad.T @ x.data
        if bias is None:
            return gx, gw
        return gx, gw, grad.sum(axis=0)

    parents = (x, weight) if bias is None else (x, weight, bias)
    return _node(out, parents, backward)


def add(a: Tensor, b: Tensor) -> Tensor:
    """Elementwise sum of same-shape tensors (residual shortcut join)."""
    if a.shape != b.shape:
        raise ShapeError(f"add shape mismatch: {a.shape} vs {b.shape}")
    out = a.data + b.data

    def backward(grad: np.ndarray):
        return grad, grad

    return _node(out, (a, b), backward)


def mul(a: Tensor, b: Tensor) -> Tensor:
    """Elementwise product of same-shape tensors."""
    if a.shape != b.shape:
        raise ShapeError(f"mul shape mismatch: {a.shape} vs {b.shape}")
    out = a.data * b.data

    def backward(grad: np.ndarray):
        return grad * b.data, grad * a.data

    return _node(out, (a, b), backward)


def sum_all(x: Tensor) -> Tensor:
    """Sum of all elements, as a scalar tensor."""
    out = np.asarray(x.data.sum(), dtype=x.dtype)

    def backward(grad: np.ndarray):
        return (np.broadcast_to(grad, x.shape).astype(x.dtype),)

    return _node(out, (x,), backward)


def concat_features(parts: Sequence[Tensor]) -> Tensor:
    """Feature-axis concatenation of NxDi tensors in the given order."""
    if not parts:
        raise ShapeError("concat_features needs at least one part")
    n = parts[0].shape[0]
    for p in parts:
        if p.data.ndim != 2 or p.shape[0] != n:
            raise ShapeError("concat_features parts must share the batch extent")
    widths = [p.shape[1] for p in parts]
    out = np.concatenate([p.data for p in parts], axis=1)

    def backward(grad: np.ndarray):
        grads = []
        off = 0
        for width in widths:
            grads.append(grad[:, off:off + width])
            off += width
        return grads

    return _node(out, tuple(parts), backward)


def softmax(logits: np.ndarray) -> np.ndarray:
    """Row-wise softmax with max-subtraction stabilization (plain array in/out)."""
    z = np.exp(logits - logits.max(axis=-1, keepdims=True))
    return z / z.sum(axis=-1, keepdims=True)


def softmax_cross_entropy(logits: Tensor, labels) -> Tensor:
    """Mean negative log-likelihood of integer class labels under softmax."""
    if logits.data.ndim != 2:
        raise ShapeError("softmax_cross_entropy expects NxK logits")
    n, k = logits.shape
    y = np.asarray(labels, dtype=np.int64)
    if y.shape != (n,):
        raise ShapeError("labels must be one class index per row")
    if y.size and (y.min() < 0 or y.max() >= k):
        raise LabelError(f"label out of range [0, {k})")
    shifted = logits.data - logits.data.max(axis=1, keepdims=True)
    log_z = np.log(np.exp(shifted).sum(axis=1))
    loss = float(np.mean(log_z - shifted[np.arange(n), y]))
    probs = softmax(logits.data)

    def backward(grad: np.ndarray):
        g = probs.copy()
        g[np.arange(n), y] -= 1.0
        return (g * (grad / n),)

    return _node(np.asarray(loss, dtype=logits.dtype), (logits,), backward)


# ---------------------------------------------------------------------------
# Backward pass and gradient checking


def backward(loss: Tensor) -> None:
    """Populate ``grad`` on every requires_grad tensor reachable from ``loss``.

    Gradients accumulate across calls until explicitly zeroed.  Each recorded
    op is visited exactly once, in reverse topological order.
    """
    if loss.size != 1:
        raise ShapeError("backward expects a scalar loss")

    topo: list[Tensor] = []
    seen: set[int] = set()
    stack: list[tuple[Tensor, bool]] = [(loss, False)]
    while stack:
        node, expanded = stack.pop()
        if expanded:
            topo.append(node)
            continue
        if id(node) in seen:
            continue
        seen.add(id(node))
        stack.append((node, True))
        for p in node._parents:
            if id(p) not in seen and p._tracked:
                stack.append((p, False))

    grads: dict[int, np.ndarray] = {id(loss): np.ones_like(loss.data)}
    for node in reversed(topo):
        g = grads.pop(id(node), None)
        if g is None:
            continue
        if node.requires_grad:
            if node.grad is None:
                node.grad = np.zeros_like(node.data)
            node.grad += g
        if node._backward is None:
            continue
        parent_grads = node._backward(g)
        for parent, pg in zip(node._parents, parent_grads):
            if pg is None or not parent._tracked:
                continue
            if id(parent) in grads:
                grads[id(parent)] += pg
            else:
                grads[id(parent)] = pg.astype(parent.dtype, copy=True)


def finite_diff_gradient(f: Callable[[Tensor], float], x: Tensor, h: float = 1e-5) -> np.ndarray:
    """Central-difference gradient estimate of a tensor-to-scalar function."""
    base = x.data
    grad = np.zeros_like(base)
    flat = grad.reshape(-1)
    for i in range(base.size):
        plus = base.copy().reshape(-1)
        minus = base.copy().reshape(-1)
        plus[i] += h
        minus[i] -= h
        fp = f(Tensor(plus.reshape(base.shape)))
        fm = f(Tensor(minus.reshape(base.shape)))
        flat[i] = (float(fp) - float(fm)) / (2 * h)
    return grad


# ---------------------------------------------------------------------------
# Serialization: textual header line, then little-endian element payload

_DTYPE_TAGS = {np.dtype(np.float32): "f32", np.dtype(np.float64): "f64"}
_TAG_DTYPES = {"f32": np.dtype("<f4"), "f64": np.dtype("<f8")}


def write_array(fh, arr: np.ndarray) -> None:
    """Write one array as 'shape: d0 d1 ... / dtype: f32|f64' + raw elements."""
    tag = _DTYPE_TAGS[np.dtype(arr.dtype)]
    dims = " ".join(str(d) for d in arr.shape)
    fh.write(f"shape: {dims} / dtype: {tag}\n".encode("ascii"))
    fh.write(np.ascontiguousarray(arr, dtype=_TAG_DTYPES[tag]).tobytes())


def read_array(fh) -> np.ndarray:
    """Inverse of write_array; raises FormatError on truncation or bad header."""
    from .errors import FormatError

    header = bytearray()
    while True:
        b = fh.read(1)
        if not b:
            raise FormatError("truncated tensor header")
        if b == b"\n":
            break
        header += b
        if len(header) > 4096:
            raise FormatError("unterminated tensor header")
    try:
        text = header.decode("ascii")
        shape_part, dtype_part = text.split(" / ")
        dims = shape_part.removeprefix("shape:").split()
        shape = tuple(int(d) for d in dims)
        dtype = _TAG_DTYPES[dtype_part.removeprefix("dtype: ").strip()]
    except (ValueError, KeyError) as exc:
        raise FormatError(f"bad tensor header: {header!r}") from exc
    count = int(np.prod(shape)) if shape else 1
    payload = fh.read(count * dtype.itemsize)
    if len(payload) != count * dtype.itemsize:
        raise FormatError("truncated tensor payload")
    return np.frombuffer(payload, dtype=dtype).reshape(shape).copy()
