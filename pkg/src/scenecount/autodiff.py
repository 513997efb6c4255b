"""Dense tensors with reverse-mode automatic differentiation.

This is a deliberately small engine: it supplies exactly the operations the
two-pathway counting network needs (2-D cross-correlation, transposed
convolution, non-overlapping max pooling, global average pooling, fully
connected layers, a handful of pointwise functions, and the half-mean
sum-of-squares density loss) and nothing else. There is no broadcasting
beyond the per-channel bias add inside ``conv2d`` and no batch axis; images
travel through the network one at a time as ``[C, H, W]`` tensors.

Every operation returns a new :class:`Tensor` holding references to its
inputs and a closure that propagates the output gradient to them, so the
executed operations form a DAG recorded in execution order. ``backward``
topologically sorts that DAG from the loss and visits each node exactly
once, accumulating gradients additively (a tensor consumed twice receives
the sum of both branch gradients).

Conventions, fixed so gradients are deterministic and testable:

* convolution is cross-correlation (no kernel flip);
* max pooling routes its gradient to the first maximum in row-major scan
  order within each window;
* the ReLU derivative at exactly 0 is 0.

A graph and its tensors are a single-threaded unit of work. Distinct graphs
share no state and may run on distinct threads; a tensor may be handed to
another thread once no graph references it.
"""

from __future__ import annotations

import math
from typing import Callable, Optional, Sequence

import numpy as np

from .errors import ConfigError, DimensionError, NumericalError, StateError

_FLOAT_DTYPES = (np.float32, np.float64)


class Tensor:
    """Dense row-major real array with optional gradient tracking.

    ``grad`` is a same-shape buffer present iff ``requires_grad`` is true;
    it is allocated as zeros on construction and accumulated into by
    ``backward``. Working precision is float32 by default; pass
    ``dtype=np.float64`` for gradient-check headroom.
    """

    __slots__ = ("data", "grad", "requires_grad", "_parents", "_backward", "_op")

    def __init__(self, data, requires_grad=False, dtype=None,
                 _parents: tuple = (), _op: str = "leaf"):
        arr = np.asarray(data)
        if dtype is not None:
            arr = np.ascontiguousarray(arr, dtype=dtype)
        elif arr.dtype not in _FLOAT_DTYPES:
            arr = np.ascontiguousarray(arr, dtype=np.float32)
        else:
            arr = np.ascontiguousarray(arr)
        self.data = arr
        self.requires_grad = bool(requires_grad)
        self.grad = np.zeros_like(arr) if self.requires_grad else None
        self._parents = _parents
        self._backward: Optional[Callable[[], None]] = None
        self._op = _op

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
        return float(self.data.reshape(-1)[0])

    def zero_grad(self):
        if self.grad is not None:
            self.grad[...] = 0.0

    def check_finite(self, context: str = "tensor"):
        """Raise :class:`NumericalError` if any value is NaN or Inf."""
        if not np.isfinite(self.data).all():
            raise NumericalError(f"non-finite values in {context} (op={self._op!r})")

    def __repr__(self):
        return (f"Tensor(shape={tuple(self.shape)}, dtype={self.data.dtype.name}, "
                f"requires_grad={self.requires_grad}, op={self._op!r})")


def _result(data: np.ndarray, parents: Sequence[Tensor], op: str,
            backward: Callable[[Tensor], Callable[[], None]]) -> Tensor:
    """Wrap a forward result, recording graph edges only when needed."""
    tracked = tuple(p for p in parents if p.requires_grad)
    if not tracked:
        return Tensor(data, _op=op)
    out = Tensor(data, requires_grad=True, _parents=tuple(parents), _op=op)
    out._backward = backward(out)
    return out


def backward(loss: Tensor) -> None:
    """Reverse-mode accumulation from a scalar loss.

    Fills ``grad`` of every reachable tensor with ``d loss / d tensor``.
    Gradients add across calls; zero them (or use ``SGD.step``, which does)
    between iterations.
    """
    if loss.size != 1:
        raise ConfigError(f"backward expects a scalar loss, got shape {loss.shape}")
    if not loss.requires_grad:
        raise StateError("loss is not connected to any tensor that requires grad")

    # Iterative post-order DFS: children appear after all of their parents.
    topo: list[Tensor] = []
    visited: set[int] = set()
    stack: list[tuple[Tensor, int]] = [(loss, 0)]
    while stack:
        node, idx = stack.pop()
        if idx == 0:
            if id(node) in visited:
                continue
            visited.add(id(node))
        parents = node._parents
        while idx < len(parents) and id(parents[idx]) in visited:
            idx += 1
        if idx < len(parents):
            stack.append((node, idx + 1))
            stack.append((parents[idx], 0))
        else:
            topo.append(node)

    loss.grad += np.ones_like(loss.data)
    for node in reversed(topo):
        if node._backward is not None:
            node._backward()


# ---------------------------------------------------------------------------
# Structural ops
# ---------------------------------------------------------------------------

def conv2d(x: Tensor, weight: Tensor, bias: Optional[Tensor] = None,
           stride: int = 1, padding: int = 0, dilation: int = 1) -> Tensor:
    """2-D cross-correlation of a ``[C_in,H,W]`` input with ``[C_out,C_in,kH,kW]``
    filters, plus per-channel bias.

    Output extent: ``H' = floor((H + 2p - d*(kH-1) - 1)/s) + 1`` and the same
    for ``W'``. Implemented as a gather into columns followed by one matmul,
    so both passes stay in BLAS.
    """
    if x.data.ndim != 3 or weight.data.ndim != 4:
        raise DimensionError(
            f"conv2d expects input [C,H,W] and weight [C_out,C_in,kH,kW], "
            f"got {x.shape} and {weight.shape}")
    if stride < 1 or dilation < 1 or padding < 0:
        raise ConfigError("conv2d requires stride >= 1, dilation >= 1, padding >= 0")
    c_in, h, w = x.shape
    c_out, c_in_w, kh, kw = weight.shape
    if c_in_w != c_in:
        raise DimensionError(f"conv2d channel mismatch: input has {c_in}, weight expects {c_in_w}")
    if bias is not None and bias.shape != (c_out,):
        raise DimensionError(f"conv2d bias must be [{c_out}], got {bias.shape}")
    h_out = (h + 2 * padding - dilation * (kh - 1) - 1) // stride + 1
    w_out = (w + 2 * padding - dilation * (kw - 1) - 1) // stride + 1
    if h_out < 1 or w_out < 1:
        raise DimensionError(
            f"conv2d output would be {h_out}x{w_out} for input {h}x{w}, kernel {kh}x{kw}")

    if padding:
        xp = np.zeros((c_in, h + 2 * padding, w + 2 * padding), dtype=x.dtype)
        xp[:, padding:padding + h, padding:padding + w] = x.data
    else:
        xp = x.data

    # cols[c, a, b, i, j] = padded[c, a*d + i*s, b*d + j*s]
    cols = np.empty((c_in, kh, kw, h_out, w_out), dtype=x.dtype)
    for a in range(kh):
        for b in range(kw):
            cols[:, a, b] = xp[:, a * dilation: a * dilation + (h_out - 1) * stride + 1: stride,
                               b * dilation: b * dilation + (w_out - 1) * stride + 1: stride]

    y = np.tensordot(weight.data, cols, axes=([1, 2, 3], [0, 1, 2]))
    if bias is not None:
        y += bias.data[:, None, None]

    parents = (x, weight) if bias is None else (x, weight, bias)

    def make_backward(out: Tensor):
        def _bw():
            g = out.grad
            if bias is not None and bias.requires_grad:
                bias.grad += g.sum(axis=(1, 2))
            if weight.requires_grad:
                weight.grad += np.tensordot(g, cols, axes=([1, 2], [3, 4]))
            if x.requires_grad:
                gcols = np.tensordot(weight.data, g, axes=([0], [0]))
                gxp = np.zeros_like(xp)
                for a in range(kh):
                    for b in range(kw):
                        gxp[:, a * dilation: a * dilation + (h_out - 1) * stride + 1: stride,
                            b * dilation: b * dilation + (w_out - 1) * stride + 1: stride] += gcols[:, a, b]
                if padding:
                    x.grad += gxp[:, padding:padding + h, padding:padding + w]
                else:
                    x.grad += gxp
        return _bw

    return _result(y, parents, "conv2d", make_backward)


def conv_transpose2d(x: Tensor, weight: Tensor, stride: int = 1) -> Tensor:
    """Transposed 2-D convolution (no padding, no bias).

    Input ``[C_in,H,W]``, weight ``[C_in,C_out,kH,kW]``, output extent
    ``H'' = (H-1)*stride + kH``. This is the adjoint of ``conv2d`` with the
    same stride: for any x, y and a shared weight array,
    ``<conv2d(x, w), y> == <x, conv_transpose2d(y, w)>`` where the conv
    weight ``[C_out,C_in,kH,kW]`` is reinterpreted in this op's
    ``[C_in,C_out,kH,kW]`` layout.
    """
    if x.data.ndim != 3 or weight.data.ndim != 4:
        raise DimensionError(
            f"conv_transpose2d expects input [C,H,W] and weight [C_in,C_out,kH,kW], "
            f"got {x.shape} and {weight.shape}")
    if stride < 1:
        raise ConfigError("conv_transpose2d requires stride >= 1")
    c_in, h, w = x.shape
    c_in_w, c_out, kh, kw = weight.shape
    if c_in_w != c_in:
        raise DimensionError(
            f"conv_transpose2d channel mismatch: input has {c_in}, weight expects {c_in_w}")
    h_out = (h - 1) * stride + kh
    w_out = (w - 1) * stride + kw

    # t[o, a, b, i, j] = sum_c x[c, i, j] * weight[c, o, a, b]
    t = np.tensordot(weight.data, x.data, axes=([0], [0]))
    y = np.zeros((c_out, h_out, w_out), dtype=x.dtype)
    for a in range(kh):
        for b in range(kw):
            y[:, a: a + (h - 1) * stride + 1: stride,
              b: b + (w - 1) * stride + 1: stride] += t[:, a, b]

    def make_backward(out: Tensor):
        def _bw():
            g = out.grad
            for a in range(kh):
                for b in range(kw):
                    gs = g[:, a: a + (h - 1) * stride + 1: stride,
                           b: b + (w - 1) * stride + 1: stride]
                    if x.requires_grad:
                        x.grad += np.tensordot(weight.data[:, :, a, b], gs, axes=([1], [0]))
                    if weight.requires_grad:
                        weight.grad[:, :, a, b] += np.tensordot(
                            x.data, gs, axes=([1, 2], [1, 2]))
        return _bw

    return _result(y, (x, weight), "conv_transpose2d", make_backward)


def max_pool2d(x: Tensor, window: int = 2) -> Tensor:
    """Non-overlapping window max over a ``[C,H,W]`` tensor.

    H and W must be divisible by ``window``. The gradient routes to exactly
    one cell per window: the first maximum in row-major scan order.
    """
    if x.data.ndim != 3:
        raise DimensionError(f"max_pool2d expects [C,H,W], got {x.shape}")
    if window < 1:
        raise ConfigError("max_pool2d window must be >= 1")
    c, h, w = x.shape
    if h % window or w % window:
        raise DimensionError(f"max_pool2d: extents {h}x{w} not divisible by window {window}")
    ho, wo = h // window, w // window

    # Last axis enumerates each window in row-major order, so argmax's
    # first-occurrence rule matches the documented tie-break.
    windows = (x.data.reshape(c, ho, window, wo, window)
               .transpose(0, 1, 3, 2, 4)
               .reshape(c, ho, wo, window * window))
    idx = windows.argmax(axis=3)
    y = np.take_along_axis(windows, idx[..., None], axis=3)[..., 0]

    def make_backward(out: Tensor):
        def _bw():
            gw = np.zeros_like(windows)
            np.put_along_axis(gw, idx[..., None], out.grad[..., None], axis=3)
            x.grad += (gw.reshape(c, ho, wo, window, window)
                       .transpose(0, 1, 3, 2, 4)
                       .reshape(c, h, w))
        return _bw

    return _result(y, (x,), "max_pool2d", make_backward)


def global_avg_pool(x: Tensor) -> Tensor:
    """Spatial mean of a ``[C,H,W]`` tensor, yielding ``[C]``."""
    if x.data.ndim != 3:
        raise DimensionError(f"global_avg_pool expects [C,H,W], got {x.shape}")
    c, h, w = x.shape
    y = x.data.mean(axis=(1, 2))

    def make_backward(out: Tensor):
        def _bw():
            x.grad += (out.grad / (h * w))[:, None, None]
        return _bw

    return _result(y, (x,), "global_avg_pool", make_backward)


def affine(x: Tensor, weight: Tensor, bias: Tensor) -> Tensor:
    """Fully connected layer: ``weight @ x + bias`` on a 1-D input."""
    if x.data.ndim != 1 or weight.data.ndim != 2:
        raise DimensionError(
            f"affine expects input [D_in] and weight [D_out,D_in], got {x.shape} and {weight.shape}")
    d_out, d_in = weight.shape
    if x.shape != (d_in,):
        raise DimensionError(f"affine input must be [{d_in}], got {x.shape}")
    if bias.shape != (d_out,):
        raise DimensionError(f"affine bias must be [{d_out}], got {bias.shape}")
    y = weight.data @ x.data + bias.data

    def make_backward(out: Tensor):
        def _bw():
            g = out.grad
            if x.requires_grad:
                x.grad += weight.data.T @ g
            if weight.requires_grad:
                weight.grad += np.outer(g, x.data)
            if bias.requires_grad:
                bias.grad += g
        return _bw

    return _result(y, (x, weight, bias), "affine", make_backward)


# ---------------------------------------------------------------------------
# Pointwise ops (shared semantics: exact derivatives, no shape changes)
# ---------------------------------------------------------------------------

def relu(x: Tensor) -> Tensor:
    y = np.maximum(x.data, 0)

    def make_backward(out: Tensor):
        def _bw():
            # derivative at exactly 0 is 0 by convention
            x.grad += out.grad * (x.data > 0)
        return _bw

    return _result(y, (x,), "relu", make_backward)


def sigmoid(x: Tensor) -> Tensor:
    y = _sigmoid(x.data)

    def make_backward(out: Tensor):
        def _bw():
            x.grad += out.grad * y * (1.0 - y)
        return _bw

    return _result(y, (x,), "sigmoid", make_backward)


def _sigmoid(v: np.ndarray) -> np.ndarray:
    # branch on sign to avoid exp overflow at float32 extremes
    out = np.empty_like(v)
    pos = v >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-v[pos]))
    ev = np.exp(v[~pos])
    out[~pos] = ev / (1.0 + ev)
    return out


def arctan(x: Tensor) -> Tensor:
    y = np.arctan(x.data)

    def make_backward(out: Tensor):
        def _bw():
            x.grad += out.grad / (1.0 + x.data * x.data)
        return _bw

    return _result(y, (x,), "arctan", make_backward)


def scale(x: Tensor, a: float) -> Tensor:
    y = x.data * a

    def make_backward(out: Tensor):
        def _bw():
            x.grad += out.grad * a
        return _bw

    return _result(y, (x,), "scale", make_backward)


def add(x: Tensor, y: Tensor) -> Tensor:
    if x.shape != y.shape:
        raise DimensionError(f"add requires identical shapes, got {x.shape} and {y.shape}")
    z = x.data + y.data

    def make_backward(out: Tensor):
        def _bw():
            if x.requires_grad:
                x.grad += out.grad
            if y.requires_grad:
                y.grad += out.grad
        return _bw

    return _result(z, (x, y), "add", make_backward)


def mul(x: Tensor, y: Tensor) -> Tensor:
    if x.shape != y.shape:
        raise DimensionError(f"mul requires identical shapes, got {x.shape} and {y.shape}")
    z = x.data * y.data

    def make_backward(out: Tensor):
        def _bw():
            if x.requires_grad:
                x.grad += out.grad * y.data
            if y.requires_grad:
                y.grad += out.grad * x.data
        return _bw

    return _result(z, (x, y), "mul", make_backward)


def tensor_sum(x: Tensor) -> Tensor:
    """Sum of all elements, as a 0-d tensor."""
    z = x.data.sum()

    def make_backward(out: Tensor):
        def _bw():
            x.grad += out.grad
        return _bw

    return _result(z, (x,), "tensor_sum", make_backward)


def weighted_sum(a: Tensor, b: Tensor, w) -> Tensor:
    """Convex-style combination ``w*a + (1-w)*b`` of two same-shape maps.

    ``w`` is either a plain float (constant weight, no graph edge) or a
    one-element tensor, in which case its gradient is ``sum((a-b)*g)``.
    """
    if a.shape != b.shape:
        raise DimensionError(f"weighted_sum requires identical shapes, got {a.shape} and {b.shape}")
    if isinstance(w, Tensor):
        if w.size != 1:
            raise DimensionError(f"weighted_sum weight must be a single value, got shape {w.shape}")
        wv = w.item()
        z = wv * a.data + (1.0 - wv) * b.data

        def make_backward(out: Tensor):
            def _bw():
                g = out.grad
                if a.requires_grad:
                    a.grad += g * wv
                if b.requires_grad:
                    b.grad += g * (1.0 - wv)
                if w.requires_grad:
                    w.grad += ((a.data - b.data) * g).sum(dtype=w.dtype)
            return _bw

        return _result(z, (a, b, w), "weighted_sum", make_backward)

    wv = float(w)
    z = wv * a.data + (1.0 - wv) * b.data

    def make_backward(out: Tensor):
        def _bw():
            g = out.grad
            if a.requires_grad:
                a.grad += g * wv
            if b.requires_grad:
                b.grad += g * (1.0 - wv)
        return _bw

    return _result(z, (a, b), "weighted_sum", make_backward)


def mse_density_loss(pred: Sequence[Tensor], gt: Sequence[Tensor]) -> Tensor:
    """Half mean sum-of-squares over a batch of density maps.

    ``L = (1/2N) * sum_i ||pred_i - gt_i||_2^2`` where the norm runs over
    every pixel of map i. Raises on an empty batch or pairwise shape
    mismatch.
    """
    if len(pred) == 0 or len(pred) != len(gt):
        raise ConfigError(
            f"mse_density_loss needs equal nonempty batches, got {len(pred)} and {len(gt)}")
    n = len(pred)
    residuals = []
    total = 0.0
    for i, (p, g) in enumerate(zip(pred, gt)):
        if p.shape != g.shape:
            raise DimensionError(
                f"mse_density_loss pair {i}: shapes {p.shape} and {g.shape} differ")
        r = p.data - g.data
        residuals.append(r)
        total += float((r * r).sum(dtype=np.float64))
    dtype = pred[0].dtype
    value = np.asarray(total / (2.0 * n), dtype=dtype)

    parents = tuple(pred) + tuple(gt)

    def make_backward(out: Tensor):
        def _bw():
            s = float(out.grad.sum(dtype=np.float64)) / n
            for p, g, r in zip(pred, gt, residuals):
                if p.requires_grad:
                    p.grad += r * s
                if g.requires_grad:
                    g.grad -= r * s
        return _bw

    return _result(value, parents, "mse_density_loss", make_backward)


# ---------------------------------------------------------------------------
# Optimization and gradient verification
# ---------------------------------------------------------------------------

class SGD:
    """Stochastic gradient descent with classical momentum.

    Per step: ``v <- momentum*v + grad; p <- p - lr*v``, then grads are
    zeroed. Velocity buffers live here, one per parameter.
    """

    def __init__(self, params: Sequence[Tensor], lr: float, momentum: float = 0.0):
        if lr <= 0:
            raise ConfigError(f"lr must be > 0, got {lr}")
        if not 0.0 <= momentum < 1.0:
            raise ConfigError(f"momentum must be in [0, 1), got {momentum}")
        self.params = list(params)
        self.lr = lr
        self.momentum = momentum
        self._velocity = [np.zeros_like(p.data) for p in self.params]

    def step(self):
        for p, v in zip(self.params, self._velocity):
            if p.grad is None:
                raise StateError("sgd_step: parameter has no gradient buffer")
            v *= self.momentum
            v += p.grad
            p.data -= self.lr * v
            p.grad[...] = 0.0

    def zero_grad(self):
        for p in self.params:
            if p.grad is not None:
                p.grad[...] = 0.0


def finite_diff_check(f: Callable[[Tensor], Tensor], x: Tensor, h: float = 1e-5) -> float:
    """Max relative error between the autodiff gradient of ``f`` at ``x`` and
    central finite differences.

    ``f`` must be scalar-valued and re-runnable. Relative error uses a
    ``max(|a|, |b|, 1e-8)`` denominator per coordinate. Run with a float64
    ``x`` (and float64 everything inside ``f``) for meaningful tolerances.
    """
    if h <= 0:
        raise ConfigError(f"finite_diff_check step must be > 0, got {h}")
    x.zero_grad()
    out = f(x)
    backward(out)
    g_auto = x.grad.copy()

    g_num = np.zeros_like(x.data)
    flat = x.data.reshape(-1)
    num_flat = g_num.reshape(-1)
    for i in range(flat.size):
        orig = flat[i]
        flat[i] = orig + h
        f_plus = f(x).item()
        flat[i] = orig - h
        f_minus = f(x).item()
        flat[i] = orig
        num_flat[i] = (f_plus - f_minus) / (2.0 * h)

    denom = np.maximum(np.maximum(np.abs(g_auto), np.abs(g_num)), 1e-8)
    return float((np.abs(g_auto - g_num) / denom).max(initial=0.0))


def as_tensor(data, dtype=None) -> Tensor:
    """Wrap array-like data as a constant (non-tracked) tensor."""
    if isinstance(data, Tensor):
        return data
    return Tensor(data, dtype=dtype)


TWO_OVER_PI = 2.0 / math.pi
