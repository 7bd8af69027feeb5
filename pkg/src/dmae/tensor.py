"""Reverse-mode autodiff over numpy arrays, sized to what the model needs.

A ``Tensor`` wraps an ndarray and remembers how it was produced; calling
``backward()`` on a scalar result accumulates gradients into every reachable
``Parameter``. Gradients add into ``.grad`` buffers - the caller zeroes them
between optimizer steps. All ops are batch-first and vectorized; nothing here
loops over samples.

Training typically runs in float32; gradient checking requires float64
(finite differences are unreliable in single precision).
"""

from __future__ import annotations

from contextlib import contextmanager

import numpy as np

from .errors import ConfigError, ShapeError

_GRAD_ENABLED = True


@contextmanager
def no_grad():
    """Disable graph recording inside the block (evaluation passes)."""
    global _GRAD_ENABLED
    prev = _GRAD_ENABLED
    _GRAD_ENABLED = False
    try:
        yield
    finally:
        _GRAD_ENABLED = prev


def grad_enabled() -> bool:
    return _GRAD_ENABLED


class Tensor:
    """A node in the computation graph.

    ``data`` is always an ndarray; ``grad`` is allocated lazily with the same
    shape. Non-leaf tensors carry a backward closure and references to their
    parents, recorded only while gradients are enabled.
    """

    __slots__ = ("data", "grad", "requires_grad", "_backward", "_parents")

    def __init__(self, data, requires_grad: bool = False, parents=(), backward=None):
        self.data = data if isinstance(data, np.ndarray) else np.asarray(data, dtype=np.float64)
        self.grad = None
        self.requires_grad = requires_grad
        self._parents = parents if _GRAD_ENABLED else ()
        self._backward = backward if _GRAD_ENABLED else None

    @property
    def shape(self):
        return self.data.shape

    @property
    def ndim(self):
        return self.data.ndim

    @property
    def dtype(self):
        return self.data.dtype

    def _ensure_grad(self) -> np.ndarray:
        if self.grad is None:
            self.grad = np.zeros_like(self.data)
        return self.grad

    def accumulate(self, g: np.ndarray) -> None:
        self._ensure_grad()
        self.grad += g

    def backward(self, seed: np.ndarray | None = None) -> None:
        """Run reverse-mode accumulation from this node.

        Without an explicit seed the node must be scalar-like; the seed is 1.
        Gradients add into existing buffers (callers zero between steps).
        """
        if seed is None:
            if self.data.size != 1:
                raise ShapeError("backward: implicit seed requires a scalar output, got shape %s" % (self.shape,))
            seed = np.ones_like(self.data)
        topo: list[Tensor] = []
        visited: set[int] = set()
        stack: list[tuple[Tensor, bool]] = [(self, False)]
        while stack:  # iterative DFS; graphs can exceed the recursion limit
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
        self.accumulate(seed)
        for node in reversed(topo):
            if node._backward is not None and node.grad is not None:
                node._backward(node.grad)

    def detach(self) -> "Tensor":
        return Tensor(self.data)

    def __repr__(self):
        return f"Tensor(shape={self.shape}, dtype={self.data.dtype})"


class Parameter(Tensor):
    """Trainable leaf tensor with a unique identifier used for checkpoints."""

    __slots__ = ("name",)

    def __init__(self, data, name: str):
        super().__init__(np.asarray(data), requires_grad=True)
        self.name = name
        self._ensure_grad()

    def zero_grad(self) -> None:
        if self.grad is None:
            self.grad = np.zeros_like(self.data)
        else:
            self.grad.fill(0.0)

    def __repr__(self):
        return f"Parameter({self.name}, shape={self.shape})"


def _as_const(x) -> np.ndarray:
    return x.data if isinstance(x, Tensor) else np.asarray(x)


def _unbroadcast(g: np.ndarray, shape: tuple) -> np.ndarray:
    """Sum a broadcast gradient back down to ``shape``."""
    if g.shape == shape:
        return g
    extra = g.ndim - len(shape)
    if extra > 0:
        g = g.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, (gs, ss) in enumerate(zip(g.shape, shape)) if ss == 1 and gs != 1)
    if axes:
        g = g.sum(axis=axes, keepdims=True)
    return g


def _node(data, parents, backward) -> Tensor:
    req = any(isinstance(p, Tensor) and p.requires_grad for p in parents)
    t = Tensor(data, requires_grad=req and _GRAD_ENABLED)
    if _GRAD_ENABLED and req:
        t._parents = tuple(p for p in parents if isinstance(p, Tensor) and p.requires_grad)
        t._backward = backward
    return t


# ---------------------------------------------------------------------------
# elementwise and shape ops


def add(a: Tensor, b) -> Tensor:
    bd = _as_const(b)
    out_data = a.data + bd

    def backward(g):
        if a.requires_grad:
            a.accumulate(_unbroadcast(g, a.shape))
        if isinstance(b, Tensor) and b.requires_grad:
            b.accumulate(_unbroadcast(g, b.shape))

    return _node(out_data, (a, b), backward)


def sub(a: Tensor, b) -> Tensor:
    bd = _as_const(b)
    out_data = a.data - bd

    def backward(g):
        if a.requires_grad:
            a.accumulate(_unbroadcast(g, a.shape))
        if isinstance(b, Tensor) and b.requires_grad:
            b.accumulate(-_unbroadcast(g, b.shape))

    return _node(out_data, (a, b), backward)


def mul(a: Tensor, b) -> Tensor:
    """Elementwise product; either side may be a plain ndarray constant."""
    ad, bd = a.data, _as_const(b)
    out_data = ad * bd

    def backward(g):
        if a.requires_grad:
            a.accumulate(_unbroadcast(g * bd, a.shape))
        if isinstance(b, Tensor) and b.requires_grad:
            b.accumulate(_unbroadcast(g * ad, b.shape))

    return _node(out_data, (a, b), backward)


def scale(a: Tensor, s: float) -> Tensor:
    def backward(g):
        if a.requires_grad:
            a.accumulate(g * s)

    return _node(a.data * s, (a,), backward)


def relu(a: Tensor) -> Tensor:
    out_data = np.maximum(a.data, 0.0)

    def backward(g):
        if a.requires_grad:
            a.accumulate(g * (a.data > 0))

    return _node(out_data, (a,), backward)


def tanh(a: Tensor) -> Tensor:
    out_data = np.tanh(a.data)

    def backward(g):
        if a.requires_grad:
            a.accumulate(g * (1.0 - out_data * out_data))

    return _node(out_data, (a,), backward)


def reshape(a: Tensor, shape) -> Tensor:
    def backward(g):
        if a.requires_grad:
            a.accumulate(g.reshape(a.shape))

    return _node(a.data.reshape(shape), (a,), backward)


def swapaxes(a: Tensor, ax1: int, ax2: int) -> Tensor:
    def backward(g):
        if a.requires_grad:
            a.accumulate(np.swapaxes(g, ax1, ax2))

    return _node(np.swapaxes(a.data, ax1, ax2).copy(), (a,), backward)


def flip(a: Tensor, axis: int) -> Tensor:
    """Reverse along one axis (used for time flipping)."""

    def backward(g):
        if a.requires_grad:
            a.accumulate(np.flip(g, axis=axis))

    return _node(np.flip(a.data, axis=axis).copy(), (a,), backward)


def concat(tensors, axis: int) -> Tensor:
    datas = [t.data for t in tensors]
    out_data = np.concatenate(datas, axis=axis)
    sizes = [d.shape[axis] for d in datas]
    offsets = np.cumsum([0] + sizes)

    def backward(g):
        for t, lo, hi in zip(tensors, offsets[:-1], offsets[1:]):
            if t.requires_grad:
                sl = [slice(None)] * g.ndim
                sl[axis] = slice(lo, hi)
                t.accumulate(g[tuple(sl)])

    return _node(out_data, tuple(tensors), backward)


def tsum(a: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    out_data = a.data.sum(axis=axis, keepdims=keepdims)

    def backward(g):
        if not a.requires_grad:
            return
        if axis is None:
            a.accumulate(np.full_like(a.data, 1.0) * g)
        else:
            gg = g if keepdims else np.expand_dims(g, axis)
            a.accumulate(np.broadcast_to(gg, a.shape).copy())

    return _node(out_data, (a,), backward)


def mean(a: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    """Arithmetic mean along an axis; this is the pooling primitive."""
    out_data = a.data.mean(axis=axis, keepdims=keepdims)
    if axis is None:
        count = a.data.size
    else:
        axes = (axis,) if isinstance(axis, int) else tuple(axis)
        count = 1
        for ax in axes:
            count *= a.shape[ax]

    def backward(g):
        if not a.requires_grad:
            return
        if axis is None:
            a.accumulate(np.full_like(a.data, g / count))
        else:
            gg = g if keepdims else np.expand_dims(g, axis)
            a.accumulate(np.broadcast_to(gg, a.shape) / count)

    return _node(out_data, (a,), backward)


def matmul(a: Tensor, b: Tensor) -> Tensor:
    """Batched matrix product with numpy broadcasting over leading axes."""
    ad, bd = a.data, _as_const(b)
    out_data = ad @ bd

    def backward(g):
        if a.requires_grad:
            if bd.ndim == 1:
                ga = np.expand_dims(g, -1) * bd
            else:
                ga = g @ np.swapaxes(bd, -1, -2)
            a.accumulate(_unbroadcast(ga, a.shape))
        if isinstance(b, Tensor) and b.requires_grad:
            if ad.ndim == 1:
                gb = np.expand_dims(ad, -1) * np.expand_dims(g, -2)
            elif bd.ndim == 1:
                gb = np.einsum("...ij,...i->...j", np.swapaxes(ad, -1, -2), g) if ad.ndim > 2 else ad.T @ g
            else:
                gb = np.swapaxes(ad, -1, -2) @ g
            b.accumulate(_unbroadcast(gb, b.shape))

    return _node(out_data, (a, b), backward)


def linear(x: Tensor, weight: Parameter, bias: Parameter | None = None) -> Tensor:
    """Affine map over the trailing axis: ``y = x @ weight + bias``."""
    if x.shape[-1] != weight.shape[0]:
        raise ShapeError(
            f"linear: input trailing dim {x.shape[-1]} does not match weight rows {weight.shape[0]}"
        )
    if bias is not None and bias.shape[0] != weight.shape[1]:
        raise ShapeError(
            f"linear: bias length {bias.shape[0]} does not match weight cols {weight.shape[1]}"
        )
    y = matmul(x, weight)
    if bias is not None:
        y = add(y, bias)
    return y


def softmax_tempered(scores: Tensor, temperature: float, axis: int = -1) -> Tensor:
    """Softmax of ``scores / temperature`` with max-subtraction for stability.

    A temperature above 1 flattens the weights toward uniform; outputs are
    strictly positive and sum to 1 along the axis.
    """
    if temperature <= 0:
        raise ConfigError(f"softmax temperature must be positive, got {temperature}")
    z = scores.data / temperature
    z = z - z.max(axis=axis, keepdims=True)
    e = np.exp(z)
    w = e / e.sum(axis=axis, keepdims=True)

    def backward(g):
        if scores.requires_grad:
            inner = (g * w).sum(axis=axis, keepdims=True)
            scores.accumulate((g - inner) * w / temperature)

    return _node(w, (scores,), backward)


def log_softmax(scores: Tensor, axis: int = -1) -> Tensor:
    z = scores.data - scores.data.max(axis=axis, keepdims=True)
    lse = np.log(np.exp(z).sum(axis=axis, keepdims=True))
    out_data = z - lse

    def backward(g):
        if scores.requires_grad:
            soft = np.exp(out_data)
            scores.accumulate(g - soft * g.sum(axis=axis, keepdims=True))

    return _node(out_data, (scores,), backward)


def cross_entropy_logits(logits: Tensor, labels: np.ndarray) -> Tensor:
    """Mean cross-entropy of integer ``labels`` under ``logits`` [B, C]."""
    n, c = logits.shape
    if labels.min() < 0 or labels.max() >= c:
        raise ValueError(f"labels must lie in [0, {c}), got range [{labels.min()}, {labels.max()}]")
    z = logits.data - logits.data.max(axis=1, keepdims=True)
    lse = np.log(np.exp(z).sum(axis=1, keepdims=True))
    logp = z - lse
    out = -logp[np.arange(n), labels].mean()

    def backward(g):
        if logits.requires_grad:
            soft = np.exp(logp)
            soft[np.arange(n), labels] -= 1.0
            logits.accumulate(g * soft / n)

    return _node(np.asarray(out, dtype=logits.dtype), (logits,), backward)


def masked_frobenius(x: Tensor, mask: np.ndarray) -> Tensor:
    """Per-sample entrywise 2-norm of ``x * mask``: [B, ...] -> [B].

    The subgradient at an exactly-zero norm is taken as 0, keeping backward
    passes finite for perfect reconstructions.
    """
    masked = x.data * mask
    flat = masked.reshape(masked.shape[0], -1)
    norms = np.sqrt((flat * flat).sum(axis=1))

    def backward(g):
        if x.requires_grad:
            denom = np.where(norms > 0.0, norms, 1.0)
            coef = (g / denom).reshape((-1,) + (1,) * (x.ndim - 1))
            x.accumulate(coef * masked * mask)

    return _node(norms, (x,), backward)


# ---------------------------------------------------------------------------
# causal dilated convolution

def _im2col(xp: np.ndarray, k: int, dilation: int, T: int) -> np.ndarray:
    """Assemble [B, c_in*k, T] columns from a left-padded [B, c_in, Tp] input."""
    B, c_in, _ = xp.shape
    cols = np.empty((B, c_in, k, T), dtype=xp.dtype)
    for j in range(k):
        cols[:, :, j, :] = xp[:, :, j * dilation: j * dilation + T]
    return cols.reshape(B, c_in * k, T)


def _col2im(gcols: np.ndarray, B: int, c_in: int, k: int, dilation: int, Tp: int, T: int) -> np.ndarray:
    gxp = np.zeros((B, c_in, Tp), dtype=gcols.dtype)
    gc = gcols.reshape(B, c_in, k, T)
    for j in range(k):
        gxp[:, :, j * dilation: j * dilation + T] += gc[:, :, j, :]
    return gxp


def causal_dilated_conv1d(x: Tensor, kernel: Tensor, dilation: int) -> Tensor:
    """Length-preserving causal convolution with dilated taps.

    ``x`` is [B, c_in, T]; ``kernel`` is either [c_out, c_in, k] (shared) or
    [B, c_out, c_in, k] (one kernel per sample). Left zero-padding of
    (k-1)*dilation keeps the output length T, and output at time t never sees
    inputs at times > t.
    """
    if dilation < 1:
        raise ConfigError(f"conv dilation must be >= 1, got {dilation}")
    per_sample = kernel.ndim == 4
    B, c_in, T = x.shape
    kc_in, k = kernel.shape[-2], kernel.shape[-1]
    if kc_in != c_in:
        raise ShapeError(f"conv kernel expects {kc_in} input channels, input has {c_in}")
    if per_sample and kernel.shape[0] != B:
        raise ShapeError(f"conv per-sample kernel batch {kernel.shape[0]} != input batch {B}")
    c_out = kernel.shape[-3]
    pad = (k - 1) * dilation

    xp = np.pad(x.data, ((0, 0), (0, 0), (pad, 0)))
    cols = _im2col(xp, k, dilation, T)  # [B, c_in*k, T]
    if per_sample:
        w2 = kernel.data.reshape(B, c_out, c_in * k)
        out_data = w2 @ cols
    else:
        w2 = kernel.data.reshape(c_out, c_in * k)
        out_data = w2 @ cols  # broadcasts over batch

    def backward(g):
        # cols are rebuilt from xp rather than retained: trades a strided
        # copy for a much smaller live set during training.
        cols_b = _im2col(xp, k, dilation, T)
        if kernel.requires_grad:
            if per_sample:
                gw = g @ cols_b.transpose(0, 2, 1)
                kernel.accumulate(gw.reshape(kernel.shape))
            else:
                gw = np.tensordot(g, cols_b, axes=([0, 2], [0, 2]))
                kernel.accumulate(gw.reshape(kernel.shape))
        if x.requires_grad:
            if per_sample:
                gcols = w2.transpose(0, 2, 1) @ g
            else:
                gcols = np.tensordot(g, w2, axes=([1], [0])).transpose(0, 2, 1)
            gxp = _col2im(gcols, B, c_in, k, dilation, T + pad, T)
            x.accumulate(gxp[:, :, pad:])

    return _node(out_data, (x, kernel), backward)


# ---------------------------------------------------------------------------
# batch normalization

def batch_norm_1d(
    x: Tensor,
    gamma: Parameter,
    beta: Parameter,
    running_mean: np.ndarray,
    running_var: np.ndarray,
    training: bool,
    momentum: float = 0.1,
    eps: float = 1e-5,
) -> Tensor:
    """Per-channel normalization of [B, C, T] activations.

    Training mode normalizes by batch statistics over (B, T) and updates the
    running buffers in place with ``momentum``; eval mode uses the running
    buffers only. Population (1/N) variance throughout; ``eps`` guards zero
    variance.
    """
    B, C, T = x.shape
    if gamma.shape[0] != C:
        raise ShapeError(f"batch_norm: {C} channels but gamma has {gamma.shape[0]}")
    if training:
        mu = x.data.mean(axis=(0, 2))
        var = x.data.var(axis=(0, 2))
        running_mean *= 1.0 - momentum
        running_mean += momentum * mu
        running_var *= 1.0 - momentum
        running_var += momentum * var
    else:
        mu = running_mean
        var = running_var
    inv_std = 1.0 / np.sqrt(var + eps)
    xhat = (x.data - mu[None, :, None]) * inv_std[None, :, None]
    out_data = gamma.data[None, :, None] * xhat + beta.data[None, :, None]

    def backward(g):
        if beta.requires_grad:
            beta.accumulate(g.sum(axis=(0, 2)))
        if gamma.requires_grad:
            gamma.accumulate((g * xhat).sum(axis=(0, 2)))
        if not x.requires_grad:
            return
        gxhat = g * gamma.data[None, :, None]
        if training:
            n = B * T
            s1 = gxhat.sum(axis=(0, 2))
            s2 = (gxhat * xhat).sum(axis=(0, 2))
            gx = inv_std[None, :, None] / n * (n * gxhat - s1[None, :, None] - xhat * s2[None, :, None])
            x.accumulate(gx)
        else:
            x.accumulate(gxhat * inv_std[None, :, None])

    return _node(out_data, (x, gamma, beta), backward)
