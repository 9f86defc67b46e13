"""Small define-by-run reverse-mode autodiff over float64 numpy arrays.

Only the operations needed by the classifiers and losses in this package are
provided. Every op builds a fresh node; ``Tensor.backward`` walks the graph in
reverse topological order and accumulates gradients into every node that
requires them.
"""
from __future__ import annotations

import numpy as np

DTYPE = np.float64


class ShapeError(ValueError):
    pass


class NumericError(ArithmeticError):
    pass


def _as_array(value) -> np.ndarray:
    return np.asarray(value, dtype=DTYPE)


def _unbroadcast(grad: np.ndarray, shape: tuple) -> np.ndarray:
    # sum out the axes numpy broadcasting added or stretched
    while grad.ndim > len(shape):
        grad = grad.sum(axis=0)
    for axis, size in enumerate(shape):
        if size == 1 and grad.shape[axis] != 1:
            grad = grad.sum(axis=axis, keepdims=True)
    return grad


class Tensor:
    __slots__ = ("data", "grad", "requires_grad", "_parents", "_backward", "op")

    def __init__(self, data, requires_grad: bool = False, _parents=(), op: str = ""):
        self.data = _as_array(data)
        self.requires_grad = requires_grad
        self.grad: np.ndarray | None = None
        self._parents = _parents
        self._backward = None
        self.op = op

    # -- basics -----------------------------------------------------------
    @property
    def shape(self) -> tuple:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        if self.data.size != 1:
            raise ValueError(f"item() needs a single element, got shape {self.shape}")
        return float(self.data.reshape(()))

    def detach(self) -> "Tensor":
        return Tensor(self.data)

    def zero_grad(self) -> None:
        self.grad = None

    def __len__(self) -> int:
        return len(self.data)

    def __repr__(self) -> str:
        flag = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(shape={self.shape}{flag})"

    # -- graph construction -------------------------------------------------
    @staticmethod
    def _make(data, parents, backward, op) -> "Tensor":
        parents = tuple(parents)
        needs = any(p.requires_grad for p in parents)
        out = Tensor(data, requires_grad=needs, _parents=parents if needs else (), op=op)
        if needs:
            out._backward = backward
        return out

    def _accumulate(self, g: np.ndarray) -> None:
        if not self.requires_grad:
            return
        if self.grad is None:
            self.grad = np.array(g, dtype=DTYPE, copy=True)
        else:
            self.grad = self.grad + g

    def backward(self, grad=None) -> None:
        """Fill ``.grad`` on every graph node that requires it.

        Without an explicit seed the tensor must be a scalar.
        """
        if grad is None:
            if self.data.size != 1:
                raise ValueError(f"backward() needs a scalar loss, got shape {self.shape}")
            grad = np.ones_like(self.data)
        order = []
        seen = set()
        stack = [(self, False)]
        while stack:
            node, expanded = stack.pop()
            if expanded:
                order.append(node)
                continue
            if id(node) in seen:
                continue
            seen.add(id(node))
            stack.append((node, True))
            for parent in node._parents:
                if parent.requires_grad and id(parent) not in seen:
                    stack.append((parent, False))
        self._accumulate(_as_array(grad))
        for node in reversed(order):
            if node._backward is not None and node.grad is not None:
                node._backward(node.grad)

    # -- arithmetic -------------------------------------------------------
    def __add__(self, other):
        other = ensure_tensor(other)
        a, b = self, other

        def backward(g):
            a._accumulate(_unbroadcast(g, a.shape))
            b._accumulate(_unbroadcast(g, b.shape))

        return Tensor._make(a.data + b.data, (a, b), backward, "add")

    __radd__ = __add__

    def __neg__(self):
        a = self

        def backward(g):
            a._accumulate(-g)

        return Tensor._make(-a.data, (a,), backward, "neg")

    def __sub__(self, other):
        return self + (-ensure_tensor(other))

    def __rsub__(self, other):
        return ensure_tensor(other) + (-self)

    def __mul__(self, other):
        other = ensure_tensor(other)
        a, b = self, other

        def backward(g):
            if a.requires_grad:
                a._accumulate(_unbroadcast(g * b.data, a.shape))
            if b.requires_grad:
                b._accumulate(_unbroadcast(g * a.data, b.shape))

        return Tensor._make(a.data * b.data, (a, b), backward, "mul")

    __rmul__ = __mul__

    def __truediv__(self, other):
        other = ensure_tensor(other)
        a, b = self, other

        def backward(g):
            if a.requires_grad:
                a._accumulate(_unbroadcast(g / b.data, a.shape))
            if b.requires_grad:
                b._accumulate(_unbroadcast(-g * a.data / (b.data * b.data), b.shape))

        return Tensor._make(a.data / b.data, (a, b), backward, "div")

    def __rtruediv__(self, other):
        return ensure_tensor(other) / self

    def __pow__(self, exponent: float):
        a = self
        exponent = float(exponent)

        def backward(g):
            a._accumulate(g * exponent * a.data ** (exponent - 1.0))

        return Tensor._make(a.data ** exponent, (a,), backward, "pow")

    def __matmul__(self, other):
        return matmul(self, other)

    def __getitem__(self, index):
        a = self

        def backward(g):
            full = np.zeros_like(a.data)
            np.add.at(full, index, g)
            a._accumulate(full)

        return Tensor._make(a.data[index], (a,), backward, "index")

    # -- reductions and shape ops ---------------------------------------------
    def sum(self, axis=None, keepdims: bool = False):
        a = self

        def backward(g):
            if axis is not None and not keepdims:
                g = np.expand_dims(g, axis)
            a._accumulate(np.broadcast_to(g, a.shape))

        return Tensor._make(a.data.sum(axis=axis, keepdims=keepdims), (a,), backward, "sum")

    def mean(self, axis=None, keepdims: bool = False):
        n = self.data.size if axis is None else self.data.shape[axis]
        return self.sum(axis=axis, keepdims=keepdims) * (1.0 / n)

    def reshape(self, *shape):
        a = self
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])

        def backward(g):
            a._accumulate(g.reshape(a.shape))

        return Tensor._make(a.data.reshape(shape), (a,), backward, "reshape")

    @property
    def T(self):
        a = self

        def backward(g):
            a._accumulate(g.T)

        return Tensor._make(a.data.T, (a,), backward, "transpose")


def ensure_tensor(value) -> Tensor:
    return value if isinstance(value, Tensor) else Tensor(value)


def matmul(a: Tensor, b: Tensor) -> Tensor:
    a, b = ensure_tensor(a), ensure_tensor(b)
    if a.ndim != 2 or b.ndim != 2 or a.shape[1] != b.shape[0]:
        raise ShapeError(f"matmul shape mismatch: {a.shape} @ {b.shape}")

    def backward(g):
        if a.requires_grad:
            a._accumulate(g @ b.data.T)
        if b.requires_grad:
            b._accumulate(a.data.T @ g)

    return Tensor._make(a.data @ b.data, (a, b), backward, "matmul")


def exp(x: Tensor) -> Tensor:
    x = ensure_tensor(x)
    out_data = np.exp(x.data)

    def backward(g):
        x._accumulate(g * out_data)

    return Tensor._make(out_data, (x,), backward, "exp")


def log(x: Tensor) -> Tensor:
    x = ensure_tensor(x)

    def backward(g):
        x._accumulate(g / x.data)

    return Tensor._make(np.log(x.data), (x,), backward, "log")


def clamp_min(x: Tensor, lo: float) -> Tensor:
    """max(x, lo); gradient passes only where x > lo."""
    x = ensure_tensor(x)
    keep = x.data > lo

    def backward(g):
        x._accumulate(g * keep)

    return Tensor._make(np.where(keep, x.data, lo), (x,), backward, "clamp_min")


def safe_sqrt(x: Tensor, eps: float = 1e-12) -> Tensor:
    """sqrt(max(x, 0)) with the derivative zeroed wherever x <= eps.

    The value is exact (zero spread gives exactly 0); only the singular
    derivative near 0 is replaced by the subgradient 0.
    """
    x = ensure_tensor(x)
    out_data = np.sqrt(np.maximum(x.data, 0.0))
    live = x.data > eps

    def backward(g):
        safe = np.where(live, out_data, 1.0)
        x._accumulate(np.where(live, 0.5 * g / safe, 0.0))

    return Tensor._make(out_data, (x,), backward, "sqrt")


def relu(x: Tensor) -> Tensor:
    x = ensure_tensor(x)
    on = x.data > 0

    def backward(g):
        x._accumulate(g * on)

    return Tensor._make(x.data * on, (x,), backward, "relu")


def softmax(logits: Tensor) -> Tensor:
    """Row-wise softmax of a [B, C] tensor, stabilised by max subtraction."""
    logits = ensure_tensor(logits)
    if logits.ndim != 2 or logits.shape[1] < 2:
        raise ShapeError(f"softmax expects [B, C>=2], got {logits.shape}")
    if not np.all(np.isfinite(logits.data)):
        raise NumericError("softmax received non-finite logits")
    z = logits.data - logits.data.max(axis=1, keepdims=True)
    e = np.exp(z)
    p = e / e.sum(axis=1, keepdims=True)

    def backward(g):
        logits._accumulate(p * (g - (g * p).sum(axis=1, keepdims=True)))

    return Tensor._make(p, (logits,), backward, "softmax")


def dropout(x: Tensor, rate: float, rng: np.random.Generator | None, training: bool = True):
    """Inverted dropout. Returns ``(output, mask)``; mask is None when inactive."""
    if not 0.0 <= rate < 1.0:
        raise ValueError(f"dropout rate must lie in [0, 1), got {rate}")
    x = ensure_tensor(x)
    if not training or rate == 0.0:
        return x, None
    keep = rng.random(x.shape) >= rate
    mask = keep / (1.0 - rate)
    return x * mask, mask


def _im2col_indices(h: int, w: int, k: int, stride: int):
    oh = (h - k) // stride + 1
    ow = (w - k) // stride + 1
    return oh, ow


def conv2d(x: Tensor, weight: Tensor, bias: Tensor, stride: int = 1) -> Tensor:
    """Valid (unpadded) 2-D convolution, NCHW layout, square kernels."""
    x, weight, bias = ensure_tensor(x), ensure_tensor(weight), ensure_tensor(bias)
    n, c, h, w = x.shape
    f, c2, k, k2 = weight.shape
    if c != c2 or k != k2:
        raise ShapeError(f"conv2d mismatch: input {x.shape}, weight {weight.shape}")
    oh, ow = _im2col_indices(h, w, k, stride)
    sn, sc, sh, sw = x.data.strides
    cols = np.lib.stride_tricks.as_strided(
        x.data,
        shape=(n, oh, ow, c, k, k),
        strides=(sn, sh * stride, sw * stride, sc, sh, sw),
        writeable=False,
    ).reshape(n * oh * ow, c * k * k)
    wmat = weight.data.reshape(f, -1)
    out = (cols @ wmat.T + bias.data).reshape(n, oh, ow, f).transpose(0, 3, 1, 2)

    def backward(g):
        gmat = g.transpose(0, 2, 3, 1).reshape(-1, f)
        if weight.requires_grad:
            weight._accumulate((gmat.T @ cols).reshape(weight.shape))
        if bias.requires_grad:
            bias._accumulate(gmat.sum(axis=0))
        if x.requires_grad:
            dcols = (gmat @ wmat).reshape(n, oh, ow, c, k, k)
            dx = np.zeros_like(x.data)
            for i in range(k):
                for j in range(k):
                    dx[:, :, i:i + stride * oh:stride, j:j + stride * ow:stride] += (
                        dcols[:, :, :, :, i, j].transpose(0, 3, 1, 2)
                    )
            x._accumulate(dx)

    return Tensor._make(np.ascontiguousarray(out), (x, weight, bias), backward, "conv2d")
