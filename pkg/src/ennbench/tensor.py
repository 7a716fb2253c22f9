"""Dense float tensors with reverse-mode automatic differentiation.

Eager autograd over numpy arrays: each differentiable op returns a new
``Tensor`` holding the forward value plus a closure that routes output
gradients into its parents. ``backward()`` on a scalar walks the recorded
graph exactly once in reverse topological order (the graph is the set of
parent links kept on each result tensor).

Numeric policy:
  - float32 is the working precision for parameters and activations;
    float64 tensors are supported so gradient checks can run in 64-bit.
  - ``sum``/``mean`` accumulate in float64 regardless of input dtype.
  - any NaN/Inf in a forward value or a gradient raises ``NonFiniteError``
    at the op that produced it; non-finite values are never propagated.
  - broadcasting is limited to bias addition (row-wise and per-channel).

Tensors without graph attachments are plain arrays and safe to share
across threads; graph construction and backward are single-threaded per
model instance.
"""

from __future__ import annotations

import numpy as np

from .errors import ContractError, NonFiniteError, ShapeError

_ALLOWED_DTYPES = (np.float32, np.float64)


def _check_finite(arr, where: str) -> None:
    if not np.all(np.isfinite(arr)):
        raise NonFiniteError(f"non-finite value produced by {where}")


class Tensor:
    """A dense float array plus an optional autodiff graph node.

    ``data`` is a row-major numpy array; ``grad`` is lazily allocated and
    has the same shape. Ops attach a closure and parent links only when
    some input has ``requires_grad`` set, so frozen subgraphs cost nothing
    and receive no gradient.
    """

    __slots__ = ("data", "grad", "requires_grad", "_parents", "_grad_fn", "_op")

    def __init__(self, data, requires_grad: bool = False, dtype=None):
        if dtype is not None:
            arr = np.asarray(data, dtype=dtype)
        else:
            arr = np.asarray(data)
            if arr.dtype not in _ALLOWED_DTYPES:
                arr = arr.astype(np.float32)
        _check_finite(arr, "tensor construction")
        self.data = arr
        self.grad = None
        self.requires_grad = bool(requires_grad)
        self._parents = ()
        self._grad_fn = None
        self._op = "leaf"

    # -- basic properties ------------------------------------------------

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
        if self.data.size != 1:
            raise ContractError(f"item() needs a scalar, got shape {self.shape}")
        return float(self.data)

    def detach(self) -> "Tensor":
        return Tensor(self.data, requires_grad=False)

    def zero_grad(self) -> None:
        self.grad = None

    def __repr__(self):
        return f"Tensor(shape={tuple(self.shape)}, op={self._op}, grad={self.requires_grad})"

    # -- graph plumbing ---------------------------------------------------

    def _accumulate(self, g) -> None:
        if not self.requires_grad:
            return
        if self.grad is None:
            self.grad = np.zeros_like(self.data)
        self.grad += g.astype(self.data.dtype, copy=False)

    @staticmethod
    def _result(data, op: str, parents, grad_fn) -> "Tensor":
        _check_finite(data, op)
        out = Tensor.__new__(Tensor)
        out.data = data
        out.grad = None
        out._op = op
        if any(p.requires_grad for p in parents):
            out.requires_grad = True
            out._parents = tuple(parents)
            out._grad_fn = grad_fn
        else:
            out.requires_grad = False
            out._parents = ()
            out._grad_fn = None
        return out

    def backward(self) -> None:
        """Populate grads of every reachable tensor with requires_grad.

        Must be called on a scalar. Each graph node is visited exactly
        once, in reverse topological order.
        """
        if self.data.size != 1:
            raise ContractError(f"backward() needs a scalar loss, got shape {self.shape}")
        if not self.requires_grad:
            return
        topo: list[Tensor] = []
        seen: set[int] = set()
        stack: list[tuple[Tensor, bool]] = [(self, False)]
        while stack:
            node, expanded = stack.pop()
            if expanded:
                topo.append(node)
                continue
            if id(node) in seen:
                continue
            seen.add(id(node))
            stack.append((node, True))
            for parent in node._parents:
                if parent.requires_grad and id(parent) not in seen:
                    stack.append((parent, False))
        self.grad = np.ones_like(self.data)
        for node in reversed(topo):
            if node.grad is None:
                continue
            _check_finite(node.grad, f"gradient of {node._op}")
            if node._grad_fn is not None:
                node._grad_fn(node.grad)

    # -- elementwise and structural ops ------------------------------------

    def _binary_check(self, other: "Tensor", op: str) -> None:
        if not isinstance(other, Tensor):
            raise ContractError(f"{op} expects a Tensor operand")
        if self.shape != other.shape:
            raise ShapeError(f"{op}: shapes {tuple(self.shape)} and {tuple(other.shape)} differ")
        if self.dtype != other.dtype:
            raise ContractError(f"{op}: dtypes {self.dtype} and {other.dtype} differ")

    def add(self, other: "Tensor") -> "Tensor":
        self._binary_check(other, "add")
        a, b = self, other

        def grad_fn(g):
            a._accumulate(g)
            b._accumulate(g)

        return Tensor._result(a.data + b.data, "add", (a, b), grad_fn)

    def mul(self, other: "Tensor") -> "Tensor":
        self._binary_check(other, "mul")
        a, b = self, other

        def grad_fn(g):
            a._accumulate(g * b.data)
            b._accumulate(g * a.data)

        return Tensor._result(a.data * b.data, "mul", (a, b), grad_fn)

    def scale(self, s: float) -> "Tensor":
        a = self
        s = float(s)

        def grad_fn(g):
            a._accumulate(g * s)

        return Tensor._result(a.data * a.dtype.type(s), "scale", (a,), grad_fn)

    def add_bias(self, bias: "Tensor") -> "Tensor":
        """Row-wise bias: (N, C) + (C,). The only 2-D broadcast allowed."""
        if self.data.ndim != 2 or bias.data.ndim != 1:
            raise ShapeError(
                f"add_bias: need (N, C) + (C,), got {tuple(self.shape)} and {tuple(bias.shape)}"
            )
        if self.shape[1] != bias.shape[0]:
            raise ShapeError(f"add_bias: shapes {tuple(self.shape)} and {tuple(bias.shape)} differ")
        a, b = self, bias

        def grad_fn(g):
            a._accumulate(g)
            b._accumulate(g.sum(axis=0))

        return Tensor._result(a.data + b.data, "add_bias", (a, b), grad_fn)

    def add_channel_bias(self, bias: "Tensor") -> "Tensor":
        """Per-channel bias: (N, F, H, W) + (F,)."""
        if self.data.ndim != 4 or bias.data.ndim != 1 or self.shape[1] != bias.shape[0]:
            raise ShapeError(
                f"add_channel_bias: need (N, F, H, W) + (F,), got "
                f"{tuple(self.shape)} and {tuple(bias.shape)}"
            )
        a, b = self, bias

        def grad_fn(g):
            a._accumulate(g)
            b._accumulate(g.sum(axis=(0, 2, 3)))

        return Tensor._result(a.data + b.data[None, :, None, None], "add_channel_bias", (a, b), grad_fn)

    def relu(self) -> "Tensor":
        a = self
        mask = a.data > 0

        def grad_fn(g):
            a._accumulate(g * mask)

        return Tensor._result(np.where(mask, a.data, a.dtype.type(0)), "relu", (a,), grad_fn)

    def reshape(self, shape) -> "Tensor":
        a = self
        orig = a.data.shape

        def grad_fn(g):
            a._accumulate(g.reshape(orig))

        return Tensor._result(a.data.reshape(shape), "reshape", (a,), grad_fn)

    def flatten2d(self) -> "Tensor":
        """(N, ...) -> (N, prod(...))."""
        n = self.shape[0]
        return self.reshape((n, -1))

    # -- linear algebra -----------------------------------------------------

    def matmul(self, other: "Tensor") -> "Tensor":
        if not isinstance(other, Tensor):
            raise ContractError("matmul expects a Tensor operand")
        if self.data.ndim != 2 or other.data.ndim != 2:
            raise ShapeError(
                f"matmul: need 2-D operands, got {tuple(self.shape)} and {tuple(other.shape)}"
            )
        if self.shape[1] != other.shape[0]:
            raise ShapeError(
                f"matmul: inner dimensions disagree between {tuple(self.shape)} "
                f"and {tuple(other.shape)}"
            )
        if self.dtype != other.dtype:
            raise ContractError(f"matmul: dtypes {self.dtype} and {other.dtype} differ")
        a, b = self, other

        def grad_fn(g):
            a._accumulate(g @ b.data.T)
            b._accumulate(a.data.T @ g)

        return Tensor._result(a.data @ b.data, "matmul", (a, b), grad_fn)

    # -- reductions ----------------------------------------------------------

    def sum(self) -> "Tensor":
        """Sum of all entries, accumulated in float64."""
        a = self

        def grad_fn(g):
            a._accumulate(np.full(a.data.shape, float(g), dtype=a.data.dtype))

        out = np.asarray(a.data.sum(dtype=np.float64))
        return Tensor._result(out, "sum", (a,), grad_fn)

    def mean(self) -> "Tensor":
        """Mean of all entries, accumulated in float64."""
        a = self
        n = a.data.size
        if n == 0:
            raise ContractError("mean of an empty tensor")

        def grad_fn(g):
            a._accumulate(np.full(a.data.shape, float(g) / n, dtype=a.data.dtype))

        out = np.asarray(a.data.sum(dtype=np.float64) / n)
        return Tensor._result(out, "mean", (a,), grad_fn)

    # -- classification ops ----------------------------------------------------

    def log_softmax(self) -> "Tensor":
        """Row-wise log-softmax with max subtraction; input is (N, C)."""
        if self.data.ndim != 2:
            raise ShapeError(f"log_softmax: need (N, C), got {tuple(self.shape)}")
        a = self
        shifted = a.data - a.data.max(axis=1, keepdims=True)
        out = shifted - np.log(np.exp(shifted).sum(axis=1, keepdims=True))

        def grad_fn(g):
            softmax = np.exp(out)
            a._accumulate(g - softmax * g.sum(axis=1, keepdims=True))

        return Tensor._result(out, "log_softmax", (a,), grad_fn)

    def gather_rows(self, index) -> "Tensor":
        """Pick one entry per row of a (N, C) tensor: out[i] = x[i, index[i]]."""
        if self.data.ndim != 2:
            raise ShapeError(f"gather_rows: need (N, C), got {tuple(self.shape)}")
        idx = np.asarray(index)
        if idx.shape != (self.shape[0],):
            raise ShapeError(f"gather_rows: index shape {idx.shape} != ({self.shape[0]},)")
        a = self
        rows = np.arange(a.shape[0])

        def grad_fn(g):
            if a.requires_grad:
                ga = np.zeros_like(a.data)
                np.add.at(ga, (rows, idx), g)
                a._accumulate(ga)

        return Tensor._result(a.data[rows, idx], "gather_rows", (a,), grad_fn)


def conv2d(x: Tensor, kernel: Tensor, stride: int = 1) -> Tensor:
    """Valid (unpadded) 2-D cross-correlation.

    ``x`` is (N, C, H, W), ``kernel`` is (F, C, kh, kw); output is
    (N, F, H', W') with H' = floor((H - kh) / stride) + 1.
    """
    if x.data.ndim != 4 or kernel.data.ndim != 4:
        raise ShapeError(
            f"conv2d: need (N,C,H,W) and (F,C,kh,kw), got {tuple(x.shape)} and {tuple(kernel.shape)}"
        )
    n, c, h, w = x.shape
    f, ck, kh, kw = kernel.shape
    if ck != c:
        raise ShapeError(f"conv2d: input channels {c} != kernel channels {ck}")
    if kh > h or kw > w:
        raise ShapeError(f"conv2d: kernel {kh}x{kw} larger than input {h}x{w}")
    if stride < 1:
        raise ContractError(f"conv2d: stride must be >= 1, got {stride}")
    if x.dtype != kernel.dtype:
        raise ContractError(f"conv2d: dtypes {x.dtype} and {kernel.dtype} differ")

    ho = (h - kh) // stride + 1
    wo = (w - kw) // stride + 1
    windows = np.lib.stride_tricks.sliding_window_view(x.data, (kh, kw), axis=(2, 3))
    windows = windows[:, :, ::stride, ::stride]  # (N, C, Ho, Wo, kh, kw)
    out = np.einsum("nchwij,fcij->nfhw", windows, kernel.data, optimize=True)

    def grad_fn(g):
        if kernel.requires_grad:
            kernel._accumulate(np.einsum("nchwij,nfhw->fcij", windows, g, optimize=True))
        if x.requires_grad:
            gx = np.zeros_like(x.data)
            for i in range(kh):
                for j in range(kw):
                    gx[:, :, i : i + stride * ho : stride, j : j + stride * wo : stride] += np.einsum(
                        "nfhw,fc->nchw", g, kernel.data[:, :, i, j], optimize=True
                    )
            x._accumulate(gx)

    return Tensor._result(np.ascontiguousarray(out), "conv2d", (x, kernel), grad_fn)


def index_contract(h: Tensor, index: np.ndarray, classes: int) -> Tensor:
    """Contract a (N, classes*d) head output with a per-row index vector.

    ``index`` is a constant (N, d) array; out[n, c] = sum_d h[n, c, d] * index[n, d].
    No gradient flows into the index.
    """
    idx = np.asarray(index)
    if h.data.ndim != 2 or idx.ndim != 2 or h.shape[0] != idx.shape[0]:
        raise ShapeError(
            f"index_contract: need (N, C*d) and (N, d), got {tuple(h.shape)} and {idx.shape}"
        )
    n, flat = h.shape
    d = idx.shape[1]
    if flat != classes * d:
        raise ShapeError(f"index_contract: {flat} != classes {classes} * index dim {d}")
    idx = idx.astype(h.data.dtype, copy=False)
    h3 = h.data.reshape(n, classes, d)
    out = np.einsum("ncd,nd->nc", h3, idx, optimize=True)

    def grad_fn(g):
        h._accumulate((g[:, :, None] * idx[:, None, :]).reshape(n, flat))

    return Tensor._result(out, "index_contract", (h,), grad_fn)
