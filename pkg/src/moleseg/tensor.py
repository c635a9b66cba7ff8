"""NumPy-backed dense tensors with taped reverse-mode differentiation.

Model state lives in float32; gradient checks may run the same graph in
float64 by feeding float64 leaves. Each op records a backward closure on
its output; ``backward`` walks the recorded graph once and then consumes
it. Single-threaded by contract: one logical thread owns a graph.
"""

from __future__ import annotations

import contextlib
import os
from typing import Sequence

import numpy as np

from . import kernels

__all__ = [
    "Tensor", "Parameter", "ParameterRegistry", "ShapeError", "GraphError",
    "no_grad", "set_debug_checks", "tensor",
    "add", "sub", "mul", "neg", "div", "matmul", "relu", "softmax", "dropout",
    "conv1x1", "upsample_bilinear", "mean_spatial", "concat_channels",
    "avgpool2x2", "pad2d", "crop2d", "transpose", "reshape", "sum_all",
    "stack1d", "select_index",
]


class ShapeError(ValueError):
    """Operand shapes violate an op's contract."""


class GraphError(RuntimeError):
    """Backward called on an unusable graph (non-scalar, consumed, detached)."""


_grad_enabled = True
_debug_checks = os.environ.get("MMSEG_DEBUG", "") not in ("", "0", "false")


def set_debug_checks(enabled: bool) -> None:
    """Toggle NaN/Inf guards on op outputs (off by default)."""
    global _debug_checks
    _debug_checks = bool(enabled)


@contextlib.contextmanager
def no_grad():
    """Disable tape recording inside the block (inference mode)."""
    global _grad_enabled
    prev = _grad_enabled
    _grad_enabled = False
    try:
        yield
    finally:
        _grad_enabled = prev


class Tensor:
    """Dense float array with an optional gradient slot.

    The data buffer is treated as immutable once wrapped; ops never write
    to their inputs.
    """

    __slots__ = ("data", "grad", "requires_grad", "_parents", "_backward", "_consumed")

    def __init__(self, data, requires_grad: bool = False, dtype=None):
        arr = np.asarray(data, dtype=dtype if dtype is not None else None)
        if arr.dtype not in (np.float32, np.float64):
            arr = arr.astype(np.float32)
        self.data = arr
        self.requires_grad = bool(requires_grad)
        self.grad = np.zeros_like(arr) if self.requires_grad else None
        self._parents = ()
        self._backward = None
        self._consumed = False

    # -- introspection ----------------------------------------------------
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

    def __repr__(self):
        return f"Tensor(shape={self.data.shape}, dtype={self.data.dtype.name}, grad={self.requires_grad})"

    # -- gradient plumbing -------------------------------------------------
    def _ensure_grad(self):
        if self.grad is None:
            self.grad = np.zeros_like(self.data)

    def zero_grad(self):
        if self.grad is not None:
            self.grad[...] = 0.0

    def backward(self):
        """Populate .grad of every reachable tensor with d(self)/d(tensor)."""
        if self.data.size != 1:
            raise GraphError(f"backward needs a scalar loss, got shape {self.data.shape}")
        if self._consumed:
            raise GraphError("graph already consumed by a previous backward")
        if not self.requires_grad:
            raise GraphError("loss is not connected to any recorded op")

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
            for p in node._parents:
                if p.requires_grad and id(p) not in seen:
                    stack.append((p, False))

        self._ensure_grad()
        self.grad[...] = 1.0
        for node in reversed(topo):
            if node._backward is not None:
                node._backward(node.grad)
        # consume: free closures so buffers can be collected
        for node in topo:
            node._backward = None
            node._parents = ()
        self._consumed = True

    # -- operator sugar ------------------------------------------------------
    def __add__(self, other):
        return add(self, other)

    def __radd__(self, other):
        return add(other, self)

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(other, self)

    def __mul__(self, other):
        return mul(self, other)

    def __rmul__(self, other):
        return mul(other, self)

    def __neg__(self):
        return neg(self)

    def __matmul__(self, other):
        return matmul(self, other)


def tensor(data, requires_grad=False, dtype=None) -> Tensor:
    return data if isinstance(data, Tensor) and dtype is None else Tensor(
        data.data if isinstance(data, Tensor) else data, requires_grad, dtype
    )


def _as_tensor(x, like: Tensor | None = None) -> Tensor:
    if isinstance(x, Tensor):
        return x
    dtype = like.dtype if like is not None else np.float32
    return Tensor(np.asarray(x, dtype=dtype))


def _finite_guard(arr):
    if _debug_checks and not np.all(np.isfinite(arr)):
        raise FloatingPointError("non-finite value produced by a forward op")


def _make(out_data, parents: Sequence[Tensor], backward) -> Tensor:
    """Wrap an op result, recording the closure when the tape is live."""
    _finite_guard(out_data)
    out = Tensor(out_data)
    if _grad_enabled and any(p.requires_grad for p in parents):
        out.requires_grad = True
        out.grad = np.zeros_like(out.data)
        out._parents = tuple(p for p in parents if p.requires_grad)
        out._backward = backward
    return out


def _unbroadcast(grad, shape):
    """Reduce a broadcast gradient back to the operand shape."""
    while grad.ndim > len(shape):
        grad = grad.sum(axis=0)
    for axis, extent in enumerate(shape):
        if extent == 1 and grad.shape[axis] != 1:
            grad = grad.sum(axis=axis, keepdims=True)
    return grad


def _accum(t: Tensor, grad):
    if t.requires_grad:
        t._ensure_grad()
        t.grad += _unbroadcast(grad, t.data.shape)


# -- elementwise -------------------------------------------------------------

def add(a, b) -> Tensor:
    a = _as_tensor(a, b if isinstance(b, Tensor) else None)
    b = _as_tensor(b, a)
    out = a.data + b.data

    def bwd(g):
        _accum(a, g)
        _accum(b, g)

    return _make(out, (a, b), bwd)


def sub(a, b) -> Tensor:
    a = _as_tensor(a, b if isinstance(b, Tensor) else None)
    b = _as_tensor(b, a)
    out = a.data - b.data

    def bwd(g):
        _accum(a, g)
        _accum(b, -g)

    return _make(out, (a, b), bwd)


def mul(a, b) -> Tensor:
    a = _as_tensor(a, b if isinstance(b, Tensor) else None)
    b = _as_tensor(b, a)
    out = a.data * b.data

    def bwd(g):
        _accum(a, g * b.data)
        _accum(b, g * a.data)

    return _make(out, (a, b), bwd)


def neg(a) -> Tensor:
    a = _as_tensor(a)
    return _make(-a.data, (a,), lambda g: _accum(a, -g))


def div(a, b) -> Tensor:
    a = _as_tensor(a, b if isinstance(b, Tensor) else None)
    b = _as_tensor(b, a)
    out = a.data / b.data

    def bwd(g):
        _accum(a, g / b.data)
        _accum(b, -g * a.data / (b.data * b.data))

    return _make(out, (a, b), bwd)


def relu(a) -> Tensor:
    a = _as_tensor(a)
    mask = a.data > 0

    def bwd(g):
        _accum(a, g * mask)

    return _make(np.where(mask, a.data, 0.0).astype(a.dtype), (a,), bwd)


def dropout(a: Tensor, rate: float, rng: np.random.Generator) -> Tensor:
    """Inverted dropout; caller applies only in train mode."""
    if not 0.0 <= rate < 1.0:
        raise ValueError(f"dropout rate must be in [0, 1), got {rate}")
    if rate == 0.0:
        return a
    keep = (rng.random(a.data.shape) >= rate).astype(a.dtype)
    scale = 1.0 / (1.0 - rate)
    out = a.data * keep * scale

    def bwd(g):
        _accum(a, g * keep * scale)

    return _make(out, (a,), bwd)


# -- linear algebra -----------------------------------------------------------

def matmul(a, b) -> Tensor:
    """Matrix product; batch dimensions follow NumPy broadcasting."""
    a = _as_tensor(a)
    b = _as_tensor(b, a)
    if a.data.ndim < 2 or b.data.ndim < 2:
        raise ShapeError(f"matmul needs rank >= 2 operands, got {a.shape} x {b.shape}")
    if a.data.shape[-1] != b.data.shape[-2]:
        raise ShapeError(f"matmul inner extents disagree: {a.shape} x {b.shape}")
    out = a.data @ b.data

    def bwd(g):
        _accum(a, g @ np.swapaxes(b.data, -1, -2))
        _accum(b, np.swapaxes(a.data, -1, -2) @ g)

    return _make(out, (a, b), bwd)


def softmax(x, axis: int = -1) -> Tensor:
    """Max-stabilized softmax along ``axis``; slices sum to one."""
    x = _as_tensor(x)
    if not -x.data.ndim <= axis < x.data.ndim:
        raise ShapeError(f"softmax axis {axis} out of range for shape {x.shape}")
    shifted = x.data - x.data.max(axis=axis, keepdims=True)
    e = np.exp(shifted)
    y = e / e.sum(axis=axis, keepdims=True)

    def bwd(g):
        dot = (g * y).sum(axis=axis, keepdims=True)
        _accum(x, y * (g - dot))

    return _make(y, (x,), bwd)


def conv1x1(x, w, b=None) -> Tensor:
    """Per-pixel linear map: x[C_in,H,W], w[C_out,C_in], b[C_out] -> [C_out,H,W]."""
    x = _as_tensor(x)
    w = _as_tensor(w, x)
    if x.data.ndim != 3 or w.data.ndim != 2:
        raise ShapeError(f"conv1x1 expects x[C,H,W], w[Cout,Cin]; got {x.shape}, {w.shape}")
    c_in, h, wd = x.data.shape
    if w.data.shape[1] != c_in:
        raise ShapeError(f"conv1x1 channel mismatch: x has {c_in}, w expects {w.data.shape[1]}")
    xf = x.data.reshape(c_in, h * wd)
    out2d = w.data @ xf
    if b is not None:
        b = _as_tensor(b, x)
        if b.data.shape != (w.data.shape[0],):
            raise ShapeError(f"conv1x1 bias shape {b.shape} != ({w.data.shape[0]},)")
        out2d = out2d + b.data[:, None]
    out = out2d.reshape(w.data.shape[0], h, wd)

    def bwd(g):
        g2 = g.reshape(g.shape[0], h * wd)
        _accum(x, (w.data.T @ g2).reshape(c_in, h, wd))
        _accum(w, g2 @ xf.T)
        if b is not None:
            _accum(b, g2.sum(axis=1))

    parents = (x, w) if b is None else (x, w, b)
    return _make(out, parents, bwd)


def upsample_bilinear(x, out_h: int, out_w: int) -> Tensor:
    """Half-pixel-center bilinear resample of x[C,H,W]."""
    x = _as_tensor(x)
    if x.data.ndim != 3:
        raise ShapeError(f"upsample expects x[C,H,W], got {x.shape}")
    if out_h <= 0 or out_w <= 0:
        raise ShapeError(f"upsample target must be positive, got {out_h}x{out_w}")
    c, h, w = x.data.shape
    out = kernels.upsample_bilinear_fwd(x.data, out_h, out_w)

    def bwd(g):
        _accum(x, kernels.upsample_bilinear_bwd(g, h, w))

    return _make(out, (x,), bwd)


def mean_spatial(x) -> Tensor:
    """Per-channel mean over spatial positions: x[C,H,W] -> [C]."""
    x = _as_tensor(x)
    if x.data.ndim != 3:
        raise ShapeError(f"mean_spatial expects x[C,H,W], got {x.shape}")
    c, h, w = x.data.shape
    out = x.data.mean(axis=(1, 2))

    def bwd(g):
        _accum(x, np.broadcast_to(g[:, None, None] / (h * w), x.data.shape))

    return _make(out, (x,), bwd)


def concat_channels(xs: Sequence[Tensor]) -> Tensor:
    """Concatenate [C_i,H,W] maps along channels, blocks in argument order."""
    xs = [_as_tensor(x) for x in xs]
    if not xs:
        raise ShapeError("concat_channels needs at least one input")
    spatial = xs[0].data.shape[1:]
    for x in xs:
        if x.data.ndim != 3 or x.data.shape[1:] != spatial:
            raise ShapeError(
                f"concat_channels spatial mismatch: {x.shape} vs (*,{spatial[0]},{spatial[1]})"
            )
    out = np.concatenate([x.data for x in xs], axis=0)
    offsets = np.cumsum([0] + [x.data.shape[0] for x in xs])

    def bwd(g):
        for x, lo, hi in zip(xs, offsets[:-1], offsets[1:]):
            _accum(x, g[lo:hi])

    return _make(out, tuple(xs), bwd)


def avgpool2x2(x) -> Tensor:
    """2x2 average pooling on x[C,H,W]; H and W must be even."""
    x = _as_tensor(x)
    c, h, w = x.data.shape
    if h % 2 or w % 2:
        raise ShapeError(f"avgpool2x2 needs even spatial extents, got {h}x{w}")
    out = x.data.reshape(c, h // 2, 2, w // 2, 2).mean(axis=(2, 4))

    def bwd(g):
        _accum(x, np.repeat(np.repeat(g, 2, axis=1), 2, axis=2) * 0.25)

    return _make(out, (x,), bwd)


# -- layout ------------------------------------------------------------------

def pad2d(x, pad_h: int, pad_w: int, axes=(-2, -1)) -> Tensor:
    """Zero-pad ``axes`` of x by (pad_h, pad_w) at their high ends."""
    x = _as_tensor(x)
    ah, aw = (a % x.data.ndim for a in axes)
    widths = [(0, 0)] * x.data.ndim
    widths[ah] = (0, pad_h)
    widths[aw] = (0, pad_w)
    out = np.pad(x.data, widths)
    sl = tuple(
        slice(0, x.data.shape[i]) if i in (ah, aw) else slice(None)
        for i in range(x.data.ndim)
    )

    def bwd(g):
        _accum(x, g[sl])

    return _make(out, (x,), bwd)


def crop2d(x, h: int, w: int, axes=(-2, -1)) -> Tensor:
    """Keep the first h (resp. w) entries of ``axes``."""
    x = _as_tensor(x)
    ah, aw = (a % x.data.ndim for a in axes)
    sl = tuple(
        slice(0, h) if i == ah else slice(0, w) if i == aw else slice(None)
        for i in range(x.data.ndim)
    )
    out = x.data[sl].copy()

    def bwd(g):
        full = np.zeros_like(x.data)
        full[sl] = g
        _accum(x, full)

    return _make(out, (x,), bwd)


def transpose(x, axes) -> Tensor:
    x = _as_tensor(x)
    axes = tuple(axes)
    inverse = tuple(np.argsort(axes))
    out = np.transpose(x.data, axes)

    def bwd(g):
        _accum(x, np.transpose(g, inverse))

    return _make(out, (x,), bwd)


def reshape(x, shape) -> Tensor:
    x = _as_tensor(x)
    out = x.data.reshape(shape)

    def bwd(g):
        _accum(x, g.reshape(x.data.shape))

    return _make(out, (x,), bwd)


def sum_all(x) -> Tensor:
    """Sum every element to a scalar tensor."""
    x = _as_tensor(x)
    out = np.asarray(x.data.sum(dtype=x.dtype))

    def bwd(g):
        _accum(x, np.broadcast_to(g, x.data.shape))

    return _make(out, (x,), bwd)


def stack1d(xs: Sequence[Tensor]) -> Tensor:
    """Stack scalar tensors into a 1-D vector."""
    xs = [_as_tensor(x) for x in xs]
    for x in xs:
        if x.data.size != 1:
            raise ShapeError(f"stack1d needs scalars, got shape {x.shape}")
    out = np.array([x.data.reshape(()) for x in xs], dtype=xs[0].dtype)

    def bwd(g):
        for i, x in enumerate(xs):
            _accum(x, g[i].reshape(x.data.shape))

    return _make(out, tuple(xs), bwd)


def select_index(x, i: int) -> Tensor:
    """Pick element i of a 1-D tensor as a scalar."""
    x = _as_tensor(x)
    if x.data.ndim != 1:
        raise ShapeError(f"select_index needs a vector, got shape {x.shape}")
    out = np.asarray(x.data[i])

    def bwd(g):
        full = np.zeros_like(x.data)
        full[i] = g
        _accum(x, full)

    return _make(out, (x,), bwd)


# -- parameters ----------------------------------------------------------------

class Parameter:
    """Named leaf tensor; frozen parameters never receive gradients."""

    __slots__ = ("name", "tensor", "frozen")

    def __init__(self, name: str, data, frozen: bool = False, dtype=np.float32):
        self.name = name
        self.frozen = bool(frozen)
        self.tensor = Tensor(np.array(data, dtype=dtype), requires_grad=not frozen)

    @property
    def data(self) -> np.ndarray:
        return self.tensor.data

    @property
    def grad(self):
        return self.tensor.grad

    def zero_grad(self):
        self.tensor.zero_grad()

    def __repr__(self):
        kind = "frozen" if self.frozen else "trainable"
        return f"Parameter({self.name!r}, shape={self.data.shape}, {kind})"


class ParameterRegistry:
    """Model-wide parameter table; names are unique."""

    def __init__(self):
        self._params: dict[str, Parameter] = {}

    def register(self, name: str, data, frozen: bool = False) -> Parameter:
        if name in self._params:
            raise ValueError(f"duplicate parameter name: {name}")
        p = Parameter(name, data, frozen=frozen)
        self._params[name] = p
        return p

    def __getitem__(self, name: str) -> Parameter:
        return self._params[name]

    def __contains__(self, name: str) -> bool:
        return name in self._params

    def __len__(self):
        return len(self._params)

    def all(self) -> list[Parameter]:
        return list(self._params.values())

    def trainable(self) -> list[Parameter]:
        return [p for p in self._params.values() if not p.frozen]

    def frozen(self) -> list[Parameter]:
        return [p for p in self._params.values() if p.frozen]

    def zero_grad(self):
        for p in self._params.values():
            p.zero_grad()

    def state_dict(self) -> dict[str, np.ndarray]:
        return {name: p.data.copy() for name, p in self._params.items()}

    def load_state_dict(self, state: dict[str, np.ndarray]):
        missing = set(self._params) - set(state)
        extra = set(state) - set(self._params)
        if missing or extra:
            raise ValueError(f"state mismatch: missing={sorted(missing)} extra={sorted(extra)}")
        for name, arr in state.items():
            p = self._params[name]
            if arr.shape != p.data.shape:
                raise ValueError(
                    f"shape mismatch for {name}: checkpoint {arr.shape} vs model {p.data.shape}"
                )
            p.tensor.data = arr.astype(p.data.dtype).copy()

    def cast(self, dtype):
        """Switch every parameter buffer to ``dtype`` (gradient-check mode)."""
        for p in self._params.values():
            p.tensor.data = p.tensor.data.astype(dtype)
            if p.tensor.grad is not None:
                p.tensor.grad = np.zeros_like(p.tensor.data)
