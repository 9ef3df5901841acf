"""Dense tensors with taped reverse-mode differentiation.

float32 is the working precision for training and inference; float64 is the
verification precision used by the gradient and Jacobian oracles.  Any
operation that produces a NaN or Inf raises NonFiniteError immediately
instead of letting it propagate into later steps.

Broadcasting is supported for elementwise ops in the numpy sense, but the
intended patterns are scalars and per-channel parameters of shape (C, 1)
applied over (B, C, T) activations; adjoints sum over the broadcast axes.
"""

from __future__ import annotations

import contextlib

import numpy as np

FLOAT_DTYPES = (np.float32, np.float64)


class TensorError(Exception):
    """Base class for tensor engine failures."""


class ShapeError(TensorError):
    """Operand shapes are incompatible for the requested operation."""


class NonFiniteError(TensorError):
    """An operation produced NaN or Inf."""


_finite_checks = True


def set_finite_checks(enabled: bool) -> bool:
    """Toggle the per-op NaN/Inf guard. Returns the previous setting."""
    global _finite_checks
    previous = _finite_checks
    _finite_checks = bool(enabled)
    return previous


@contextlib.contextmanager
def finite_checks(enabled: bool):
    previous = set_finite_checks(enabled)
    try:
        yield
    finally:
        set_finite_checks(previous)


def _check_finite(op: str, data: np.ndarray) -> None:
    if _finite_checks and not np.all(np.isfinite(data)):
        bad = np.argwhere(~np.isfinite(data))
        raise NonFiniteError(
            f"{op} produced a non-finite value at index {tuple(bad[0])} "
            f"(output shape {data.shape})"
        )


class Tensor:
    """A dense float array plus gradient bookkeeping."""

    __slots__ = ("data", "requires_grad", "grad", "name")

    def __init__(self, data, requires_grad: bool = False, dtype=None, name: str | None = None):
        arr = np.asarray(data, dtype=dtype)
        if arr.dtype not in FLOAT_DTYPES:
            arr = arr.astype(np.float32)
        self.data = arr
        self.requires_grad = bool(requires_grad)
        self.grad: np.ndarray | None = None
        self.name = name
        _check_finite("tensor", arr)

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
        if self.data.size != 1:
            raise ShapeError(f"item() requires a scalar tensor, got shape {self.shape}")
        return float(self.data.reshape(-1)[0])

    def zero_grad(self) -> None:
        self.grad = None

    def detach(self) -> "Tensor":
        return Tensor(self.data, requires_grad=False)

    def __repr__(self):
        tag = f" name={self.name!r}" if self.name else ""
        return f"Tensor(shape={self.data.shape}, dtype={self.data.dtype.name}{tag})"

    # operator sugar; everything routes through the taped primitives below
    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(other, self)

    def __mul__(self, other):
        return mul(self, other)

    __rmul__ = __mul__

    def __truediv__(self, other):
        return div(self, other)

    def __rtruediv__(self, other):
        return div(other, self)

    def __neg__(self):
        return mul(self, -1.0)


def parameter(data, name: str | None = None, dtype=np.float32) -> Tensor:
    return Tensor(np.asarray(data, dtype=dtype), requires_grad=True, name=name)


class GradTape:
    """Ordered record of executed primitives and their adjoint closures.

    Backward replays the entries in strict reverse execution order. A tape
    belongs to one logical training thread; activate it with `with tape:`.
    """

    def __init__(self):
        # entries: (op name, output tensor, parent tensors, adjoint fn)
        self.entries: list[tuple[str, Tensor, tuple[Tensor, ...], callable]] = []

    def __enter__(self):
        _TAPE_STACK.append(self)
        return self

    def __exit__(self, exc_type, exc, tb):
        popped = _TAPE_STACK.pop()
        assert popped is self
        return False

    def op_names(self) -> list[str]:
        return [name for name, _, _, _ in self.entries]


_TAPE_STACK: list[GradTape] = []


def _active_tape() -> GradTape | None:
    return _TAPE_STACK[-1] if _TAPE_STACK else None


def _make_op(op: str, data: np.ndarray, parents: tuple[Tensor, ...], adjoint) -> Tensor:
    _check_finite(op, data)
    requires = any(p.requires_grad for p in parents)
    out = Tensor.__new__(Tensor)
    out.data = data
    out.requires_grad = requires
    out.grad = None
    out.name = None
    tape = _active_tape()
    if tape is not None and requires:
        tape.entries.append((op, out, parents, adjoint))
    return out


def backward(loss: Tensor, tape: GradTape) -> None:
    """Accumulate dloss/dparam into .grad for every recorded parameter.

    The loss must be a scalar produced through primitives recorded on `tape`.
    Adjoints run in strict reverse execution order; each parameter receives
    one summed gradient contribution per backward call.
    """
    if loss.data.size != 1:
        raise ShapeError(f"backward requires a scalar loss, got shape {loss.shape}")
    grads: dict[int, np.ndarray] = {id(loss): np.ones_like(loss.data)}
    produced = {id(out) for _, out, _, _ in tape.entries}
    for op, out, parents, adjoint in reversed(tape.entries):
        g = grads.pop(id(out), None)
        if g is None:
            continue
        parent_grads = adjoint(g)
        for parent, pg in zip(parents, parent_grads):
            if pg is None or not parent.requires_grad:
                continue
            key = id(parent)
            if key in grads:
                grads[key] = grads[key] + pg
            elif id(parent) in produced:
                grads[key] = pg
            else:
                # leaf parameter: fold into .grad immediately
                parent.grad = pg if parent.grad is None else parent.grad + pg
    if id(loss) not in produced and loss.requires_grad:
        loss.grad = np.ones_like(loss.data) if loss.grad is None else loss.grad + 1.0


def zero_grads(params) -> None:
    for p in params:
        p.zero_grad()


# ---------------------------------------------------------------------------
# coercion / broadcasting helpers


def _coerce_pair(op: str, a, b) -> tuple[Tensor, Tensor]:
    if not isinstance(a, Tensor) and not isinstance(b, Tensor):
        raise TypeError(f"{op}: at least one operand must be a Tensor")
    if not isinstance(a, Tensor):
        a = Tensor(np.asarray(a, dtype=b.dtype))
    if not isinstance(b, Tensor):
        b = Tensor(np.asarray(b, dtype=a.dtype))
    if a.dtype != b.dtype:
        raise ShapeError(f"{op}: mixed dtypes {a.dtype.name} and {b.dtype.name}")
    try:
        np.broadcast_shapes(a.shape, b.shape)
    except ValueError:
        raise ShapeError(f"{op}: shapes {a.shape} and {b.shape} do not broadcast") from None
    return a, b


def _unbroadcast(g: np.ndarray, shape: tuple) -> np.ndarray:
    """Sum gradient over axes that were broadcast in the forward pass."""
    if g.shape == shape:
        return g
    extra = g.ndim - len(shape)
    if extra > 0:
        g = g.sum(axis=tuple(range(extra)))
    keep = tuple(i for i, n in enumerate(shape) if n == 1 and g.shape[i] != 1)
    if keep:
        g = g.sum(axis=keep, keepdims=True)
    return g.reshape(shape)


# ---------------------------------------------------------------------------
# elementwise primitives


def add(a, b) -> Tensor:
    a, b = _coerce_pair("add", a, b)
    return _make_op(
        "add",
        a.data + b.data,
        (a, b),
        lambda g: (_unbroadcast(g, a.shape), _unbroadcast(g, b.shape)),
    )


def sub(a, b) -> Tensor:
    a, b = _coerce_pair("sub", a, b)
    return _make_op(
        "sub",
        a.data - b.data,
        (a, b),
        lambda g: (_unbroadcast(g, a.shape), _unbroadcast(-g, b.shape)),
    )


def mul(a, b) -> Tensor:
    a, b = _coerce_pair("mul", a, b)
    return _make_op(
        "mul",
        a.data * b.data,
        (a, b),
        lambda g: (_unbroadcast(g * b.data, a.shape), _unbroadcast(g * a.data, b.shape)),
    )


def div(a, b) -> Tensor:
    a, b = _coerce_pair("div", a, b)
    out = a.data / b.data

    def adjoint(g):
        ga = _unbroadcast(g / b.data, a.shape)
        gb = _unbroadcast(-g * a.data / (b.data * b.data), b.shape)
        return ga, gb

    return _make_op("div", out, (a, b), adjoint)


def exp(x: Tensor) -> Tensor:
    out = np.exp(x.data)
    return _make_op("exp", out, (x,), lambda g: (g * out,))


def log(x: Tensor) -> Tensor:
    with np.errstate(divide="ignore", invalid="ignore"):
        out = np.log(x.data)
    return _make_op("log", out, (x,), lambda g: (g / x.data,))


def tanh(x: Tensor) -> Tensor:
    out = np.tanh(x.data)
    return _make_op("tanh", out, (x,), lambda g: (g * (1.0 - out * out),))


def sigmoid(x: Tensor) -> Tensor:
    out = 1.0 / (1.0 + np.exp(-x.data))
    return _make_op("sigmoid", out, (x,), lambda g: (g * out * (1.0 - out),))


def absolute(x: Tensor) -> Tensor:
    # subgradient at 0 is 0 (sign convention); keeps L1 fixed points stationary
    return _make_op("abs", np.abs(x.data), (x,), lambda g: (g * np.sign(x.data),))


def sqrt(x: Tensor) -> Tensor:
    out = np.sqrt(x.data)
    tiny = 1e-12 if x.dtype == np.float32 else 1e-150

    def adjoint(g):
        # guarded at 0 so losses built on norms stay differentiable at equality
        return (g * (0.5 / np.maximum(out, tiny)),)

    return _make_op("sqrt", out, (x,), adjoint)


def square(x: Tensor) -> Tensor:
    return _make_op("square", x.data * x.data, (x,), lambda g: (g * 2.0 * x.data,))


def clamp_min(x: Tensor, floor: float) -> Tensor:
    out = np.maximum(x.data, x.dtype.type(floor))
    mask = x.data > floor

    def adjoint(g):
        return (g * mask,)

    return _make_op("clamp_min", out, (x,), adjoint)


# ---------------------------------------------------------------------------
# reductions


def tensor_sum(x: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    out = x.data.sum(axis=axis, keepdims=keepdims)

    def adjoint(g):
        if axis is None:
            return (np.broadcast_to(g, x.shape).copy(),)
        ax = axis if isinstance(axis, tuple) else (axis,)
        if not keepdims:
            g = np.expand_dims(g, ax)
        return (np.broadcast_to(g, x.shape).copy(),)

    return _make_op("sum", np.asarray(out), (x,), adjoint)


def mean(x: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    if axis is None:
        count = x.size
    else:
        ax = axis if isinstance(axis, tuple) else (axis,)
        count = 1
        for a in ax:
            count *= x.shape[a]
    return mul(tensor_sum(x, axis=axis, keepdims=keepdims), 1.0 / count)


# ---------------------------------------------------------------------------
# linear algebra


def matmul(a: Tensor, b: Tensor) -> Tensor:
    if not isinstance(a, Tensor) or not isinstance(b, Tensor):
        raise TypeError("matmul operands must be Tensors")
    if a.dtype != b.dtype:
        raise ShapeError(f"matmul: mixed dtypes {a.dtype.name} and {b.dtype.name}")
    if a.data.ndim < 2 or b.data.ndim < 2:
        raise ShapeError(f"matmul: operands must be at least 2-D, got {a.shape} @ {b.shape}")
    if a.shape[-1] != b.shape[-2]:
        raise ShapeError(f"matmul: inner dimensions differ for {a.shape} @ {b.shape}")
    out = np.matmul(a.data, b.data)

    def adjoint(g):
        ga = np.matmul(g, np.swapaxes(b.data, -1, -2))
        gb = np.matmul(np.swapaxes(a.data, -1, -2), g)
        return _unbroadcast(ga, a.shape), _unbroadcast(gb, b.shape)

    return _make_op("matmul", out, (a, b), adjoint)


def solve_channels(w: Tensor, y: Tensor) -> Tensor:
    """x = W^{-1} y applied over the channel axis of y (B, C, T).

    Solved per call (no cached inverse); differentiable in both W and y:
    dL/dy = W^{-T} g and dL/dW = -(W^{-T} g) x^T summed over batch and time.
    """
    if w.data.ndim != 2 or w.shape[0] != w.shape[1]:
        raise ShapeError(f"solve_channels: W must be square, got {w.shape}")
    if y.data.ndim != 3 or y.shape[1] != w.shape[0]:
        raise ShapeError(f"solve_channels: y shape {y.shape} incompatible with W {w.shape}")
    if w.dtype != y.dtype:
        raise ShapeError("solve_channels: mixed dtypes")
    batch, ch, tlen = y.shape
    w64 = w.data.astype(np.float64)
    sign, logabs = np.linalg.slogdet(w64)
    if sign == 0 or logabs < np.log(1e-8):
        raise NonFiniteError("solve_channels: matrix is singular or near-singular")
    yf = y.data.transpose(1, 0, 2).reshape(ch, batch * tlen)
    xf = np.linalg.solve(w64, yf.astype(np.float64)).astype(y.dtype)
    out = xf.reshape(ch, batch, tlen).transpose(1, 0, 2).copy()

    def adjoint(g):
        gf = g.transpose(1, 0, 2).reshape(ch, batch * tlen)
        gyf = np.linalg.solve(w64.T, gf.astype(np.float64)).astype(y.dtype)
        gw = -(gyf @ xf.T).astype(w.dtype)
        gy = gyf.reshape(ch, batch, tlen).transpose(1, 0, 2)
        return gw, gy

    return _make_op("solve_channels", out, (w, y), adjoint)


def slogdet_abs(w: Tensor) -> Tensor:
    """log|det W| for a square matrix, with adjoint g * inv(W)^T."""
    if w.data.ndim != 2 or w.shape[0] != w.shape[1]:
        raise ShapeError(f"slogdet_abs: expected a square matrix, got {w.shape}")
    sign, logabs = np.linalg.slogdet(w.data)
    if sign == 0 or not np.isfinite(logabs):
        raise NonFiniteError("slogdet_abs: matrix is singular")
    inv_t = np.linalg.inv(w.data).T.copy()

    def adjoint(g):
        return (g * inv_t,)

    return _make_op("slogdet_abs", np.asarray(logabs, dtype=w.dtype), (w,), adjoint)


# ---------------------------------------------------------------------------
# convolution and signal-layout ops


def conv1d(x: Tensor, w: Tensor, bias: Tensor | None = None, dilation: int = 1) -> Tensor:
    """Symmetrically zero-padded ("same") 1-D convolution.

    x: (B, Cin, T); w: (Cout, Cin, K) with odd K; output (B, Cout, T).
    Realized as an im2col gather plus one GEMM per call.
    """
    if x.data.ndim != 3 or w.data.ndim != 3:
        raise ShapeError(f"conv1d: need x (B,Cin,T) and w (Cout,Cin,K), got {x.shape} and {w.shape}")
    if x.shape[1] != w.shape[1]:
        raise ShapeError(f"conv1d: channel mismatch, x has {x.shape[1]} and w expects {w.shape[1]}")
    if w.shape[2] % 2 != 1:
        raise ShapeError(f"conv1d: kernel size must be odd, got {w.shape[2]}")
    if x.dtype != w.dtype or (bias is not None and bias.dtype != x.dtype):
        raise ShapeError("conv1d: mixed dtypes")
    batch, cin, tlen = x.shape
    cout, _, ksize = w.shape
    pad = dilation * (ksize - 1) // 2
    if ksize == 1:
        # pointwise conv: plain channel-mixing GEMM, no gather needed
        cols = x.data
    else:
        xp = np.zeros((batch, cin, tlen + 2 * pad), dtype=x.data.dtype)
        xp[:, :, pad:pad + tlen] = x.data
        cols = np.empty((batch, cin, ksize, tlen), dtype=x.data.dtype)
        for k in range(ksize):
            cols[:, :, k, :] = xp[:, :, k * dilation:k * dilation + tlen]
        cols = cols.reshape(batch, cin * ksize, tlen)
    wf = w.data.reshape(cout, cin * ksize)
    out = np.matmul(wf, cols)
    if bias is not None:
        out = out + bias.data[:, None]

    def adjoint(g):
        gw = np.matmul(g, cols.transpose(0, 2, 1)).sum(axis=0).reshape(w.shape)
        if ksize == 1:
            gx = np.matmul(wf.T, g)
        else:
            gcols = np.matmul(wf.T, g).reshape(batch, cin, ksize, tlen)
            gxp = np.zeros((batch, cin, tlen + 2 * pad), dtype=g.dtype)
            for k in range(ksize):
                gxp[:, :, k * dilation:k * dilation + tlen] += gcols[:, :, k, :]
            gx = gxp[:, :, pad:pad + tlen]
        gb = g.sum(axis=(0, 2)) if bias is not None else None
        return gx, gw, gb

    parents = (x, w) if bias is None else (x, w, bias)
    if bias is None:
        return _make_op("conv1d", out, parents, lambda g: adjoint(g)[:2])
    return _make_op("conv1d", out, parents, adjoint)


def narrow(x: Tensor, start: int, length: int, axis: int = 1) -> Tensor:
    if start < 0 or start + length > x.shape[axis]:
        raise ShapeError(f"narrow: [{start}:{start + length}) out of range for axis {axis} of {x.shape}")
    idx = [slice(None)] * x.data.ndim
    idx[axis] = slice(start, start + length)
    idx = tuple(idx)
    out = x.data[idx].copy()

    def adjoint(g):
        gx = np.zeros_like(x.data)
        gx[idx] = g
        return (gx,)

    return _make_op("narrow", out, (x,), adjoint)


def split_channels(x: Tensor, sizes: tuple[int, ...], axis: int = 1) -> tuple[Tensor, ...]:
    if sum(sizes) != x.shape[axis]:
        raise ShapeError(f"split: sizes {sizes} do not sum to axis {axis} of {x.shape}")
    pieces = []
    start = 0
    for s in sizes:
        pieces.append(narrow(x, start, s, axis=axis))
        start += s
    return tuple(pieces)


def concat(tensors, axis: int = 1) -> Tensor:
    tensors = tuple(tensors)
    if len(tensors) == 0:
        raise ShapeError("concat: empty input list")
    dt = tensors[0].dtype
    for t in tensors:
        if t.dtype != dt:
            raise ShapeError("concat: mixed dtypes")
    out = np.concatenate([t.data for t in tensors], axis=axis)
    sizes = [t.shape[axis] for t in tensors]

    def adjoint(g):
        grads = []
        start = 0
        for t, s in zip(tensors, sizes):
            idx = [slice(None)] * g.ndim
            idx[axis] = slice(start, start + s)
            grads.append(g[tuple(idx)])
            start += s
        return tuple(grads)

    return _make_op("concat", out, tensors, adjoint)


def squeeze_time(x: Tensor, group: int) -> Tensor:
    """(B, C, T) -> (B, C*group, T/group); channel c*group+j holds samples j, j+g, ...

    A pure permutation: bijective, log-det zero.
    """
    batch, ch, tlen = x.shape
    if group < 1 or tlen % group != 0:
        raise ShapeError(f"squeeze: time length {tlen} not divisible by group {group}")
    out = (
        x.data.reshape(batch, ch, tlen // group, group)
        .transpose(0, 1, 3, 2)
        .reshape(batch, ch * group, tlen // group)
        .copy()
    )

    def adjoint(g):
        return (_unsqueeze_array(g, group, ch),)

    return _make_op("squeeze", out, (x,), adjoint)


def _unsqueeze_array(y: np.ndarray, group: int, orig_ch: int) -> np.ndarray:
    batch, cg, tg = y.shape
    return (
        y.reshape(batch, orig_ch, group, tg)
        .transpose(0, 1, 3, 2)
        .reshape(batch, orig_ch, tg * group)
        .copy()
    )


def unsqueeze_time(x: Tensor, group: int) -> Tensor:
    batch, cg, tg = x.shape
    if group < 1 or cg % group != 0:
        raise ShapeError(f"unsqueeze: channel count {cg} not divisible by group {group}")
    ch = cg // group
    out = _unsqueeze_array(x.data, group, ch)

    def adjoint(g):
        return (
            g.reshape(batch, ch, tg * group // group, group)  # (B, C, T/g, g)
            .transpose(0, 1, 3, 2)
            .reshape(batch, cg, tg)
            .copy(),
        )

    return _make_op("unsqueeze", out, (x,), adjoint)


def repeat_time(x: Tensor, factor: int) -> Tensor:
    """Nearest-frame upsampling along the last axis."""
    if factor < 1:
        raise ShapeError(f"repeat_time: factor must be >= 1, got {factor}")
    out = np.repeat(x.data, factor, axis=-1)

    def adjoint(g):
        if factor == 1:
            return (g,)
        return (g.reshape(x.shape + (factor,)).sum(axis=-1),)

    return _make_op("repeat_time", out, (x,), adjoint)


def frame_signal(x: Tensor, win: int, hop: int) -> Tensor:
    """(B, T) -> (B, F, win) frames at stride hop; only complete windows."""
    if x.data.ndim != 2:
        raise ShapeError(f"frame_signal: expected (B, T), got {x.shape}")
    batch, tlen = x.shape
    if tlen < win:
        raise ShapeError(f"frame_signal: signal length {tlen} shorter than window {win}")
    nframes = 1 + (tlen - win) // hop
    view = np.lib.stride_tricks.sliding_window_view(x.data, win, axis=1)
    out = view[:, ::hop][:, :nframes].copy()

    def adjoint(g):
        gx = np.zeros_like(x.data)
        for f in range(nframes):
            gx[:, f * hop:f * hop + win] += g[:, f]
        return (gx,)

    return _make_op("frame", out, (x,), adjoint)


def reshape(x: Tensor, shape: tuple) -> Tensor:
    out = x.data.reshape(shape).copy()

    def adjoint(g):
        return (g.reshape(x.shape),)

    return _make_op("reshape", out, (x,), adjoint)
