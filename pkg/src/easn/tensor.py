"""Dense 4-D float64 tensors with a tape-based reverse-mode gradient engine.

The array layout is fixed to (batch, channels, height, width); scalars are
(1, 1, 1, 1) tensors.  Operations record themselves on the active ``Tape``
whenever one of their inputs requires a gradient, and ``backward`` replays
the tape once in reverse, accumulating into ``Tensor.grad``.  Gradients stay
put across repeated backward calls until explicitly cleared.

Convolutions are direct: the loop over kernel taps runs in Python with a
fixed (ky, kx, ic) accumulation order and only the independent output
elements are vectorised, so results are bit-identical to the equivalent
scalar loops.
"""

from __future__ import annotations

from typing import Callable, Iterable, Sequence

import numpy as np

__all__ = [
    "DomainError",
    "NonDeterministicError",
    "ShapeError",
    "Tape",
    "Tensor",
    "scalar",
    "add",
    "sub",
    "mul",
    "div",
    "neg",
    "sqrt",
    "exp",
    "log",
    "sigmoid",
    "softplus",
    "leaky_relu",
    "clamp_min",
    "tsum",
    "tmean",
    "conv2d",
    "conv_transpose2d",
    "wrap_op",
    "backward",
    "grad_check",
]

LN2 = float(np.log(2.0))


class ShapeError(ValueError):
    """Rejected input: shapes violate an operation's contract."""


class DomainError(ValueError):
    """Rejected input: values lie outside an operation's numeric domain."""


class NonDeterministicError(ValueError):
    """A grad_check target returned different values on repeated evaluation."""


_active_tape: "Tape | None" = None


class Tape:
    """Ordered record of forward operations for one reverse sweep.

    Use as a context manager; ops executed inside the block are recorded
    when they depend on a gradient-requiring tensor.  Tapes do not nest.
    """

    def __init__(self) -> None:
        self.nodes: list[tuple[tuple["Tensor", ...], "Tensor", Callable]] = []

    def __enter__(self) -> "Tape":
        global _active_tape
        if _active_tape is not None:
            raise RuntimeError("a tape is already active; tapes do not nest")
        _active_tape = self
        return self

    def __exit__(self, *exc) -> bool:
        global _active_tape
        _active_tape = None
        return False

    def __len__(self) -> int:
        return len(self.nodes)


class Tensor:
    """A (N, C, H, W) float64 array plus an optional gradient buffer."""

    __slots__ = ("data", "requires_grad", "grad")

    def __init__(self, data, requires_grad: bool = False) -> None:
        arr = np.asarray(data, dtype=np.float64)
        if arr.ndim != 4:
            raise ShapeError(f"tensors are 4-D (N, C, H, W); got shape {arr.shape}")
        self.data = arr
        self.requires_grad = bool(requires_grad)
        self.grad: np.ndarray | None = None

    @property
    def shape(self) -> tuple[int, int, int, int]:
        return self.data.shape

    @property
    def size(self) -> int:
        return self.data.size

    def item(self) -> float:
        if self.data.size != 1:
            raise ShapeError(f"item() needs a single-element tensor, got {self.shape}")
        return float(self.data.reshape(-1)[0])

    def is_finite(self) -> bool:
        return bool(np.isfinite(self.data).all())

    def zero_grad(self) -> None:
        self.grad = None

    def detach(self) -> "Tensor":
        return Tensor(self.data.copy())

    def __repr__(self) -> str:
        flag = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(shape={self.data.shape}{flag})"

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
        return neg(self)


def scalar(value: float, requires_grad: bool = False) -> Tensor:
    return Tensor(np.full((1, 1, 1, 1), value, dtype=np.float64), requires_grad)


def _record(inputs: tuple[Tensor, ...], output: Tensor, backward_fn: Callable) -> None:
    tape = _active_tape
    if tape is None:
        return
    if any(t.requires_grad for t in inputs):
        output.requires_grad = True
        tape.nodes.append((inputs, output, backward_fn))


def wrap_op(inputs: Sequence[Tensor], out_data: np.ndarray, backward_fn: Callable) -> Tensor:
    """Build a custom differentiable op from raw arrays and a backward rule.

    ``backward_fn`` receives the upstream gradient array and must return one
    gradient array (or None) per input, each matching that input's shape.
    """
    out = Tensor(out_data)
    _record(tuple(inputs), out, backward_fn)
    return out


def _coerce(x) -> Tensor:
    if isinstance(x, Tensor):
        return x
    return scalar(float(x))


def _unbroadcast(g: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    axes = tuple(i for i in range(4) if shape[i] == 1 and g.shape[i] != 1)
    if axes:
        g = g.sum(axis=axes, keepdims=True)
    return g


def add(a, b) -> Tensor:
    a, b = _coerce(a), _coerce(b)
    out = Tensor(a.data + b.data)

    def back(g):
        return _unbroadcast(g, a.data.shape), _unbroadcast(g, b.data.shape)

    _record((a, b), out, back)
    return out


def sub(a, b) -> Tensor:
    a, b = _coerce(a), _coerce(b)
    out = Tensor(a.data - b.data)

    def back(g):
        return _unbroadcast(g, a.data.shape), _unbroadcast(-g, b.data.shape)

    _record((a, b), out, back)
    return out


def mul(a, b) -> Tensor:
    a, b = _coerce(a), _coerce(b)
    out = Tensor(a.data * b.data)

    def back(g):
        return (
            _unbroadcast(g * b.data, a.data.shape),
            _unbroadcast(g * a.data, b.data.shape),
        )

    _record((a, b), out, back)
    return out


def div(a, b) -> Tensor:
    a, b = _coerce(a), _coerce(b)
    out = Tensor(a.data / b.data)

    def back(g):
        return (
            _unbroadcast(g / b.data, a.data.shape),
            _unbroadcast(-g * out.data / b.data, b.data.shape),
        )

    _record((a, b), out, back)
    return out


def neg(x) -> Tensor:
    x = _coerce(x)
    out = Tensor(-x.data)
    _record((x,), out, lambda g: (-g,))
    return out


def sqrt(x: Tensor) -> Tensor:
    if (x.data < 0.0).any():
        raise DomainError("sqrt of a negative value")
    out = Tensor(np.sqrt(x.data))
    _record((x,), out, lambda g: (g * 0.5 / out.data,))
    return out


def exp(x: Tensor) -> Tensor:
    out = Tensor(np.exp(x.data))
    _record((x,), out, lambda g: (g * out.data,))
    return out


def log(x: Tensor) -> Tensor:
    if (x.data <= 0.0).any():
        raise DomainError("log of a non-positive value")
    out = Tensor(np.log(x.data))
    _record((x,), out, lambda g: (g / x.data,))
    return out


def _sigmoid(z: np.ndarray) -> np.ndarray:
    # One exp of a non-positive argument; never overflows.
    ez = np.exp(-np.abs(z))
    return np.where(z >= 0.0, 1.0 / (1.0 + ez), ez / (1.0 + ez))


def sigmoid(x: Tensor) -> Tensor:
    out = Tensor(_sigmoid(x.data))
    _record((x,), out, lambda g: (g * out.data * (1.0 - out.data),))
    return out


def softplus(x: Tensor) -> Tensor:
    out = Tensor(np.logaddexp(0.0, x.data))
    _record((x,), out, lambda g: (g * _sigmoid(x.data),))
    return out


def leaky_relu(x: Tensor, negative_slope: float = 0.01) -> Tensor:
    if not 0.0 < negative_slope < 1.0:
        raise DomainError(f"negative_slope must lie in (0, 1), got {negative_slope}")
    out = Tensor(np.where(x.data >= 0.0, x.data, negative_slope * x.data))

    def back(g):
        return (g * np.where(x.data >= 0.0, 1.0, negative_slope),)

    _record((x,), out, back)
    return out


def clamp_min(x: Tensor, floor: float) -> Tensor:
    """Elementwise max(x, floor); gradient passes where x >= floor."""
    out = Tensor(np.maximum(x.data, floor))

    def back(g):
        return (g * (x.data >= floor),)

    _record((x,), out, back)
    return out


def tsum(x: Tensor) -> Tensor:
    out = scalar(float(x.data.sum()))

    def back(g):
        return (np.broadcast_to(g, x.data.shape),)

    _record((x,), out, back)
    return out


def tmean(x: Tensor) -> Tensor:
    out = scalar(float(x.data.mean()))
    n = x.data.size

    def back(g):
        return (np.broadcast_to(g / n, x.data.shape),)

    _record((x,), out, back)
    return out


def _check_conv_args(stride: int, zero_pad: int) -> None:
    if not isinstance(stride, (int, np.integer)) or stride < 1:
        raise DomainError(f"stride must be a positive integer, got {stride}")
    if not isinstance(zero_pad, (int, np.integer)) or zero_pad < 0:
        raise DomainError(f"zero_pad must be a non-negative integer, got {zero_pad}")


def conv2d(x: Tensor, kernel: Tensor, bias: Tensor | None = None,
           stride: int = 1, zero_pad: int = 0) -> Tensor:
    """2-D cross-correlation over (N, C, H, W) with zero padding.

    kernel is (C_out, C_in, kh, kw); bias, if given, is (1, C_out, 1, 1).
    Output spatial size follows floor((H + 2*zero_pad - kh) / stride) + 1.
    """
    _check_conv_args(stride, zero_pad)
    n, cin, h, w = x.shape
    cout, kcin, kh, kw = kernel.shape
    if kcin != cin:
        raise ShapeError(f"kernel expects {kcin} input channels, tensor has {cin}")
    if bias is not None and bias.shape != (1, cout, 1, 1):
        raise ShapeError(f"bias must be (1, {cout}, 1, 1), got {bias.shape}")
    oh = (h + 2 * zero_pad - kh) // stride + 1
    ow = (w + 2 * zero_pad - kw) // stride + 1
    if kh > h + 2 * zero_pad or kw > w + 2 * zero_pad or oh < 1 or ow < 1:
        raise ShapeError(
            f"kernel {kh}x{kw} does not fit input {h}x{w} with pad {zero_pad}")

    if zero_pad:
        xp = np.zeros((n, cin, h + 2 * zero_pad, w + 2 * zero_pad))
        xp[:, :, zero_pad:zero_pad + h, zero_pad:zero_pad + w] = x.data
    else:
        xp = x.data
    wk = kernel.data

    out_data = np.empty((n, cout, oh, ow))
    out_data[:] = 0.0 if bias is None else bias.data
    tmp = np.empty_like(out_data)
    for ky in range(kh):
        for kx in range(kw):
            patch = xp[:, :, ky:ky + stride * oh:stride, kx:kx + stride * ow:stride]
            for ic in range(cin):
                np.multiply(wk[:, ic, ky, kx][None, :, None, None],
                            patch[:, ic:ic + 1], out=tmp)
                out_data += tmp

    out = Tensor(out_data)

    def back(g):
        gxp = np.zeros_like(xp)
        gw = np.zeros_like(wk)
        buf = np.empty_like(g)
        for ky in range(kh):
            for kx in range(kw):
                patch = xp[:, :, ky:ky + stride * oh:stride, kx:kx + stride * ow:stride]
                gview = gxp[:, :, ky:ky + stride * oh:stride, kx:kx + stride * ow:stride]
                for ic in range(cin):
                    np.multiply(g, wk[:, ic, ky, kx][None, :, None, None], out=buf)
                    gview[:, ic] += buf.sum(axis=1)
                    np.multiply(g, patch[:, ic:ic + 1], out=buf)
                    gw[:, ic, ky, kx] = buf.sum(axis=(0, 2, 3))
        if zero_pad:
            gx = gxp[:, :, zero_pad:zero_pad + h, zero_pad:zero_pad + w]
        else:
            gx = gxp
        gb = None if bias is None else g.sum(axis=(0, 2, 3)).reshape(1, cout, 1, 1)
        return (gx, gw) if bias is None else (gx, gw, gb)

    inputs = (x, kernel) if bias is None else (x, kernel, bias)
    _record(inputs, out, back)
    return out


def conv_transpose2d(x: Tensor, kernel: Tensor, bias: Tensor | None = None,
                     stride: int = 1, zero_pad: int = 0,
                     output_pad: int = 0) -> Tensor:
    """Adjoint of conv2d (fractionally strided scatter), same kernel layout
    as the matching conv2d: (C_in, C_out, kh, kw) where C_in is this op's
    input channel count.

    Output spatial size is (H - 1)*stride - 2*zero_pad + kh + output_pad;
    output_pad trims less off the bottom/right edge and makes stride-2
    up-sampling land on exactly twice the input size.
    """
    _check_conv_args(stride, zero_pad)
    if not isinstance(output_pad, (int, np.integer)) or not 0 <= output_pad <= zero_pad:
        raise DomainError(f"output_pad must lie in [0, zero_pad], got {output_pad}")
    n, cin, h, w = x.shape
    kcin, cout, kh, kw = kernel.shape
    if kcin != cin:
        raise ShapeError(f"kernel expects {kcin} input channels, tensor has {cin}")
    if bias is not None and bias.shape != (1, cout, 1, 1):
        raise ShapeError(f"bias must be (1, {cout}, 1, 1), got {bias.shape}")
    fullh = (h - 1) * stride + kh
    fullw = (w - 1) * stride + kw
    oh = fullh - 2 * zero_pad + output_pad
    ow = fullw - 2 * zero_pad + output_pad
    if oh < 1 or ow < 1:
        raise ShapeError(f"transposed conv output would be empty ({oh}x{ow})")

    wk = kernel.data
    buf = np.zeros((n, cout, fullh, fullw))
    tmp = np.empty((n, cout, h, w))
    for ky in range(kh):
        for kx in range(kw):
            window = buf[:, :, ky:ky + stride * h:stride, kx:kx + stride * w:stride]
            for ic in range(cin):
                np.multiply(wk[ic, :, ky, kx][None, :, None, None],
                            x.data[:, ic:ic + 1], out=tmp)
                window += tmp
    out_data = buf[:, :, zero_pad:fullh - zero_pad + output_pad,
                   zero_pad:fullw - zero_pad + output_pad].copy()
    if bias is not None:
        out_data += bias.data

    out = Tensor(out_data)

    def back(g):
        gfull = np.zeros((n, cout, fullh, fullw))
        gfull[:, :, zero_pad:fullh - zero_pad + output_pad,
              zero_pad:fullw - zero_pad + output_pad] = g
        gx = np.zeros_like(x.data)
        gw = np.zeros_like(wk)
        acc = np.empty((n, cout, h, w))
        for ky in range(kh):
            for kx in range(kw):
                gwin = gfull[:, :, ky:ky + stride * h:stride, kx:kx + stride * w:stride]
                for ic in range(cin):
                    np.multiply(gwin, wk[ic, :, ky, kx][None, :, None, None], out=acc)
                    gx[:, ic] += acc.sum(axis=1)
                    np.multiply(gwin, x.data[:, ic:ic + 1], out=acc)
                    gw[ic, :, ky, kx] = acc.sum(axis=(0, 2, 3))
        gb = None if bias is None else g.sum(axis=(0, 2, 3)).reshape(1, cout, 1, 1)
        return (gx, gw) if bias is None else (gx, gw, gb)

    inputs = (x, kernel) if bias is None else (x, kernel, bias)
    _record(inputs, out, back)
    return out


def backward(tape: Tape, loss: Tensor) -> None:
    """Reverse sweep over ``tape`` seeding d(loss)/d(loss) = 1.

    Each node is visited exactly once; leaf tensors (those not produced on
    this tape) accumulate into ``.grad``.
    """
    if not isinstance(loss, Tensor) or loss.data.size != 1:
        raise ShapeError("backward expects a scalar (single-element) loss tensor")
    grads: dict[int, np.ndarray] = {id(loss): np.ones((1, 1, 1, 1))}
    produced = {id(out) for _, out, _ in tape.nodes}
    leaves: dict[int, Tensor] = {}
    if loss.requires_grad and id(loss) not in produced:
        leaves[id(loss)] = loss
    for inputs, output, back in reversed(tape.nodes):
        g = grads.pop(id(output), None)
        if g is None:
            continue
        input_grads = back(g)
        if len(input_grads) != len(inputs):
            raise RuntimeError("backward rule returned a mismatched gradient count")
        for t, gi in zip(inputs, input_grads):
            if gi is None or not t.requires_grad:
                continue
            if gi.shape != t.data.shape:
                raise ShapeError(
                    f"gradient shape {gi.shape} does not match input {t.data.shape}")
            prev = grads.get(id(t))
            grads[id(t)] = gi if prev is None else prev + gi
            if id(t) not in produced:
                leaves[id(t)] = t
    for tid, t in leaves.items():
        g = grads.get(tid)
        if g is None:
            continue
        t.grad = g.copy() if t.grad is None else t.grad + g


def grad_check(f: Callable[[], Tensor], params: Iterable[Tensor],
               eps: float = 1e-4) -> float:
    """Compare tape gradients of ``f`` against central finite differences.

    ``f`` must be a deterministic zero-argument callable returning a scalar
    tensor built from ``params``.  Returns the worst relative error
    |a - n| / max(1e-8, |a| + |n|) over every parameter element.
    """
    if not 1e-6 <= eps <= 1e-2:
        raise DomainError(f"eps must lie in [1e-6, 1e-2], got {eps}")
    params = list(params)
    for p in params:
        if not p.requires_grad:
            raise DomainError("grad_check parameters must have requires_grad set")

    first = f().item()
    second = f().item()
    if not (first == second or (np.isnan(first) and np.isnan(second))):
        raise NonDeterministicError(
            f"function is not deterministic: {first!r} != {second!r}")

    for p in params:
        p.zero_grad()
    with Tape() as tape:
        loss = f()
        if loss.data.size != 1:
            raise ShapeError("grad_check target must return a scalar tensor")
        backward(tape, loss)

    worst = 0.0
    for p in params:
        analytic = p.grad if p.grad is not None else np.zeros_like(p.data)
        flat = p.data.reshape(-1)
        aflat = analytic.reshape(-1)
        for i in range(flat.size):
            saved = flat[i]
            flat[i] = saved + eps
            f_plus = f().item()
            flat[i] = saved - eps
            f_minus = f().item()
            flat[i] = saved
            numeric = (f_plus - f_minus) / (2.0 * eps)
            err = abs(aflat[i] - numeric) / max(1e-8, abs(aflat[i]) + abs(numeric))
            if err > worst:
                worst = err
    return worst
