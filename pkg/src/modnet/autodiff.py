"""Minimal dense-tensor engine with reverse-mode automatic differentiation.

Tensors wrap contiguous row-major numpy arrays of rank 0-4. Operations
executed while a :class:`Tape` is active are recorded as a Wengert list;
``Tape.backward`` replays the list in reverse and accumulates gradients
into every leaf it reaches. Accumulation (``+=``) is what makes parameter
tying work: a tensor used in several places receives the sum of all
contributions.

There is no broadcasting. Every operation checks its operand shapes and
raises :class:`ShapeError` on mismatch, and every forward result is
checked for NaN/Inf so a diverging training step fails fast with the name
of the offending op.
"""

from __future__ import annotations

import contextlib
from typing import Callable, Iterator, Sequence

import numpy as np

__all__ = [
    "Tensor",
    "Tape",
    "ShapeError",
    "NumericalError",
    "get_default_dtype",
    "set_default_dtype",
    "precision",
    "constant",
    "conv2d",
    "fully_connected",
    "relu",
    "sigmoid",
    "tanh",
    "softmax",
    "add",
    "mul",
    "scale",
    "reshape",
    "flatten",
    "stack_pair",
    "stack_batch",
    "take_batch",
    "maxpool2d",
    "attention_weighted_pool",
    "lookup_row",
    "nll_loss",
]

NLL_EPSILON = 1e-12


class ShapeError(ValueError):
    """Operand dimensions violate an operation's contract."""


class NumericalError(ArithmeticError):
    """A forward pass produced NaN/Inf, or a gradient did."""


_DEFAULT_DTYPE = np.dtype(np.float32)


def get_default_dtype() -> np.dtype:
    return _DEFAULT_DTYPE


def set_default_dtype(dtype) -> None:
    """Set the storage dtype for newly created tensors.

    Training uses float32; gradient-check suites switch to float64 so
    central finite differences resolve at 1e-5 relative error.
    """
    global _DEFAULT_DTYPE
    dt = np.dtype(dtype)
    if dt not in (np.dtype(np.float32), np.dtype(np.float64)):
        raise ValueError(f"unsupported dtype {dtype!r}; use float32 or float64")
    _DEFAULT_DTYPE = dt


@contextlib.contextmanager
def precision(dtype) -> Iterator[None]:
    """Temporarily switch the default dtype (e.g. ``with precision('float64')``)."""
    previous = get_default_dtype()
    set_default_dtype(dtype)
    try:
        yield
    finally:
        set_default_dtype(previous)


class Tensor:
    """A dense value in the graph.

    ``data`` is immutable by convention once an op has produced it; the
    engine never writes to an existing tensor's data. ``grad`` is a lazily
    allocated accumulation buffer that persists across backward passes
    until explicitly cleared (parameters rely on this to sum gradients
    over a batch).
    """

    __slots__ = ("data", "grad", "name")

    def __init__(self, data, name: str | None = None):
        arr = np.ascontiguousarray(data, dtype=get_default_dtype())
        if arr.ndim > 4:
            raise ShapeError(f"rank {arr.ndim} exceeds the supported maximum of 4")
        self.data = arr
        self.grad: np.ndarray | None = None
        self.name = name

    @property
    def dims(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def rank(self) -> int:
        return self.data.ndim

    def item(self) -> float:
        return float(self.data)

    def zero_grad(self) -> None:
        if self.grad is None:
            self.grad = np.zeros_like(self.data)
        else:
            self.grad.fill(0.0)

    def accumulate_grad(self, g: np.ndarray) -> None:
        if self.grad is None:
            self.grad = np.zeros_like(self.data)
        self.grad += g

    def __repr__(self) -> str:
        label = f" name={self.name!r}" if self.name else ""
        return f"Tensor(dims={self.dims}{label})"


class _TapeEntry:
    __slots__ = ("op", "inputs", "output", "backward")

    def __init__(self, op, inputs, output, backward):
        self.op = op
        self.inputs = inputs
        self.output = output
        self.backward = backward


class Tape:
    """Ordered record of operations for one differentiable computation.

    Used as a context manager; ops executed inside record themselves.
    Entries are topologically ordered by construction (an op's inputs
    always precede it), so a single reverse sweep visits each entry once
    with its output gradient fully accumulated.
    """

    _active: "Tape | None" = None

    def __init__(self):
        self.entries: list[_TapeEntry] = []
        self._previous: Tape | None = None

    def __enter__(self) -> "Tape":
        self._previous = Tape._active
        Tape._active = self
        return self

    def __exit__(self, exc_type, exc, tb) -> None:
        Tape._active = self._previous
        self._previous = None

    def __len__(self) -> int:
        return len(self.entries)

    def backward(self, loss: Tensor) -> set[str]:
        """Propagate d(loss)/d(leaf) into every leaf's grad buffer.

        Returns the set of names of named leaves (parameters) that
        received a contribution. Gradients on intermediate tensors are
        cleared afterwards; leaf gradients are left accumulated.
        """
        if loss.data.size != 1:
            raise ShapeError(f"backward requires a scalar loss, got dims {loss.dims}")
        produced = {id(e.output) for e in self.entries}
        if id(loss) not in produced:
            raise ShapeError("loss was not produced on this tape")
        loss.accumulate_grad(np.ones_like(loss.data))
        touched: set[str] = set()
        for entry in reversed(self.entries):
            out_grad = entry.output.grad
            if out_grad is None:
                continue
            input_grads = entry.backward(out_grad)
            for tensor, g in zip(entry.inputs, input_grads):
                if g is None:
                    continue
                tensor.accumulate_grad(g)
                if tensor.name is not None and id(tensor) not in produced:
                    touched.add(tensor.name)
        for entry in self.entries:
            entry.output.grad = None
        return touched


def _record(op: str, inputs: Sequence[Tensor], out_data: np.ndarray,
            backward: Callable[[np.ndarray], tuple]) -> Tensor:
    if not np.isfinite(out_data).all():
        raise NumericalError(f"non-finite values produced by op '{op}'")
    out = Tensor.__new__(Tensor)
    out.data = out_data
    out.grad = None
    out.name = None
    tape = Tape._active
    if tape is not None:
        tape.entries.append(_TapeEntry(op, tuple(inputs), out, backward))
    return out


def constant(values, name: str | None = None) -> Tensor:
    """A leaf tensor holding fixed values (inputs, targets, masks)."""
    return Tensor(values, name=name)


def _require(cond: bool, op: str, message: str) -> None:
    if not cond:
        raise ShapeError(f"{op}: {message}")


# ---------------------------------------------------------------------------
# elementwise and shape ops


def relu(x: Tensor) -> Tensor:
    out = np.maximum(x.data, 0.0)

    def backward(g):
        return (g * (out > 0),)

    return _record("relu", (x,), out, backward)


def sigmoid(x: Tensor) -> Tensor:
    # exp may overflow for very negative inputs; the quotient still
    # saturates to exactly 0, so silence the spurious warning.
    with np.errstate(over="ignore"):
        out = 1.0 / (1.0 + np.exp(-x.data))

    def backward(g):
        return (g * out * (1.0 - out),)

    return _record("sigmoid", (x,), out, backward)


def tanh(x: Tensor) -> Tensor:
    out = np.tanh(x.data)

    def backward(g):
        return (g * (1.0 - out * out),)

    return _record("tanh", (x,), out, backward)


def add(a: Tensor, b: Tensor) -> Tensor:
    _require(a.dims == b.dims, "add", f"dims {a.dims} vs {b.dims}")
    out = a.data + b.data

    def backward(g):
        return (g, g)

    return _record("add", (a, b), out, backward)


def mul(a: Tensor, b: Tensor) -> Tensor:
    _require(a.dims == b.dims, "mul", f"dims {a.dims} vs {b.dims}")
    out = a.data * b.data

    def backward(g):
        return (g * b.data, g * a.data)

    return _record("mul", (a, b), out, backward)


def scale(x: Tensor, factor: float) -> Tensor:
    """Multiply by a fixed scalar (not a graph value)."""
    c = float(factor)
    out = x.data * c

    def backward(g):
        return (g * c,)

    return _record("scale", (x,), out, backward)


def reshape(x: Tensor, dims: tuple[int, ...]) -> Tensor:
    size = int(np.prod(dims)) if dims else 1
    _require(size == x.data.size, "reshape", f"cannot view {x.dims} as {dims}")
    in_dims = x.dims
    out = x.data.reshape(dims).copy()

    def backward(g):
        return (g.reshape(in_dims),)

    return _record("reshape", (x,), out, backward)


def flatten(x: Tensor) -> Tensor:
    return reshape(x, (x.data.size,))


def stack_pair(a: Tensor, b: Tensor) -> Tensor:
    """Stack two H x W maps into an H x W x 2 feature map."""
    _require(a.rank == 2 and b.rank == 2, "stack_pair",
             f"expected two rank-2 maps, got ranks {a.rank} and {b.rank}")
    _require(a.dims == b.dims, "stack_pair", f"dims {a.dims} vs {b.dims}")
    out = np.empty(a.dims + (2,), dtype=a.data.dtype)
    out[..., 0] = a.data
    out[..., 1] = b.data

    def backward(g):
        return (np.ascontiguousarray(g[..., 0]), np.ascontiguousarray(g[..., 1]))

    return _record("stack_pair", (a, b), out, backward)


def lookup_row(matrix: Tensor, index: int) -> Tensor:
    """Select one row of a rank-2 tensor (embedding lookup)."""
    _require(matrix.rank == 2, "lookup_row", f"expected rank 2, got {matrix.rank}")
    i = int(index)
    _require(0 <= i < matrix.dims[0], "lookup_row",
             f"row {i} out of range for {matrix.dims}")
    out = matrix.data[i].copy()

    def backward(g):
        gm = np.zeros_like(matrix.data)
        gm[i] = g
        return (gm,)

    return _record("lookup_row", (matrix,), out, backward)


# ---------------------------------------------------------------------------
# linear algebra ops


def fully_connected(x: Tensor, weight: Tensor, bias: Tensor | None) -> Tensor:
    """out[j] = bias[j] + sum_i x[i] * weight[i, j]."""
    _require(x.rank == 1, "fully_connected", f"input must be rank 1, got {x.rank}")
    _require(weight.rank == 2, "fully_connected",
             f"weight must be rank 2, got {weight.rank}")
    _require(x.dims[0] == weight.dims[0], "fully_connected",
             f"input length {x.dims[0]} vs weight rows {weight.dims[0]}")
    out = x.data @ weight.data
    inputs: tuple[Tensor, ...]
    if bias is not None:
        _require(bias.dims == (weight.dims[1],), "fully_connected",
                 f"bias dims {bias.dims} vs weight cols {weight.dims[1]}")
        out = out + bias.data
        inputs = (x, weight, bias)

        def backward(g):
            return (weight.data @ g, np.outer(x.data, g), g)

    else:
        inputs = (x, weight)

        def backward(g):
            return (weight.data @ g, np.outer(x.data, g))

    return _record("fully_connected", inputs, out, backward)


def conv2d(x: Tensor, kernel: Tensor, bias: Tensor, padding: str = "same") -> Tensor:
    """2-D convolution over an H x W x Cin map with a Kh x Kw x Cin x Cout kernel.

    ``same`` zero-pads so output spatial dims equal input dims (odd kernel
    only); ``valid`` shrinks to (H-Kh+1) x (W-Kw+1). Stride is always 1.
    A rank-4 input is treated as a batch of maps sharing the kernel; the
    per-example arithmetic (and result) is identical to the rank-3 path.
    """
    _require(x.rank in (3, 4), "conv2d",
             f"input must be rank 3 or batched rank 4, got dims {x.dims}")
    _require(kernel.rank == 4, "conv2d", f"kernel must be rank 4, got dims {kernel.dims}")
    batched = x.rank == 4
    b = x.dims[0] if batched else 1
    h, w, cin = x.dims[1:] if batched else x.dims
    kh, kw, kcin, cout = kernel.dims
    _require(kcin == cin, "conv2d", f"input channels {cin} vs kernel channels {kcin}")
    _require(bias.dims == (cout,), "conv2d",
             f"bias dims {bias.dims} vs output channels {cout}")
    if padding == "same":
        _require(kh % 2 == 1 and kw % 2 == 1, "conv2d",
                 f"'same' padding requires odd kernel dims, got {kh}x{kw}")
        ph, pw = (kh - 1) // 2, (kw - 1) // 2
        oh, ow = h, w
    elif padding == "valid":
        _require(kh <= h and kw <= w, "conv2d",
                 f"kernel {kh}x{kw} larger than input {h}x{w}")
        ph = pw = 0
        oh, ow = h - kh + 1, w - kw + 1
    else:
        raise ShapeError(f"conv2d: unknown padding {padding!r}")

    kd = kernel.data
    if kh == 1 and kw == 1:
        # 1x1 kernels are a single matmul over flattened positions.
        flat = x.data.reshape(-1, cin)
        out = (flat @ kd[0, 0] + bias.data).reshape(x.dims[:-1] + (cout,))

        def backward_1x1(g):
            gflat = g.reshape(-1, cout)
            gx = (gflat @ kd[0, 0].T).reshape(x.dims)
            gk = np.empty_like(kd)
            gk[0, 0] = flat.T @ gflat
            return (gx, gk, gflat.sum(axis=0))

        return _record("conv2d", (x, kernel, bias), out, backward_1x1)

    data = x.data if batched else x.data[None]
    if ph or pw:
        padded = np.zeros((b, h + 2 * ph, w + 2 * pw, cin), dtype=x.data.dtype)
        padded[:, ph:ph + h, pw:pw + w] = data
    else:
        padded = data
    out = np.empty((b, oh, ow, cout), dtype=x.data.dtype)
    out[:] = bias.data
    for i in range(kh):
        for j in range(kw):
            out += padded[:, i:i + oh, j:j + ow] @ kd[i, j]

    def backward(g):
        gb = g if batched else g[None]
        gk = np.empty_like(kd)
        gp = np.zeros_like(padded)
        gflat = gb.reshape(b * oh * ow, cout)
        for i in range(kh):
            for j in range(kw):
                patch = padded[:, i:i + oh, j:j + ow].reshape(b * oh * ow, cin)
                gk[i, j] = patch.T @ gflat
                gp[:, i:i + oh, j:j + ow] += gb @ kd[i, j].T
        gx = gp[:, ph:ph + h, pw:pw + w] if (ph or pw) else gp
        if not batched:
            gx = gx[0]
        return (np.ascontiguousarray(gx), gk, gflat.sum(axis=0))

    return _record("conv2d", (x, kernel, bias),
                   out if batched else out[0], backward)


def maxpool2d(x: Tensor, window: tuple[int, int], stride: tuple[int, int]) -> Tensor:
    """Max pooling over an H x W x C map (or a batch of them), valid windows."""
    _require(x.rank in (3, 4), "maxpool2d",
             f"input must be rank 3 or batched rank 4, got dims {x.dims}")
    batched = x.rank == 4
    b = x.dims[0] if batched else 1
    h, w, c = x.dims[1:] if batched else x.dims
    kh, kw = window
    sh, sw = stride
    _require(kh <= h and kw <= w, "maxpool2d",
             f"window {kh}x{kw} larger than input {h}x{w}")
    oh = (h - kh) // sh + 1
    ow = (w - kw) // sw + 1
    data = x.data if batched else x.data[None]
    # Separable two-pass max keeps the intermediate small; argmax offsets
    # from both passes reconstruct the winning input coordinate. Candidates
    # stack on the last axis so the argmax reduces contiguously.
    rows = np.stack([data[:, i:i + sh * (oh - 1) + 1:sh] for i in range(kh)],
                    axis=-1)
    arg_r = rows.argmax(axis=-1)
    max_r = rows.max(axis=-1)
    cols = np.stack([max_r[:, :, j:j + sw * (ow - 1) + 1:sw]
                     for j in range(kw)], axis=-1)
    arg_c = cols.argmax(axis=-1)
    out = cols.max(axis=-1)

    def backward(g):
        gb = g if batched else g[None]
        xs = np.arange(ow)[None, None, :, None] * sw + arg_c
        row_offset = np.take_along_axis(arg_r, xs, axis=2)
        ys = np.arange(oh)[None, :, None, None] * sh + row_offset
        bs = np.broadcast_to(np.arange(b)[:, None, None, None], gb.shape)
        cs = np.broadcast_to(np.arange(c)[None, None, None, :], gb.shape)
        flat = ((bs * h + ys) * w + xs) * c + cs
        scattered = np.bincount(flat.ravel(), weights=gb.ravel(),
                                minlength=b * h * w * c)
        gx = scattered.reshape(b, h, w, c).astype(gb.dtype, copy=False)
        return (gx if batched else gx[0],)

    return _record("maxpool2d", (x,),
                   np.ascontiguousarray(out if batched else out[0]), backward)


def stack_batch(tensors: Sequence[Tensor]) -> Tensor:
    """Stack same-shape rank-3 maps into one rank-4 batch."""
    _require(len(tensors) >= 1, "stack_batch", "need at least one tensor")
    dims = tensors[0].dims
    for t in tensors:
        _require(t.rank == 3, "stack_batch", f"expected rank 3, got {t.dims}")
        _require(t.dims == dims, "stack_batch", f"dims {t.dims} vs {dims}")
    out = np.stack([t.data for t in tensors])

    def backward(g):
        return tuple(np.ascontiguousarray(g[i]) for i in range(len(tensors)))

    return _record("stack_batch", tuple(tensors), out, backward)


def take_batch(x: Tensor, index: int) -> Tensor:
    """Select one example from a rank-4 batch."""
    _require(x.rank == 4, "take_batch", f"expected rank 4, got dims {x.dims}")
    i = int(index)
    _require(0 <= i < x.dims[0], "take_batch",
             f"index {i} out of range for batch of {x.dims[0]}")
    out = np.ascontiguousarray(x.data[i])

    def backward(g):
        gx = np.zeros_like(x.data)
        gx[i] = g
        return (gx,)

    return _record("take_batch", (x,), out, backward)


# ---------------------------------------------------------------------------
# attention, normalization and loss


def softmax(x: Tensor) -> Tensor:
    """Shift-stable softmax over a rank-1 tensor."""
    _require(x.rank == 1 and x.dims[0] >= 1, "softmax",
             f"expected a non-empty vector, got dims {x.dims}")
    shifted = x.data - x.data.max()
    e = np.exp(shifted)
    out = e / e.sum()

    def backward(g):
        return (out * (g - float(g @ out)),)

    return _record("softmax", (x,), out, backward)


def attention_weighted_pool(features: Tensor, attention: Tensor) -> Tensor:
    """Average feature vectors weighted by a spatial softmax of the attention.

    The attention map is unnormalized; a softmax over all H*W cells turns
    it into convex weights, so the result always lies in the convex hull
    of the per-cell feature vectors.
    """
    _require(features.rank == 3, "attention_weighted_pool",
             f"features must be rank 3, got dims {features.dims}")
    _require(attention.rank == 2, "attention_weighted_pool",
             f"attention must be rank 2, got dims {attention.dims}")
    _require(features.dims[:2] == attention.dims, "attention_weighted_pool",
             f"spatial dims {features.dims[:2]} vs {attention.dims}")
    h, w, c = features.dims
    shifted = attention.data - attention.data.max()
    e = np.exp(shifted)
    weights = e / e.sum()
    out = np.tensordot(weights, features.data, axes=([0, 1], [0, 1]))

    def backward(g):
        gf = weights[:, :, None] * g[None, None, :]
        # d(out)/d(attention) through the softmax weights
        ga = weights * ((features.data @ g) - float(out @ g))
        return (gf, ga)

    return _record("attention_weighted_pool", (features, attention), out, backward)


def nll_loss(predicted: Tensor, target: int) -> Tensor:
    """Negative log likelihood of the target class under a distribution."""
    _require(predicted.rank == 1, "nll_loss",
             f"expected a distribution vector, got dims {predicted.dims}")
    t = int(target)
    if not 0 <= t < predicted.dims[0]:
        raise IndexError(
            f"nll_loss: target {t} out of range for {predicted.dims[0]} classes")
    p = float(predicted.data[t])
    out = np.asarray(-np.log(p + NLL_EPSILON), dtype=predicted.data.dtype)

    def backward(g):
        gp = np.zeros_like(predicted.data)
        gp[t] = -float(g) / (p + NLL_EPSILON)
        return (gp,)

    return _record("nll_loss", (predicted,), out, backward)
