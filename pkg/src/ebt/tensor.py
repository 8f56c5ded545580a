"""Dense float32 tensors with a reverse-mode tape.

Every trainable network in the package is expressed with the ops in this
module.  Ops record themselves on the active :class:`Tape`; leaves (inputs and
parameters) are plain :class:`Tensor` objects that were never produced by an
op.

    >>> with Tape() as tape:
    ...     y = sum_(multiply(x, x))
    >>> grads = tape.backward(y)
    >>> grads[x]
"""

from __future__ import annotations

import contextlib
import threading
from dataclasses import dataclass, field
from typing import Callable, Iterator, Sequence

import numpy as np

LOG_FLOOR = 1e-12

_state = threading.local()


class TapeError(RuntimeError):
    pass


class Tensor:
    """Immutable n-d array (float32 unless built explicitly in float64)."""

    __slots__ = ("data", "op", "__weakref__")

    def __init__(self, data, dtype=np.float32, op: str = "leaf"):
        arr = np.asarray(data, dtype=dtype)
        if arr.ndim == 0:
            arr = arr.reshape(())
        arr.flags.writeable = False
        self.data = arr
        self.op = op

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def size(self) -> int:
        return self.data.size

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return float(self.data.reshape(-1)[0]) if self.data.size == 1 else float("nan")

    def __repr__(self) -> str:
        return f"Tensor(shape={self.shape}, op={self.op})"

    # operator sugar -------------------------------------------------------
    def __add__(self, other):
        return add(self, _wrap(other, self))

    __radd__ = __add__

    def __sub__(self, other):
        return sub(self, _wrap(other, self))

    def __rsub__(self, other):
        return sub(_wrap(other, self), self)

    def __mul__(self, other):
        return multiply(self, _wrap(other, self))

    __rmul__ = __mul__

    def __neg__(self):
        return scale(self, -1.0)

    def __matmul__(self, other):
        return matmul(self, other)

    def __getitem__(self, index):
        return slice_(self, index)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)


def _wrap(x, like: Tensor) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x, dtype=like.data.dtype)


# ---------------------------------------------------------------------------
# tape


@dataclass
class _Node:
    op: str
    inputs: tuple[Tensor, ...]
    output: Tensor
    backward: Callable[[np.ndarray], Sequence]


@dataclass
class _Sparse:
    """A gradient contribution that only touches ``data[index]``."""

    index: object
    value: np.ndarray


class GradMap:
    """Gradients keyed by tensor identity; unreachable tensors read as zeros."""

    def __init__(self, grads: dict[int, np.ndarray], keep: dict[int, Tensor]):
        self._grads = grads
        self._keep = keep

    def __getitem__(self, t: Tensor) -> np.ndarray:
        g = self._grads.get(id(t))
        if g is None or self._keep.get(id(t)) is not t:
            return np.zeros(t.shape, dtype=t.data.dtype)
        return g

    def __contains__(self, t: Tensor) -> bool:
        return id(t) in self._grads and self._keep.get(id(t)) is t

    def named(self, store: "ParamStore") -> dict[str, np.ndarray]:
        return {name: self[t] for name, t in store.items()}


class Tape:
    """Records ops in execution order; :meth:`backward` consumes the record."""

    def __init__(self):
        self.nodes: list[_Node] = []
        self._produced: dict[int, Tensor] = {}

    def __enter__(self) -> "Tape":
        stack = _tape_stack()
        stack.append(self)
        return self

    def __exit__(self, *exc):
        _tape_stack().pop()
        return False

    def record(self, node: _Node) -> None:
        self.nodes.append(node)
        self._produced[id(node.output)] = node.output

    def backward(self, loss: Tensor) -> GradMap:
        if self._produced.get(id(loss)) is not loss:
            raise TapeError(
                "backward: loss was not produced on this tape "
                "(backward already ran, or no forward pass was recorded)"
            )
        if loss.size != 1:
            raise TapeError(f"backward: loss must be scalar, got shape {loss.shape}")
        acc = _Accumulator()
        acc.grads[id(loss)] = np.ones(loss.shape, dtype=loss.data.dtype)
        acc.keep[id(loss)] = loss
        for node in reversed(self.nodes):
            g_out = acc.grads.get(id(node.output))
            if g_out is None:
                continue
            for t, g in zip(node.inputs, node.backward(g_out)):
                if g is not None:
                    acc.add(t, g)
        self.nodes = []
        self._produced = {}
        return GradMap(acc.grads, acc.keep)


class _Accumulator:
    """Sums gradient contributions; arrays are only mutated once owned."""

    def __init__(self):
        self.grads: dict[int, np.ndarray] = {}
        self.keep: dict[int, Tensor] = {}
        self.owned: set[int] = set()

    def _own(self, key: int, t: Tensor) -> np.ndarray:
        cur = self.grads.get(key)
        if cur is None:
            cur = np.zeros(t.shape, dtype=t.data.dtype)
        elif key not in self.owned:
            cur = np.array(cur, dtype=t.data.dtype, copy=True)
        self.grads[key] = cur
        self.keep[key] = t
        self.owned.add(key)
        return cur

    def add(self, t: Tensor, g) -> None:
        key = id(t)
        if isinstance(g, _Sparse):
            self._own(key, t)[g.index] += g.value
            return
        g = np.asarray(g, dtype=t.data.dtype)
        if g.shape != t.shape:
            g = _unbroadcast(g, t.shape)
        if key not in self.grads:
            self.grads[key] = g
            self.keep[key] = t
        else:
            self._own(key, t)[...] += g


def _tape_stack() -> list[Tape]:
    stack = getattr(_state, "stack", None)
    if stack is None:
        stack = _state.stack = []
    return stack


def active_tape() -> Tape | None:
    stack = _tape_stack()
    return stack[-1] if stack else None


@contextlib.contextmanager
def no_tape() -> Iterator[None]:
    """Evaluate ops without recording (inference)."""
    stack = _tape_stack()
    saved = list(stack)
    stack.clear()
    try:
        yield
    finally:
        stack.extend(saved)


def _emit(op: str, out: np.ndarray, inputs: tuple[Tensor, ...], backward) -> Tensor:
    out = np.asarray(out)
    if not np.isfinite(out).all():
        raise FloatingPointError(f"{op}: non-finite values in forward result")
    t = Tensor.__new__(Tensor)
    out.flags.writeable = False
    t.data = out
    t.op = op
    tape = active_tape()
    if tape is not None:
        tape.record(_Node(op, inputs, t, backward))
    return t


def _unbroadcast(g: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for ax, n in enumerate(shape):
        if n == 1 and g.shape[ax] != 1:
            g = g.sum(axis=ax, keepdims=True)
    return g


def _shape_error(op: str, *tensors: Tensor, detail: str = "") -> ValueError:
    shapes = ", ".join(str(t.shape) for t in tensors)
    msg = f"{op}: incompatible shapes {shapes}"
    return ValueError(msg + (f" ({detail})" if detail else ""))


# ---------------------------------------------------------------------------
# elementwise


def _broadcast_check(op: str, a: Tensor, b: Tensor) -> None:
    try:
        np.broadcast_shapes(a.shape, b.shape)
    except ValueError:
        raise _shape_error(op, a, b) from None


def add(a: Tensor, b: Tensor) -> Tensor:
    _broadcast_check("add", a, b)
    return _emit("add", a.data + b.data, (a, b), lambda g: (g, g))


def sub(a: Tensor, b: Tensor) -> Tensor:
    _broadcast_check("sub", a, b)
    return _emit("sub", a.data - b.data, (a, b), lambda g: (g, -g))


def multiply(a: Tensor, b: Tensor) -> Tensor:
    _broadcast_check("multiply", a, b)
    ad, bd = a.data, b.data
    return _emit("multiply", ad * bd, (a, b), lambda g: (g * bd, g * ad))


def scale(a: Tensor, c: float) -> Tensor:
    c = float(c)
    return _emit("scale", a.data * a.data.dtype.type(c), (a,), lambda g: (g * c,))


def tanh(a: Tensor) -> Tensor:
    y = np.tanh(a.data)
    return _emit("tanh", y, (a,), lambda g: (g * (1.0 - y * y),))


def sigmoid(a: Tensor) -> Tensor:
    half = a.data.dtype.type(0.5)
    y = half * (np.tanh(half * a.data) + 1)  # overflow-free logistic
    return _emit("sigmoid", y, (a,), lambda g: (g * y * (1.0 - y),))


def relu(a: Tensor) -> Tensor:
    mask = a.data > 0
    return _emit("relu", a.data * mask, (a,), lambda g: (g * mask,))


# ---------------------------------------------------------------------------
# structural


def matmul(a: Tensor, b: Tensor) -> Tensor:
    """``a @ b`` for 2-d operands, or batched with a shared leading dim."""
    if a.data.ndim < 2 or b.data.ndim < 2 or a.shape[-1] != b.shape[-2]:
        raise _shape_error("matmul", a, b, detail="inner dimensions must match")
    if a.data.ndim > 2 and b.data.ndim > 2 and a.shape[:-2] != b.shape[:-2]:
        raise _shape_error("matmul", a, b, detail="batch dimensions differ")
    ad, bd = a.data, b.data

    def back(g):
        ga = g @ np.swapaxes(bd, -1, -2)
        gb = np.swapaxes(ad, -1, -2) @ g
        return ga, gb

    return _emit("matmul", ad @ bd, (a, b), back)


def reshape(a: Tensor, shape: Sequence[int]) -> Tensor:
    shape = tuple(int(s) for s in shape)
    try:
        out = a.data.reshape(shape)
    except ValueError:
        raise ValueError(f"reshape: cannot view {a.shape} as {shape}") from None
    src = a.shape
    return _emit("reshape", out, (a,), lambda g: (g.reshape(src),))


def transpose(a: Tensor, axes: Sequence[int] | None = None) -> Tensor:
    axes = tuple(range(a.data.ndim))[::-1] if axes is None else tuple(int(x) for x in axes)
    if sorted(ax % a.data.ndim for ax in axes) != list(range(a.data.ndim)):
        raise ValueError(f"transpose: axes {axes} do not permute shape {a.shape}")
    inv = tuple(np.argsort([ax % a.data.ndim for ax in axes]))
    out = np.ascontiguousarray(a.data.transpose(axes))
    return _emit("transpose", out, (a,), lambda g: (g.transpose(inv),))


def concat(tensors: Sequence[Tensor], axis: int = -1) -> Tensor:
    tensors = tuple(tensors)
    if not tensors:
        raise ValueError("concat: no operands")
    nd = tensors[0].data.ndim
    ax = axis % nd
    for t in tensors:
        if t.data.ndim != nd or any(
            t.shape[i] != tensors[0].shape[i] for i in range(nd) if i != ax
        ):
            raise _shape_error("concat", *tensors, detail=f"axis={axis}")
    sizes = [t.shape[ax] for t in tensors]
    bounds = np.cumsum([0] + sizes)
    out = np.concatenate([t.data for t in tensors], axis=ax)

    def back(g):
        idx = [slice(None)] * nd
        parts = []
        for lo, hi in zip(bounds[:-1], bounds[1:]):
            idx[ax] = slice(lo, hi)
            parts.append(g[tuple(idx)])
        return parts

    return _emit("concat", out, tensors, back)


def stack(tensors: Sequence[Tensor], axis: int = 0) -> Tensor:
    tensors = tuple(tensors)
    shape = tensors[0].shape
    if any(t.shape != shape for t in tensors):
        raise _shape_error("stack", *tensors)
    out = np.stack([t.data for t in tensors], axis=axis)
    n = len(tensors)
    return _emit(
        "stack", out, tensors, lambda g: [np.take(g, i, axis=axis) for i in range(n)]
    )


def slice_(a: Tensor, index) -> Tensor:
    """Basic (non-fancy) indexing; the gradient is scattered back sparsely."""
    if not isinstance(index, tuple):
        index = (index,)
    for ix in index:
        if not (ix is Ellipsis or ix is None or isinstance(ix, (int, np.integer, slice))):
            raise TypeError(f"slice: unsupported index {ix!r}")
    try:
        out = a.data[index]
    except IndexError as exc:
        raise ValueError(f"slice: {exc} for shape {a.shape}") from None
    out = np.array(out, copy=True)
    return _emit("slice", out, (a,), lambda g: (_Sparse(index, g),))


# ---------------------------------------------------------------------------
# reductions and losses


def sum_(a: Tensor, axis=None) -> Tensor:
    out = np.asarray(a.data.sum(axis=axis))
    src = a.shape

    def back(g):
        if axis is not None:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, src),)

    return _emit("sum", out, (a,), back)


def mean(a: Tensor, axis=None) -> Tensor:
    out = np.asarray(a.data.mean(axis=axis))
    src = a.shape
    n = a.size // max(out.size, 1)

    def back(g):
        if axis is not None:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g / n, src),)

    return _emit("mean", out, (a,), back)


def l1(a: Tensor) -> Tensor:
    """Mean absolute value (the usual L1 loss)."""
    sgn = np.sign(a.data)
    n = a.size
    out = np.asarray(np.abs(a.data).mean())
    return _emit("l1", out, (a,), lambda g: (g * sgn / n,))


def l2(a: Tensor, axis=None) -> Tensor:
    """Euclidean norm over ``axis`` (all elements when None), not squared.

    The subgradient at the origin is taken as zero.
    """
    x = a.data
    out = np.sqrt(np.sum(x * x, axis=axis))
    out = np.asarray(out)

    def back(g):
        nrm = out if axis is None else np.expand_dims(out, axis)
        gg = g if axis is None else np.expand_dims(g, axis)
        safe = np.where(nrm > 0, nrm, 1.0)
        return (np.where(nrm > 0, gg * x / safe, 0.0),)

    return _emit("l2", out, (a,), back)


def softmax_cross_entropy(logits: Tensor, target: Tensor) -> Tensor:
    """Mean over rows of ``-sum_c target_c * log p_c`` with ``p = softmax``.

    ``target`` rows are probability distributions (one-hot for
    classification, uniform for the confusion loss).  ``log p`` is floored at
    ``log(1e-12)``; floored entries pass no gradient.
    """
    if logits.shape != target.shape:
        raise _shape_error("softmax_cross_entropy", logits, target)
    z = logits.data
    zs = z - z.max(axis=-1, keepdims=True)
    lse = np.log(np.exp(zs).sum(axis=-1, keepdims=True))
    logp = zs - lse
    floor = np.log(LOG_FLOOR)
    live = logp > floor
    logp_f = np.where(live, logp, floor)
    p = np.exp(logp)
    tgt = target.data
    rows = int(np.prod(z.shape[:-1])) if z.ndim > 1 else 1
    out = np.asarray(-(tgt * logp_f).sum() / rows, dtype=z.dtype)

    def back(g):
        w = tgt * live  # d(-sum w_c logp_c)/dz = -(w - p * sum w)
        gz = -(w - p * w.sum(axis=-1, keepdims=True)) / rows
        return g * gz, None

    return _emit("softmax_cross_entropy", out, (logits, target), back)


# ---------------------------------------------------------------------------
# images (CHW or NCHW)


def _im2col(x: np.ndarray, k: int) -> np.ndarray:
    """(N, C, H, W) -> (N, C*k*k, H*W) patches with zero 'same' padding."""
    p = k // 2
    n, c, h, w = x.shape
    xp = np.pad(x, ((0, 0), (0, 0), (p, p), (p, p)))
    win = np.lib.stride_tricks.sliding_window_view(xp, (k, k), axis=(2, 3))
    # win: (N, C, H, W, k, k) -> (N, C, k, k, H, W)
    cols = win.transpose(0, 1, 4, 5, 2, 3).reshape(n, c * k * k, h * w)
    return cols


def conv2d(x: Tensor, weight: Tensor, bias: Tensor | None = None) -> Tensor:
    """Stride-1 convolution with zero padding ``K // 2`` (cross-correlation).

    ``x`` is (C, H, W) or (N, C, H, W); ``weight`` is (C_out, C, K, K) with K odd;
    ``bias`` (C_out,) is optional.
    """
    wd = weight.data
    if wd.ndim != 4 or wd.shape[2] != wd.shape[3] or wd.shape[2] % 2 == 0:
        raise _shape_error("conv2d", x, weight, detail="kernel must be (Co, C, K, K), K odd")
    single = x.data.ndim == 3
    xd = x.data[None] if single else x.data
    if xd.ndim != 4 or xd.shape[1] != wd.shape[1]:
        raise _shape_error("conv2d", x, weight, detail="input must be CHW/NCHW with matching C")
    if bias is not None and bias.shape != (wd.shape[0],):
        raise _shape_error("conv2d", weight, bias, detail="bias must be (C_out,)")
    n, c, h, w = xd.shape
    co, _, k, _ = wd.shape
    cols = _im2col(xd, k)
    wmat = wd.reshape(co, c * k * k)
    out = np.einsum("ok,nkp->nop", wmat, cols, optimize=True).reshape(n, co, h, w)
    if bias is not None:
        out = out + bias.data[None, :, None, None]
    if single:
        out = out[0]

    def back(g):
        g4 = g[None] if single else g
        gflat = g4.reshape(n, co, h * w)
        gw = np.einsum("nop,nkp->ok", gflat, cols, optimize=True).reshape(wd.shape)
        # input gradient: 'same' correlation with the flipped, transposed kernel
        wflip = wd[:, :, ::-1, ::-1].transpose(1, 0, 2, 3).reshape(c, co * k * k)
        gcols = _im2col(g4, k)
        gx = np.einsum("ok,nkp->nop", wflip, gcols, optimize=True).reshape(n, c, h, w)
        if single:
            gx = gx[0]
        gb = g4.sum(axis=(0, 2, 3)) if bias is not None else None
        return (gx, gw) if bias is None else (gx, gw, gb)

    inputs = (x, weight) if bias is None else (x, weight, bias)
    return _emit("conv2d", out, inputs, back)


def upsample2x(x: Tensor) -> Tensor:
    """Nearest-neighbour ×2 over the last two axes."""
    out = x.data.repeat(2, axis=-2).repeat(2, axis=-1)
    shape = x.shape

    def back(g):
        h, w = shape[-2], shape[-1]
        g = g.reshape(g.shape[:-2] + (h, 2, w, 2))
        return (g.sum(axis=(-3, -1)),)

    return _emit("upsample2x", out, (x,), back)


def avgpool2x(x: Tensor) -> Tensor:
    """2×2 average pooling over the last two axes (even sizes required)."""
    h, w = x.shape[-2], x.shape[-1]
    if h % 2 or w % 2:
        raise _shape_error("avgpool2x", x, detail="spatial dims must be even")
    lead = x.shape[:-2]
    out = x.data.reshape(lead + (h // 2, 2, w // 2, 2)).mean(axis=(-3, -1))

    def back(g):
        return (np.repeat(np.repeat(g, 2, axis=-2), 2, axis=-1) * 0.25,)

    return _emit("avgpool2x", out, (x,), back)


OPS = {
    "matmul": matmul,
    "add": add,
    "sub": sub,
    "multiply": multiply,
    "scale": scale,
    "tanh": tanh,
    "sigmoid": sigmoid,
    "relu": relu,
    "concat": concat,
    "stack": stack,
    "slice": slice_,
    "reshape": reshape,
    "transpose": transpose,
    "mean": mean,
    "sum": sum_,
    "l1": l1,
    "l2": l2,
    "conv2d": conv2d,
    "upsample2x": upsample2x,
    "avgpool2x": avgpool2x,
    "softmax_cross_entropy": softmax_cross_entropy,
}


def forward_op(kind: str, operands: Sequence[Tensor], **kwargs) -> Tensor:
    """Dispatch by op name; ``concat``/``stack`` take the operand list itself."""
    try:
        fn = OPS[kind]
    except KeyError:
        raise ValueError(f"unknown op kind {kind!r}") from None
    if kind in ("concat", "stack"):
        return fn(list(operands), **kwargs)
    return fn(*operands, **kwargs)


# ---------------------------------------------------------------------------
# parameters and optimisation


def make_rng(seed: int) -> np.random.Generator:
    """The package's only source of randomness: PCG64 seeded with ``seed``."""
    return np.random.Generator(np.random.PCG64(int(seed)))


def xavier_uniform(rng: np.random.Generator, shape: tuple[int, ...], fan_in: int, fan_out: int) -> np.ndarray:
    a = np.sqrt(6.0 / (fan_in + fan_out))
    return rng.uniform(-a, a, size=shape).astype(np.float32)


@dataclass
class ParamStore:
    """Named parameters with per-parameter Adam state.

    Parameters are replaced (never mutated) on update, so models look them up
    by name on every forward pass.
    """

    params: dict[str, Tensor] = field(default_factory=dict)
    m: dict[str, np.ndarray] = field(default_factory=dict)
    v: dict[str, np.ndarray] = field(default_factory=dict)
    t: dict[str, int] = field(default_factory=dict)

    def add(self, name: str, value) -> Tensor:
        if name in self.params:
            raise KeyError(f"duplicate parameter name {name!r}")
        t = value if isinstance(value, Tensor) else Tensor(value)
        self.params[name] = t
        self.m[name] = np.zeros(t.shape, dtype=np.float32)
        self.v[name] = np.zeros(t.shape, dtype=np.float32)
        self.t[name] = 0
        return t

    def __getitem__(self, name: str) -> Tensor:
        return self.params[name]

    def __contains__(self, name: str) -> bool:
        return name in self.params

    def __len__(self) -> int:
        return len(self.params)

    def items(self):
        return self.params.items()

    def names(self, prefix: str = "") -> list[str]:
        return [n for n in self.params if n.startswith(prefix)]

    def replace(self, name: str, value) -> None:
        old = self.params[name]
        value = np.asarray(value, dtype=np.float32)
        if value.shape != old.shape:
            raise ValueError(f"{name}: shape is fixed at {old.shape}, got {value.shape}")
        self.params[name] = Tensor(value)

    def merge(self, other: "ParamStore") -> None:
        """Take over every parameter (and its optimiser state) of ``other``."""
        for name, t in other.params.items():
            if name in self.params:
                raise KeyError(f"duplicate parameter name {name!r}")
            self.params[name] = t
            self.m[name] = other.m[name]
            self.v[name] = other.v[name]
            self.t[name] = other.t[name]

    def snapshot(self) -> dict[str, np.ndarray]:
        return {k: t.data.copy() for k, t in self.params.items()}

    def copy(self) -> "ParamStore":
        out = ParamStore()
        for name, t in self.params.items():
            out.params[name] = t
            out.m[name] = self.m[name].copy()
            out.v[name] = self.v[name].copy()
            out.t[name] = self.t[name]
        return out


def adam_step(
    store: ParamStore,
    grads: dict[str, np.ndarray],
    lr: float,
    beta1: float = 0.9,
    beta2: float = 0.999,
    eps: float = 1e-8,
    names: Sequence[str] | None = None,
) -> ParamStore:
    """One Adam update of ``names`` (default: every parameter), in place."""
    names = list(store.params) if names is None else list(names)
    for name in names:
        if name not in grads:
            raise KeyError(f"adam_step: no gradient for parameter {name!r}")
        if not np.all(np.isfinite(grads[name])):
            raise FloatingPointError(f"adam_step: non-finite gradient for parameter {name!r}")
    for name in names:
        store.t[name] += 1
        step = store.t[name]
        g = np.asarray(grads[name], dtype=np.float32)
        m = store.m[name]
        v = store.v[name]
        m *= beta1
        m += (1.0 - beta1) * g
        v *= beta2
        v += (1.0 - beta2) * g * g
        m_hat = m / (1.0 - beta1**step)
        v_hat = v / (1.0 - beta2**step)
        upd = lr * m_hat / (np.sqrt(v_hat) + eps)
        store.params[name] = Tensor(store.params[name].data - upd.astype(np.float32))
    return store
