"""Independent reference computations shared by the unit and acceptance tests."""

from __future__ import annotations

import numpy as np

from ebt import tensor as T

FD_STEP = 1e-3


# ---------------------------------------------------------------------------
# finite-difference gradient oracle


def _run(fn, arrays, dtype):
    return fn(*[T.Tensor(a, dtype=dtype) for a in arrays])


def projected_loss(fn, weights):
    """Scalar ``sum(w * fn(...))`` so every output element contributes."""

    def loss(*ts):
        out = fn(*ts)
        w = T.Tensor(weights, dtype=out.data.dtype)
        return T.sum_(T.multiply(out, w)) if out.size > 1 else T.multiply(out, w)

    return loss


def analytic_grads(loss_fn, arrays) -> list[np.ndarray]:
    """Tape gradients in float32."""
    ts = [T.Tensor(a) for a in arrays]
    with T.Tape() as tape:
        loss = loss_fn(*ts)
    g = tape.backward(loss)
    return [g[t].astype(np.float64) for t in ts]


def fd_grads(loss_fn, arrays, step: float = FD_STEP) -> list[np.ndarray]:
    """Central differences of the float64 forward pass."""
    arrays = [np.asarray(a, dtype=np.float64) for a in arrays]
    out = []
    for i, a in enumerate(arrays):
        g = np.zeros_like(a)
        for idx in np.ndindex(a.shape):
            plus = [x.copy() for x in arrays]
            minus = [x.copy() for x in arrays]
            plus[i][idx] += step
            minus[i][idx] -= step
            with T.no_tape():
                fp = _run(loss_fn, plus, np.float64).item()
                fm = _run(loss_fn, minus, np.float64).item()
            g[idx] = (fp - fm) / (2 * step)
        out.append(g)
    return out


def rel_err(a: np.ndarray, b: np.ndarray) -> float:
    den = max(np.linalg.norm(a), np.linalg.norm(b), 1e-6)
    return float(np.linalg.norm(a - b) / den)


# ---------------------------------------------------------------------------
# random cases per op: (fn, input arrays, differentiable input indices)


def _away_from(rng, shape, lo=0.05, hi=1.0):
    """Values with |x| in [lo, hi] (keeps kinks out of the finite-difference stencil)."""
    return rng.uniform(lo, hi, shape) * rng.choice([-1.0, 1.0], shape)


def _dims(rng, n, lo=1, hi=4):
    return tuple(int(v) for v in rng.integers(lo, hi + 1, n))


def case_matmul(rng):
    if rng.random() < 0.3:
        b, m, k, n = _dims(rng, 4, 1, 3)
        return T.matmul, [rng.normal(size=(b, m, k)), rng.normal(size=(b, k, n))]
    m, k, n = _dims(rng, 3)
    return T.matmul, [rng.normal(size=(m, k)), rng.normal(size=(k, n))]


def _elementwise_pair(rng):
    shape = _dims(rng, int(rng.integers(1, 4)))
    if rng.random() < 0.4:  # broadcast over a leading batch dim
        return [rng.normal(size=(int(rng.integers(2, 4)),) + shape), rng.normal(size=shape)]
    return [rng.normal(size=shape), rng.normal(size=shape)]


def case_add(rng):
    return T.add, _elementwise_pair(rng)


def case_sub(rng):
    return T.sub, _elementwise_pair(rng)


def case_multiply(rng):
    return T.multiply, _elementwise_pair(rng)


def case_scale(rng):
    c = float(rng.normal())
    return (lambda x: T.scale(x, c)), [rng.normal(size=_dims(rng, 2))]


def case_tanh(rng):
    return T.tanh, [rng.normal(size=_dims(rng, 2))]


def case_sigmoid(rng):
    return T.sigmoid, [rng.normal(scale=2.0, size=_dims(rng, 2))]


def case_relu(rng):
    return T.relu, [_away_from(rng, _dims(rng, 2))]


def case_concat(rng):
    nd = int(rng.integers(1, 4))
    axis = int(rng.integers(0, nd))
    base = _dims(rng, nd)
    parts = []
    for _ in range(int(rng.integers(2, 4))):
        s = list(base)
        s[axis] = int(rng.integers(1, 4))
        parts.append(rng.normal(size=s))
    return (lambda *ts: T.concat(list(ts), axis=axis)), parts


def case_stack(rng):
    shape = _dims(rng, 2)
    n = int(rng.integers(2, 4))
    axis = int(rng.integers(0, 3))
    return (lambda *ts: T.stack(list(ts), axis=axis)), [rng.normal(size=shape) for _ in range(n)]


def case_slice(rng):
    shape = _dims(rng, 3, 2, 5)
    lo = [int(rng.integers(0, s)) for s in shape]
    hi = [int(rng.integers(l + 1, s + 1)) for l, s in zip(lo, shape)]
    idx = tuple(slice(a, b) for a, b in zip(lo, hi))
    if rng.random() < 0.3:
        idx = (int(rng.integers(0, shape[0])),) + idx[1:]
    return (lambda x: T.slice_(x, idx)), [rng.normal(size=shape)]


def case_reshape(rng):
    a, b, c = _dims(rng, 3)
    return (lambda x: T.reshape(x, (c, a * b))), [rng.normal(size=(a, b, c))]


def case_transpose(rng):
    shape = _dims(rng, 3)
    axes = tuple(int(v) for v in rng.permutation(3))
    return (lambda x: T.transpose(x, axes)), [rng.normal(size=shape)]


def case_mean(rng):
    shape = _dims(rng, 3)
    axis = None if rng.random() < 0.3 else int(rng.integers(0, 3))
    return (lambda x: T.mean(x, axis=axis)), [rng.normal(size=shape)]


def case_sum(rng):
    shape = _dims(rng, 3)
    axis = None if rng.random() < 0.3 else int(rng.integers(0, 3))
    return (lambda x: T.sum_(x, axis=axis)), [rng.normal(size=shape)]


def case_l1(rng):
    return T.l1, [_away_from(rng, _dims(rng, 2))]


def case_l2(rng):
    shape = _dims(rng, 2, 2, 4)
    axis = None if rng.random() < 0.5 else int(rng.integers(0, 2))
    return (lambda x: T.l2(x, axis=axis)), [rng.normal(size=shape)]


def case_softmax_cross_entropy(rng):
    rows, n = _dims(rng, 2, 2, 5)
    target = rng.dirichlet(np.ones(n), size=rows)
    return (lambda z: T.softmax_cross_entropy(z, T.Tensor(target, dtype=z.data.dtype))), [rng.normal(size=(rows, n))]


def case_conv2d(rng):
    k = int(rng.choice([1, 3, 5]))
    c, co = _dims(rng, 2, 1, 3)
    h, w = _dims(rng, 2, 3, 6)
    x = rng.normal(size=(c, h, w)) if rng.random() < 0.5 else rng.normal(size=(2, c, h, w))
    wt = rng.normal(scale=0.5, size=(co, c, k, k))
    b = rng.normal(size=co)
    return T.conv2d, [x, wt, b]


def case_upsample2x(rng):
    return T.upsample2x, [rng.normal(size=_dims(rng, 3, 1, 3))]


def case_avgpool2x(rng):
    c = int(rng.integers(1, 3))
    h, w = (2 * v for v in _dims(rng, 2, 1, 3))
    return T.avgpool2x, [rng.normal(size=(c, h, w))]


OP_CASES = {
    "matmul": case_matmul,
    "add": case_add,
    "sub": case_sub,
    "multiply": case_multiply,
    "scale": case_scale,
    "tanh": case_tanh,
    "sigmoid": case_sigmoid,
    "relu": case_relu,
    "concat": case_concat,
    "stack": case_stack,
    "slice": case_slice,
    "reshape": case_reshape,
    "transpose": case_transpose,
    "mean": case_mean,
    "sum": case_sum,
    "l1": case_l1,
    "l2": case_l2,
    "softmax_cross_entropy": case_softmax_cross_entropy,
    "conv2d": case_conv2d,
    "upsample2x": case_upsample2x,
    "avgpool2x": case_avgpool2x,
}
GRAD_TOL = {"conv2d": 1e-2}
DEFAULT_GRAD_TOL = 1e-3


def gradient_case(op: str, seed: int) -> float:
    """Relative error between tape and finite-difference gradients for one random case."""
    rng = np.random.default_rng(10_000 + 97 * seed + sum(map(ord, op)))
    fn, arrays = OP_CASES[op](rng)
    with T.no_tape():
        out = _run(fn, arrays, np.float64)
    weights = rng.normal(size=out.shape)
    loss = projected_loss(fn, weights)
    a = analytic_grads(loss, arrays)
    f = fd_grads(loss, arrays)
    return max(rel_err(x, y) for x, y in zip(a, f))


# ---------------------------------------------------------------------------
# direct convolution by summation


def conv2d_direct(x: np.ndarray, w: np.ndarray, b: np.ndarray | None = None) -> np.ndarray:
    """Zero-padded 'same' cross-correlation by explicit loops over (C, H, W) input."""
    c, h, wd = x.shape
    co, _, k, _ = w.shape
    p = k // 2
    out = np.zeros((co, h, wd))
    for o in range(co):
        for i in range(h):
            for j in range(wd):
                acc = 0.0 if b is None else float(b[o])
                for ci in range(c):
                    for u in range(k):
                        for v in range(k):
                            y, xx = i + u - p, j + v - p
                            if 0 <= y < h and 0 <= xx < wd:
                                acc += w[o, ci, u, v] * x[ci, y, xx]
                out[o, i, j] = acc
    return out


# ---------------------------------------------------------------------------
# dense Poisson solve


def poisson_dense(src: np.ndarray, dst: np.ndarray, mask: np.ndarray) -> np.ndarray:
    """Dense assembly of the 4-neighbour Poisson system, solved with ``numpy.linalg.solve``."""
    pts = [tuple(p) for p in np.argwhere(mask)]
    index = {p: i for i, p in enumerate(pts)}
    n = len(pts)
    out = dst.astype(np.float64).copy()
    chans = src.shape[2] if src.ndim == 3 else 1
    s3 = src.reshape(src.shape[:2] + (chans,)).astype(np.float64)
    d3 = dst.reshape(dst.shape[:2] + (chans,)).astype(np.float64)
    o3 = out.reshape(d3.shape)
    for c in range(chans):
        A = np.zeros((n, n))
        rhs = np.zeros(n)
        for (y, x), i in index.items():
            A[i, i] = 4.0
            for dy, dx in ((-1, 0), (1, 0), (0, -1), (0, 1)):
                q = (y + dy, x + dx)
                rhs[i] += s3[y, x, c] - s3[q + (c,)]
                if q in index:
                    A[i, index[q]] = -1.0
                else:
                    rhs[i] += d3[q + (c,)]
        u = np.linalg.solve(A, rhs)
        for (y, x), i in index.items():
            o3[y, x, c] = u[i]
    return out
