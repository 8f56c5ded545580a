"""Layers built from tape ops; parameters live in a ParamStore under a prefix."""

from __future__ import annotations

import numpy as np

from .tensor import (
    ParamStore,
    Tensor,
    add,
    concat,
    matmul,
    multiply,
    reshape,
    sigmoid,
    slice_,
    tanh,
    xavier_uniform,
)


def init_linear(store: ParamStore, prefix: str, n_in: int, n_out: int, rng) -> None:
    store.add(f"{prefix}/w", xavier_uniform(rng, (n_in, n_out), n_in, n_out))
    store.add(f"{prefix}/b", np.zeros(n_out, dtype=np.float32))


def linear(store: ParamStore, prefix: str, x: Tensor) -> Tensor:
    return add(matmul(x, store[f"{prefix}/w"]), store[f"{prefix}/b"])


def init_lstm(store: ParamStore, prefix: str, n_in: int, hidden: int, rng) -> None:
    """Gate layout along the 4h axis: input, forget, output, cell candidate."""
    w = xavier_uniform(rng, (n_in + hidden, 4 * hidden), n_in + hidden, 4 * hidden)
    b = np.zeros(4 * hidden, dtype=np.float32)
    b[hidden : 2 * hidden] = 1.0  # forget-gate bias
    store.add(f"{prefix}/w", w)
    store.add(f"{prefix}/b", b)


def lstm(store: ParamStore, prefix: str, x: Tensor, keep_all: bool = False):
    """Run an LSTM over ``x`` of shape (B, T, C).

    Returns the final hidden state (B, h), or the list of all T hidden states
    when ``keep_all`` is set.
    """
    w = store[f"{prefix}/w"]
    b = store[f"{prefix}/b"]
    bsz, steps, c_in = x.shape
    hid = w.shape[1] // 4
    if w.shape[0] != c_in + hid:
        raise ValueError(f"lstm {prefix}: input width {c_in} does not match weights {w.shape}")
    w_x = slice_(w, (slice(0, c_in),))
    w_h = slice_(w, (slice(c_in, None),))
    xw = add(reshape(matmul(reshape(x, (bsz * steps, c_in)), w_x), (bsz, steps, 4 * hid)), b)
    h = c = None
    outs = []
    for t in range(steps):
        z = slice_(xw, (slice(None), t))
        if h is not None:
            z = add(z, matmul(h, w_h))
        s = sigmoid(slice_(z, (slice(None), slice(0, 3 * hid))))
        g = tanh(slice_(z, (slice(None), slice(3 * hid, None))))
        i = slice_(s, (slice(None), slice(0, hid)))
        o = slice_(s, (slice(None), slice(2 * hid, 3 * hid)))
        if c is None:
            c = multiply(i, g)
        else:
            f = slice_(s, (slice(None), slice(hid, 2 * hid)))
            c = add(multiply(f, c), multiply(i, g))
        h = multiply(o, tanh(c))
        if keep_all:
            outs.append(h)
    return outs if keep_all else h


def mean_over(tensors: list[Tensor]) -> Tensor:
    """Average of equally shaped tensors (e.g. LSTM states over time)."""
    from .tensor import mean, stack

    return mean(stack(tensors, axis=0), axis=0)


def as_tensor(x, dtype=np.float32) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x, dtype=dtype)


def concat_last(tensors):
    return concat(tensors, axis=-1)
