"""Mouth completion: heatmaps, masking, the completion network and compositing.

Frames are (H, W, 3) float arrays in [0, 1]; network tensors are NCHW.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass

import numpy as np
import scipy.sparse as sp
from scipy import ndimage
from scipy.sparse.linalg import cg

from .raster import fill_polygon, polygon_area
from .tensor import (
    ParamStore,
    Tape,
    Tensor,
    adam_step,
    add,
    avgpool2x,
    concat,
    conv2d,
    l1,
    make_rng,
    no_tape,
    relu,
    reshape,
    scale,
    sigmoid,
    slice_,
    sub,
    upsample2x,
    xavier_uniform,
)

log = logging.getLogger(__name__)

CROP = 32
W_STACK = 7
SIGMA_H = 1.5
ERODE_R = 1
SIGMA_M = 1.0
W_TV = 0.1
BOX_PAD = 0.2
NET_PREFIX = "render"


class BlendError(RuntimeError):
    pass


# ---------------------------------------------------------------------------
# heatmaps and masking


def landmarks_to_heatmap(points, dims: tuple[int, int], sigma: float = SIGMA_H) -> np.ndarray:
    """``H(q) = max_i exp(-|q - l_i|^2 / (2 sigma^2))`` at pixel centres."""
    if sigma <= 0:
        raise ValueError("sigma must be positive")
    pts = np.asarray(points, dtype=np.float64).reshape(-1, 2)
    h, w = dims
    out = np.zeros((h, w))
    if pts.shape[0] == 0:
        return out.astype(np.float32)
    yy, xx = np.mgrid[0:h, 0:w]
    for x, y in pts:
        np.maximum(out, np.exp(-((xx - x) ** 2 + (yy - y) ** 2) / (2 * sigma * sigma)), out=out)
    return out.astype(np.float32)


def heatmap_landmark_grad(points, dims: tuple[int, int], upstream: np.ndarray, sigma: float = SIGMA_H) -> np.ndarray:
    """Gradient of ``sum(upstream * H)`` w.r.t. the landmarks, (L, 2).

    Each pixel routes its gradient to the landmark attaining the max (first
    one on ties).
    """
    pts = np.asarray(points, dtype=np.float64).reshape(-1, 2)
    h, w = dims
    yy, xx = np.mgrid[0:h, 0:w]
    dx = xx[None] - pts[:, 0, None, None]
    dy = yy[None] - pts[:, 1, None, None]
    bumps = np.exp(-(dx * dx + dy * dy) / (2 * sigma * sigma))
    win = np.argmax(bumps, axis=0)
    grad = np.zeros_like(pts)
    for i in range(pts.shape[0]):
        sel = (win == i) * upstream * bumps[i] / (sigma * sigma)
        grad[i, 0] = np.sum(sel * dx[i])
        grad[i, 1] = np.sum(sel * dy[i])
    return grad


def mouth_box(points, dims: tuple[int, int], pad: float = BOX_PAD) -> tuple[int, int, int, int]:
    """Padded bounding box ``(x0, y0, x1, y1)`` (half-open), clipped to the frame."""
    p = np.asarray(points, dtype=np.float64).reshape(-1, 2)
    lo, hi = p.min(axis=0), p.max(axis=0)
    size = hi - lo
    lo, hi = lo - pad * size, hi + pad * size
    h, w = dims
    x0, y0 = max(0, int(np.floor(lo[0]))), max(0, int(np.floor(lo[1])))
    x1, y1 = min(w, int(np.ceil(hi[0])) + 1), min(h, int(np.ceil(hi[1])) + 1)
    return x0, y0, max(x0, x1), max(y0, y1)


def mask_mouth(frame: np.ndarray, box: tuple[int, int, int, int], rng) -> np.ndarray:
    """Replace the box with uniform noise in [0, 1]; everything else is copied."""
    x0, y0, x1, y1 = box
    h, w = frame.shape[:2]
    if not (0 <= x0 <= x1 <= w and 0 <= y0 <= y1 <= h):
        raise ValueError(f"mask box {box} outside {w}×{h} frame")
    out = np.array(frame, dtype=np.float32, copy=True)
    if x1 > x0 and y1 > y0:
        out[y0:y1, x0:x1] = rng.uniform(0.0, 1.0, (y1 - y0, x1 - x0) + frame.shape[2:])
    return out


def build_input_stack(frames, heatmaps) -> np.ndarray:
    """(4·W, H, W) array: the W RGB frames (oldest first) then the W heatmaps."""
    frames = [np.asarray(f, dtype=np.float32) for f in frames]
    heatmaps = [np.asarray(hm, dtype=np.float32) for hm in heatmaps]
    if len(frames) != len(heatmaps) or not frames:
        raise ValueError(f"need equally many frames and heatmaps, got {len(frames)} and {len(heatmaps)}")
    dims = frames[0].shape[:2]
    for f, hm in zip(frames, heatmaps):
        if f.shape != dims + (3,) or hm.shape != dims:
            raise ValueError(f"stack dims differ: frame {f.shape}, heatmap {hm.shape}, expected {dims}")
    rgb = [np.moveaxis(f, -1, 0) for f in frames]
    return np.concatenate(rgb + [hm[None] for hm in heatmaps], axis=0)


def stack_indices(t: int, w_stack: int = W_STACK) -> list[int]:
    """Frame indices ``t-W+1 .. t`` with the sequence start replicated."""
    return [max(0, i) for i in range(t - w_stack + 1, t + 1)]


# ---------------------------------------------------------------------------
# completion network


@dataclass
class CompletionNet:
    store: ParamStore
    w_stack: int
    width: int

    def param_names(self) -> list[str]:
        return self.store.names(NET_PREFIX + "/")


_LAYERS = ("enc1", "enc2", "mid", "dec2", "dec1", "out")


def _layer_shapes(w_stack: int, c: int) -> dict[str, tuple[int, int]]:
    return {
        "enc1": (4 * w_stack, c),
        "enc2": (c, 2 * c),
        "mid": (2 * c, 2 * c),
        "dec2": (4 * c, 2 * c),
        "dec1": (3 * c, c),
        "out": (c, 3),
    }


def init_completion(seed: int, w_stack: int = W_STACK, width: int = 16, kernel: int = 3) -> CompletionNet:
    rng = make_rng(seed)
    store = ParamStore()
    for name, (ci, co) in _layer_shapes(w_stack, width).items():
        fan = kernel * kernel
        store.add(f"{NET_PREFIX}/{name}/w", xavier_uniform(rng, (co, ci, kernel, kernel), ci * fan, co * fan))
        store.add(f"{NET_PREFIX}/{name}/b", np.zeros(co, dtype=np.float32))
    return CompletionNet(store, w_stack, width)


def _conv(net: CompletionNet, name: str, x: Tensor) -> Tensor:
    return conv2d(x, net.store[f"{NET_PREFIX}/{name}/w"], net.store[f"{NET_PREFIX}/{name}/b"])


def completion_forward(net: CompletionNet, x) -> Tensor:
    """(N, 4W, H, W) -> (N, 3, H, W) in (0, 1); H and W divisible by 4."""
    x = x if isinstance(x, Tensor) else Tensor(x)
    single = x.data.ndim == 3
    if single:
        x = reshape(x, (1,) + x.shape)
    if x.shape[1] != 4 * net.w_stack or x.shape[2] % 4 or x.shape[3] % 4:
        raise ValueError(f"completion input {x.shape} does not fit a {4 * net.w_stack}-channel net")
    e1 = relu(_conv(net, "enc1", x))
    e2 = relu(_conv(net, "enc2", avgpool2x(e1)))
    mid = relu(_conv(net, "mid", avgpool2x(e2)))
    d2 = relu(_conv(net, "dec2", concat([upsample2x(mid), e2], axis=1)))
    d1 = relu(_conv(net, "dec1", concat([upsample2x(d2), e1], axis=1)))
    out = sigmoid(_conv(net, "out", d1))
    return reshape(out, out.shape[1:]) if single else out


def render_loss_terms(pred: Tensor, gt) -> tuple[Tensor, Tensor]:
    """(L_recon, L_tv) on the tape for (N, C, H, W) or (C, H, W) predictions."""
    gt = gt if isinstance(gt, Tensor) else Tensor(gt)
    if pred.shape != gt.shape:
        raise ValueError(f"render loss: pred {pred.shape} vs gt {gt.shape}")
    recon = l1(sub(pred, gt))
    h, w = pred.shape[-2], pred.shape[-1]
    lead = (slice(None),) * (pred.data.ndim - 2)
    total = pred.size
    parts = []
    if w > 1:
        dx = sub(slice_(pred, lead + (slice(None), slice(1, None))), slice_(pred, lead + (slice(None), slice(None, -1))))
        parts.append(scale(l1(dx), dx.size / total))
    if h > 1:
        dy = sub(slice_(pred, lead + (slice(1, None),)), slice_(pred, lead + (slice(None, -1),)))
        parts.append(scale(l1(dy), dy.size / total))
    tv = parts[0] if parts else scale(recon, 0.0)
    for p in parts[1:]:
        tv = add(tv, p)
    return recon, tv


def render_losses(pred: np.ndarray, gt: np.ndarray, w_tv: float = W_TV) -> tuple[float, float, float]:
    """``(L_recon, L_tv, L_recon + w_tv L_tv)`` for frames (H, W, C) or (H, W)."""
    pred = np.asarray(pred, dtype=np.float64)
    gt = np.asarray(gt, dtype=np.float64)
    if pred.shape != gt.shape:
        raise ValueError(f"render loss: pred {pred.shape} vs gt {gt.shape}")
    recon = float(np.mean(np.abs(pred - gt)))
    tv = float((np.abs(np.diff(pred, axis=1)).sum() + np.abs(np.diff(pred, axis=0)).sum()) / pred.size)
    return recon, tv, recon + w_tv * tv


@dataclass
class RenderHistory:
    recon: list[float]
    tv: list[float]


def train_completion(
    net: CompletionNet,
    stacks: np.ndarray,
    targets: np.ndarray,
    epochs: int,
    lr: float = 2e-3,
    batch: int = 8,
    seed: int = 0,
    w_tv: float = W_TV,
) -> RenderHistory:
    """Adam on ``L_recon + w_tv L_tv``; ``targets`` are (N, 3, H, W)."""
    if len(stacks) == 0:
        raise ValueError("empty completion corpus")
    if len(stacks) != len(targets):
        raise ValueError("stacks and targets differ in length")
    rng = make_rng(seed)
    names = net.param_names()
    hist = RenderHistory([], [])
    for _ in range(epochs):
        sums = np.zeros(2)
        order = rng.permutation(len(stacks))
        for i in range(0, len(order), batch):
            idx = order[i : i + batch]
            with Tape() as tape:
                recon, tv = render_loss_terms(completion_forward(net, stacks[idx]), targets[idx])
                total = add(recon, scale(tv, w_tv))
            val = total.item()
            if not np.isfinite(val):
                raise FloatingPointError(f"completion training: non-finite loss {val}")
            adam_step(net.store, tape.backward(total).named(net.store), lr, names=names)
            sums += len(idx) * np.array([recon.item(), tv.item()])
        sums /= len(stacks)
        hist.recon.append(float(sums[0]))
        hist.tv.append(float(sums[1]))
    return hist


def complete(net: CompletionNet, stacks: np.ndarray, batch: int = 32) -> np.ndarray:
    """Network output as (N, H, W, 3) frames."""
    out = []
    with no_tape():
        for i in range(0, len(stacks), batch):
            out.append(completion_forward(net, stacks[i : i + batch]).data)
    return np.moveaxis(np.concatenate(out), 1, -1)


# ---------------------------------------------------------------------------
# soft mask and blending


def mouth_soft_mask(points, dims: tuple[int, int], erode_r: int = ERODE_R, sigma_m: float = SIGMA_M) -> np.ndarray:
    """Filled outer-lip polygon, eroded by a (2r+1)² square, Gaussian-blurred, clamped."""
    pts = np.asarray(points, dtype=np.float64).reshape(-1, 2)
    if pts.shape[0] < 3:
        raise ValueError("soft mask needs at least 3 contour points")
    if polygon_area(pts) <= 1e-9:
        raise ValueError("degenerate mouth polygon (zero area)")
    mask = fill_polygon(pts, *dims)
    if erode_r > 0:
        mask = ndimage.binary_erosion(mask, structure=np.ones((2 * erode_r + 1,) * 2, dtype=bool), border_value=0)
    soft = mask.astype(np.float64)
    if sigma_m > 0:
        soft = ndimage.gaussian_filter(soft, sigma_m, mode="constant", cval=0.0)
    return np.clip(soft, 0.0, 1.0).astype(np.float32)


_NEIGHBOURS = ((-1, 0), (1, 0), (0, -1), (0, 1))


def poisson_system(src: np.ndarray, dst: np.ndarray, mask: np.ndarray):
    """Sparse system ``A u = b`` for the masked pixels of one channel.

    Row p reads ``4 u_p - sum_{q in mask} u_q = sum_q (src_p - src_q) + sum_{q on boundary} dst_q``.
    """
    ys, xs = np.nonzero(mask)
    n = ys.size
    index = -np.ones(mask.shape, dtype=np.int64)
    index[ys, xs] = np.arange(n)
    rows, cols, vals = [np.arange(n)], [np.arange(n)], [np.full(n, 4.0)]
    b = np.zeros(n)
    for dy, dx in _NEIGHBOURS:
        qy, qx = ys + dy, xs + dx
        b += src[ys, xs] - src[qy, qx]
        inner = index[qy, qx]
        inside = inner >= 0
        rows.append(np.arange(n)[inside])
        cols.append(inner[inside])
        vals.append(-np.ones(inside.sum()))
        b[~inside] += dst[qy[~inside], qx[~inside]]
    A = sp.csr_matrix((np.concatenate(vals), (np.concatenate(rows), np.concatenate(cols))), shape=(n, n))
    return A, b, (ys, xs)


def poisson_blend(src: np.ndarray, dst: np.ndarray, mask: np.ndarray, rtol: float = 1e-6, clamp: bool = True) -> np.ndarray:
    """Gradient-domain paste of ``src`` into ``dst`` over ``mask``.

    Solved per channel by conjugate gradients (relative residual ``rtol``, at
    most 10·|mask| iterations); pixels outside the mask keep ``dst``.
    """
    src = np.asarray(src, dtype=np.float64)
    dst = np.asarray(dst, dtype=np.float64)
    mask = np.asarray(mask, dtype=bool)
    if src.shape != dst.shape or mask.shape != dst.shape[:2]:
        raise ValueError(f"poisson_blend: src {src.shape}, dst {dst.shape}, mask {mask.shape}")
    if not mask.any():
        raise ValueError("poisson_blend: empty mask")
    if mask[0].any() or mask[-1].any() or mask[:, 0].any() or mask[:, -1].any():
        raise ValueError("poisson_blend: mask must lie strictly inside the frame")
    chans = src.shape[2] if src.ndim == 3 else None
    s3 = src.reshape(src.shape[:2] + (-1,))
    d3 = dst.reshape(dst.shape[:2] + (-1,))
    out = d3.copy()
    n = int(mask.sum())
    for c in range(s3.shape[2]):
        A, b, (ys, xs) = poisson_system(s3[..., c], d3[..., c], mask)
        u, info = cg(A, b, x0=d3[ys, xs, c], rtol=rtol, atol=0.0, maxiter=10 * n)
        res = np.linalg.norm(A @ u - b) / max(np.linalg.norm(b), 1e-300)
        if info != 0 or res > rtol * 1.0001:
            raise BlendError(f"poisson_blend: CG did not converge on channel {c} (relative residual {res:.3g}, info {info})")
        out[ys, xs, c] = u
    out = out.reshape(dst.shape) if chans is not None else out[..., 0]
    return np.clip(out, 0.0, 1.0) if clamp else out


def composite_frame(target: np.ndarray, crop: np.ndarray, soft_mask: np.ndarray, origin: tuple[int, int]) -> np.ndarray:
    """Poisson-blend ``crop`` over the mask support (> 0.5), then feather with the soft mask."""
    target = np.asarray(target, dtype=np.float64)
    crop = np.asarray(crop, dtype=np.float64)
    soft = np.asarray(soft_mask, dtype=np.float64)
    x0, y0 = origin
    h, w = crop.shape[:2]
    H, W = target.shape[:2]
    if soft.shape != (h, w):
        raise ValueError(f"soft mask {soft.shape} does not match crop {crop.shape[:2]}")
    if not (0 <= x0 and 0 <= y0 and x0 + w <= W and y0 + h <= H):
        raise ValueError(f"crop at {origin} of size {w}×{h} falls outside the {W}×{H} target")
    region = (slice(y0, y0 + h), slice(x0, x0 + w))
    support = np.zeros((H, W), dtype=bool)
    support[region] = soft > 0.5
    blended = target.copy()
    if support.any():
        src = target.copy()
        src[region] = crop
        blended = poisson_blend(src, target, support)
    m = np.zeros((H, W, 1))
    m[region] = soft[..., None]
    return np.clip(m * blended + (1.0 - m) * target, 0.0, 1.0).astype(np.float32)


def crop_origin(center, dims: tuple[int, int], size: int = CROP) -> tuple[int, int]:
    """Top-left corner of a ``size``² crop centred on ``center``, kept inside the frame
    with a one-pixel margin (Poisson blending needs a boundary ring)."""
    h, w = dims
    x0 = int(round(center[0] - size / 2))
    y0 = int(round(center[1] - size / 2))
    return int(np.clip(x0, 1, w - size - 1)), int(np.clip(y0, 1, h - size - 1))


def crop(frame: np.ndarray, origin: tuple[int, int], size: int = CROP) -> np.ndarray:
    x0, y0 = origin
    return np.asarray(frame)[y0 : y0 + size, x0 : x0 + size]
