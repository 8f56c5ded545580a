"""Retiming, landmark smoothing, block-matching flow and deflickering."""

from __future__ import annotations

import itertools
from dataclasses import dataclass

import numpy as np

STEPS = (0, 1, 2)


# ---------------------------------------------------------------------------
# retiming


@dataclass
class FootageFeatures:
    motion: np.ndarray  # (M,) mean landmark displacement from the previous frame, px
    blink: np.ndarray  # (M,) in [0, 1]

    def __post_init__(self):
        self.motion = np.asarray(self.motion, dtype=np.float64)
        self.blink = np.asarray(self.blink, dtype=np.float64)
        if self.motion.shape != self.blink.shape or self.motion.ndim != 1:
            raise ValueError("motion and blink must be equal-length vectors")
        if self.motion.size and self.motion[0] != 0:
            raise ValueError("motion of the first frame must be 0")
        if not (np.all(np.isfinite(self.motion)) and np.all(np.isfinite(self.blink))):
            raise ValueError("footage features must be finite")

    def __len__(self) -> int:
        return self.motion.shape[0]

    @classmethod
    def from_landmarks(cls, track: np.ndarray, blink: np.ndarray) -> "FootageFeatures":
        """``track`` is (M, L, 2); motion is the mean per-point displacement."""
        track = np.asarray(track, dtype=np.float64)
        motion = np.zeros(track.shape[0])
        if track.shape[0] > 1:
            motion[1:] = np.linalg.norm(np.diff(track, axis=0), axis=-1).mean(axis=-1)
        return cls(motion, blink)


@dataclass
class RetimeWeights:
    gamma1: float = 1.0
    gamma2: float = 1.0
    kappa: float | None = None  # None: calibrate so that kappa * mean(a) == mean(m)
    c_hold: float = 0.1
    c_skip: float = 0.1

    def step_cost(self, d: int) -> float:
        return (self.c_hold, 0.0, self.c_skip)[d]


@dataclass
class RetimePlan:
    indices: np.ndarray
    cost: float

    def __post_init__(self):
        self.indices = np.asarray(self.indices, dtype=np.int64)
        if self.indices.size > 1 and not np.all(np.isin(np.diff(self.indices), STEPS)):
            raise ValueError("plan steps must be 0, 1 or 2")

    def to_text(self) -> str:
        return "".join(f"{j}\n" for j in self.indices)

    @classmethod
    def from_text(cls, text: str, cost: float = float("nan")) -> "RetimePlan":
        return cls(np.array([int(v) for v in text.split()], dtype=np.int64), cost)


def _kappa(audio: np.ndarray, feats: FootageFeatures, w: RetimeWeights) -> float:
    if w.kappa is not None:
        return w.kappa
    ma = float(np.mean(audio))
    return float(np.mean(feats.motion)) / ma if ma > 0 else 0.0


def unary_costs(audio, feats: FootageFeatures, w: RetimeWeights) -> np.ndarray:
    """(T, M) per-frame matching cost."""
    a = np.asarray(audio, dtype=np.float64)[:, None]
    k = _kappa(a[:, 0], feats, w)
    return w.gamma1 * (feats.motion[None] - k * a) ** 2 + w.gamma2 * feats.blink[None] * (1.0 - a)


def plan_cost(plan, audio, feats: FootageFeatures, w: RetimeWeights) -> float:
    j = np.asarray(plan, dtype=np.int64)
    u = unary_costs(audio, feats, w)
    steps = np.diff(j)
    return float(u[np.arange(len(j)), j].sum() + sum(w.step_cost(int(d)) for d in steps))


def retime_dp(audio, feats: FootageFeatures, weights: RetimeWeights | None = None) -> RetimePlan:
    """Exact minimum-cost frame selection over the T×M table.

    Steps between consecutive output frames are 0 (hold), 1 or 2 (skip).
    Equal-cost choices go to the smaller frame index.
    """
    w = weights or RetimeWeights()
    audio = np.asarray(audio, dtype=np.float64)
    T, M = audio.shape[0], len(feats)
    if T < 1 or M < 1:
        raise ValueError("retiming needs at least one audio frame and one footage frame")
    u = unary_costs(audio, feats, w)
    cost = u[0].copy()
    back = np.zeros((T, M), dtype=np.int64)
    for t in range(1, T):
        best = np.full(M, np.inf)
        arg = np.zeros(M, dtype=np.int64)
        # larger steps come from smaller predecessors; visit them first so ties keep them
        for d in (2, 1, 0):
            cand = np.full(M, np.inf)
            cand[d:] = cost[: M - d] + w.step_cost(d)
            better = cand < best
            best[better] = cand[better]
            arg[better] = (np.arange(M) - d)[better]
        cost = best + u[t]
        back[t] = arg
    if not np.isfinite(cost).any():
        raise ValueError("no feasible plan")
    j = int(np.argmin(cost))
    total = float(cost[j])
    out = np.empty(T, dtype=np.int64)
    out[-1] = j
    for t in range(T - 1, 0, -1):
        j = int(back[t, j])
        out[t - 1] = j
    return RetimePlan(out, total)


def retime_brute_force(audio, feats: FootageFeatures, weights: RetimeWeights | None = None) -> RetimePlan:
    """Enumerate every valid plan (tiny T, M only)."""
    w = weights or RetimeWeights()
    T, M = len(audio), len(feats)
    best, best_plan = np.inf, None
    for start in range(M):
        for steps in itertools.product(STEPS, repeat=T - 1):
            plan = start + np.concatenate([[0], np.cumsum(steps)]).astype(np.int64)
            if plan[-1] >= M:
                continue
            c = plan_cost(plan, audio, feats, w)
            if c < best:
                best, best_plan = c, plan
    return RetimePlan(best_plan, float(best))


# ---------------------------------------------------------------------------
# landmark smoothing


def smooth_landmarks(l_prev, l_cur, d_th: float, s: float, mouth=None) -> np.ndarray:
    """Blend towards the previous landmarks when the mouth barely moved.

    ``mouth`` selects the points whose mean is the mouth centre (default all).
    Movement beyond ``d_th`` returns ``l_cur`` untouched; otherwise the result
    is ``a l_prev + (1 - a) l_cur`` with ``a = exp(-s d)``.
    """
    if d_th <= 0 or s <= 0:
        raise ValueError("d_th and s must be positive")
    lp = np.asarray(l_prev, dtype=np.float64).reshape(-1, 2)
    lc = np.asarray(l_cur, dtype=np.float64).reshape(-1, 2)
    if lp.shape != lc.shape:
        raise ValueError(f"landmark sets differ: {lp.shape} vs {lc.shape}")
    sel = slice(None) if mouth is None else np.asarray(mouth)
    d = float(np.linalg.norm(lc[sel].mean(axis=0) - lp[sel].mean(axis=0)))
    if d > d_th:
        return lc.copy()
    a = np.exp(-s * d)
    return a * lp + (1.0 - a) * lc


def smooth_track(track, d_th: float, s: float, mouth=None) -> np.ndarray:
    """Apply :func:`smooth_landmarks` along a (T, L, 2) track, feeding outputs forward."""
    track = np.asarray(track, dtype=np.float64)
    out = track.copy()
    for t in range(1, track.shape[0]):
        out[t] = smooth_landmarks(out[t - 1], track[t], d_th, s, mouth)
    return out


# ---------------------------------------------------------------------------
# flow and warping


@dataclass
class FlowField:
    dx: np.ndarray  # (rows, cols) of blocks
    dy: np.ndarray
    block: int

    def __post_init__(self):
        self.dx = np.asarray(self.dx, dtype=np.int64)
        self.dy = np.asarray(self.dy, dtype=np.int64)


def luminance(frame: np.ndarray) -> np.ndarray:
    f = np.asarray(frame, dtype=np.float64)
    return f.mean(axis=-1) if f.ndim == 3 else f


def _pad_to(img: np.ndarray, h: int, w: int) -> np.ndarray:
    return np.pad(img, ((0, h - img.shape[0]), (0, w - img.shape[1])), mode="edge")


def _candidates(r: int) -> list[tuple[int, int]]:
    c = [(dx, dy) for dx in range(-r, r + 1) for dy in range(-r, r + 1)]
    return sorted(c, key=lambda d: (d[0] * d[0] + d[1] * d[1], d[0], d[1]))


def block_flow(prev: np.ndarray, cur: np.ndarray, block: int = 8, radius: int = 4) -> FlowField:
    """Per-block integer displacement with ``prev[y + dy, x + dx] ~ cur[y, x]``.

    Exhaustive SAD search on luminance; ties go to the smallest displacement,
    then to the lexicographically smallest (dx, dy).
    """
    a, b = luminance(prev), luminance(cur)
    if a.shape != b.shape:
        raise ValueError(f"block_flow: frame dims differ {a.shape} vs {b.shape}")
    rows, cols = -(-a.shape[0] // block), -(-a.shape[1] // block)
    H, W = rows * block, cols * block
    a, b = _pad_to(a, H, W), _pad_to(b, H, W)
    ap = np.pad(a, radius, mode="edge")
    cands = _candidates(radius)
    sad = np.empty((len(cands), rows, cols))
    for k, (dx, dy) in enumerate(cands):
        shifted = ap[radius + dy : radius + dy + H, radius + dx : radius + dx + W]
        sad[k] = np.abs(shifted - b).reshape(rows, block, cols, block).sum(axis=(1, 3))
    best = np.argmin(sad, axis=0)
    table = np.array(cands)
    return FlowField(table[best, 0], table[best, 1], block)


def warp(frame: np.ndarray, flow: FlowField) -> np.ndarray:
    """Sample every block of ``frame`` at its displaced location (edge-replicated)."""
    f = np.asarray(frame)
    h, w = f.shape[:2]
    ys, xs = np.mgrid[0:h, 0:w]
    by, bx = ys // flow.block, xs // flow.block
    if by.max() >= flow.dx.shape[0] or bx.max() >= flow.dx.shape[1]:
        raise ValueError("flow field does not cover the frame")
    sy = np.clip(ys + flow.dy[by, bx], 0, h - 1)
    sx = np.clip(xs + flow.dx[by, bx], 0, w - 1)
    return f[sy, sx]


# ---------------------------------------------------------------------------
# deflicker


def frequency_sq(h: int, w: int) -> np.ndarray:
    """``f_x^2 + f_y^2`` in cycles/pixel, with bin k at ``min(k, N-k)/N``."""
    ky = np.arange(h)
    kx = np.arange(w)
    fy = np.minimum(ky, h - ky) / h
    fx = np.minimum(kx, w - kx) / w
    return fy[:, None] ** 2 + fx[None, :] ** 2


def deflicker_weights(h: int, w: int, lam: float) -> tuple[np.ndarray, np.ndarray]:
    """Per-frequency weights of the current frame and the warped previous output."""
    g = 4 * np.pi**2 * frequency_sq(h, w)
    if lam <= 0:
        return np.ones_like(g), np.zeros_like(g)
    den = g + lam
    return g / den, lam / den


def deflicker_frame(p_t: np.ndarray, o_prev_warped: np.ndarray, d_t: float, rho: float = 1.0, clamp: bool = True) -> np.ndarray:
    """Frequency-weighted blend of the current frame and the warped previous output.

    ``lambda = exp(-d_t / rho)``; the DC term is taken entirely from the
    previous output, high frequencies mostly from ``p_t``.
    """
    p = np.asarray(p_t, dtype=np.float64)
    o = np.asarray(o_prev_warped, dtype=np.float64)
    if p.shape != o.shape:
        raise ValueError(f"deflicker: dims differ {p.shape} vs {o.shape}")
    if d_t < 0:
        raise ValueError("d_t must be non-negative")
    lam = float(np.exp(-d_t / rho))
    wp, wo = deflicker_weights(p.shape[0], p.shape[1], lam)
    axes = (0, 1)
    fp = np.fft.fft2(p, axes=axes)
    fo = np.fft.fft2(o, axes=axes)
    if p.ndim == 3:
        wp, wo = wp[..., None], wo[..., None]
    out = np.fft.ifft2(wp * fp + wo * fo, axes=axes).real
    return np.clip(out, 0.0, 1.0) if clamp else out


def deflicker_sequence(frames, centers, block: int = 8, radius: int = 4, rho: float = 1.0) -> np.ndarray:
    """``O_0 = P_0``; ``O_t = deflicker(P_t, warp(O_{t-1}, flow(P_{t-1}, P_t)), |c_t - c_{t-1}|)``."""
    frames = np.asarray(frames)
    centers = np.asarray(centers, dtype=np.float64).reshape(len(frames), 2)
    if len(frames) == 0:
        raise ValueError("deflicker_sequence needs at least one frame")
    out = [np.asarray(frames[0], dtype=np.float64)]
    for t in range(1, len(frames)):
        flow = block_flow(frames[t - 1], frames[t], block, radius)
        d = float(np.linalg.norm(centers[t] - centers[t - 1]))
        out.append(deflicker_frame(frames[t], warp(out[-1], flow), d, rho))
    return np.stack(out).astype(frames.dtype if frames.dtype.kind == "f" else np.float32)
