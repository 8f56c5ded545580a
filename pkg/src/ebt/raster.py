"""Pixel-level helpers: polygon scanline fill, ellipses, PPM frames.

Pixel (row, col) has its centre at (x=col, y=row).
"""

from __future__ import annotations

from pathlib import Path

import numpy as np


class PpmError(ValueError):
    pass


def fill_polygon(points: np.ndarray, height: int, width: int) -> np.ndarray:
    """Boolean mask of pixel centres inside the polygon (even-odd scanline rule)."""
    pts = np.asarray(points, dtype=np.float64).reshape(-1, 2)
    mask = np.zeros((height, width), dtype=bool)
    if pts.shape[0] < 3:
        return mask
    x0, y0 = pts[:, 0], pts[:, 1]
    x1, y1 = np.roll(x0, -1), np.roll(y0, -1)
    cols = np.arange(width)
    for row in range(max(0, int(np.floor(y0.min()))), min(height, int(np.ceil(y0.max())) + 1)):
        y = float(row)
        crosses = (y0 <= y) != (y1 <= y)
        if not crosses.any():
            continue
        xa, ya, xb, yb = x0[crosses], y0[crosses], x1[crosses], y1[crosses]
        xs = np.sort(xa + (y - ya) * (xb - xa) / (yb - ya))
        for left, right in zip(xs[0::2], xs[1::2]):
            mask[row] |= (cols >= left) & (cols < right)
    return mask


def polygon_area(points: np.ndarray) -> float:
    """Shoelace area (absolute)."""
    p = np.asarray(points, dtype=np.float64).reshape(-1, 2)
    x, y = p[:, 0], p[:, 1]
    return 0.5 * abs(float(np.dot(x, np.roll(y, -1)) - np.dot(y, np.roll(x, -1))))


def is_simple_polygon(points: np.ndarray) -> bool:
    """True when no two non-adjacent edges intersect."""
    p = np.asarray(points, dtype=np.float64).reshape(-1, 2)
    n = p.shape[0]

    def cross(o, a, b):
        return (a[0] - o[0]) * (b[1] - o[1]) - (a[1] - o[1]) * (b[0] - o[0])

    for i in range(n):
        a, b = p[i], p[(i + 1) % n]
        for j in range(i + 1, n):
            if j == i or (j + 1) % n == i or (i + 1) % n == j:
                continue
            c, d = p[j], p[(j + 1) % n]
            d1, d2 = cross(a, b, c), cross(a, b, d)
            d3, d4 = cross(c, d, a), cross(c, d, b)
            if d1 * d2 < 0 and d3 * d4 < 0:
                return False
    return True


def fill_ellipse(center, axes, angle: float, height: int, width: int) -> np.ndarray:
    yy, xx = np.mgrid[0:height, 0:width].astype(np.float64)
    dx, dy = xx - center[0], yy - center[1]
    c, s = np.cos(angle), np.sin(angle)
    u = (c * dx + s * dy) / axes[0]
    v = (-s * dx + c * dy) / axes[1]
    return u * u + v * v <= 1.0


def bounding_box(points: np.ndarray, pad: float = 0.0) -> tuple[int, int, int, int]:
    """Integer (x0, y0, x1, y1), half-open, padded by ``pad`` × size on each side."""
    p = np.asarray(points, dtype=np.float64).reshape(-1, 2)
    lo, hi = p.min(axis=0), p.max(axis=0)
    size = hi - lo
    lo = lo - pad * size
    hi = hi + pad * size
    return int(np.floor(lo[0])), int(np.floor(lo[1])), int(np.ceil(hi[0])) + 1, int(np.ceil(hi[1])) + 1


# ---------------------------------------------------------------------------
# PPM (P6, maxval 255)


def to_bytes(frame: np.ndarray) -> np.ndarray:
    return np.round(np.clip(frame, 0.0, 1.0) * 255.0).astype(np.uint8)


def save_ppm(path, frame: np.ndarray) -> None:
    """``frame`` is (H, W, 3) float in [0, 1]; values are quantised by round(v·255)."""
    frame = np.asarray(frame)
    if frame.ndim != 3 or frame.shape[2] != 3:
        raise PpmError(f"expected (H, W, 3) frame, got {frame.shape}")
    h, w, _ = frame.shape
    with open(path, "wb") as f:
        f.write(f"P6\n{w} {h}\n255\n".encode("ascii"))
        f.write(to_bytes(frame).tobytes())


def _tokens(raw: bytes, count: int) -> tuple[list[bytes], int]:
    out, pos = [], 0
    while len(out) < count:
        while pos < len(raw) and raw[pos : pos + 1].isspace():
            pos += 1
        if raw[pos : pos + 1] == b"#":
            while pos < len(raw) and raw[pos : pos + 1] not in (b"\n", b"\r"):
                pos += 1
            continue
        start = pos
        while pos < len(raw) and not raw[pos : pos + 1].isspace():
            pos += 1
        if start == pos:
            raise PpmError("truncated PPM header")
        out.append(raw[start:pos])
    return out, pos + 1


def load_ppm(path) -> np.ndarray:
    raw = Path(path).read_bytes()
    (magic, w, h, maxval), pos = _tokens(raw, 4)
    if magic != b"P6":
        raise PpmError(f"{path}: bad magic {magic!r}")
    w, h, maxval = int(w), int(h), int(maxval)
    if maxval != 255:
        raise PpmError(f"{path}: maxval {maxval} unsupported")
    body = raw[pos : pos + w * h * 3]
    if len(body) != w * h * 3:
        raise PpmError(f"{path}: truncated pixel data")
    return np.frombuffer(body, dtype=np.uint8).reshape(h, w, 3).astype(np.float32) / 255.0
