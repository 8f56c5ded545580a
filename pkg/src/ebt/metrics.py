"""Expression/landmark errors and image quality metrics."""

from __future__ import annotations

import csv
import io
from dataclasses import asdict, dataclass

import numpy as np

PSNR_CAP = 99.0
SSIM_WIN = 11
SSIM_SIGMA = 1.5
SSIM_K1 = 0.01
SSIM_K2 = 0.03

# published reference numbers for the full-scale system (3D GRID setting);
# documented for comparison only, not reproducible at desk scale
REFERENCE = {"e_exp": 0.65, "e_ldmk": 2.24, "psnr_db": 31.19, "ssim": 0.95}


def _pair(a, b, what: str) -> tuple[np.ndarray, np.ndarray]:
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if a.shape != b.shape:
        raise ValueError(f"{what}: shape mismatch {a.shape} vs {b.shape}")
    if a.size == 0:
        raise ValueError(f"{what}: empty input")
    return a, b


def e_exp(pred, truth) -> float:
    """Mean absolute difference per expression component."""
    a, b = _pair(pred, truth, "e_exp")
    return float(np.mean(np.abs(a - b)))


def e_ldmk(pred, truth) -> float:
    """Mean Euclidean distance per 2D landmark; inputs are (..., 2) or flat x,y pairs."""
    a, b = _pair(pred, truth, "e_ldmk")
    if a.size % 2:
        raise ValueError("e_ldmk: odd number of coordinates")
    d = (a - b).reshape(-1, 2)
    return float(np.mean(np.sqrt(np.sum(d * d, axis=1))))


def psnr(a, b) -> float:
    """``10 log10(1 / MSE)`` over all channels (peak 1), capped at 99 dB."""
    a, b = _pair(a, b, "psnr")
    mse = float(np.mean((a - b) ** 2))
    if mse <= 0:
        return PSNR_CAP
    return float(min(PSNR_CAP, 10.0 * np.log10(1.0 / mse)))


def _gray(x: np.ndarray) -> np.ndarray:
    return x.mean(axis=-1) if x.ndim == 3 else x


def _gauss_valid(img: np.ndarray, taps: np.ndarray) -> np.ndarray:
    """Separable correlation keeping only fully covered positions."""
    n = taps.size
    rows = np.lib.stride_tricks.sliding_window_view(img, n, axis=0) @ taps
    return np.lib.stride_tricks.sliding_window_view(rows, n, axis=1) @ taps


def gaussian_taps(n: int = SSIM_WIN, sigma: float = SSIM_SIGMA) -> np.ndarray:
    x = np.arange(n) - (n - 1) / 2
    g = np.exp(-0.5 * (x / sigma) ** 2)
    return g / g.sum()


def ssim(a, b) -> float:
    """Single-scale SSIM on the channel-mean luminance, data range 1."""
    a, b = _pair(a, b, "ssim")
    x, y = _gray(a), _gray(b)
    if x.shape[0] < SSIM_WIN or x.shape[1] < SSIM_WIN:
        raise ValueError(f"ssim: images must be at least {SSIM_WIN}×{SSIM_WIN}, got {x.shape}")
    taps = gaussian_taps()
    c1 = SSIM_K1**2
    c2 = SSIM_K2**2
    mx, my = _gauss_valid(x, taps), _gauss_valid(y, taps)
    sxx = _gauss_valid(x * x, taps) - mx * mx
    syy = _gauss_valid(y * y, taps) - my * my
    sxy = _gauss_valid(x * y, taps) - mx * my
    num = (2 * mx * my + c1) * (2 * sxy + c2)
    den = (mx * mx + my * my + c1) * (sxx + syy + c2)
    return float(np.mean(num / den))


@dataclass
class EvalReport:
    e_exp: float
    e_ldmk: float
    psnr_db: float
    ssim: float
    n_exp: int
    n_ldmk: int
    n_frames: int

    def __post_init__(self):
        if self.e_exp < 0 or self.e_ldmk < 0:
            raise ValueError("errors must be non-negative")
        if not (np.isnan(self.ssim) or -1.0 <= self.ssim <= 1.0):
            raise ValueError("ssim out of range")
        self.psnr_db = min(self.psnr_db, PSNR_CAP)

    def to_text(self) -> str:
        return "".join(f"{k}={v}\n" for k, v in asdict(self).items())

    def csv_row(self, sequence: str, header: bool = False) -> str:
        buf = io.StringIO()
        fields = ["sequence"] + list(asdict(self))
        w = csv.DictWriter(buf, fieldnames=fields, lineterminator="\n")
        if header:
            w.writeheader()
        w.writerow({"sequence": sequence, **asdict(self)})
        return buf.getvalue()

    @classmethod
    def from_text(cls, text: str) -> "EvalReport":
        vals = dict(line.split("=", 1) for line in text.splitlines() if "=" in line)
        kw = {k: (int(v) if k.startswith("n_") else float(v)) for k, v in vals.items()}
        return cls(**kw)


def evaluate(pred_e, true_e, pred_l, true_l, pred_frames=None, true_frames=None) -> EvalReport:
    """Aggregate report; image metrics average over frame pairs (NaN without frames)."""
    pe = np.asarray(pred_e)
    pl = np.asarray(pred_l)
    if pred_frames is not None and len(pred_frames):
        ps = float(np.mean([psnr(a, b) for a, b in zip(pred_frames, true_frames)]))
        ss = float(np.mean([ssim(a, b) for a, b in zip(pred_frames, true_frames)]))
        nf = len(pred_frames)
    else:
        ps, ss, nf = float("nan"), float("nan"), 0
    return EvalReport(e_exp(pe, true_e), e_ldmk(pl, true_l), ps, ss, pe.size, pl.size // 2, nf)
