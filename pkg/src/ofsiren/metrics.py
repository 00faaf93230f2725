"""PSNR and SSIM for [0, 1] frames, aggregated per frame role."""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from .flow_field import to_gray

PSNR_CAP = 99.0
SSIM_WINDOW = 11
SSIM_SIGMA = 1.5
SSIM_K1 = 0.01
SSIM_K2 = 0.03


def _check_pair(a, b):
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if a.shape != b.shape:
        raise ValueError(f"frame shapes differ: {a.shape} vs {b.shape}")
    return a, b


def psnr(a, b) -> float:
    """10 log10(1 / mse) over all pixels and channels; inf for identical frames."""
    a, b = _check_pair(a, b)
    mse = float(np.mean((a - b) ** 2))
    if mse == 0.0:
        return math.inf
    return 10.0 * math.log10(1.0 / mse)


def gaussian_window(size: int = SSIM_WINDOW, sigma: float = SSIM_SIGMA) -> np.ndarray:
    r = np.arange(size, dtype=np.float64) - (size - 1) / 2.0
    g = np.exp(-(r ** 2) / (2 * sigma ** 2))
    g /= g.sum()
    return np.outer(g, g)


def ssim(a, b, data_range: float = 1.0) -> float:
    """Mean SSIM on Rec.601 luma over all valid 11x11 Gaussian window positions."""
    a, b = _check_pair(a, b)
    a, b = to_gray(a), to_gray(b)
    if min(a.shape) < SSIM_WINDOW:
        raise ValueError(f"frame {a.shape} smaller than the {SSIM_WINDOW}x{SSIM_WINDOW} window")
    win = gaussian_window()
    filt = lambda img: np.einsum("ijkl,kl->ij", sliding_window_view(img, win.shape), win)
    mu_a, mu_b = filt(a), filt(b)
    var_a = filt(a * a) - mu_a ** 2
    var_b = filt(b * b) - mu_b ** 2
    cov = filt(a * b) - mu_a * mu_b
    c1 = (SSIM_K1 * data_range) ** 2
    c2 = (SSIM_K2 * data_range) ** 2
    num = (2 * mu_a * mu_b + c1) * (2 * cov + c2)
    den = (mu_a ** 2 + mu_b ** 2 + c1) * (var_a + var_b + c2)
    return float(np.mean(num / den))


@dataclass
class FrameMetrics:
    frame_index: int
    role: str
    psnr: float
    ssim: float

    @property
    def exact_match(self) -> bool:
        return math.isinf(self.psnr)

    def csv_row(self) -> list:
        return [self.frame_index, self.role, min(self.psnr, PSNR_CAP), self.ssim, int(self.exact_match)]


@dataclass
class RoleSummary:
    role: str
    count: int
    mean_psnr: float
    mean_ssim: float
    global_psnr: float


@dataclass
class VideoMetrics:
    frames: list[FrameMetrics]
    summaries: dict[str, RoleSummary]

    def mean_psnr(self, role: str) -> float:
        return self.summaries[role].mean_psnr

    def mean_ssim(self, role: str) -> float:
        return self.summaries[role].mean_ssim


def video_metrics(rendered, truth, roles: list[str] | None) -> VideoMetrics:
    """Per-frame PSNR/SSIM plus per-role means.

    The reported mean PSNR averages per-frame values (inf capped at 99 dB);
    ``global_psnr`` pools the squared error of all frames of a role instead.
    """
    r = np.asarray(getattr(rendered, "frames", rendered), dtype=np.float64)
    t = np.asarray(getattr(truth, "frames", truth), dtype=np.float64)
    if roles is None:
        raise ValueError("role tags are required")
    if r.shape != t.shape:
        raise ValueError(f"rendered {r.shape} and truth {t.shape} are not aligned")
    if len(roles) != len(t):
        raise ValueError(f"{len(roles)} role tags for {len(t)} frames")
    rows = [FrameMetrics(k, roles[k], psnr(r[k], t[k]), ssim(r[k], t[k])) for k in range(len(t))]
    summaries = {}
    for role in dict.fromkeys(roles):
        sel = [m for m in rows if m.role == role]
        idx = [m.frame_index for m in sel]
        mse = float(np.mean((r[idx] - t[idx]) ** 2))
        summaries[role] = RoleSummary(
            role=role,
            count=len(sel),
            mean_psnr=float(np.mean([min(m.psnr, PSNR_CAP) for m in sel])),
            mean_ssim=float(np.mean([m.ssim for m in sel])),
            global_psnr=PSNR_CAP if mse == 0 else min(10 * math.log10(1 / mse), PSNR_CAP),
        )
    return VideoMetrics(rows, summaries)
