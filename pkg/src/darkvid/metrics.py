"""Image quality metrics: PSNR, SSIM, normalized mutual information, and
the cross-channel correlation report for RGB/NIR frame pairs."""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np


class MetricError(ValueError):
    pass


SSIM_WINDOW = 11
SSIM_SIGMA = 1.5
SSIM_K1 = 0.01
SSIM_K2 = 0.03

CHANNEL_PAIRS = (("r", "g"), ("r", "b"), ("g", "b"),
                 ("r", "nir"), ("g", "nir"), ("b", "nir"))


def psnr(x, y, peak=1.0):
    """10 * log10(peak^2 / MSE); math.inf when the frames are identical."""
    x = np.asarray(x, dtype=np.float64)
    y = np.asarray(y, dtype=np.float64)
    if x.shape != y.shape:
        raise MetricError(f"psnr: shape {x.shape} != {y.shape}")
    if peak <= 0:
        raise MetricError(f"psnr: peak must be positive, got {peak}")
    mse = np.mean((x - y) ** 2)
    if mse == 0.0:
        return math.inf
    return 10.0 * math.log10(peak * peak / mse)


def gaussian_window(size=SSIM_WINDOW, sigma=SSIM_SIGMA):
    half = (size - 1) / 2.0
    coords = np.arange(size) - half
    g = np.exp(-(coords ** 2) / (2.0 * sigma ** 2))
    w = np.outer(g, g)
    return w / w.sum()


def _local_weighted(plane, window):
    k = window.shape[0]
    views = np.lib.stride_tricks.sliding_window_view(plane, (k, k))
    return np.tensordot(views, window, axes=([2, 3], [0, 1]))


def _ssim_plane(x, y, peak, window):
    c1 = (SSIM_K1 * peak) ** 2
    c2 = (SSIM_K2 * peak) ** 2
    mu_x = _local_weighted(x, window)
    mu_y = _local_weighted(y, window)
    exx = _local_weighted(x * x, window)
    eyy = _local_weighted(y * y, window)
    exy = _local_weighted(x * y, window)
    var_x = exx - mu_x * mu_x
    var_y = eyy - mu_y * mu_y
    cov = exy - mu_x * mu_y
    num = (2 * mu_x * mu_y + c1) * (2 * cov + c2)
    den = (mu_x * mu_x + mu_y * mu_y + c1) * (var_x + var_y + c2)
    return float(np.mean(num / den))


def ssim(x, y, peak=1.0):
    """Mean local SSIM with the standard 11x11 Gaussian window (sigma 1.5).

    Accepts (H, W) planes or (C, H, W) frames; channels are averaged.
    """
    x = np.asarray(x, dtype=np.float64)
    y = np.asarray(y, dtype=np.float64)
    if x.shape != y.shape:
        raise MetricError(f"ssim: shape {x.shape} != {y.shape}")
    if x.ndim == 2:
        x = x[None]
        y = y[None]
    if x.ndim != 3:
        raise MetricError(f"ssim: expected (H,W) or (C,H,W), got {x.shape}")
    if x.shape[1] < SSIM_WINDOW or x.shape[2] < SSIM_WINDOW:
        raise MetricError(
            f"ssim: frame {x.shape[1:]} smaller than {SSIM_WINDOW}x{SSIM_WINDOW} window")
    window = gaussian_window()
    return float(np.mean([_ssim_plane(x[c], y[c], peak, window)
                          for c in range(x.shape[0])]))


def _entropy(p):
    p = p[p > 0]
    return float(-(p * np.log(p)).sum())


def nmi(x, y, bins=256, peak=1.0):
    """Normalized mutual information 2*I(X;Y)/(H(X)+H(Y)) over a joint
    intensity histogram; values binned uniformly on [0, peak]."""
    x = np.asarray(x, dtype=np.float64)
    y = np.asarray(y, dtype=np.float64)
    if x.shape != y.shape:
        raise MetricError(f"nmi: shape {x.shape} != {y.shape}")
    ix = np.clip((x.ravel() / peak * bins).astype(np.int64), 0, bins - 1)
    iy = np.clip((y.ravel() / peak * bins).astype(np.int64), 0, bins - 1)
    joint = np.bincount(ix * bins + iy, minlength=bins * bins).astype(np.float64)
    joint /= joint.sum()
    joint2d = joint.reshape(bins, bins)
    px = joint2d.sum(axis=1)
    py = joint2d.sum(axis=0)
    hx, hy, hxy = _entropy(px), _entropy(py), _entropy(joint)
    if hx + hy == 0.0:
        return 1.0 if np.array_equal(x, y) else 0.0
    mi = max(hx + hy - hxy, 0.0)
    return min(2.0 * mi / (hx + hy), 1.0)


@dataclass
class QualityReport:
    """Per-frame PSNR/SSIM series plus their clip means."""

    psnr_frames: list = field(default_factory=list)
    ssim_frames: list = field(default_factory=list)

    @property
    def psnr_mean(self):
        return float(np.mean(self.psnr_frames)) if self.psnr_frames else math.nan

    @property
    def ssim_mean(self):
        return float(np.mean(self.ssim_frames)) if self.ssim_frames else math.nan


def evaluate_frames(pred_frames, ref_frames, peak=1.0):
    """PSNR/SSIM per frame for two equal-length frame sequences."""
    if len(pred_frames) != len(ref_frames):
        raise MetricError(
            f"evaluate: {len(pred_frames)} predictions vs {len(ref_frames)} references")
    report = QualityReport()
    for p, r in zip(pred_frames, ref_frames):
        report.psnr_frames.append(psnr(p, r, peak))
        report.ssim_frames.append(ssim(p, r, peak))
    return report


def cross_channel_report(pairs, bins=256, peak=1.0):
    """SSIM and NMI for the six channel pairs of aligned RGB+NIR frames.

    pairs: iterable of (rgb (3,H,W), nir (1,H,W)). Returns one row per
    (pair index, channel pair): dicts with keys pair, channel_a,
    channel_b, ssim, nmi.
    """
    rows = []
    for idx, (rgb, nir) in enumerate(pairs):
        rgb = np.asarray(rgb, dtype=np.float64)
        nir = np.asarray(nir, dtype=np.float64)
        if rgb.ndim != 3 or rgb.shape[0] != 3:
            raise MetricError(f"pair {idx}: rgb must be (3,H,W), got {rgb.shape}")
        if nir.ndim != 3 or nir.shape[0] != 1:
            raise MetricError(f"pair {idx}: nir must be (1,H,W), got {nir.shape}")
        if rgb.shape[1:] != nir.shape[1:]:
            raise MetricError(
                f"pair {idx}: rgb spatial {rgb.shape[1:]} != nir {nir.shape[1:]}")
        planes = {"r": rgb[0], "g": rgb[1], "b": rgb[2], "nir": nir[0]}
        for a, b in CHANNEL_PAIRS:
            rows.append({
                "pair": idx,
                "channel_a": a,
                "channel_b": b,
                "ssim": ssim(planes[a], planes[b], peak),
                "nmi": nmi(planes[a], planes[b], bins=bins, peak=peak),
            })
    return rows
