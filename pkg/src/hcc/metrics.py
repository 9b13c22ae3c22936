"""Evaluation metrics: PSNR, analytic multiply-accumulate counts, BD-rate.

MAC accounting mirrors the engine's counters exactly: convolutions cost
k^2 * C_in * C_out per output pixel (transposed convolutions on their full
pre-crop output), linear layers D_in * D_out per application, and one
optimization step costs 3x its forward pass (backward counted at 2x).
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Sequence

import numpy as np

from . import functional as F
from . import model
from .analysis import ANALYSIS_CHANNELS, ANALYSIS_KERNEL
from .errors import CodecError
from .hyper import BACKBONE_CHANNELS, BACKBONE_KERNEL, FEATURE_DIM, HEAD_HIDDEN

__all__ = [
    "PSNR_CAP",
    "psnr",
    "ComplexityReport",
    "analysis_macs",
    "backbone_macs",
    "heads_macs",
    "rd_forward_macs",
    "mac_count",
    "bd_rate",
]

PSNR_CAP = 99.0

MODES = ("no", "hyper", "overfit", "warmstart")
INITS = ("random", "no", "hyper")


def psnr(x: np.ndarray, xhat: np.ndarray) -> float:
    """PSNR in dB between 8-bit roundings of two [0, 1] images.

    Identical images (and anything past it) report the 99.0 sentinel.
    """
    a = np.asarray(x, dtype=np.float64)
    b = np.asarray(xhat, dtype=np.float64)
    if a.shape != b.shape:
        raise CodecError(f"image shapes differ: {a.shape} vs {b.shape}")
    qa = F.round_half_away(np.clip(a, 0.0, 1.0) * 255.0)
    qb = F.round_half_away(np.clip(b, 0.0, 1.0) * 255.0)
    mse = float(np.mean((qa - qb) ** 2))
    if mse == 0.0:
        return PSNR_CAP
    return min(10.0 * math.log10(255.0 ** 2 / mse), PSNR_CAP)


@dataclass(frozen=True)
class ComplexityReport:
    """Itemized MAC totals for one encode."""

    items: dict[str, int]
    h: int
    w: int

    @property
    def total(self) -> int:
        return sum(self.items.values())

    @property
    def per_pixel(self) -> float:
        return self.total / (self.h * self.w)


def analysis_macs(h: int, w: int, n_grids: int) -> int:
    """Per-grid head convs at each grid's resolution."""
    per_px = sum(ANALYSIS_KERNEL ** 2 * cin * cout
                 for cin, cout in zip(ANALYSIS_CHANNELS[:-1], ANALYSIS_CHANNELS[1:]))
    return per_px * sum(gh * gw for gh, gw in model.grid_shapes(h, w, n_grids))


def backbone_macs(h: int, w: int) -> int:
    total = 0
    for cin, cout in zip(BACKBONE_CHANNELS[:-1], BACKBONE_CHANNELS[1:]):
        h, w = -(-h // 2), -(-w // 2)
        total += BACKBONE_KERNEL ** 2 * cin * cout * h * w
    return total


def heads_macs(n_grids: int, components: Sequence[str]) -> int:
    return sum(FEATURE_DIM * HEAD_HIDDEN + HEAD_HIDDEN * model.component_size(c, n_grids)
               for c in components)


def rd_forward_macs(h: int, w: int, n_grids: int) -> int:
    """One rate-distortion forward: upsampling chain + synthesis + context model."""
    schedule = model.grid_shapes(h, w, n_grids)
    ups = 0
    for i in range(1, n_grids):
        for level in range(i, 0, -1):
            gh, gw = schedule[level]
            ups += 16 * (2 * gh) * (2 * gw)
    syn = (n_grids * model.SYN_HIDDEN
           + model.SYN_HIDDEN * model.SYN_HIDDEN
           + 9 * model.SYN_HIDDEN * 3) * h * w
    arm = (8 * model.ARM_HIDDEN + model.ARM_HIDDEN * model.ARM_HIDDEN
           + model.ARM_HIDDEN * 2) * sum(gh * gw for gh, gw in schedule)
    return ups + syn + arm


def mac_count(h: int, w: int, n_grids: int = model.N_GRIDS_DEFAULT, mode: str = "no",
              steps: int = 0, components: Sequence[str] = model.COMPONENTS,
              init: str = "random") -> ComplexityReport:
    """Analytic encode cost; equals the engine's instrumented counters exactly."""
    if mode not in MODES:
        raise CodecError(f"unknown mode {mode!r}")
    if init not in INITS:
        raise CodecError(f"unknown init {init!r}")
    if steps < 0:
        raise CodecError(f"negative step count {steps}")
    if mode == "warmstart":
        mode, init = "overfit", "hyper"
    items: dict[str, int] = {}
    if mode == "no" or (mode == "overfit" and init in ("no", "hyper")):
        items["analysis"] = analysis_macs(h, w, n_grids)
    if mode == "hyper" or (mode == "overfit" and init == "hyper"):
        items.setdefault("analysis", analysis_macs(h, w, n_grids))
        items["backbone"] = backbone_macs(h, w)
        items["heads"] = heads_macs(n_grids, components)
    if mode == "overfit":
        items["optimize"] = 3 * rd_forward_macs(h, w, n_grids) * steps
    return ComplexityReport(items, h, w)


def _prep_curve(points: Sequence[tuple[float, float]], name: str) -> tuple[np.ndarray, np.ndarray]:
    arr = np.asarray(points, dtype=np.float64)
    if arr.ndim != 2 or arr.shape[1] != 2:
        raise CodecError(f"{name} curve must be (rate, psnr) pairs")
    if arr.shape[0] < 4:
        raise CodecError(f"{name} curve has {arr.shape[0]} points, need at least 4")
    if np.any(arr[:, 0] <= 0.0):
        raise CodecError(f"{name} curve has non-positive rates")
    order = np.argsort(arr[:, 1])
    rate, quality = arr[order, 0], arr[order, 1]
    if np.any(np.diff(quality) <= 0.0):
        raise CodecError(f"{name} curve psnr values are not strictly increasing")
    return rate, quality


def bd_rate(anchor: Sequence[tuple[float, float]], test: Sequence[tuple[float, float]]) -> float:
    """Average rate difference in percent over the shared quality range.

    Cubic fit of log10(rate) against psnr per curve, integrated over the
    overlapping psnr interval; positive means the test curve spends more bits.
    """
    ar, aq = _prep_curve(anchor, "anchor")
    tr, tq = _prep_curve(test, "test")
    lo = max(aq[0], tq[0])
    hi = min(aq[-1], tq[-1])
    if not hi > lo:
        raise CodecError(f"psnr ranges do not overlap: [{aq[0]}, {aq[-1]}] vs [{tq[0]}, {tq[-1]}]")

    def integral(rate: np.ndarray, quality: np.ndarray) -> float:
        mid = quality.mean()
        coeffs = np.polyfit(quality - mid, np.log10(rate), 3)
        anti = np.polyint(coeffs)
        return float(np.polyval(anti, hi - mid) - np.polyval(anti, lo - mid))

    delta = (integral(tr, tq) - integral(ar, aq)) / (hi - lo)
    return (10.0 ** delta - 1.0) * 100.0
