"""Corpus benchmarking: RD sweeps over a directory, CSV emission, SVG plots.

Rows are ordered by (filename, ascending lambda) and every stochastic step is
seeded per task, so a rerun with the same seed is byte-identical except for
the wall-clock enc_ms column. Rates come from the emitted files themselves.
"""

from __future__ import annotations

import csv
import io
import os
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass
from typing import Sequence

from . import analysis as A
from . import bitstream
from . import decoder
from . import hyper as HY
from . import imageio
from . import metrics
from . import model
from . import overfit
from .errors import CodecError

__all__ = [
    "CSV_FIELDS",
    "corpus_files",
    "BenchRow",
    "run_corpus",
    "write_csv",
    "read_csv",
    "curve_from_csv",
    "write_rd_plot",
]

CSV_FIELDS = ("image", "lambda", "bpp", "psnr", "mac_per_pixel",
              "mode_used", "switch_decision", "enc_ms")

IMAGE_SUFFIXES = (".ppm", ".png")

MODE_NAMES = {bitstream.MODE_SHARED: "no",
              bitstream.MODE_MODULATED: "hyper",
              bitstream.MODE_DEDICATED: "overfit"}


@dataclass(frozen=True)
class BenchRow:
    """One (image, lambda) measurement of an emitted bitstream."""

    image: str
    lmbda: float
    bpp: float
    psnr: float
    mac_per_pixel: float
    mode_used: str
    switch_decision: str
    enc_ms: float

    def fields(self) -> tuple[str, ...]:
        return (self.image, f"{self.lmbda:.10g}", f"{self.bpp:.6f}",
                f"{self.psnr:.4f}", f"{self.mac_per_pixel:.2f}",
                self.mode_used, self.switch_decision, f"{self.enc_ms:.3f}")


def corpus_files(corpus_dir: str) -> list[str]:
    try:
        names = os.listdir(corpus_dir)
    except OSError as exc:
        raise CodecError(f"cannot list corpus directory {corpus_dir}: {exc}") from exc
    return sorted(n for n in names if n.lower().endswith(IMAGE_SUFFIXES))


def _encode_one(x, mode: str, lam: float, base, hyp, steps: int, task_seed: int
                ) -> tuple[bytes, float]:
    t0 = time.perf_counter()
    if mode == "no":
        stream = A.no_encode(x, base)
    elif mode == "hyper":
        stream = HY.hyper_encode(x, base, hyp, lam)
    elif mode == "overfit":
        n_grids = base.n_grids if base is not None else None
        stream, _ = overfit.overfit_encode(x, lam, steps=steps, init="random",
                                           seed=task_seed, n_grids=n_grids)
    elif mode == "warmstart":
        stream, _ = overfit.overfit_encode(x, lam, steps=steps, init="hyper",
                                           seed=task_seed, base=base, hyp=hyp)
    else:
        raise CodecError(f"unknown mode {mode!r}")
    return stream, (time.perf_counter() - t0) * 1e3


def _run_task(corpus_dir: str, name: str, mode: str, lam: float, base, hyp,
              steps: int, task_seed: int) -> BenchRow:
    x = imageio.read_image(os.path.join(corpus_dir, name))
    h, w = x.shape[1], x.shape[2]
    stream, enc_ms = _encode_one(x, mode, lam, base, hyp, steps, task_seed)
    rec, header = decoder.decode_stream(stream, base)
    n_grids = header.num_grids
    components = hyp.enabled if hyp is not None else model.COMPONENTS
    report = metrics.mac_count(h, w, n_grids, mode,
                               steps=steps if mode in ("overfit", "warmstart") else 0,
                               components=components)
    mode_used = MODE_NAMES[header.mode]
    if mode == "hyper":
        switch = "modulated" if header.mode == bitstream.MODE_MODULATED else "base"
    else:
        switch = "-"
    return BenchRow(image=name, lmbda=lam, bpp=8.0 * len(stream) / (h * w),
                    psnr=metrics.psnr(x, rec), mac_per_pixel=report.per_pixel,
                    mode_used=mode_used, switch_decision=switch, enc_ms=enc_ms)


def run_corpus(corpus_dir: str, mode: str, lambdas: Sequence[float],
               base: A.BaseModel | None = None, hyp: HY.HyperNet | None = None,
               out_csv: str | None = None, steps: int | None = None, seed: int = 0,
               jobs: int | None = None, plot_path: str | None = None) -> list[BenchRow]:
    """Encode every corpus image at every lambda and measure the results.

    Tasks run on a thread pool sized by jobs (default: logical cores); rows
    keep (filename, ascending lambda) order regardless. Task k is seeded with
    seed * 1000003 + k. An empty corpus yields a header-only CSV.
    """
    if mode not in metrics.MODES:
        raise CodecError(f"unknown mode {mode!r}")
    lams = sorted(float(v) for v in lambdas)
    if not lams:
        raise CodecError("no lambda values given")
    if any(v <= 0 for v in lams):
        raise CodecError("lambda values must be positive")
    if steps is None:
        steps = overfit.PRESETS["fast"]
    names = corpus_files(corpus_dir)
    tasks = [(name, lam) for name in names for lam in lams]
    rows: list[BenchRow] = []
    if tasks:
        with ThreadPoolExecutor(max_workers=jobs or os.cpu_count()) as pool:
            futures = [pool.submit(_run_task, corpus_dir, name, mode, lam, base,
                                   hyp, steps, seed * 1000003 + k)
                       for k, (name, lam) in enumerate(tasks)]
            rows = [f.result() for f in futures]
    if out_csv is not None:
        write_csv(rows, out_csv)
    if plot_path is not None and rows:
        write_rd_plot(rows, plot_path)
    return rows


def write_csv(rows: Sequence[BenchRow], path: str) -> None:
    """Write rows (header always included) with deterministic formatting."""
    buf = io.StringIO()
    writer = csv.writer(buf, lineterminator="\n")
    writer.writerow(CSV_FIELDS)
    for row in rows:
        writer.writerow(row.fields())
    with open(path, "w", newline="") as fh:
        fh.write(buf.getvalue())


def read_csv(path: str) -> list[dict[str, str]]:
    """Read a benchmark CSV back as one dict per row, values as strings."""
    with open(path, newline="") as fh:
        reader = csv.DictReader(fh)
        if reader.fieldnames is None or tuple(reader.fieldnames) != CSV_FIELDS:
            raise CodecError(f"{path} is not a benchmark CSV")
        return list(reader)


def curve_from_csv(path: str) -> list[tuple[float, float]]:
    """Aggregate a benchmark CSV into one (bpp, psnr) point per lambda.

    Points are per-lambda means over images, ordered by ascending lambda,
    ready for bd_rate.
    """
    groups: dict[float, list[tuple[float, float]]] = {}
    for row in read_csv(path):
        groups.setdefault(float(row["lambda"]), []).append(
            (float(row["bpp"]), float(row["psnr"])))
    if not groups:
        raise CodecError(f"{path} has no data rows")
    curve = []
    for lam in sorted(groups):
        pts = groups[lam]
        curve.append((sum(p[0] for p in pts) / len(pts),
                      sum(p[1] for p in pts) / len(pts)))
    return curve


PLOT_COLORS = ("#1f77b4", "#d62728", "#2ca02c", "#9467bd", "#ff7f0e",
               "#8c564b", "#e377c2", "#17becf")


def _ticks(lo: float, hi: float, n: int = 5) -> list[float]:
    if hi <= lo:
        hi = lo + 1.0
    return [lo + (hi - lo) * i / (n - 1) for i in range(n)]


def write_rd_plot(rows: Sequence[BenchRow], path: str) -> None:
    """Emit a self-contained SVG rate-distortion plot, one line per image."""
    if not rows:
        raise CodecError("no rows to plot")
    width, height, margin = 640, 440, 56
    xs = [r.bpp for r in rows]
    ys = [r.psnr for r in rows]
    x_lo, x_hi = min(xs), max(xs)
    y_lo, y_hi = min(ys), max(ys)
    x_pad = (x_hi - x_lo) * 0.05 or 0.5
    y_pad = (y_hi - y_lo) * 0.05 or 0.5
    x_lo, x_hi = x_lo - x_pad, x_hi + x_pad
    y_lo, y_hi = y_lo - y_pad, y_hi + y_pad

    def px(v: float) -> float:
        return margin + (v - x_lo) / (x_hi - x_lo) * (width - 2 * margin)

    def py(v: float) -> float:
        return height - margin - (v - y_lo) / (y_hi - y_lo) * (height - 2 * margin)

    parts = [f'<svg xmlns="http://www.w3.org/2000/svg" width="{width}" '
             f'height="{height}" viewBox="0 0 {width} {height}">',
             f'<rect width="{width}" height="{height}" fill="white"/>']
    for v in _ticks(x_lo, x_hi):
        parts.append(f'<line x1="{px(v):.1f}" y1="{height - margin}" '
                     f'x2="{px(v):.1f}" y2="{margin}" stroke="#ddd"/>')
        parts.append(f'<text x="{px(v):.1f}" y="{height - margin + 18}" '
                     f'font-size="11" text-anchor="middle">{v:.3g}</text>')
    for v in _ticks(y_lo, y_hi):
        parts.append(f'<line x1="{margin}" y1="{py(v):.1f}" '
                     f'x2="{width - margin}" y2="{py(v):.1f}" stroke="#ddd"/>')
        parts.append(f'<text x="{margin - 6}" y="{py(v):.1f}" font-size="11" '
                     f'text-anchor="end" dominant-baseline="middle">{v:.3g}</text>')
    parts.append(f'<rect x="{margin}" y="{margin}" width="{width - 2 * margin}" '
                 f'height="{height - 2 * margin}" fill="none" stroke="#333"/>')
    parts.append(f'<text x="{width / 2:.0f}" y="{height - 12}" font-size="13" '
                 f'text-anchor="middle">rate [bpp]</text>')
    parts.append(f'<text x="16" y="{height / 2:.0f}" font-size="13" '
                 f'text-anchor="middle" transform="rotate(-90 16 {height / 2:.0f})">'
                 f'PSNR [dB]</text>')
    by_image: dict[str, list[BenchRow]] = {}
    for row in rows:
        by_image.setdefault(row.image, []).append(row)
    for k, name in enumerate(sorted(by_image)):
        color = PLOT_COLORS[k % len(PLOT_COLORS)]
        pts = sorted(by_image[name], key=lambda r: r.lmbda)
        coords = " ".join(f"{px(r.bpp):.1f},{py(r.psnr):.1f}" for r in pts)
        parts.append(f'<polyline points="{coords}" fill="none" '
                     f'stroke="{color}" stroke-width="1.5"/>')
        for r in pts:
            parts.append(f'<circle cx="{px(r.bpp):.1f}" cy="{py(r.psnr):.1f}" '
                         f'r="3" fill="{color}"/>')
        parts.append(f'<text x="{width - margin - 6}" '
                     f'y="{margin + 14 + 14 * k}" font-size="11" '
                     f'text-anchor="end" fill="{color}">{name}</text>')
    parts.append("</svg>")
    with open(path, "w") as fh:
        fh.write("\n".join(parts) + "\n")
