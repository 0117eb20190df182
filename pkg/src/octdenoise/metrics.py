"""SNR, per-tissue CNR and windowed SSIM/MSSIM, plus report aggregation."""

from __future__ import annotations

import csv
import io
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Dict, Iterable, List, Optional, Sequence

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from .image_core import TISSUES, BScan, DatasetManifest, ManifestEntry, load_bscan, read_pixels

SSIM_C1 = 6.50
SSIM_C2 = 58.52
SSIM_SCALE = 255.0
WINDOW = 8
ROIS_PER_TISSUE = 25
BACKGROUND_ROWS = 20
KINDS = ("noisy", "denoised", "clean")
METRIC_COLUMNS = ("snr_db", "mssim") + tuple(f"cnr_{t}" for t in TISSUES)


def _pixels(img) -> np.ndarray:
    if isinstance(img, BScan):
        img = img.pixels
    return np.asarray(img, dtype=np.float64)


def snr(reference, test) -> float:
    """-10 log10(||ref - test||^2 / ||ref||^2) in dB; ``inf`` when identical."""
    ref, tst = _pixels(reference), _pixels(test)
    if ref.shape != tst.shape:
        raise ValueError(f"shape mismatch {ref.shape} vs {tst.shape}")
    signal = np.sum(ref * ref)
    if signal == 0:
        raise ValueError("SNR is undefined for an all-zero reference")
    residual = np.sum((ref - tst) ** 2)
    if residual == 0:
        return math.inf
    return -10.0 * math.log10(residual / signal)


@dataclass(frozen=True)
class ROI:
    top: int
    left: int
    height: int = WINDOW
    width: int = WINDOW

    def inside(self, shape) -> bool:
        return (self.top >= 0 and self.left >= 0 and self.height > 0 and self.width > 0
                and self.top + self.height <= shape[0] and self.left + self.width <= shape[1])

    def crop(self, pixels: np.ndarray) -> np.ndarray:
        if not self.inside(pixels.shape):
            raise ValueError(f"{self} outside image of shape {pixels.shape}")
        return pixels[self.top:self.top + self.height, self.left:self.left + self.width]


def background_roi(width: int, rows: int = BACKGROUND_ROWS) -> ROI:
    return ROI(0, 0, rows, width)


def _cnr_single(region: np.ndarray, background: np.ndarray, variant: str) -> float:
    mu_r, mu_b = region.mean(), background.mean()
    var_r, var_b = region.var(), background.var()
    if variant == "standard":
        denom = math.sqrt(0.5 * (var_r + var_b))
    elif variant == "paper_literal":
        denom = math.sqrt(0.5 * (var_b + var_b))
    else:
        raise ValueError(f"unknown CNR variant {variant!r}")
    numer = abs(mu_r - mu_b)
    if denom == 0:
        return 0.0 if numer == 0 else math.inf
    return numer / denom


def cnr(scan, tissue_rois: Sequence[ROI], background: ROI, variant: str = "standard") -> float:
    """Mean tissue-vs-background contrast-to-noise ratio over ``tissue_rois``.

    ``standard`` pools both variances in the denominator; ``paper_literal``
    uses the background variance for both terms, i.e. sigma_b.
    """
    if not tissue_rois:
        raise ValueError("need at least one tissue ROI")
    px = _pixels(scan)
    bg = background.crop(px)
    return float(np.mean([_cnr_single(r.crop(px), bg, variant) for r in tissue_rois]))


def ssim_window(x, y, scale: float = SSIM_SCALE) -> float:
    """SSIM of two equally sized windows; inputs are multiplied by ``scale``."""
    x = _pixels(x) * scale
    y = _pixels(y) * scale
    if x.shape != y.shape:
        raise ValueError(f"window shape mismatch {x.shape} vs {y.shape}")
    mx, my = x.mean(), y.mean()
    dx, dy = x - mx, y - my
    vx, vy, cxy = np.mean(dx * dx), np.mean(dy * dy), np.mean(dx * dy)
    return float(((2 * mx * my + SSIM_C1) * (2 * cxy + SSIM_C2))
                 / ((mx * mx + my * my + SSIM_C1) * (vx + vy + SSIM_C2)))


def ssim_map(x, y, window: int = WINDOW, scale: float = SSIM_SCALE, chunk_rows: int = 64) -> np.ndarray:
    """SSIM for every ``window`` x ``window`` patch at stride 1."""
    x = _pixels(x) * scale
    y = _pixels(y) * scale
    if x.shape != y.shape:
        raise ValueError(f"shape mismatch {x.shape} vs {y.shape}")
    if x.shape[0] < window or x.shape[1] < window:
        raise ValueError(f"image {x.shape} smaller than the {window}x{window} window")
    n_rows = x.shape[0] - window + 1
    out = np.empty((n_rows, x.shape[1] - window + 1))
    for start in range(0, n_rows, chunk_rows):
        stop = min(n_rows, start + chunk_rows)
        wx = sliding_window_view(x[start:stop + window - 1], (window, window))
        wy = sliding_window_view(y[start:stop + window - 1], (window, window))
        mx = wx.mean(axis=(-2, -1))
        my = wy.mean(axis=(-2, -1))
        dx = wx - mx[..., None, None]
        dy = wy - my[..., None, None]
        vx = np.mean(dx * dx, axis=(-2, -1))
        vy = np.mean(dy * dy, axis=(-2, -1))
        cxy = np.mean(dx * dy, axis=(-2, -1))
        out[start:stop] = ((2 * mx * my + SSIM_C1) * (2 * cxy + SSIM_C2)) / (
            (mx * mx + my * my + SSIM_C1) * (vx + vy + SSIM_C2))
    return out


def mssim(x, y, window: int = WINDOW, scale: float = SSIM_SCALE) -> float:
    return float(ssim_map(x, y, window, scale).mean())


# -- ROI placement ----------------------------------------------------------

@dataclass
class TissueROISet:
    rois: Dict[int, List[ROI]]
    background: ROI
    flagged: Dict[int, str] = field(default_factory=dict)


def label_pure_positions(label_map: np.ndarray, label: int, size: int = WINDOW) -> np.ndarray:
    """Top-left (row, col) of every size x size window made only of ``label``."""
    mask = (np.asarray(label_map) == label).astype(np.int64)
    if mask.shape[0] < size or mask.shape[1] < size:
        return np.empty((0, 2), dtype=np.int64)
    integral = np.pad(mask.cumsum(0).cumsum(1), ((1, 0), (1, 0)))
    sums = (integral[size:, size:] - integral[:-size, size:]
            - integral[size:, :-size] + integral[:-size, :-size])
    return np.argwhere(sums == size * size)


def sample_tissue_rois(label_map: np.ndarray, seed: int, count: int = ROIS_PER_TISSUE,
                       size: int = WINDOW, tissues: Iterable[int] = range(1, len(TISSUES) + 1),
                       background_rows: int = BACKGROUND_ROWS) -> TissueROISet:
    """Draw ``count`` distinct label-pure ROIs per tissue, uniformly.

    Tissues with fewer valid placements keep what exists and are flagged;
    absent tissues are skipped and flagged.
    """
    label_map = np.asarray(label_map)
    rng = np.random.default_rng(seed)
    result = TissueROISet({}, background_roi(label_map.shape[1], background_rows))
    for label in tissues:
        positions = label_pure_positions(label_map, label, size)
        if len(positions) == 0:
            result.flagged[label] = "absent" if not np.any(label_map == label) else "no room for a window"
            continue
        if len(positions) < count:
            result.flagged[label] = f"only {len(positions)} placements"
        picks = rng.choice(len(positions), size=min(count, len(positions)), replace=False)
        result.rois[label] = [ROI(int(r), int(c), size, size) for r, c in positions[picks]]
    return result


def read_roi_file(path, image_width: int) -> TissueROISet:
    """Parse ``tissue_label top left height width`` lines; label 0 is background."""
    rois: Dict[int, List[ROI]] = {}
    background = None
    for lineno, line in enumerate(Path(path).read_text().splitlines(), 1):
        line = line.strip()
        if not line or line.startswith("#"):
            continue
        parts = line.split()
        if len(parts) != 5:
            raise ValueError(f"{path}:{lineno}: expected 5 fields")
        label, top, left, height, width = (int(p) for p in parts)
        roi = ROI(top, left, height, width)
        if label == 0:
            background = roi
        else:
            rois.setdefault(label, []).append(roi)
    return TissueROISet(rois, background or background_roi(image_width))


# -- reports ----------------------------------------------------------------

@dataclass
class ScanMetrics:
    scan_id: str
    kind: str
    snr_db: float
    mssim: float
    cnr: Dict[str, float]

    def values(self) -> List[float]:
        return [self.snr_db, self.mssim] + [self.cnr.get(t, math.nan) for t in TISSUES]


def summarize(values: Sequence[float]) -> tuple:
    """Mean and sample standard deviation; sd is 0 for a single value."""
    arr = np.asarray(values, dtype=np.float64)
    if arr.size == 0:
        return math.nan, math.nan
    if not np.all(np.isfinite(arr)):
        finite_mean = float(np.mean(arr)) if not np.any(np.isnan(arr)) else math.nan
        return finite_mean, math.nan
    mean = math.fsum(arr) / arr.size
    if arr.size == 1:
        return mean, 0.0
    return mean, math.sqrt(math.fsum((arr - mean) ** 2) / (arr.size - 1))


@dataclass
class MetricsReport:
    rows: List[ScanMetrics] = field(default_factory=list)

    def kinds(self) -> List[str]:
        seen = []
        for r in self.rows:
            if r.kind not in seen:
                seen.append(r.kind)
        return seen

    def column(self, kind: str, metric: str) -> List[float]:
        idx = METRIC_COLUMNS.index(metric)
        return [r.values()[idx] for r in self.rows if r.kind == kind]

    def aggregates(self) -> Dict[tuple, tuple]:
        return {(kind, metric): summarize(self.column(kind, metric))
                for kind in self.kinds() for metric in METRIC_COLUMNS}

    def to_csv(self) -> str:
        buf = io.StringIO()
        writer = csv.writer(buf, lineterminator="\n")
        writer.writerow(("scan_id", "kind") + METRIC_COLUMNS)
        for r in self.rows:
            writer.writerow([r.scan_id, r.kind] + [repr(float(v)) for v in r.values()])
        for (kind, metric), (mean, sd) in self.aggregates().items():
            writer.writerow(["aggregate", kind, metric, repr(float(mean)), repr(float(sd))])
        return buf.getvalue()

    def save(self, path) -> None:
        text = self.to_csv()
        check_aggregates(text)
        Path(path).write_text(text)


def parse_report(text: str):
    """Split report CSV text into (per-scan rows, aggregate footer rows)."""
    reader = csv.reader(io.StringIO(text))
    header = next(reader)
    rows, footer = [], []
    for rec in reader:
        if rec[0] == "aggregate":
            footer.append((rec[1], rec[2], float(rec[3]), float(rec[4])))
        else:
            rows.append(dict(zip(header, rec[:2] + [float(v) for v in rec[2:]])))
    return rows, footer


def check_aggregates(text: str, tol: float = 1e-9) -> None:
    rows, footer = parse_report(text)
    for kind, metric, mean, sd in footer:
        exp_mean, exp_sd = summarize([r[metric] for r in rows if r["kind"] == kind])
        for got, want in ((mean, exp_mean), (sd, exp_sd)):
            if math.isnan(want) and math.isnan(got):
                continue
            if got != want and not abs(got - want) <= tol * max(1.0, abs(want)):
                raise ValueError(f"aggregate {kind}/{metric} does not match its rows")


def label_map_path(clean_path) -> Path:
    p = Path(clean_path)
    return p.with_name(p.name.split(".")[0] + ".labels.pgm")


def load_label_map(path) -> np.ndarray:
    return np.rint(read_pixels(path) * 255).astype(np.uint8)


def scan_id_for(entry: ManifestEntry) -> str:
    return Path(entry.clean_path).name.split(".")[0]


def scan_metrics(scan_id: str, kind: str, reference: BScan, scan: BScan,
                 rois: TissueROISet, variant: str = "standard") -> ScanMetrics:
    values = {TISSUES[label - 1]: cnr(scan, rs, rois.background, variant)
              for label, rs in sorted(rois.rois.items()) if 1 <= label <= len(TISSUES)}
    return ScanMetrics(scan_id, kind, snr(reference, scan), mssim(scan, reference), values)


def evaluate(manifest: DatasetManifest, denoise: Callable[[ManifestEntry, BScan], BScan],
             rois_for: Callable[[ManifestEntry, BScan], TissueROISet],
             entries: Optional[Sequence[ManifestEntry]] = None,
             variant: str = "standard") -> MetricsReport:
    """Score noisy, denoised and clean versions of each test pair.

    ``denoise`` receives the entry and its noisy scan; ``rois_for`` the
    entry and its clean scan.
    """
    entries = manifest.split("test") if entries is None else entries
    report = MetricsReport()
    for entry in entries:
        clean = load_bscan(manifest.resolve(entry.clean_path))
        noisy = load_bscan(manifest.resolve(entry.noisy_path))
        rois = rois_for(entry, clean)
        sid = scan_id_for(entry)
        for kind, scan in (("noisy", noisy), ("denoised", denoise(entry, noisy)), ("clean", clean)):
            report.rows.append(scan_metrics(sid, kind, clean, scan, rois, variant))
    return report


def label_map_rois(manifest: DatasetManifest, seed: int, count: int = ROIS_PER_TISSUE):
    """ROI policy for phantom data: label map stored next to each clean scan."""
    def rois_for(entry: ManifestEntry, clean: BScan) -> TissueROISet:
        labels = load_label_map(label_map_path(manifest.resolve(entry.clean_path)))
        return sample_tissue_rois(labels, seed, count)
    return rois_for
