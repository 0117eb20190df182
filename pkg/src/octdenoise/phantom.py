"""Synthetic layered optic-nerve-head B-scans and Gaussian noise."""

from __future__ import annotations

import math

from dataclasses import dataclass
from typing import List, Optional, Sequence, Tuple

import numpy as np

from .image_core import TISSUES, BScan, ScanMeta
from .metrics import snr
LABEL_VITREOUS = 0
LABEL_LC = 7
# labels at or below this are not shadowed by vessels
INNER_RETINA_MAX_LABEL = 2

# boundary depth fractions: vitreous|rnfl|gcl_ipl|other|rpe|choroid|sclera
DEFAULT_BOUNDARIES = (0.22, 0.32, 0.42, 0.56, 0.645, 0.76)
# vitreous, rnfl, gcl_ipl, other_retina, rpe, choroid, sclera, lc
DEFAULT_INTENSITIES = (0.05, 0.75, 0.45, 0.30, 0.90, 0.55, 0.35, 0.60)


class BoundaryOrderError(ValueError):
    pass


@dataclass(frozen=True)
class VesselShadow:
    center: float  # column, as a fraction of the width
    width: float   # fraction of the width
    attenuation: float


@dataclass(frozen=True)
class LaminaRegion:
    """Elliptical lamina cribrosa region, in fractions of the image size."""

    center_col: float = 0.5
    center_row: float = 0.78
    half_width: float = 0.14
    half_height: float = 0.11


@dataclass(frozen=True)
class PhantomConfig:
    height: int = 496
    width: int = 384
    boundaries: Sequence[float] = DEFAULT_BOUNDARIES
    intensities: Sequence[float] = DEFAULT_INTENSITIES
    texture_sigma: float = 0.03
    curve_amplitude: float = 0.02
    cup_depth: float = 0.06
    cup_width: float = 0.12
    lamina: Optional[LaminaRegion] = LaminaRegion()
    vessel_shadows: Sequence[VesselShadow] = (
        VesselShadow(0.3, 0.035, 0.6),
        VesselShadow(0.72, 0.025, 0.7),
    )
    min_gap: int = 2
    seed: int = 0

    def __post_init__(self):
        object.__setattr__(self, "boundaries", tuple(float(b) for b in self.boundaries))
        object.__setattr__(self, "intensities", tuple(float(v) for v in self.intensities))
        object.__setattr__(self, "vessel_shadows", tuple(self.vessel_shadows))
        n_bands = len(self.boundaries) + 1
        if n_bands > LABEL_LC:
            raise ValueError(f"at most {LABEL_LC} bands are supported")
        expected = n_bands + (1 if self.lamina is not None else 0)
        if len(self.intensities) != expected:
            raise ValueError(f"need {expected} intensities for {n_bands} bands, got {len(self.intensities)}")
        if any(not 0.0 < v <= 1.0 for v in self.intensities):
            raise ValueError("band intensities must lie in (0, 1]")
        if any(not 0.0 < s.attenuation <= 1.0 for s in self.vessel_shadows):
            raise ValueError("attenuation factors must lie in (0, 1]")
        if list(self.boundaries) != sorted(self.boundaries) or len(set(self.boundaries)) != len(self.boundaries):
            raise BoundaryOrderError("boundary depths must be strictly increasing")
        if self.texture_sigma < 0:
            raise ValueError("texture_sigma must be >= 0")


@dataclass(frozen=True)
class NoiseSpec:
    kind: str = "gaussian"
    mu: float = 0.0
    sigma: float = 1.0
    clip: bool = True
    seed: int = 0

    def __post_init__(self):
        if self.kind != "gaussian":
            raise ValueError(f"unsupported noise kind {self.kind!r}")
        if not self.sigma >= 0:
            raise ValueError("sigma must be >= 0")


def _smooth_curve(rng: np.random.Generator, width: int, amplitude: float) -> np.ndarray:
    """Random cubic polynomial over [-1, 1], scaled so max |value| = amplitude."""
    x = np.linspace(-1.0, 1.0, width)
    coeffs = rng.normal(size=4)
    y = np.polyval(coeffs, x)
    y = y - y.mean()
    peak = np.max(np.abs(y))
    return y * (amplitude / peak) if peak > 0 else np.zeros(width)


def boundary_curves(config: PhantomConfig, rng: np.random.Generator) -> np.ndarray:
    """Per-column depth (pixels) of each boundary, shape (n_boundaries, width)."""
    h, w = config.height, config.width
    shared = _smooth_curve(rng, w, config.curve_amplitude * h)
    curves = []
    for depth in config.boundaries:
        own = _smooth_curve(rng, w, 0.25 * config.curve_amplitude * h)
        curves.append(depth * h + shared + own)
    curves = np.array(curves).reshape(len(config.boundaries), w)
    if config.cup_depth > 0 and len(curves):
        cols = np.arange(w)
        dip = config.cup_depth * h * np.exp(-0.5 * ((cols - (w - 1) / 2) / (config.cup_width * w)) ** 2)
        curves[0] = curves[0] + dip
        if len(curves) > 1:
            curves[0] = np.minimum(curves[0], curves[1] - config.min_gap)
    return curves


def label_map_from_curves(curves: np.ndarray, config: PhantomConfig) -> np.ndarray:
    h, w = config.height, config.width
    if len(curves) > 1 and np.any(np.diff(curves, axis=0) <= 0):
        raise BoundaryOrderError("boundary curves cross")
    rows = np.arange(h)[:, None]
    labels = np.zeros((h, w), dtype=np.uint8)
    for curve in curves:
        labels += (rows >= curve[None, :]).astype(np.uint8)
    if config.lamina is not None:
        lam = config.lamina
        r = (rows - lam.center_row * h) / (lam.half_height * h)
        c = (np.arange(w)[None, :] - lam.center_col * (w - 1)) / (lam.half_width * w)
        labels[(r ** 2 + c ** 2) <= 1.0] = LABEL_LC
    return labels


def generate_phantom(config: PhantomConfig, meta: Optional[ScanMeta] = None) -> Tuple[BScan, np.ndarray]:
    """Render a clean layered phantom and its tissue label map.

    Labels: 0 vitreous, 1 RNFL, 2 GCL+IPL, 3 other retinal layers, 4 RPE,
    5 choroid, 6 sclera, 7 lamina cribrosa. Texture jitter is zero-mean
    within each band, so band means equal the configured intensities
    before shadowing.
    """
    rng = np.random.default_rng(config.seed)
    curves = boundary_curves(config, rng)
    labels = label_map_from_curves(curves, config)

    n_bands = len(config.boundaries) + 1
    lut = np.zeros(LABEL_LC + 1)
    lut[:n_bands] = config.intensities[:n_bands]
    if config.lamina is not None:
        lut[LABEL_LC] = config.intensities[n_bands]
    pixels = lut[labels]
    if config.texture_sigma > 0:
        jitter = rng.normal(0.0, config.texture_sigma, size=labels.shape)
        for label in np.unique(labels):
            mask = labels == label
            # symmetric bound keeps the band inside [0, 1] without biasing its mean
            bound = min(lut[label], 1.0 - lut[label])
            band = np.clip(jitter[mask], -bound, bound)
            jitter[mask] = band - band.mean()
        pixels += jitter

    if config.vessel_shadows:
        cols = np.arange(config.width)
        shaded = labels > INNER_RETINA_MAX_LABEL
        for shadow in config.vessel_shadows:
            lo = (shadow.center - shadow.width / 2) * config.width
            hi = (shadow.center + shadow.width / 2) * config.width
            in_span = (cols >= lo) & (cols < hi)
            pixels[shaded & in_span[None, :]] *= shadow.attenuation

    meta = meta or ScanMeta(kind="phantom")
    return BScan(np.clip(pixels, 0.0, 1.0), meta), labels


def noisy_pixels(scan: BScan, spec: NoiseSpec) -> np.ndarray:
    """Noisy intensities as float64, clipped only when ``spec.clip``."""
    rng = np.random.default_rng(spec.seed)
    z = rng.standard_normal(scan.shape)
    noisy = scan.pixels.astype(np.float64) + spec.mu + spec.sigma * z
    return np.clip(noisy, 0.0, 1.0) if spec.clip else noisy


def add_noise(scan: BScan, spec: NoiseSpec) -> BScan:
    # without clipping the result must still land in [0, 1] to be a BScan
    return scan.derive(noisy_pixels(scan, spec), kind="noisy")


class CalibrationError(ValueError):
    pass


def mean_snr(clean_set: Sequence[BScan], sigma: float, seed: int = 0, mu: float = 0.0) -> float:
    """Mean SNR of clipped noisy copies; scan ``i`` uses noise seed ``seed + i``."""
    values = [snr(scan, add_noise(scan, NoiseSpec(mu=mu, sigma=sigma, seed=seed + i)))
              for i, scan in enumerate(clean_set)]
    return float(np.mean(values))


def calibrate_noise_sigma(clean_set: Sequence[BScan], target_snr_db: float, seed: int = 0,
                          bracket: Tuple[float, float] = (1e-4, 4.0), tol_db: float = 0.01,
                          max_iter: int = 80) -> float:
    """Find the noise sigma whose mean SNR over ``clean_set`` hits the target.

    The same standard-normal draws are rescaled for every trial sigma, so
    measured SNR is monotone in sigma and bisection (in log sigma) applies.
    A target above the SNR at the lower bracket returns the lower bracket.
    """
    if not clean_set:
        raise ValueError("clean_set is empty")
    if not math.isfinite(target_snr_db):
        raise ValueError("target SNR must be finite")
    lo, hi = bracket
    if mean_snr(clean_set, lo, seed) <= target_snr_db:
        return lo
    if mean_snr(clean_set, hi, seed) > target_snr_db:
        raise CalibrationError(f"target {target_snr_db} dB unreachable with sigma <= {hi}")
    log_lo, log_hi = math.log(lo), math.log(hi)
    for _ in range(max_iter):
        mid = math.exp(0.5 * (log_lo + log_hi))
        measured = mean_snr(clean_set, mid, seed)
        if abs(measured - target_snr_db) <= tol_db:
            return mid
        if measured > target_snr_db:
            log_lo = math.log(mid)
        else:
            log_hi = math.log(mid)
    return math.exp(0.5 * (log_lo + log_hi))
