"""Offline augmentation: flips, rotations, elastic warps and occluding patches.

``expand_dataset`` turns each clean scan into ``factor`` clean/noisy pairs
on disk. Every variant draws its randomness from a seed derived from
(run seed, scan id, variant slot), so the output does not depend on the
order in which scans are processed.
"""

from __future__ import annotations

import math
import zlib
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, replace
from itertools import combinations
from pathlib import Path
from typing import List, Optional, Sequence, Tuple

import numpy as np
from scipy.ndimage import map_coordinates

from .image_core import BScan, DatasetManifest, ManifestEntry, save_bscan, write_pgm
from .phantom import NoiseSpec, add_noise

TRANSFORMS = ("occlusion", "elastic", "rotate_ccw", "rotate_cw", "hflip")
# slot k (1-based) applies SINGLE_SLOTS[k-1]; later slots draw a random pair
SINGLE_SLOTS = TRANSFORMS
PAIRS = [p for p in combinations(TRANSFORMS, 2) if set(p) != {"rotate_cw", "rotate_ccw"}]
APPLY_ORDER = ("elastic", "rotate_cw", "rotate_ccw", "hflip", "occlusion")
METADATA_NAME = "augment_metadata.txt"


@dataclass(frozen=True)
class ElasticSpec:
    grid_spacing: int = 32
    displacement_sigma: float = 4.0


@dataclass(frozen=True)
class OcclusionSpec:
    count: int = 10
    patch_height: int = 60
    patch_width: int = 20
    factor_min: float = 0.2
    factor_max: float = 0.8

    def __post_init__(self):
        if not 0 < self.factor_min <= self.factor_max < 1:
            raise ValueError("occlusion factors must satisfy 0 < min <= max < 1")
        if self.count < 0 or self.patch_height < 1 or self.patch_width < 1:
            raise ValueError("bad occlusion patch geometry")


@dataclass(frozen=True)
class AugmentationSpec:
    elastic: ElasticSpec = ElasticSpec()
    rotation_degrees: float = 10.0
    occlusion: OcclusionSpec = OcclusionSpec()
    hflip: bool = True
    seed: int = 0

    def __post_init__(self):
        if abs(self.rotation_degrees) > 45:
            raise ValueError("|rotation_degrees| must be <= 45")


def _finish(scan: BScan, pixels: np.ndarray) -> BScan:
    return scan.derive(np.clip(pixels, 0.0, 1.0))


def bilinear_sample(img: np.ndarray, rows: np.ndarray, cols: np.ndarray) -> np.ndarray:
    """Sample ``img`` at fractional coordinates; neighbours outside read as 0."""
    img = np.asarray(img, dtype=np.float64)
    h, w = img.shape
    r0 = np.floor(rows).astype(np.int64)
    c0 = np.floor(cols).astype(np.int64)
    fr = rows - r0
    fc = cols - c0
    out = np.zeros(rows.shape, dtype=np.float64)
    for dr, wr in ((0, 1.0 - fr), (1, fr)):
        for dc, wc in ((0, 1.0 - fc), (1, fc)):
            rr, cc = r0 + dr, c0 + dc
            valid = (rr >= 0) & (rr < h) & (cc >= 0) & (cc < w)
            vals = np.zeros(rows.shape, dtype=np.float64)
            vals[valid] = img[rr[valid], cc[valid]]
            out += wr * wc * vals
    return out


def hflip(scan: BScan) -> BScan:
    return scan.derive(scan.pixels[:, ::-1])


def rotate(scan: BScan, degrees: float) -> BScan:
    """Rotate about the image centre (positive = counter-clockwise on screen)."""
    if abs(degrees) > 45:
        raise ValueError("|degrees| must be <= 45")
    h, w = scan.shape
    cy, cx = (h - 1) / 2.0, (w - 1) / 2.0
    theta = math.radians(degrees)
    cos, sin = math.cos(theta), math.sin(theta)
    rr, cc = np.meshgrid(np.arange(h, dtype=np.float64), np.arange(w, dtype=np.float64), indexing="ij")
    dr, dc = rr - cy, cc - cx
    # inverse map: where each output pixel comes from
    src_r = cy + cos * dr + sin * dc
    src_c = cx - sin * dr + cos * dc
    return _finish(scan, bilinear_sample(scan.pixels, src_r, src_c))


def displacement_field(shape: Tuple[int, int], grid_spacing: int, displacement_sigma: float,
                       seed: int) -> np.ndarray:
    """Per-pixel (dy, dx), cubic-spline upsampled from a coarse Gaussian lattice."""
    if grid_spacing < 8:
        raise ValueError("grid_spacing must be >= 8")
    if displacement_sigma < 0:
        raise ValueError("displacement_sigma must be >= 0")
    h, w = shape
    ny = math.ceil((h - 1) / grid_spacing) + 1
    nx = math.ceil((w - 1) / grid_spacing) + 1
    rng = np.random.default_rng(seed)
    coarse = rng.normal(0.0, displacement_sigma, size=(2, ny, nx))
    rr, cc = np.meshgrid(np.arange(h) / grid_spacing, np.arange(w) / grid_spacing, indexing="ij")
    return np.stack([map_coordinates(coarse[i], [rr, cc], order=3, mode="nearest") for i in range(2)])


def elastic_deform(scan: BScan, params: ElasticSpec = ElasticSpec(), seed: int = 0) -> BScan:
    field_ = displacement_field(scan.shape, params.grid_spacing, params.displacement_sigma, seed)
    h, w = scan.shape
    rr, cc = np.meshgrid(np.arange(h, dtype=np.float64), np.arange(w, dtype=np.float64), indexing="ij")
    return _finish(scan, bilinear_sample(scan.pixels, rr + field_[0], cc + field_[1]))


def occlusion_patches(shape, params: OcclusionSpec, seed: int) -> List[Tuple[int, int, float]]:
    h, w = shape
    if params.count and (params.patch_height > h or params.patch_width > w):
        raise ValueError(f"{params.patch_height}x{params.patch_width} patch does not fit in {h}x{w}")
    rng = np.random.default_rng(seed)
    patches = []
    for _ in range(params.count):
        top = int(rng.integers(0, h - params.patch_height + 1))
        left = int(rng.integers(0, w - params.patch_width + 1))
        patches.append((top, left, float(rng.uniform(params.factor_min, params.factor_max))))
    return patches


def occlude(scan: BScan, params: OcclusionSpec = OcclusionSpec(), seed: int = 0) -> BScan:
    """Darken ``count`` random rectangles; overlapping factors multiply."""
    pixels = scan.pixels.astype(np.float64)
    for top, left, factor in occlusion_patches(scan.shape, params, seed):
        pixels[top:top + params.patch_height, left:left + params.patch_width] *= factor
    return scan.derive(pixels)


# -- dataset expansion ------------------------------------------------------

def scan_id(scan: BScan) -> str:
    m = scan.meta
    return f"{m.subject_id}_{m.eye}_{m.scan_index:03d}"


def variant_seeds(seed: int, sid: str, slot: int) -> dict:
    ss = np.random.SeedSequence([seed, zlib.crc32(sid.encode("utf-8")), slot])
    keys = ("recipe", "elastic", "occlusion", "noise")
    return dict(zip(keys, (int(v) for v in ss.generate_state(len(keys)))))


def variant_recipe(slot: int, seeds: dict) -> Tuple[str, ...]:
    if slot == 0:
        return ()
    if slot <= len(SINGLE_SLOTS):
        return (SINGLE_SLOTS[slot - 1],)
    pair = PAIRS[np.random.default_rng(seeds["recipe"]).integers(len(PAIRS))]
    return tuple(t for t in APPLY_ORDER if t in pair)


def apply_recipe(scan: BScan, recipe: Sequence[str], spec: AugmentationSpec, seeds: dict) -> BScan:
    out = scan
    for name in recipe:
        if name == "elastic":
            out = elastic_deform(out, spec.elastic, seeds["elastic"])
        elif name == "rotate_cw":
            out = rotate(out, -spec.rotation_degrees)
        elif name == "rotate_ccw":
            out = rotate(out, spec.rotation_degrees)
        elif name == "hflip":
            out = hflip(out)
        elif name == "occlusion":
            out = occlude(out, spec.occlusion, seeds["occlusion"])
        else:
            raise ValueError(f"unknown transform {name!r}")
    return out


def _describe(recipe, spec: AugmentationSpec, seeds: dict) -> str:
    parts = []
    for name in recipe:
        if name == "elastic":
            parts.append(f"elastic(grid={spec.elastic.grid_spacing},sigma={spec.elastic.displacement_sigma!r},"
                         f"seed={seeds['elastic']})")
        elif name in ("rotate_cw", "rotate_ccw"):
            sign = -1 if name == "rotate_cw" else 1
            parts.append(f"rotate({sign * spec.rotation_degrees!r})")
        elif name == "occlusion":
            o = spec.occlusion
            parts.append(f"occlusion(n={o.count},{o.patch_height}x{o.patch_width},"
                         f"f={o.factor_min!r}-{o.factor_max!r},seed={seeds['occlusion']})")
        else:
            parts.append(name)
    return "+".join(parts) or "original"


@dataclass(frozen=True)
class _Job:
    scan: BScan
    labels: Optional[np.ndarray]
    split: str
    spec: AugmentationSpec
    noise: NoiseSpec
    factor: int
    out_dir: Path


def _expand_one(job: _Job):
    sid = scan_id(job.scan)
    entries, lines = [], []
    for slot in range(job.factor):
        seeds = variant_seeds(job.spec.seed, sid, slot)
        recipe = variant_recipe(slot, seeds)
        clean = apply_recipe(job.scan, recipe, job.spec, seeds)
        clean = clean.derive(clean.pixels, kind="clean")
        noise = replace(job.noise, seed=seeds["noise"])
        noisy = add_noise(clean, noise)
        stem = f"{sid}_v{slot:02d}"
        clean_name, noisy_name = f"{stem}.clean.octf", f"{stem}.noisy.octf"
        save_bscan(clean, job.out_dir / clean_name)
        save_bscan(noisy, job.out_dir / noisy_name)
        if slot == 0 and job.labels is not None:
            write_pgm(job.labels, job.out_dir / f"{stem}.labels.pgm", 255)
        m = job.scan.meta
        entries.append(ManifestEntry(clean_name, noisy_name, m.subject_id, m.eye, job.split))
        lines.append("\t".join((clean_name, noisy_name, str(slot), _describe(recipe, job.spec, seeds),
                                str(noise.seed), repr(noise.sigma), repr(noise.mu), str(noise.clip))))
    return entries, lines


def expand_dataset(clean_scans: Sequence[BScan], spec: AugmentationSpec, noise: NoiseSpec,
                   out_dir, factor=10, splits: Optional[Sequence[str]] = None,
                   label_maps: Optional[Sequence[np.ndarray]] = None, jobs: int = 1,
                   metadata_name: str = METADATA_NAME) -> DatasetManifest:
    """Write ``factor`` clean/noisy pairs per input scan under ``out_dir``.

    Slot 0 is the original, slots 1-5 apply occlusion, elastic, rotation
    by -/+ ``rotation_degrees`` and flip, later slots a random pair of
    these. The noisy image is always fresh noise on the augmented clean
    image. One metadata line per pair records the recipe and noise seed.
    ``factor`` may also be a per-scan sequence.
    """
    if not clean_scans:
        raise ValueError("no input scans")
    factors = [factor] * len(clean_scans) if np.isscalar(factor) else list(factor)
    if len(factors) != len(clean_scans) or min(factors) < 1:
        raise ValueError("factor must be >= 1 for every scan")
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    splits = list(splits) if splits is not None else ["train"] * len(clean_scans)
    label_maps = list(label_maps) if label_maps is not None else [None] * len(clean_scans)
    todo = [_Job(s, lm, sp, spec, noise, int(f), out_dir)
            for s, lm, sp, f in zip(clean_scans, label_maps, splits, factors)]
    if jobs > 1:
        with ProcessPoolExecutor(max_workers=jobs) as pool:
            results = list(pool.map(_expand_one, todo))
    else:
        results = [_expand_one(j) for j in todo]

    manifest = DatasetManifest([], out_dir)
    lines = ["# clean\tnoisy\tslot\ttransforms\tnoise_seed\tsigma\tmu\tclip"]
    for entries, meta_lines in results:
        manifest.entries.extend(entries)
        lines.extend(meta_lines)
    (out_dir / metadata_name).write_text("\n".join(lines) + "\n")
    return manifest


@dataclass(frozen=True)
class PairRecord:
    clean: str
    noisy: str
    slot: int
    transforms: str
    noise: NoiseSpec


def read_metadata(path) -> List[PairRecord]:
    records = []
    for line in Path(path).read_text().splitlines():
        if not line or line.startswith("#"):
            continue
        clean, noisy, slot, transforms, seed, sigma, mu, clip = line.split("\t")
        records.append(PairRecord(clean, noisy, int(slot), transforms,
                                  NoiseSpec(mu=float(mu), sigma=float(sigma), clip=clip == "True", seed=int(seed))))
    return records
