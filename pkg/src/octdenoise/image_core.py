"""B-scan container, file formats and dataset manifests."""

from __future__ import annotations

import os
import struct
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Iterable, List, Optional

import numpy as np

KINDS = ("clean", "noisy", "single", "denoised", "phantom")
EYES = ("left", "right")
SPLITS = ("train", "test")
# tissue order matches label codes 1..7
TISSUES = ("rnfl", "gcl_ipl", "other_retina", "rpe", "choroid", "sclera", "lc")
MIN_DIM = 16
DEFAULT_HEIGHT = 496
DEFAULT_WIDTH = 384

RAW_MAGIC = b"OCTF"
RAW_SUFFIX = ".octf"
PGM_SUFFIX = ".pgm"


class ScanFormatError(ValueError):
    """A file could not be decoded as a B-scan."""


@dataclass(frozen=True)
class ScanMeta:
    subject_id: str = "unknown"
    eye: str = "right"
    scan_index: int = 0
    kind: str = "clean"

    def __post_init__(self):
        if self.kind not in KINDS:
            raise ValueError(f"kind must be one of {KINDS}, got {self.kind!r}")
        if self.eye not in EYES:
            raise ValueError(f"eye must be one of {EYES}, got {self.eye!r}")
        if not 0 <= self.scan_index <= 96:
            raise ValueError(f"scan_index out of range 0..96: {self.scan_index}")


@dataclass(frozen=True, eq=False)
class BScan:
    """One grayscale cross-section with intensities in [0, 1].

    Pixels are stored as a read-only float32 array (rows = depth).
    """

    pixels: np.ndarray
    meta: ScanMeta = field(default_factory=ScanMeta)

    def __post_init__(self):
        px = np.array(self.pixels, dtype=np.float32, copy=True)
        if px.ndim != 2:
            raise ValueError(f"B-scan must be 2-D, got shape {px.shape}")
        if px.shape[0] < MIN_DIM or px.shape[1] < MIN_DIM:
            raise ValueError(f"B-scan must be at least {MIN_DIM}x{MIN_DIM}, got {px.shape}")
        if not np.all(np.isfinite(px)) or px.min() < 0.0 or px.max() > 1.0:
            raise ValueError("B-scan intensities must lie in [0, 1]")
        px.setflags(write=False)
        object.__setattr__(self, "pixels", px)

    @property
    def height(self) -> int:
        return self.pixels.shape[0]

    @property
    def width(self) -> int:
        return self.pixels.shape[1]

    @property
    def shape(self):
        return self.pixels.shape

    def derive(self, pixels, **meta_changes) -> "BScan":
        return BScan(pixels, replace(self.meta, **meta_changes))


@dataclass
class Volume:
    scans: List[BScan]

    def __post_init__(self):
        if not self.scans:
            return
        first = self.scans[0]
        for i, scan in enumerate(self.scans):
            if scan.shape != first.shape:
                raise ValueError("volume scans must share dimensions")
            if (scan.meta.subject_id, scan.meta.eye) != (first.meta.subject_id, first.meta.eye):
                raise ValueError("volume scans must share subject and eye")
            if scan.meta.scan_index != i:
                raise ValueError("scan_index values must be consecutive from 0")


# -- file formats -----------------------------------------------------------

def _read_pgm(data: bytes, path) -> np.ndarray:
    tokens = []
    pos = 0
    while len(tokens) < 4:
        while pos < len(data) and data[pos:pos + 1].isspace():
            pos += 1
        if pos < len(data) and data[pos:pos + 1] == b"#":
            while pos < len(data) and data[pos:pos + 1] not in (b"\n", b"\r"):
                pos += 1
            continue
        start = pos
        while pos < len(data) and not data[pos:pos + 1].isspace():
            pos += 1
        if start == pos:
            raise ScanFormatError(f"{path}: truncated PGM header")
        tokens.append(data[start:pos])
    pos += 1  # single whitespace byte before the raster
    if tokens[0] != b"P5":
        raise ScanFormatError(f"{path}: only binary PGM (P5) is supported")
    try:
        width, height, maxval = (int(t) for t in tokens[1:])
    except ValueError as exc:
        raise ScanFormatError(f"{path}: bad PGM header") from exc
    if not 0 < maxval < 65536:
        raise ScanFormatError(f"{path}: bad maxval {maxval}")
    dtype = np.dtype("u1") if maxval < 256 else np.dtype(">u2")
    count = width * height
    if len(data) - pos < count * dtype.itemsize:
        raise ScanFormatError(f"{path}: truncated PGM raster")
    codes = np.frombuffer(data, dtype=dtype, count=count, offset=pos).reshape(height, width)
    return codes.astype(np.float64) / maxval


def _read_raw(data: bytes, path) -> np.ndarray:
    if len(data) < 16:
        raise ScanFormatError(f"{path}: truncated header")
    height, width = struct.unpack_from("<II", data, 4)
    count = height * width
    if len(data) != 16 + 4 * count:
        raise ScanFormatError(f"{path}: expected {count} floats after the header")
    return np.frombuffer(data, dtype="<f4", count=count, offset=16).reshape(height, width)


def read_pixels(path) -> np.ndarray:
    """Decode a raw-float or PGM file into an array without range checks."""
    try:
        data = Path(path).read_bytes()
    except OSError as exc:
        raise ScanFormatError(f"{path}: unreadable ({exc.strerror})") from exc
    if data[:4] == RAW_MAGIC:
        return _read_raw(data, path)
    if data[:2] == b"P5":
        return _read_pgm(data, path)
    raise ScanFormatError(f"{path}: unsupported format")


def load_bscan(path, meta: Optional[ScanMeta] = None) -> BScan:
    pixels = read_pixels(path)
    if pixels.shape[0] < MIN_DIM or pixels.shape[1] < MIN_DIM:
        raise ScanFormatError(f"{path}: dimensions {pixels.shape} below {MIN_DIM}x{MIN_DIM}")
    try:
        return BScan(pixels, meta or ScanMeta())
    except ValueError as exc:
        raise ScanFormatError(f"{path}: {exc}") from exc


def quantize(pixels, maxval: int) -> np.ndarray:
    """Round-half-up quantization of [0, 1] intensities to integer codes."""
    codes = np.floor(np.asarray(pixels, dtype=np.float64) * maxval + 0.5)
    return np.clip(codes, 0, maxval).astype(np.int64)


def write_pgm(codes: np.ndarray, path, maxval: int) -> None:
    codes = np.asarray(codes)
    dtype = "u1" if maxval < 256 else ">u2"
    header = f"P5\n{codes.shape[1]} {codes.shape[0]}\n{maxval}\n".encode("ascii")
    Path(path).write_bytes(header + codes.astype(dtype).tobytes())


def save_bscan(scan: BScan, path, format: str = "raw_float") -> None:
    pixels = scan.pixels
    if format == "raw_float":
        header = RAW_MAGIC + struct.pack("<III", pixels.shape[0], pixels.shape[1], 0)
        Path(path).write_bytes(header + np.ascontiguousarray(pixels, dtype="<f4").tobytes())
    elif format == "gray8":
        write_pgm(quantize(pixels, 255), path, 255)
    elif format == "gray16":
        write_pgm(quantize(pixels, 65535), path, 65535)
    else:
        raise ValueError(f"unknown format {format!r}")


# -- manifests --------------------------------------------------------------

NO_FILE = "-"


@dataclass(frozen=True)
class ManifestEntry:
    clean_path: str
    noisy_path: str
    subject_id: str
    eye: str
    split: str

    def __post_init__(self):
        if self.split not in SPLITS:
            raise ValueError(f"split must be one of {SPLITS}, got {self.split!r}")
        if self.eye not in EYES:
            raise ValueError(f"eye must be one of {EYES}, got {self.eye!r}")


@dataclass
class DatasetManifest:
    """Clean/noisy pairs with subject and split labels.

    Paths are kept as written; relative ones resolve against ``root``
    (the manifest's directory when read from disk).
    """

    entries: List[ManifestEntry] = field(default_factory=list)
    root: Path = field(default_factory=Path)

    def resolve(self, rel: str) -> Path:
        return Path(rel) if os.path.isabs(rel) else self.root / rel

    def split(self, name: str) -> List[ManifestEntry]:
        return [e for e in self.entries if e.split == name]

    def counts(self) -> dict:
        return {s: sum(e.split == s for e in self.entries) for s in SPLITS}


def read_manifest(path) -> DatasetManifest:
    path = Path(path)
    entries = []
    for lineno, line in enumerate(path.read_text(encoding="utf-8").splitlines(), 1):
        if not line.strip() or line.startswith("#"):
            continue
        fields = line.split("\t")
        if len(fields) != 5:
            raise ValueError(f"{path}:{lineno}: expected 5 tab-separated fields, got {len(fields)}")
        entries.append(ManifestEntry(*fields))
    return DatasetManifest(entries, path.parent)


def write_manifest(manifest: DatasetManifest, path, header: Iterable[str] = ()) -> None:
    lines = [f"# {h}" for h in header]
    lines.append("# clean_path\tnoisy_path\tsubject_id\teye\tsplit")
    for e in manifest.entries:
        lines.append("\t".join((e.clean_path, e.noisy_path, e.subject_id, e.eye, e.split)))
    Path(path).write_text("\n".join(lines) + "\n", encoding="utf-8")


@dataclass
class ValidationReport:
    counts: dict
    missing: List[str] = field(default_factory=list)
    unreadable: List[str] = field(default_factory=list)
    straddling_subjects: List[str] = field(default_factory=list)

    @property
    def ok(self) -> bool:
        return not (self.missing or self.unreadable or self.straddling_subjects)

    def lines(self) -> List[str]:
        out = [f"train={self.counts.get('train', 0)} test={self.counts.get('test', 0)}"]
        out += [f"missing: {p}" for p in self.missing]
        out += [f"unreadable: {p}" for p in self.unreadable]
        out += [f"subject in both splits: {s}" for s in self.straddling_subjects]
        out.append("valid" if self.ok else "INVALID")
        return out


def validate_manifest(manifest: DatasetManifest, check_files: bool = True) -> ValidationReport:
    splits_by_subject: dict = {}
    for e in manifest.entries:
        splits_by_subject.setdefault(e.subject_id, set()).add(e.split)
    report = ValidationReport(
        counts=manifest.counts(),
        straddling_subjects=sorted(s for s, v in splits_by_subject.items() if len(v) > 1),
    )
    if not check_files:
        return report
    seen = set()
    for e in manifest.entries:
        for rel in (e.clean_path, e.noisy_path):
            if rel == NO_FILE or rel in seen:
                continue
            seen.add(rel)
            path = manifest.resolve(rel)
            if not path.is_file():
                report.missing.append(rel)
                continue
            try:
                load_bscan(path)
            except ScanFormatError:
                report.unreadable.append(rel)
    return report
