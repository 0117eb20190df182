"""Deep-learning denoising of OCT B-scans on synthetic optic-nerve-head phantoms."""

__version__ = "0.1.0"

from .image_core import BScan, DatasetManifest, ManifestEntry, ScanMeta, load_bscan, save_bscan  # noqa: F401
