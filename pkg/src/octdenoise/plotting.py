"""Figures for evaluation reports: metric bar charts and scan montages."""

from __future__ import annotations

from pathlib import Path
from typing import Dict, Sequence

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402
import numpy as np  # noqa: E402

from .image_core import TISSUES, quantize, write_pgm  # noqa: E402

KIND_COLORS = {"noisy": "#b0b0b0", "denoised": "#3b75af", "clean": "#2f2f2f"}

# fixed salt and no date so repeated runs write identical SVG bytes
matplotlib.rcParams.update({
    "svg.hashsalt": "octdenoise",
    "font.size": 9,
    "axes.spines.top": False,
    "axes.spines.right": False,
})


def _save(fig, path) -> None:
    fig.savefig(path, format="svg", metadata={"Date": None})
    plt.close(fig)


def bar_chart(values: Dict[str, tuple], title: str, ylabel: str, path) -> None:
    """One bar per kind, ``values`` maps kind -> (mean, sd)."""
    kinds = list(values)
    means = [values[k][0] for k in kinds]
    sds = [values[k][1] if np.isfinite(values[k][1]) else 0.0 for k in kinds]
    fig, ax = plt.subplots(figsize=(3.6, 2.8))
    ax.bar(kinds, means, yerr=sds, capsize=3, color=[KIND_COLORS.get(k, "#777777") for k in kinds])
    ax.set_title(title)
    ax.set_ylabel(ylabel)
    fig.tight_layout()
    _save(fig, path)


def cnr_chart(values: Dict[str, Dict[str, tuple]], path) -> None:
    """Grouped bars of mean CNR per tissue; ``values`` maps kind -> tissue -> (mean, sd)."""
    kinds = list(values)
    x = np.arange(len(TISSUES))
    width = 0.8 / max(1, len(kinds))
    fig, ax = plt.subplots(figsize=(6.4, 3.0))
    for i, kind in enumerate(kinds):
        means = [values[kind].get(t, (np.nan, np.nan))[0] for t in TISSUES]
        ax.bar(x + (i - (len(kinds) - 1) / 2) * width, means, width,
               label=kind, color=KIND_COLORS.get(kind, "#777777"))
    ax.set_xticks(x)
    ax.set_xticklabels([t.replace("_", "+") if t == "gcl_ipl" else t.replace("_", " ") for t in TISSUES])
    ax.set_ylabel("CNR")
    ax.legend(frameon=False)
    fig.tight_layout()
    _save(fig, path)


def montage(images: Sequence[np.ndarray], path, gap: int = 4) -> None:
    """Side-by-side gray8 PGM of equally sized [0, 1] images."""
    h = images[0].shape[0]
    pieces = []
    for i, img in enumerate(images):
        if i:
            pieces.append(np.ones((h, gap)))
        pieces.append(np.asarray(img, dtype=np.float64))
    write_pgm(quantize(np.hstack(pieces), 255), Path(path), 255)
