"""Static SVG plots: Phi profiles along the frame and lambda histograms."""

from __future__ import annotations

from pathlib import Path
from typing import Sequence

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402
import numpy as np  # noqa: E402

# fixed ids and no date so identical inputs give identical files
matplotlib.rcParams["svg.hashsalt"] = "ddrlab"
_META = {"Date": None, "Creator": "ddrlab"}

__all__ = ["phi_profile_svg", "lambda_histogram_svg"]


def _save(fig, path: str | Path) -> Path:
    path = Path(path)
    fig.savefig(path, format="svg", metadata=_META)
    plt.close(fig)
    return path


def phi_profile_svg(profile: dict, path: str | Path, title: str = "") -> Path:
    """Phi against boundary arclength, one line per loop, z marked."""
    arc = np.asarray(profile["arc"])
    loop = np.asarray(profile["loop"])
    phi = np.asarray(profile["phi"])
    zi = int(profile["z_index"])
    fig, ax = plt.subplots(figsize=(6, 3.2))
    for lid in np.unique(loop):
        sel = loop == lid
        order = np.argsort(arc[sel])
        ax.plot(arc[sel][order], phi[sel][order], lw=1.2, label=f"loop {lid}")
    ax.axvline(arc[zi], color="k", ls="--", lw=0.8)
    ax.plot([arc[zi]], [phi[zi]], "ko", ms=4, label="z")
    ax.set_xlabel("boundary arclength")
    ax.set_ylabel("Phi")
    ax.set_title(title or f"p={profile['p']}, x={profile['x']}")
    ax.legend(fontsize=7)
    fig.tight_layout()
    return _save(fig, path)


def lambda_histogram_svg(groups: dict[str, Sequence[float]], path: str | Path, band: float = 0.02) -> Path:
    """Histogram of lambda estimates per labelled group with the accepted band."""
    fig, ax = plt.subplots(figsize=(6, 3.2))
    vals = [np.asarray(v, dtype=float) for v in groups.values()]
    finite = np.concatenate([v[np.isfinite(v)] for v in vals]) if vals else np.array([1.0])
    lo = min(1 - 3 * band, float(finite.min()) if finite.size else 1.0)
    hi = max(1 + 3 * band, float(finite.max()) if finite.size else 1.0)
    bins = np.linspace(lo, hi, 41)
    for label, v in zip(groups, vals):
        ax.hist(v[np.isfinite(v)], bins=bins, alpha=0.6, label=label)
    ax.axvspan(1 - band, 1 + band, color="g", alpha=0.12, lw=0)
    ax.set_xlabel("lambda")
    ax.set_ylabel("count")
    ax.legend(fontsize=7)
    fig.tight_layout()
    return _save(fig, path)
