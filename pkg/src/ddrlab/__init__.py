"""Distance difference representations on 2-D Riemannian domains: distance
solvers, boundary difference data, numerical rigidity checks and metric
reconstruction up to isometry."""

from __future__ import annotations

__version__ = "0.1.0"
