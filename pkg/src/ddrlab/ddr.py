"""Distance difference functions on sampled boundaries and their sup-norm geometry."""

from __future__ import annotations

import math
import struct
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

from . import _kernels
from .distance_engine import FieldStack, distance_field, distance_fields
from .metric_domain import Mesh

__all__ = [
    "FrameMismatch",
    "BoundaryFrame",
    "make_frame",
    "DDFMatrix",
    "ddf",
    "ddf_from_fields",
    "sup_dist",
    "match",
    "DDFArchive",
    "KeyIndex",
    "match_archives",
    "bilipschitz_profile",
]


class FrameMismatch(ValueError):
    """Two DDF objects are sampled on different boundary frames."""


@dataclass(frozen=True, eq=False)
class BoundaryFrame:
    """Ordered boundary samples shared by every DDF matrix of an experiment.

    ``arc_positions`` is the cumulative metric arclength of each sample along its
    own loop; ``loop_lengths`` closes each loop.
    """

    samples: np.ndarray
    arc_positions: np.ndarray
    loop_ids: np.ndarray
    loop_lengths: np.ndarray
    spacing: float = 0.0

    def __post_init__(self):
        if len(np.unique(self.samples)) != len(self.samples):
            raise ValueError("frame samples must be distinct")

    def __len__(self):
        return len(self.samples)

    def same_as(self, other: "BoundaryFrame") -> bool:
        return self is other or np.array_equal(self.samples, other.samples)

    def index_of(self, vertex: int) -> int:
        hit = np.flatnonzero(self.samples == vertex)
        if len(hit) == 0:
            raise KeyError(f"vertex {vertex} is not a frame sample")
        return int(hit[0])

    def arc_distance(self, i: int, j) -> np.ndarray:
        """Boundary arclength between sample ``i`` and sample(s) ``j`` (inf across loops)."""
        j = np.asarray(j)
        d = np.abs(self.arc_positions[j] - self.arc_positions[i])
        L = self.loop_lengths[self.loop_ids[i]]
        d = np.minimum(d, L - d)
        return np.where(self.loop_ids[j] == self.loop_ids[i], d, np.inf)

    def max_gap(self) -> float:
        gaps = []
        for lid in np.unique(self.loop_ids):
            s = np.sort(self.arc_positions[self.loop_ids == lid])
            gaps.append(np.max(np.diff(np.append(s, s[0] + self.loop_lengths[lid]))))
        return float(max(gaps))


def make_frame(mesh: Mesh, spacing: float | None = None) -> BoundaryFrame:
    """Every m-th boundary vertex of each loop, m chosen so gaps stay <= ``spacing``.

    ``spacing`` defaults to the boundary vertex spacing (all boundary vertices).
    """
    samples, arcs, loops, lengths = [], [], [], []
    for lid, loop in enumerate(mesh.boundary_order):
        seg = np.array([mesh.edge_length(int(a), int(b)) for a, b in zip(loop, np.roll(loop, -1))])
        cum = np.concatenate([[0.0], np.cumsum(seg)])
        step = 1 if spacing is None else max(1, int(math.floor(spacing / seg.max() + 1e-9)))
        n_take = int(math.ceil(len(loop) / step))
        idx = np.round(np.arange(n_take) * len(loop) / n_take).astype(int)
        samples.append(loop[idx])
        arcs.append(cum[idx])
        loops.append(np.full(len(idx), lid))
        lengths.append(cum[-1])
    return BoundaryFrame(
        samples=np.concatenate(samples).astype(np.int64),
        arc_positions=np.concatenate(arcs),
        loop_ids=np.concatenate(loops).astype(np.int64),
        loop_lengths=np.asarray(lengths),
        spacing=float(spacing) if spacing else 0.0,
    )


@dataclass(frozen=True, eq=False)
class DDFMatrix:
    """values[i, j] = d(source, y_i) - d(source, y_j) over frame samples."""

    frame: BoundaryFrame
    source: int
    values: np.ndarray

    @classmethod
    def from_potential(cls, frame: BoundaryFrame, source: int, potential: np.ndarray) -> "DDFMatrix":
        r = np.asarray(potential, dtype=float)
        return cls(frame, int(source), r[:, None] - r[None, :])

    def potential(self) -> np.ndarray:
        """A vector r with values[i, j] = r_i - r_j (normalized r_0 = 0)."""
        return self.values[:, 0].copy()


def ddf_from_fields(fields: FieldStack, frame: BoundaryFrame, x: int) -> DDFMatrix:
    """D_x read off distance fields sourced at the frame samples (d(y_i, x))."""
    rows = np.array([fields.row(s) for s in frame.samples])
    return DDFMatrix.from_potential(frame, x, fields.dist[rows, x])


def ddf(mesh: Mesh, frame: BoundaryFrame, x: int, solver: str = "upwind",
        fields: FieldStack | None = None) -> DDFMatrix:
    """Distance difference function of vertex ``x`` on ``frame``.

    Without ``fields`` one distance field is propagated from ``x``; with
    ``fields`` (sourced at the frame samples) no propagation is needed.
    """
    if fields is not None:
        return ddf_from_fields(fields, frame, x)
    f = distance_field(mesh, x, solver)
    return DDFMatrix.from_potential(frame, x, f.dist[frame.samples])


def _same_frame(a: BoundaryFrame, b: BoundaryFrame):
    if not a.same_as(b):
        raise FrameMismatch("DDF matrices live on different boundary frames")


def sup_dist(a: DDFMatrix, b: DDFMatrix) -> float:
    """max over (i, j) of |a[i, j] - b[i, j]|."""
    _same_frame(a.frame, b.frame)
    return float(np.max(np.abs(a.values - b.values)))


def match(data: Sequence[DDFMatrix], query: DDFMatrix) -> tuple[int, float]:
    """Index of the element of ``data`` closest to ``query`` in sup distance.

    Ties go to the smallest index.
    """
    if len(data) == 0:
        raise ValueError("empty data set")
    best, best_d = -1, math.inf
    for i, item in enumerate(data):
        d = sup_dist(query, item)
        if d < best_d:
            best, best_d = i, d
    return best, best_d


# ---------------------------------------------------------------------------
# archives

_DDF1 = b"DDF1"


@dataclass(eq=False)
class DDFArchive:
    """A set of DDF matrices on one frame, kept as potentials.

    Row ``r`` of ``potentials`` is a vector whose pairwise differences are the
    matrix of source ``sources[r]``; ``-1`` marks an external source.
    """

    frame: BoundaryFrame
    sources: np.ndarray
    potentials: np.ndarray
    meta: dict = field(default_factory=dict)

    def __len__(self):
        return len(self.sources)

    def matrix(self, r: int) -> DDFMatrix:
        return DDFMatrix.from_potential(self.frame, int(self.sources[r]), self.potentials[r])

    def matrices(self) -> list[DDFMatrix]:
        return [self.matrix(r) for r in range(len(self))]

    @classmethod
    def from_fields(cls, fields: FieldStack, frame: BoundaryFrame, sources: Sequence[int] | None = None,
                    **meta) -> "DDFArchive":
        rows = np.array([fields.row(s) for s in frame.samples])
        if sources is None:
            sources = np.arange(fields.mesh.n_vertices)
        sources = np.asarray(sources, dtype=np.int64)
        pot = fields.dist[rows[None, :], sources[:, None]]
        return cls(frame, sources, pot, dict(meta))

    def write(self, path: str | Path) -> None:
        k, m = len(self.frame), len(self)
        with open(path, "wb") as fh:
            fh.write(_DDF1)
            fh.write(struct.pack("<QQ", k, m))
            fh.write(np.asarray(self.frame.samples, dtype="<u8").tobytes())
            fh.write(np.asarray(self.sources, dtype="<i8").tobytes())
            for r in range(m):
                p = self.potentials[r]
                fh.write(np.asarray(p[:, None] - p[None, :], dtype="<f8").tobytes())

    @classmethod
    def read(cls, path: str | Path, frame: BoundaryFrame | None = None, check_cocycle: bool = True,
             mesh: Mesh | None = None) -> "DDFArchive":
        """Read a DDF1 file. Matrices must be differences of one vector.

        The frame is rebuilt from ``mesh`` when given (arc positions need it),
        otherwise positions are sample ranks.
        """
        data = Path(path).read_bytes()
        if data[:4] != _DDF1:
            raise ValueError("bad magic: not a DDF1 archive")
        if len(data) < 20:
            raise ValueError("truncated DDF1 header")
        k, m = struct.unpack("<QQ", data[4:20])
        need = 20 + 8 * k + 8 * m + 8 * m * k * k
        if len(data) != need:
            raise ValueError(f"truncated DDF1 payload ({len(data)} of {need} bytes)")
        samples = np.frombuffer(data, "<u8", k, 20).astype(np.int64)
        sources = np.frombuffer(data, "<i8", m, 20 + 8 * k).astype(np.int64)
        vals = np.frombuffer(data, "<f8", m * k * k, 20 + 8 * k + 8 * m).reshape(m, k, k)
        pot = vals[:, :, 0].copy()
        if check_cocycle:
            recon = pot[:, :, None] - pot[:, None, :]
            scale = max(1.0, float(np.max(np.abs(vals)))) if vals.size else 1.0
            if vals.size and np.max(np.abs(recon - vals)) > 1e-12 * scale:
                raise ValueError("DDF1 matrices are not differences of a single vector")
        if frame is None:
            if mesh is not None:
                full = make_frame(mesh)
                pos = {int(s): i for i, s in enumerate(full.samples)}
                sel = np.array([pos[int(s)] for s in samples])
                frame = BoundaryFrame(samples, full.arc_positions[sel], full.loop_ids[sel], full.loop_lengths)
            else:
                frame = BoundaryFrame(samples, np.arange(k, dtype=float), np.zeros(k, dtype=np.int64),
                                      np.array([float(k)]))
        elif not np.array_equal(frame.samples, samples):
            raise FrameMismatch("archive frame differs from the supplied frame")
        return cls(frame, sources, pot)


def _probe_order(k: int, n_probe: int) -> np.ndarray:
    # evenly spread columns first, then the rest
    probe = np.unique(np.linspace(0, k - 1, min(n_probe, k)).round().astype(np.int64))
    rest = np.setdiff1d(np.arange(k, dtype=np.int64), probe)
    return np.concatenate([probe, rest]), len(probe)


def _key_pairs(k: int, n_keys: int) -> tuple[np.ndarray, np.ndarray]:
    # column pairs half a frame apart, spread over the frame
    a = np.unique(np.linspace(0, k - 1, min(n_keys, k)).round().astype(np.int64))
    return a, (a + k // 2) % k


@dataclass(frozen=True, eq=False)
class KeyIndex:
    """Sorted column-pair keys of a data archive, reusable across queries."""

    data: DDFArchive
    keys_i: np.ndarray
    keys_j: np.ndarray
    skeys: np.ndarray
    sidx: np.ndarray

    @classmethod
    def build(cls, data: DDFArchive, n_keys: int = 12) -> "KeyIndex":
        D = data.potentials
        ki, kj = _key_pairs(len(data.frame), n_keys)
        keys = (D[:, ki] - D[:, kj]).T
        sidx = np.ascontiguousarray(np.argsort(keys, axis=1, kind="stable"))
        skeys = np.ascontiguousarray(np.take_along_axis(keys, sidx, axis=1))
        return cls(data, ki, kj, skeys, sidx)


def match_archives(queries: DDFArchive, data: DDFArchive, *, exclude_radius: float | None = None,
                   positions: np.ndarray | None = None, n_probe: int = 24, n_keys: int = 12,
                   n_seed: int = 64, index: KeyIndex | None = None) -> dict[str, np.ndarray]:
    """Exact sup-distance nearest neighbours of every query potential in ``data``.

    For matrices that are differences of one vector, the sup distance equals
    the oscillation (max - min) of the difference of potentials, and any
    single entry |D_q(y_i, y_j) - D_d(y_i, y_j)| bounds it from below. Data
    rows are indexed by ``n_keys`` such entries; for each query only the rows
    whose key lies within the current best value can win, and those are
    scanned with early abandoning. The result is the exact argmin (ties:
    smallest index).

    When ``positions`` (chart coordinates of data sources) and
    ``exclude_radius`` are given, the runner-up is the best candidate farther
    than ``exclude_radius`` from the winner (for the ambiguity ratio test).
    ``index`` (a KeyIndex of ``data``) skips rebuilding the sorted keys.
    """
    _same_frame(queries.frame, data.frame)
    if len(data) == 0 or len(queries) == 0:
        raise ValueError("empty archive")
    k = len(data.frame)
    order, _ = _probe_order(k, n_probe)
    D = np.ascontiguousarray(data.potentials, dtype=float)
    Q = np.ascontiguousarray(queries.potentials, dtype=float)
    if index is None or index.data is not data:
        index = KeyIndex.build(data, n_keys)
    ki, kj, skeys, sidx = index.keys_i, index.keys_j, index.skeys, index.sidx
    slack = 1e-12 * max(1.0, float(np.abs(D).max()), float(np.abs(Q).max()))
    use_excl = positions is not None and exclude_radius is not None
    pos = np.ascontiguousarray(positions if use_excl else np.zeros((len(data), 2)), dtype=float)
    best, best_d, second = _kernels.sup_nearest(
        Q, D, order, ki, kj, skeys, sidx, int(n_seed), pos, float(exclude_radius) if use_excl else 0.0, slack)
    return {"index": best, "distance": best_d, "second": second}


def bilipschitz_profile(fields: FieldStack, frame: BoundaryFrame, sample_pairs: int, *, rho: float = 0.2,
                        seed: int = 0, interior_only: bool = True) -> np.ndarray:
    """Rows ``(d(x, y), sup_dist(D_x, D_y) / d(x, y))`` for random pairs with
    0 < d(x, y) <= rho.

    ``fields`` are sourced at the frame samples; pair distances come from
    additional fields of the same solver sourced at the pair's first vertex.
    """
    mesh = fields.mesh
    rng = np.random.default_rng(seed)
    pool = np.flatnonzero(~mesh.boundary_flags) if interior_only else np.arange(mesh.n_vertices)
    rows = np.array([fields.row(s) for s in frame.samples])
    n_sources = max(1, int(math.ceil(sample_pairs / 20)))
    xs = rng.choice(pool, size=n_sources, replace=False)
    fx = distance_fields(mesh, xs, fields.solver)
    out = []
    per = int(math.ceil(sample_pairs / n_sources))
    for r, x in enumerate(xs):
        near = pool[(fx.dist[r, pool] <= rho) & (pool != x)]
        if len(near) == 0:
            continue
        ys = rng.choice(near, size=min(per, len(near)), replace=False)
        px = fields.dist[rows, x]
        for y in ys:
            c = px - fields.dist[rows, y]
            d = fx.dist[r, y]
            out.append((d, (c.max() - c.min()) / d))
    return np.array(out[:sample_pairs])
