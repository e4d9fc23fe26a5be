"""Intra- and inter-modal relation graphs over multimodal node sets.

Two dependency kinds are built per mode pair: geographical proximity (a
thresholded Gaussian kernel over great-circle distance) and functional
similarity (clamped Pearson correlation of normalized demand histories).
Each ordered (target, source) mode direction gets a stack of row-normalized
adjacency matrices, one slice per dependency kind.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Mapping, Optional, Sequence

import numpy as np

from stmrgnn.errors import ContractError, DegenerateGeometryError, ValidationError

EARTH_RADIUS_M = 6_371_000.0

# Canonical dependency-kind order; index in this tuple is the stacking index.
KINDS = ("geo", "functional")


@dataclass
class NodeSet:
    """Ordered nodes of one mode; list order is the canonical index order."""

    mode_id: int
    node_ids: list[str]
    lat: np.ndarray
    lon: np.ndarray

    def __post_init__(self):
        self.lat = np.asarray(self.lat, dtype=np.float64)
        self.lon = np.asarray(self.lon, dtype=np.float64)
        n = len(self.node_ids)
        if n == 0:
            raise ContractError(f"mode {self.mode_id}: empty node set")
        if len(set(self.node_ids)) != n:
            dupes = sorted({i for i in self.node_ids if self.node_ids.count(i) > 1})
            raise ValidationError(
                f"mode {self.mode_id}: duplicate node ids {dupes}")
        if self.lat.shape != (n,) or self.lon.shape != (n,):
            raise ValidationError(f"mode {self.mode_id}: coordinate arrays must match node count {n}")
        if np.any(np.abs(self.lat) > 90.0):
            raise ValidationError(f"mode {self.mode_id}: latitude outside [-90, 90]")
        if np.any(np.abs(self.lon) > 180.0):
            raise ValidationError(f"mode {self.mode_id}: longitude outside [-180, 180]")

    @property
    def size(self) -> int:
        return len(self.node_ids)


@dataclass
class RelationGraph:
    """One weighted relation between a mode pair (m == n for intra-modal).

    ``adjacency`` holds the raw non-negative weights with rows indexed by
    mode ``mode_pair[0]`` and columns by ``mode_pair[1]``; ``normalized`` is
    its row-normalized form (the first-direction message weights).
    """

    mode_pair: tuple[int, int]
    kind: str
    adjacency: np.ndarray
    normalized: np.ndarray = field(default=None)  # type: ignore[assignment]

    def __post_init__(self):
        self.adjacency = np.asarray(self.adjacency, dtype=np.float64)
        if self.adjacency.ndim != 2:
            raise ContractError("adjacency must be a matrix")
        if np.any(self.adjacency < 0):
            raise ContractError("adjacency entries must be non-negative")
        if self.kind not in KINDS:
            raise ContractError(f"unknown dependency kind {self.kind!r}")
        if self.mode_pair[0] == self.mode_pair[1]:
            r, c = self.adjacency.shape
            if r != c:
                raise ContractError("intra-modal adjacency must be square")
        if self.normalized is None:
            self.normalized = row_normalize(self.adjacency)

    @property
    def intra(self) -> bool:
        return self.mode_pair[0] == self.mode_pair[1]


@dataclass
class RelationSet:
    """All relation graphs plus stacked normalized tensors per direction.

    ``stacked[(m, n)]`` has shape [u, N_m, N_n]: slice r holds the
    row-normalized weights used when nodes of mode m aggregate messages from
    mode n under dependency kind ``kinds[r]``.
    """

    kinds: tuple[str, ...]
    mode_ids: list[int]
    node_sets: dict[int, NodeSet]
    graphs: list[RelationGraph]
    stacked: dict[tuple[int, int], np.ndarray]
    warnings: list[str] = field(default_factory=list)

    @property
    def num_kinds(self) -> int:
        return len(self.kinds)

    @property
    def num_modes(self) -> int:
        return len(self.mode_ids)

    def graph(self, m: int, n: int, kind: str) -> RelationGraph:
        pair = (m, n) if (m, n) in {g.mode_pair for g in self.graphs} else (n, m)
        for g in self.graphs:
            if g.mode_pair == pair and g.kind == kind:
                return g
        raise KeyError((m, n, kind))

    def validate(self) -> None:
        u, k = self.num_kinds, self.num_modes
        intra = sum(1 for g in self.graphs if g.intra)
        inter = len(self.graphs) - intra
        if intra != u * k or inter != u * k * (k - 1) // 2:
            raise ContractError(
                f"relation cardinality wrong: {intra} intra / {inter} inter "
                f"for u={u}, k={k}")
        for (m, n), t in self.stacked.items():
            nm, nn = self.node_sets[m].size, self.node_sets[n].size
            if t.shape != (u, nm, nn):
                raise ContractError(f"stacked[{m},{n}] shape {t.shape} != ({u},{nm},{nn})")
            rows = t.sum(axis=2)
            ok = np.isclose(rows, 1.0, atol=1e-9) | (rows == 0.0)
            if not np.all(ok):
                raise ContractError(f"stacked[{m},{n}] has rows summing to neither 1 nor 0")
        for g in self.graphs:
            m, n = g.mode_pair
            r = self.kinds.index(g.kind)
            if not np.array_equal(self.stacked[(m, n)][r], g.normalized):
                raise ContractError(
                    f"stacked[{m},{n}][{g.kind}] differs from constituent graph")


def haversine_matrix(src: NodeSet, dst: NodeSet) -> np.ndarray:
    """Great-circle distances in meters, [N_src, N_dst]."""
    lat1 = np.radians(src.lat)[:, None]
    lat2 = np.radians(dst.lat)[None, :]
    dlat = lat2 - lat1
    dlon = np.radians(dst.lon)[None, :] - np.radians(src.lon)[:, None]
    h = np.sin(dlat / 2.0) ** 2 + np.cos(lat1) * np.cos(lat2) * np.sin(dlon / 2.0) ** 2
    return 2.0 * EARTH_RADIUS_M * np.arcsin(np.sqrt(np.clip(h, 0.0, 1.0)))


def build_geo_adjacency(src: NodeSet, dst: NodeSet, kappa_m: float,
                        sigma_m: Optional[float] = None) -> RelationGraph:
    """Gaussian-kernel distance weights with hard cutoff ``kappa_m``.

    Entry (i, j) is exp(-(d_ij / sigma)^2) when d_ij <= kappa_m and 0 past
    the cutoff. ``sigma_m=None`` uses the standard deviation of all
    src-to-dst pairwise distances.
    """
    if kappa_m <= 0:
        raise ContractError(f"distance cutoff must be positive, got {kappa_m}")
    d = haversine_matrix(src, dst)
    sigma = float(np.std(d)) if sigma_m is None else float(sigma_m)
    if sigma <= 0.0:
        raise DegenerateGeometryError(
            f"degenerate geometry between modes {src.mode_id} and {dst.mode_id}: "
            "pairwise distance spread is zero")
    weights = np.where(d <= kappa_m, np.exp(-((d / sigma) ** 2)), 0.0)
    return RelationGraph((src.mode_id, dst.mode_id), "geo", weights)


def build_functional_adjacency(src_mode: int, src_series: np.ndarray,
                               dst_mode: int, dst_series: np.ndarray
                               ) -> tuple[RelationGraph, int]:
    """Clamped Pearson correlation of per-node demand histories.

    Series are [N, L] with L >= 2, already normalized per mode. Negative
    correlations clamp to 0 so row normalization stays a convex combination.
    Zero-variance nodes contribute 0 everywhere (1 on the intra-modal
    diagonal); the count of such nodes is returned alongside the graph.
    """
    src_series = np.asarray(src_series, dtype=np.float64)
    dst_series = np.asarray(dst_series, dtype=np.float64)
    if src_series.ndim != 2 or dst_series.ndim != 2:
        raise ContractError("demand series must be [nodes, steps] matrices")
    if src_series.shape[1] != dst_series.shape[1]:
        raise ContractError(
            f"series lengths differ: {src_series.shape[1]} vs {dst_series.shape[1]}")
    if src_series.shape[1] < 2:
        raise ContractError("functional similarity needs at least 2 time steps")

    def standardize(s):
        centered = s - s.mean(axis=1, keepdims=True)
        std = centered.std(axis=1)
        flat = std == 0.0
        safe = np.where(flat, 1.0, std)
        return centered / safe[:, None], flat

    zs, flat_s = standardize(src_series)
    zd, flat_d = standardize(dst_series)
    corr = zs @ zd.T / src_series.shape[1]
    corr[flat_s, :] = 0.0
    corr[:, flat_d] = 0.0
    weights = np.clip(corr, 0.0, 1.0)
    intra = src_mode == dst_mode
    if intra:
        np.fill_diagonal(weights, 1.0)
    warnings = int(flat_s.sum()) + (0 if intra else int(flat_d.sum()))
    return RelationGraph((src_mode, dst_mode), "functional", weights), warnings


def row_normalize(adjacency: np.ndarray) -> np.ndarray:
    """Divide each row by its sum; all-zero rows stay all-zero."""
    adjacency = np.asarray(adjacency, dtype=np.float64)
    if np.any(adjacency < 0):
        raise ContractError("row_normalize requires non-negative entries")
    sums = adjacency.sum(axis=1, keepdims=True)
    safe = np.where(sums == 0.0, 1.0, sums)
    return adjacency / safe


@dataclass
class GeoConfig:
    """Geographic-kernel parameters; ``sigma_m=None`` means auto."""

    kappa_m: float = 1500.0
    sigma_m: Optional[float] = None


def _normalized_training_series(values: np.ndarray, train_steps: int) -> np.ndarray:
    """Min-max normalize each channel over the training span, then concatenate
    the channels into one series per node: [N, 2*train_steps]."""
    train = values[:train_steps]  # [steps, N, 2]
    lo = train.min(axis=(0, 1))
    hi = train.max(axis=(0, 1))
    scale = np.where(hi > lo, hi - lo, 1.0)
    norm = (train - lo) / scale
    return norm.transpose(1, 2, 0).reshape(train.shape[1], -1)


def assemble_relations(node_sets: Mapping[int, NodeSet], panels: Mapping[int, "object"],
                       geo: GeoConfig, train_steps: Optional[int] = None,
                       kinds: Sequence[str] = KINDS) -> RelationSet:
    """Build every intra- and inter-modal relation graph and stack them.

    ``panels`` maps mode id to any object with a ``values`` array of shape
    [time, N, 2] (a DemandPanel works). Functional similarity is computed on
    the first ``train_steps`` steps only (all steps when None) so test data
    never leaks into the graph structure.
    """
    mode_ids = sorted(node_sets)
    if set(panels) != set(mode_ids):
        raise ContractError("node sets and demand panels must cover the same modes")
    warnings: list[str] = []
    if len(mode_ids) < 2:
        warnings.append("single-mode relation set: no inter-modal graphs")

    series = {}
    for m in mode_ids:
        values = np.asarray(panels[m].values, dtype=np.float64)
        if values.shape[1] != node_sets[m].size:
            raise ContractError(
                f"mode {m}: panel has {values.shape[1]} nodes, node set has "
                f"{node_sets[m].size}")
        steps = train_steps if train_steps is not None else values.shape[0]
        series[m] = _normalized_training_series(values, steps)

    kinds = tuple(kinds)
    graphs: list[RelationGraph] = []
    pairs = [(m, m) for m in mode_ids]
    pairs += [(m, n) for i, m in enumerate(mode_ids) for n in mode_ids[i + 1:]]
    for m, n in pairs:
        for kind in kinds:
            if kind == "geo":
                graphs.append(build_geo_adjacency(node_sets[m], node_sets[n],
                                                  geo.kappa_m, geo.sigma_m))
            elif kind == "functional":
                g, warn = build_functional_adjacency(m, series[m], n, series[n])
                if warn:
                    warnings.append(
                        f"functional ({m},{n}): {warn} zero-variance node series")
                graphs.append(g)
            else:
                raise ContractError(f"unknown dependency kind {kind!r}")

    stacked: dict[tuple[int, int], np.ndarray] = {}
    for m in mode_ids:
        for n in mode_ids:
            slices = []
            for kind in kinds:
                g = next(gr for gr in graphs
                         if gr.kind == kind and gr.mode_pair in ((m, n), (n, m)))
                if g.mode_pair == (m, n):
                    slices.append(g.normalized)
                else:
                    slices.append(row_normalize(g.adjacency.T))
            stacked[(m, n)] = np.stack(slices, axis=0)

    rs = RelationSet(kinds, mode_ids, dict(node_sets), graphs, stacked, warnings)
    rs.validate()
    return rs


def write_relation_csvs(relations: RelationSet, out_dir) -> list[Path]:
    """One CSV per relation graph: header row = destination node ids, first
    column = source node ids, cells = raw adjacency weights."""
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    written = []
    for g in relations.graphs:
        m, n = g.mode_pair
        name = (f"intra_m{m}_{g.kind}.csv" if g.intra
                else f"inter_m{m}_m{n}_{g.kind}.csv")
        path = out_dir / name
        src_ids = relations.node_sets[m].node_ids
        dst_ids = relations.node_sets[n].node_ids
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["source\\destination", *dst_ids])
            for i, sid in enumerate(src_ids):
                w.writerow([sid, *(repr(float(v)) for v in g.adjacency[i])])
        written.append(path)
    return written


def relation_summary(relations: RelationSet) -> list[dict]:
    """Per-relation stats: sparsity and row-sum checks on the normalized stack."""
    rows = []
    for (m, n), t in sorted(relations.stacked.items()):
        for r, kind in enumerate(relations.kinds):
            mat = t[r]
            sums = mat.sum(axis=1)
            zero_rows = int(np.sum(sums == 0.0))
            ok = np.all(np.isclose(sums, 1.0, atol=1e-9) | (sums == 0.0))
            rows.append({
                "target_mode": m,
                "source_mode": n,
                "kind": kind,
                "shape": f"{mat.shape[0]}x{mat.shape[1]}",
                "nonzero_frac": round(float(np.mean(mat > 0.0)), 6),
                "zero_rows": zero_rows,
                "row_sums_ok": bool(ok),
            })
    return rows
