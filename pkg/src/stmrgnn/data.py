"""CSV ingestion of demand panels and node metadata, plus a coupled-bimodal
synthetic generator for desk-scale experiments.

CSV schemas (all timestamps ISO-8601 UTC):
  nodes:  mode_id,node_id,lat,lon
  demand: mode_id,node_id,timestamp,inflow,outflow
"""

from __future__ import annotations

import csv
import json
from dataclasses import dataclass, field, asdict
from datetime import datetime, timedelta, timezone
from pathlib import Path
from typing import Mapping, Optional

import numpy as np

from stmrgnn.errors import ContractError, ValidationError
from stmrgnn.graphs import NodeSet, haversine_matrix


@dataclass
class DemandPanel:
    """Dense per-mode demand: values[t, i, c] with channels (inflow, outflow)."""

    mode_id: int
    timestamps: list[datetime]
    node_ids: list[str]
    values: np.ndarray

    def __post_init__(self):
        self.values = np.asarray(self.values, dtype=np.float64)
        t, n = len(self.timestamps), len(self.node_ids)
        if self.values.shape != (t, n, 2):
            raise ValidationError(
                f"mode {self.mode_id}: values shape {self.values.shape} != ({t},{n},2)")
        if np.any(self.values < 0):
            raise ValidationError(f"mode {self.mode_id}: negative demand values")
        if t < 2:
            raise ValidationError(f"mode {self.mode_id}: need at least 2 time steps")
        deltas = {self.timestamps[i + 1] - self.timestamps[i] for i in range(t - 1)}
        if len(deltas) != 1 or next(iter(deltas)).total_seconds() <= 0:
            raise ValidationError(
                f"mode {self.mode_id}: timestamps must be strictly increasing and "
                "uniformly spaced")

    @property
    def num_steps(self) -> int:
        return len(self.timestamps)

    @property
    def num_nodes(self) -> int:
        return len(self.node_ids)

    @property
    def interval_seconds(self) -> int:
        return int((self.timestamps[1] - self.timestamps[0]).total_seconds())

    @property
    def slots_per_day(self) -> int:
        if 86400 % self.interval_seconds != 0:
            raise ValidationError(
                f"interval of {self.interval_seconds}s does not divide a day")
        return 86400 // self.interval_seconds

    def slot_of(self, ts: datetime) -> int:
        seconds = ts.hour * 3600 + ts.minute * 60 + ts.second
        return seconds // self.interval_seconds


def _parse_timestamp(text: str, line: int) -> datetime:
    t = text.strip()
    if t.endswith("Z"):
        t = t[:-1] + "+00:00"
    try:
        ts = datetime.fromisoformat(t)
    except ValueError as e:
        raise ValidationError(f"line {line}: bad timestamp {text!r}") from e
    if ts.tzinfo is None:
        ts = ts.replace(tzinfo=timezone.utc)
    return ts.astimezone(timezone.utc)


def format_timestamp(ts: datetime) -> str:
    return ts.astimezone(timezone.utc).strftime("%Y-%m-%dT%H:%M:%SZ")


def load_nodes_csv(path) -> dict[int, NodeSet]:
    """Parse node metadata grouped by mode; canonical order = file order."""
    path = Path(path)
    header = ["mode_id", "node_id", "lat", "lon"]
    per_mode: dict[int, list[tuple[str, float, float]]] = {}
    seen: set[tuple[int, str]] = set()
    with open(path, newline="") as fh:
        reader = csv.reader(fh)
        first = next(reader, None)
        if first is None or [c.strip() for c in first] != header:
            raise ValidationError(f"{path}: expected header {','.join(header)}")
        for lineno, row in enumerate(reader, start=2):
            if not row or all(not c.strip() for c in row):
                continue
            if len(row) != 4:
                raise ValidationError(f"{path} line {lineno}: expected 4 fields")
            try:
                mode = int(row[0])
                lat = float(row[2])
                lon = float(row[3])
            except ValueError as e:
                raise ValidationError(f"{path} line {lineno}: {e}") from e
            node = row[1].strip()
            if not node:
                raise ValidationError(f"{path} line {lineno}: empty node_id")
            if (mode, node) in seen:
                raise ValidationError(
                    f"{path} line {lineno}: duplicate node {node!r} in mode {mode}")
            seen.add((mode, node))
            per_mode.setdefault(mode, []).append((node, lat, lon))
    if not per_mode:
        raise ValidationError(f"{path}: no node rows")
    out = {}
    for mode, rows in per_mode.items():
        out[mode] = NodeSet(mode,
                            [r[0] for r in rows],
                            np.array([r[1] for r in rows]),
                            np.array([r[2] for r in rows]))
    return out


@dataclass
class LoadReport:
    """Warnings from demand ingestion: zero-filled missing cells per mode."""

    missing_cells: dict[int, int] = field(default_factory=dict)

    @property
    def total_missing(self) -> int:
        return sum(self.missing_cells.values())


def load_demand_csv(path, node_sets: Mapping[int, NodeSet]
                    ) -> tuple[dict[int, DemandPanel], LoadReport]:
    """Parse demand rows into dense panels on a shared uniform time grid.

    Missing (node, timestamp) cells are zero-filled and counted; negative
    demand, unknown nodes, and grid gaps are errors.
    """
    path = Path(path)
    header = ["mode_id", "node_id", "timestamp", "inflow", "outflow"]
    records: list[tuple[int, str, datetime, float, float]] = []
    with open(path, newline="") as fh:
        reader = csv.reader(fh)
        first = next(reader, None)
        if first is None or [c.strip() for c in first] != header:
            raise ValidationError(f"{path}: expected header {','.join(header)}")
        for lineno, row in enumerate(reader, start=2):
            if not row or all(not c.strip() for c in row):
                continue
            if len(row) != 5:
                raise ValidationError(f"{path} line {lineno}: expected 5 fields")
            try:
                mode = int(row[0])
                inflow = float(row[3])
                outflow = float(row[4])
            except ValueError as e:
                raise ValidationError(f"{path} line {lineno}: {e}") from e
            node = row[1].strip()
            if mode not in node_sets:
                raise ValidationError(f"{path} line {lineno}: unknown mode {mode}")
            if node not in node_sets[mode].node_ids:
                raise ValidationError(
                    f"{path} line {lineno}: unknown node {node!r} for mode {mode}")
            if inflow < 0 or outflow < 0:
                raise ValidationError(f"{path} line {lineno}: negative demand")
            records.append((mode, node, _parse_timestamp(row[2], lineno), inflow, outflow))
    if not records:
        raise ValidationError(f"{path}: no demand rows")

    grid = sorted({r[2] for r in records})
    if len(grid) < 2:
        raise ValidationError(f"{path}: need at least 2 distinct timestamps")
    deltas = [grid[i + 1] - grid[i] for i in range(len(grid) - 1)]
    step = min(deltas)
    for i, d in enumerate(deltas):
        if d != step:
            missing = grid[i] + step
            raise ValidationError(
                f"{path}: non-uniform time grid; first missing interval at "
                f"{format_timestamp(missing)}")
    t_index = {ts: i for i, ts in enumerate(grid)}

    panels = {}
    report = LoadReport()
    for mode, ns in node_sets.items():
        n_index = {nid: i for i, nid in enumerate(ns.node_ids)}
        values = np.full((len(grid), ns.size, 2), np.nan)
        for rmode, node, ts, inflow, outflow in records:
            if rmode != mode:
                continue
            values[t_index[ts], n_index[node]] = (inflow, outflow)
        missing = int(np.isnan(values[:, :, 0]).sum())
        report.missing_cells[mode] = missing
        values = np.nan_to_num(values, nan=0.0)
        panels[mode] = DemandPanel(mode, list(grid), list(ns.node_ids), values)
    return panels, report


def write_nodes_csv(path, node_sets: Mapping[int, NodeSet]) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["mode_id", "node_id", "lat", "lon"])
        for mode in sorted(node_sets):
            ns = node_sets[mode]
            for i, nid in enumerate(ns.node_ids):
                w.writerow([mode, nid, repr(float(ns.lat[i])), repr(float(ns.lon[i]))])


def write_demand_csv(path, panels: Mapping[int, DemandPanel]) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["mode_id", "node_id", "timestamp", "inflow", "outflow"])
        for mode in sorted(panels):
            p = panels[mode]
            for t, ts in enumerate(p.timestamps):
                stamp = format_timestamp(ts)
                for i, nid in enumerate(p.node_ids):
                    w.writerow([mode, nid, stamp,
                                repr(float(p.values[t, i, 0])),
                                repr(float(p.values[t, i, 1]))])


# ---------------------------------------------------------------------------
# synthetic coupled-bimodal generator


@dataclass
class SyntheticModeSpec:
    n_nodes: int
    extent_m: float = 4000.0


@dataclass
class SyntheticSpec:
    """Two-mode generator: stations (mode 1) drive nearby zones (mode 2).

    Mode-1 demand is seasonal sinusoids plus a shared AR(1) latent factor and
    node noise. Mode-2 blends its own such signal with the lagged neighborhood
    average of realized mode-1 demand, weighted by ``coupling_strength``.
    """

    mode1: SyntheticModeSpec = field(default_factory=lambda: SyntheticModeSpec(20))
    mode2: SyntheticModeSpec = field(default_factory=lambda: SyntheticModeSpec(10))
    length: int = 2000
    seed: int = 0
    interval_hours: int = 4
    start: str = "2024-01-01T00:00:00Z"
    base_level: float = 40.0
    daily_amplitude: float = 20.0
    weekly_amplitude: float = 4.0
    phase_jitter: float = 0.5
    amp_jitter: float = 0.2
    latent_std: float = 6.0
    latent_rho: float = 0.8
    noise_std: float = 3.0
    coupling_lag: int = 1
    coupling_strength: float = 0.8
    coupling_radius_m: float = 900.0
    obs_noise_std: float = 4.0

    def validate(self) -> None:
        if not 0.0 <= self.coupling_strength <= 1.0:
            raise ContractError("coupling_strength must lie in [0, 1]")
        if self.length < 20:
            raise ContractError("synthetic length must exceed the window plus margin")
        if self.coupling_lag < 0:
            raise ContractError("coupling lag must be non-negative")
        if 24 % self.interval_hours != 0:
            raise ContractError("interval_hours must divide 24")
        if self.mode1.n_nodes < 1 or self.mode2.n_nodes < 1:
            raise ContractError("each mode needs at least one node")


@dataclass
class CouplingRecord:
    """Ground truth of the generated cross-mode dependency."""

    lag: int
    strength: float
    radius_m: float
    neighbors: dict[str, list[str]]  # mode-2 node id -> coupled mode-1 node ids

    def to_json(self) -> str:
        return json.dumps(asdict(self), indent=2, sort_keys=True)


_CENTER_LAT, _CENTER_LON = 40.75, -73.98


def _scatter_coords(rng: np.random.Generator, n: int, extent_m: float
                    ) -> tuple[np.ndarray, np.ndarray]:
    dlat = extent_m / 111_320.0
    dlon = extent_m / (111_320.0 * np.cos(np.radians(_CENTER_LAT)))
    lat = _CENTER_LAT + rng.uniform(-dlat / 2, dlat / 2, size=n)
    lon = _CENTER_LON + rng.uniform(-dlon / 2, dlon / 2, size=n)
    return lat, lon


def _ar1(rng: np.random.Generator, length: int, rho: float, marginal_std: float
         ) -> np.ndarray:
    x = np.empty(length)
    x[0] = rng.normal(0.0, marginal_std)
    innov_std = marginal_std * np.sqrt(max(1.0 - rho * rho, 0.0))
    shocks = rng.normal(0.0, innov_std, size=length)
    for t in range(1, length):
        x[t] = rho * x[t - 1] + shocks[t]
    return x


def _seasonal_block(rng: np.random.Generator, spec: SyntheticSpec, n: int,
                    steps: int) -> np.ndarray:
    """Per-node, per-channel seasonal + latent + noise signal, [steps, n, 2]."""
    per_day = 24 // spec.interval_hours
    per_week = 7 * per_day
    t = np.arange(steps)
    latent = _ar1(rng, steps, spec.latent_rho, spec.latent_std)
    out = np.empty((steps, n, 2))
    mode_phase = rng.uniform(0.0, 2 * np.pi, size=2)
    for i in range(n):
        for c in range(2):
            phase_d = mode_phase[c] + rng.normal(0.0, spec.phase_jitter)
            phase_w = rng.uniform(0.0, 2 * np.pi)
            amp = 1.0 + rng.uniform(-spec.amp_jitter, spec.amp_jitter)
            signal = (spec.base_level
                      + amp * spec.daily_amplitude * np.sin(2 * np.pi * t / per_day + phase_d)
                      + amp * spec.weekly_amplitude * np.sin(2 * np.pi * t / per_week + phase_w)
                      + latent
                      + rng.normal(0.0, spec.noise_std, size=steps))
            out[:, i, c] = signal
    return out


def generate_synthetic(spec: SyntheticSpec
                       ) -> tuple[dict[int, NodeSet], dict[int, DemandPanel], CouplingRecord]:
    """Deterministic per seed; returns node sets, panels, and the ground truth."""
    spec.validate()
    rng = np.random.default_rng(spec.seed)
    lat1, lon1 = _scatter_coords(rng, spec.mode1.n_nodes, spec.mode1.extent_m)
    lat2, lon2 = _scatter_coords(rng, spec.mode2.n_nodes, spec.mode2.extent_m)
    ids1 = [f"s{i + 1:02d}" for i in range(spec.mode1.n_nodes)]
    ids2 = [f"z{i + 1:02d}" for i in range(spec.mode2.n_nodes)]
    nodes = {
        1: NodeSet(1, ids1, lat1, lon1),
        2: NodeSet(2, ids2, lat2, lon2),
    }

    lag = spec.coupling_lag
    raw1 = np.clip(_seasonal_block(rng, spec, spec.mode1.n_nodes, spec.length + lag), 0.0, None)
    own2 = _seasonal_block(rng, spec, spec.mode2.n_nodes, spec.length + lag)[lag:]

    dist = haversine_matrix(nodes[2], nodes[1])  # [n2, n1]
    neighbors: dict[str, list[str]] = {}
    nb_idx = []
    for j in range(spec.mode2.n_nodes):
        idx = np.flatnonzero(dist[j] <= spec.coupling_radius_m)
        if idx.size == 0:
            idx = np.array([int(np.argmin(dist[j]))])  # nearest-station fallback
        nb_idx.append(idx)
        neighbors[ids2[j]] = [ids1[i] for i in idx]

    kappa = spec.coupling_strength
    values2 = np.empty((spec.length, spec.mode2.n_nodes, 2))
    eps = rng.normal(0.0, spec.obs_noise_std, size=values2.shape)
    for j, idx in enumerate(nb_idx):
        # panel step tau uses mode-1 at panel step tau-lag == raw step tau
        coupled = raw1[:spec.length, idx, :].mean(axis=1)
        values2[:, j, :] = (1.0 - kappa) * own2[:, j, :] + kappa * coupled + eps[:, j, :]
    values2 = np.clip(values2, 0.0, None)
    values1 = raw1[lag:]

    start = _parse_timestamp(spec.start, 0)
    step = timedelta(hours=spec.interval_hours)
    stamps = [start + i * step for i in range(spec.length)]

    panels = {
        1: DemandPanel(1, stamps, ids1, values1),
        2: DemandPanel(2, stamps, ids2, values2),
    }
    record = CouplingRecord(lag, kappa, spec.coupling_radius_m, neighbors)
    return nodes, panels, record


def deseasonalize(panel: DemandPanel) -> np.ndarray:
    """Subtract each node/channel's weekly seasonal profile.

    The profile is the mean per slot-of-week (day-of-week x time-of-day), so
    any daily- or weekly-periodic deterministic component is removed and only
    stochastic structure remains.
    """
    spd = panel.slots_per_day
    slots = np.array([ts.weekday() * spd + panel.slot_of(ts)
                      for ts in panel.timestamps])
    out = panel.values.copy()
    for s in np.unique(slots):
        sel = slots == s
        out[sel] -= panel.values[sel].mean(axis=0)
    return out


def coupling_lag_correlation(panels: Mapping[int, DemandPanel], record: CouplingRecord,
                             seasonal_adjust: bool = True) -> np.ndarray:
    """Pearson r between each mode-2 series and its lagged mode-1 neighborhood
    average, per (node, channel). Seasonal adjustment removes the shared
    time-of-day profile so the statistic reflects stochastic coupling only.
    """
    p1, p2 = panels[1], panels[2]
    x1 = deseasonalize(p1) if seasonal_adjust else p1.values
    x2 = deseasonalize(p2) if seasonal_adjust else p2.values
    lag = record.lag
    idx1 = {nid: i for i, nid in enumerate(p1.node_ids)}
    rs = np.zeros((p2.num_nodes, 2))
    for j, nid in enumerate(p2.node_ids):
        cols = [idx1[s] for s in record.neighbors[nid]]
        nb = x1[:, cols, :].mean(axis=1)
        for c in range(2):
            a = x2[lag:, j, c]
            b = nb[:x1.shape[0] - lag, c]
            if a.std() == 0 or b.std() == 0:
                rs[j, c] = 0.0
            else:
                rs[j, c] = float(np.corrcoef(a, b)[0, 1])
    return rs
