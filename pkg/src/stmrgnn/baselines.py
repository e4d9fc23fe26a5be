"""Historical-average and per-node linear-regression baselines.

Both consume the same window/target construction as the learned model and
feed the same metric path, so comparisons differ only in the predictor.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from datetime import datetime
from typing import Optional

import numpy as np

from stmrgnn.data import DemandPanel
from stmrgnn.errors import ContractError
from stmrgnn.training import SplitSpec, make_windows


@dataclass
class HAModel:
    """Mean training demand per (slot, day-type, node, channel).

    Day-type 0 is Monday-Friday, 1 is the weekend. Empty buckets fall back
    to the node's global training mean.
    """

    bucket_mean: np.ndarray      # [slots, 2, N, 2]
    bucket_count: np.ndarray     # [slots, 2]
    global_mean: np.ndarray      # [N, 2]
    slots_per_day: int
    fallback_buckets: int = 0


def _daytype(ts: datetime) -> int:
    return 1 if ts.weekday() >= 5 else 0


def ha_fit(panel: DemandPanel, train_end: int) -> HAModel:
    slots = panel.slots_per_day
    if train_end < 7 * slots:
        raise ContractError(
            f"mode {panel.mode_id}: historical average needs a full week of "
            f"training data ({7 * slots} steps), got {train_end}")
    n = panel.num_nodes
    sums = np.zeros((slots, 2, n, 2))
    counts = np.zeros((slots, 2), dtype=int)
    for t in range(train_end):
        ts = panel.timestamps[t]
        s, d = panel.slot_of(ts), _daytype(ts)
        sums[s, d] += panel.values[t]
        counts[s, d] += 1
    global_mean = panel.values[:train_end].mean(axis=0)
    means = np.empty_like(sums)
    fallback = 0
    for s in range(slots):
        for d in range(2):
            if counts[s, d] > 0:
                means[s, d] = sums[s, d] / counts[s, d]
            else:
                means[s, d] = global_mean
                fallback += 1
    return HAModel(means, counts, global_mean, slots, fallback)


def ha_predict(model: HAModel, timestamps: list[datetime]) -> np.ndarray:
    out = np.empty((len(timestamps),) + model.global_mean.shape)
    for i, ts in enumerate(timestamps):
        seconds = ts.hour * 3600 + ts.minute * 60 + ts.second
        slot = seconds // (86400 // model.slots_per_day)
        out[i] = model.bucket_mean[slot, _daytype(ts)]
    return out


def ha_fit_predict(panel: DemandPanel, split: SplitSpec, window: int
                   ) -> tuple[np.ndarray, np.ndarray, int]:
    """Predictions on the test targets: (preds, targets, fallback count)."""
    train_end, val_end = split.boundaries(panel.num_steps)
    model = ha_fit(panel, train_end)
    test = make_windows({panel.mode_id: panel.values}, window,
                        val_end, panel.num_steps)
    stamps = [panel.timestamps[t] for t in test.target_steps]
    preds = ha_predict(model, stamps)
    return preds, test.targets[panel.mode_id], model.fallback_buckets


@dataclass
class LRModel:
    """Per-(node, channel) ordinary least squares on the window lags.

    ``coef[i, c]`` has length window+1: lag weights (oldest step first)
    followed by the intercept. Nodes whose normal equations stay singular
    even with ridge jitter fall back to the HA predictor.
    """

    coef: np.ndarray                 # [N, 2, window + 1]
    window: int
    ha_fallback_nodes: list[int] = field(default_factory=list)
    ha_model: Optional[HAModel] = None


def lr_fit(panel: DemandPanel, train_end: int, window: int,
           jitter: float = 1e-8) -> LRModel:
    train = make_windows({panel.mode_id: panel.values}, window, 0, train_end)
    if train.num < window + 2:
        raise ContractError(
            f"mode {panel.mode_id}: need at least {window + 2} training windows "
            f"per node, got {train.num}")
    x = train.inputs[panel.mode_id]   # [num, N, 2, T]
    y = train.targets[panel.mode_id]  # [num, N, 2]
    n = panel.num_nodes
    coef = np.zeros((n, 2, window + 1))
    fallback: list[int] = []
    eye = np.eye(window + 1) * jitter
    for i in range(n):
        node_ok = True
        for c in range(2):
            design = np.column_stack([x[:, i, c, :], np.ones(train.num)])
            gram = design.T @ design + eye
            rhs = design.T @ y[:, i, c]
            try:
                beta = np.linalg.solve(gram, rhs)
            except np.linalg.LinAlgError:
                node_ok = False
                break
            if not np.all(np.isfinite(beta)):
                node_ok = False
                break
            coef[i, c] = beta
        if not node_ok:
            fallback.append(i)
    model = LRModel(coef, window, fallback)
    if fallback:
        model.ha_model = ha_fit(panel, train_end)
    return model


def lr_predict(model: LRModel, inputs: np.ndarray,
               timestamps: Optional[list[datetime]] = None) -> np.ndarray:
    """inputs: [num, N, 2, window] -> predictions [num, N, 2]."""
    num, n, _, w = inputs.shape
    if w != model.window:
        raise ContractError(f"expected window {model.window}, got {w}")
    lags = model.coef[:, :, :-1]
    intercept = model.coef[:, :, -1]
    preds = np.einsum("bnct,nct->bnc", inputs, lags) + intercept[None]
    if model.ha_fallback_nodes:
        if timestamps is None or model.ha_model is None:
            raise ContractError("HA fallback requires target timestamps")
        ha = ha_predict(model.ha_model, timestamps)
        preds[:, model.ha_fallback_nodes] = ha[:, model.ha_fallback_nodes]
    return preds


def lr_fit_predict(panel: DemandPanel, split: SplitSpec, window: int
                   ) -> tuple[np.ndarray, np.ndarray, int]:
    """Predictions on the test targets: (preds, targets, fallback count)."""
    train_end, val_end = split.boundaries(panel.num_steps)
    model = lr_fit(panel, train_end, window)
    test = make_windows({panel.mode_id: panel.values}, window,
                        val_end, panel.num_steps)
    stamps = [panel.timestamps[t] for t in test.target_steps]
    preds = lr_predict(model, test.inputs[panel.mode_id], stamps)
    return preds, test.targets[panel.mode_id], len(model.ha_fallback_nodes)
