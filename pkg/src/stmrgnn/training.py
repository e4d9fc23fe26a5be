"""Normalization, chronological splits, windowing, the multi-task loss,
the training loop with early stopping, and metric computation."""

from __future__ import annotations

import time
from dataclasses import dataclass, field
from typing import Mapping, Optional

import numpy as np

from stmrgnn.autodiff import (
    AdamState,
    Tape,
    Tensor,
    absolute,
    adam_step,
    backward,
    mean,
    mul,
    sqrt,
    sub,
    tensor_sum,
    zero_grads,
)
from stmrgnn.data import DemandPanel
from stmrgnn.errors import ConfigError, ContractError, NumericError, TrainingDiverged


@dataclass
class SplitSpec:
    """Chronological train/validation/test fractions (contiguous, in order)."""

    train_frac: float = 0.6
    val_frac: float = 0.2
    test_frac: float = 0.2

    def __post_init__(self):
        total = self.train_frac + self.val_frac + self.test_frac
        if abs(total - 1.0) > 1e-9:
            raise ConfigError(f"split fractions must sum to 1, got {total}")
        if min(self.train_frac, self.val_frac, self.test_frac) < 0:
            raise ConfigError("split fractions must be non-negative")

    def boundaries(self, num_steps: int) -> tuple[int, int]:
        train_end = int(round(num_steps * self.train_frac))
        val_end = int(round(num_steps * (self.train_frac + self.val_frac)))
        return train_end, val_end


@dataclass
class Normalizer:
    """Per-mode, per-channel min-max scaling fit on the training split."""

    lo: dict[int, np.ndarray] = field(default_factory=dict)
    hi: dict[int, np.ndarray] = field(default_factory=dict)
    degenerate: list[tuple[int, int]] = field(default_factory=list)

    @classmethod
    def fit(cls, panels: Mapping[int, DemandPanel], train_end: int) -> "Normalizer":
        if train_end < 2:
            raise ContractError("training split needs at least 2 steps to fit scaling")
        norm = cls()
        for m, panel in panels.items():
            train = panel.values[:train_end]
            lo = train.min(axis=(0, 1))
            hi = train.max(axis=(0, 1))
            for c in range(2):
                if hi[c] == lo[c]:
                    norm.degenerate.append((m, c))
            norm.lo[m] = lo
            norm.hi[m] = hi
        return norm

    def _scale(self, m: int) -> np.ndarray:
        span = self.hi[m] - self.lo[m]
        return np.where(span > 0, span, 1.0)

    def transform(self, m: int, values: np.ndarray) -> np.ndarray:
        return (values - self.lo[m]) / self._scale(m)

    def inverse(self, m: int, values: np.ndarray) -> np.ndarray:
        return values * self._scale(m) + self.lo[m]


@dataclass
class TrainConfig:
    epochs: int = 500
    batch_size: int = 32
    learning_rate: float = 0.002
    dropout: float = 0.3
    weight_decay: float = 1e-5
    loss_weights: Optional[dict[int, float]] = None  # None -> uniform 1/k
    patience: int = 20
    seed: int = 0
    loss_norm: str = "l1"
    beta1: float = 0.9
    beta2: float = 0.999
    adam_eps: float = 1e-8

    def __post_init__(self):
        if self.epochs < 1 or self.batch_size < 1 or self.patience < 1:
            raise ConfigError("epochs, batch_size and patience must be positive")
        if self.learning_rate <= 0:
            raise ConfigError("learning rate must be positive")
        if self.loss_norm not in ("l1", "l2"):
            raise ConfigError(f"loss_norm must be 'l1' or 'l2', got {self.loss_norm!r}")
        if self.loss_weights is not None:
            total = sum(self.loss_weights.values())
            if abs(total - 1.0) > 1e-9:
                raise ConfigError(f"loss weights must sum to 1, got {total}")
            if any(w < 0 for w in self.loss_weights.values()):
                raise ConfigError("loss weights must be non-negative")

    def weights_for(self, modes) -> dict[int, float]:
        if self.loss_weights is not None:
            if set(self.loss_weights) != set(modes):
                raise ConfigError("loss weights must cover exactly the data modes")
            return dict(self.loss_weights)
        return {m: 1.0 / len(modes) for m in modes}


@dataclass
class WindowSet:
    """Aligned sliding windows for one chronological segment."""

    inputs: dict[int, np.ndarray]     # mode -> [num, N, 2, T]
    targets: dict[int, np.ndarray]    # mode -> [num, N, 2]
    target_steps: np.ndarray          # panel step index of each target

    @property
    def num(self) -> int:
        return len(self.target_steps)


def make_windows(values: Mapping[int, np.ndarray], window: int,
                 start: int, end: int) -> WindowSet:
    """Stride-1 windows fully inside [start, end): inputs are steps
    [t-window, t) and the target is step t. Empty when the segment is too
    short (segment length must exceed the window)."""
    modes = sorted(values)
    seg_len = end - start
    num = max(seg_len - window, 0)
    inputs, targets = {}, {}
    for m in modes:
        v = values[m]
        n = v.shape[1]
        x = np.empty((num, n, 2, window))
        y = np.empty((num, n, 2))
        for i in range(num):
            t = start + window + i
            x[i] = v[t - window:t].transpose(1, 2, 0)
            y[i] = v[t]
        inputs[m] = x
        targets[m] = y
    steps = np.arange(start + window, start + window + num)
    return WindowSet(inputs, targets, steps)


def multimode_loss(predictions: Mapping[int, Tensor],
                   targets: Mapping[int, np.ndarray],
                   weights: Mapping[int, float], norm: str = "l1") -> Tensor:
    """Weighted sum over modes of per-node prediction error, batch-averaged.

    Each node contributes the norm of its 2-vector residual; per-mode sums
    are scaled by the mode weight. ``norm`` picks L1 (sum of absolute
    deviations) or L2 (Euclidean length of the residual pair).
    """
    total = None
    for m in sorted(predictions):
        pred = predictions[m]
        targ = targets[m]
        targ_data = targ.data if isinstance(targ, Tensor) else np.asarray(targ)
        if not np.all(np.isfinite(pred.data)):
            raise NumericError(f"mode {m}: non-finite predictions in loss")
        if pred.shape != targ_data.shape:
            raise ContractError(
                f"mode {m}: prediction shape {pred.shape} != target shape "
                f"{targ_data.shape}")
        diff = sub(pred, Tensor(targ_data))
        if norm == "l1":
            per_sample = tensor_sum(absolute(diff), axis=(1, 2))
        elif norm == "l2":
            sq = tensor_sum(mul(diff, diff), axis=2)       # [B, N]
            per_sample = tensor_sum(sqrt(sq), axis=1)      # [B]
        else:
            raise ConfigError(f"unknown loss norm {norm!r}")
        weighted = mul(per_sample, Tensor(np.float64(weights[m])))
        total = weighted if total is None else total + weighted
    return mean(total)


@dataclass
class EpochLog:
    epoch: int
    train_loss: float
    val_loss: float
    seconds: float


@dataclass
class TrainResult:
    log: list[EpochLog]
    best_epoch: int
    best_val_loss: float
    stopped_early: bool
    diverged: bool = False


def _eval_loss(model, windows: WindowSet, weights, norm, batch_size: int) -> float:
    total, count = 0.0, 0
    for lo in range(0, windows.num, batch_size):
        hi = min(lo + batch_size, windows.num)
        preds = model.forward({m: windows.inputs[m][lo:hi] for m in model.modes},
                              training=False)
        loss = multimode_loss(preds, {m: windows.targets[m][lo:hi]
                                      for m in model.modes}, weights, norm)
        total += loss.item() * (hi - lo)
        count += hi - lo
    return total / max(count, 1)


def train(model, train_windows: WindowSet, val_windows: WindowSet,
          config: TrainConfig) -> TrainResult:
    """Mini-batch Adam with per-epoch seeded shuffling and early stopping.

    Validation loss is computed without dropout after every epoch; the
    parameters with the best validation loss are restored before returning.
    A non-finite training loss restores the best parameters and raises
    :class:`TrainingDiverged` with the partial log attached.
    """
    if train_windows.num == 0 or val_windows.num == 0:
        raise ContractError("train and validation window sets must be nonempty")
    weights = config.weights_for(model.modes)
    params = model.parameters()
    state = AdamState(params, learning_rate=config.learning_rate,
                      beta1=config.beta1, beta2=config.beta2,
                      eps=config.adam_eps, weight_decay=config.weight_decay)

    log: list[EpochLog] = []
    best_val = np.inf
    best_epoch = 0
    best_snapshot = model.state_snapshot()
    since_best = 0
    stopped_early = False

    for epoch in range(1, config.epochs + 1):
        t0 = time.perf_counter()
        order = np.random.default_rng([config.seed, 2, epoch]).permutation(
            train_windows.num)
        epoch_loss, seen = 0.0, 0
        for lo in range(0, train_windows.num, config.batch_size):
            idx = order[lo:lo + config.batch_size]
            batch_in = {m: train_windows.inputs[m][idx] for m in model.modes}
            batch_tg = {m: train_windows.targets[m][idx] for m in model.modes}
            try:
                with Tape() as tape:
                    preds = model.forward(batch_in, training=True)
                    loss = multimode_loss(preds, batch_tg, weights, config.loss_norm)
                value = loss.item()
            except NumericError:
                value = np.nan
            if not np.isfinite(value):
                model.load_snapshot(best_snapshot)
                result = TrainResult(log, best_epoch, float(best_val),
                                     stopped_early=False, diverged=True)
                raise TrainingDiverged(
                    f"non-finite training loss at epoch {epoch}; "
                    f"restored epoch-{best_epoch} parameters", result)
            backward(loss, tape)
            adam_step(params, None, state)
            zero_grads(params)
            epoch_loss += value * len(idx)
            seen += len(idx)

        val_loss = _eval_loss(model, val_windows, weights, config.loss_norm,
                              max(config.batch_size, 128))
        log.append(EpochLog(epoch, epoch_loss / seen, val_loss,
                            time.perf_counter() - t0))
        if val_loss < best_val:
            best_val = val_loss
            best_epoch = epoch
            best_snapshot = model.state_snapshot()
            since_best = 0
        else:
            since_best += 1
            if since_best >= config.patience:
                stopped_early = True
                break

    model.load_snapshot(best_snapshot)
    return TrainResult(log, best_epoch, float(best_val), stopped_early)


# ---------------------------------------------------------------------------
# metrics


@dataclass
class ChannelMetrics:
    rmse: float
    mae: float
    r2: Optional[float]


@dataclass
class ModeMetrics:
    rmse: float
    mae: float
    r2: Optional[float]
    per_channel: dict[str, ChannelMetrics] = field(default_factory=dict)
    per_node_rmse: Optional[np.ndarray] = None
    per_node_mae: Optional[np.ndarray] = None


@dataclass
class Metrics:
    per_mode: dict[int, ModeMetrics] = field(default_factory=dict)


def _basic(pred: np.ndarray, true: np.ndarray) -> ChannelMetrics:
    err = pred - true
    rmse = float(np.sqrt(np.mean(err ** 2)))
    mae = float(np.mean(np.abs(err)))
    ss_tot = float(np.sum((true - true.mean()) ** 2))
    if ss_tot == 0.0:
        r2 = None
    else:
        r2 = float(1.0 - np.sum(err ** 2) / ss_tot)
    return ChannelMetrics(rmse, mae, r2)


def evaluate_metrics(predictions: Mapping[int, np.ndarray],
                     targets: Mapping[int, np.ndarray],
                     per_node: bool = False) -> Metrics:
    """RMSE / MAE / R^2 per mode on original-scale arrays [num, N, 2].

    Entries are flattened over (window, node, channel); R^2 is about the
    test-set mean and reported as None when targets have zero variance.
    """
    out = Metrics()
    for m in sorted(predictions):
        pred, true = np.asarray(predictions[m]), np.asarray(targets[m])
        if pred.shape != true.shape:
            raise ContractError(
                f"mode {m}: prediction shape {pred.shape} != target {true.shape}")
        overall = _basic(pred, true)
        mm = ModeMetrics(overall.rmse, overall.mae, overall.r2)
        for c, name in enumerate(("inflow", "outflow")):
            mm.per_channel[name] = _basic(pred[..., c], true[..., c])
        if per_node:
            err = pred - true
            mm.per_node_rmse = np.sqrt(np.mean(err ** 2, axis=(0, 2)))
            mm.per_node_mae = np.mean(np.abs(err), axis=(0, 2))
        out.per_mode[m] = mm
    return out


def evaluate_model(model, windows: WindowSet, normalizer: Normalizer,
                   per_node: bool = False, batch_size: int = 256
                   ) -> tuple[Metrics, dict[int, np.ndarray]]:
    """Predict on a window set, invert normalization, and score."""
    if windows.num == 0:
        raise ContractError("cannot evaluate on an empty window set")
    raw = model.predict(windows.inputs, batch_size=batch_size)
    preds = {m: normalizer.inverse(m, raw[m]) for m in raw}
    targets = {m: normalizer.inverse(m, windows.targets[m]) for m in raw}
    return evaluate_metrics(preds, targets, per_node=per_node), preds


def group_metrics(predictions: Mapping[int, np.ndarray],
                  targets: Mapping[int, np.ndarray],
                  groups: Mapping[int, Mapping[str, str]],
                  node_ids: Mapping[int, list],
                  ) -> dict[int, dict[str, ChannelMetrics]]:
    """Metrics per demand-intensity group ('high' / 'middle' / 'low')."""
    out: dict[int, dict[str, ChannelMetrics]] = {}
    for m in sorted(predictions):
        pred, true = np.asarray(predictions[m]), np.asarray(targets[m])
        ids = node_ids[m]
        out[m] = {}
        for label in ("high", "middle", "low"):
            sel = [i for i, nid in enumerate(ids) if groups[m][nid] == label]
            if sel:
                out[m][label] = _basic(pred[:, sel], true[:, sel])
    return out


def stratify_di_ds(panel: DemandPanel, train_end: int
                   ) -> tuple[dict[str, str], Optional[str]]:
    """Split nodes into demand-intensity thirds by mean training demand.

    Returns (node_id -> 'high' | 'middle' | 'low', warning). The top third by
    mean demand is 'high' (demand-intensive), the bottom third 'low'
    (demand-sparse); ties break by node order. Under 3 nodes everything is
    'middle'.
    """
    n = panel.num_nodes
    if n < 3:
        return {nid: "middle" for nid in panel.node_ids}, (
            f"mode {panel.mode_id}: fewer than 3 nodes, no DI/DS split")
    means = panel.values[:train_end].mean(axis=(0, 2))
    order = sorted(range(n), key=lambda i: (-means[i], i))
    third = n // 3
    groups = {}
    for rank, i in enumerate(order):
        if rank < third:
            groups[panel.node_ids[i]] = "high"
        elif rank >= n - third:
            groups[panel.node_ids[i]] = "low"
        else:
            groups[panel.node_ids[i]] = "middle"
    return groups, None
