"""Command-line entry point.

Subcommands: synth, build-graphs, train, evaluate, ablate, export-attention.
Every command resolves the configuration first, writes an echo of it to the
output directory, and emits all results as CSV files plus plain-text tables.
"""

from __future__ import annotations

import argparse
import csv
import sys
from pathlib import Path
from typing import Optional

import numpy as np

from stmrgnn import __version__
from stmrgnn.checkpoint import load_checkpoint
from stmrgnn.data import (
    format_timestamp,
    generate_synthetic,
    load_demand_csv,
    load_nodes_csv,
    write_demand_csv,
    write_nodes_csv,
)
from stmrgnn.errors import CheckpointError, ConfigError, STMRGNNError, TrainingDiverged
from stmrgnn.graphs import assemble_relations, relation_summary, write_relation_csvs
from stmrgnn.model import STMRGNN, ModelConfig
from stmrgnn.runconfig import RunConfig, echo_config, load_run_config
from stmrgnn.training import (
    Metrics,
    Normalizer,
    evaluate_metrics,
    evaluate_model,
    group_metrics,
    make_windows,
    stratify_di_ds,
    train,
)


def _write_csv(path, header: list[str], rows: list[list]) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(header)
        for row in rows:
            w.writerow([repr(float(v)) if isinstance(v, float) else v for v in row])


def _fmt(v, width=10) -> str:
    if v is None:
        return "n/a".rjust(width)
    return f"{v:.3f}".rjust(width)


def _metrics_rows(label: str, metrics: Metrics) -> list[list]:
    rows = []
    for m, mm in sorted(metrics.per_mode.items()):
        rows.append([label, m, "overall", mm.rmse, mm.mae,
                     mm.r2 if mm.r2 is not None else ""])
        for ch, cm in mm.per_channel.items():
            rows.append([label, m, ch, cm.rmse, cm.mae,
                         cm.r2 if cm.r2 is not None else ""])
    return rows


def _metrics_table(results: dict[str, Metrics], modes: list[int]) -> str:
    lines = []
    header = "Model".ljust(16)
    sub = " ".ljust(16)
    for m in modes:
        header += f"| Mode {m}".ljust(34)
        sub += "|" + "RMSE".rjust(10) + "MAE".rjust(11) + "R2".rjust(11) + " "
    lines.append(header.rstrip())
    lines.append(sub.rstrip())
    lines.append("-" * len(sub))
    for label, metrics in results.items():
        row = label.ljust(16)
        for m in modes:
            mm = metrics.per_mode[m]
            row += "|" + _fmt(mm.rmse) + _fmt(mm.mae, 11) + _fmt(mm.r2, 11) + " "
        lines.append(row.rstrip())
    return "\n".join(lines) + "\n"


def _load_inputs(cfg: RunConfig):
    node_sets = load_nodes_csv(cfg.nodes_path)
    panels, report = load_demand_csv(cfg.demand_path, node_sets)
    return node_sets, panels, report


def _prepare(cfg: RunConfig, node_sets, panels):
    """Shared pipeline front half: split, normalize, window, build graphs."""
    num_steps = panels[min(panels)].num_steps
    train_end, val_end = cfg.split.boundaries(num_steps)
    normalizer = Normalizer.fit(panels, train_end)
    values = {m: normalizer.transform(m, panels[m].values) for m in panels}
    windows = {
        "train": make_windows(values, cfg.window, 0, train_end),
        "val": make_windows(values, cfg.window, train_end, val_end),
        "test": make_windows(values, cfg.window, val_end, num_steps),
    }
    relations = assemble_relations(node_sets, panels, cfg.geo, train_steps=train_end)
    return relations, normalizer, windows, (train_end, val_end, num_steps)


def _model_config(cfg: RunConfig, relations) -> ModelConfig:
    return ModelConfig.for_relations(
        relations, window=cfg.window, blocks=cfg.blocks, kernel=cfg.kernel,
        tcn_in=cfg.tcn_in, tcn_out=cfg.tcn_out, mrgnn_out=cfg.mrgnn_out,
        head_hidden=cfg.head_hidden, dropout=cfg.training.dropout)


# ---------------------------------------------------------------------------
# subcommands


def cmd_synth(cfg: RunConfig) -> int:
    out = cfg.out_dir
    out.mkdir(parents=True, exist_ok=True)
    echo_config(cfg, out / "config_echo.ini")
    nodes, panels, record = generate_synthetic(cfg.synthetic)
    write_nodes_csv(cfg.nodes_path, nodes)
    write_demand_csv(cfg.demand_path, panels)
    coupling_path = out / "coupling.json"
    coupling_path.write_text(record.to_json() + "\n")
    print(f"wrote {cfg.nodes_path} ({sum(n.size for n in nodes.values())} nodes), "
          f"{cfg.demand_path} ({cfg.synthetic.length} steps), {coupling_path}")
    return 0


def cmd_build_graphs(cfg: RunConfig) -> int:
    out = cfg.out_dir
    out.mkdir(parents=True, exist_ok=True)
    echo_config(cfg, out / "config_echo.ini")
    node_sets, panels, report = _load_inputs(cfg)
    num_steps = panels[min(panels)].num_steps
    train_end, _ = cfg.split.boundaries(num_steps)
    relations = assemble_relations(node_sets, panels, cfg.geo, train_steps=train_end)
    files = write_relation_csvs(relations, out / "graphs")
    rows = relation_summary(relations)
    _write_csv(out / "graphs" / "summary.csv",
               ["target_mode", "source_mode", "kind", "shape", "nonzero_frac",
                "zero_rows", "row_sums_ok"],
               [[r["target_mode"], r["source_mode"], r["kind"], r["shape"],
                 r["nonzero_frac"], r["zero_rows"], r["row_sums_ok"]] for r in rows])
    isolated = [r for r in rows if r["zero_rows"]]
    print(f"wrote {len(files)} relation matrices to {out / 'graphs'}")
    if report.total_missing:
        print(f"warning: zero-filled {report.total_missing} missing demand cells")
    for r in isolated:
        print(f"warning: relation ({r['target_mode']},{r['source_mode']},{r['kind']}) "
              f"has {r['zero_rows']} isolated rows")
    for w in relations.warnings:
        print(f"warning: {w}")
    return 0


def _train_once(cfg: RunConfig, relations, windows, normalizer, variant: str,
                seed: int):
    mc = _model_config(cfg, relations)
    model = STMRGNN(mc, relations, variant=variant, seed=seed)
    tc = cfg.training
    tc = type(tc)(epochs=tc.epochs, batch_size=tc.batch_size,
                  learning_rate=tc.learning_rate, dropout=tc.dropout,
                  weight_decay=tc.weight_decay, loss_weights=tc.loss_weights,
                  patience=tc.patience, seed=seed, loss_norm=tc.loss_norm)
    result = train(model, windows["train"], windows["val"], tc)
    return model, result


def _checkpoint_extra(cfg: RunConfig, normalizer: Normalizer) -> dict:
    return {
        "normalizer": {
            str(m): {"lo": normalizer.lo[m].tolist(), "hi": normalizer.hi[m].tolist()}
            for m in normalizer.lo
        },
        "loss_norm": cfg.training.loss_norm,
        "geo": {"kappa_m": cfg.geo.kappa_m, "sigma_m": cfg.geo.sigma_m},
        "split": [cfg.split.train_frac, cfg.split.val_frac, cfg.split.test_frac],
    }


def _write_training_log(path, result) -> None:
    _write_csv(path, ["epoch", "train_loss", "val_loss", "seconds"],
               [[e.epoch, e.train_loss, e.val_loss, e.seconds] for e in result.log])


def cmd_train(cfg: RunConfig) -> int:
    out = cfg.out_dir
    out.mkdir(parents=True, exist_ok=True)
    echo_config(cfg, out / "config_echo.ini")
    node_sets, panels, report = _load_inputs(cfg)
    relations, normalizer, windows, _ = _prepare(cfg, node_sets, panels)
    if report.total_missing:
        print(f"warning: zero-filled {report.total_missing} missing demand cells")

    try:
        model, result = _train_once(cfg, relations, windows, normalizer,
                                    cfg.variant, cfg.training.seed)
    except TrainingDiverged as e:
        if e.result is not None:
            _write_training_log(out / "training_log.csv", e.result)
            (out / "PARTIAL").write_text(str(e) + "\n")
        print(f"error: {e}", file=sys.stderr)
        return 1

    model.save(out / "checkpoint.stm", extra_meta=_checkpoint_extra(cfg, normalizer))
    _write_training_log(out / "training_log.csv", result)

    metrics, _ = evaluate_model(model, windows["test"], normalizer)
    label = f"stmrgnn[{cfg.variant}]"
    _write_csv(out / "metrics.csv",
               ["model", "mode", "scope", "rmse", "mae", "r2"],
               _metrics_rows(label, metrics))
    table = _metrics_table({label: metrics}, sorted(metrics.per_mode))
    (out / "metrics.txt").write_text(table)
    print(table, end="")
    print(f"best epoch {result.best_epoch} (val loss {result.best_val_loss:.6f}); "
          f"artifacts in {out}")
    return 0


def _load_model_for_eval(cfg: RunConfig, checkpoint: Path):
    node_sets, panels, _ = _load_inputs(cfg)
    relations, normalizer, windows, bounds = _prepare(cfg, node_sets, panels)
    model, extra = STMRGNN.load(checkpoint, relations)
    stored = extra.get("normalizer")
    if stored is not None:
        normalizer = Normalizer(
            lo={int(m): np.array(v["lo"]) for m, v in stored.items()},
            hi={int(m): np.array(v["hi"]) for m, v in stored.items()})
    return node_sets, panels, relations, normalizer, windows, bounds, model, extra


def cmd_evaluate(cfg: RunConfig, checkpoint: Optional[str]) -> int:
    out = cfg.out_dir
    out.mkdir(parents=True, exist_ok=True)
    ckpt = Path(checkpoint) if checkpoint else out / "checkpoint.stm"
    if not ckpt.exists():
        raise CheckpointError(f"checkpoint not found: {ckpt}")
    echo_config(cfg, out / "config_echo.ini")
    (node_sets, panels, relations, normalizer, windows, bounds, model,
     extra) = _load_model_for_eval(cfg, ckpt)
    train_end = bounds[0]

    metrics, preds = evaluate_model(model, windows["test"], normalizer,
                                    per_node=True)
    targets = {m: normalizer.inverse(m, windows["test"].targets[m])
               for m in model.modes}

    groups = {}
    for m in model.modes:
        g, warn = stratify_di_ds(panels[m], train_end)
        groups[m] = g
        if warn:
            print(f"warning: {warn}")
    by_group = group_metrics(preds, targets, groups,
                             {m: panels[m].node_ids for m in model.modes})

    label = f"stmrgnn[{model.variant}]"
    rows = _metrics_rows(label, metrics)
    group_names = {"high": "demand-intensive", "middle": "middle",
                   "low": "demand-sparse"}
    for m in sorted(by_group):
        for key, cm in by_group[m].items():
            rows.append([label, m, group_names[key], cm.rmse, cm.mae,
                         cm.r2 if cm.r2 is not None else ""])
    _write_csv(out / "eval_metrics.csv",
               ["model", "mode", "scope", "rmse", "mae", "r2"], rows)

    node_rows = []
    for m in model.modes:
        mm = metrics.per_mode[m]
        for i, nid in enumerate(panels[m].node_ids):
            node_rows.append([m, nid, float(mm.per_node_rmse[i]),
                              float(mm.per_node_mae[i]),
                              group_names[groups[m][nid]]])
    _write_csv(out / "per_node_rmse.csv",
               ["mode", "node_id", "rmse", "mae", "group"], node_rows)

    table = _metrics_table({label: metrics}, sorted(metrics.per_mode))
    (out / "eval_metrics.txt").write_text(table)
    print(table, end="")
    print(f"wrote {out / 'eval_metrics.csv'} and {out / 'per_node_rmse.csv'}")
    return 0


def cmd_ablate(cfg: RunConfig) -> int:
    out = cfg.out_dir
    out.mkdir(parents=True, exist_ok=True)
    echo_config(cfg, out / "config_echo.ini")
    node_sets, panels, _ = _load_inputs(cfg)
    relations, normalizer, windows, _ = _prepare(cfg, node_sets, panels)
    modes = sorted(panels)

    run_rows = []
    collected: dict[tuple[str, int], dict[str, list[float]]] = {}
    for variant in cfg.ablate_variants:
        for i in range(cfg.ablate_seeds):
            seed = cfg.training.seed + i
            try:
                model, _ = _train_once(cfg, relations, windows, normalizer,
                                       variant, seed)
                metrics, _ = evaluate_model(model, windows["test"], normalizer)
                for m in modes:
                    mm = metrics.per_mode[m]
                    run_rows.append([variant, seed, m, mm.rmse, mm.mae,
                                     mm.r2 if mm.r2 is not None else "", "ok"])
                    cell = collected.setdefault((variant, m),
                                                {"rmse": [], "mae": [], "r2": []})
                    cell["rmse"].append(mm.rmse)
                    cell["mae"].append(mm.mae)
                    if mm.r2 is not None:
                        cell["r2"].append(mm.r2)
                print(f"{variant} seed {seed}: done")
            except STMRGNNError as e:
                for m in modes:
                    run_rows.append([variant, seed, m, "", "", "", f"failed: {e}"])
                print(f"{variant} seed {seed}: failed ({e})", file=sys.stderr)
    _write_csv(out / "ablation_runs.csv",
               ["variant", "seed", "mode", "rmse", "mae", "r2", "status"], run_rows)

    def agg(vals: list[float]) -> tuple:
        if not vals:
            return "failed", "failed"
        arr = np.asarray(vals)
        std = float(arr.std(ddof=1)) if len(arr) > 1 else 0.0
        return float(arr.mean()), std

    summary = []
    for variant in cfg.ablate_variants:
        for m in modes:
            cell = collected.get((variant, m), {"rmse": [], "mae": [], "r2": []})
            rm, rs = agg(cell["rmse"])
            mm_, ms = agg(cell["mae"])
            r2m, r2s = agg(cell["r2"])
            summary.append([variant, m, rm, rs, mm_, ms, r2m, r2s,
                            len(cell["rmse"])])
    _write_csv(out / "ablation.csv",
               ["variant", "mode", "rmse_mean", "rmse_std", "mae_mean", "mae_std",
                "r2_mean", "r2_std", "n_runs"], summary)
    print(f"wrote {out / 'ablation.csv'} "
          f"({len(cfg.ablate_variants)} variants x {cfg.ablate_seeds} seeds)")
    return 0


def cmd_export_attention(cfg: RunConfig, checkpoint: Optional[str], raw: bool,
                         node: Optional[str], topq: int, block: str) -> int:
    out = cfg.out_dir
    out.mkdir(parents=True, exist_ok=True)
    ckpt = Path(checkpoint) if checkpoint else out / "checkpoint.stm"
    if not ckpt.exists():
        raise CheckpointError(f"checkpoint not found: {ckpt}")
    echo_config(cfg, out / "config_echo.ini")
    (node_sets, panels, relations, normalizer, windows, bounds, model,
     extra) = _load_model_for_eval(cfg, ckpt)
    if not model.use_attention:
        raise ConfigError(
            f"variant {model.variant!r} has no attention module to export")

    test = windows["test"]
    model.predict(test.inputs, collect_attention=True)
    blocks = sorted({b for b, _ in model.last_attention})
    if block == "last":
        selected = [blocks[-1]]
    elif block == "all":
        selected = blocks
    else:
        bi = int(block)
        if bi not in blocks:
            raise ConfigError(f"block {bi} out of range; model has blocks {blocks}")
        selected = [bi]

    ref_panel = panels[min(panels)]
    slots = [ref_panel.slot_of(ref_panel.timestamps[t]) for t in test.target_steps]
    slots = np.asarray(slots)

    slot_rows, raw_rows = [], []
    per_window: dict[tuple[int, int], np.ndarray] = {}
    for b in selected:
        for m in model.modes:
            weights = model.last_attention[(b, m)]      # [num, t', N, S]
            mean_w = weights.mean(axis=1)               # per window: [num, N, S]
            per_window[(b, m)] = mean_w
            labels = model.slot_labels(m)
            ids = panels[m].node_ids
            if raw:
                for w_idx in range(mean_w.shape[0]):
                    stamp = format_timestamp(
                        panels[m].timestamps[test.target_steps[w_idx]])
                    for i, nid in enumerate(ids):
                        raw_rows.append([m, b, w_idx, stamp, nid,
                                         *[float(v) for v in mean_w[w_idx, i]]])
            for s in sorted(set(slots.tolist())):
                sel = slots == s
                bucket = mean_w[sel].mean(axis=0)       # [N, S]
                for i, nid in enumerate(ids):
                    slot_rows.append([m, b, nid, s, int(sel.sum()),
                                      *[float(v) for v in bucket[i]]])

    max_slots = max(len(model.slot_labels(m)) for m in model.modes)
    weight_cols = [f"w{j}" for j in range(max_slots)]
    label_rows = [[m, " | ".join(model.slot_labels(m))] for m in model.modes]
    _write_csv(out / "attention_slot_labels.csv", ["mode", "slot_order"], label_rows)
    _write_csv(out / "attention_by_slot.csv",
               ["mode", "block", "node_id", "slot", "n_windows", *weight_cols],
               slot_rows)
    if raw:
        _write_csv(out / "attention_raw.csv",
                   ["mode", "block", "window", "target_timestamp", "node_id",
                    *weight_cols], raw_rows)

    if node is not None:
        try:
            mode_str, node_id = node.split(":", 1)
            mode = int(mode_str)
        except ValueError:
            raise ConfigError(
                f"--node must look like MODE:NODE_ID, got {node!r}") from None
        if mode not in model.modes or node_id not in panels[mode].node_ids:
            valid = {m: panels[m].node_ids[:5] for m in model.modes}
            raise ConfigError(
                f"unknown node {node!r}; valid modes {model.modes}, e.g. {valid}")
        i = panels[mode].node_ids.index(node_id)
        b = selected[-1]
        mean_attn = per_window[(b, mode)].mean(axis=0)  # [N, S]
        labels = model.slot_labels(mode)
        top_rows = []
        slot = 0
        for n in model.source_modes[mode]:
            adj = relations.stacked[(mode, n)]
            for r in model.kind_indices:
                a = float(mean_attn[i, slot])
                scores = a * adj[r][i]
                order = np.argsort(-scores, kind="stable")[:topq]
                for rank, j in enumerate(order, start=1):
                    top_rows.append([mode, node_id, labels[slot], rank, n,
                                     panels[n].node_ids[j], float(scores[j])])
                slot += 1
        _write_csv(out / "top_neighbors.csv",
                   ["mode", "node_id", "relation", "rank", "neighbor_mode",
                    "neighbor_id", "score"], top_rows)
        print(f"wrote {out / 'top_neighbors.csv'}")
    print(f"wrote {out / 'attention_by_slot.csv'}")
    return 0


# ---------------------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="stmrgnn",
        description="Multimodal demand forecasting with relation graphs")
    parser.add_argument("--version", action="version", version=__version__)
    sub = parser.add_subparsers(dest="command", required=True)

    def common(p):
        p.add_argument("--config", help="path to an INI run configuration")
        p.add_argument("--out", help="output directory (overrides config)")
        p.add_argument("--seed", type=int, help="run seed (overrides config)")

    p = sub.add_parser("synth", help="generate the coupled synthetic dataset")
    common(p)

    p = sub.add_parser("build-graphs", help="write relation matrices and a summary")
    common(p)

    p = sub.add_parser("train", help="train and evaluate one model")
    common(p)
    p.add_argument("--variant", help="model variant to train")
    p.add_argument("--epochs", type=int, help="epoch budget (overrides config)")

    p = sub.add_parser("evaluate", help="score a checkpoint on the test split")
    common(p)
    p.add_argument("--checkpoint", help="checkpoint path (default: <out>/checkpoint.stm)")

    p = sub.add_parser("ablate", help="train every variant over seeded repetitions")
    common(p)
    p.add_argument("--epochs", type=int, help="epoch budget (overrides config)")

    p = sub.add_parser("export-attention", help="export attention weights as CSV")
    common(p)
    p.add_argument("--checkpoint", help="checkpoint path (default: <out>/checkpoint.stm)")
    p.add_argument("--raw", action="store_true", help="also write per-window weights")
    p.add_argument("--node", help="MODE:NODE_ID for the top-q neighbor export")
    p.add_argument("--topq", type=int, help="neighbors per relation (default 3)")
    p.add_argument("--block", help="block to export: index, 'last' (default), or 'all'")
    return parser


def main(argv: Optional[list[str]] = None) -> int:
    args = build_parser().parse_args(argv)
    overrides = {"out": args.out, "seed": args.seed}
    if getattr(args, "variant", None) is not None:
        overrides["variant"] = args.variant
    if getattr(args, "epochs", None) is not None:
        overrides["epochs"] = args.epochs
    if getattr(args, "topq", None) is not None:
        overrides["topq"] = args.topq
    try:
        cfg = load_run_config(args.config, overrides)
        if args.command == "synth":
            return cmd_synth(cfg)
        if args.command == "build-graphs":
            return cmd_build_graphs(cfg)
        if args.command == "train":
            return cmd_train(cfg)
        if args.command == "evaluate":
            return cmd_evaluate(cfg, args.checkpoint)
        if args.command == "ablate":
            return cmd_ablate(cfg)
        if args.command == "export-attention":
            return cmd_export_attention(
                cfg, args.checkpoint, args.raw, args.node,
                cfg.export_topq, args.block or cfg.export_block)
        raise ConfigError(f"unknown command {args.command!r}")
    except STMRGNNError as e:
        print(f"error: {e}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
