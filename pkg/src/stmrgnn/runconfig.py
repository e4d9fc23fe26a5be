"""Run configuration: a sectioned key-value (INI) file plus CLI overrides.

Every command validates the full resolved configuration up front and writes
an echo of it to the output directory before computing anything.
"""

from __future__ import annotations

import configparser
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional

from stmrgnn.data import SyntheticModeSpec, SyntheticSpec
from stmrgnn.errors import ConfigError
from stmrgnn.graphs import GeoConfig
from stmrgnn.model import VARIANTS
from stmrgnn.training import SplitSpec, TrainConfig

DEFAULT_CONFIG = """\
[paths]
nodes = data/nodes.csv
demand = data/demand.csv
out = runs/latest

[graph]
kappa_m = 1500.0
sigma_m = auto

[model]
window = 6
blocks = 2
kernel = 2
tcn_in = 16
tcn_out = 64
mrgnn_out = 16
head_hidden = 128

[training]
epochs = 500
batch_size = 32
learning_rate = 0.002
dropout = 0.3
weight_decay = 1e-5
patience = 20
loss_norm = l1
loss_weights = uniform
seed = 0

[split]
train = 0.6
val = 0.2
test = 0.2

[run]
variant = full

[ablate]
seeds = 10
variants = full,no_intergraph,no_geo,no_functional,no_attention

[export]
topq = 3
block = last

[synthetic]
mode1_nodes = 20
mode2_nodes = 10
extent_m = 4000.0
length = 2000
interval_hours = 4
base_level = 40.0
daily_amplitude = 20.0
weekly_amplitude = 4.0
latent_std = 6.0
latent_rho = 0.8
noise_std = 4.0
coupling_lag = 1
coupling_strength = 0.8
coupling_radius_m = 900.0
obs_noise_std = 2.0
"""


@dataclass
class RunConfig:
    nodes_path: Path = Path("data/nodes.csv")
    demand_path: Path = Path("data/demand.csv")
    out_dir: Path = Path("runs/latest")
    geo: GeoConfig = field(default_factory=GeoConfig)
    window: int = 6
    blocks: int = 2
    kernel: int = 2
    tcn_in: int = 16
    tcn_out: int = 64
    mrgnn_out: int = 16
    head_hidden: int = 128
    training: TrainConfig = field(default_factory=TrainConfig)
    split: SplitSpec = field(default_factory=SplitSpec)
    variant: str = "full"
    ablate_seeds: int = 10
    ablate_variants: tuple[str, ...] = VARIANTS
    export_topq: int = 3
    export_block: str = "last"
    synthetic: SyntheticSpec = field(default_factory=SyntheticSpec)

    def validate(self) -> None:
        if self.variant not in VARIANTS:
            raise ConfigError(f"unknown variant {self.variant!r}; choose from {VARIANTS}")
        for v in self.ablate_variants:
            if v not in VARIANTS:
                raise ConfigError(f"unknown ablation variant {v!r}")
        if self.ablate_seeds < 1:
            raise ConfigError("ablate seeds must be positive")
        if self.export_topq < 1:
            raise ConfigError("topq must be positive")
        if self.export_block != "last":
            try:
                int(self.export_block)
            except ValueError:
                raise ConfigError("export block must be 'last' or a block index") from None
        if self.window - self.blocks * (self.kernel - 1) * 2 < 1:
            raise ConfigError(
                f"window {self.window} too short for {self.blocks} blocks of "
                f"kernel {self.kernel}")


def _parser_from_text(text: str) -> configparser.ConfigParser:
    parser = configparser.ConfigParser()
    parser.read_string(text)
    return parser


def load_run_config(path: Optional[str] = None,
                    overrides: Optional[dict] = None) -> RunConfig:
    """Parse defaults, then the config file, then CLI overrides."""
    parser = _parser_from_text(DEFAULT_CONFIG)
    if path is not None:
        read = parser.read(path)
        if not read:
            raise ConfigError(f"config file not found: {path}")

    def get(section, key, conv=str):
        try:
            return conv(parser.get(section, key))
        except (configparser.Error, ValueError) as e:
            raise ConfigError(f"[{section}] {key}: {e}") from e

    sigma_raw = get("graph", "sigma_m")
    sigma = None if sigma_raw.strip().lower() == "auto" else float(sigma_raw)
    weights_raw = get("training", "loss_weights").strip()
    if weights_raw.lower() == "uniform":
        loss_weights = None
    else:
        parts = [float(w) for w in weights_raw.split(",")]
        loss_weights = {i + 1: w for i, w in enumerate(parts)}

    cfg = RunConfig(
        nodes_path=Path(get("paths", "nodes")),
        demand_path=Path(get("paths", "demand")),
        out_dir=Path(get("paths", "out")),
        geo=GeoConfig(kappa_m=get("graph", "kappa_m", float), sigma_m=sigma),
        window=get("model", "window", int),
        blocks=get("model", "blocks", int),
        kernel=get("model", "kernel", int),
        tcn_in=get("model", "tcn_in", int),
        tcn_out=get("model", "tcn_out", int),
        mrgnn_out=get("model", "mrgnn_out", int),
        head_hidden=get("model", "head_hidden", int),
        training=TrainConfig(
            epochs=get("training", "epochs", int),
            batch_size=get("training", "batch_size", int),
            learning_rate=get("training", "learning_rate", float),
            dropout=get("training", "dropout", float),
            weight_decay=get("training", "weight_decay", float),
            loss_weights=loss_weights,
            patience=get("training", "patience", int),
            seed=get("training", "seed", int),
            loss_norm=get("training", "loss_norm"),
        ),
        split=SplitSpec(
            train_frac=get("split", "train", float),
            val_frac=get("split", "val", float),
            test_frac=get("split", "test", float),
        ),
        variant=get("run", "variant"),
        ablate_seeds=get("ablate", "seeds", int),
        ablate_variants=tuple(v.strip() for v in get("ablate", "variants").split(",")),
        export_topq=get("export", "topq", int),
        export_block=get("export", "block"),
        synthetic=SyntheticSpec(
            mode1=SyntheticModeSpec(get("synthetic", "mode1_nodes", int),
                                    get("synthetic", "extent_m", float)),
            mode2=SyntheticModeSpec(get("synthetic", "mode2_nodes", int),
                                    get("synthetic", "extent_m", float)),
            length=get("synthetic", "length", int),
            seed=get("training", "seed", int),
            interval_hours=get("synthetic", "interval_hours", int),
            base_level=get("synthetic", "base_level", float),
            daily_amplitude=get("synthetic", "daily_amplitude", float),
            weekly_amplitude=get("synthetic", "weekly_amplitude", float),
            latent_std=get("synthetic", "latent_std", float),
            latent_rho=get("synthetic", "latent_rho", float),
            noise_std=get("synthetic", "noise_std", float),
            coupling_lag=get("synthetic", "coupling_lag", int),
            coupling_strength=get("synthetic", "coupling_strength", float),
            coupling_radius_m=get("synthetic", "coupling_radius_m", float),
            obs_noise_std=get("synthetic", "obs_noise_std", float),
        ),
    )

    if overrides:
        for key, value in overrides.items():
            if value is None:
                continue
            if key == "out":
                cfg.out_dir = Path(value)
            elif key == "seed":
                cfg.training.seed = int(value)
                cfg.synthetic.seed = int(value)
            elif key == "epochs":
                cfg.training.epochs = int(value)
            elif key == "variant":
                cfg.variant = value
            elif key == "topq":
                cfg.export_topq = int(value)
            else:
                raise ConfigError(f"unknown override {key!r}")
    cfg.validate()
    return cfg


def echo_config(cfg: RunConfig, path) -> None:
    """Write the fully resolved configuration as an INI file."""
    parser = configparser.ConfigParser()
    t, s, y = cfg.training, cfg.split, cfg.synthetic
    weights = ("uniform" if t.loss_weights is None else
               ",".join(repr(t.loss_weights[k]) for k in sorted(t.loss_weights)))
    parser["paths"] = {
        "nodes": str(cfg.nodes_path),
        "demand": str(cfg.demand_path),
        "out": str(cfg.out_dir),
    }
    parser["graph"] = {
        "kappa_m": repr(cfg.geo.kappa_m),
        "sigma_m": "auto" if cfg.geo.sigma_m is None else repr(cfg.geo.sigma_m),
    }
    parser["model"] = {
        "window": str(cfg.window),
        "blocks": str(cfg.blocks),
        "kernel": str(cfg.kernel),
        "tcn_in": str(cfg.tcn_in),
        "tcn_out": str(cfg.tcn_out),
        "mrgnn_out": str(cfg.mrgnn_out),
        "head_hidden": str(cfg.head_hidden),
    }
    parser["training"] = {
        "epochs": str(t.epochs),
        "batch_size": str(t.batch_size),
        "learning_rate": repr(t.learning_rate),
        "dropout": repr(t.dropout),
        "weight_decay": repr(t.weight_decay),
        "patience": str(t.patience),
        "loss_norm": t.loss_norm,
        "loss_weights": weights,
        "seed": str(t.seed),
    }
    parser["split"] = {
        "train": repr(s.train_frac),
        "val": repr(s.val_frac),
        "test": repr(s.test_frac),
    }
    parser["run"] = {"variant": cfg.variant}
    parser["ablate"] = {
        "seeds": str(cfg.ablate_seeds),
        "variants": ",".join(cfg.ablate_variants),
    }
    parser["export"] = {
        "topq": str(cfg.export_topq),
        "block": cfg.export_block,
    }
    parser["synthetic"] = {
        "mode1_nodes": str(y.mode1.n_nodes),
        "mode2_nodes": str(y.mode2.n_nodes),
        "extent_m": repr(y.mode1.extent_m),
        "length": str(y.length),
        "interval_hours": str(y.interval_hours),
        "base_level": repr(y.base_level),
        "daily_amplitude": repr(y.daily_amplitude),
        "weekly_amplitude": repr(y.weekly_amplitude),
        "latent_std": repr(y.latent_std),
        "latent_rho": repr(y.latent_rho),
        "noise_std": repr(y.noise_std),
        "coupling_lag": str(y.coupling_lag),
        "coupling_strength": repr(y.coupling_strength),
        "coupling_radius_m": repr(y.coupling_radius_m),
        "obs_noise_std": repr(y.obs_noise_std),
    }
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w") as fh:
        parser.write(fh)
