"""Multimodal travel demand forecasting with multi-relational
spatiotemporal graph neural networks.

Submodules:
    autodiff   fp64 tensor engine with a reverse-mode gradient tape
    graphs     intra-/inter-modal relation graph construction
    data       CSV panel ingestion and the coupled synthetic generator
    model      the stacked spatiotemporal network and its ablation variants
    training   normalization, windowing, loss, training loop, metrics
    baselines  historical-average and linear-regression reference models
    cli        command-line pipeline (synth / build-graphs / train / ...)
"""

__version__ = "0.1.0"

from stmrgnn.graphs import (
    GeoConfig,
    NodeSet,
    RelationGraph,
    RelationSet,
    assemble_relations,
    build_functional_adjacency,
    build_geo_adjacency,
    row_normalize,
)
from stmrgnn.data import (
    CouplingRecord,
    DemandPanel,
    SyntheticModeSpec,
    SyntheticSpec,
    generate_synthetic,
    load_demand_csv,
    load_nodes_csv,
)
from stmrgnn.model import (
    ModelConfig,
    STMRGNN,
    build_variant,
    gated_tcn_forward,
    ggcn_forward,
    relation_aggregate,
    relation_attention,
)
from stmrgnn.training import (
    Metrics,
    Normalizer,
    SplitSpec,
    TrainConfig,
    evaluate_metrics,
    evaluate_model,
    make_windows,
    multimode_loss,
    stratify_di_ds,
    train,
)
from stmrgnn.baselines import ha_fit_predict, lr_fit_predict

__all__ = [
    "__version__",
    "GeoConfig",
    "NodeSet",
    "RelationGraph",
    "RelationSet",
    "assemble_relations",
    "build_functional_adjacency",
    "build_geo_adjacency",
    "row_normalize",
    "CouplingRecord",
    "DemandPanel",
    "SyntheticModeSpec",
    "SyntheticSpec",
    "generate_synthetic",
    "load_demand_csv",
    "load_nodes_csv",
    "ModelConfig",
    "STMRGNN",
    "build_variant",
    "gated_tcn_forward",
    "ggcn_forward",
    "relation_aggregate",
    "relation_attention",
    "Metrics",
    "Normalizer",
    "SplitSpec",
    "TrainConfig",
    "evaluate_metrics",
    "evaluate_model",
    "make_windows",
    "multimode_loss",
    "stratify_di_ds",
    "train",
    "ha_fit_predict",
    "lr_fit_predict",
]
