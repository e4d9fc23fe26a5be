"""The multi-relational spatiotemporal network.

Architecture: a per-mode 1x1 convolution lifts raw 2-channel demand windows
to the temporal width, then a stack of spatiotemporal blocks runs
gated temporal convolution -> per-time-step multi-relational graph
convolution with attention aggregation -> residual projection -> gated
temporal convolution -> layer norm. A final per-mode gated convolution
collapses any remaining sequence length and a two-layer head emits the
(inflow, outflow) prediction per node.
"""

from __future__ import annotations

from dataclasses import asdict, dataclass
from typing import Mapping, Optional, Union

import numpy as np

from stmrgnn.autodiff import (
    Tensor,
    causal_conv1d,
    dropout,
    gated_conv1d,
    layer_norm,
    matmul,
    mul,
    relu,
    reshape,
    softmax,
    stack,
    tensor_sum,
    transpose,
)
from stmrgnn.checkpoint import load_checkpoint, save_checkpoint
from stmrgnn.errors import CheckpointError, ConfigError, ContractError, DimensionError
from stmrgnn.graphs import RelationSet

VARIANTS = ("full", "no_intergraph", "no_geo", "no_functional", "no_attention")


@dataclass
class ModelConfig:
    """Hyperparameters of the network; node counts come from the data."""

    mode_ids: tuple[int, ...]
    node_counts: dict[int, int]
    num_kinds: int = 2
    window: int = 6          # input steps per sample
    blocks: int = 2          # spatiotemporal block count
    kernel: int = 2          # temporal kernel width
    tcn_in: int = 16         # channels after the input lift
    tcn_out: int = 64        # temporal channels (also the graph-conv input width)
    mrgnn_out: int = 16      # relational feature width
    head_hidden: int = 128
    dropout: float = 0.3

    def __post_init__(self):
        self.mode_ids = tuple(self.mode_ids)
        self.node_counts = {int(k): int(v) for k, v in self.node_counts.items()}
        self.validate()

    def validate(self) -> None:
        dims = (self.num_kinds, self.window, self.blocks, self.kernel, self.tcn_in,
                self.tcn_out, self.mrgnn_out, self.head_hidden)
        if any(d < 1 for d in dims):
            raise ConfigError(f"all dimensions must be positive, got {dims}")
        if not 0.0 <= self.dropout < 1.0:
            raise ConfigError(f"dropout must lie in [0, 1), got {self.dropout}")
        if not self.mode_ids:
            raise ConfigError("at least one mode required")
        if set(self.mode_ids) != set(self.node_counts):
            raise ConfigError("node_counts must cover exactly the configured modes")
        if self.post_block_length < 1:
            raise ConfigError(
                f"window {self.window} too short: {self.blocks} blocks with kernel "
                f"{self.kernel} consume {self.blocks * (self.kernel - 1) * 2} steps")

    @property
    def post_block_length(self) -> int:
        return self.window - self.blocks * (self.kernel - 1) * 2

    @property
    def needs_downscale(self) -> bool:
        return self.post_block_length > 1

    @classmethod
    def for_relations(cls, relations: RelationSet, **kwargs) -> "ModelConfig":
        counts = {m: relations.node_sets[m].size for m in relations.mode_ids}
        return cls(mode_ids=tuple(relations.mode_ids), node_counts=counts,
                   num_kinds=relations.num_kinds, **kwargs)


# ---------------------------------------------------------------------------
# functional pieces


def ggcn_forward(features: Tensor, stacked_adj: Tensor, weight: Tensor,
                 bias: Tensor) -> Tensor:
    """Generalized graph convolution over a stack of relation adjacencies.

    features: [N_src, c_in] or [batch, N_src, c_in]; stacked_adj:
    [u, N_dst, N_src] row-normalized; weight: [u, c_in, c_out]; bias: [c_out].
    Returns [u, N_dst, c_out] (or [u, batch, N_dst, c_out]): slice r is
    relu(adj[r] @ features @ weight[r] + bias).
    """
    u, n_dst, n_src = stacked_adj.shape
    if features.shape[-2] != n_src:
        raise DimensionError(
            f"adjacency expects {n_src} source nodes, features have "
            f"{features.shape[-2]}")
    if weight.shape[0] != u or weight.shape[1] != features.shape[-1]:
        raise DimensionError(
            f"weight shape {weight.shape} incompatible with adjacency stack "
            f"{stacked_adj.shape} and features {features.shape}")
    if features.ndim == 2:
        msg = matmul(stacked_adj, features)          # [u, N_dst, c_in]
        z = matmul(msg, weight)                      # [u, N_dst, c_out]
    elif features.ndim == 3:
        adj4 = reshape(stacked_adj, (u, 1, n_dst, n_src))
        msg = matmul(adj4, features)                 # [u, B, N_dst, c_in]
        w4 = reshape(weight, (u, 1) + weight.shape[1:])
        z = matmul(msg, w4)                          # [u, B, N_dst, c_out]
    else:
        raise DimensionError(f"features must be 2-d or 3-d, got {features.shape}")
    return relu(z + bias)


def relation_attention(z_set: Tensor, w_a: Tensor, b_a: Tensor) -> Tensor:
    """Softmax attention over relation feature blocks.

    z_set: [..., S, c] per-relation features; w_a: [S*c, 1] (one scoring block
    per relation); b_a: scalar shared bias. Returns weights [..., S] summing
    to 1 over the relation axis.
    """
    s, c = z_set.shape[-2], z_set.shape[-1]
    if w_a.size != s * c:
        raise DimensionError(
            f"attention weight of size {w_a.size} cannot score {s} relations "
            f"of width {c}")
    blocks = reshape(w_a, (s, c))
    logits = tensor_sum(mul(z_set, blocks), axis=-1) + b_a
    return softmax(logits, axis=-1)


def relation_aggregate(z_set: Tensor, weights: Tensor) -> Tensor:
    """Weighted sum of relation features: [..., S, c] x [..., S] -> [..., c]."""
    w = reshape(weights, weights.shape + (1,))
    return tensor_sum(mul(z_set, w), axis=-2)


@dataclass
class GatedConvParams:
    w1: Tensor  # information kernel [c_out, c_in, K]
    b1: Tensor
    w2: Tensor  # gate kernel, same shape
    b2: Tensor


def gated_tcn_forward(x: Tensor, p: GatedConvParams) -> Tensor:
    """(W1 * x + b1) elementwise-gated by sigmoid(W2 * x + b2)."""
    return gated_conv1d(x, p.w1, p.b1, p.w2, p.b2)


# ---------------------------------------------------------------------------
# parameter containers


@dataclass
class BlockParams:
    tcn1: dict[int, GatedConvParams]
    ggcn_w: dict[tuple[int, int], Tensor]
    ggcn_b: dict[tuple[int, int], Tensor]
    attn_w: dict[int, Tensor]
    attn_b: dict[int, Tensor]
    proj: dict[int, Tensor]
    tcn2: dict[int, GatedConvParams]
    norm_gain: dict[int, Tensor]
    norm_offset: dict[int, Tensor]


@dataclass
class HeadParams:
    w1: Tensor
    b1: Tensor
    w2: Tensor
    b2: Tensor


class STMRGNN:
    """Multi-relational spatiotemporal demand predictor.

    Construction is deterministic given (config, relations, variant, seed).
    ``forward`` accepts per-mode windows shaped [N, 2, T] or batched
    [B, N, 2, T] and returns predictions [N, 2] / [B, N, 2] on the
    normalized scale.
    """

    def __init__(self, config: ModelConfig, relations: RelationSet,
                 variant: str = "full", seed: int = 0):
        if variant not in VARIANTS:
            raise ContractError(f"unknown variant {variant!r}; expected one of {VARIANTS}")
        if set(config.mode_ids) != set(relations.mode_ids):
            raise ConfigError("config modes differ from relation-set modes")
        if config.num_kinds != relations.num_kinds:
            raise ConfigError(
                f"config expects {config.num_kinds} dependency kinds, relation set "
                f"has {relations.num_kinds}")
        self.config = config
        self.relations = relations
        self.variant = variant
        self.seed = int(seed)

        if variant == "no_geo":
            kinds = [i for i, k in enumerate(relations.kinds) if k != "geo"]
        elif variant == "no_functional":
            kinds = [i for i, k in enumerate(relations.kinds) if k == "geo"]
        else:
            kinds = list(range(relations.num_kinds))
        if not kinds:
            raise ConfigError(f"variant {variant!r} leaves no dependency kinds")
        self.kind_indices = tuple(kinds)
        self.use_attention = variant != "no_attention"
        self.intergraph = variant != "no_intergraph"

        self.modes = tuple(sorted(config.mode_ids))
        self.source_modes = {
            m: (self.modes if self.intergraph else (m,)) for m in self.modes}
        self._adj: dict[tuple[int, int], Tensor] = {}
        for m in self.modes:
            for n in self.source_modes[m]:
                arr = relations.stacked[(m, n)][list(self.kind_indices)]
                self._adj[(m, n)] = Tensor(np.ascontiguousarray(arr))

        self._params: dict[str, Tensor] = {}
        self._dropout_rng = np.random.default_rng([self.seed, 1])
        self._build_params(np.random.default_rng([self.seed, 0]))
        self.last_attention: dict[tuple[int, int], np.ndarray] = {}

    # -- construction -------------------------------------------------------

    def _add(self, name: str, data: np.ndarray) -> Tensor:
        t = Tensor(data, requires_grad=True)
        self._params[name] = t
        return t

    def _glorot(self, rng, name: str, shape: tuple, fan_in: int, fan_out: int) -> Tensor:
        limit = np.sqrt(6.0 / (fan_in + fan_out))
        return self._add(name, rng.uniform(-limit, limit, size=shape))

    def _conv(self, rng, name: str, c_out: int, c_in: int, k: int) -> GatedConvParams:
        return GatedConvParams(
            w1=self._glorot(rng, f"{name}.w1", (c_out, c_in, k), c_in * k, c_out * k),
            b1=self._add(f"{name}.b1", np.zeros(c_out)),
            w2=self._glorot(rng, f"{name}.w2", (c_out, c_in, k), c_in * k, c_out * k),
            b2=self._add(f"{name}.b2", np.zeros(c_out)),
        )

    def _build_params(self, rng) -> None:
        cfg = self.config
        u = len(self.kind_indices)
        self.lift: dict[int, tuple[Tensor, Tensor]] = {}
        for m in self.modes:
            w = self._glorot(rng, f"lift.m{m}.w", (cfg.tcn_in, 2, 1), 2, cfg.tcn_in)
            b = self._add(f"lift.m{m}.b", np.zeros(cfg.tcn_in))
            self.lift[m] = (w, b)  # plain affine 1x1 lift, no gate

        self.block_params: list[BlockParams] = []
        for l in range(cfg.blocks):
            c_in = cfg.tcn_in if l == 0 else cfg.tcn_out
            bp = BlockParams({}, {}, {}, {}, {}, {}, {}, {}, {})
            for m in self.modes:
                bp.tcn1[m] = self._conv(rng, f"block{l}.tcn1.m{m}",
                                        cfg.tcn_out, c_in, cfg.kernel)
            for m in self.modes:
                for n in self.source_modes[m]:
                    bp.ggcn_w[(m, n)] = self._glorot(
                        rng, f"block{l}.ggcn.t{m}.s{n}.w",
                        (u, cfg.tcn_out, cfg.mrgnn_out), cfg.tcn_out, cfg.mrgnn_out)
                    bp.ggcn_b[(m, n)] = self._add(
                        f"block{l}.ggcn.t{m}.s{n}.b", np.zeros(cfg.mrgnn_out))
            if self.use_attention:
                for m in self.modes:
                    slots = len(self.source_modes[m]) * u
                    bp.attn_w[m] = self._glorot(
                        rng, f"block{l}.attn.m{m}.w", (slots * cfg.mrgnn_out, 1),
                        slots * cfg.mrgnn_out, 1)
                    bp.attn_b[m] = self._add(f"block{l}.attn.m{m}.b", np.zeros(1))
            for m in self.modes:
                bp.proj[m] = self._glorot(rng, f"block{l}.proj.m{m}",
                                          (cfg.mrgnn_out, cfg.tcn_out),
                                          cfg.mrgnn_out, cfg.tcn_out)
                bp.tcn2[m] = self._conv(rng, f"block{l}.tcn2.m{m}",
                                        cfg.tcn_out, cfg.tcn_out, cfg.kernel)
                bp.norm_gain[m] = self._add(f"block{l}.norm.m{m}.gain",
                                            np.ones(cfg.tcn_out))
                bp.norm_offset[m] = self._add(f"block{l}.norm.m{m}.offset",
                                              np.zeros(cfg.tcn_out))
            self.block_params.append(bp)

        self.downscale: dict[int, GatedConvParams] = {}
        if cfg.needs_downscale:
            for m in self.modes:
                self.downscale[m] = self._conv(
                    rng, f"downscale.m{m}", cfg.tcn_out, cfg.tcn_out,
                    cfg.post_block_length)

        self.head: dict[int, HeadParams] = {}
        for m in self.modes:
            self.head[m] = HeadParams(
                w1=self._glorot(rng, f"head.m{m}.w1", (cfg.tcn_out, cfg.head_hidden),
                                cfg.tcn_out, cfg.head_hidden),
                b1=self._add(f"head.m{m}.b1", np.zeros(cfg.head_hidden)),
                w2=self._glorot(rng, f"head.m{m}.w2", (cfg.head_hidden, 2),
                                cfg.head_hidden, 2),
                b2=self._add(f"head.m{m}.b2", np.zeros(2)),
            )

    # -- introspection ------------------------------------------------------

    def parameters(self) -> dict[str, Tensor]:
        return self._params

    def num_parameters(self) -> int:
        return sum(t.size for t in self._params.values())

    def slot_labels(self, mode: int) -> list[str]:
        labels = []
        for n in self.source_modes[mode]:
            rel = "intra" if n == mode else f"inter_m{n}"
            for r in self.kind_indices:
                labels.append(f"{rel}_{self.relations.kinds[r]}")
        return labels

    def state_snapshot(self) -> dict[str, np.ndarray]:
        return {name: t.data.copy() for name, t in self._params.items()}

    def load_snapshot(self, snapshot: Mapping[str, np.ndarray]) -> None:
        if set(snapshot) != set(self._params):
            raise CheckpointError("snapshot parameter names do not match model")
        for name, arr in snapshot.items():
            if arr.shape != self._params[name].data.shape:
                raise CheckpointError(
                    f"snapshot shape mismatch for {name!r}: "
                    f"{arr.shape} vs {self._params[name].data.shape}")
            self._params[name].data = arr.copy()

    # -- forward ------------------------------------------------------------

    def forward(self, inputs: Mapping[int, Union[Tensor, np.ndarray]],
                training: bool = False, collect_attention: bool = False
                ) -> dict[int, Tensor]:
        cfg = self.config
        xs: dict[int, Tensor] = {}
        batched = None
        batch = None
        for m in self.modes:
            x = inputs[m]
            x = x if isinstance(x, Tensor) else Tensor(np.asarray(x, dtype=np.float64))
            n_m = cfg.node_counts[m]
            if x.ndim == 3:
                this_batched = False
                x = reshape(x, (1,) + x.shape)
            elif x.ndim == 4:
                this_batched = True
            else:
                raise DimensionError(
                    f"mode {m}: expected [N,2,T] or [B,N,2,T], got {x.shape}")
            if x.shape[1:] != (n_m, 2, cfg.window):
                raise DimensionError(
                    f"mode {m}: window shape {x.shape} does not match "
                    f"[B,{n_m},2,{cfg.window}]")
            if batched is None:
                batched, batch = this_batched, x.shape[0]
            elif this_batched != batched or x.shape[0] != batch:
                raise DimensionError("modes must share the batch dimension")
            xs[m] = x

        if collect_attention:
            self.last_attention = {}

        h: dict[int, Tensor] = {}
        for m in self.modes:
            flat = reshape(xs[m], (batch * cfg.node_counts[m], 2, cfg.window))
            h[m] = causal_conv1d(flat, *self.lift[m])

        length = cfg.window
        for l, bp in enumerate(self.block_params):
            try:
                h, length = self._block_forward(l, bp, h, batch, length, training,
                                                collect_attention)
            except (DimensionError, ContractError) as e:
                raise type(e)(f"block {l}: {e}") from e

        for m in self.modes:
            if self.downscale:
                h[m] = gated_tcn_forward(h[m], self.downscale[m])
            hp = self.head[m]
            v = reshape(h[m], (batch, cfg.node_counts[m], cfg.tcn_out))
            hid = relu(matmul(v, hp.w1) + hp.b1)
            if training and cfg.dropout > 0.0:
                hid = dropout(hid, cfg.dropout, self._dropout_rng)
            out = matmul(hid, hp.w2) + hp.b2
            h[m] = out if batched else reshape(out, out.shape[1:])
        return h

    def _block_forward(self, l: int, bp: BlockParams, h: dict[int, Tensor],
                       batch: int, length: int, training: bool,
                       collect_attention: bool) -> tuple[dict[int, Tensor], int]:
        cfg = self.config
        kt = cfg.kernel
        hc1 = {m: gated_tcn_forward(h[m], bp.tcn1[m]) for m in self.modes}
        t1 = length - kt + 1

        # time-major features for the per-time-step graph convolution
        feat: dict[int, Tensor] = {}
        for m in self.modes:
            n_m = cfg.node_counts[m]
            v = reshape(hc1[m], (batch, n_m, cfg.tcn_out, t1))
            v = transpose(v, (0, 3, 1, 2))
            feat[m] = reshape(v, (batch * t1, n_m, cfg.tcn_out))

        out: dict[int, Tensor] = {}
        for m in self.modes:
            n_m = cfg.node_counts[m]
            zs = [ggcn_forward(feat[n], self._adj[(m, n)],
                               bp.ggcn_w[(m, n)], bp.ggcn_b[(m, n)])
                  for n in self.source_modes[m]]
            u = len(self.kind_indices)
            if len(zs) == 1:
                z_all = transpose(zs[0], (1, 2, 0, 3))
            else:
                st = stack(zs, axis=0)  # [S, u, B*t1, N, c]
                st = reshape(st, (len(zs) * u, batch * t1, n_m, cfg.mrgnn_out))
                z_all = transpose(st, (1, 2, 0, 3))  # [B*t1, N, S*u, c]

            if self.use_attention:
                weights = relation_attention(z_all, bp.attn_w[m], bp.attn_b[m])
                if collect_attention:
                    self.last_attention[(l, m)] = (
                        weights.data.reshape(batch, t1, n_m, -1).copy())
                h_s = relation_aggregate(z_all, weights)
            else:
                h_s = tensor_sum(z_all, axis=2)

            p = matmul(h_s, bp.proj[m])  # [B*t1, N, tcn_out]
            p = reshape(p, (batch, t1, n_m, cfg.tcn_out))
            p = transpose(p, (0, 2, 3, 1))
            p = reshape(p, (batch * n_m, cfg.tcn_out, t1))

            merged = hc1[m] + p
            conv2 = gated_tcn_forward(merged, bp.tcn2[m])
            normed = layer_norm(conv2, bp.norm_gain[m], bp.norm_offset[m], axis=1)
            if training and cfg.dropout > 0.0:
                normed = dropout(normed, cfg.dropout, self._dropout_rng)
            out[m] = normed
        return out, t1 - kt + 1

    def predict(self, inputs: Mapping[int, np.ndarray], batch_size: int = 256,
                collect_attention: bool = False) -> dict[int, np.ndarray]:
        """Evaluation-mode forward over a whole window set, in batches."""
        num = next(iter(inputs.values())).shape[0]
        preds = {m: np.empty((num, self.config.node_counts[m], 2)) for m in self.modes}
        collected: dict[tuple[int, int], list[np.ndarray]] = {}
        for lo in range(0, num, batch_size):
            hi = min(lo + batch_size, num)
            batch = {m: inputs[m][lo:hi] for m in self.modes}
            out = self.forward(batch, training=False,
                               collect_attention=collect_attention)
            for m in self.modes:
                preds[m][lo:hi] = out[m].data
            if collect_attention:
                for key, arr in self.last_attention.items():
                    collected.setdefault(key, []).append(arr)
        if collect_attention:
            self.last_attention = {k: np.concatenate(v, axis=0)
                                   for k, v in collected.items()}
        return preds

    # -- persistence --------------------------------------------------------

    def save(self, path, extra_meta: Optional[dict] = None) -> None:
        cfg = asdict(self.config)
        cfg["mode_ids"] = list(cfg["mode_ids"])
        cfg["node_counts"] = {str(k): v for k, v in cfg["node_counts"].items()}
        meta = {
            "kind": "stmrgnn-model",
            "config": cfg,
            "variant": self.variant,
            "seed": self.seed,
        }
        if extra_meta:
            meta["extra"] = extra_meta
        save_checkpoint(path, meta, {n: t.data for n, t in self._params.items()})

    @classmethod
    def load(cls, path, relations: RelationSet) -> tuple["STMRGNN", dict]:
        meta, arrays = load_checkpoint(path)
        if meta.get("kind") != "stmrgnn-model":
            raise CheckpointError(f"{path}: not a model checkpoint")
        cfg_dict = dict(meta["config"])
        cfg_dict["mode_ids"] = tuple(cfg_dict["mode_ids"])
        cfg_dict["node_counts"] = {int(k): v for k, v in cfg_dict["node_counts"].items()}
        config = ModelConfig(**cfg_dict)
        model = cls(config, relations, variant=meta["variant"], seed=meta["seed"])
        model.load_snapshot(arrays)
        return model, meta.get("extra", {})


def build_variant(config: ModelConfig, variant: str, relations: RelationSet,
                  seed: int = 0) -> STMRGNN:
    """Construct the requested model variant over a full relation set."""
    return STMRGNN(config, relations, variant=variant, seed=seed)
