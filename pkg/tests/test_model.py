"""Network pieces against hand values and brute-force oracles, plus
variant behavior, determinism, and checkpoint persistence."""

import numpy as np
import pytest

from stmrgnn.autodiff import Tape, Tensor, backward, grad_check, tensor_sum
from stmrgnn.errors import CheckpointError, ConfigError, ContractError, DimensionError
from stmrgnn.model import (
    ModelConfig,
    STMRGNN,
    build_variant,
    gated_tcn_forward,
    GatedConvParams,
    ggcn_forward,
    relation_aggregate,
    relation_attention,
)
from stmrgnn.training import multimode_loss

from conftest import make_toy_model


def ggcn_bruteforce(features, adj, weight, bias):
    """Explicit loops over relations, target nodes, sources, and channels."""
    u, n_dst, n_src = adj.shape
    c_in, c_out = weight.shape[1], weight.shape[2]
    out = np.zeros((u, n_dst, c_out))
    for r in range(u):
        for i in range(n_dst):
            for o in range(c_out):
                acc = bias[o]
                for j in range(n_src):
                    for c in range(c_in):
                        acc += adj[r, i, j] * features[j, c] * weight[r, c, o]
                out[r, i, o] = max(acc, 0.0)
    return out


class TestGGCN:
    def test_hand_case(self):
        out = ggcn_forward(Tensor([[2.0], [4.0]]),
                           Tensor([[[0.5, 0.5]]]),
                           Tensor([[[1.0]]]), Tensor([0.0]))
        assert np.allclose(out.data, [[[3.0]]])

    def test_zero_adjacency_gives_relu_bias(self, rng):
        h = Tensor(rng.normal(size=(4, 3)))
        adj = Tensor(np.zeros((2, 3, 4)))
        w = Tensor(rng.normal(size=(2, 3, 5)))
        b = Tensor(np.array([1.0, -2.0, 0.5, 0.0, 3.0]))
        out = ggcn_forward(h, adj, w, b)
        expected = np.maximum(b.data, 0.0)
        assert np.allclose(out.data, np.broadcast_to(expected, (2, 3, 5)))

    def test_identity_propagation(self, rng):
        h = np.abs(rng.normal(size=(4, 4)))
        out = ggcn_forward(Tensor(h), Tensor(np.eye(4)[None]),
                           Tensor(np.eye(4)[None]), Tensor(np.zeros(4)))
        assert np.allclose(out.data[0], h)

    def test_matches_bruteforce_oracle(self):
        for seed in range(40):
            r = np.random.default_rng(seed)
            u = int(r.integers(1, 4))
            n_dst, n_src = int(r.integers(1, 6)), int(r.integers(1, 6))
            c_in, c_out = int(r.integers(1, 5)), int(r.integers(1, 5))
            h = r.normal(size=(n_src, c_in))
            adj = r.uniform(0, 1, size=(u, n_dst, n_src))
            w = r.normal(size=(u, c_in, c_out))
            b = r.normal(size=c_out)
            fast = ggcn_forward(Tensor(h), Tensor(adj), Tensor(w), Tensor(b))
            slow = ggcn_bruteforce(h, adj, w, b)
            assert np.max(np.abs(fast.data - slow)) < 1e-10

    def test_batched_matches_per_sample(self, rng):
        h = rng.normal(size=(3, 5, 4))
        adj = rng.uniform(0, 1, size=(2, 6, 5))
        w = rng.normal(size=(2, 4, 3))
        b = rng.normal(size=3)
        batched = ggcn_forward(Tensor(h), Tensor(adj), Tensor(w), Tensor(b))
        assert batched.shape == (2, 3, 6, 3)
        for i in range(3):
            single = ggcn_forward(Tensor(h[i]), Tensor(adj), Tensor(w), Tensor(b))
            assert np.allclose(batched.data[:, i], single.data, atol=1e-12)

    def test_node_count_mismatch(self, rng):
        with pytest.raises(DimensionError):
            ggcn_forward(Tensor(rng.normal(size=(4, 3))),
                         Tensor(rng.uniform(size=(1, 2, 5))),
                         Tensor(rng.normal(size=(1, 3, 2))), Tensor(np.zeros(2)))

    def test_permutation_equivariance(self, rng):
        """Permuting source nodes together with adjacency columns leaves
        every target output unchanged."""
        h = rng.normal(size=(6, 4))
        adj = rng.uniform(size=(2, 3, 6))
        w = rng.normal(size=(2, 4, 3))
        b = rng.normal(size=3)
        perm = rng.permutation(6)
        base = ggcn_forward(Tensor(h), Tensor(adj), Tensor(w), Tensor(b))
        shuffled = ggcn_forward(Tensor(h[perm]), Tensor(adj[:, :, perm]),
                                Tensor(w), Tensor(b))
        assert np.allclose(base.data, shuffled.data, atol=1e-12)


class TestRelationAttention:
    def test_single_relation_weight_one(self, rng):
        z = Tensor(rng.normal(size=(1, 3)))
        w = relation_attention(z, Tensor(rng.normal(size=(3, 1))), Tensor([0.0]))
        assert np.allclose(w.data, [1.0])

    def test_zero_scoring_gives_uniform(self, rng):
        z = Tensor(rng.normal(size=(7, 4, 2)))
        w = relation_attention(z, Tensor(np.zeros((8, 1))), Tensor([0.3]))
        assert np.allclose(w.data, 0.25)

    def test_crafted_logits(self):
        # blocks of W_a pick out z entries so logits become [0, ln3, 0, 0]
        z = np.zeros((4, 2))
        z[1, 0] = np.log(3.0)
        wa = np.zeros((8, 1))
        wa[2, 0] = 1.0  # relation 1, channel 0
        w = relation_attention(Tensor(z), Tensor(wa), Tensor([0.0]))
        assert np.allclose(w.data, [1 / 6, 1 / 2, 1 / 6, 1 / 6])

    def test_simplex_property_many_seeds(self):
        for seed in range(100):
            r = np.random.default_rng(seed)
            z = Tensor(r.normal(size=(5, 3, 4, 2)))
            w = relation_attention(z, Tensor(r.normal(size=(8, 1))),
                                   Tensor(r.normal(size=1)))
            sums = w.data.sum(axis=-1)
            assert np.all(np.abs(sums - 1.0) < 1e-9)
            assert np.all(w.data >= 0.0)

    def test_scalar_bias_does_not_change_weights(self, rng):
        z = Tensor(rng.normal(size=(6, 4, 2)))
        wa = Tensor(rng.normal(size=(8, 1)))
        a = relation_attention(z, wa, Tensor([0.0]))
        b = relation_attention(z, wa, Tensor([5.0]))
        assert np.allclose(a.data, b.data, atol=1e-12)

    def test_dimension_mismatch(self, rng):
        with pytest.raises(DimensionError):
            relation_attention(Tensor(rng.normal(size=(4, 2))),
                               Tensor(rng.normal(size=(9, 1))), Tensor([0.0]))


class TestRelationAggregate:
    def test_one_hot_selects(self, rng):
        z = rng.normal(size=(3, 4))
        out = relation_aggregate(Tensor(z), Tensor([0.0, 1.0, 0.0]))
        assert np.allclose(out.data, z[1])

    def test_cancellation(self):
        v = np.array([1.0, -2.0, 3.0])
        z = Tensor(np.stack([v, -v]))
        out = relation_aggregate(z, Tensor([0.5, 0.5]))
        assert np.allclose(out.data, 0.0)

    def test_hand_case(self):
        z = Tensor(np.array([[4.0, 0.0], [0.0, 4.0]]))
        out = relation_aggregate(z, Tensor([0.25, 0.75]))
        assert np.allclose(out.data, [1.0, 3.0])


class TestGatedTCN:
    def params(self, rng, c_out, c_in, k):
        return GatedConvParams(
            w1=Tensor(rng.normal(size=(c_out, c_in, k))),
            b1=Tensor(rng.normal(size=c_out)),
            w2=Tensor(np.zeros((c_out, c_in, k))),
            b2=Tensor(np.zeros(c_out)),
        )

    def test_saturated_gate_passes_information(self, rng):
        p = self.params(rng, 3, 2, 2)
        p.b2 = Tensor(np.full(3, 60.0))
        x = Tensor(rng.normal(size=(4, 2, 6)))
        from stmrgnn.autodiff import causal_conv1d
        out = gated_tcn_forward(x, p)
        assert np.allclose(out.data, causal_conv1d(x, p.w1, p.b1).data, atol=1e-12)

    def test_zero_gate_halves_information(self, rng):
        p = self.params(rng, 3, 2, 2)
        x = Tensor(rng.normal(size=(4, 2, 6)))
        from stmrgnn.autodiff import causal_conv1d
        out = gated_tcn_forward(x, p)
        assert np.allclose(out.data, 0.5 * causal_conv1d(x, p.w1, p.b1).data)

    def test_box_kernel_open_gate(self):
        p = GatedConvParams(w1=Tensor([[[1.0, 1.0]]]), b1=Tensor([0.0]),
                            w2=Tensor(np.zeros((1, 1, 2))), b2=Tensor([80.0]))
        out = gated_tcn_forward(Tensor([[[1.0, 2.0, 3.0]]]), p)
        assert np.allclose(out.data, [[[3.0, 5.0]]])


class TestModelForward:
    def test_output_shapes_and_time_arithmetic(self, tiny_relations):
        model = make_toy_model(tiny_relations)
        # window 6, 2 blocks, kernel 2: post-block length 2 -> downscale to 1
        assert model.config.post_block_length == 2
        assert model.config.needs_downscale
        r = np.random.default_rng(1)
        inputs = {m: r.uniform(size=(3, tiny_relations.node_sets[m].size, 2, 6))
                  for m in (1, 2)}
        out = model.forward(inputs)
        assert out[1].shape == (3, 8, 2)
        assert out[2].shape == (3, 5, 2)

    def test_single_window_convenience(self, toy_model, tiny_relations):
        r = np.random.default_rng(2)
        inputs = {m: r.uniform(size=(tiny_relations.node_sets[m].size, 2, 6))
                  for m in (1, 2)}
        out = toy_model.forward(inputs)
        assert out[1].shape == (8, 2)
        assert out[2].shape == (5, 2)

    def test_window_length_validated(self, toy_model):
        r = np.random.default_rng(3)
        with pytest.raises(DimensionError):
            toy_model.forward({1: r.uniform(size=(8, 2, 5)),
                               2: r.uniform(size=(5, 2, 5))})

    def test_config_rejects_too_short_window(self, tiny_relations):
        with pytest.raises(ConfigError):
            make_toy_model(tiny_relations, window=4, blocks=2, kernel=2)

    def test_all_zero_params_predict_head_bias(self, tiny_relations):
        model = make_toy_model(tiny_relations)
        for t in model.parameters().values():
            t.data = np.zeros_like(t.data)
        bias = np.array([0.7, -0.3])
        model.head[1].b2.data = bias.copy()
        r = np.random.default_rng(4)
        out = model.forward({m: r.uniform(size=(tiny_relations.node_sets[m].size, 2, 6))
                             for m in (1, 2)})
        assert np.allclose(out[1].data, bias)
        assert np.allclose(out[2].data, 0.0)

    def test_eval_deterministic_training_stochastic(self, tiny_relations):
        model = make_toy_model(tiny_relations, dropout=0.4)
        r = np.random.default_rng(5)
        inputs = {m: r.uniform(size=(2, tiny_relations.node_sets[m].size, 2, 6))
                  for m in (1, 2)}
        a = model.forward(inputs)[1].data
        b = model.forward(inputs)[1].data
        assert np.array_equal(a, b)
        ta = model.forward(inputs, training=True)[1].data
        tb = model.forward(inputs, training=True)[1].data
        assert not np.array_equal(ta, tb)

    def test_no_residual_sequence_when_window_exact(self, tiny_relations):
        model = make_toy_model(tiny_relations, window=5, blocks=1, kernel=2)
        # 5 - 1*(2-1)*2 = 3 > 1 -> downscale present
        assert model.config.post_block_length == 3
        assert model.downscale
        model2 = make_toy_model(tiny_relations, window=3, blocks=1, kernel=2)
        assert model2.config.post_block_length == 1
        assert not model2.downscale
        r = np.random.default_rng(6)
        out = model2.forward({m: r.uniform(size=(model2.config.node_counts[m], 2, 3))
                              for m in (1, 2)})
        assert out[1].shape == (8, 2)


class TestVariants:
    def test_unknown_variant_rejected(self, tiny_relations):
        with pytest.raises(ContractError):
            make_toy_model(tiny_relations, variant="bogus")

    def test_slot_counts(self, tiny_relations):
        assert len(make_toy_model(tiny_relations).slot_labels(1)) == 4
        assert len(make_toy_model(tiny_relations,
                                  variant="no_intergraph").slot_labels(1)) == 2
        assert len(make_toy_model(tiny_relations, variant="no_geo").slot_labels(1)) == 2
        assert len(make_toy_model(tiny_relations,
                                  variant="no_functional").slot_labels(1)) == 2

    def test_no_geo_uses_functional_only(self, tiny_relations):
        model = make_toy_model(tiny_relations, variant="no_geo")
        assert all("functional" in l for l in model.slot_labels(1))
        model_f = make_toy_model(tiny_relations, variant="no_functional")
        assert all("geo" in l for l in model_f.slot_labels(1))

    def test_no_attention_sums_relations(self, tiny_relations):
        model = make_toy_model(tiny_relations, variant="no_attention")
        assert not any("attn" in name for name in model.parameters())
        r = np.random.default_rng(7)
        inputs = {m: r.uniform(size=(model.config.node_counts[m], 2, 6))
                  for m in (1, 2)}
        out = model.forward(inputs)
        assert np.all(np.isfinite(out[1].data))

    def test_no_intergraph_isolates_modes(self, tiny_relations):
        model = make_toy_model(tiny_relations, variant="no_intergraph")
        r = np.random.default_rng(8)
        inputs = {m: r.uniform(size=(2, model.config.node_counts[m], 2, 6))
                  for m in (1, 2)}
        base = model.forward(inputs)
        perturbed = {1: inputs[1], 2: inputs[2] + r.uniform(size=inputs[2].shape)}
        after = model.forward(perturbed)
        assert np.array_equal(base[1].data, after[1].data)  # bit-identical
        assert not np.array_equal(base[2].data, after[2].data)

    def test_full_model_couples_modes(self, tiny_relations):
        model = make_toy_model(tiny_relations)
        r = np.random.default_rng(9)
        inputs = {m: r.uniform(size=(2, model.config.node_counts[m], 2, 6))
                  for m in (1, 2)}
        base = model.forward(inputs)
        perturbed = {1: inputs[1], 2: inputs[2] + 1.0}
        after = model.forward(perturbed)
        assert not np.array_equal(base[1].data, after[1].data)

    def test_build_variant_helper(self, tiny_relations):
        cfg = make_toy_model(tiny_relations).config
        model = build_variant(cfg, "no_attention", tiny_relations, seed=3)
        assert model.variant == "no_attention"


class TestAttentionCollection:
    def test_weights_sum_to_one_per_node_step(self, tiny_relations):
        model = make_toy_model(tiny_relations)
        r = np.random.default_rng(10)
        inputs = {m: r.uniform(size=(4, model.config.node_counts[m], 2, 6))
                  for m in (1, 2)}
        model.forward(inputs, collect_attention=True)
        assert set(model.last_attention) == {(0, 1), (0, 2), (1, 1), (1, 2)}
        for (b, m), w in model.last_attention.items():
            assert w.shape[-1] == 4
            assert np.all(np.abs(w.sum(axis=-1) - 1.0) < 1e-9)


class TestEndToEndGradients:
    def test_toy_model_gradcheck(self, tiny_relations):
        """Analytic gradients of the full forward + L1 loss vs finite
        differences, for a sample of parameters of every kind."""
        model = make_toy_model(tiny_relations)
        r = np.random.default_rng(11)
        inputs = {m: r.uniform(size=(2, model.config.node_counts[m], 2, 6))
                  for m in (1, 2)}
        targets = {m: r.uniform(size=(2, model.config.node_counts[m], 2))
                   for m in (1, 2)}
        weights = {1: 0.5, 2: 0.5}

        def loss_fn(_):
            preds = model.forward(inputs, training=False)
            return multimode_loss(preds, targets, weights, "l1")

        names = ["lift.m1.w", "block0.tcn1.m1.w1", "block0.ggcn.t1.s2.w",
                 "block0.ggcn.t2.s2.b", "block0.attn.m1.w", "block0.attn.m2.b",
                 "block0.proj.m2", "block0.norm.m1.gain", "block1.tcn2.m2.b2",
                 "downscale.m1.w2", "head.m2.w1", "head.m1.b2"]
        for name in names:
            err = grad_check(lambda v: loss_fn(v), model.parameters()[name],
                             step=1e-6)
            assert err < 1e-4, f"{name}: {err}"


class TestPersistence:
    def test_save_load_bit_identical_predictions(self, tiny_relations, tmp_path):
        model = make_toy_model(tiny_relations, seed=21)
        r = np.random.default_rng(12)
        inputs = {m: r.uniform(size=(3, model.config.node_counts[m], 2, 6))
                  for m in (1, 2)}
        before = model.forward(inputs)
        model.save(tmp_path / "m.stm", extra_meta={"note": "t"})
        loaded, extra = STMRGNN.load(tmp_path / "m.stm", tiny_relations)
        assert extra == {"note": "t"}
        after = loaded.forward(inputs)
        for m in (1, 2):
            assert np.array_equal(before[m].data, after[m].data)

    def test_checkpoint_bytes_deterministic(self, tiny_relations, tmp_path):
        make_toy_model(tiny_relations, seed=2).save(tmp_path / "a.stm")
        make_toy_model(tiny_relations, seed=2).save(tmp_path / "b.stm")
        assert (tmp_path / "a.stm").read_bytes() == (tmp_path / "b.stm").read_bytes()

    def test_corrupt_checkpoint_rejected(self, tiny_relations, tmp_path):
        p = tmp_path / "c.stm"
        model = make_toy_model(tiny_relations)
        model.save(p)
        data = bytearray(p.read_bytes())
        p.write_bytes(bytes(data[: len(data) // 2]))
        with pytest.raises(CheckpointError):
            STMRGNN.load(p, tiny_relations)

    def test_same_seed_same_init(self, tiny_relations):
        a = make_toy_model(tiny_relations, seed=9)
        b = make_toy_model(tiny_relations, seed=9)
        for name in a.parameters():
            assert np.array_equal(a.parameters()[name].data,
                                  b.parameters()[name].data)
