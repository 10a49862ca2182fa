import numpy as np
import pytest

from auxstream.auxlayer import (AuxLayerState, build_aux_input, freeze_masks, make_mask,
                                masked_backward, masked_forward, param_count, random_mask,
                                register_sudden_feature)
from auxstream.errors import ConfigError
from auxstream.nn import DenseLayer


def make_state(n_nodes=10, aux_ids=("f1", "f2"), hidden_dim=3, dropout=0.5, seed=0,
               activation="relu", mode="bernoulli"):
    layer = DenseLayer(len(aux_ids) + hidden_dim, n_nodes, activation,
                       rng=np.random.default_rng(seed), name="aux")
    return AuxLayerState(layer, aux_ids, dropout, position=2, random_drop_mode=mode)


def full_keep_mask(n):
    return random_mask(n, 0.0, np.random.default_rng(0))


class TestAuxInput:
    def test_zero_fill_of_missing_slot(self):
        state = make_state(aux_ids=("f1", "f2"), hidden_dim=1)
        built = build_aux_input(np.array([0.5]), {"f2": 3.0}, state)
        assert np.array_equal(built.concatenated, [0.0, 3.0, 0.5])
        assert built.present_slots == (1,)

    def test_no_aux_available(self):
        state = make_state(aux_ids=("f1", "f2"), hidden_dim=2)
        built = build_aux_input(np.array([1.5, -2.0]), {}, state)
        assert np.array_equal(built.aux_values, [0.0, 0.0])
        assert np.array_equal(built.concatenated, [0.0, 0.0, 1.5, -2.0])

    def test_unregistered_id_is_a_hard_error(self):
        state = make_state()
        with pytest.raises(KeyError, match="unregistered"):
            build_aux_input(np.zeros(3), {"nope": 1.0}, state)

    def test_growth_extends_vector_and_preserves_slot_order(self):
        state = make_state(aux_ids=("f1", "f2"), hidden_dim=2, seed=3)
        before = build_aux_input(np.array([0.1, 0.2]), {"f1": 5.0}, state)
        register_sudden_feature(state, "f3", np.random.default_rng(9))
        after = build_aux_input(np.array([0.1, 0.2]), {"f1": 5.0}, state)
        assert after.concatenated.size == before.concatenated.size + 1
        assert np.array_equal(after.aux_values[:2], before.aux_values)
        assert after.aux_values[2] == 0.0
        with_new = build_aux_input(np.array([0.1, 0.2]), {"f1": 5.0, "f3": 7.0}, state)
        assert with_new.aux_values[2] == 7.0 and with_new.present_slots == (0, 2)

    def test_hidden_length_checked(self):
        state = make_state(hidden_dim=3)
        with pytest.raises(ValueError, match="length"):
            build_aux_input(np.zeros(2), {}, state)


class TestMakeMask:
    def test_selective_and_prob_arithmetic(self):
        # 10 nodes, rate .5, five coupled features, two available -> three
        # forced drops and (5 - 3) / 7 for the rest.
        ids = [f"a{i}" for i in range(5)]
        state = make_state(n_nodes=10, aux_ids=ids, dropout=0.5)
        mask = make_mask(state, {"a1", "a3"}, np.random.default_rng(0))
        assert mask.selective == frozenset({0, 2, 4})
        assert mask.per_node_prob == pytest.approx(2.0 / 7.0, abs=1e-15)
        assert not mask.clamped

    def test_all_available_degenerates_to_plain_dropout(self):
        ids = [f"a{i}" for i in range(5)]
        state = make_state(n_nodes=10, aux_ids=ids, dropout=0.5)
        mask = make_mask(state, set(ids), np.random.default_rng(0))
        assert mask.selective == frozenset()
        assert mask.per_node_prob == 0.5

    def test_unknown_available_id_rejected(self):
        state = make_state()
        with pytest.raises(KeyError):
            make_mask(state, {"zzz"}, np.random.default_rng(0))

    @pytest.mark.filterwarnings("ignore:dropout capacity")
    def test_partition_and_selective_correctness(self):
        rng = np.random.default_rng(101)
        for _ in range(200):
            n_aux = int(rng.integers(0, 6))
            ids = [f"a{i}" for i in range(n_aux)]
            n_nodes = int(rng.integers(max(n_aux, 1), 16))
            state = make_state(n_nodes=n_nodes, aux_ids=ids or ("dummy",), dropout=0.4)
            if not ids:
                state = make_state(n_nodes=n_nodes, aux_ids=("a0",), dropout=0.4)
                ids = ["a0"]
            available = {f for f in ids if rng.random() < 0.5}
            mask = make_mask(state, available, rng)
            everything = mask.selective | mask.random | mask.kept
            assert everything == frozenset(range(state.node_count))
            assert not (mask.selective & mask.random)
            assert not (mask.selective & mask.kept)
            assert not (mask.random & mask.kept)
            for fid, node in state.aux_registry.items():
                assert (node in mask.selective) == (fid not in available)

    def test_montecarlo_drop_frequency(self):
        # p = 2/7 case from the arithmetic test: per-node empirical drop
        # frequency over 1e5 masks within 0.01.
        ids = [f"a{i}" for i in range(5)]
        state = make_state(n_nodes=10, aux_ids=ids, dropout=0.5)
        rng = np.random.default_rng(7)
        trials = 100_000
        counts = np.zeros(10)
        for _ in range(trials):
            mask = make_mask(state, {"a1", "a3"}, rng)
            for node in mask.random:
                counts[node] += 1
        leftover = [n for n in range(10) if n not in (0, 2, 4)]
        freqs = counts[leftover] / trials
        assert np.all(np.abs(freqs - 2.0 / 7.0) <= 0.01)

    def test_expected_total_drops(self):
        ids = [f"a{i}" for i in range(4)]
        state = make_state(n_nodes=12, aux_ids=ids, dropout=0.5)
        rng = np.random.default_rng(17)
        trials = 20_000
        totals = np.empty(trials)
        for k in range(trials):
            mask = make_mask(state, {"a0", "a2"}, rng)
            totals[k] = len(mask.selective) + len(mask.random)
        target = 12 * 0.5
        per_mask_var = 10 * (4.0 / 10.0) * (6.0 / 10.0)  # leftover Bernoulli variance
        assert abs(totals.mean() - target) <= 3 * np.sqrt(per_mask_var / trials)

    def test_clamp_when_too_many_features_missing(self):
        ids = [f"a{i}" for i in range(6)]
        with pytest.warns(UserWarning, match="capacity"):
            state = make_state(n_nodes=10, aux_ids=ids, dropout=0.3)
        mask = make_mask(state, set(), np.random.default_rng(0))
        assert mask.clamped and mask.per_node_prob == 0.0
        assert mask.selective == frozenset(range(6))
        assert mask.random == frozenset()
        assert state.clamp_count == 1

    def test_exact_count_mode_drops_exactly(self):
        ids = [f"a{i}" for i in range(4)]
        state = make_state(n_nodes=10, aux_ids=ids, dropout=0.5, mode="exact_count")
        rng = np.random.default_rng(3)
        for available in ({"a0"}, set(ids), set()):
            mask = make_mask(state, available, rng)
            assert len(mask.selective) + len(mask.random) == 5


class TestMaskedForwardBackward:
    def test_all_dropped_outputs_zero(self):
        state = make_state(n_nodes=6, aux_ids=("f1",), hidden_dim=2, seed=5)
        built = build_aux_input(np.array([1.0, -1.0]), {"f1": 2.0}, state)
        mask = random_mask(6, 1.1, np.random.default_rng(0))
        assert len(mask.random) == 6
        assert np.array_equal(masked_forward(state, built, mask), np.zeros(6))

    def test_no_drop_zero_aux_equals_plain_dense(self):
        state = make_state(n_nodes=6, aux_ids=("f1", "f2"), hidden_dim=2, seed=6)
        built = build_aux_input(np.array([0.3, 0.7]), {}, state)
        out = masked_forward(state, built, full_keep_mask(6))
        dense = state.layer.forward(np.concatenate([np.zeros(2), [0.3, 0.7]]))
        assert np.allclose(out, dense, rtol=0, atol=1e-12)

    def test_elementwise_keep_oracle(self):
        rng = np.random.default_rng(31)
        for _ in range(25):
            state = make_state(n_nodes=8, aux_ids=("f1", "f2", "f3"), hidden_dim=3,
                               seed=int(rng.integers(1 << 30)), dropout=0.5)
            available = {f: float(rng.normal()) for f in ("f1", "f2", "f3")
                         if rng.random() < 0.6}
            built = build_aux_input(rng.normal(size=3), available, state)
            mask = make_mask(state, set(available), rng)
            out = masked_forward(state, built, mask)
            dense = state.layer.forward(built.concatenated)
            keep = mask.keep_vector(8)
            assert np.allclose(out, dense * keep, rtol=0, atol=1e-12)
            assert all(out[i] == 0.0 for i in mask.dropped)

    def test_all_dropped_zero_gradients(self):
        state = make_state(n_nodes=5, aux_ids=("f1",), hidden_dim=2, seed=8)
        built = build_aux_input(np.array([0.5, 0.5]), {"f1": 1.0}, state)
        mask = random_mask(5, 1.1, np.random.default_rng(0))
        masked_forward(state, built, mask)
        grads, downstream = masked_backward(state, np.ones(5), mask)
        assert np.array_equal(grads.weights, np.zeros_like(grads.weights))
        assert np.array_equal(grads.bias, np.zeros(5))
        assert np.array_equal(downstream, np.zeros(2))

    def test_absent_feature_column_has_zero_gradient_and_zero_sensitivity(self):
        state = make_state(n_nodes=6, aux_ids=("f1", "f2"), hidden_dim=2, seed=9)
        built = build_aux_input(np.array([0.4, -0.6]), {"f2": 2.0}, state)
        mask = make_mask(state, {"f2"}, np.random.default_rng(4))

        def loss_fn():
            return float(masked_forward(state, built, mask).sum())

        loss_fn()
        grads, _ = masked_backward(state, np.ones(6), mask)
        assert np.array_equal(grads.weights[:, 0], np.zeros(6))
        # finite differences: the absent feature's column cannot move the loss
        for node in range(6):
            orig = state.layer.weights[node, 0]
            state.layer.weights[node, 0] = orig + 1e-3
            plus = loss_fn()
            state.layer.weights[node, 0] = orig - 1e-3
            minus = loss_fn()
            state.layer.weights[node, 0] = orig
            assert plus == minus

    def test_kept_gradients_match_zeroed_clone(self):
        # independent oracle: a clone with dropped nodes' weights and bias
        # zeroed, run without any mask, must produce the same kept gradients.
        rng = np.random.default_rng(44)
        state = make_state(n_nodes=7, aux_ids=("f1", "f2"), hidden_dim=3, seed=10)
        built = build_aux_input(rng.normal(size=3), {"f1": 1.5}, state)
        mask = make_mask(state, {"f1"}, rng)
        masked_forward(state, built, mask)
        upstream = rng.normal(size=7)
        grads, _ = masked_backward(state, upstream, mask)

        clone = DenseLayer(5, 7, "relu", rng=np.random.default_rng(0))
        clone.weights = state.layer.weights.copy()
        clone.bias = state.layer.bias.copy()
        clone.grads.weights = np.zeros_like(clone.weights)
        clone.grads.bias = np.zeros_like(clone.bias)
        for node in mask.dropped:
            clone.weights[node, :] = 0.0
            clone.bias[node] = 0.0
        clone.forward(built.concatenated)
        clone.backward(upstream)
        kept = sorted(mask.kept)
        assert np.allclose(grads.weights[kept], clone.grads.weights[kept], rtol=0, atol=1e-12)
        assert np.allclose(grads.bias[kept], clone.grads.bias[kept], rtol=0, atol=1e-12)

    def test_freeze_masks_agree_with_masked_gradients(self):
        rng = np.random.default_rng(53)
        state = make_state(n_nodes=9, aux_ids=("f1", "f2", "f3"), hidden_dim=2, seed=11)
        available = {"f2": 0.7}
        built = build_aux_input(rng.normal(size=2), available, state)
        mask = make_mask(state, set(available), rng)
        masked_forward(state, built, mask)
        grads, _ = masked_backward(state, rng.normal(size=9), mask)
        frozen_w, frozen_b = freeze_masks(state, mask, set(available))
        assert np.array_equal(grads.weights[frozen_w], np.zeros(frozen_w.sum()))
        assert np.array_equal(grads.bias[frozen_b], np.zeros(frozen_b.sum()))
        for node in mask.dropped:
            assert frozen_w[node].all() and frozen_b[node]
        for slot, fid in enumerate(state.aux_registry):
            if fid not in available:
                assert frozen_w[:, slot].all()

    def test_downstream_flows_only_through_kept_nodes(self):
        rng = np.random.default_rng(60)
        state = make_state(n_nodes=6, aux_ids=("f1",), hidden_dim=3, seed=12,
                           activation="identity")
        built = build_aux_input(rng.normal(size=3), {"f1": 1.0}, state)
        mask = make_mask(state, {"f1"}, rng)
        masked_forward(state, built, mask)
        upstream = rng.normal(size=6)
        _, downstream = masked_backward(state, upstream, mask)
        kept = sorted(mask.kept)
        expected = state.layer.weights[kept, 1:].T @ upstream[kept]
        assert np.allclose(downstream, expected, rtol=0, atol=1e-12)


class TestGrowth:
    def test_register_grows_pool_and_replays_exactly(self):
        state = make_state(n_nodes=100, aux_ids=[f"a{i}" for i in range(10)],
                           hidden_dim=8, dropout=0.3, seed=13)
        rng = np.random.default_rng(71)
        inputs = [(rng.normal(size=8), {f"a{i}": float(rng.normal())
                                        for i in range(10) if rng.random() < 0.7})
                  for _ in range(10)]
        masks = []
        recorded = []
        for hidden, available in inputs:
            mask = make_mask(state, set(available), rng)
            masks.append(mask)
            built = build_aux_input(hidden, available, state)
            recorded.append(masked_forward(state, built, mask))
        register_sudden_feature(state, "late", np.random.default_rng(99))
        assert state.node_count == 101
        for (hidden, available), mask, want in zip(inputs, masks, recorded):
            grown_mask = type(mask)(selective=mask.selective | {100}, random=mask.random,
                                    kept=mask.kept, per_node_prob=mask.per_node_prob)
            built = build_aux_input(hidden, available, state)
            got = masked_forward(state, built, grown_mask)
            assert np.array_equal(got[:100], want)

    def test_register_keeps_existing_parameters_bit_identical(self):
        state = make_state(n_nodes=8, aux_ids=("f1", "f2"), hidden_dim=3, seed=14)
        consumer = DenseLayer(8, 4, rng=np.random.default_rng(15), name="next")
        w0, b0 = state.layer.weights.copy(), state.layer.bias.copy()
        cw0, cb0 = consumer.weights.copy(), consumer.bias.copy()
        node = register_sudden_feature(state, "f3", np.random.default_rng(16),
                                       next_layer=consumer)
        assert node == 8 and state.aux_registry["f3"] == 8
        assert state.node_count == 9 and state.non_aux_count == 6
        old_cols = [0, 1] + list(range(3, 6))  # new slot went in at index 2
        assert np.array_equal(state.layer.weights[:8][:, old_cols], w0)
        assert np.array_equal(state.layer.bias[:8], b0)
        assert state.layer.bias[8] == 0.0
        assert np.array_equal(consumer.weights[:, :8], cw0)
        assert np.array_equal(consumer.bias, cb0)
        assert consumer.in_dim == 9

    def test_duplicate_registration_rejected(self):
        state = make_state()
        with pytest.raises(ConfigError, match="already registered"):
            register_sudden_feature(state, "f1", np.random.default_rng(0))

    def test_registry_stays_injective(self):
        state = make_state(n_nodes=12, aux_ids=("f1", "f2"), hidden_dim=2, seed=17)
        for name in ("g1", "g2", "g3"):
            register_sudden_feature(state, name, np.random.default_rng(18))
        nodes = list(state.aux_registry.values())
        assert len(nodes) == len(set(nodes))
        assert state.node_count == state.non_aux_count + len(state.aux_registry)


class TestParamCount:
    def test_dedicated_layer_difference_at_published_scale(self):
        report = param_count(200, 800, depth=4, width=200, position=3, n_base=10)
        assert report.dedicated_layer_extra == 32_040_000
        assert report.with_aux - report.backbone == 200 * 800

    def test_zero_aux_features_changes_nothing(self):
        report = param_count(0, 50, depth=3, width=20, position=2, n_base=5)
        assert report.with_aux == report.backbone

    def test_enumeration_oracle_small_net(self):
        # hand-enumerated: base 3, layers [4, aux 6, 4], ogd head on 2 classes
        report = param_count(2, 6, depth=3, width=4, position=2, n_base=3,
                             n_classes=2, backbone="ogd")
        expected_backbone = (4 * 3 + 4) + (6 * 4 + 6) + (4 * 6 + 4) + (2 * 4 + 2)
        assert report.backbone == expected_backbone
        assert report.with_aux == expected_backbone + 2 * 6

    def test_odl_heads_skip_aux_layer(self):
        report = param_count(2, 6, depth=3, width=4, position=2, n_base=3,
                             n_classes=2, backbone="odl")
        dense_part = (4 * 3 + 4) + (6 * 4 + 6) + (4 * 6 + 4)
        heads = 2 * (2 * 4 + 2)  # layers 1 and 3 only
        assert report.backbone == dense_part + heads

    def test_position_validated(self):
        with pytest.raises(ConfigError):
            param_count(2, 6, depth=3, width=4, position=5, n_base=3)
