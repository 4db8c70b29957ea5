import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

import protofed as pf
from protofed.network import (
    flatten_trainable,
    init_adam,
    loss_and_grads,
    params_from_bytes,
    params_to_bytes,
)
from helpers import fd_max_relative_error, randomized_params, two_blob_dataset

REFERENCE_SPEC = pf.ModelSpec(115, ((128, 1e-3), (64, 1e-3)), 0.5, 3)


class TestBuildModel:
    def test_reference_architecture_parameter_count(self):
        model = pf.build_model(REFERENCE_SPEC, seed=0)
        assert model.trainable_count == 23_683

    def test_hand_counted_tiny_model(self):
        # 2*3 + 3 weights/bias, 2*3 batch-norm, 3*2 + 2 output = 23
        model = pf.build_model(pf.ModelSpec(2, ((3, 0.0),), 0.0, 2), seed=0)
        assert model.trainable_count == 23

    def test_same_seed_same_parameters(self):
        a = pf.build_model(REFERENCE_SPEC, seed=42)
        b = pf.build_model(REFERENCE_SPEC, seed=42)
        assert np.array_equal(flatten_trainable(a), flatten_trainable(b))

    def test_biases_and_norm_defaults(self):
        model = pf.build_model(pf.ModelSpec(4, ((5, 0.0),), 0.0, 3), seed=1)
        assert (model.tensors["b1"] == 0).all()
        assert (model.tensors["gamma1"] == 1).all()
        assert (model.running["mean1"] == 0).all()
        assert (model.running["var1"] == 1).all()

    @settings(max_examples=25, deadline=None)
    @given(st.data())
    def test_trainable_count_matches_closed_form(self, data):
        dims = data.draw(st.integers(1, 20))
        hidden = data.draw(st.lists(st.integers(1, 16), min_size=0, max_size=3))
        classes = data.draw(st.integers(1, 5))
        spec = pf.ModelSpec(dims, tuple((u, 0.0) for u in hidden), 0.0, classes)
        model = pf.build_model(spec, seed=0)
        expected = 0
        fan_in = dims
        for units in hidden:
            expected += fan_in * units + units + 2 * units
            fan_in = units
        expected += fan_in * classes + classes
        assert model.trainable_count == expected

    def test_dropout_requires_hidden_layer(self):
        with pytest.raises(ValueError, match="dropout"):
            pf.ModelSpec(3, (), 0.5, 2)


class TestForward:
    @settings(max_examples=25, deadline=None)
    @given(st.integers(0, 10_000))
    def test_probability_rows_sum_to_one(self, seed):
        rng = np.random.default_rng(seed)
        params = randomized_params(pf.ModelSpec(4, ((6, 0.0), (5, 0.0)), 0.0, 3), seed)
        probs, _ = pf.forward(params, rng.standard_normal((7, 4)), mode="eval")
        assert np.abs(probs.sum(axis=1) - 1.0).max() < 1e-6

    def test_train_eval_differ_only_via_batch_norm_stats(self):
        rng = np.random.default_rng(0)
        spec = pf.ModelSpec(3, ((4, 0.0),), 0.0, 2)
        params = randomized_params(spec, 0)
        x = rng.standard_normal((8, 3))
        # Align the running statistics with this batch's statistics.
        z = x @ params.tensors["w1"] + params.tensors["b1"]
        h = np.maximum(z, 0.0)
        params.running["mean1"] = h.mean(axis=0)
        params.running["var1"] = h.var(axis=0)
        eval_probs, _ = pf.forward(params, x, mode="eval")
        train_probs, _ = pf.forward(params.copy(), x, mode="train")
        assert np.allclose(eval_probs, train_probs, atol=1e-12)

    def test_hand_computed_linear_softmax(self):
        spec = pf.ModelSpec(2, (), 0.0, 2)
        params = pf.build_model(spec, seed=0)
        params.tensors["w_out"] = np.array([[1.0, 2.0], [3.0, 4.0]])
        params.tensors["b_out"] = np.array([0.5, -0.5])
        probs, _ = pf.forward(params, np.array([[1.0, 2.0]]), mode="eval")
        logits = np.array([1.0 + 6.0 + 0.5, 2.0 + 8.0 - 0.5])
        expected = np.exp(logits) / np.exp(logits).sum()
        assert np.allclose(probs[0], expected, atol=1e-12)

    def test_dimension_mismatch_rejected(self):
        params = pf.build_model(pf.ModelSpec(3, ((4, 0.0),), 0.0, 2), seed=0)
        with pytest.raises(ValueError, match="dimension mismatch"):
            pf.forward(params, np.zeros((2, 5)), mode="eval")

    def test_train_mode_updates_running_stats(self):
        params = pf.build_model(pf.ModelSpec(3, ((4, 0.0),), 0.0, 2), seed=0)
        before = params.running["mean1"].copy()
        pf.forward(params, np.random.default_rng(0).random((16, 3)) + 5.0, mode="train")
        assert not np.allclose(before, params.running["mean1"])


class TestLossAndGrads:
    def test_prox_off_equals_plain_loss(self):
        spec = pf.ModelSpec(3, ((4, 0.01),), 0.0, 2)
        params = randomized_params(spec, 1)
        rng = np.random.default_rng(1)
        x = rng.standard_normal((5, 3))
        y = rng.integers(0, 2, 5)
        base, _ = loss_and_grads(params, x, y, mode="eval")
        with_anchor, _ = loss_and_grads(
            params, x, y, prox_mu=0.0, w_global=params.copy(), mode="eval"
        )
        assert base == with_anchor

    def test_zero_deviation_means_zero_prox(self):
        spec = pf.ModelSpec(3, ((4, 0.0),), 0.0, 2)
        params = randomized_params(spec, 2)
        rng = np.random.default_rng(2)
        x = rng.standard_normal((5, 3))
        y = rng.integers(0, 2, 5)
        plain, _ = loss_and_grads(params, x, y, mode="eval")
        anchored, _ = loss_and_grads(params, x, y, prox_mu=10.0, w_global=params.copy(), mode="eval")
        assert anchored == pytest.approx(plain, abs=1e-12)

    def test_prox_without_anchor_rejected(self):
        params = pf.build_model(pf.ModelSpec(3, ((4, 0.0),), 0.0, 2), seed=0)
        with pytest.raises(ValueError, match="w_global"):
            loss_and_grads(params, np.zeros((2, 3)), np.zeros(2, dtype=int), prox_mu=0.5)

    def test_gradients_match_finite_differences(self):
        spec = pf.ModelSpec(2, ((3, 0.0),), 0.0, 2)
        assert fd_max_relative_error(spec, seed=0, mode="eval") <= 1e-4
        assert fd_max_relative_error(spec, seed=1, mode="train") <= 1e-4
        spec_l2 = pf.ModelSpec(2, ((3, 0.01), (3, 0.002)), 0.0, 3)
        assert fd_max_relative_error(spec_l2, seed=2, mode="train", prox_mu=0.7) <= 1e-4


class TestAdamStep:
    def test_zero_gradient_leaves_parameters(self):
        params = pf.build_model(pf.ModelSpec(3, ((4, 0.0),), 0.0, 2), seed=0)
        grads = {k: np.zeros_like(v) for k, v in params.tensors.items()}
        stepped, state = pf.adam_step(params, grads, init_adam(params), pf.TrainConfig())
        assert np.array_equal(flatten_trainable(stepped), flatten_trainable(params))
        assert state.t == 1

    def test_first_step_is_bias_corrected(self):
        # scalar parameter at 0, gradient 1, lr 0.1: m_hat/sqrt(v_hat) = 1
        spec = pf.ModelSpec(1, (), 0.0, 1)
        params = pf.build_model(spec, seed=0)
        params.tensors["w_out"] = np.array([[0.0]])
        grads = {"w_out": np.array([[1.0]]), "b_out": np.zeros(1)}
        config = pf.TrainConfig(learning_rate=0.1, adam_epsilon=1e-7)
        stepped, _ = pf.adam_step(params, grads, init_adam(params), config)
        assert stepped.tensors["w_out"][0, 0] == pytest.approx(-0.1, abs=1e-6)

    def test_shape_mismatch_rejected(self):
        params = pf.build_model(pf.ModelSpec(3, ((4, 0.0),), 0.0, 2), seed=0)
        grads = {k: np.zeros_like(v) for k, v in params.tensors.items()}
        grads["b1"] = np.zeros(5)
        with pytest.raises(ValueError, match="shape mismatch"):
            pf.adam_step(params, grads, init_adam(params), pf.TrainConfig())


class TestTrainLocal:
    def test_one_step_per_epoch_when_batch_covers_data(self):
        ds = two_blob_dataset(5, 3, 0.05, seed=0)
        spec = pf.ModelSpec(3, ((4, 0.0),), 0.0, 2)
        start = pf.build_model(spec, seed=1)
        config = pf.TrainConfig(epochs=3, batch_size=1000, learning_rate=0.01, seed=9)
        trained, history = pf.train_local(start, ds, config)
        assert len(history) == 3
        # oracle: replay the same three full-batch steps by hand
        work = start.copy()
        state = init_adam(work)
        rng = np.random.default_rng(np.random.SeedSequence(9))
        for _ in range(3):
            order = rng.permutation(ds.n_samples)
            _, grads = loss_and_grads(work, ds.features[order], ds.labels[order], mode="train")
            work, state = pf.adam_step(work, grads, state, config)
        assert np.array_equal(flatten_trainable(trained), flatten_trainable(work))

    def test_learns_separable_blobs(self):
        # enough steps for the batch-norm running stats (EMA 0.99) to settle
        ds = two_blob_dataset(120, 4, 0.05, seed=2)
        spec = pf.ModelSpec(4, ((8, 0.001),), 0.0, 2)
        start = pf.build_model(spec, seed=0)
        config = pf.TrainConfig(epochs=15, batch_size=16, learning_rate=0.01, seed=3)
        trained, history = pf.train_local(start, ds, config)
        report = pf.evaluate(trained, ds)
        assert report.accuracy >= 0.95
        assert history[-1] < history[0]

    def test_huge_mu_contracts_toward_anchor(self):
        ds = two_blob_dataset(20, 3, 0.1, seed=4)
        spec = pf.ModelSpec(3, ((4, 0.0),), 0.0, 2)
        start = randomized_params(spec, 5)
        anchor = pf.build_model(spec, seed=6)
        before = np.linalg.norm(flatten_trainable(start) - flatten_trainable(anchor))
        config = pf.TrainConfig(epochs=2, batch_size=8, learning_rate=0.001, prox_mu=1e6, seed=7)
        trained, _ = pf.train_local(start, ds, config, w_global=anchor)
        after = np.linalg.norm(flatten_trainable(trained) - flatten_trainable(anchor))
        assert after <= before

    def test_two_runs_identical(self):
        ds = two_blob_dataset(20, 3, 0.1, seed=8)
        spec = pf.ModelSpec(3, ((4, 0.0),), 0.3, 2)
        start = pf.build_model(spec, seed=0)
        config = pf.TrainConfig(epochs=2, batch_size=8, learning_rate=0.01, seed=11)
        first, hist_a = pf.train_local(start, ds, config)
        second, hist_b = pf.train_local(start, ds, config)
        assert hist_a == hist_b
        assert np.array_equal(flatten_trainable(first), flatten_trainable(second))

    def test_empty_dataset_rejected(self):
        ds = pf.Dataset(np.empty((0, 3)), [], ("a",))
        start = pf.build_model(pf.ModelSpec(3, ((4, 0.0),), 0.0, 2), seed=0)
        with pytest.raises(ValueError, match="empty"):
            pf.train_local(start, ds, pf.TrainConfig())


class TestEvaluate:
    def test_all_correct_gives_perfect_scores(self):
        ds = two_blob_dataset(40, 4, 0.03, seed=1)
        spec = pf.ModelSpec(4, ((8, 0.0),), 0.0, 2)
        trained, _ = pf.train_local(
            pf.build_model(spec, seed=0), ds,
            pf.TrainConfig(epochs=20, batch_size=16, learning_rate=0.02, seed=2),
        )
        report = pf.evaluate(trained, ds)
        if report.accuracy == 1.0:
            assert report.macro_f1 == 1.0
            assert report.macro_precision == 1.0
        else:  # keep the assertion meaningful even if the fit is imperfect
            assert report.accuracy >= 0.95

    def test_hand_computed_confusion_arithmetic(self):
        # predictions: argmax of [x, -x] -> class 0 iff x > 0
        spec = pf.ModelSpec(1, (), 0.0, 2)
        params = pf.build_model(spec, seed=0)
        params.tensors["w_out"] = np.array([[1.0, -1.0]])
        params.tensors["b_out"] = np.zeros(2)
        features = np.array([[1.0], [-1.0], [-1.0], [-1.0]])
        labels = np.array([0, 0, 1, 1])  # confusion [[1, 1], [0, 2]]
        report = pf.evaluate(params, pf.Dataset(features, labels, ("a", "b")))
        assert report.accuracy == pytest.approx(0.75)
        assert report.macro_precision == pytest.approx((1.0 + 2.0 / 3.0) / 2)
        assert report.macro_recall == pytest.approx((0.5 + 1.0) / 2)

    def test_chance_level_on_random_labels(self):
        rng = np.random.default_rng(9)
        ds = pf.Dataset(rng.random((3000, 4)), rng.integers(0, 3, 3000), ("a", "b", "c"))
        params = pf.build_model(pf.ModelSpec(4, ((6, 0.0),), 0.0, 3), seed=1)
        report = pf.evaluate(params, ds)
        assert abs(report.accuracy - 1.0 / 3.0) <= 0.05

    def test_loss_excludes_regularizers(self):
        ds = two_blob_dataset(10, 3, 0.1, seed=3)
        spec = pf.ModelSpec(3, ((4, 0.5),), 0.0, 2)  # huge l2
        params = randomized_params(spec, 4)
        report = pf.evaluate(params, ds)
        plain_ce, _ = loss_and_grads(params, ds.features, ds.labels, mode="eval")
        l2_term = 0.5 * float((params.tensors["w1"] ** 2).sum())
        assert report.mean_loss == pytest.approx(plain_ce - l2_term, abs=1e-9)


class TestSerialization:
    def test_round_trip_preserves_everything(self, tmp_path):
        params = randomized_params(pf.ModelSpec(5, ((6, 0.01), (4, 0.0)), 0.2, 3), 7)
        blob = params_to_bytes(params)
        restored = params_from_bytes(blob)
        assert restored.spec == params.spec
        for name in params.tensors:
            assert np.array_equal(restored.tensors[name], params.tensors[name])
        for name in params.running:
            assert np.array_equal(restored.running[name], params.running[name])

    def test_save_and_load_files(self, tmp_path):
        params = pf.build_model(pf.ModelSpec(3, ((4, 0.0),), 0.0, 2), seed=0)
        path = tmp_path / "model.params"
        pf.save_params(params, path)
        loaded = pf.load_params(path)
        assert np.array_equal(flatten_trainable(loaded), flatten_trainable(params))
