import zlib

import numpy as np
import pytest

from cartoforge.corpus import Dataset, Example
from cartoforge.synth import make_random_corpus, make_separable_corpus
from cartoforge.toytrainer import (
    GradientCheckReport,
    ToyModelConfig,
    TrainerError,
    accuracy,
    ce_loss_and_grad,
    featurize,
    gradient_check,
    predict_over_epochs,
    train,
)


class TestFeaturize:
    def test_empty_text_gives_zero_vector(self):
        vec = featurize(Example(id="e", premise="", hypothesis=""), 32)
        assert not vec.any()

    def test_identical_examples_have_cosine_one(self):
        ex = Example(id="e", premise="The cat sat on the mat", hypothesis="A cat sat")
        a, b = featurize(ex, 64), featurize(ex, 64)
        assert float(a @ b) == pytest.approx(1.0)

    def test_one_shared_one_distinct_token_gives_cosine_half(self):
        # hand-computed tf vectors: {a:1, b:1}/sqrt(2) vs {a:1, c:1}/sqrt(2)
        # share exactly the "a" bucket, so the dot product is 1/2
        dims = 32
        half = dims // 2
        buckets = {tok: zlib.crc32(tok.encode()) % half for tok in ("a", "b", "c")}
        assert len(set(buckets.values())) == 3, "chosen tokens must not collide"
        va = featurize(Example(id="1", premise="a b", hypothesis=""), dims)
        vb = featurize(Example(id="2", premise="a c", hypothesis=""), dims)
        assert float(va @ vb) == pytest.approx(0.5)

    def test_premise_and_hypothesis_live_in_disjoint_halves(self):
        dims = 64
        vp = featurize(Example(id="1", premise="word", hypothesis=""), dims)
        vh = featurize(Example(id="2", premise="", hypothesis="word"), dims)
        assert float(vp @ vh) == 0.0

    def test_case_and_punctuation_insensitive_tokenization(self):
        a = featurize(Example(id="1", premise="Hello, World!", hypothesis=""), 64)
        b = featurize(Example(id="2", premise="hello world", hypothesis=""), 64)
        assert float(a @ b) == pytest.approx(1.0)


class TestTrain:
    def test_separable_data_reaches_high_accuracy(self):
        ds = make_separable_corpus(120, seed=5)
        cfg = ToyModelConfig(epochs=5, learning_rate=0.5, batch_size=16, hash_dims=64, rng_seed=1)
        state, _ = train(ds, cfg)
        assert accuracy(state, ds) >= 0.95

    def test_shuffled_labels_give_chance_accuracy_held_out(self):
        # train accuracy on random labels exceeds chance through memorization;
        # chance level is a held-out property
        train_ds = make_random_corpus(900, seed=11)
        test_ds = make_random_corpus(900, seed=12, name="randtest")
        cfg = ToyModelConfig(epochs=3, learning_rate=0.1, batch_size=32, hash_dims=128, rng_seed=2)
        state, _ = train(train_ds, cfg)
        assert accuracy(state, test_ds) == pytest.approx(1 / 3, abs=0.1)

    def test_same_seed_gives_bit_identical_logs(self):
        ds = make_separable_corpus(60, seed=5)
        cfg = ToyModelConfig(epochs=4, batch_size=8, hash_dims=32, rng_seed=9)
        _, log1 = train(ds, cfg)
        _, log2 = train(ds, cfg)
        assert np.array_equal(log1.probs, log2.probs)

    def test_unlabeled_example_rejected(self):
        ds = make_separable_corpus(40, seed=5)
        ds.examples[3].label = None
        with pytest.raises(TrainerError, match=ds.examples[3].id):
            train(ds, ToyModelConfig(batch_size=8, hash_dims=32, rng_seed=0))

    def test_snapshot_count_equals_epochs(self):
        ds = make_separable_corpus(40, seed=5)
        cfg = ToyModelConfig(epochs=6, batch_size=8, hash_dims=32, rng_seed=0)
        state, log = train(ds, cfg)
        assert state.epochs == 6
        assert log.epochs == 6

    def test_every_logged_row_sums_to_one(self):
        ds = make_separable_corpus(48, seed=5)
        cfg = ToyModelConfig(epochs=3, batch_size=8, hash_dims=32, rng_seed=0)
        _, log = train(ds, cfg)
        np.testing.assert_allclose(log.probs.sum(axis=2), 1.0, atol=1e-9)


class TestPredictOverEpochs:
    def test_zero_vector_gives_uniform_rows(self):
        ds = make_separable_corpus(40, seed=5)
        cfg = ToyModelConfig(epochs=3, batch_size=8, hash_dims=32, rng_seed=0)
        state, _ = train(ds, cfg)
        mat = predict_over_epochs(state, Example(id="z", premise="", hypothesis=""))
        np.testing.assert_allclose(mat, 1 / 3, atol=1e-12)

    def test_training_example_rows_match_emitted_log(self):
        ds = make_separable_corpus(40, seed=5)
        cfg = ToyModelConfig(epochs=4, batch_size=8, hash_dims=32, rng_seed=0)
        state, log = train(ds, cfg)
        for i in (0, 7, 23):
            mat = predict_over_epochs(state, ds.examples[i])
            np.testing.assert_allclose(mat, log.probs[:, i, :], atol=1e-12)

    def test_permuting_snapshots_permutes_rows(self):
        ds = make_separable_corpus(40, seed=5)
        cfg = ToyModelConfig(epochs=3, batch_size=8, hash_dims=32, rng_seed=0)
        state, _ = train(ds, cfg)
        ex = ds.examples[0]
        base = predict_over_epochs(state, ex)
        state.snapshots = state.snapshots[::-1]
        np.testing.assert_allclose(predict_over_epochs(state, ex), base[::-1], atol=1e-15)


class TestGradientCheck:
    def test_analytic_matches_finite_differences(self):
        report = gradient_check(ToyModelConfig(hash_dims=8, rng_seed=3), n_labels=3, batch=12)
        assert isinstance(report, GradientCheckReport)
        assert report.passed, f"max rel error {report.max_rel_error} at {report.worst_coordinate}"
        assert report.max_rel_error < 1e-4

    def test_zero_learning_signal_gives_zero_gradient(self):
        # targets equal to the model's own predictions: gradient must vanish
        rng = np.random.default_rng(0)
        weights = rng.normal(size=(3, 8))
        x = rng.normal(size=(5, 8))
        logits = x @ weights.T
        probs = np.exp(logits - logits.max(axis=1, keepdims=True))
        probs /= probs.sum(axis=1, keepdims=True)
        _, grad = ce_loss_and_grad(weights, x, probs)
        assert np.abs(grad).max() < 1e-8

    def test_gradient_is_linear_in_features_at_zero_weights(self):
        # at W = 0 the predictions are uniform regardless of input, so the
        # gradient (P - T)^T X is exactly linear in X
        rng = np.random.default_rng(1)
        weights = np.zeros((3, 8))
        x = rng.normal(size=(6, 8))
        targets = np.eye(3)[rng.integers(0, 3, size=6)]
        _, g1 = ce_loss_and_grad(weights, x, targets)
        x2 = x.copy()
        x2[:, 4] *= 2.0
        _, g2 = ce_loss_and_grad(weights, x2, targets)
        np.testing.assert_allclose(g2[:, 4], 2.0 * g1[:, 4], atol=1e-12)
        np.testing.assert_allclose(g2[:, :4], g1[:, :4], atol=1e-12)


class TestConfigValidation:
    def test_too_few_epochs_rejected(self):
        with pytest.raises(TrainerError):
            ToyModelConfig(epochs=1)

    def test_tiny_hash_dims_rejected(self):
        with pytest.raises(TrainerError):
            ToyModelConfig(hash_dims=4)

    def test_dataset_smaller_than_batch_rejected(self):
        ds = Dataset(name="d", examples=[
            Example(id="a", premise="x", hypothesis="y", label="entailment"),
            Example(id="b", premise="x", hypothesis="y", label="neutral"),
        ])
        with pytest.raises(TrainerError, match="batch_size"):
            train(ds, ToyModelConfig(batch_size=32, hash_dims=16, rng_seed=0))
