"""Encoder: featurization, encoding, analytic gradients, optimizer, checkpoints."""

import numpy as np
import pytest

from ragkit.encoder import (
    DOCUMENT,
    QUERY,
    BatchExample,
    EncoderConfig,
    GradientBundle,
    OptimizerState,
    apply_update,
    encode,
    featurize,
    forward_backward,
    init_params,
    load_checkpoint,
    params_from_bytes,
    params_hash,
    params_to_bytes,
    save_checkpoint,
    similarity,
)
from ragkit.errors import DegenerateEmbeddingError, InvariantError
from ragkit.losses import LossConfig
from ragkit.rng import stable_hash, substream

SMALL = EncoderConfig(dim=8, feature_dim=64)


def random_text(rng, n_words=6, vocab=40):
    return " ".join(f"tok{rng.integers(0, vocab)}" for _ in range(n_words))


class TestFeaturize:
    def test_empty_text_maps_to_first_basis_vector(self):
        f = featurize("", 64)
        assert list(f.indices) == [0]
        assert list(f.values) == [1.0]

    def test_deterministic(self):
        a = featurize("same text twice", 1024)
        b = featurize("same text twice", 1024)
        np.testing.assert_array_equal(a.indices, b.indices)
        np.testing.assert_array_equal(a.values, b.values)

    def test_unit_norm(self):
        f = featurize("a few words of text here", 256)
        assert np.linalg.norm(f.values) == pytest.approx(1.0, abs=1e-12)

    def test_word_order_changes_only_bigram_buckets(self):
        dim = 65536
        ab, ba = featurize("alpha beta", dim), featurize("beta alpha", dim)
        uni = {stable_hash("u:alpha", dim), stable_hash("u:beta", dim)}
        assert uni < set(ab.indices) and uni < set(ba.indices)
        assert stable_hash("b:alpha beta", dim) in ab.indices
        assert stable_hash("b:beta alpha", dim) in ba.indices
        assert set(ab.indices) != set(ba.indices)


class TestEncode:
    def test_identical_input_identical_embedding(self):
        params = init_params(SMALL, seed=5)
        a = encode(params, "some passage text", DOCUMENT)
        b = encode(params, "some passage text", DOCUMENT)
        np.testing.assert_array_equal(a, b)

    def test_output_is_unit_norm(self):
        params = init_params(SMALL, seed=5)
        rng = np.random.default_rng(0)
        for _ in range(20):
            v = encode(params, random_text(rng), DOCUMENT)
            assert np.linalg.norm(v) == pytest.approx(1.0, abs=1e-6)

    def test_zero_projection_is_degenerate(self):
        params = init_params(SMALL, seed=5)
        params.query_proj[:] = 0.0
        with pytest.raises(DegenerateEmbeddingError, match="degenerate"):
            encode(params, "anything", QUERY)

    def test_separate_projections_differ_by_side(self):
        cfg = EncoderConfig(dim=8, feature_dim=64, shared_projection=False)
        params = init_params(cfg, seed=9)
        q = encode(params, "same words", QUERY)
        d = encode(params, "same words", DOCUMENT)
        assert not np.allclose(q, d)


class TestSimilarity:
    def test_identity_and_negation(self):
        v = np.array([0.6, 0.8])
        assert similarity(v, v) == pytest.approx(1.0)
        assert similarity(v, -v) == pytest.approx(-1.0)

    def test_hand_cosine(self):
        q = np.array([1.0, 0.0])
        d = np.array([1.0, 1.0]) / np.sqrt(2)
        assert similarity(q, d) == pytest.approx(0.70710678, abs=1e-8)

    def test_prenormalization_scale_cannot_change_rankings(self):
        # Scaling a raw embedding before normalization is a no-op, so any
        # ranking by cosine is unchanged.
        params = init_params(SMALL, seed=2)
        rng = np.random.default_rng(4)
        docs = [random_text(rng) for _ in range(10)]
        q = encode(params, "tok1 tok2 tok3", QUERY)
        order1 = np.argsort([-similarity(q, encode(params, d, DOCUMENT)) for d in docs])
        params.query_proj *= 7.5  # shared projection scales docs too
        q2 = encode(params, "tok1 tok2 tok3", QUERY)
        order2 = np.argsort([-similarity(q2, encode(params, d, DOCUMENT)) for d in docs])
        np.testing.assert_array_equal(order1, order2)


def random_batch(rng, n_examples=2, n_candidates=3):
    batch = []
    for _ in range(n_examples):
        cands = [random_text(rng, n_words=4) for _ in range(n_candidates)]
        labels = list(rng.choice([0.0, 0.5, 1.0], size=n_candidates))
        pos = int(rng.integers(0, n_candidates))
        labels[pos] = 1.0
        batch.append(BatchExample(random_text(rng, n_words=3), cands, labels, pos))
    return batch


def max_grad_rel_error(params, batch, cfg, h=1e-5, probes=None, rng=None):
    """Compare analytic gradients against central finite differences."""
    _, grads = forward_backward(params, batch, cfg)
    worst = 0.0
    for mat_i, (p, g) in enumerate(zip(params.matrices(), grads.matrices())):
        flat_p = p.reshape(-1)
        flat_g = g.reshape(-1)
        if probes is None:
            coords = range(flat_p.size)
        else:
            coords = rng.choice(flat_p.size, size=min(probes, flat_p.size), replace=False)
        for c in coords:
            orig = flat_p[c]
            flat_p[c] = orig + h
            up, _ = forward_backward(params, batch, cfg)
            flat_p[c] = orig - h
            dn, _ = forward_backward(params, batch, cfg)
            flat_p[c] = orig
            numeric = (up - dn) / (2 * h)
            denom = max(1.0, abs(flat_g[c]), abs(numeric))
            worst = max(worst, abs(flat_g[c] - numeric) / denom)
    return worst


class TestForwardBackward:
    def test_converged_batch_has_small_loss_and_gradient(self):
        # One query whose positive is byte-identical (cosine exactly 1)
        # while negatives sit at noise level; at the sharp default
        # temperature the softmax saturates and gradients shrink with it.
        cfg = LossConfig(temperature=0.05, pairwise_weight=0.0)
        params = init_params(EncoderConfig(dim=16, feature_dim=256), seed=1)
        ex = BatchExample("zebra quartz", ["zebra quartz", "iron lamp", "green door"],
                          [1.0, 0.0, 0.0], 0)
        loss, grads = forward_backward(params, [ex], cfg)
        assert loss < 1e-3
        assert max(np.abs(m).max() for m in grads.matrices()) < 0.05

    def test_gradients_match_finite_differences_small_instance(self):
        rng = np.random.default_rng(77)
        params = init_params(EncoderConfig(dim=8, feature_dim=32), seed=7)
        batch = random_batch(rng, n_examples=1, n_candidates=3)
        err = max_grad_rel_error(params, batch, LossConfig(temperature=0.5), h=1e-5)
        assert err < 1e-5

    def test_gradients_match_for_separate_projections(self):
        rng = np.random.default_rng(78)
        cfg = EncoderConfig(dim=4, feature_dim=24, shared_projection=False)
        params = init_params(cfg, seed=8)
        batch = random_batch(rng, n_examples=2, n_candidates=3)
        err = max_grad_rel_error(params, batch, LossConfig(temperature=0.3), h=1e-5)
        assert err < 1e-5

    def test_duplicated_example_doubles_its_gradient(self):
        rng = np.random.default_rng(5)
        params = init_params(EncoderConfig(dim=8, feature_dim=32), seed=3)
        batch = random_batch(rng, n_examples=1)
        cfg = LossConfig(temperature=0.4)
        loss1, g1 = forward_backward(params, batch, cfg)
        loss2, g2 = forward_backward(params, batch + batch, cfg)
        assert loss2 == pytest.approx(2 * loss1, rel=1e-12)
        for a, b in zip(g1.matrices(), g2.matrices()):
            np.testing.assert_allclose(b, 2 * a, rtol=1e-12, atol=1e-15)

    def test_missing_positive_is_rejected(self):
        params = init_params(SMALL, seed=1)
        ex = BatchExample("q", ["a", "b"], [0.5, 0.0], 0)
        with pytest.raises(InvariantError, match="example 0"):
            forward_backward(params, [ex], LossConfig())


class TestApplyUpdate:
    def test_zero_gradient_leaves_params_unchanged(self):
        params = init_params(SMALL, seed=4)
        before = params.query_proj.copy()
        grads = GradientBundle.zeros_like(params)
        apply_update(params, grads, OptimizerState(mode="adamw"), lr=0.1)
        np.testing.assert_array_equal(params.query_proj, before)

    def test_sgd_scalar_step(self):
        cfg = EncoderConfig(dim=1, feature_dim=1)
        params = init_params(cfg, seed=0)
        params.query_proj[:] = 1.0
        grads = GradientBundle.zeros_like(params)
        grads.query_proj[:] = 0.5
        apply_update(params, grads, OptimizerState(mode="sgd"), lr=0.1)
        assert params.query_proj[0, 0] == pytest.approx(0.95, abs=1e-15)

    def test_adamw_first_step_hand_trace(self):
        # m = 0.1 g, v = 0.001 g^2; bias-corrected back to g and g^2, so the
        # first update is lr * g / (|g| + eps).
        cfg = EncoderConfig(dim=1, feature_dim=1)
        params = init_params(cfg, seed=0)
        params.query_proj[:] = 1.0
        grads = GradientBundle.zeros_like(params)
        g = 0.5
        grads.query_proj[:] = g
        state = OptimizerState(mode="adamw")
        apply_update(params, grads, state, lr=0.1)
        expected = 1.0 - 0.1 * g / (np.sqrt(g * g) + state.eps)
        assert params.query_proj[0, 0] == pytest.approx(expected, abs=1e-12)
        assert state.step == 1

    def test_deterministic_given_state(self):
        runs = []
        for _ in range(2):
            params = init_params(SMALL, seed=6)
            state = OptimizerState(mode="adamw", weight_decay=0.01)
            rng = np.random.default_rng(9)
            for _ in range(3):
                grads = GradientBundle.zeros_like(params)
                grads.query_proj += rng.normal(size=grads.query_proj.shape)
                apply_update(params, grads, state, lr=0.05)
            runs.append(params.query_proj.copy())
        np.testing.assert_array_equal(runs[0], runs[1])


class TestCheckpoints:
    def test_round_trip_is_exact(self, tmp_path):
        for shared in (True, False):
            cfg = EncoderConfig(dim=8, feature_dim=64, shared_projection=shared)
            params = init_params(cfg, seed=11)
            path = tmp_path / f"ckpt_{shared}.bin"
            save_checkpoint(params, path)
            loaded = load_checkpoint(path)
            assert loaded.config == cfg
            np.testing.assert_array_equal(loaded.query_proj, params.query_proj)
            np.testing.assert_array_equal(loaded.doc_proj, params.doc_proj)
            assert params_to_bytes(loaded) == params_to_bytes(params)

    def test_shared_round_trip_keeps_aliasing(self):
        params = init_params(EncoderConfig(dim=4, feature_dim=8), seed=2)
        loaded = params_from_bytes(params_to_bytes(params))
        assert loaded.query_proj is loaded.doc_proj

    def test_hash_tracks_content(self):
        params = init_params(SMALL, seed=1)
        h1 = params_hash(params)
        params.query_proj[0, 0] += 1.0
        assert params_hash(params) != h1

    def test_same_seed_same_bytes(self):
        a = init_params(SMALL, seed=42)
        b = init_params(SMALL, seed=42)
        assert params_to_bytes(a) == params_to_bytes(b)
