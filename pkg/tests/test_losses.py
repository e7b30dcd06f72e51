import logging
import math
import warnings

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from refnet import autodiff as ad
from refnet.errors import ConfigurationError, DegenerateVectorError, DomainError
from refnet.losses import (LossConfig, downstream_loss, fusion_only_loss, ms_loss, positive_pairs, refiner_loss,
                           train_loss)
from refnet.model import ModalFeatureBatch, ModelSpec, ReFNetModel


def brute_force_ms(emb, labels, mask, alpha, beta, lam):
    """Direct transcription of the per-anchor sums over ordered pairs."""
    idx = [i for i in range(len(labels)) if mask[i]]
    total = 0.0
    for i in idx:
        ei = emb[i] / math.sqrt(sum(v * v for v in emb[i]))
        pos = neg = 0.0
        for k in idx:
            if k == i:
                continue
            ek = emb[k] / math.sqrt(sum(v * v for v in emb[k]))
            s = sum(a * b for a, b in zip(ei, ek))
            if labels[k] == labels[i]:
                pos += math.exp(-alpha * (s - lam))
            else:
                neg += math.exp(beta * (s - lam))
        total += math.log(1 + pos) / alpha + math.log(1 + neg) / beta
    return total / len(idx)


class TestRefinerLoss:
    def test_perfect_reconstruction(self):
        r = [np.array([[1.0, 2.0]]), np.array([[3.0, -1.0, 2.0]])]
        assert refiner_loss(r, r, (0.1, 0.1)).item() == pytest.approx(0.0, abs=1e-15)

    def test_orthogonal(self):
        assert refiner_loss([np.array([[1.0, 0.0]])], [np.array([[0.0, 1.0]])], (1.0,)).item() == pytest.approx(1.0)

    def test_hand_value(self):
        out = refiner_loss([np.array([[1.0, 1.0]])], [np.array([[1.0, 0.0]])], (1.0,)).item()
        assert out == pytest.approx(0.2928932188, abs=1e-10)
        assert out == pytest.approx(1 - 1 / math.sqrt(2), abs=1e-15)

    def test_degenerate_row_named(self):
        with pytest.raises(DegenerateVectorError, match="modality 1.*row 0"):
            refiner_loss([np.ones((1, 2)), np.zeros((1, 2))], [np.ones((1, 2)), np.ones((1, 2))], (1.0, 1.0))

    def test_shape_mismatch(self):
        with pytest.raises(ConfigurationError):
            refiner_loss([np.ones((2, 2))], [np.ones((2, 3))], (1.0,))

    @given(st.floats(1e-3, 1e3), st.integers(0, 10_000))
    @settings(max_examples=40, deadline=None)
    def test_scale_invariance(self, c, seed):
        rng = np.random.default_rng(seed)
        r, t = rng.normal(size=(5, 3)), rng.normal(size=(5, 3))
        a = refiner_loss([r], [t], (0.7,)).item()
        b = refiner_loss([c * r], [t], (0.7,)).item()
        assert a == pytest.approx(b, abs=1e-10)

    @given(st.integers(0, 10_000))
    @settings(max_examples=40, deadline=None)
    def test_range(self, seed):
        rng = np.random.default_rng(seed)
        g = rng.uniform(0, 1, size=2)
        r = [rng.normal(size=(4, 3)), rng.normal(size=(4, 2))]
        t = [rng.normal(size=(4, 3)), rng.normal(size=(4, 2))]
        v = refiner_loss(r, t, g).item()
        assert -1e-12 <= v <= 2 * g.sum() + 1e-12


class TestMSLoss:
    def test_single_sample_is_zero(self):
        assert ms_loss(np.array([[1.0, 2.0]]), np.array([0])).item() == 0.0

    def test_two_identical_samples_log2(self):
        out = ms_loss(np.array([[1.0, 0.0], [2.0, 0.0]]), np.array([0, 0]), alpha=1.0, beta=2.0, lam=1.0).item()
        assert out == pytest.approx(math.log(2), abs=1e-15)

    @pytest.mark.parametrize("seed", range(5))
    def test_brute_force_oracle_paper_hyperparameters(self, seed):
        rng = np.random.default_rng(seed)
        emb, labels = rng.normal(size=(6, 4)), rng.integers(0, 2, size=6)
        mask = np.ones(6, bool)
        got = ms_loss(emb, labels, mask, alpha=50.0, beta=2.0, lam=0.5).item()
        assert got == pytest.approx(brute_force_ms(emb, labels, mask, 50.0, 2.0, 0.5), abs=1e-10)

    def test_masked_samples_ignored(self):
        rng = np.random.default_rng(9)
        emb, labels = rng.normal(size=(6, 3)), np.array([0, 1, 0, 1, 1, 0])
        mask = np.array([True, True, False, True, False, True])
        got = ms_loss(emb, labels, mask).item()
        assert got == pytest.approx(brute_force_ms(emb, labels, mask, 50.0, 2.0, 0.5), abs=1e-10)
        flipped = labels.copy()
        flipped[~mask] = 1 - flipped[~mask]
        assert ms_loss(emb, flipped, mask).item() == got

    def test_no_masked_in_sample(self):
        with pytest.raises(ConfigurationError):
            ms_loss(np.ones((2, 2)), np.array([0, 1]), np.zeros(2, bool))

    def test_raw_dot_mode(self):
        emb = np.array([[1.0, 0.0], [0.5, 0.0]])
        out = ms_loss(emb, np.array([0, 0]), alpha=1.0, beta=1.0, lam=0.0, similarity="dot").item()
        assert out == pytest.approx(math.log(1 + math.exp(-0.5)), abs=1e-15)

    def test_extreme_similarity_stays_finite(self):
        emb = np.array([[1.0, 0.0], [-1.0, 0.0], [1.0, 1e-9]])
        v = ms_loss(emb, np.array([0, 0, 1]), alpha=500.0, beta=200.0).item()
        assert math.isfinite(v)

    @given(st.integers(0, 10_000))
    @settings(max_examples=40, deadline=None)
    def test_permutation_invariance(self, seed):
        rng = np.random.default_rng(seed)
        n = int(rng.integers(2, 9))
        emb, labels = rng.normal(size=(n, 3)), rng.integers(0, 3, size=n)
        perm = rng.permutation(n)
        a = ms_loss(emb, labels).item()
        b = ms_loss(emb[perm], labels[perm]).item()
        assert a == pytest.approx(b, rel=1e-12, abs=1e-14)

    def test_directional_perturbation(self):
        # anchor 0 has one positive (1) and one negative (2); rotating 1 toward 0 lowers the loss
        def loss(theta_pos, theta_neg):
            emb = np.array([[1.0, 0.0], [math.cos(theta_pos), math.sin(theta_pos)],
                            [math.cos(theta_neg), -math.sin(theta_neg)]])
            return ms_loss(emb, np.array([0, 0, 1]), alpha=5.0, beta=2.0, lam=0.5).item()
        assert loss(0.5, 1.5) < loss(1.0, 1.5)
        assert loss(1.0, 1.0) > loss(1.0, 1.5)

    def test_jaccard_positive_rule(self):
        y = np.array([[1, 1, 0], [1, 0, 0], [0, 0, 1]])
        exact = positive_pairs(y, "exact")
        jac = positive_pairs(y, "jaccard", 0.5)
        assert not exact[0, 1] and jac[0, 1] and not jac[0, 2]


class TestDownstreamLoss:
    def test_uniform_logits_log2(self):
        assert downstream_loss(np.zeros((3, 2)), np.array([0, 1, 1])).item() == pytest.approx(math.log(2), abs=1e-15)

    def test_saturated_correct(self):
        assert downstream_loss(np.array([[30.0, -30.0]]), np.array([0])).item() < 1e-12

    def test_multilabel_hand_oracle(self):
        z = np.array([[0.5, -1.0, 2.0], [-0.3, 0.0, 1.5]])
        y = np.array([[1, 0, 1], [0, 1, 0]])
        terms = []
        for zi, yi in zip(z.ravel(), y.ravel()):
            s = 1 / (1 + math.exp(-zi))
            terms.append(-(yi * math.log(s) + (1 - yi) * math.log(1 - s)))
        got = downstream_loss(z, y, task="multi-label").item()
        assert got == pytest.approx(sum(terms) / len(terms), abs=1e-12)

    def test_binary_single_logit(self):
        z = np.array([[2.0], [-1.0]])
        expected = (math.log1p(math.exp(-2.0)) + math.log1p(math.exp(-1.0))) / 2
        assert downstream_loss(z, np.array([1, 0]), task="binary").item() == pytest.approx(expected, abs=1e-14)

    def test_all_masked(self):
        with pytest.raises(ConfigurationError):
            downstream_loss(np.zeros((2, 2)), np.array([0, 1]), np.zeros(2, bool))

    def test_label_out_of_range(self):
        with pytest.raises(DomainError):
            downstream_loss(np.zeros((2, 2)), np.array([0, 2]))

    @given(st.integers(0, 10_000))
    @settings(max_examples=40, deadline=None)
    def test_non_negative(self, seed):
        rng = np.random.default_rng(seed)
        z = rng.normal(scale=5, size=(4, 3))
        assert downstream_loss(z, rng.integers(0, 3, size=4)).item() >= 0.0


def _setup(task="single-label", seed=0, n=8):
    rng = np.random.default_rng(seed)
    c = 1 if task == "binary" else 3
    model = ReFNetModel(ModelSpec(input_dims=(3, 4), num_classes=c, task=task, k=6), seed=seed)
    labels = rng.integers(0, 2 if task == "binary" else 3, size=n)
    mask = rng.random(n) < 0.7
    mask[:2] = True
    batch = ModalFeatureBatch([rng.normal(size=(n, 3)), rng.normal(size=(n, 4))], labels=labels, label_mask=mask)
    return model, batch


class TestTrainLoss:
    def test_reduces_to_downstream(self):
        model, batch = _setup()
        total, parts = train_loss(batch, model, LossConfig(gamma=(0.0, 0.0), zeta=0.0))
        base, _ = fusion_only_loss(batch, model)
        assert total.item() == base.item()
        assert parts["L_refiner"] == 0.0 and parts["L_MS"] == 0.0

    def test_term_sum_oracle(self):
        model, batch = _setup(seed=0)
        cfg = LossConfig(gamma=(0.1, 0.1), zeta=0.1)
        total, parts = train_loss(batch, model, cfg)
        res = model.forward(batch)
        down = downstream_loss(res.logits, batch.labels, batch.label_mask).item()
        ref = refiner_loss(res.refined, res.targets, cfg.gamma).item()
        ms = ms_loss(res.embedding, batch.labels, batch.label_mask).item()
        assert total.item() == pytest.approx(down + ref + 0.1 * ms, abs=1e-12)
        assert parts["L_downstream"] == down and parts["L_refiner"] == ref and parts["L_MS"] == ms

    def test_perfect_refiner(self):
        # decoders reproduce the modality features exactly: fusion = identity, decoders = linear selectors
        rng = np.random.default_rng(1)
        spec = ModelSpec(input_dims=(2, 2), num_classes=2, k=4, refiner_activation="identity")
        model = ReFNetModel(spec, seed=0)
        p = model.params()
        p["fusion.W0"], p["fusion.b0"] = np.eye(4), np.zeros(4)
        for i in range(2):
            p[f"refiner.dec{i}.W0"], p[f"refiner.dec{i}.b0"] = np.eye(4), np.zeros(4)
            p[f"refiner.dec{i}.W1"] = np.eye(4)[:, 2 * i:2 * i + 2]
            p[f"refiner.dec{i}.b1"] = np.zeros(2)
        model.load_params(p)
        batch = ModalFeatureBatch([rng.normal(size=(5, 2)), rng.normal(size=(5, 2))], labels=np.array([0, 1, 0, 1, 1]))
        cfg = LossConfig(gamma=(1.0, 1.0), zeta=0.1)
        total, parts = train_loss(batch, model, cfg)
        assert parts["L_refiner"] == pytest.approx(0.0, abs=1e-15)
        assert total.item() == pytest.approx(parts["L_downstream"] + 0.1 * parts["L_MS"], abs=1e-12)

    def test_unlabelled_batch_warns(self, caplog):
        model, batch = _setup()
        unl = batch.with_mask(np.zeros(batch.n, bool))
        with caplog.at_level(logging.WARNING, logger="refnet.losses"):
            total, parts = train_loss(unl, model, LossConfig(gamma=(0.1, 0.1), zeta=0.1))
        assert parts["L_downstream"] == 0.0 and parts["L_MS"] == 0.0
        assert total.item() == parts["L_refiner"] > 0
        assert "no labelled samples" in caplog.text

    def test_masked_labels_unused(self):
        model, batch = _setup(seed=3)
        cfg = LossConfig(gamma=(0.1, 0.1), zeta=0.1)
        a, _ = train_loss(batch, model, cfg)
        y = batch.labels.copy()
        y[~batch.label_mask] = (y[~batch.label_mask] + 1) % 3
        b, _ = train_loss(ModalFeatureBatch(batch.features, y, batch.label_mask), model, cfg)
        assert a.item() == b.item()

    def test_gamma_length_checked(self):
        model, batch = _setup()
        with pytest.raises(ConfigurationError):
            train_loss(batch, model, LossConfig(gamma=(0.1,)))


class TestLossConfig:
    def test_eta_alias_warns(self):
        with pytest.warns(DeprecationWarning):
            cfg = LossConfig.from_dict({"eta": [0.2, 0.3]})
        assert cfg.gamma == (0.2, 0.3)

    def test_lambda_key(self):
        assert LossConfig.from_dict({"lambda": 0.25}).lam == 0.25

    def test_round_trip(self):
        cfg = LossConfig(gamma=(0.1, 0.2), zeta=0.1, lam=0.3)
        with warnings.catch_warnings():
            warnings.simplefilter("error")
            assert LossConfig.from_dict(cfg.to_dict()) == cfg

    @pytest.mark.parametrize("doc", [{"gama": [0.1]}, {"alpha": 0}, {"gamma": [-1.0]}, {"similarity": "l2"},
                                     {"eta": [0.1], "gamma": [0.1]}])
    def test_rejects(self, doc):
        with warnings.catch_warnings():
            warnings.simplefilter("ignore")
            with pytest.raises(ConfigurationError):
                LossConfig.from_dict(doc)

    def test_defaults(self):
        cfg = LossConfig()
        assert (cfg.alpha, cfg.beta, cfg.lam) == (50.0, 2.0, 0.5)


def test_ms_loss_gradient_flows_through_normalisation():
    emb = ad.Tensor(np.random.default_rng(0).normal(size=(4, 3)), requires_grad=True)
    g = ad.backward(ms_loss(emb, np.array([0, 1, 0, 1])))[emb]
    # cosine similarity is scale invariant, so each row's gradient is orthogonal to the row
    np.testing.assert_allclose(np.sum(g * emb.data, axis=1), 0.0, atol=1e-12)
