import json
import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from refnet import autodiff as ad
from refnet.errors import ConfigurationError, DegenerateVectorError
from refnet.losses import refiner_loss
from refnet.model import (DownstreamHead, FusionModule, ModalFeatureBatch, ModelSpec, ReFNetModel, RefinerModule,
                          checkpoint_json, fuse, init_weights, load_checkpoint, params_from_json, predict, refine,
                          save_checkpoint)


def zeros_like_shapes(shapes):
    return {k: np.zeros(s) for k, s in shapes.items()}


class TestBatch:
    def test_mask_defaults_to_labelled(self):
        b = ModalFeatureBatch([np.ones((3, 2))], labels=np.array([0, 1, 0]))
        assert b.label_mask.all() and b.num_labeled == 3

    def test_unlabelled_default_mask(self):
        b = ModalFeatureBatch([np.ones((3, 2))])
        assert not b.label_mask.any()

    def test_sample_count_mismatch(self):
        with pytest.raises(ConfigurationError, match="modality 1"):
            ModalFeatureBatch([np.ones((3, 2)), np.ones((4, 2))])

    def test_mask_length(self):
        with pytest.raises(ConfigurationError):
            ModalFeatureBatch([np.ones((3, 2))], labels=np.zeros(3), label_mask=np.ones(2, bool))

    def test_subset(self):
        b = ModalFeatureBatch([np.arange(8.0).reshape(4, 2)], labels=np.arange(4), sample_ids=list("abcd"))
        s = b.subset([2, 0])
        np.testing.assert_array_equal(s.features[0], [[4, 5], [0, 1]])
        assert s.sample_ids == ["c", "a"]


class TestFuse:
    def test_single_modality_identity(self):
        x = np.random.default_rng(0).normal(size=(5, 3))
        fm = FusionModule((3,), 3)
        fm.params = {"W0": np.eye(3), "b0": np.zeros(3)}
        np.testing.assert_array_equal(fuse(fm, [x]).data, x)

    def test_zero_weights_zero_embedding(self):
        fm = FusionModule((2, 3), 4, hidden=5)
        fm.params = zeros_like_shapes(fm.param_shapes())
        out = fuse(fm, [np.ones((2, 2)), -np.ones((2, 3))])
        np.testing.assert_array_equal(out.data, np.zeros((2, 4)))

    def test_hand_matrix_oracle(self):
        fm = FusionModule((2, 2), 2)
        W = np.array([[1.0, 2.0], [0.5, -1.0], [3.0, 0.0], [-2.0, 1.5]])
        b = np.array([0.25, -0.75])
        fm.params = {"W0": W, "b0": b}
        f1, f2 = np.array([[1.0, 2.0]]), np.array([[-1.0, 0.5]])
        # [1, 2, -1, 0.5] @ W + b, written out by hand
        expected = np.array([[1 * 1 + 2 * 0.5 - 1 * 3 + 0.5 * -2 + 0.25,
                              1 * 2 + 2 * -1 - 1 * 0 + 0.5 * 1.5 - 0.75]])
        np.testing.assert_allclose(fuse(fm, [f1, f2]).data, expected, atol=1e-12)

    def test_dimension_mismatch(self):
        fm = FusionModule((2, 2), 2)
        fm.params = zeros_like_shapes(fm.param_shapes())
        with pytest.raises(ConfigurationError):
            fuse(fm, [np.ones((1, 2)), np.ones((1, 3))])


class TestRefine:
    def test_identity_decoders(self):
        k = 3
        rm = RefinerModule(k, k, (k, k), (k, k), activation="identity")
        p = {}
        for i in range(2):
            p.update({f"dec{i}.W0": np.eye(k), f"dec{i}.b0": np.zeros(k),
                      f"dec{i}.W1": np.eye(k), f"dec{i}.b1": np.zeros(k)})
        rm.params = p
        emb = np.random.default_rng(1).normal(size=(4, k))
        for r in refine(rm, emb):
            np.testing.assert_array_equal(r.data, emb)

    def test_zero_decoder_then_degenerate_loss(self):
        rm = RefinerModule(2, 2, (2,), (2,))
        rm.params = zeros_like_shapes(rm.param_shapes())
        (r,) = refine(rm, np.ones((3, 2)))
        np.testing.assert_array_equal(r.data, 0.0)
        with pytest.raises(DegenerateVectorError, match="modality 0"):
            refiner_loss([r], [np.ones((3, 2))], [1.0])

    def test_hand_mlp_oracle(self):
        rm = RefinerModule(2, 2, (1,), (1,))
        rm.params = {"dec0.W0": np.array([[1.0, -1.0], [0.5, 2.0]]), "dec0.b0": np.array([0.1, 0.0]),
                     "dec0.W1": np.array([[2.0], [-3.0]]), "dec0.b1": np.array([0.5])}
        h1 = math.tanh(0.3 * 1.0 + -0.4 * 0.5 + 0.1)
        h2 = math.tanh(0.3 * -1.0 + -0.4 * 2.0 + 0.0)
        (r,) = refine(rm, np.array([[0.3, -0.4]]))
        assert r.data[0, 0] == pytest.approx(2 * h1 - 3 * h2 + 0.5, abs=1e-12)

    def test_width_mismatch(self):
        rm = RefinerModule(3, 3, (2,), (2,))
        rm.params = zeros_like_shapes(rm.param_shapes())
        with pytest.raises(ConfigurationError):
            refine(rm, np.ones((2, 4)))

    def test_affine_feature_map_targets(self):
        rm = RefinerModule(2, 2, (1,), (3,), feature_map="affine")
        rm.params = zeros_like_shapes(rm.param_shapes())
        rm.params["map0.W"] = np.array([[1.0], [2.0], [3.0]])
        rm.params["map0.b"] = np.array([1.0])
        (t,) = rm.targets([np.array([[1.0, 1.0, 1.0]])])
        np.testing.assert_array_equal(t.data, [[7.0]])


class TestPredict:
    def test_zero_weights_uniform_softmax(self):
        head = DownstreamHead(4, 2, 3, "single-label")
        head.params = zeros_like_shapes(head.param_shapes())
        z = predict(head, np.random.default_rng(0).normal(size=(5, 4))).data
        np.testing.assert_array_equal(z, 0.0)
        p = np.exp(z) / np.exp(z).sum(axis=1, keepdims=True)
        np.testing.assert_allclose(p, 1 / 3)

    def test_binary_head_hand_oracle(self):
        head = DownstreamHead(2, 1, 1, "binary")
        head.params = {"W0": np.array([[0.5], [-1.0]]), "b0": np.array([0.2]),
                       "W1": np.array([[3.0]]), "b1": np.array([-0.1])}
        x = np.array([[1.0, 0.25]])
        expected = 3.0 * math.tanh(0.5 - 0.25 + 0.2) - 0.1
        assert predict(head, x).data.shape == (1, 1)
        assert predict(head, x).data[0, 0] == pytest.approx(expected, abs=1e-12)

    @given(st.integers(1, 6), st.integers(1, 8), st.integers(1, 5), st.integers(0, 99))
    @settings(max_examples=30, deadline=None)
    def test_logit_shape(self, n, k, c, seed):
        spec = ModelSpec(input_dims=(2, 3), num_classes=c, k=k)
        model = ReFNetModel(spec, seed=seed)
        rng = np.random.default_rng(seed)
        batch = ModalFeatureBatch([rng.normal(size=(n, 2)), rng.normal(size=(n, 3))])
        assert model.forward(batch).logits.shape == (n, c)


class TestInitWeights:
    spec = ModelSpec(input_dims=(4, 3), num_classes=2, k=6, fusion_hidden=5)

    def test_same_seed_bit_identical(self):
        a, b = init_weights(self.spec, 7), init_weights(self.spec, 7)
        assert all(a[k].tobytes() == b[k].tobytes() for k in a)

    def test_different_seed_differs(self):
        a, b = init_weights(self.spec, 1), init_weights(self.spec, 2)
        assert any(not np.array_equal(a[k], b[k]) for k in a if a[k].ndim == 2)

    def test_bounds_and_zero_biases(self):
        w = init_weights(self.spec, 0)
        for name, v in w.items():
            if v.ndim == 1:
                np.testing.assert_array_equal(v, 0.0)
            else:
                assert np.abs(v).max() <= math.sqrt(6 / sum(v.shape))

    def test_mean_near_zero(self):
        spec = ModelSpec(input_dims=(100,), num_classes=1, task="binary", k=100)
        W = init_weights(spec, 3)["fusion.W0"]
        assert W.size == 10_000
        s = math.sqrt(6 / 200)
        sigma = s / math.sqrt(3) / math.sqrt(W.size)
        assert abs(W.mean()) < 3 * sigma


class TestModel:
    def test_row_equivariance(self):
        spec = ModelSpec(input_dims=(3, 2), num_classes=3, k=5, fusion_hidden=4)
        model = ReFNetModel(spec, seed=2)
        rng = np.random.default_rng(0)
        batch = ModalFeatureBatch([rng.normal(size=(6, 3)), rng.normal(size=(6, 2))])
        perm = rng.permutation(6)
        full, permuted = model.forward(batch), model.forward(batch.subset(perm))
        np.testing.assert_array_equal(full.logits.data[perm], permuted.logits.data)
        np.testing.assert_array_equal(full.embedding.data[perm], permuted.embedding.data)
        for a, b in zip(full.refined, permuted.refined):
            np.testing.assert_array_equal(a.data[perm], b.data)

    def test_identity_map_targets_are_inputs(self):
        spec = ModelSpec(input_dims=(3, 2), num_classes=2)
        model = ReFNetModel(spec)
        batch = ModalFeatureBatch([np.ones((2, 3)), np.ones((2, 2))])
        res = model.forward(batch)
        assert [t.shape for t in res.targets] == [(2, 3), (2, 2)]
        assert [r.shape for r in res.refined] == [(2, 3), (2, 2)]

    def test_batch_dims_checked(self):
        model = ReFNetModel(ModelSpec(input_dims=(3, 2), num_classes=2))
        with pytest.raises(ConfigurationError):
            model.forward(ModalFeatureBatch([np.ones((2, 3)), np.ones((2, 4))]))

    def test_leaves_sections(self):
        model = ReFNetModel(ModelSpec(input_dims=(3,), num_classes=2))
        leaves = model.leaves(["head"])
        assert all(v.requires_grad == k.startswith("head.") for k, v in leaves.items())

    def test_load_params_validates(self):
        model = ReFNetModel(ModelSpec(input_dims=(3,), num_classes=2))
        p = model.params()
        p["fusion.W0"] = np.zeros((1, 1))
        with pytest.raises(ConfigurationError, match="fusion.W0"):
            model.load_params(p)

    @pytest.mark.parametrize("kw", [dict(task="binary", num_classes=2), dict(task="nope"),
                                    dict(activation="gelu"), dict(feature_map="affine", refiner_dims=(1, 2, 3))])
    def test_invalid_specs(self, kw):
        base = dict(input_dims=(3, 2), num_classes=2)
        with pytest.raises(ConfigurationError):
            ModelSpec(**{**base, **kw})


class TestCheckpoint:
    def test_bit_exact_round_trip(self, tmp_path):
        params = init_weights(ModelSpec(input_dims=(3, 4), num_classes=3, feature_map="affine",
                                        refiner_dims=(2, 2)), 11)
        params = {k: v + np.random.default_rng(0).normal(size=v.shape) / 3 for k, v in params.items()}
        path = tmp_path / "ckpt.json"
        save_checkpoint(path, params)
        back = load_checkpoint(path)
        assert set(back) == set(params)
        for k in params:
            assert back[k].shape == params[k].shape
            assert back[k].tobytes() == params[k].tobytes()

    def test_json_layout(self):
        doc = json.loads(checkpoint_json({"head.b1": np.array([1.5, -2.0])}))
        assert doc == {"head.b1": {"shape": [2], "values": [1.5, -2.0]}}
        np.testing.assert_array_equal(params_from_json(doc)["head.b1"], [1.5, -2.0])

    def test_model_reloads_checkpoint(self, tmp_path):
        spec = ModelSpec(input_dims=(2, 2), num_classes=2)
        m1 = ReFNetModel(spec, seed=4)
        save_checkpoint(tmp_path / "c.json", m1.params())
        m2 = ReFNetModel(spec, params=load_checkpoint(tmp_path / "c.json"))
        batch = ModalFeatureBatch([np.ones((1, 2)), np.ones((1, 2))])
        assert m1.forward(batch).logits.data.tobytes() == m2.forward(batch).logits.data.tobytes()


def test_constant_tensor_args_ok():
    fm = FusionModule((2,), 2)
    fm.params = {"W0": np.eye(2), "b0": np.zeros(2)}
    out = fuse(fm, [ad.Tensor(np.ones((1, 2)))])
    np.testing.assert_array_equal(out.data, [[1.0, 1.0]])
