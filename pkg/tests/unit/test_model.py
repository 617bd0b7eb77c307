#!/usr/bin/env python3
"""
Unit tests for Hyperparameters and the ProgressiveModel container
"""

import numpy as np
import pytest

from progq.core import Codebook
from progq.errors import CodeLengthError, ConfigurationError, FormatError, ShapeError
from progq.model import MODEL_MAGIC, Hyperparameters, ProgressiveModel


class TestHyperparameters:
    """Test hyperparameter validation and conversion"""

    def test_defaults(self):
        hyper = Hyperparameters()
        assert (hyper.epochs, hyper.batch_size, hyper.K, hyper.L) == (64, 16, 256, 4)
        assert hyper.m == 8

    def test_collects_every_problem(self):
        with pytest.raises(ConfigurationError) as exc:
            Hyperparameters(K=12, gamma=-1.0, variant="bogus")
        assert len(exc.value.details["problems"]) == 3

    def test_dict_uses_lambda_key(self):
        data = Hyperparameters(lambda_=0.5).to_dict()
        assert data["lambda"] == 0.5 and "lambda_" not in data
        assert Hyperparameters.from_dict(data) == Hyperparameters(lambda_=0.5)

    def test_unknown_key(self):
        with pytest.raises(ConfigurationError) as exc:
            Hyperparameters.from_dict({"epocs": 3})
        assert "epocs" in exc.value.message

    def test_layer_weights_length(self):
        with pytest.raises(ConfigurationError):
            Hyperparameters(L=3, layer_weights=(1.0, 1.0))
        assert Hyperparameters(L=2, layer_weights=[1, 2]).layer_weights == (1.0, 2.0)

    def test_with_updates_ignores_none(self):
        hyper = Hyperparameters().with_updates(epochs=3, gamma=None)
        assert hyper.epochs == 3 and hyper.gamma == 20.0

    @pytest.mark.parametrize("variant,expected", [
        ("full", (1.0, 0.1, 1.0)),
        ("distortion_only", (0.0, 0.0, 1.0)),
        ("margin", (1.0, 0.0, 1.0)),
        ("classification", (0.0, 0.1, 1.0)),
        ("no_soft", (1.0, 0.1, 1.0)),
    ])
    def test_loss_coefficients(self, variant, expected):
        assert Hyperparameters(variant=variant).loss_coefficients() == expected

    def test_no_soft_weights(self):
        wts = Hyperparameters(L=2, variant="no_soft").distortion_weights()
        assert wts.soft_weight == 0.0 and wts.nu == 0.0 and wts.mu == 1.0
        assert Hyperparameters(L=2).distortion_weights().soft_weight == 1.0


class TestProgressiveModel:
    """Test model construction, persistence and integrity"""

    def test_dimensions(self, supervised_model):
        assert (supervised_model.L, supervised_model.K, supervised_model.m) == (2, 4, 2)
        assert (supervised_model.input_dim, supervised_model.dim) == (6, 4)

    def test_mismatched_codebooks(self, rng):
        with pytest.raises(ShapeError):
            ProgressiveModel([Codebook(rng.standard_normal((4, 3))), Codebook(rng.standard_normal((2, 3)))])

    def test_headless_embed_is_identity(self, headless_model, rng):
        X = rng.standard_normal((3, 5))
        np.testing.assert_array_equal(headless_model.embed(X), X)

    def test_from_codebooks_is_unsupervised(self, rng):
        model = ProgressiveModel.from_codebooks([rng.standard_normal((8, 3))] * 2)
        assert model.hyper.variant == "distortion_only"
        assert (model.hyper.L, model.hyper.K, model.hyper.E) == (2, 8, 3)

    def test_parameters_are_live(self, supervised_model):
        params = supervised_model.parameters()
        assert set(params) == {"codebook_0", "codebook_1", "W_embed", "W_cls", "b_cls"}
        params["b_cls"][0] = 5.0
        assert supervised_model.head.b_cls[0] == 5.0

    def test_copy_is_independent(self, supervised_model):
        clone = supervised_model.copy()
        clone.codebooks[0].codewords[0, 0] += 1.0
        assert clone.codebooks[0].codewords[0, 0] != supervised_model.codebooks[0].codewords[0, 0]

    def test_truncated(self, headless_model):
        short = headless_model.truncated(2)
        assert short.L == 2 and short.hyper.L == 2
        with pytest.raises(ConfigurationError):
            headless_model.truncated(4)

    def test_bytes_are_stable_after_one_round(self, supervised_model):
        supervised_model.history = {"total": [1.5, 1.25]}
        loaded = ProgressiveModel.from_bytes(supervised_model.to_bytes())
        assert loaded.to_bytes() == supervised_model.to_bytes()
        assert loaded.digest() == supervised_model.digest()
        assert loaded.history == {"total": [1.5, 1.25]}
        np.testing.assert_allclose(loaded.head.W_embed, supervised_model.head.W_embed, rtol=1e-6)

    def test_save_load(self, headless_model, tmp_path):
        path = str(tmp_path / "model.pqm")
        headless_model.save(path)
        loaded = ProgressiveModel.load(path)
        assert loaded.head is None and loaded.sem is None
        assert loaded.summary()["bits"] == 6

    def test_digest_changes_with_codewords(self, headless_model):
        before = headless_model.digest()
        headless_model.codebooks[1].codewords[0, 0] += 0.5
        assert headless_model.digest() != before

    def test_bad_magic(self, headless_model):
        blob = headless_model.to_bytes()
        with pytest.raises(FormatError):
            ProgressiveModel.from_bytes(b"XXXX" + blob[len(MODEL_MAGIC):])

    def test_truncated_file(self, headless_model):
        with pytest.raises(CodeLengthError):
            ProgressiveModel.from_bytes(headless_model.to_bytes()[:-4])

    def test_truncated_metadata(self, headless_model):
        # 28-byte header, 4-byte length, then only part of the JSON
        with pytest.raises(CodeLengthError) as exc:
            ProgressiveModel.from_bytes(headless_model.to_bytes()[:37])
        assert "metadata" in exc.value.message
        assert exc.value.details["needed"] > exc.value.details["size"] == 37
