#!/usr/bin/env python3
"""
Acceptance checks on a 10-cluster Gaussian mixture (slow)
"""

import numpy as np
import pytest

from progq.baselines import train_residual_baseline
from progq.benchmark import Protocol
from progq.datasets import make_synthetic
from progq.evaluation import evaluate_prefixes
from progq.index import encode_database, reconstruction_errors
from progq.model import Hyperparameters
from progq.quantizer import hard_distortion_profile
from progq.search import SearchIndex
from progq.trainer import train

SEEDS = range(5)
VARIANTS = ("distortion_only", "full", "margin", "classification", "two_step")


def _train(variant, seed):
    bundle = make_synthetic(clusters=10, points_per_cluster=200, D=16, noise=0.1, seed=seed)
    proto = Protocol.from_bundle(bundle)
    hyper = Hyperparameters(L=4, K=16, E=16, epochs=4, batch_size=16, variant=variant, seed=seed)
    labels = None if variant == "distortion_only" else proto.labels_train
    model = train(proto.X_train, labels, hyper, bundle.label_embeddings)
    return model, proto


def _baseline_ratio(model, proto):
    """Full-length hard distortion on the database against a residual baseline in the same space"""
    hyper = model.hyper
    books = train_residual_baseline(model.embed(proto.X_train), hyper.L, hyper.K, hyper.kmeans_iters, hyper.seed)
    V_db = model.embed(proto.X_db)
    return hard_distortion_profile(V_db, model.codebooks)[-1] / hard_distortion_profile(V_db, books)[-1]


@pytest.fixture(scope="module")
def trained():
    return {(variant, seed): _train(variant, seed) for variant in VARIANTS for seed in SEEDS}


@pytest.fixture(scope="module")
def runs(trained):
    results = []
    for seed in SEEDS:
        model, proto = trained[("distortion_only", seed)]
        db = encode_database(proto.X_db, model)
        report = evaluate_prefixes(SearchIndex(model, db), proto.X_query, proto.relevance(), 100,
                                   recall_k=10, db_features=proto.X_db)
        results.append((model, db, proto, report))
    return results


class TestProgressiveQuality:
    """Longer codes reconstruct and retrieve better"""

    def test_distortion_decreases_with_prefix(self, runs):
        for model, db, proto, _ in runs:
            means = reconstruction_errors(proto.X_db, db, model).mean(axis=0)
            assert np.all(np.diff(means) < 0), means

    def test_recall_improves_with_more_layers(self, runs):
        short = np.median([report.value("recall@10", 8) for *_, report in runs])
        full = np.median([report.value("recall@10", 16) for *_, report in runs])
        assert full >= short

    def test_map_improves_with_more_layers(self, runs):
        one = np.median([report.value("map@100", 4) for *_, report in runs])
        four = np.median([report.value("map@100", 16) for *_, report in runs])
        assert four >= one


class TestTrainingQuality:
    """Training lowers distortion and stays close to the residual baseline"""

    @pytest.mark.parametrize("variant", ["distortion_only", "full"])
    def test_final_hard_distortion_below_initial(self, trained, variant):
        for seed in SEEDS:
            curve = trained[(variant, seed)][0].history["hard_distortion"]
            assert curve[-1] < curve[0], (seed, curve)

    @pytest.mark.parametrize("variant", VARIANTS)
    def test_within_five_percent_of_residual_baseline(self, trained, variant):
        for seed in SEEDS:
            ratio = _baseline_ratio(*trained[(variant, seed)])
            assert ratio <= 1.05, (seed, ratio)

    @pytest.mark.parametrize("variant", ["full", "margin", "classification"])
    def test_held_out_loss_decreases(self, trained, variant):
        for seed in SEEDS:
            curve = trained[(variant, seed)][0].history["holdout"]
            assert curve[-1] < curve[0], (seed, curve)

