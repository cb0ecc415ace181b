import numpy as np
import pytest

import oracles
from siamfv.em import EmConfig, em_fit
from siamfv.errors import SiamFvError
from siamfv.fv import STD_FLOOR, GmmModel, fv_encode
from siamfv.io import ManifestItem, TrainingManifest
from siamfv.synth import generate
from siamfv.training import (
    BackboneModel,
    LabeledPair,
    MiningTuple,
    SiameseModel,
    TrainConfig,
    backbone_backward,
    backbone_forward,
    contrastive_loss,
    expand_tuples,
    full_gradient_check,
    loss_backward,
    mine_tuples,
    sgd_step,
    train,
)
from test_fv_core import random_gmm


def small_manifest(seed=0, classes=4, items=5, count=12, dim=6):
    data = generate(classes, items, count, dim, seed=seed)
    items_ = [
        ManifestItem(it.item_id, it.class_label, "raw_patches", it.patches)
        for it in data.train_items
    ]
    evals = [
        ManifestItem(it.item_id, it.class_label, "raw_patches", it.patches)
        for it in data.eval_items
    ]
    return TrainingManifest(items=items_, eval_items=evals, dataset_tag=data.dataset_tag)


def fitted_gmm(manifest, num_clusters=3, seed=0):
    pooled = np.concatenate([it.data for it in manifest.items])
    return em_fit(pooled, EmConfig(num_clusters=num_clusters, seed=seed))


class TestContrastiveLoss:
    def test_matching_identical_is_zero(self):
        z = np.array([0.6, 0.8])
        assert contrastive_loss(z, z.copy(), 1, 0.8) == 0.0

    def test_saturated_hinge_is_zero(self):
        assert contrastive_loss(np.array([1.0, 0.0]), np.array([0.0, 1.0]), 0, 0.8) == 0.0

    def test_hinge_at_zero_distance(self):
        z = np.array([1.0, 0.0])
        loss = contrastive_loss(z, z.copy(), 0, 0.8)
        assert loss == 0.5 * 0.8**2
        assert loss == pytest.approx(0.32, abs=1e-12)

    def test_exact_symmetry(self):
        rng = np.random.default_rng(0)
        a = rng.normal(size=8)
        a /= np.linalg.norm(a)
        b = rng.normal(size=8)
        b /= np.linalg.norm(b)
        for label in (0, 1):
            assert contrastive_loss(a, b, label, 0.8) == contrastive_loss(b, a, label, 0.8)

    def test_validation(self):
        z = np.array([1.0, 0.0])
        with pytest.raises(ValueError):
            contrastive_loss(z, z, 1, 0.0)
        with pytest.raises(ValueError):
            contrastive_loss(z, z, 2, 0.8)


class TestLossBackward:
    @staticmethod
    def _branch(data, gmm):
        from siamfv.gradients import fv_grads, normalized_chain

        enc = fv_encode(data, gmm)
        return enc, normalized_chain(enc.raw, fv_grads(data, gmm))

    def test_matching_identical_all_zero(self):
        rng = np.random.default_rng(1)
        gmm = random_gmm(rng, 2, 3)
        data = rng.normal(size=(4, 3))
        enc, grads = self._branch(data, gmm)
        out = loss_backward(enc, enc, 1, 0.8, grads, grads)
        for block in (out.omega, out.mu, out.sigma):
            np.testing.assert_array_equal(block, np.zeros_like(block))

    def test_saturated_hinge_all_zero(self):
        rng = np.random.default_rng(2)
        gmm = random_gmm(rng, 2, 3)
        enc_a, grads_a = self._branch(rng.normal(size=(4, 3)), gmm)
        enc_b, grads_b = self._branch(rng.normal(size=(4, 3)) + 5.0, gmm)
        dist = np.linalg.norm(enc_a.normalized - enc_b.normalized)
        out = loss_backward(enc_a, enc_b, 0, 0.5 * dist, grads_a, grads_b)
        for block in (out.omega, out.mu, out.sigma, out.x, out.x_prime):
            np.testing.assert_array_equal(block, np.zeros_like(block))

    def test_end_to_end_finite_difference(self):
        report = full_gradient_check(3, 4, 6, seed=5)
        assert report.per_family_errors["loss"] <= 1e-6
        assert report.per_family_errors["backbone"] <= 1e-6


class TestSgdStep:
    def test_zero_gradient_zero_decay_fixed_point(self):
        cfg = TrainConfig(learning_rate=0.001, momentum=0.5, weight_decay=0.0)
        params = {"means": np.array([1.0, -2.0])}
        velocity = {"means": np.zeros(2)}
        new_params, new_velocity = sgd_step(params, {"means": np.zeros(2)}, velocity, cfg)
        np.testing.assert_array_equal(new_params["means"], params["means"])
        np.testing.assert_array_equal(new_velocity["means"], np.zeros(2))

    def test_plain_descent_step(self):
        cfg = TrainConfig(learning_rate=0.001, momentum=0.0, weight_decay=0.0)
        params = {"means": np.array([1.0])}
        new_params, _ = sgd_step(params, {"means": np.array([1.0])}, {"means": np.zeros(1)}, cfg)
        assert new_params["means"][0] == pytest.approx(1.0 - 0.001, rel=1e-15)

    def test_momentum_accumulation(self):
        cfg = TrainConfig(learning_rate=0.01, momentum=0.5, weight_decay=0.0)
        params = {"means": np.array([0.0])}
        velocity = {"means": np.zeros(1)}
        grads = {"means": np.array([1.0])}
        params1, velocity = sgd_step(params, grads, velocity, cfg)
        step1 = params1["means"][0] - params["means"][0]
        params2, velocity = sgd_step(params1, grads, velocity, cfg)
        step2 = params2["means"][0] - params1["means"][0]
        assert step1 == pytest.approx(-0.01)
        assert step2 == pytest.approx(1.5 * step1, rel=1e-12)

    def test_weight_simplex_and_floor_projection(self):
        cfg = TrainConfig(learning_rate=0.5, momentum=0.0, weight_decay=0.0)
        params = {
            "weights": np.array([0.5, 0.5]),
            "stddevs": np.array([[0.0011], [1.0]]),
        }
        grads = {
            "weights": np.array([1.0, -1.0]),
            "stddevs": np.array([[1.0], [0.0]]),
        }
        velocity = {key: np.zeros_like(val) for key, val in params.items()}
        new_params, _ = sgd_step(params, grads, velocity, cfg)
        assert new_params["weights"].sum() == pytest.approx(1.0, abs=1e-12)
        # clamp happens before the simplex renormalization, which can scale
        # the floor itself down by the (1 + C*1e-6) mass it added
        assert np.all(new_params["weights"] >= 1e-6 * (1.0 - 1e-4))
        assert np.all(new_params["weights"] > 0.0)
        assert np.all(new_params["stddevs"] >= STD_FLOOR)

    def test_non_finite_gradient_skips_update(self):
        cfg = TrainConfig()
        params = {"means": np.array([1.0])}
        velocity = {"means": np.array([0.5])}
        new_params, new_velocity = sgd_step(
            params, {"means": np.array([np.nan])}, velocity, cfg
        )
        assert new_params is params and new_velocity is velocity


class TestBackbone:
    def test_identity_passthrough(self):
        patches = np.random.default_rng(0).normal(size=(5, 3))
        out = backbone_forward(patches, BackboneModel.identity(3))
        np.testing.assert_array_equal(out.data, patches)

    def test_zero_upstream_zero_grads(self):
        patches = np.random.default_rng(1).normal(size=(4, 3))
        backbone = BackboneModel.identity(3)
        dw, db = backbone_backward(patches, backbone, np.zeros((4, 3)))
        assert not dw.any() and not db.any()

    def test_transpose_map(self):
        rng = np.random.default_rng(2)
        patches = rng.normal(size=(6, 4))
        backbone = BackboneModel(rng.normal(size=(4, 3)), rng.normal(size=3))
        upstream = rng.normal(size=(6, 3))
        dw, db = backbone_backward(patches, backbone, upstream)
        np.testing.assert_allclose(dw, patches.T @ upstream)
        np.testing.assert_allclose(db, upstream.sum(axis=0))


class TestMining:
    def test_pair_and_tuple_validation(self):
        with pytest.raises(ValueError):
            LabeledPair("a", "a", 1)
        with pytest.raises(ValueError):
            LabeledPair("a", "b", 2)
        with pytest.raises(ValueError):
            MiningTuple("q", "p", ("n1", "n1"))

    def test_forced_selection_with_five_negatives(self):
        # one query class with a pair, plus exactly 5 singleton-class items
        rng = np.random.default_rng(3)
        items = [
            ManifestItem("q0", "q", "descriptors", rng.normal(size=(6, 4))),
            ManifestItem("q1", "q", "descriptors", rng.normal(size=(6, 4))),
        ] + [
            ManifestItem(f"n{i}", f"other{i}", "descriptors", rng.normal(size=(6, 4)))
            for i in range(5)
        ]
        pooled = np.concatenate([it.data for it in items])
        gmm = em_fit(pooled, EmConfig(num_clusters=2, seed=0))
        model = SiameseModel(gmm, BackboneModel.identity(4))
        cfg = TrainConfig(pairs_per_mine=3, negatives_per_pair=5)
        tuples = mine_tuples(items, model, cfg, np.random.default_rng(0))
        assert len(tuples) == 3
        for tup in tuples:
            assert set(tup.negatives) == {"n0", "n1", "n2", "n3", "n4"}

    def test_negatives_match_exhaustive_sort_oracle(self):
        manifest = small_manifest(seed=4, classes=5, items=10, count=10, dim=6)
        items = manifest.items
        gmm = fitted_gmm(manifest)
        model = SiameseModel(gmm, BackboneModel.identity(6))
        cfg = TrainConfig(pairs_per_mine=40, negatives_per_pair=5)
        tuples = mine_tuples(items, model, cfg, np.random.default_rng(1))

        from siamfv.training import _encode_item

        vectors = {it.item_id: _encode_item(it, model).normalized for it in items}
        classes = {it.item_id: it.class_label for it in items}
        for tup in tuples:
            candidates = [i for i in vectors if classes[i] != classes[tup.query]]
            ranked = oracles.full_sort_ranking(
                candidates, [vectors[i] for i in candidates], vectors[tup.query]
            )
            assert list(tup.negatives) == ranked[:5]

    def test_tuple_arithmetic(self):
        manifest = small_manifest(seed=5, classes=4, items=6, count=8, dim=4)
        gmm = fitted_gmm(manifest)
        model = SiameseModel(gmm, BackboneModel.identity(4))
        cfg = TrainConfig(pairs_per_mine=12, negatives_per_pair=5)
        tuples = mine_tuples(manifest.items, model, cfg, np.random.default_rng(2))
        pairs = expand_tuples(tuples)
        assert len(pairs) == 12 * (1 + 5)
        assert sum(p.label for p in pairs) == 12

    def test_corpus_too_small(self):
        manifest = small_manifest(seed=6, classes=2, items=3, count=8, dim=4)
        items = manifest.items[:5]  # 3 of c000, 2 of c001 -> only 2-3 negatives
        gmm = fitted_gmm(manifest, num_clusters=2)
        model = SiameseModel(gmm, BackboneModel.identity(4))
        with pytest.raises(SiamFvError, match="corpus too small"):
            mine_tuples(items, model, TrainConfig(), np.random.default_rng(0))


class TestTrainLoop:
    @staticmethod
    def _tiny_cfg(**kw):
        base = dict(
            epochs=2,
            pairs_per_mine=20,
            negatives_per_pair=5,
            remine_every=40,
            iterations_per_epoch=80,
            seed=11,
        )
        base.update(kw)
        return TrainConfig(**base)

    def test_zero_learning_rate_leaves_parameters_bitwise(self):
        manifest = small_manifest(seed=7)
        gmm = fitted_gmm(manifest)
        result = train(manifest, self._tiny_cfg(learning_rate=0.0), gmm)
        assert np.array_equal(result.gmm.weights, gmm.weights)
        assert np.array_equal(result.gmm.means, gmm.means)
        assert np.array_equal(result.gmm.stddevs, gmm.stddevs)
        assert np.array_equal(result.backbone.weight, np.eye(6))

    def test_deterministic_metrics(self):
        manifest = small_manifest(seed=8)
        gmm = fitted_gmm(manifest)
        a = train(manifest, self._tiny_cfg(), gmm)
        b = train(manifest, self._tiny_cfg(), gmm)
        assert a.metrics == b.metrics

    def test_metrics_structure_and_model_invariants(self, tmp_path):
        manifest = small_manifest(seed=9)
        gmm = fitted_gmm(manifest)
        path = tmp_path / "metrics.jsonl"
        result = train(manifest, self._tiny_cfg(), gmm, metrics_path=path)
        assert [m["epoch"] for m in result.metrics] == [0, 1, 2]
        assert result.metrics[0]["mean_loss"] is None
        assert all("map_eval" in m for m in result.metrics)
        assert abs(result.gmm.weights.sum() - 1.0) <= 1e-12
        assert np.all(result.gmm.stddevs >= STD_FLOOR)
        assert len(path.read_text().splitlines()) == 3

    def test_dimension_mismatch_rejected_before_training(self):
        manifest = small_manifest(seed=10, dim=4)
        wrong = GmmModel(np.array([1.0]), np.zeros((1, 5)), np.ones((1, 5)))
        with pytest.raises(SiamFvError):
            train(manifest, self._tiny_cfg(), wrong)
