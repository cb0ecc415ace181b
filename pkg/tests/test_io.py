import numpy as np
import pytest

from siamfv.errors import SiamFvError
from siamfv.fv import GmmModel
from siamfv.io import (
    load_gallery,
    load_training_manifest,
    read_descriptors,
    read_gmm,
    read_projection,
    save_json,
    write_descriptors,
    write_gmm,
    write_projection,
)
from siamfv.projection import fit_pca_whiten


class TestDescriptorFiles:
    def test_round_trip_widens_to_float64(self, tmp_path):
        rng = np.random.default_rng(0)
        data = rng.normal(size=(7, 3))
        path = tmp_path / "x.fvd"
        write_descriptors(path, data)
        back = read_descriptors(path)
        assert back.dtype == np.float64
        np.testing.assert_array_equal(back, data.astype(np.float32).astype(np.float64))

    def test_header_layout(self, tmp_path):
        path = tmp_path / "x.fvd"
        write_descriptors(path, np.zeros((2, 5)))
        blob = path.read_bytes()
        assert blob[:4] == b"FVD1"
        assert len(blob) == 16 + 4 * 10
        assert int.from_bytes(blob[4:8], "little") == 2
        assert int.from_bytes(blob[8:12], "little") == 5
        assert int.from_bytes(blob[12:16], "little") == 0

    def test_bad_magic_and_truncation(self, tmp_path):
        path = tmp_path / "bad.fvd"
        path.write_bytes(b"NOPE" + b"\x00" * 12)
        with pytest.raises(SiamFvError, match="FVD1"):
            read_descriptors(path)
        good = tmp_path / "short.fvd"
        write_descriptors(good, np.zeros((2, 2)))
        good.write_bytes(good.read_bytes()[:-4])
        with pytest.raises(SiamFvError, match="truncated"):
            read_descriptors(good)

    def test_nonzero_reserved_rejected(self, tmp_path):
        path = tmp_path / "r.fvd"
        write_descriptors(path, np.zeros((1, 1)))
        blob = bytearray(path.read_bytes())
        blob[12] = 1
        path.write_bytes(bytes(blob))
        with pytest.raises(SiamFvError, match="reserved"):
            read_descriptors(path)


class TestGmmFiles:
    def test_round_trip_bitwise(self, tmp_path):
        rng = np.random.default_rng(1)
        weights = rng.dirichlet(np.ones(3))
        weights /= weights.sum()
        gmm = GmmModel(weights, rng.normal(size=(3, 4)), rng.uniform(0.5, 2.0, (3, 4)))
        path = tmp_path / "m.fvg"
        write_gmm(path, gmm)
        back = read_gmm(path)
        assert np.array_equal(back.weights, gmm.weights)
        assert np.array_equal(back.means, gmm.means)
        assert np.array_equal(back.stddevs, gmm.stddevs)
        assert back.posterior_mode == "plain"

    def test_bad_magic(self, tmp_path):
        path = tmp_path / "bad.fvg"
        path.write_bytes(b"XXXX" + b"\x00" * 8)
        with pytest.raises(SiamFvError, match="FVG1"):
            read_gmm(path)


class TestProjectionFiles:
    def test_round_trip_bitwise(self, tmp_path):
        rng = np.random.default_rng(2)
        model = fit_pca_whiten(rng.normal(size=(50, 6)) * [3, 2, 1, 1, 0.5, 0.25], 4)
        path = tmp_path / "p.fvp"
        write_projection(path, model)
        back = read_projection(path)
        assert back.method == "pca"
        assert np.array_equal(back.mean, model.mean)
        assert np.array_equal(back.basis, model.basis)
        assert np.array_equal(back.whitening_scales, model.whitening_scales)

    def test_method_byte(self, tmp_path):
        rng = np.random.default_rng(3)
        model = fit_pca_whiten(rng.normal(size=(30, 4)), 2)
        path = tmp_path / "p.fvp"
        write_projection(path, model)
        assert path.read_bytes()[4] == 0  # pca


class TestManifests:
    def test_training_manifest_loads_items(self, tmp_path):
        write_descriptors(tmp_path / "a.fvd", np.ones((2, 3)))
        write_descriptors(tmp_path / "b.fvd", np.zeros((4, 3)) + 2.0)
        save_json(
            {
                "dataset_tag": "demo",
                "items": [
                    {"id": "a", "class_label": "c0", "descriptor_path": "a.fvd"},
                    {"id": "b", "class_label": "c1", "raw_patch_path": "b.fvd"},
                ],
            },
            tmp_path / "manifest.json",
        )
        manifest = load_training_manifest(tmp_path / "manifest.json")
        assert manifest.dataset_tag == "demo"
        assert [item.kind for item in manifest.items] == ["descriptors", "raw_patches"]
        assert manifest.items[1].data.shape == (4, 3)

    def test_duplicate_ids_rejected(self, tmp_path):
        write_descriptors(tmp_path / "a.fvd", np.ones((1, 2)))
        save_json(
            {
                "items": [
                    {"id": "a", "class_label": "c", "descriptor_path": "a.fvd"},
                    {"id": "a", "class_label": "c", "descriptor_path": "a.fvd"},
                ]
            },
            tmp_path / "m.json",
        )
        with pytest.raises(SiamFvError, match="duplicate"):
            load_training_manifest(tmp_path / "m.json")

    def test_dimension_disagreement_rejected(self, tmp_path):
        write_descriptors(tmp_path / "a.fvd", np.ones((1, 2)))
        write_descriptors(tmp_path / "b.fvd", np.ones((1, 3)))
        save_json(
            {
                "items": [
                    {"id": "a", "class_label": "c", "descriptor_path": "a.fvd"},
                    {"id": "b", "class_label": "c", "descriptor_path": "b.fvd"},
                ]
            },
            tmp_path / "m.json",
        )
        with pytest.raises(SiamFvError, match="dimension"):
            load_training_manifest(tmp_path / "m.json")

    def test_gallery_renormalizes_float32_drift(self, tmp_path):
        rng = np.random.default_rng(4)
        vec = rng.normal(size=5)
        vec /= np.linalg.norm(vec)
        write_descriptors(tmp_path / "v.fvd", vec[None, :])
        save_json(
            {
                "items": [{"id": "v", "vector_path": "v.fvd", "dataset_tag": "d"}],
                "queries": [{"id": "v", "relevant": ["v"]}],
            },
            tmp_path / "g.json",
        )
        gallery = load_gallery(tmp_path / "g.json")
        assert np.linalg.norm(gallery.vectors[0]) == pytest.approx(1.0, abs=1e-12)
        assert gallery.relevance["v"] == {"v"}

    def test_gallery_rejects_far_from_unit(self, tmp_path):
        write_descriptors(tmp_path / "v.fvd", np.array([[2.0, 0.0]]))
        save_json(
            {"items": [{"id": "v", "vector_path": "v.fvd"}], "queries": []},
            tmp_path / "g.json",
        )
        with pytest.raises(SiamFvError, match="unit"):
            load_gallery(tmp_path / "g.json")
