import json

import numpy as np
import pytest

from conftest import vessel_image
from unconked import io as uio
from unconked.detector import HIGHER, LOWER, Heatmap, KeypointCandidates
from unconked.errors import ConfigError
from unconked.geometry import PointSet


class TestImages:
    def test_png_round_trip(self, tmp_path):
        img = vessel_image(0, 32)
        path = tmp_path / "img.png"
        uio.save_image(path, img)
        loaded = uio.load_image(path)
        assert loaded.shape == (32, 32, 3)
        assert np.abs(loaded - img).max() <= 1 / 255 + 1e-6  # 8-bit quantization

    def test_mask_round_trip(self, tmp_path):
        mask = np.random.default_rng(0).random((16, 16)) > 0.5
        path = tmp_path / "mask.png"
        uio.save_mask(path, mask)
        np.testing.assert_array_equal(uio.load_mask(path), mask)


class TestControlPoints:
    def test_round_trip(self, tmp_path):
        rng = np.random.default_rng(1)
        fixed = PointSet.from_coords(rng.uniform(0, 100, (20, 2)))
        moving = PointSet.from_coords(rng.uniform(0, 100, (20, 2)))
        path = tmp_path / "cp.txt"
        uio.save_control_points(path, fixed, moving)
        f2, m2 = uio.load_control_points(path)
        np.testing.assert_allclose(f2.coords, fixed.coords, atol=1e-5)
        np.testing.assert_allclose(m2.coords, moving.coords, atol=1e-5)

    def test_malformed_line_rejected(self, tmp_path):
        path = tmp_path / "cp.txt"
        path.write_text("1 2 3\n")
        with pytest.raises(ValueError):
            uio.load_control_points(path)


class TestHeatmapFiles:
    def test_sixteen_bit_round_trip(self, tmp_path):
        rng = np.random.default_rng(2)
        hm = Heatmap(rng.random((24, 24)).astype(np.float32), LOWER,
                     rng.random((24, 24)) > 0.2, "ap")
        path = tmp_path / "map.png"
        uio.save_heatmap(hm, path)
        assert path.with_suffix(".json").exists()
        assert path.with_suffix(".mask.png").exists()
        loaded = uio.load_heatmap(path)
        assert loaded.kind == "ap" and loaded.polarity == LOWER
        np.testing.assert_array_equal(loaded.validity_mask, hm.validity_mask)
        assert np.abs(loaded.values - hm.values).max() <= 1 / 65535 + 1e-7

    def test_sidecar_contents(self, tmp_path):
        hm = Heatmap(np.zeros((4, 4), np.float32), HIGHER, np.ones((4, 4), bool), "ss")
        path = tmp_path / "m.png"
        uio.save_heatmap(hm, path)
        meta = json.loads(path.with_suffix(".json").read_text())
        assert meta["kind"] == "ss"
        assert meta["polarity"] == HIGHER


class TestKeypointCsv:
    def test_csv_format(self, tmp_path):
        pts = PointSet(np.array([[1.5, 2.25], [10.0, 3.0]]), np.array([0, 1]))
        cands = KeypointCandidates(pts, np.array([0.9, 0.5], dtype=np.float32))
        path = tmp_path / "kps.csv"
        uio.save_keypoints_csv(cands, path)
        lines = path.read_text().splitlines()
        assert lines[0] == "id,x,y,score"
        assert lines[1].startswith("0,1.500,2.250,0.9")
        assert len(lines) == 3


class TestManifest:
    def write_pair_files(self, tmp_path):
        uio.save_image(tmp_path / "a.png", vessel_image(0, 16))
        uio.save_image(tmp_path / "b.png", vessel_image(1, 16))

    def test_load_valid_manifest(self, tmp_path):
        self.write_pair_files(tmp_path)
        manifest = tmp_path / "pairs.jsonl"
        uio.write_manifest(manifest, [
            {"fixed": "a.png", "moving": "b.png", "category": "S"},
        ])
        records = uio.load_manifest(manifest)
        assert len(records) == 1
        assert records[0].fixed.exists()
        assert records[0].category == "S"

    def test_missing_file_rejected(self, tmp_path):
        manifest = tmp_path / "pairs.jsonl"
        uio.write_manifest(manifest, [{"fixed": "nope.png", "moving": "also_nope.png"}])
        with pytest.raises(ConfigError):
            uio.load_manifest(manifest)

    def test_empty_manifest_rejected(self, tmp_path):
        manifest = tmp_path / "pairs.jsonl"
        manifest.write_text("")
        with pytest.raises(ConfigError):
            uio.load_manifest(manifest)

    def test_unknown_keys_rejected(self, tmp_path):
        self.write_pair_files(tmp_path)
        manifest = tmp_path / "pairs.jsonl"
        uio.write_manifest(manifest, [{"fixed": "a.png", "moving": "b.png", "frob": 1}])
        with pytest.raises(ConfigError):
            uio.load_manifest(manifest)

    def test_missing_manifest_rejected(self, tmp_path):
        with pytest.raises(ConfigError):
            uio.load_manifest(tmp_path / "absent.jsonl")
