"""
合成ファントムとデータ入出力のテスト
"""

import numpy as np
import pandas as pd
import pytest

from renoscan.core.data_loader import DataLoader, parse_label, parse_side
from renoscan.core.descriptors import block_features
from renoscan.core.imaging import GrayImage
from renoscan.core.phantoms import generate_corpus, generate_phantom
from renoscan.exceptions import DataError, ValidationError


class TestPhantom:
    def test_normal_kidney_has_no_dark_pixels(self):
        image, mask, params = generate_phantom(np.random.default_rng(0), -1, 128)
        assert params.holes == 0
        assert image.data[mask.bits].min() >= 100
        assert np.all(block_features(image, mask) == 0.0)

    def test_cakut_kidney_has_holes(self):
        image, mask, params = generate_phantom(np.random.default_rng(0), 1, 128)
        assert params.holes >= 2
        assert block_features(image, mask)[-1] > 0.0
        assert params.b / params.a >= 0.62

    def test_background_range(self):
        image, mask, _ = generate_phantom(np.random.default_rng(2), -1, 96)
        outside = image.data[~mask.bits]
        assert outside.min() >= 40 and outside.max() <= 60
        np.testing.assert_array_equal(image.data, np.rint(image.data))


class TestCorpus:
    def test_layout_and_manifest(self, tmp_path):
        manifest = generate_corpus(tmp_path, n_normal=25, n_cakut=25, seed=7, size=64)
        assert len(manifest) == 100
        assert len(list((tmp_path / "images").glob("*.png"))) == 100
        df = pd.read_csv(tmp_path / "manifest.csv")
        assert list(df.columns) == ["sample_id", "subject_id", "side", "label", "image_path", "mask_path"]
        assert (df["label"] == "cakut").sum() == 50
        assert set(df["side"]) == {"left", "right"}
        loaded = DataLoader().load_manifest(tmp_path / "manifest.csv")
        assert [r.sample_id for r in loaded.rows][:2] == ["P001_L", "P001_R"]
        assert loaded.rows[0].label == -1

    def test_deterministic(self, tmp_path):
        generate_corpus(tmp_path / "a", 2, 2, seed=3, size=64)
        generate_corpus(tmp_path / "b", 2, 2, seed=3, size=64)
        for name in ("P001_L.png", "P004_R.png"):
            a = (tmp_path / "a" / "images" / name).read_bytes()
            b = (tmp_path / "b" / "images" / name).read_bytes()
            assert a == b


class TestDataLoader:
    def test_image_round_trip(self, tmp_path, rng):
        loader = DataLoader()
        img = GrayImage(rng.integers(0, 256, (20, 30)).astype(float))
        loader.save_image(img, tmp_path / "x.png")
        np.testing.assert_array_equal(loader.load_image(tmp_path / "x.png").data, img.data)

    def test_missing_image(self, tmp_path):
        with pytest.raises(DataError):
            DataLoader().load_image(tmp_path / "absent.png")

    def test_unsupported_format(self, tmp_path):
        path = tmp_path / "x.tif"
        path.write_bytes(b"")
        with pytest.raises(ValidationError):
            DataLoader().load_image(path)

    def test_manifest_problems_are_collected(self, tmp_path):
        (tmp_path / "manifest.csv").write_text(
            "sample_id,subject_id,side,label,image_path,mask_path\n"
            "a,p1,top,normal,a.png,a_mask.png\n"
            "b,p2,left,maybe,b.png,b_mask.png\n",
            encoding="utf-8",
        )
        with pytest.raises(ValidationError) as exc:
            DataLoader().load_manifest(tmp_path / "manifest.csv")
        assert "manifest.csv:2" in str(exc.value)
        assert "manifest.csv:3" in str(exc.value)

    def test_missing_columns(self, tmp_path):
        (tmp_path / "manifest.csv").write_text("sample_id,label\na,1\n", encoding="utf-8")
        with pytest.raises(ValidationError, match="image_path"):
            DataLoader().load_manifest(tmp_path / "manifest.csv")

    def test_parsers(self):
        assert parse_label("CAKUT") == 1
        assert parse_label("-1") == -1
        assert parse_side(" Right ") == "right"
        with pytest.raises(ValidationError):
            parse_label("2")

    def test_features_header_is_skipped(self, tmp_path):
        loader = DataLoader()
        df = pd.DataFrame({"sample_id": ["a"], "subject_id": ["p"], "side": ["left"],
                           "label": [1], "geo_L1": [1.5]})
        loader.save_features(df, tmp_path / "f.csv", {"renoscan": "0.1.0"})
        assert (tmp_path / "f.csv").read_text(encoding="utf-8").startswith("# renoscan=0.1.0")
        loaded = loader.load_features(tmp_path / "f.csv")
        assert loaded["geo_L1"].tolist() == [1.5]
