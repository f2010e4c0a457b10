"""
マニフェスト駆動パイプラインのテスト

N0=64 と小さな CNN 定義を使います。最後の試験は合成コーパス全体での
比較実験で、slow マーカー付きです。
"""

import json

import numpy as np
import pandas as pd
import pytest
from conftest import tiny_spec

from renoscan.core.cnn import random_weights, save_weights
from renoscan.core.data_loader import DataLoader
from renoscan.core.feature_sets import TABLE_ORDER, FeatureSet
from renoscan.core.imaging import BinaryMask
from renoscan.core.phantoms import generate_corpus
from renoscan.core.pipeline import FeaturePipeline, compare_feature_sets, run_pipeline
from renoscan.exceptions import RowFailureError, WeightArchiveError
from renoscan.utils.cache import StageCache
from renoscan.utils.config import PipelineConfig


@pytest.fixture
def manifest(small_manifest):
    return DataLoader().load_manifest(small_manifest)


def break_first_mask(manifest):
    """先頭行のマスクを 3 画素だけにする"""
    row = manifest.rows[0]
    bits = np.zeros((96, 96), dtype=bool)
    bits[10, 10:13] = True
    DataLoader().save_mask(BinaryMask(bits), row.mask_path)
    return row.sample_id


class TestFeaturePipeline:
    def test_geome_table(self, manifest, small_config):
        table = FeaturePipeline(small_config).extract(manifest, FeatureSet.GEOME)
        frame = table.frame
        assert len(frame) == 8
        assert not table.failures
        assert list(frame.columns[:4]) == ["sample_id", "subject_id", "side", "label"]
        geo = [c for c in frame.columns if c.startswith("geo_")]
        assert len(geo) == 18 == frame.shape[1] - 4
        assert sorted(set(frame["label"])) == [-1, 1]

    def test_full_schema(self, manifest, small_config):
        pipeline = FeaturePipeline(small_config)
        table = pipeline.extract(manifest, FeatureSet.CNN_HOG_GEOME)
        columns = list(table.frame.columns[4:])
        assert columns == pipeline.schema(FeatureSet.CNN_HOG_GEOME)
        assert len(columns) == 16 + 3600 + 18
        assert columns[0] == "cnn_0000"
        assert columns[16] == "hog_0000"
        assert columns[16 + 3600].startswith("geo_")

    def test_cached_rerun(self, manifest, small_config, tmp_path):
        loader = DataLoader()
        outputs = []
        summaries = []
        for attempt in range(2):
            cache = StageCache(tmp_path / "cache")
            pipeline = FeaturePipeline(small_config, cache=cache, threads=2)
            table = pipeline.extract(manifest, FeatureSet.CNN_HOG_GEOME)
            path = tmp_path / f"features_{attempt}.csv"
            loader.save_features(table.frame, path, pipeline.header(FeatureSet.CNN_HOG_GEOME))
            outputs.append(path.read_bytes())
            summaries.append(cache.summary())
        assert outputs[0] == outputs[1]
        assert all(s["hits"] == 0 for s in summaries[0].values())
        assert set(summaries[1]) == {"normalize", "featuremaps", "cnn", "hog", "geome"}
        for counts in summaries[1].values():
            assert counts == {"hits": 8, "misses": 0}

    def test_config_change_invalidates_stage(self, manifest, small_config, tmp_path):
        FeaturePipeline(small_config, cache=StageCache(tmp_path)).extract(manifest, FeatureSet.HOG)
        changed = small_config.merged({"hog": {"clip": 0.3}})
        cache = StageCache(tmp_path)
        FeaturePipeline(changed, cache=cache).extract(manifest, FeatureSet.HOG)
        summary = cache.summary()
        assert summary["normalize"]["misses"] == 0
        assert summary["hog"]["hits"] == 0

    def test_incomplete_weight_archive_is_not_a_row_failure(self, manifest, small_config, tmp_path):
        save_weights(random_weights(tiny_spec(), seed=1), tmp_path / "w")
        (tmp_path / "w" / "weights.bin").unlink()
        cfg = small_config.merged({"cnn": {"weights": str(tmp_path / "w")}})
        with pytest.raises(WeightArchiveError):
            FeaturePipeline(cfg).extract(manifest, FeatureSet.CNN)

    def test_row_failure_is_reported(self, manifest, small_config):
        broken = break_first_mask(manifest)
        table = FeaturePipeline(small_config).extract(manifest, FeatureSet.GEOME)
        assert len(table.frame) == 7
        assert [(f.sample_id, f.stage) for f in table.failures] == [(broken, "normalize")]
        assert "degenerate region" in table.failures[0].message


class TestRunPipeline:
    def test_outputs(self, manifest, small_config, tmp_path):
        result = run_pipeline(manifest, FeatureSet.GEOME, tmp_path / "out", small_config)
        out = tmp_path / "out"
        assert result.features_path == out / "features.csv"
        for side in ("left", "right", "both"):
            report = json.loads((out / f"cv_{side}.json").read_text(encoding="utf-8"))
            assert report["k"] == 2 and report["repeats"] == 2
            assert report["meta"]["config_hash"] == small_config.config_hash()
            roc_path = out / f"roc_{side}.csv"
            first = roc_path.read_text(encoding="utf-8").splitlines()[0]
            assert f"config_hash={small_config.config_hash()}" in first
            roc = pd.read_csv(roc_path, comment="#")
            assert list(roc.columns) == ["threshold", "fpr", "tpr"]
        assert result.reports["both"].n_samples == 8
        assert result.reports["left"].n_samples == 4

    def test_failed_rows_abort(self, manifest, small_config, tmp_path):
        break_first_mask(manifest)
        with pytest.raises(RowFailureError) as exc:
            run_pipeline(manifest, FeatureSet.GEOME, tmp_path / "out", small_config)
        assert exc.value.exit_code == 3
        assert len(exc.value.failures) == 1

    def test_skip_bad(self, manifest, small_config, tmp_path):
        break_first_mask(manifest)
        result = run_pipeline(manifest, FeatureSet.GEOME, tmp_path / "out", small_config,
                              sides=["both"], skip_bad=True)
        assert result.reports["both"].n_samples == 7
        assert len(result.table.failures) == 1


class TestCompare:
    def test_grid_shape(self, manifest, small_config, tmp_path):
        comparison = compare_feature_sets(manifest, tmp_path / "cmp", small_config)
        grid = comparison.grid()
        assert grid.shape == (6, 7)
        assert list(grid.columns) == [fs.value for fs in TABLE_ORDER]
        assert list(grid.index) == [f"{side} {metric}" for side in ("left", "right", "both")
                                    for metric in ("accuracy", "AUC")]
        assert (tmp_path / "cmp" / "comparison.csv").exists()
        saved = json.loads((tmp_path / "cmp" / "comparison.json").read_text(encoding="utf-8"))
        assert len(saved["rows"]) == 6 and len(saved["columns"]) == 7
        features = DataLoader().load_features(tmp_path / "cmp" / "features_all.csv")
        assert features.shape == (8, 4 + 16 + 3600 + 18)


@pytest.mark.slow
def test_phantom_experiment(tmp_path):
    """GEOME を含む特徴量セットは合成コーパスで高い AUC を示し、再実行でも同一の結果になる"""
    manifest = generate_corpus(tmp_path / "corpus", n_normal=25, n_cakut=25, seed=7)
    cfg = PipelineConfig().merged({"cross_validation": {"k": 10, "repeats": 10, "seed": 7}})
    assert cfg.cnn.spec is None
    outputs = []
    for attempt in ("first", "second"):
        out_dir = tmp_path / attempt
        comparison = compare_feature_sets(manifest, out_dir, cfg, threads=1, use_cache=False)
        outputs.append((out_dir / "comparison.json").read_bytes())
    for fs in TABLE_ORDER:
        if not fs.includes("GEOME"):
            continue
        for side in ("left", "right", "both"):
            assert comparison.reports[(fs.value, side)].auc_mean >= 0.95, (fs.value, side)
    assert outputs[0] == outputs[1]
