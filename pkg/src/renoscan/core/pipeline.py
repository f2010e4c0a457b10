"""
pipeline.py - マニフェスト駆動の特徴量抽出と実験

1 行ごとに 読み込み → 正規化 → 3 チャンネル化 → 特徴量抽出 を行い、
各段階の結果を内容ハッシュで StageCache に保存します。行単位の失敗は
RowFailure として集め、まとめて報告します。
"""

import hashlib
import json
import logging
import threading
import time
from dataclasses import dataclass, field
from pathlib import Path
from typing import Dict, List, Optional, Sequence, Tuple, Union

import numpy as np
import pandas as pd

from .. import __version__
from ..exceptions import RenoscanError, RowFailureError, ValidationError
from ..utils.cache import StageCache
from ..utils.config import PipelineConfig
from ..utils.parallel import ordered_map
from ..utils.seeding import derive_seed
from .cnn import FeatureExtractor, NetworkSpec, alexnet_spec, infer_shapes, load_weights, random_weights
from .data_loader import META_COLUMNS, DataLoader, Manifest, ManifestRow
from .descriptors import geometric_features, hog, hog_length
from .evaluation import CvReport, SIDE_CHOICES, cross_validate_with_config, dataset_from_frame, side_split
from .feature_sets import TABLE_ORDER, FeatureSet, FeatureVector, concatenate, family_names, feature_schema
from .featuremaps import ChannelStack, build_stack
from .imaging import BinaryMask, GrayImage
from .normalize import EllipseFit, NormalizedImage, fit_ellipse, normalize_kidney

logger = logging.getLogger(__name__)

METRICS = ("accuracy", "AUC")


@dataclass(frozen=True)
class RowFailure:
    sample_id: str
    stage: str
    message: str


@dataclass
class RowResult:
    row: ManifestRow
    vector: Optional[FeatureVector] = None
    failure: Optional[RowFailure] = None


@dataclass
class FeatureTable:
    frame: pd.DataFrame
    feature_set: FeatureSet
    failures: List[RowFailure] = field(default_factory=list)


class FeaturePipeline:
    """
    特徴量抽出パイプライン

    CNN の重みは最初に必要になった時点で 1 回だけ読み込み、全スレッドで共有します。
    """

    def __init__(self, cfg: PipelineConfig, cache: Optional[StageCache] = None,
                 threads: Optional[int] = None):
        self.cfg = cfg
        self.cache = cache if cache is not None else StageCache(".", enabled=False)
        self.threads = threads
        self.loader = DataLoader()
        self._extractor: Optional[FeatureExtractor] = None
        self._weights_tag: Optional[str] = None
        self._lock = threading.Lock()

    # ---- 設定から導かれる値 ----

    @property
    def n0(self) -> int:
        return self.cfg.normalization.n0

    def header(self, feature_set: Optional[FeatureSet] = None) -> Dict[str, str]:
        """出力ファイルに埋め込むツール版と設定ハッシュ"""
        header = {"renoscan": __version__, "config_hash": self.cfg.config_hash()}
        if feature_set is not None:
            header["feature_set"] = feature_set.value
        return header

    def network_spec(self) -> NetworkSpec:
        if self.cfg.cnn.spec:
            return NetworkSpec.from_json(self.cfg.cnn.spec)
        return alexnet_spec(self.n0)

    def feature_dims(self, feature_set: FeatureSet) -> Dict[str, int]:
        hog_cfg = self.cfg.hog
        dims = {"HOG": hog_length(self.n0, hog_cfg.cell_size(self.n0), hog_cfg.orientations),
                "GEOME": len(family_names("GEOME", 0))}
        if feature_set.includes("CNN"):
            spec = self.network_spec()
            dims["CNN"] = int(np.prod(infer_shapes(spec)[spec.index(self.cfg.cnn.tap)]))
        return dims

    def schema(self, feature_set: FeatureSet) -> List[str]:
        """特徴量 CSV の列スキーマ（feature_set, N0, HOG 設定, CNN タップの関数）"""
        return feature_schema(feature_set, self.feature_dims(feature_set))

    def extractor(self) -> FeatureExtractor:
        with self._lock:
            if self._extractor is None:
                self._extractor = self._build_extractor()
            return self._extractor

    def _build_extractor(self) -> FeatureExtractor:
        cnn_cfg = self.cfg.cnn
        spec = self.network_spec()
        if cnn_cfg.weights:
            weights = load_weights(cnn_cfg.weights)
        else:
            seed = derive_seed(self.cfg.cross_validation.seed, "cnn")
            logger.info("CNN 重み未指定のため乱数重みを使用します (seed=%d)", seed)
            weights = random_weights(spec, seed)
        mean_image = np.load(cnn_cfg.mean_image) if cnn_cfg.mean_image else None
        return FeatureExtractor(spec, weights, cnn_cfg.tap, cnn_cfg.channel_means, mean_image)

    def weights_tag(self) -> str:
        """CNN 段階のキャッシュキーに含める重みの識別子"""
        with self._lock:
            if self._weights_tag is None:
                path = self.cfg.cnn.weights
                if not path:
                    self._weights_tag = f"random:{derive_seed(self.cfg.cross_validation.seed, 'cnn')}"
                else:
                    self._weights_tag = _digest_path(Path(path))
            return self._weights_tag

    # ---- 段階 ----

    def row_key(self, row: ManifestRow) -> str:
        try:
            return StageCache.make_key(row.image_path.read_bytes(), row.mask_path.read_bytes())
        except OSError as e:
            raise ValidationError(f"入力ファイルを読めません: {e}")

    def normalize_row(self, row: ManifestRow, row_key: str) -> NormalizedImage:
        key = StageCache.make_key(row_key, self.cfg.stage_dict("normalization"))
        entry = self.cache.get("normalize", key)
        if entry is not None:
            return NormalizedImage(image=GrayImage(entry.arrays["image"]),
                                   mask=BinaryMask(entry.arrays["mask"].astype(bool)),
                                   source_fit=EllipseFit.from_dict(entry.meta["fit"]))
        img = self.loader.load_image(row.image_path)
        mask = self.loader.load_mask(row.mask_path)
        fit = fit_ellipse(mask)
        norm_cfg = self.cfg.normalization
        norm = normalize_kidney(img, mask, fit, norm_cfg.n0, norm_cfg.margin, norm_cfg.scaling)
        self.cache.put("normalize", key,
                       {"image": norm.image.data, "mask": norm.mask.bits.astype(np.uint8)},
                       {"fit": fit.to_dict(), "sample_id": row.sample_id})
        return norm

    def stack_row(self, norm: NormalizedImage, row_key: str) -> ChannelStack:
        key = StageCache.make_key(row_key, self.cfg.stage_dict("normalization", "feature_maps"))
        entry = self.cache.get("featuremaps", key)
        if entry is not None:
            return ChannelStack.from_array(entry.arrays["stack"])
        stack = build_stack(norm, self.cfg.feature_maps)
        self.cache.put("featuremaps", key,
                       {"stack": np.stack([stack.r.data, stack.g.data, stack.b.data], axis=-1)})
        return stack

    def hog_row(self, stack: ChannelStack, row_key: str) -> FeatureVector:
        key = StageCache.make_key(row_key, self.cfg.stage_dict("normalization", "feature_maps", "hog"))
        entry = self.cache.get("hog", key)
        if entry is not None:
            values = entry.arrays["values"]
        else:
            hog_cfg = self.cfg.hog
            values = hog(stack.plane(hog_cfg.channel), hog_cfg.cell_size(self.n0),
                         hog_cfg.orientations, hog_cfg.clip).values
            self.cache.put("hog", key, {"values": values})
        return FeatureVector(values=values, names=tuple(family_names("HOG", values.size)),
                             provenance=FeatureSet.HOG)

    def geome_row(self, norm: NormalizedImage, stack: ChannelStack, row_key: str) -> FeatureVector:
        key = StageCache.make_key(row_key, self.cfg.stage_dict("normalization", "feature_maps"))
        entry = self.cache.get("geome", key)
        if entry is not None:
            values = entry.arrays["values"]
        else:
            values = geometric_features(stack.r, norm.mask, norm.source_fit).as_vector()
            self.cache.put("geome", key, {"values": values})
        return FeatureVector(values=values, names=tuple(family_names("GEOME", 0)),
                             provenance=FeatureSet.GEOME)

    def cnn_row(self, stack: ChannelStack, row_key: str) -> FeatureVector:
        key = StageCache.make_key(row_key, self.weights_tag(),
                                  self.cfg.stage_dict("normalization", "feature_maps", "cnn"))
        entry = self.cache.get("cnn", key)
        if entry is not None:
            values = entry.arrays["values"]
            return FeatureVector(values=values, names=tuple(family_names("CNN", values.size)),
                                 provenance=FeatureSet.CNN)
        vector = self.extractor().extract(stack)
        self.cache.put("cnn", key, {"values": vector.values})
        return vector

    def process_row(self, row: ManifestRow, feature_set: FeatureSet) -> RowResult:
        """1 行分の特徴量を抽出（失敗は RowFailure として返す）"""
        stage = "load"
        try:
            row_key = self.row_key(row)
            stage = "normalize"
            norm = self.normalize_row(row, row_key)
            stage = "featuremaps"
            stack = self.stack_row(norm, row_key)
            vectors = []
            if feature_set.includes("CNN"):
                stage = "cnn"
                vectors.append(self.cnn_row(stack, row_key))
            if feature_set.includes("HOG"):
                stage = "hog"
                vectors.append(self.hog_row(stack, row_key))
            if feature_set.includes("GEOME"):
                stage = "geome"
                vectors.append(self.geome_row(norm, stack, row_key))
            return RowResult(row=row, vector=concatenate(vectors))
        except RenoscanError as e:
            logger.warning("%s: %s 段階で失敗: %s", row.sample_id, stage, e)
            return RowResult(row=row, failure=RowFailure(row.sample_id, stage, str(e)))

    def extract(self, manifest: Manifest, feature_set: FeatureSet) -> FeatureTable:
        """マニフェストの全行から特徴量表を作成"""
        start = time.perf_counter()
        schema = self.schema(feature_set)
        if feature_set.includes("CNN"):
            # 重みアーカイブの不備は行単位の失敗ではなく設定エラー
            self.weights_tag()
            self.extractor()
        results = ordered_map(lambda row: self.process_row(row, feature_set),
                              manifest.rows, self.threads)
        records = []
        failures = []
        for result in results:
            if result.failure is not None:
                failures.append(result.failure)
                continue
            if list(result.vector.names) != schema:
                raise ValidationError(f"{result.row.sample_id}: 特徴量スキーマが設定と一致しません")
            row = result.row
            records.append([row.sample_id, row.subject_id, row.side, row.label]
                           + result.vector.values.tolist())
        frame = pd.DataFrame(records, columns=META_COLUMNS + schema)
        logger.info("特徴量抽出 [%s]: %d 行成功 / %d 行失敗 (%.1f 秒)", feature_set.value,
                    len(records), len(failures), time.perf_counter() - start)
        return FeatureTable(frame=frame, feature_set=feature_set, failures=failures)


def _digest_path(path: Path) -> str:
    if not path.exists():
        raise ValidationError(f"重みアーカイブが見つかりません: {path}")
    digest = hashlib.sha256()
    files = sorted(p for p in path.rglob("*") if p.is_file()) if path.is_dir() else [path]
    for p in files:
        with open(p, "rb") as f:
            for chunk in iter(lambda: f.read(1 << 20), b""):
                digest.update(chunk)
    return digest.hexdigest()


@dataclass
class PipelineResult:
    features_path: Path
    table: FeatureTable
    reports: Dict[str, CvReport]
    cache_summary: Dict[str, Dict[str, int]]


def _make_pipeline(cfg: PipelineConfig, out_dir: Path, threads: Optional[int],
                   use_cache: bool) -> FeaturePipeline:
    cache = StageCache(out_dir / "cache", enabled=use_cache)
    return FeaturePipeline(cfg, cache=cache, threads=threads)


def _extract_checked(pipeline: FeaturePipeline, manifest: Manifest, feature_set: FeatureSet,
                     skip_bad: bool) -> FeatureTable:
    table = pipeline.extract(manifest, feature_set)
    if table.failures and not skip_bad:
        raise RowFailureError(table.failures)
    if table.frame.empty:
        raise RowFailureError(table.failures)
    return table


def write_roc(report: CvReport, path: Union[str, Path]) -> None:
    """ROC 点列 CSV を保存（先頭の # 行に report.meta を埋め込む）"""
    DataLoader().save_table(report.roc.to_frame(), path, report.meta)


def run_pipeline(manifest: Manifest, feature_set: FeatureSet, out_dir: Union[str, Path],
                 cfg: PipelineConfig, sides: Sequence[str] = SIDE_CHOICES,
                 skip_bad: bool = False, threads: Optional[int] = None,
                 use_cache: bool = True) -> PipelineResult:
    """
    特徴量抽出から交差検証までを実行

    出力: out_dir/features.csv, cv_<side>.json, roc_<side>.csv, cache/

    Raises:
        RowFailureError: 失敗した行があり skip_bad が False の場合
    """
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    pipeline = _make_pipeline(cfg, out_dir, threads, use_cache)
    table = _extract_checked(pipeline, manifest, feature_set, skip_bad)
    header = pipeline.header(feature_set)
    features_path = out_dir / "features.csv"
    pipeline.loader.save_features(table.frame, features_path, header)

    dataset = dataset_from_frame(table.frame, feature_set)
    reports = {}
    for side in sides:
        report = cross_validate_with_config(side_split(dataset, side), cfg.cross_validation,
                                            cfg.svm, side=side, threads=threads)
        report.meta = dict(header)
        report.to_json(out_dir / f"cv_{side}.json")
        write_roc(report, out_dir / f"roc_{side}.csv")
        reports[side] = report
    pipeline.cache.log_summary()
    return PipelineResult(features_path=features_path, table=table, reports=reports,
                          cache_summary=pipeline.cache.summary())


@dataclass
class Comparison:
    """比較表（行: side × 指標、列: 特徴量セット）"""

    reports: Dict[Tuple[str, str], CvReport]
    feature_sets: List[FeatureSet]
    sides: List[str]
    meta: Dict[str, str] = field(default_factory=dict)

    @property
    def row_labels(self) -> List[str]:
        return [f"{side} {metric}" for side in self.sides for metric in METRICS]

    def _cell(self, side: str, metric: str, fs: FeatureSet) -> Tuple[float, float]:
        report = self.reports[(fs.value, side)]
        if metric == "accuracy":
            return report.accuracy_mean, report.accuracy_std
        return report.auc_mean, report.auc_std

    def grid(self) -> pd.DataFrame:
        """mean±std×1e-2 形式の文字列表"""
        data = {}
        for fs in self.feature_sets:
            column = []
            for side in self.sides:
                for metric in METRICS:
                    mean, std = self._cell(side, metric, fs)
                    column.append(f"{mean:.4f}±{std * 100:.2f}e-2")
            data[fs.value] = column
        return pd.DataFrame(data, index=self.row_labels)

    def to_dict(self) -> dict:
        cells = {}
        for side in self.sides:
            for metric in METRICS:
                row = {}
                for fs in self.feature_sets:
                    mean, std = self._cell(side, metric, fs)
                    row[fs.value] = {"mean": mean, "std": std, "std_x100": std * 100}
                cells[f"{side} {metric}"] = row
        return {"meta": dict(self.meta), "rows": self.row_labels,
                "columns": [fs.value for fs in self.feature_sets], "cells": cells}

    def save(self, out_dir: Union[str, Path]) -> Tuple[Path, Path]:
        out_dir = Path(out_dir)
        csv_path = out_dir / "comparison.csv"
        json_path = out_dir / "comparison.json"
        with open(csv_path, "w", encoding="utf-8", newline="") as f:
            f.write("# " + " ".join(f"{k}={v}" for k, v in self.meta.items()) + "\n")
            self.grid().to_csv(f, index_label="metric", lineterminator="\n")
        with open(json_path, "w", encoding="utf-8") as f:
            json.dump(self.to_dict(), f, indent=2, sort_keys=True, ensure_ascii=False)
            f.write("\n")
        return csv_path, json_path


def compare_frame(frame: pd.DataFrame, cfg: PipelineConfig,
                  feature_sets: Sequence[FeatureSet] = TABLE_ORDER,
                  sides: Sequence[str] = SIDE_CHOICES, threads: Optional[int] = None,
                  meta: Optional[Dict[str, str]] = None) -> Comparison:
    """全特徴量を含む表から、特徴量セット × side ごとに交差検証"""
    reports = {}
    for fs in feature_sets:
        dataset = dataset_from_frame(frame, fs)
        for side in sides:
            report = cross_validate_with_config(side_split(dataset, side), cfg.cross_validation,
                                                cfg.svm, side=side, threads=threads)
            report.meta = dict(meta or {})
            reports[(fs.value, side)] = report
    return Comparison(reports=reports, feature_sets=list(feature_sets), sides=list(sides),
                      meta=dict(meta or {}))


def compare_feature_sets(manifest: Manifest, out_dir: Union[str, Path], cfg: PipelineConfig,
                         feature_sets: Sequence[FeatureSet] = TABLE_ORDER,
                         sides: Sequence[str] = SIDE_CHOICES, skip_bad: bool = False,
                         threads: Optional[int] = None, use_cache: bool = True) -> Comparison:
    """
    7 種類の特徴量セットを比較

    特徴量は全ファミリー分を 1 回だけ抽出し（features_all.csv）、
    列の選択だけを変えて交差検証します。
    """
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    pipeline = _make_pipeline(cfg, out_dir, threads, use_cache)
    full_set = FeatureSet.CNN_HOG_GEOME
    needed = {f for fs in feature_sets for f in fs.families}
    if needed != set(full_set.families):
        full_set = FeatureSet.parse("+".join(needed))
    table = _extract_checked(pipeline, manifest, full_set, skip_bad)
    header = pipeline.header(full_set)
    pipeline.loader.save_features(table.frame, out_dir / "features_all.csv", header)

    comparison = compare_frame(table.frame, cfg, feature_sets, sides, threads,
                               meta=pipeline.header())
    comparison.save(out_dir)
    pipeline.cache.log_summary()
    return comparison
