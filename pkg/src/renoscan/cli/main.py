"""
main.py - renoscan コマンドの実装

例外は全てここで終了コードに変換します（0: 成功, 2: 検証エラー,
3: データ行の失敗, 4: 数値エラー）。
"""

import argparse
import json
import logging
import sys
from dataclasses import replace
from pathlib import Path
from typing import Any, Dict, List, Optional

import numpy as np
import pandas as pd

from .. import __version__
from ..core.cnn import FeatureExtractor, NetworkSpec, alexnet_spec, load_weights, random_weights
from ..core.data_loader import DataLoader, Manifest
from ..core.evaluation import (
    SIDE_CHOICES,
    cross_validate_with_config,
    dataset_from_frame,
    side_split,
)
from ..core.feature_sets import TABLE_ORDER, FeatureSet
from ..core.featuremaps import build_stack
from ..core.imaging import apply_mask
from ..core.normalize import NormalizedImage, fit_ellipse, normalize_kidney
from ..core.phantoms import generate_corpus
from ..core.pipeline import (
    FeaturePipeline,
    RowFailure,
    compare_feature_sets,
    compare_frame,
    run_pipeline,
    write_roc,
)
from ..core.svm import SvmModel, TrainingSet, decision_values, predict_labels, train
from ..exceptions import RenoscanError, RowFailureError, ValidationError
from ..utils.cache import StageCache
from ..utils.config import PipelineConfig, hash_payload, load_config, load_settings
from ..utils.logging_config import configure_logging
from ..utils.parallel import ordered_map
from ..utils.seeding import derive_seed
from ..visualization.composite import load_stack, save_composite
from ..visualization.roc_plots import plot_roc_curves

logger = logging.getLogger(__name__)

# フラグ名 → (設定セクション, キー)
CONFIG_FLAGS = {
    "n0": ("normalization", "n0"),
    "margin": ("normalization", "margin"),
    "scaling_mode": ("normalization", "scaling"),
    "canny_sigma": ("feature_maps", "canny", "sigma"),
    "canny_low": ("feature_maps", "canny", "low_frac"),
    "canny_high": ("feature_maps", "canny", "high_frac"),
    "dt_squared": ("feature_maps", "dt_squared"),
    "dt_source": ("feature_maps", "dt_source"),
    "hog_cell_divisor": ("hog", "cell_divisor"),
    "hog_channel": ("hog", "channel"),
    "spec": ("cnn", "spec"),
    "weights": ("cnn", "weights"),
    "tap": ("cnn", "tap"),
    "mean_image": ("cnn", "mean_image"),
    "c": ("svm", "c"),
    "eps": ("svm", "eps"),
    "max_iter": ("svm", "max_iter"),
    "scale": ("svm", "scaling"),
    "bias": ("svm", "bias"),
    "k": ("cross_validation", "k"),
    "repeats": ("cross_validation", "repeats"),
    "seed": ("cross_validation", "seed"),
    "group_by_subject": ("cross_validation", "group_by_subject"),
}


def effective_config(args: argparse.Namespace) -> PipelineConfig:
    """既定値 → --config → 個別フラグの順に設定を組み立てる"""
    cfg = load_config(args.config)
    overrides: Dict[str, Any] = {}
    for flag, path in CONFIG_FLAGS.items():
        value = getattr(args, flag, None)
        if value is None:
            continue
        node = overrides
        for key in path[:-1]:
            node = node.setdefault(key, {})
        node[path[-1]] = value
    return cfg.merged(overrides) if overrides else cfg


def _header(cfg: PipelineConfig, **extra: str) -> Dict[str, str]:
    header = {"renoscan": __version__, "config_hash": cfg.config_hash()}
    header.update(extra)
    return header


def _load_manifest(args: argparse.Namespace) -> Manifest:
    return DataLoader().load_manifest(_require(args, "manifest"))


def _require(args: argparse.Namespace, name: str) -> str:
    value = getattr(args, name, None)
    if not value:
        flag = "--" + name.replace("_", "-")
        if name == "manifest" and hasattr(args, "image"):
            raise ValidationError(f"{args.command}: {flag} または --image のいずれかを指定してください")
        raise ValidationError(f"{args.command}: {flag} を指定してください")
    return value


def _raise_failures(failures: List[RowFailure], skip_bad: bool) -> None:
    if failures and not skip_bad:
        raise RowFailureError(failures)
    for f in failures:
        logger.warning("スキップ: %s [%s]: %s", f.sample_id, f.stage, f.message)


def _per_row(manifest: Manifest, func, threads: Optional[int]) -> List[RowFailure]:
    def run(row):
        try:
            func(row)
            return None
        except RenoscanError as e:
            return RowFailure(row.sample_id, func.__name__, str(e))

    return [f for f in ordered_map(run, manifest.rows, threads) if f is not None]


# ---- サブコマンド ----

def cmd_normalize(args: argparse.Namespace) -> int:
    cfg = effective_config(args)
    norm_cfg = cfg.normalization
    loader = DataLoader()
    header = _header(cfg)

    if args.image:
        if not (args.mask and args.out):
            raise ValidationError("--image には --mask と --out が必要です")
        mask = loader.load_mask(args.mask)
        fit = fit_ellipse(mask)
        norm = normalize_kidney(loader.load_image(args.image), mask, fit, norm_cfg.n0,
                                norm_cfg.margin, norm_cfg.scaling)
        out = Path(args.out)
        loader.save_image(norm.image, out, header)
        loader.save_mask(norm.mask, out.with_name(f"{out.stem}_mask.png"), header)
        with open(out.with_suffix(".json"), "w", encoding="utf-8") as f:
            json.dump({"meta": header, "fit": fit.to_dict()}, f, indent=2)
        return 0

    manifest = _load_manifest(args)
    pipeline = FeaturePipeline(cfg, threads=args.threads)
    out_dir = Path(_require(args, "out_dir"))
    fits = {}

    def normalize(row):
        norm = pipeline.normalize_row(row, pipeline.row_key(row))
        loader.save_image(norm.image, out_dir / f"{row.sample_id}_norm.png", header)
        loader.save_mask(norm.mask, out_dir / f"{row.sample_id}_mask.png", header)
        fits[row.sample_id] = norm.source_fit.to_dict()

    failures = _per_row(manifest, normalize, args.threads)
    out_dir.mkdir(parents=True, exist_ok=True)
    ordered = {r.sample_id: fits[r.sample_id] for r in manifest.rows if r.sample_id in fits}
    with open(out_dir / "fits.json", "w", encoding="utf-8") as f:
        json.dump({"meta": header, "fits": ordered}, f, indent=2)
    _raise_failures(failures, args.skip_bad)
    return 0


def cmd_featmaps(args: argparse.Namespace) -> int:
    cfg = effective_config(args)
    header = _header(cfg)

    if args.image:
        # 正規化済み画像とマスクから直接作成
        if not (args.mask and args.out_prefix):
            raise ValidationError("--image には --mask と --out-prefix が必要です")
        loader = DataLoader()
        mask = loader.load_mask(args.mask)
        image = apply_mask(loader.load_image(args.image), mask)
        norm = NormalizedImage(image=image, mask=mask, source_fit=fit_ellipse(mask))
        save_composite(build_stack(norm, cfg.feature_maps), args.out_prefix, header)
        return 0

    manifest = _load_manifest(args)
    pipeline = FeaturePipeline(cfg, threads=args.threads)
    out_dir = Path(_require(args, "out_dir"))

    def featmaps(row):
        key = pipeline.row_key(row)
        stack = pipeline.stack_row(pipeline.normalize_row(row, key), key)
        save_composite(stack, out_dir / row.sample_id, header)

    _raise_failures(_per_row(manifest, featmaps, args.threads), args.skip_bad)
    return 0


def cmd_features(args: argparse.Namespace) -> int:
    cfg = effective_config(args)
    feature_set = FeatureSet.parse(args.set)
    manifest = _load_manifest(args)
    cache_root = Path(args.cache_dir) if args.cache_dir else Path(args.out).parent / "cache"
    pipeline = FeaturePipeline(cfg, cache=StageCache(cache_root, enabled=not args.no_cache),
                               threads=args.threads)
    table = pipeline.extract(manifest, feature_set)
    _raise_failures(table.failures, args.skip_bad)
    pipeline.loader.save_features(table.frame, args.out, pipeline.header(feature_set))
    pipeline.cache.log_summary()
    return 0


def cmd_cnn_extract(args: argparse.Namespace) -> int:
    cfg = effective_config(args)
    spec = NetworkSpec.from_json(cfg.cnn.spec) if cfg.cnn.spec else alexnet_spec(cfg.normalization.n0)
    if cfg.cnn.weights:
        weights = load_weights(cfg.cnn.weights)
    else:
        weights = random_weights(spec, derive_seed(cfg.cross_validation.seed, "cnn"))
    mean_image = np.load(cfg.cnn.mean_image) if cfg.cnn.mean_image else None
    extractor = FeatureExtractor(spec, weights, cfg.cnn.tap, cfg.cnn.channel_means, mean_image)

    directory, name_prefix = _split_prefix(args.stack_prefix)
    planes = sorted(directory.glob(f"{name_prefix}*_r.png"))
    if not planes:
        raise ValidationError(f"3 チャンネル画像が見つかりません: {args.stack_prefix}*_r.png")
    stack_prefixes = [p.with_name(p.name[: -len("_r.png")]) for p in planes]
    vectors = ordered_map(lambda p: extractor.extract(load_stack(p)), stack_prefixes, args.threads)

    records = [[p.name[len(name_prefix):] or p.name] + v.values.tolist()
               for p, v in zip(stack_prefixes, vectors)]
    frame = pd.DataFrame(records, columns=["sample_id"] + list(vectors[0].names))
    header = _header(cfg, tap=cfg.cnn.tap)
    out = Path(args.out)
    out.parent.mkdir(parents=True, exist_ok=True)
    with open(out, "w", encoding="utf-8", newline="") as f:
        f.write("# " + " ".join(f"{k}={v}" for k, v in header.items()) + "\n")
        frame.to_csv(f, index=False, float_format="%.10g", lineterminator="\n")
    logger.info("CNN 特徴量を保存しました: %d 件 -> %s", len(records), out)
    return 0


def _split_prefix(text: str):
    """末尾が区切り文字ならディレクトリ、そうでなければディレクトリ + ファイル名接頭辞"""
    path = Path(text)
    if text.endswith(("/", "\\")) or path.is_dir():
        return path, ""
    return path.parent, path.name


def cmd_train(args: argparse.Namespace) -> int:
    cfg = effective_config(args)
    feature_set = FeatureSet.parse(args.set)
    df = DataLoader().load_features(args.features)
    data = side_split(dataset_from_frame(df, feature_set), args.side)
    svm_cfg = cfg.svm
    model = train(TrainingSet(features=data.features, labels=data.labels, names=data.names),
                  c=svm_cfg.c, eps=svm_cfg.eps, max_iter=svm_cfg.max_iter,
                  seed=derive_seed(cfg.cross_validation.seed, "train"),
                  scaling=svm_cfg.scaling, bias=svm_cfg.bias, debug=args.debug)
    model = replace(model, meta=_header(cfg, feature_set=feature_set.value, side=args.side))
    Path(args.model).parent.mkdir(parents=True, exist_ok=True)
    model.to_json(args.model)
    logger.info("モデルを保存しました: %s (%d 次元, %d エポック)", args.model, model.dim, model.epochs)
    return 0


def cmd_predict(args: argparse.Namespace) -> int:
    model = SvmModel.from_json(args.model)
    df = DataLoader().load_features(args.features)
    missing = [c for c in model.feature_schema if c not in df.columns]
    if missing:
        raise ValidationError(f"特徴量ファイルにモデルの列がありません: {missing[:5]} ...")
    values = decision_values(model, df[list(model.feature_schema)].to_numpy(dtype=np.float64))
    out = pd.DataFrame({"sample_id": df["sample_id"], "decision": values,
                        "predicted": predict_labels(values)})
    if "label" in df.columns:
        out["label"] = df["label"].values
    header = {"renoscan": __version__,
              "config_hash": model.meta.get("config_hash", "unknown"),
              "model_hash": hash_payload(model.to_dict())}
    DataLoader().save_table(out, args.out, header)
    return 0


def cmd_cv(args: argparse.Namespace) -> int:
    cfg = effective_config(args)
    feature_set = FeatureSet.parse(args.set)
    df = DataLoader().load_features(args.features)
    data = side_split(dataset_from_frame(df, feature_set), args.side)
    report = cross_validate_with_config(data, cfg.cross_validation, cfg.svm, side=args.side,
                                        threads=args.threads)
    report.meta = _header(cfg, feature_set=feature_set.value)
    report.to_json(args.out)
    if args.roc:
        write_roc(report, args.roc)
    if args.roc_plot:
        plot_roc_curves({feature_set.value: report}, args.roc_plot, title=f"ROC ({args.side})")
    print(f"{feature_set.value} [{args.side}]: {report.summary()}")
    return 0


def cmd_compare(args: argparse.Namespace) -> int:
    cfg = effective_config(args)
    out_dir = Path(args.out_dir)
    if args.features:
        frame = DataLoader().load_features(args.features)
        out_dir.mkdir(parents=True, exist_ok=True)
        comparison = compare_frame(frame, cfg, TABLE_ORDER, SIDE_CHOICES, args.threads,
                                   meta=_header(cfg))
        comparison.save(out_dir)
    elif args.manifest:
        comparison = compare_feature_sets(_load_manifest(args), out_dir, cfg,
                                          skip_bad=args.skip_bad, threads=args.threads,
                                          use_cache=not args.no_cache)
    else:
        raise ValidationError("--manifest または --features のいずれかを指定してください")
    both = {fs.value: comparison.reports[(fs.value, "both")] for fs in comparison.feature_sets}
    plot_roc_curves(both, out_dir / "roc_both.png", title="ROC (both)")
    print(comparison.grid().to_string())
    return 0


def cmd_phantom_gen(args: argparse.Namespace) -> int:
    generate_corpus(args.out_dir, n_normal=args.normal, n_cakut=args.cakut,
                    seed=args.seed if args.seed is not None else 7, size=args.image_size)
    return 0


def cmd_run(args: argparse.Namespace) -> int:
    cfg = effective_config(args)
    result = run_pipeline(_load_manifest(args), FeatureSet.parse(args.set), args.out_dir, cfg,
                          sides=args.sides or SIDE_CHOICES, skip_bad=args.skip_bad,
                          threads=args.threads, use_cache=not args.no_cache)
    for side, report in result.reports.items():
        print(f"{args.set} [{side}]: {report.summary()}")
    return 0


# ---- パーサ ----

def _common_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="追加の設定ファイル (JSON)")
    common.add_argument("--threads", type=int, default=None,
                        help="スレッド数（既定: RENOSCAN_THREADS または settings.json）")
    common.add_argument("-v", "--verbose", action="store_true", help="DEBUG ログを出力")
    common.add_argument("--log-level", help="ログレベル（既定: user_settings.json の log_level）")

    g = common.add_argument_group("設定の上書き")
    g.add_argument("--n0", "--size", dest="n0", type=int)
    g.add_argument("--margin", type=float)
    g.add_argument("--scaling-mode", dest="scaling_mode", choices=["anisotropic", "isotropic"])
    g.add_argument("--canny-sigma", type=float)
    g.add_argument("--canny-low", type=float)
    g.add_argument("--canny-high", type=float)
    g.add_argument("--dt-squared", action="store_const", const=True)
    g.add_argument("--dt-source", choices=["edges", "intensity"])
    g.add_argument("--hog-cell-divisor", type=int)
    g.add_argument("--hog-channel", choices=["r", "g", "b"])
    g.add_argument("--spec", help="ネットワーク定義 JSON")
    g.add_argument("--weights", help="重みアーカイブ（ディレクトリまたは zip）")
    g.add_argument("--tap", help="特徴量を取り出す層名（既定: relu7）")
    g.add_argument("--mean-image", help="平均画像 (.npy)")
    g.add_argument("--c", type=float)
    g.add_argument("--eps", type=float)
    g.add_argument("--max-iter", type=int)
    g.add_argument("--scale", choices=["minmax", "standard", "none"])
    g.add_argument("--bias", action="store_const", const=True)
    g.add_argument("--k", type=int)
    g.add_argument("--repeats", type=int)
    g.add_argument("--seed", type=int)
    g.add_argument("--group-by-subject", action="store_const", const=True)
    return common


def build_parser() -> argparse.ArgumentParser:
    common = _common_parser()
    parser = argparse.ArgumentParser(prog="renoscan",
                                     description="超音波腎臓画像による CAKUT 分類パイプライン")
    parser.add_argument("--version", action="version", version=f"renoscan {__version__}")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("normalize", parents=[common], help="楕円フィットと画像正規化")
    p.add_argument("--manifest")
    p.add_argument("--out-dir")
    p.add_argument("--image", help="単一画像モード: 入力画像")
    p.add_argument("--mask", help="単一画像モード: 腎臓マスク")
    p.add_argument("--out", help="単一画像モード: 出力 PNG（_mask.png と .json も作成）")
    p.add_argument("--skip-bad", action="store_true")
    p.set_defaults(func=cmd_normalize)

    p = sub.add_parser("featmaps", parents=[common], help="3 チャンネル特徴マップの生成")
    p.add_argument("--manifest")
    p.add_argument("--out-dir")
    p.add_argument("--image", help="単一画像モード: 正規化済み画像")
    p.add_argument("--mask", help="単一画像モード: 正規化済みマスク")
    p.add_argument("--out-prefix", help="単一画像モード: <prefix>_r.png などを出力")
    p.add_argument("--skip-bad", action="store_true")
    p.set_defaults(func=cmd_featmaps)

    p = sub.add_parser("features", parents=[common], help="特徴量 CSV の作成")
    p.add_argument("--manifest", required=True)
    p.add_argument("--set", default="cnn+hog+geome", help="特徴量セット（例: hog+geome, all）")
    p.add_argument("--out", required=True)
    p.add_argument("--cache-dir")
    p.add_argument("--no-cache", action="store_true")
    p.add_argument("--skip-bad", action="store_true")
    p.set_defaults(func=cmd_features)

    p = sub.add_parser("cnn-extract", parents=[common], help="保存済み 3 チャンネル画像から CNN 特徴量")
    p.add_argument("--stack-prefix", required=True, help="<prefix>*_r.png / _g.png / _b.png")
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_cnn_extract)

    p = sub.add_parser("train", parents=[common], help="線形 SVM の学習")
    p.add_argument("--features", required=True)
    p.add_argument("--set", default="cnn+hog+geome")
    p.add_argument("--side", choices=SIDE_CHOICES, default="both")
    p.add_argument("--model", required=True)
    p.add_argument("--debug", action="store_true", help="双対目的関数の単調性を検査")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("predict", parents=[common], help="決定値とラベルの予測")
    p.add_argument("--model", required=True)
    p.add_argument("--features", required=True)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_predict)

    p = sub.add_parser("cv", parents=[common], help="繰り返し層化 k-fold 交差検証")
    p.add_argument("--features", required=True)
    p.add_argument("--set", default="cnn+hog+geome")
    p.add_argument("--side", choices=SIDE_CHOICES, default="both")
    p.add_argument("--out", required=True)
    p.add_argument("--roc", help="ROC 点列 CSV (threshold, fpr, tpr)")
    p.add_argument("--roc-plot", help="ROC 図 (PNG)")
    p.set_defaults(func=cmd_cv)

    p = sub.add_parser("compare", parents=[common], help="7 種類の特徴量セットの比較表")
    p.add_argument("--manifest")
    p.add_argument("--features", help="全ファミリーを含む特徴量 CSV")
    p.add_argument("--out-dir", required=True)
    p.add_argument("--no-cache", action="store_true")
    p.add_argument("--skip-bad", action="store_true")
    p.set_defaults(func=cmd_compare)

    p = sub.add_parser("phantom-gen", parents=[common], help="合成ファントムコーパスの生成")
    p.add_argument("--out-dir", required=True)
    p.add_argument("--normal", type=int, default=25)
    p.add_argument("--cakut", type=int, default=25)
    p.add_argument("--image-size", type=int, default=160, help="ファントム画像の一辺")
    p.set_defaults(func=cmd_phantom_gen)

    p = sub.add_parser("run", parents=[common], help="特徴量抽出から交差検証まで一括実行")
    p.add_argument("--manifest", required=True)
    p.add_argument("--set", default="cnn+hog+geome")
    p.add_argument("--out-dir", required=True)
    p.add_argument("--sides", nargs="+", choices=SIDE_CHOICES)
    p.add_argument("--no-cache", action="store_true")
    p.add_argument("--skip-bad", action="store_true")
    p.set_defaults(func=cmd_run)
    return parser


def main(argv: Optional[List[str]] = None) -> int:
    """メイン関数"""
    parser = build_parser()
    args = parser.parse_args(argv)
    configure_logging("DEBUG" if args.verbose else (args.log_level or load_settings().log_level))
    try:
        return args.func(args) or 0
    except RenoscanError as e:
        logger.error("%s", e)
        return e.exit_code


if __name__ == "__main__":
    sys.exit(main())
