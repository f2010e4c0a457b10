"""
core: 腎臓画像分類のコア計算機能

画像の正規化、特徴マップと特徴量の計算、CNN 推論、SVM 学習、
交差検証、パイプラインの実行が含まれています。
"""

from .data_loader import DataLoader
from .feature_sets import FeatureSet, FeatureVector
from .normalize import EllipseFit, fit_ellipse, normalize_kidney
from .featuremaps import ChannelStack, build_stack, distance_transform
from .descriptors import geometric_features, hog
from .cnn import FeatureExtractor, NetworkSpec, alexnet_spec, forward, load_weights
from .svm import SvmModel, TrainingSet, decision_value, train
from .evaluation import CvReport, Dataset, auc, cross_validate, side_split, stratified_kfold
from .pipeline import FeaturePipeline, compare_feature_sets, run_pipeline

__all__ = [
    "DataLoader",
    "FeatureSet",
    "FeatureVector",
    "EllipseFit",
    "fit_ellipse",
    "normalize_kidney",
    "ChannelStack",
    "build_stack",
    "distance_transform",
    "geometric_features",
    "hog",
    "FeatureExtractor",
    "NetworkSpec",
    "alexnet_spec",
    "forward",
    "load_weights",
    "SvmModel",
    "TrainingSet",
    "decision_value",
    "train",
    "CvReport",
    "Dataset",
    "auc",
    "cross_validate",
    "side_split",
    "stratified_kfold",
    "FeaturePipeline",
    "compare_feature_sets",
    "run_pipeline",
]
