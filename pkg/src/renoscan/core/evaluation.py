"""
evaluation.py - 層化 k-fold 交差検証と ROC / AUC

k-fold 交差検証を複数回繰り返し、反復ごとの正解率と AUC、その平均と
標準偏差、全反復をプールした ROC 曲線を求めます。スケーラと SVM は
各 fold の学習行だけから推定します。
"""

import json
import logging
from dataclasses import dataclass, field
from pathlib import Path
from typing import Dict, List, Optional, Sequence, Tuple, Union

import numpy as np
import pandas as pd
from scipy.stats import rankdata
from sklearn.metrics import roc_curve
from sklearn.model_selection import StratifiedGroupKFold, StratifiedKFold

from ..exceptions import DimensionMismatchError, EmptySelectionError, ValidationError
from ..utils.config import CrossValidationConfig, SvmConfig
from ..utils.parallel import ordered_map
from ..utils.seeding import derive_seed
from .data_loader import parse_label, parse_side
from .feature_sets import FeatureSet, select_columns
from .svm import SvmModel, TrainingSet, decision_values, predict_labels, train_with_config

logger = logging.getLogger(__name__)

SIDE_CHOICES = ("left", "right", "both")


@dataclass(frozen=True, eq=False)
class Dataset:
    """
    評価用データセット（列指向）

    Attributes:
        sample_ids, subject_ids, sides: サンプルごとの識別情報
        labels: ±1 のラベル
        features: (サンプル数, 次元) の特徴量行列
        names: 特徴量の列名
        feature_set: 特徴量セット
    """

    sample_ids: Tuple[str, ...]
    subject_ids: Tuple[str, ...]
    sides: Tuple[str, ...]
    labels: np.ndarray
    features: np.ndarray
    names: Tuple[str, ...]
    feature_set: Optional[FeatureSet] = None

    def __post_init__(self):
        labels = np.asarray(self.labels, dtype=np.int64).ravel()
        features = np.asarray(self.features, dtype=np.float64)
        n = labels.size
        if features.ndim != 2 or features.shape[0] != n:
            raise DimensionMismatchError(f"特徴量行列 {features.shape} とサンプル数 {n} が一致しません")
        if features.shape[1] != len(self.names):
            raise DimensionMismatchError("特徴量の次元と列名の数が一致しません")
        if not (len(self.sample_ids) == len(self.subject_ids) == len(self.sides) == n):
            raise DimensionMismatchError("識別情報の長さがサンプル数と一致しません")
        if len(set(self.sample_ids)) != n:
            raise ValidationError("sample_id が重複しています")
        object.__setattr__(self, "labels", labels)
        object.__setattr__(self, "features", features)
        for name in ("sample_ids", "subject_ids", "sides", "names"):
            object.__setattr__(self, name, tuple(getattr(self, name)))

    def __len__(self) -> int:
        return self.labels.size

    @property
    def dim(self) -> int:
        return self.features.shape[1]

    def subset(self, indices: Sequence[int]) -> "Dataset":
        idx = np.asarray(indices, dtype=np.int64)
        return Dataset(
            sample_ids=[self.sample_ids[i] for i in idx],
            subject_ids=[self.subject_ids[i] for i in idx],
            sides=[self.sides[i] for i in idx],
            labels=self.labels[idx],
            features=self.features[idx],
            names=self.names,
            feature_set=self.feature_set,
        )

    def class_counts(self) -> Dict[int, int]:
        return {c: int(np.count_nonzero(self.labels == c)) for c in (-1, 1)}


def dataset_from_frame(df: pd.DataFrame, feature_set: FeatureSet) -> Dataset:
    """特徴量 CSV の DataFrame から feature_set の列を取り出してデータセット化"""
    columns = select_columns(df.columns, feature_set)
    return Dataset(
        sample_ids=df["sample_id"].astype(str).tolist(),
        subject_ids=df["subject_id"].astype(str).tolist(),
        sides=[parse_side(s) for s in df["side"]],
        labels=[parse_label(v) for v in df["label"]],
        features=df[columns].to_numpy(dtype=np.float64),
        names=columns,
        feature_set=feature_set,
    )


def side_split(data: Dataset, side: str) -> Dataset:
    """左右どちらか、または両方（both）のサンプルを抽出"""
    if side not in SIDE_CHOICES:
        raise ValidationError(f"side は {'/'.join(SIDE_CHOICES)} のいずれか: {side!r}")
    if side == "both":
        selected = list(range(len(data)))
    else:
        selected = [i for i, s in enumerate(data.sides) if s == side]
    if not selected:
        present = sorted(set(data.sides)) or ["(なし)"]
        raise EmptySelectionError(
            f"side={side} のサンプルがありません（データに含まれる side: {', '.join(present)}）。"
            f"--side で別の側を指定してください"
        )
    return data.subset(selected)


def stratified_kfold(data: Dataset, k: int, seed: int, group_by_subject: bool = False) -> np.ndarray:
    """
    ラベルで層化した k 分割

    Returns:
        サンプルごとの fold 番号（0..k-1）

    Raises:
        ValidationError: いずれかのクラスのサンプル数が k 未満の場合
    """
    if k < 2:
        raise ValidationError(f"k は 2 以上が必要です: {k}")
    counts = data.class_counts()
    small = {c: n for c, n in counts.items() if n < k}
    if small:
        raise ValidationError(f"クラスのサンプル数が k={k} 未満です: {small}")
    folds = np.full(len(data), -1, dtype=np.int64)
    dummy = np.zeros((len(data), 1))
    if group_by_subject:
        splitter = StratifiedGroupKFold(n_splits=k, shuffle=True, random_state=seed)
        splits = splitter.split(dummy, data.labels, groups=list(data.subject_ids))
    else:
        splitter = StratifiedKFold(n_splits=k, shuffle=True, random_state=seed)
        splits = splitter.split(dummy, data.labels)
    for fold, (_, test_idx) in enumerate(splits):
        folds[test_idx] = fold
    return folds


def auc(scores: Sequence[float], labels: Sequence[int]) -> float:
    """
    Mann–Whitney 統計量による AUC

    (一致ペア数 + ½·同点ペア数) / (正例数 · 負例数)
    """
    scores = np.asarray(scores, dtype=np.float64).ravel()
    labels = np.asarray(labels).ravel()
    if scores.size != labels.size:
        raise DimensionMismatchError("スコアとラベルの数が一致しません")
    positive = labels == 1
    n_pos = int(np.count_nonzero(positive))
    n_neg = labels.size - n_pos
    if n_pos == 0 or n_neg == 0:
        raise ValidationError("AUC には正例と負例の両方が必要です")
    ranks = rankdata(scores)
    u = float(ranks[positive].sum()) - n_pos * (n_pos + 1) / 2.0
    return u / (n_pos * n_neg)


@dataclass(frozen=True, eq=False)
class RocCurve:
    """閾値の降順に並んだ ROC 点列（(0,0) から (1,1) まで）"""

    fpr: np.ndarray
    tpr: np.ndarray
    thresholds: np.ndarray

    def to_frame(self) -> pd.DataFrame:
        return pd.DataFrame({"threshold": self.thresholds, "fpr": self.fpr, "tpr": self.tpr})

    def area(self) -> float:
        return float(np.sum(np.diff(self.fpr) * (self.tpr[1:] + self.tpr[:-1]) / 2.0))


def roc_points(scores: Sequence[float], labels: Sequence[int]) -> RocCurve:
    scores = np.asarray(scores, dtype=np.float64).ravel()
    labels = np.asarray(labels).ravel()
    if len(set(labels.tolist())) < 2:
        raise ValidationError("ROC 曲線には正例と負例の両方が必要です")
    fpr, tpr, thresholds = roc_curve(labels, scores, pos_label=1, drop_intermediate=False)
    # 先頭の閾値（全て負と判定する点）は有限値に置き換える
    thresholds = np.where(np.isfinite(thresholds), thresholds, scores.max() + 1.0)
    return RocCurve(fpr=fpr, tpr=tpr, thresholds=thresholds)


def evaluate_fold(train: Dataset, test: Dataset, svm_cfg: SvmConfig,
                  seed: int = 0) -> Tuple[SvmModel, np.ndarray]:
    """学習行だけでスケーラと SVM を推定し、テスト行の決定値を返す"""
    model = train_with_config(
        TrainingSet(features=train.features, labels=train.labels, names=train.names),
        svm_cfg, seed=seed,
    )
    return model, decision_values(model, test.features)


@dataclass
class RepeatResult:
    folds: np.ndarray
    decisions: np.ndarray
    accuracy: float
    auc: float


@dataclass
class CvReport:
    """交差検証の結果"""

    feature_set: Optional[str]
    side: str
    k: int
    repeats: int
    seed: int
    n_samples: int
    fold_assignments: List[List[int]]
    accuracies: np.ndarray
    aucs: np.ndarray
    roc: RocCurve
    group_by_subject: bool = False
    meta: Dict[str, str] = field(default_factory=dict)

    @property
    def accuracy_mean(self) -> float:
        return float(np.mean(self.accuracies))

    @property
    def accuracy_std(self) -> float:
        return float(np.std(self.accuracies))

    @property
    def auc_mean(self) -> float:
        return float(np.mean(self.aucs))

    @property
    def auc_std(self) -> float:
        return float(np.std(self.aucs))

    def summary(self) -> str:
        return (f"accuracy {self.accuracy_mean:.4f}±{self.accuracy_std * 100:.2f}e-2, "
                f"AUC {self.auc_mean:.4f}±{self.auc_std * 100:.2f}e-2")

    def to_dict(self) -> dict:
        return {
            "meta": dict(self.meta),
            "feature_set": self.feature_set,
            "side": self.side,
            "k": self.k,
            "repeats": self.repeats,
            "seed": self.seed,
            "group_by_subject": self.group_by_subject,
            "n_samples": self.n_samples,
            "accuracy": {"mean": self.accuracy_mean, "std": self.accuracy_std,
                         "std_x100": self.accuracy_std * 100, "per_repeat": self.accuracies.tolist()},
            "auc": {"mean": self.auc_mean, "std": self.auc_std,
                    "std_x100": self.auc_std * 100, "per_repeat": self.aucs.tolist()},
            "fold_assignments": self.fold_assignments,
        }

    def to_json(self, path: Union[str, Path]) -> None:
        path = Path(path)
        path.parent.mkdir(parents=True, exist_ok=True)
        with open(path, "w", encoding="utf-8") as f:
            json.dump(self.to_dict(), f, indent=2, sort_keys=True)
            f.write("\n")


def run_repeat(data: Dataset, repeat: int, k: int, svm_cfg: SvmConfig, seed: int,
               group_by_subject: bool = False) -> RepeatResult:
    """1 回分の k-fold 交差検証"""
    folds = stratified_kfold(data, k, derive_seed(seed, "folds", repeat), group_by_subject)
    decisions = np.zeros(len(data))
    for fold in range(k):
        test_idx = np.flatnonzero(folds == fold)
        train_idx = np.flatnonzero(folds != fold)
        _, values = evaluate_fold(data.subset(train_idx), data.subset(test_idx), svm_cfg,
                                  seed=derive_seed(seed, "svm", repeat, fold))
        decisions[test_idx] = values
    accuracy = float(np.mean(predict_labels(decisions) == data.labels))
    return RepeatResult(folds=folds, decisions=decisions, accuracy=accuracy,
                        auc=auc(decisions, data.labels))


def cross_validate(data: Dataset, k: int = 10, repeats: int = 100,
                   svm_cfg: Optional[SvmConfig] = None, seed: int = 7,
                   group_by_subject: bool = False, side: str = "both",
                   threads: Optional[int] = None) -> CvReport:
    """
    k-fold 交差検証を repeats 回繰り返す

    反復はスレッドで並列に実行しますが、結果は反復番号順に組み立てるため
    逐次実行と同一になります。
    """
    svm_cfg = svm_cfg or SvmConfig()
    results = ordered_map(
        lambda r: run_repeat(data, r, k, svm_cfg, seed, group_by_subject),
        range(repeats), threads,
    )
    pooled_scores = np.concatenate([r.decisions for r in results])
    pooled_labels = np.tile(data.labels, repeats)
    report = CvReport(
        feature_set=data.feature_set.value if data.feature_set is not None else None,
        side=side,
        k=k,
        repeats=repeats,
        seed=seed,
        n_samples=len(data),
        fold_assignments=[r.folds.tolist() for r in results],
        accuracies=np.array([r.accuracy for r in results]),
        aucs=np.array([r.auc for r in results]),
        roc=roc_points(pooled_scores, pooled_labels),
        group_by_subject=group_by_subject,
    )
    logger.info("交差検証 [%s, %s]: %s", report.feature_set, side, report.summary())
    return report


def cross_validate_with_config(data: Dataset, cv_cfg: CrossValidationConfig, svm_cfg: SvmConfig,
                               side: str = "both", threads: Optional[int] = None) -> CvReport:
    return cross_validate(data, k=cv_cfg.k, repeats=cv_cfg.repeats, svm_cfg=svm_cfg,
                          seed=cv_cfg.seed, group_by_subject=cv_cfg.group_by_subject,
                          side=side, threads=threads)
