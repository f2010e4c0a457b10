"""
svm.py - 線形 SVM（L2 正則化・L1 損失）の双対座標降下法

    min_w  ½ wᵀw + C Σ max(0, 1 − y_i wᵀf_i)

を双対問題 0 ≤ α_i ≤ C 上の座標降下で解きます。バイアス項はなく、
予測ラベルは sign(wᵀf)（0 は +1）です。
"""

import json
import logging
from dataclasses import dataclass, field
from pathlib import Path
from typing import Dict, Optional, Sequence, Tuple, Union

import numpy as np
from sklearn.preprocessing import MinMaxScaler, StandardScaler

from ..exceptions import DimensionMismatchError, NumericError, ValidationError
from ..utils.config import SvmConfig

logger = logging.getLogger(__name__)

SCHEMA_VERSION = 1
BIAS_FEATURE = "__bias__"


@dataclass(frozen=True, eq=False)
class TrainingSet:
    """学習データ（行 = 特徴ベクトル、ラベルは ±1）"""

    features: np.ndarray
    labels: np.ndarray
    names: Tuple[str, ...] = ()

    def __post_init__(self):
        x = np.asarray(self.features, dtype=np.float64)
        y = np.asarray(self.labels, dtype=np.int64).ravel()
        if x.ndim != 2:
            raise ValidationError(f"特徴量行列は 2 次元が必要です: {x.shape}")
        if x.shape[0] != y.size:
            raise DimensionMismatchError(f"行数 {x.shape[0]} とラベル数 {y.size} が一致しません")
        if not np.all(np.isin(y, (-1, 1))):
            raise ValidationError("ラベルは -1 または +1 である必要があります")
        if not np.all(np.isfinite(x)):
            raise NumericError("特徴量に非有限値が含まれています")
        names = tuple(self.names) or tuple(f"f{i}" for i in range(x.shape[1]))
        if len(names) != x.shape[1]:
            raise DimensionMismatchError(f"列名の数 {len(names)} != 次元 {x.shape[1]}")
        object.__setattr__(self, "features", x)
        object.__setattr__(self, "labels", y)
        object.__setattr__(self, "names", names)

    @property
    def size(self) -> int:
        return self.labels.size

    @property
    def dim(self) -> int:
        return self.features.shape[1]


@dataclass(frozen=True, eq=False)
class FeatureScaler:
    """
    学習データから推定した特徴量ごとのアフィン変換 x' = x·scale + offset

    scikit-learn のスケーラで推定し、係数だけを保持します。
    """

    kind: str
    scale: np.ndarray
    offset: np.ndarray

    @classmethod
    def fit(cls, x: np.ndarray, kind: str = "minmax") -> Optional["FeatureScaler"]:
        if kind == "none":
            return None
        if kind == "minmax":
            est = MinMaxScaler().fit(x)
            scale, offset = est.scale_, est.min_
        elif kind == "standard":
            est = StandardScaler().fit(x)
            scale = 1.0 / est.scale_
            offset = -est.mean_ * scale
        else:
            raise ValidationError(f"未知の特徴量スケーリング: {kind}")
        return cls(kind=kind, scale=np.asarray(scale, dtype=np.float64),
                   offset=np.asarray(offset, dtype=np.float64))

    @property
    def dim(self) -> int:
        return self.scale.size

    def transform(self, x: np.ndarray) -> np.ndarray:
        x = np.asarray(x, dtype=np.float64)
        if x.shape[-1] != self.dim:
            raise DimensionMismatchError(f"特徴量次元 {x.shape[-1]} != スケーラ次元 {self.dim}")
        return x * self.scale + self.offset

    def to_dict(self) -> dict:
        return {"kind": self.kind, "scale": self.scale.tolist(), "offset": self.offset.tolist()}

    @classmethod
    def from_dict(cls, data: Optional[dict]) -> Optional["FeatureScaler"]:
        if data is None:
            return None
        return cls(kind=data["kind"], scale=np.asarray(data["scale"], dtype=np.float64),
                   offset=np.asarray(data["offset"], dtype=np.float64))


@dataclass(frozen=True, eq=False)
class SvmModel:
    """学習済み線形 SVM（不変）"""

    w: np.ndarray
    c: float
    feature_schema: Tuple[str, ...]
    scaler: Optional[FeatureScaler] = None
    bias: bool = False
    alpha: Optional[np.ndarray] = field(default=None, repr=False)
    epochs: int = 0
    meta: Dict[str, str] = field(default_factory=dict)

    def __post_init__(self):
        w = np.asarray(self.w, dtype=np.float64).ravel()
        if not np.all(np.isfinite(w)):
            raise NumericError("重みベクトルに非有限値が含まれています")
        object.__setattr__(self, "w", w)
        object.__setattr__(self, "feature_schema", tuple(self.feature_schema))
        expected = len(self.feature_schema) + (1 if self.bias else 0)
        if w.size != expected:
            raise DimensionMismatchError(f"w の次元 {w.size} != {expected}")
        if self.scaler is not None and self.scaler.dim != len(self.feature_schema):
            raise DimensionMismatchError("スケーラの次元が特徴量スキーマと一致しません")

    @property
    def dim(self) -> int:
        return len(self.feature_schema)

    def prepare(self, x: np.ndarray) -> np.ndarray:
        """スケーリングとバイアス列の付加"""
        x = np.asarray(x, dtype=np.float64)
        if x.shape[-1] != self.dim:
            raise DimensionMismatchError(f"特徴量次元 {x.shape[-1]} != モデル次元 {self.dim}")
        if self.scaler is not None:
            x = self.scaler.transform(x)
        if self.bias:
            ones = np.ones(x.shape[:-1] + (1,))
            x = np.concatenate([x, ones], axis=-1)
        return x

    def to_dict(self) -> dict:
        return {
            "schema_version": SCHEMA_VERSION,
            "meta": dict(self.meta),
            "feature_schema": list(self.feature_schema),
            "scaler": self.scaler.to_dict() if self.scaler is not None else None,
            "C": self.c,
            "bias": self.bias,
            "w": self.w.tolist(),
        }

    @classmethod
    def from_dict(cls, data: dict) -> "SvmModel":
        version = data.get("schema_version")
        if version != SCHEMA_VERSION:
            raise ValidationError(f"未対応のモデルスキーマ: {version}")
        return cls(w=np.asarray(data["w"]), c=float(data["C"]),
                   feature_schema=tuple(data["feature_schema"]),
                   scaler=FeatureScaler.from_dict(data.get("scaler")),
                   bias=bool(data.get("bias", False)),
                   meta=dict(data.get("meta") or {}))

    def to_json(self, path: Union[str, Path]) -> None:
        with open(path, "w", encoding="utf-8") as f:
            json.dump(self.to_dict(), f, indent=2)

    @classmethod
    def from_json(cls, path: Union[str, Path]) -> "SvmModel":
        path = Path(path)
        if not path.exists():
            raise ValidationError(f"モデルファイルが見つかりません: {path}")
        with open(path, "r", encoding="utf-8") as f:
            return cls.from_dict(json.load(f))


def primal_objective(w: np.ndarray, x: np.ndarray, y: np.ndarray, c: float) -> float:
    margins = y * (x @ w)
    return 0.5 * float(w @ w) + c * float(np.maximum(0.0, 1.0 - margins).sum())


def dual_objective(alpha: np.ndarray, w: np.ndarray) -> float:
    """Σα − ½‖w‖²（w = Σ α_i y_i f_i）"""
    return float(alpha.sum()) - 0.5 * float(w @ w)


def dual_coordinate_descent(x: np.ndarray, y: np.ndarray, c: float, eps: float = 0.1,
                            max_iter: int = 1000, seed: int = 0,
                            debug: bool = False) -> Tuple[np.ndarray, np.ndarray, int]:
    """
    双対座標降下法の本体

    Returns:
        (w, alpha, エポック数)

    Raises:
        NumericError: debug 時に双対目的関数が減少した場合
    """
    n, d = x.shape
    rng = np.random.default_rng(seed)
    alpha = np.zeros(n)
    w = np.zeros(d)
    qii = np.einsum("ij,ij->i", x, x)
    active = np.flatnonzero(qii > 0)
    yf = y.astype(np.float64)
    previous = 0.0
    epoch = 0
    for epoch in range(1, max_iter + 1):
        max_violation = 0.0
        for i in rng.permutation(active):
            xi = x[i]
            g = yf[i] * float(w @ xi) - 1.0
            a = alpha[i]
            if a == 0.0:
                pg = min(g, 0.0)
            elif a == c:
                pg = max(g, 0.0)
            else:
                pg = g
            max_violation = max(max_violation, abs(pg))
            if pg != 0.0:
                new = min(max(a - g / qii[i], 0.0), c)
                alpha[i] = new
                w += (new - a) * yf[i] * xi
        if debug:
            current = dual_objective(alpha, w)
            if current < previous - 1e-9 * max(1.0, abs(previous)):
                raise NumericError(f"双対目的関数が減少しました (epoch {epoch}: {previous} -> {current})")
            previous = current
        logger.debug("epoch %d: 最大射影勾配 %.3g", epoch, max_violation)
        if max_violation < eps:
            break
    else:
        logger.warning("最大エポック数 %d に達しました（収束未達）", max_iter)
    if not np.all(np.isfinite(w)):
        raise NumericError("学習結果の重みに非有限値が含まれています")
    return w, alpha, epoch


def train(data: TrainingSet, c: float = 1.0, eps: float = 0.1, max_iter: int = 1000,
          seed: int = 0, scaling: str = "minmax", bias: bool = False,
          debug: bool = False) -> SvmModel:
    """
    線形 SVM を学習

    Args:
        data: 学習データ（両クラスを含むこと）
        c: 正則化定数 C
        eps: 射影勾配の停止閾値
        max_iter: 最大エポック数
        seed: 座標の巡回順序を決める乱数シード
        scaling: "minmax" / "standard" / "none"（学習データのみから推定）
        bias: 定数 1 の特徴量を付加するか
        debug: エポックごとに双対目的関数の単調性を検査
    """
    if c <= 0:
        raise ValidationError(f"C は正の値が必要です: {c}")
    classes = set(np.unique(data.labels).tolist())
    if classes != {-1, 1}:
        raise ValidationError(f"学習データに両クラスが必要です（含まれるラベル: {sorted(classes)}）")

    scaler = FeatureScaler.fit(data.features, scaling)
    x = scaler.transform(data.features) if scaler is not None else data.features
    if bias:
        x = np.concatenate([x, np.ones((x.shape[0], 1))], axis=1)
    w, alpha, epochs = dual_coordinate_descent(x, data.labels, c, eps, max_iter, seed, debug)
    logger.debug("SVM 学習完了: l=%d, d=%d, epochs=%d", data.size, data.dim, epochs)
    return SvmModel(w=w, c=c, feature_schema=data.names, scaler=scaler, bias=bias,
                    alpha=alpha, epochs=epochs)


def train_with_config(data: TrainingSet, cfg: SvmConfig, seed: int = 0) -> SvmModel:
    return train(data, c=cfg.c, eps=cfg.eps, max_iter=cfg.max_iter, seed=seed,
                 scaling=cfg.scaling, bias=cfg.bias)


def decision_values(model: SvmModel, x: np.ndarray) -> np.ndarray:
    """行列 x の各行の決定値 wᵀf"""
    x = np.atleast_2d(np.asarray(x, dtype=np.float64))
    return model.prepare(x) @ model.w


def decision_value(model: SvmModel, f: Union[np.ndarray, Sequence[float]]) -> float:
    f = np.asarray(getattr(f, "values", f), dtype=np.float64).ravel()
    return float(decision_values(model, f[None, :])[0])


def predict_label(value: float) -> int:
    """決定値の符号（0 は +1）"""
    return 1 if value >= 0 else -1


def predict_labels(values: np.ndarray) -> np.ndarray:
    return np.where(np.asarray(values) >= 0, 1, -1)
