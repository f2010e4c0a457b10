"""
feature_sets.py - 特徴量ベクトルと特徴量セットの組み合わせ

特徴量ファミリーは CNN、HOG、GEOME の 3 種類で、連結順は常に
CNN → HOG → GEOME に固定します。
"""

from dataclasses import dataclass
from enum import Enum
from typing import Iterable, List, Sequence, Tuple

import numpy as np

from ..exceptions import ValidationError
from .descriptors import geometric_names

FAMILIES = ("CNN", "HOG", "GEOME")
_ALIASES = {"cnn": "CNN", "hog": "HOG", "geome": "GEOME", "geom": "GEOME", "geo": "GEOME"}


class FeatureSet(Enum):
    CNN = "CNN"
    HOG = "HOG"
    GEOME = "GEOME"
    HOG_GEOME = "HOG+GEOME"
    CNN_GEOME = "CNN+GEOME"
    CNN_HOG = "CNN+HOG"
    CNN_HOG_GEOME = "CNN+HOG+GEOME"

    @property
    def families(self) -> Tuple[str, ...]:
        return tuple(self.value.split("+"))

    def includes(self, family: str) -> bool:
        return family in self.families

    @property
    def slug(self) -> str:
        return self.value.lower().replace("+", "_")

    @classmethod
    def parse(cls, text: str) -> "FeatureSet":
        """'cnn+hog+geome'、'geom'、'all' などの表記を解釈"""
        key = text.strip().lower()
        if key == "all":
            return cls.CNN_HOG_GEOME
        parts = set()
        for token in key.replace(",", "+").split("+"):
            token = token.strip()
            if token not in _ALIASES:
                raise ValidationError(f"未知の特徴量ファミリー: {token!r}")
            parts.add(_ALIASES[token])
        value = "+".join(f for f in FAMILIES if f in parts)
        return cls(value)


# 比較表の列順
TABLE_ORDER = [
    FeatureSet.CNN, FeatureSet.HOG, FeatureSet.GEOME, FeatureSet.HOG_GEOME,
    FeatureSet.CNN_GEOME, FeatureSet.CNN_HOG, FeatureSet.CNN_HOG_GEOME,
]


@dataclass(frozen=True, eq=False)
class FeatureVector:
    """名前付き特徴量ベクトル"""

    values: np.ndarray
    names: Tuple[str, ...]
    provenance: FeatureSet

    def __post_init__(self):
        values = np.asarray(self.values, dtype=np.float64).ravel()
        if values.size != len(self.names):
            raise ValidationError(f"特徴量の長さ {values.size} と名前の数 {len(self.names)} が一致しません")
        object.__setattr__(self, "values", values)
        object.__setattr__(self, "names", tuple(self.names))

    def __len__(self) -> int:
        return self.values.size


def family_names(family: str, dim: int) -> List[str]:
    if family == "GEOME":
        return geometric_names()
    prefix = {"CNN": "cnn", "HOG": "hog"}[family]
    return [f"{prefix}_{i:04d}" for i in range(dim)]


def concatenate(vectors: Sequence[FeatureVector]) -> FeatureVector:
    """単一ファミリーのベクトル群を固定順序で連結"""
    by_family = {}
    for v in vectors:
        if len(v.provenance.families) != 1:
            raise ValidationError("連結には単一ファミリーのベクトルを渡してください")
        by_family[v.provenance.value] = v
    ordered = [by_family[f] for f in FAMILIES if f in by_family]
    provenance = FeatureSet("+".join(v.provenance.value for v in ordered))
    values = np.concatenate([v.values for v in ordered])
    names = tuple(n for v in ordered for n in v.names)
    return FeatureVector(values=values, names=names, provenance=provenance)


def feature_schema(feature_set: FeatureSet, dims: dict) -> List[str]:
    """
    特徴量 CSV の列スキーマ

    Args:
        feature_set: 特徴量セット
        dims: ファミリー名 → 次元数（GEOME は 18 固定）
    """
    names: List[str] = []
    for family in feature_set.families:
        names.extend(family_names(family, dims.get(family, 18)))
    return names


def select_columns(columns: Iterable[str], feature_set: FeatureSet) -> List[str]:
    """既存の列名から feature_set に属する列を固定順序で抽出"""
    columns = list(columns)
    prefixes = {"CNN": "cnn_", "HOG": "hog_", "GEOME": "geo_"}
    selected = []
    for family in feature_set.families:
        found = [c for c in columns if c.startswith(prefixes[family])]
        if not found:
            raise ValidationError(f"特徴量ファイルに {family} の列がありません")
        selected.extend(found)
    return selected
