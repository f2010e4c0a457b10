"""
config.py - パイプライン設定の読み込みと管理

config/default_params.json と同じ構造を持つ frozen dataclass の木で
パイプライン全体のパラメータを表します。読み込み順序は
既定値 → 設定ファイル (--config) → CLI フラグ です。
"""

import dataclasses
import hashlib
import json
import logging
import os
import typing
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Dict, Optional, Tuple, Union

from ..exceptions import ValidationError

logger = logging.getLogger(__name__)

PROJECT_ROOT = Path(__file__).resolve().parents[3]
CONFIG_DIR = PROJECT_ROOT / "config"
CONFIG_DIR_ENV = "RENOSCAN_CONFIG_DIR"


def config_dir() -> Path:
    """設定ディレクトリ（環境変数 RENOSCAN_CONFIG_DIR が優先）"""
    override = os.environ.get(CONFIG_DIR_ENV)
    return Path(override) if override else CONFIG_DIR


@dataclass(frozen=True)
class NormalizationConfig:
    n0: int = 227
    margin: float = 0.9
    scaling: str = "anisotropic"

    def __post_init__(self):
        if self.n0 < 32:
            raise ValidationError(f"n0 は 32 以上が必要です: {self.n0}")
        if not 0.0 < self.margin <= 1.0:
            raise ValidationError(f"margin は (0, 1] の範囲が必要です: {self.margin}")
        if self.scaling not in ("anisotropic", "isotropic"):
            raise ValidationError(f"未知のスケーリング方式: {self.scaling}")


@dataclass(frozen=True)
class CannyConfig:
    sigma: float = 1.4
    low_frac: float = 0.1
    high_frac: float = 0.2

    def __post_init__(self):
        if not 0.0 < self.low_frac < self.high_frac <= 1.0:
            raise ValidationError(
                f"0 < low_frac < high_frac <= 1 が必要です: {self.low_frac}, {self.high_frac}"
            )
        if self.sigma < 0:
            raise ValidationError(f"sigma は非負が必要です: {self.sigma}")


@dataclass(frozen=True)
class FeatureMapConfig:
    canny: CannyConfig = field(default_factory=CannyConfig)
    dt_squared: bool = False
    dt_source: str = "edges"
    gradient_eps: float = 1e-6

    def __post_init__(self):
        if self.dt_source not in ("edges", "intensity"):
            raise ValidationError(f"未知の距離変換ソース: {self.dt_source}")


@dataclass(frozen=True)
class HogConfig:
    cell_divisor: int = 10
    orientations: int = 9
    clip: float = 0.2
    channel: str = "r"

    def __post_init__(self):
        if self.channel not in ("r", "g", "b"):
            raise ValidationError(f"HOG の入力チャンネルは r/g/b のいずれか: {self.channel}")
        if self.cell_divisor < 1 or self.orientations < 1:
            raise ValidationError("cell_divisor と orientations は正の整数が必要です")

    def cell_size(self, n0: int) -> int:
        return n0 // self.cell_divisor


@dataclass(frozen=True)
class CnnConfig:
    spec: Optional[str] = None
    weights: Optional[str] = None
    tap: str = "relu7"
    channel_means: Tuple[float, float, float] = (0.0, 0.0, 0.0)
    mean_image: Optional[str] = None

    def __post_init__(self):
        if len(self.channel_means) != 3:
            raise ValidationError("channel_means は 3 要素が必要です")


@dataclass(frozen=True)
class SvmConfig:
    c: float = 1.0
    eps: float = 0.1
    max_iter: int = 1000
    scaling: str = "minmax"
    bias: bool = False

    def __post_init__(self):
        if self.c <= 0:
            raise ValidationError(f"C は正の値が必要です: {self.c}")
        if self.eps <= 0 or self.max_iter < 1:
            raise ValidationError("eps > 0 かつ max_iter >= 1 が必要です")
        if self.scaling not in ("minmax", "standard", "none"):
            raise ValidationError(f"未知の特徴量スケーリング: {self.scaling}")


@dataclass(frozen=True)
class CrossValidationConfig:
    k: int = 10
    repeats: int = 100
    seed: int = 7
    group_by_subject: bool = False

    def __post_init__(self):
        if self.k < 2 or self.repeats < 1:
            raise ValidationError("k >= 2 かつ repeats >= 1 が必要です")


@dataclass(frozen=True)
class PipelineConfig:
    """パイプライン全体の設定"""

    normalization: NormalizationConfig = field(default_factory=NormalizationConfig)
    feature_maps: FeatureMapConfig = field(default_factory=FeatureMapConfig)
    hog: HogConfig = field(default_factory=HogConfig)
    cnn: CnnConfig = field(default_factory=CnnConfig)
    svm: SvmConfig = field(default_factory=SvmConfig)
    cross_validation: CrossValidationConfig = field(default_factory=CrossValidationConfig)

    @classmethod
    def from_dict(cls, data: Dict[str, Any]) -> "PipelineConfig":
        return _build(cls, data, "")

    def to_dict(self) -> Dict[str, Any]:
        return _to_plain(dataclasses.asdict(self))

    def merged(self, overrides: Dict[str, Any]) -> "PipelineConfig":
        """ネストした辞書で一部の値を上書きした新しい設定を返す"""
        return PipelineConfig.from_dict(deep_merge(self.to_dict(), overrides))

    def stage_dict(self, *sections: str) -> Dict[str, Any]:
        full = self.to_dict()
        return {name: full[name] for name in sections}

    def config_hash(self) -> str:
        return hash_payload(self.to_dict())


@dataclass(frozen=True)
class AppSettings:
    name: str = "renoscan"
    version: str = "0.1.0"
    max_threads: int = 4
    log_level: str = "INFO"


def hash_payload(payload: Any) -> str:
    """JSON 化可能なオブジェクトの正規化 SHA-256"""
    text = json.dumps(payload, sort_keys=True, separators=(",", ":"))
    return hashlib.sha256(text.encode("utf-8")).hexdigest()


def deep_merge(base: Dict[str, Any], overrides: Dict[str, Any]) -> Dict[str, Any]:
    result = dict(base)
    for key, value in overrides.items():
        if isinstance(value, dict) and isinstance(result.get(key), dict):
            result[key] = deep_merge(result[key], value)
        else:
            result[key] = value
    return result


def load_config(path: Optional[Union[str, Path]] = None) -> PipelineConfig:
    """
    設定を読み込み

    Args:
        path: 追加の設定ファイル (JSON)。None の場合は既定値のみ

    Returns:
        既定値 → config/default_params.json → path の順にマージした設定
    """
    data = _optional_json(config_dir() / "default_params.json")
    if path is not None:
        path = Path(path)
        if not path.exists():
            raise ValidationError(f"設定ファイルが見つかりません: {path}")
        data = deep_merge(data, _read_json(path))
    return PipelineConfig.from_dict(data)


def load_settings() -> AppSettings:
    """config/settings.json と user_settings.json からアプリケーション設定を取得"""
    raw = _optional_json(config_dir() / "settings.json")
    user = _optional_json(config_dir() / "user_settings.json").get("user_preferences", {})
    application = raw.get("application", {})
    performance = raw.get("performance", {})
    defaults = AppSettings()
    return AppSettings(
        name=application.get("name", defaults.name),
        version=application.get("version", defaults.version),
        max_threads=int(performance.get("max_threads", defaults.max_threads)),
        log_level=str(user.get("log_level", defaults.log_level)),
    )


def _optional_json(path: Path) -> Dict[str, Any]:
    if not path.exists():
        logger.debug("設定ファイルがないため既定値を使用します: %s", path)
        return {}
    return _read_json(path)


def _read_json(path: Path) -> Dict[str, Any]:
    try:
        with open(path, "r", encoding="utf-8") as f:
            return json.load(f)
    except json.JSONDecodeError as e:
        raise ValidationError(f"設定ファイルの解析に失敗: {path}: {e}")


def _build(cls, data: Dict[str, Any], prefix: str):
    if not isinstance(data, dict):
        raise ValidationError(f"設定セクション '{prefix or 'root'}' は辞書が必要です")
    hints = typing.get_type_hints(cls)
    known = {f.name for f in dataclasses.fields(cls)}
    unknown = set(data) - known
    if unknown:
        raise ValidationError(f"未知の設定キー: {', '.join(sorted(prefix + k for k in unknown))}")
    kwargs = {}
    for f in dataclasses.fields(cls):
        if f.name not in data:
            continue
        value = data[f.name]
        hint = hints[f.name]
        if dataclasses.is_dataclass(hint):
            kwargs[f.name] = _build(hint, value, f"{prefix}{f.name}.")
        elif typing.get_origin(hint) is tuple:
            kwargs[f.name] = tuple(float(v) for v in value)
        elif hint is float:
            kwargs[f.name] = float(value)
        elif hint is int and not isinstance(value, bool):
            kwargs[f.name] = int(value)
        else:
            kwargs[f.name] = value
    return cls(**kwargs)


def _to_plain(value):
    if isinstance(value, dict):
        return {k: _to_plain(v) for k, v in value.items()}
    if isinstance(value, (list, tuple)):
        return [_to_plain(v) for v in value]
    return value
